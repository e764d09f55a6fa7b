//! Session loading, PPG resampling and episode slicing.
//!
//! A session on disk is a directory holding a TOML manifest, a frame payload
//! and a PPG text file (one sample per line). The frame payload is either a
//! directory of numbered images or a packed little-endian `f32` array:
//!
//! ```text
//! b"RPPG" | u32 frames | u32 side | u32 channels | f32 data, [T, K, K, C]
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Episode, EpisodeWindow, FrameSequence, PpgTrace, SessionStream};

pub const MANIFEST_NAME: &str = "session.toml";
pub const PACKED_MAGIC: &[u8; 4] = b"RPPG";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    /// Packed array file or directory of images.
    pub frames: PathBuf,
    pub fps: f64,
    pub ppg: PathBuf,
    pub ppg_rate: f64,
    /// Name of the external cropping/masking tool, for provenance only.
    #[serde(default)]
    pub preproc: String,
    #[serde(default)]
    pub notes: String,
}

impl SessionManifest {
    /// Reads a manifest and resolves its relative paths against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut m: SessionManifest = toml::from_str(&text).map_err(|e| Error::DecodeError(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.frames = base.join(&m.frames);
        m.ppg = base.join(&m.ppg);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.fps, self.ppg_rate] {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::BadRate(r));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::DecodeError(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Resample the PPG to the frame rate when they differ.
    pub resample: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { resample: true }
    }
}

pub fn load_session(manifest: &SessionManifest, opts: LoadOptions) -> Result<SessionStream> {
    manifest.validate()?;
    let frames = if manifest.frames.is_dir() {
        read_image_dir(&manifest.frames, manifest.fps)?
    } else {
        read_packed(&manifest.frames, manifest.fps)?
    };
    let mut ppg = read_ppg(&manifest.ppg, manifest.ppg_rate)?;
    if (ppg.rate() - frames.fps()).abs() > 1e-9 {
        if !opts.resample {
            return Err(Error::RateMismatch {
                fps: frames.fps(),
                rate: ppg.rate(),
            });
        }
        ppg = resample_ppg(&ppg, frames.fps())?;
    }
    let n = frames.len().min(ppg.len());
    let frames = if n < frames.len() { frames.window(0, n)? } else { frames };
    let ppg = if n < ppg.len() { ppg.window(0, n)? } else { ppg };
    SessionStream::new(manifest.id.clone(), frames, ppg)
}

/// Loads `dir/session.toml`.
pub fn load_session_dir(dir: impl AsRef<Path>) -> Result<SessionStream> {
    let m = SessionManifest::read(dir.as_ref().join(MANIFEST_NAME))?;
    load_session(&m, LoadOptions::default())
}

/// Every session directory directly under `root`, in name order.
pub fn session_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Linear interpolation onto `j / to_rate` for every grid point inside the
/// original sample span.
pub fn resample_ppg(trace: &PpgTrace, to_rate: f64) -> Result<PpgTrace> {
    if !(to_rate.is_finite() && to_rate > 0.0) {
        return Err(Error::BadRate(to_rate));
    }
    if to_rate == trace.rate() {
        return Ok(trace.clone());
    }
    let x = trace.samples();
    let span = (x.len() - 1) as f64 / trace.rate();
    let n = (span * to_rate + 1e-9).floor() as usize + 1;
    let samples = (0..n)
        .map(|j| {
            let pos = j as f64 * trace.rate() / to_rate;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let frac = pos - i as f64;
            x[i] + (x[i + 1] - x[i]) * frac
        })
        .collect();
    PpgTrace::new(samples, to_rate)
}

/// Episodes of `support` frames followed immediately by `query` frames,
/// starting every `stride` frames. Both lengths must be multiples of the
/// model window `window`.
pub fn slice_episodes(
    session: &SessionStream,
    window: usize,
    support: usize,
    query: usize,
    stride: usize,
) -> Result<Vec<Episode>> {
    if query <= support {
        return Err(Error::BadSplit(format!("query {query} must exceed support {support}")));
    }
    if window == 0 || !support.is_multiple_of(window) || !query.is_multiple_of(window) {
        return Err(Error::BadSplit(format!(
            "support {support} and query {query} must be multiples of the window {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::BadSplit("stride must be positive".into()));
    }
    let need = support + query;
    if session.len() < need {
        return Err(Error::TooShort {
            len: session.len(),
            needed: need,
        });
    }
    let part = |start: usize, len: usize| -> Result<EpisodeWindow> {
        Ok(EpisodeWindow {
            start,
            frames: session.frames.window(start, start + len)?,
            target: Some(session.ppg.window(start, start + len)?),
        })
    };
    (0..=session.len() - need)
        .step_by(stride)
        .map(|s| Episode::new(session.id.clone(), part(s, support)?, part(s + support, query)?))
        .collect()
}

pub fn write_packed(path: impl AsRef<Path>, frames: &FrameSequence) -> Result<()> {
    let (t, k, _, c) = frames.frames().dim();
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(PACKED_MAGIC)?;
    for d in [t, k, c] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in frames.frames().iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_packed(path: impl AsRef<Path>, fps: f64) -> Result<FrameSequence> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != PACKED_MAGIC {
        return Err(Error::DecodeError(format!("{} is not a packed frame file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, k, c) = (dim(0), dim(1), dim(2));
    let expect = t * k * k * c;
    if bytes.len() != HEADER_LEN + 4 * expect {
        return Err(Error::DecodeError(format!(
            "{}: header says {expect} values, payload has {} bytes",
            path.display(),
            bytes.len() - HEADER_LEN
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let arr = Array4::from_shape_vec((t, k, k, c), data).map_err(|e| Error::DecodeError(e.to_string()))?;
    FrameSequence::new(arr, fps).map_err(|e| match e {
        Error::BadRange { .. } | Error::ShapeMismatch(_) => Error::DecodeError(format!("{}: {e}", path.display())),
        other => other,
    })
}

/// Frames from a directory of same-sized square images, in file-name order.
pub fn read_image_dir(dir: impl AsRef<Path>, fps: f64) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DecodeError(format!("no images in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut side = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| Error::DecodeError(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w != h || side.is_some_and(|s| s != w) {
            return Err(Error::DecodeError(format!("{}: unexpected size {w}x{h}", f.display())));
        }
        side = Some(w);
        data.extend(img.into_raw());
    }
    let k = side.expect("at least one image") as usize;
    let arr = Array4::from_shape_vec((files.len(), k, k, 3), data).map_err(|e| Error::DecodeError(e.to_string()))?;
    FrameSequence::from_u8(&arr, fps)
}

/// Writes frames as `00000.png`, `00001.png`, ... (8-bit, so lossy).
pub fn write_image_dir(dir: impl AsRef<Path>, frames: &FrameSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let k = frames.size() as u32;
    for (t, f) in frames.frames().outer_iter().enumerate() {
        let raw: Vec<u8> = f.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let img = image::RgbImage::from_raw(k, k, raw).expect("frame buffer size");
        img.save(dir.join(format!("{t:05}.png")))
            .map_err(|e| Error::DecodeError(e.to_string()))?;
    }
    Ok(())
}

pub fn read_ppg(path: impl AsRef<Path>, rate: f64) -> Result<PpgTrace> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let samples = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse::<f64>()
                .map_err(|e| Error::DecodeError(format!("{}: {l:?}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    PpgTrace::new(samples, rate)
}

pub fn write_ppg(path: impl AsRef<Path>, ppg: &PpgTrace) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in ppg.samples() {
        writeln!(out, "{v}")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a session directory (packed frames, PPG text, manifest).
pub fn write_session(dir: impl AsRef<Path>, session: &SessionStream, preproc: &str) -> Result<SessionManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_packed(dir.join("frames.f32"), &session.frames)?;
    write_ppg(dir.join("ppg.txt"), &session.ppg)?;
    let manifest = SessionManifest {
        id: session.id.clone(),
        frames: "frames.f32".into(),
        fps: session.fps(),
        ppg: "ppg.txt".into(),
        ppg_rate: session.ppg.rate(),
        preproc: preproc.to_string(),
        notes: String::new(),
    };
    manifest.write(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Sub-directories of a pool on disk.
pub const POOL_SPLITS: [&str; 4] = ["train", "val", "test", "test_shifted"];

/// Writes every session of a pool as `root/<split>/<id>/`.
pub fn write_pool(root: impl AsRef<Path>, pool: &crate::synthdata::TaskPool) -> Result<()> {
    let root = root.as_ref();
    let splits = [&pool.train, &pool.val, &pool.test, &pool.test_shifted];
    for (name, sessions) in POOL_SPLITS.iter().zip(splits) {
        for s in sessions {
            write_session(root.join(name).join(&s.id), s, "synthetic")?;
        }
    }
    Ok(())
}

/// Loads every session under `root/<split>`.
pub fn load_split(root: impl AsRef<Path>, split: &str) -> Result<Vec<SessionStream>> {
    session_dirs(root.as_ref().join(split))?
        .iter()
        .map(load_session_dir)
        .collect()
}
