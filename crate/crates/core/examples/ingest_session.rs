//! Writes a session directory, reads it back through its manifest,
//! resamples a 100 Hz reference to the video rate and slices episodes.

use anyhow::Result;
use rppg_meta::ingest::{load_session_dir, resample_ppg, slice_episodes, write_session, SessionManifest, MANIFEST_NAME};
use rppg_meta::synthdata::{render_session, SynthTaskSpec};
use rppg_meta::types::PpgTrace;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let session = render_session(&SynthTaskSpec::random("demo", 11, 12.0, 30.0, 32))?;
    write_session(dir.path().join("demo"), &session, "synthetic")?;
    let manifest = SessionManifest::read(dir.path().join("demo").join(MANIFEST_NAME))?;
    println!("manifest: id {} fps {} ppg rate {}", manifest.id, manifest.fps, manifest.ppg_rate);

    let back = load_session_dir(dir.path().join("demo"))?;
    assert_eq!(back.frames, session.frames);
    println!("reloaded {} frames of {}x{}", back.len(), back.frames.size(), back.frames.size());

    let fast = PpgTrace::new((0..1000).map(|i| (i as f64 * 0.075).sin()).collect(), 100.0)?;
    let slow = resample_ppg(&fast, 30.0)?;
    println!("100 Hz x {} -> 30 Hz x {}", fast.len(), slow.len());

    let episodes = slice_episodes(&back, 60, 60, 120, 180)?;
    for e in episodes.iter().take(3) {
        println!("episode: support {}..{}, query {}..{}", e.support.start, e.support.end(), e.query.start, e.query.end());
    }
    println!("{} episodes in total", episodes.len());
    Ok(())
}
