use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rppg_meta::deploy::{read_trace, transductive_infer, write_trace, InferOptions, InferSummary};
use rppg_meta::eval::{self, activation_map, write_map_grid, EvalConfig, MetricsReport};
use rppg_meta::ingest::{self, load_session_dir, load_split};
use rppg_meta::network::checkpoint::Checkpoint;
use rppg_meta::network::{init_params, ModelConfig};
use rppg_meta::synthdata::{gen_task_pool, PoolConfig};
use rppg_meta::trainer::{read_metrics_log, resume_training, write_metrics_log, TrainConfig, TrainMode};
use rppg_meta::Error;

const DATA_ROOT_ENV: &str = "RPPG_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "rppg", version, about = "Meta-learned transductive rPPG: synthesize, train, infer, evaluate")]
struct Cli {
    /// Shrunk model and budget for a single CPU core.
    #[arg(long, global = true)]
    desk: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for per-video evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// TOML file overriding the preset; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic task pool to session directories.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train (or baseline-train) on `<data>/train`.
    Train(TrainArgs),
    /// Decode one session, adapting on its first two seconds.
    Infer(InferArgs),
    /// Metrics for every (L, configuration) pair on a split.
    Sweep(SweepArgs),
    /// Recompute metrics from stored traces.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, env = DATA_ROOT_ENV)]
        data: PathBuf,
        #[arg(long, default_value = "test_shifted")]
        split: String,
    },
    /// Encoder activation maps, one image grid per session.
    ActivationMap(MapArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "L")]
    steps: Option<usize>,
    /// Continue from `<out>/checkpoint.json`.
    #[arg(long)]
    resume: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Meta,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long = "L")]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Session directory holding a manifest.
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    adapt: AdaptArgs,
    /// No adaptation; same as `--L 0`.
    #[arg(long)]
    inductive: bool,
    #[arg(long)]
    no_proto: bool,
    #[arg(long)]
    no_synth: bool,
    /// Also adapt the estimator.
    #[arg(long)]
    joint: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Baseline-trained checkpoint for the baseline row.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "test_shifted")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "test_shifted")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Frames per grid, taken evenly from the decoded part of the stream.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Adapt the encoder first (proto+synth) with this many steps.
    #[arg(long = "L", default_value_t = 0)]
    steps: usize,
    #[arg(long)]
    alpha: Option<f64>,
}

/// Everything a run depends on; written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    train: TrainConfig,
    pool: PoolConfig,
    sweep_steps: Vec<usize>,
}

impl RunConfig {
    fn preset(desk: bool) -> Self {
        let train = if desk { TrainConfig::desk() } else { TrainConfig::full() };
        let mut pool = PoolConfig::desk(train.hyper.seed);
        pool.frame_size = train.model.encoder.input_size;
        Self {
            train,
            pool,
            sweep_steps: vec![0, 5, 10, 20, 30],
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::preset(cli.desk);
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut base = toml::Value::try_from(&cfg)?;
        merge(&mut base, over);
        cfg = base.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.hyper.seed = seed;
        cfg.pool.seed = seed;
    }
    Ok(cfg)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    Ok(())
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) if e.is_numeric() => 3,
        Some(Error::BadConfig(_)) | Some(Error::BadRange { .. }) | Some(Error::BadLayer { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    eval::set_workers(cli.workers);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    match &cli.cmd {
        Command::SynthGen { out } => synth_gen(cfg, out),
        Command::Train(a) => train(cfg, a),
        Command::Infer(a) => infer(cfg, a),
        Command::Sweep(a) => sweep(cfg, a),
        Command::Report { traces, data, split } => report(traces, data, split),
        Command::ActivationMap(a) => maps(cfg, a),
    }
}

fn synth_gen(cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    let pool = gen_task_pool(&cfg.pool)?;
    ingest::write_pool(out, &pool).with_context(|| format!("writing pool to {}", out.display()))?;
    write_resolved(out, &cfg)?;
    let n = pool.train.len() + pool.val.len() + pool.test.len() + pool.test_shifted.len();
    println!("wrote {n} sessions to {}", out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(v) = a.eta {
        t.hyper.eta = v;
    }
    if let Some(v) = a.alpha {
        t.hyper.alpha = v;
    }
    if let Some(v) = a.steps {
        t.hyper.adapt_steps = v;
    }
    if let Some(ModeArg::Baseline) = a.mode {
        *t = t.clone().into_baseline();
    }
    let ckpt_path = a.out.join("checkpoint.json");
    t.checkpoint = Some(ckpt_path.clone());
    t.validate().map_err(|e| usage(e.to_string()))?;
    let dataset = load_split(&a.data, "train").with_context(|| format!("loading {}/train", a.data.display()))?;
    write_resolved(&a.out, &cfg)?;
    let t = &cfg.train;
    let log_path = a.out.join("metrics.tsv");
    let (params, completed, log) = if a.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        let log = if log_path.exists() { read_metrics_log(&log_path)? } else { Vec::new() };
        let log = log.into_iter().take(ck.completed_epochs).collect();
        (ck.params, ck.completed_epochs, log)
    } else {
        let mut p = init_params(&t.model, t.hyper.seed)?;
        p.synth_scale = t.synth_scale;
        (p, 0, Vec::new())
    };
    let mut so_far = log.clone();
    let outcome = resume_training(&dataset, t, params, completed, log, |row| {
        println!("{}", row.to_line());
        so_far.push(row.clone());
        let _ = write_metrics_log(&log_path, &so_far);
    })?;
    write_metrics_log(&log_path, &outcome.log)?;
    let mode = match t.mode {
        TrainMode::Meta => "meta",
        TrainMode::Baseline => "baseline",
    };
    println!("{mode} training done; checkpoint {}", ckpt_path.display());
    Ok(())
}

fn infer_options(cfg: &RunConfig, ck: &Checkpoint, a: &InferArgs) -> InferOptions {
    let steps = if a.inductive {
        0
    } else {
        a.adapt.steps.unwrap_or(cfg.train.hyper.adapt_steps)
    };
    InferOptions {
        steps,
        alpha: a.adapt.alpha.unwrap_or(ck.hyper.alpha),
        proto: !a.no_proto,
        synth: !a.no_synth,
        joint: a.joint,
    }
}

fn infer(cfg: RunConfig, a: &InferArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = ck.params.network()?;
    let session = load_session_dir(&a.session).with_context(|| format!("loading {}", a.session.display()))?;
    let opts = infer_options(&cfg, &ck, a);
    let out = transductive_infer(&net, &ck.params, &session.frames, &opts)?;
    fs::create_dir_all(&a.out)?;
    write_trace(a.out.join(format!("{}.trace.tsv", session.id)), out.start_frame, &out.rppg)?;
    let summary = InferSummary::new(&session.id, &out, session.fps(), net.window(), &opts);
    fs::write(
        a.out.join(format!("{}.summary.json", session.id)),
        serde_json::to_string_pretty(&summary)?,
    )?;
    write_resolved(&a.out, &cfg)?;
    match summary.predicted_hr {
        Some(hr) => println!("{}: {hr:.1} bpm from {} peaks", session.id, summary.n_peaks),
        None => println!("{}: too few peaks for a heart rate", session.id),
    }
    Ok(())
}

fn model_matches(config: &ModelConfig, sessions: &[rppg_meta::types::SessionStream]) -> anyhow::Result<()> {
    if let Some(s) = sessions.iter().find(|s| s.frames.size() != config.encoder.input_size) {
        bail!(Error::ShapeMismatch(format!(
            "session {} has {}px frames, model expects {}px",
            s.id,
            s.frames.size(),
            config.encoder.input_size
        )));
    }
    Ok(())
}

fn sweep(cfg: RunConfig, a: &SweepArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let base = a.baseline.as_ref().map(Checkpoint::load).transpose()?;
    let net = ck.params.network()?;
    let pool = load_split(&a.data, &a.split)?;
    model_matches(&ck.params.config, &pool)?;
    let steps = a.steps.clone().unwrap_or_else(|| cfg.sweep_steps.clone());
    let configs: Vec<EvalConfig> = EvalConfig::ALL
        .into_iter()
        .filter(|c| base.is_some() || *c != EvalConfig::Baseline)
        .collect();
    let alpha = a.alpha.unwrap_or(ck.hyper.alpha);
    let table = eval::sweep_adaptation_steps(
        &net,
        &ck.params,
        base.as_ref().map(|b| &b.params),
        &pool,
        &steps,
        alpha,
        &configs,
    )?;
    fs::create_dir_all(&a.out)?;
    table.write_tsv(a.out.join("sweep.tsv"))?;
    fs::write(a.out.join("sweep.svg"), eval::sweep_svg(&table))?;
    write_resolved(&a.out, &cfg)?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn report(traces: &Path, data: &Path, split: &str) -> anyhow::Result<()> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(traces)
        .with_context(|| format!("reading {}", traces.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.tsv"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!(Error::MissingFile(traces.join("*.trace.tsv")));
    }
    println!("id\tpredicted\ttruth");
    for path in entries {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        let id = name.trim_end_matches(".trace.tsv").to_string();
        let session = load_session_dir(data.join(split).join(&id))
            .with_context(|| format!("no session for trace {}", path.display()))?;
        let (start, values) = read_trace(&path)?;
        if start + values.len() > session.len() {
            bail!(Error::LengthMismatch {
                what: "trace vs session frames",
                left: start + values.len(),
                right: session.len(),
            });
        }
        let (p, _) = eval::predicted_hr(&values, session.fps())?;
        let t = eval::reference_hr(&session, start, values.len())?;
        println!("{id}\t{p:.2}\t{t:.2}");
        pred.push(p);
        truth.push(t);
    }
    let m: MetricsReport = eval::summarize(&pred, &truth)?;
    let r = m.r.map_or("nan".to_string(), |v| format!("{v:.4}"));
    println!("MAE {:.3}  RMSE {:.3}  SD {:.3}  R {r}  n {}", m.mae, m.rmse, m.sd, m.n);
    Ok(())
}

fn maps(cfg: RunConfig, a: &MapArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = ck.params.network()?;
    let pool = load_split(&a.data, &a.split)?;
    model_matches(&ck.params.config, &pool)?;
    fs::create_dir_all(&a.out)?;
    let opts = InferOptions::transductive(a.steps, a.alpha.unwrap_or(ck.hyper.alpha));
    for s in &pool {
        let out = transductive_infer(&net, &ck.params, &s.frames, &opts)?;
        let n = a.frames.max(1);
        let span = s.len() - out.start_frame;
        let picks: Vec<usize> = (0..n).map(|i| out.start_frame + i * span / n).collect();
        let frames = rppg_meta::types::FrameSequence::new(
            ndarray::stack(
                ndarray::Axis(0),
                &picks.iter().map(|&i| s.frames.frame(i)).collect::<Vec<_>>(),
            )?,
            s.fps(),
        )?;
        let m = activation_map(&net, &out.theta, &frames, a.layer)?;
        write_map_grid(&m, n.min(4), a.out.join(format!("{}.png", s.id)))?;
    }
    write_resolved(&a.out, &cfg)?;
    println!("wrote {} activation grids to {}", pool.len(), a.out.display());
    Ok(())
}
