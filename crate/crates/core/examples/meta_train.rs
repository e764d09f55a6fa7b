//! Pretraining plus episodic meta-training on a small synthetic pool, with
//! a checkpoint written at the end.
//!
//! ```text
//! cargo run --release --example meta_train -- [checkpoint.json] [meta epochs]
//! ```

use std::time::Instant;

use anyhow::Result;
use rppg_meta::eval::evaluate_pool;
use rppg_meta::deploy::InferOptions;
use rppg_meta::network::checkpoint::Checkpoint;
use rppg_meta::synthdata::{gen_task_pool, PoolConfig, PoolSplit};
use rppg_meta::trainer::{resume_training, TrainConfig, LOG_HEADER};
use rppg_meta::network::init_params;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "meta_train.checkpoint.json".into());
    let epochs: usize = args.next().map(|v| v.parse()).transpose()?.unwrap_or(4);

    let mut pool_cfg = PoolConfig::desk(3);
    pool_cfg.duration_s = 40.0;
    pool_cfg.split = PoolSplit { train: 8, val: 2, test: 2 };
    let pool = gen_task_pool(&pool_cfg)?;

    let mut cfg = TrainConfig::desk();
    cfg.epochs = epochs;
    cfg.hyper.pretrain_epochs = 2;
    cfg.episodes_per_task = Some(3);
    cfg.validate()?;
    let mut params = init_params(&cfg.model, cfg.hyper.seed)?;
    params.synth_scale = cfg.synth_scale;

    println!("{LOG_HEADER}");
    let clock = Instant::now();
    let trained = resume_training(&pool.train, &cfg, params, 0, Vec::new(), |row| println!("{}", row.to_line()))?;
    println!("trained in {:.0}s", clock.elapsed().as_secs_f64());

    let p = &trained.params;
    let net = p.network()?;
    let opts = InferOptions::transductive(cfg.hyper.adapt_steps, cfg.hyper.alpha);
    let val = evaluate_pool(&net, p, &pool.val, Some(&opts))?;
    for v in &val.videos {
        println!("{}: predicted {:.1} bpm, reference {:.1} bpm", v.id, v.predicted, v.truth);
    }
    println!("val MAE {:.2} bpm", val.report.mae);
    println!("prototype after {} EMA updates", p.prototype.update_count);

    let mut ckpt = Checkpoint::new(trained.params, cfg.hyper);
    ckpt.completed_epochs = trained.log.len();
    ckpt.notes = "meta".into();
    ckpt.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
