//! Shared setup for the examples that need a trained model.

use anyhow::Result;
use rppg_meta::network::checkpoint::Checkpoint;
use rppg_meta::network::ModelParams;
use rppg_meta::synthdata::{gen_task_pool, PoolConfig, PoolSplit, TaskPool};
use rppg_meta::trainer::{meta_train, TrainConfig};
use rppg_meta::types::HyperParams;

/// A small desk pool: 30-second sessions, 6 training tasks.
#[allow(dead_code)]
pub fn small_pool(seed: u64) -> Result<TaskPool> {
    let mut cfg = PoolConfig::desk(seed);
    cfg.duration_s = 30.0;
    cfg.split = PoolSplit { train: 6, val: 2, test: 2 };
    Ok(gen_task_pool(&cfg)?)
}

/// A short meta-training run on `pool`: two pretraining and two meta epochs.
pub fn quick_train(pool: &TaskPool) -> Result<(ModelParams, HyperParams)> {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 2;
    cfg.hyper.pretrain_epochs = 2;
    cfg.episodes_per_task = Some(2);
    let out = meta_train(&pool.train, &cfg)?;
    for row in &out.log {
        eprintln!("{}", row.to_line());
    }
    Ok((out.params, cfg.hyper))
}

/// The checkpoint named by the first argument, or a freshly trained model.
pub fn model_from_args(pool: &TaskPool) -> Result<(ModelParams, HyperParams)> {
    match std::env::args().nth(1) {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            eprintln!("loaded {path}");
            Ok((ckpt.params, ckpt.hyper))
        }
        None => {
            eprintln!("no checkpoint given; training a small model");
            quick_train(pool)
        }
    }
}
