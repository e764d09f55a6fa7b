//! Encoder activation maps on a shifted stream before and after
//! adaptation, written as a PNG grid (top row inductive, bottom adapted).

mod common;

use anyhow::Result;
use ndarray::{concatenate, Axis};
use rppg_meta::deploy::{adaptation_len, transductive_infer, InferOptions};
use rppg_meta::eval::{activation_map, write_map_grid};

fn main() -> Result<()> {
    let pool = common::small_pool(5)?;
    let (params, hyper) = common::model_from_args(&pool)?;
    let net = params.network()?;
    let stream = &pool.test_shifted[0];
    let opts = InferOptions::transductive(hyper.adapt_steps, hyper.alpha);
    let adapted = transductive_infer(&net, &params, &stream.frames, &opts)?.theta;

    let start = adaptation_len(stream.fps());
    let frames = stream.frames.window(start, start + 6)?;
    for layer in 0..net.encoder.num_blocks() - 1 {
        let before = activation_map(&net, &params.theta, &frames, layer)?;
        let after = activation_map(&net, &adapted, &frames, layer)?;
        let diff = (&before - &after).mapv(f64::abs).mean().unwrap_or(0.0);
        let path = format!("activation_layer{layer}.png");
        write_map_grid(&concatenate(Axis(0), &[before.view(), after.view()])?, 6, &path)?;
        println!("layer {layer}: mean |inductive - adapted| {diff:.4}, wrote {path}");
    }
    Ok(())
}
