//! Deployment on a distribution-shifted stream: adapt the encoder on the
//! first two seconds, then decode the rest, for each gradient source.
//!
//! ```text
//! cargo run --release --example transductive_infer -- [checkpoint.json]
//! ```

mod common;

use anyhow::Result;
use rppg_meta::deploy::{inductive_infer, transductive_infer, InferOptions};
use rppg_meta::eval::{predicted_hr, reference_hr};

fn main() -> Result<()> {
    let pool = common::small_pool(5)?;
    let (params, hyper) = common::model_from_args(&pool)?;
    let net = params.network()?;
    let stream = &pool.test_shifted[0];

    let inductive = inductive_infer(&net, &params, &stream.frames)?;
    println!("{}: {} frames at {} fps", stream.id, stream.len(), stream.fps());

    for (label, proto, synth) in [("proto-only", true, false), ("synth-only", false, true), ("proto+synth", true, true)] {
        let opts = InferOptions {
            steps: hyper.adapt_steps,
            alpha: hyper.alpha,
            proto,
            synth,
            joint: false,
        };
        let out = transductive_infer(&net, &params, &stream.frames, &opts)?;
        let truth = reference_hr(stream, out.start_frame, out.rppg.len())?;
        let (hr, method) = predicted_hr(&out.rppg, stream.fps())?;
        println!(
            "{label:12} HR {hr:6.1} bpm ({method:?}), reference {truth:6.1}; theta moved by {:.2e}",
            out.theta.max_abs_diff(&params.theta)
        );
        assert_eq!(out.phi, params.phi);
    }

    let (hr, _) = predicted_hr(&inductive, stream.fps())?;
    println!("{:12} HR {hr:6.1} bpm over the whole stream", "inductive");
    Ok(())
}
