//! Compares the learned synthetic gradient with the exact latent gradient
//! of the ordinal loss, then takes one injected encoder step with each.

mod common;

use anyhow::Result;
use rppg_meta::eval::gradient_fidelity;
use rppg_meta::network::{encode_frames, generate_synthetic_gradient, grad_at_z_of_ordinal_loss, inject_gradient_update};
use rppg_meta::trainer::window_targets;
use rppg_meta::transduction::cosine_similarity;

fn main() -> Result<()> {
    let pool = common::small_pool(5)?;
    let (params, hyper) = common::model_from_args(&pool)?;
    let net = params.network()?;
    let session = &pool.val[0];
    let len = hyper.query;

    let frames = session.frames.window(0, len)?;
    let targets = window_targets(&session.ppg.samples()[..len], hyper.window, hyper.ranks)?;
    let exact = grad_at_z_of_ordinal_loss(&net, &params, &frames, &targets)?;
    let z = encode_frames(&net, &params.theta, &frames)?;
    let synthetic = generate_synthetic_gradient(&net, &params, &z)?;
    println!("first window cosine {:.3}", cosine_similarity(&synthetic, &exact));
    println!(
        "mean cosine over the val pool {:.3}",
        gradient_fidelity(&net, &params, &pool.val, len, 4)?
    );

    let with_exact = inject_gradient_update(&net, &params.theta, &frames, &exact, hyper.alpha)?;
    let with_synthetic = inject_gradient_update(&net, &params.theta, &frames, &synthetic, hyper.alpha)?;
    println!(
        "encoder step size: exact {:.2e}, synthetic {:.2e}",
        with_exact.max_abs_diff(&params.theta),
        with_synthetic.max_abs_diff(&params.theta)
    );
    Ok(())
}
