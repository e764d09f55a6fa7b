//! MAE, RMSE, SD and R against the number of adaptation steps on the
//! shifted pool, as a TSV table and an SVG chart.
//!
//! ```text
//! cargo run --release --example adaptation_sweep -- [checkpoint.json]
//! ```

mod common;

use anyhow::Result;
use rppg_meta::eval::{sweep_adaptation_steps, sweep_svg, EvalConfig};

fn main() -> Result<()> {
    let pool = common::small_pool(5)?;
    let (params, hyper) = common::model_from_args(&pool)?;
    let net = params.network()?;
    let table = sweep_adaptation_steps(
        &net,
        &params,
        None,
        &pool.test_shifted,
        &[0, 5, 10, 20],
        hyper.alpha,
        &EvalConfig::ALL,
    )?;
    print!("{}", table.to_tsv());
    std::fs::write("adaptation_sweep.svg", sweep_svg(&table))?;
    table.write_tsv("adaptation_sweep.tsv")?;
    println!("wrote adaptation_sweep.tsv and adaptation_sweep.svg");
    Ok(())
}
