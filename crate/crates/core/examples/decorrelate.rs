//! Trains the stream projections on a synthetic correlated pair with the
//! refinement loss alone and prints the correlation before and after.
//!
//! `cargo run --release -p ffuse-core --example decorrelate -- [tied|independent] [steps] [lr]`

use ffuse_core::{
    generate_pair, train, Example, FusionConfig, FusionMethod, ProjectionInit, SynthSpec,
    TrainConfig,
};
use ndarray::Array2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let init = match args.first().map(String::as_str) {
        Some("independent") => ProjectionInit::Independent,
        _ => ProjectionInit::Tied,
    };
    let steps = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(2_000);
    let lr = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0.002);

    let (u, v) = generate_pair(&SynthSpec::default())?;
    let fusion = FusionConfig {
        method: FusionMethod::LinearProjection,
        common_dim: 16,
        init,
        ..FusionConfig::wsj()
    };
    let target = Array2::zeros((u.frames(), fusion.output_dim));
    let cfg = TrainConfig {
        steps,
        learning_rate: lr,
        task_weight: 0.0,
        ..TrainConfig::default()
    };
    let report = train(&[Example::new(u, v, target)], &fusion, &cfg)?;
    if let Some(raw) = &report.raw_correlation {
        println!("raw      max |c| = {:.4}", raw.max_abs());
    }
    println!("initial  max |c| = {:.4}", report.max_abs_corr_initial);
    for rec in report.history.iter().step_by((steps / 10).max(1)) {
        println!(
            "step {:5}  refine {:.5}  max |c| {:.4}  lr {:.5}",
            rec.step, rec.loss.refine_loss, rec.max_abs_corr, rec.lr
        );
    }
    println!("final    max |c| = {:.4}", report.max_abs_corr_final);
    println!("wall time {} ms", report.wall_time_ms);
    Ok(())
}
