//! Paired pendulum regression with and without the gate.
//! Usage: pendulum_regression [epochs] [train] [test] [seed]

use std::time::Instant;

use smr_lab::pendulum::{generate_dataset, run_regression, PendulumConfig, RegressionConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let data_cfg = PendulumConfig {
        train_size: arg(1, 500),
        test_size: arg(2, 200),
        seed: arg(3, 0) as u64,
        ..Default::default()
    };
    let start = Instant::now();
    let data = generate_dataset(&data_cfg)?;
    println!("generated {} + {} sequences in {:.1?}", data.train.len(), data.test.len(), start.elapsed());
    let mut cfg = RegressionConfig::default();
    cfg.train.epochs = arg(0, 100);
    cfg.seed = data_cfg.seed;
    cfg.train.seed = data_cfg.seed;
    let start = Instant::now();
    let r = run_regression(&data, &cfg)?;
    println!("trained both variants in {:.1?}", start.elapsed());
    for v in [&r.without_smr, &r.with_smr] {
        println!(
            "smr = {:<5} best test MSE {:.4} at epoch {} (untrained {:.4})",
            v.smr, v.best_test_mse, v.best_epoch, v.test_mse[0]
        );
    }
    println!(
        "mean predictor {:.4}, relative improvement {:.1}%",
        r.mean_predictor_mse,
        100.0 * r.relative_improvement
    );
    Ok(())
}
