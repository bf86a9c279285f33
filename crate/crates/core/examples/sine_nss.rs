//! Single-layer model fitted to a sine, evaluated on jittered sampling
//! points with and without the memory replay gate.
//! Usage: sine_nss [epochs] [seed]

use smr_lab::nss::{evaluate_perturbed, make_sine_task, perturb_grid, train_model, NssModel, Sample};
use smr_lab::runner::NssConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let epochs = args.first().copied().unwrap_or(2000) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    for smr in [false, true] {
        let mut cfg = NssConfig::sine(smr);
        cfg.seed = seed;
        cfg.train.epochs = epochs;
        let task = make_sine_task(cfg.task.points, cfg.task.omega)?;
        let clean = Sample::univariate(&task.values);
        let (_, up) = perturb_grid(&task.times, |t| task.eval(t), cfg.task.delta_max, cfg.perturb_seed())?;
        let mut model = NssModel::new(cfg.model.clone(), seed)?;
        train_model(&mut model, std::slice::from_ref(&clean), &cfg.train)?;
        let r = evaluate_perturbed(&model, &clean, &Sample::univariate(&up), cfg.train.objective)?;
        println!(
            "smr = {smr:<5} clean {:.3e} perturbed {:.3e} ratio {:>7.1} peak state {:.3} rho {:.4} divergence {}",
            r.clean_mse, r.perturbed_mse, r.mse_ratio, r.peak_state, r.spectral_radius, r.divergence
        );
    }
    Ok(())
}
