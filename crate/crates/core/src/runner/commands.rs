use std::fs;

use serde::Serialize;

use super::artifacts::{csv, write_json, write_text};
use super::{io_err, resolve_config, EtcConfig, GlobalOptions, GradcheckConfig, NssConfig, PendulumRunConfig, PlantChoice, RunError};
use crate::etc::{
    fit_decay_rate, perturb_samples, simulate_etc, simulate_open_loop, trajectory_csv, triggers_json, verify_lyapunov_equation,
    EtcPlant, HeldSchedule, OpenLoopRun, SimGrid,
};
use crate::gradkit::check::{primitive_suite, PrimitiveCheck, FD_TOLERANCE};
use crate::nss::{evaluate_perturbed, make_sine_task, perturb_grid, train_model, NssModel, NssReport, Sample};
use crate::pendulum::{frame_pgm, generate_dataset, load_dataset, run_regression_threads, save_dataset, RegressionReport};

/// Perturbed-replay peak above which a run counts as blown up.
const BLOWUP_NORM: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EtcMetrics {
    pub plant: PlantChoice,
    pub lyapunov_residual: f64,
    pub spectral_abscissa: f64,
    pub trigger_count: usize,
    pub first_trigger_after_start: Option<f64>,
    pub lv_ratio: f64,
    pub decay_rate: Option<f64>,
    pub decay_fit_rms: Option<f64>,
    pub nominal_replay_max_deviation: f64,
    pub delta_max: f64,
    pub perturbed_max_norm: f64,
    pub perturbed_divergence_step: Option<usize>,
    pub max_input_deviation: f64,
    pub input_range: f64,
    pub sweep_max_norms: Vec<f64>,
    pub sweep_above_1e3: usize,
}

fn replay_csv(run: &OpenLoopRun, grid: &SimGrid) -> String {
    let n = run.states.first().map_or(0, |x| x.len());
    let header = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain(std::iter::once("LV".into()))
        .collect::<Vec<_>>()
        .join(",");
    let rows: Vec<Vec<f64>> = run
        .states
        .iter()
        .zip(&run.lyapunov)
        .enumerate()
        .map(|(k, (x, lv))| std::iter::once(grid.time(k)).chain(x.iter().copied()).chain(std::iter::once(*lv)).collect())
        .collect();
    csv(&header, rows.iter().map(Vec::as_slice))
}

fn inputs_csv(nominal: &HeldSchedule, perturbed: &HeldSchedule, grid: &SimGrid) -> String {
    let m = nominal.values.first().map_or(0, |u| u.len());
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=m).map(|i| format!("u{i}_nominal")));
    cols.extend((1..=m).map(|i| format!("u{i}_perturbed")));
    let rows: Vec<Vec<f64>> = nominal
        .values
        .iter()
        .zip(&perturbed.values)
        .enumerate()
        .map(|(k, (a, b))| std::iter::once(grid.time(k)).chain(a.iter().copied()).chain(b.iter().copied()).collect())
        .collect();
    csv(&cols.join(","), rows.iter().map(Vec::as_slice))
}

fn sweep(plant: &EtcPlant, cfg: &EtcConfig, traj: &crate::etc::EtcTrajectory, threads: usize) -> Result<Vec<f64>, RunError> {
    let seeds: Vec<u64> = (0..cfg.sweep_seeds).map(|s| cfg.seed.wrapping_add(s)).collect();
    let one = |seed: u64| -> Result<f64, RunError> {
        let sched = perturb_samples(traj, plant, &cfg.grid, cfg.delta_max(), seed)?;
        Ok(simulate_open_loop(plant, &sched, &cfg.grid, &cfg.x0())?.max_norm)
    };
    if threads <= 1 || seeds.len() < 2 {
        return seeds.into_iter().map(one).collect();
    }
    let chunk = seeds.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds.chunks(chunk).map(|c| s.spawn(move || c.iter().map(|&x| one(x)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep thread panicked")).collect()
    })
}

/// Nominal event-triggered run, closed-loop replay, jittered replay and a seed sweep.
pub fn cmd_etc(opts: &GlobalOptions) -> Result<EtcMetrics, RunError> {
    let cfg: EtcConfig = resolve_config(opts)?;
    let plant = cfg.plant()?;
    let check = verify_lyapunov_equation(&plant);
    let x0 = cfg.x0();
    let traj = simulate_etc(&plant, &cfg.grid, &x0, cfg.allow_uncertified)?;
    let nominal = traj.schedule();
    let replay = simulate_open_loop(&plant, &nominal, &cfg.grid, &x0)?;
    let perturbed = perturb_samples(&traj, &plant, &cfg.grid, cfg.delta_max(), cfg.seed)?;
    let pert_run = simulate_open_loop(&plant, &perturbed, &cfg.grid, &x0)?;
    let sweep_max_norms = sweep(&plant, &cfg, &traj, opts.threads)?;
    let fit = fit_decay_rate(&traj, plant.kappa).ok();
    let deviation = replay
        .states
        .iter()
        .zip(&traj.states)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let flat = |s: &HeldSchedule| s.values.iter().flat_map(|u| u.iter().copied()).collect::<Vec<_>>();
    let (un, up) = (flat(&nominal), flat(&perturbed));
    let input_range = un.iter().copied().fold(f64::NEG_INFINITY, f64::max) - un.iter().copied().fold(f64::INFINITY, f64::min);
    let max_input_deviation = un.iter().zip(&up).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let metrics = EtcMetrics {
        plant: cfg.plant,
        lyapunov_residual: check.max_abs,
        spectral_abscissa: check.spectral_abscissa,
        trigger_count: traj.trigger_indices.len(),
        first_trigger_after_start: traj.trigger_times().get(1).copied(),
        lv_ratio: traj.lyapunov.last().copied().unwrap_or(0.0) / traj.lyapunov[0],
        decay_rate: fit.map(|f| f.iota),
        decay_fit_rms: fit.map(|f| f.rms_residual),
        nominal_replay_max_deviation: deviation,
        delta_max: cfg.delta_max(),
        perturbed_max_norm: pert_run.max_norm,
        perturbed_divergence_step: pert_run.divergence.map(|d| d.step),
        max_input_deviation,
        input_range,
        sweep_above_1e3: sweep_max_norms.iter().filter(|v| **v > BLOWUP_NORM).count(),
        sweep_max_norms,
    };
    let out = &opts.out;
    write_text(out, "trajectory.csv", &trajectory_csv(&traj))?;
    write_text(out, "triggers.json", &(triggers_json(&traj) + "\n"))?;
    write_text(out, "inputs.csv", &inputs_csv(&nominal, &perturbed, &cfg.grid))?;
    write_text(out, "replay_nominal.csv", &replay_csv(&replay, &cfg.grid))?;
    write_text(out, "replay_perturbed.csv", &replay_csv(&pert_run, &cfg.grid))?;
    write_json(out, "metrics.json", &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NssRunReport {
    pub smr: bool,
    pub parameter_count: usize,
    pub epochs_run: usize,
    pub training_diverged_at: Option<usize>,
    pub final_loss: Option<f64>,
    pub clean_mse: f64,
    pub perturbed_mse: f64,
    pub mse_ratio: f64,
    pub peak_state: f64,
    pub divergence_flag: bool,
    pub spectral_radius: f64,
}

fn states_csv(values: &[f64]) -> String {
    let rows: Vec<[f64; 2]> = values.iter().enumerate().map(|(k, v)| [k as f64, *v]).collect();
    csv("step,abs_sum", rows.iter().map(|r| r.as_slice()))
}

/// Trains on the clean sine, then evaluates on clean and jittered sampling.
pub fn cmd_nss(opts: &GlobalOptions) -> Result<(NssRunReport, NssReport), RunError> {
    let cfg: NssConfig = resolve_config(opts)?;
    let task = make_sine_task(cfg.task.points, cfg.task.omega)?;
    let clean = Sample::univariate(&task.values);
    let (_, up) = perturb_grid(&task.times, |t| task.eval(t), cfg.task.delta_max, cfg.perturb_seed())?;
    let perturbed = Sample::univariate(&up);
    let mut model = NssModel::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train_model(&mut model, std::slice::from_ref(&clean), &cfg.train)?;
    let report = evaluate_perturbed(&model, &clean, &perturbed, cfg.train.objective)?;
    let summary = NssRunReport {
        smr: cfg.model.smr.is_some(),
        parameter_count: model.parameter_count(),
        epochs_run: outcome.losses.len(),
        training_diverged_at: outcome.diverged_at,
        final_loss: outcome.losses.last().copied(),
        clean_mse: report.clean_mse,
        perturbed_mse: report.perturbed_mse,
        mse_ratio: report.mse_ratio,
        peak_state: report.peak_state,
        divergence_flag: report.divergence,
        spectral_radius: report.spectral_radius,
    };
    let out = &opts.out;
    let rows: Vec<[f64; 2]> = outcome.losses.iter().enumerate().map(|(e, l)| [e as f64, *l]).collect();
    write_text(out, "loss.csv", &csv("epoch,loss", rows.iter().map(|r| r.as_slice())))?;
    write_text(out, "states_clean.csv", &states_csv(&report.clean_states))?;
    write_text(out, "states_perturbed.csv", &states_csv(&report.perturbed_states))?;
    write_json(out, "report.json", &summary)?;
    model.checkpoint().save(&out.join("model.ckpt"))?;
    Ok((summary, report))
}

/// Generates or loads the dataset, then runs the paired regression unless
/// `generate_only` is set.
pub fn cmd_pendulum(opts: &GlobalOptions) -> Result<Option<RegressionReport>, RunError> {
    let cfg: PendulumRunConfig = resolve_config(opts)?;
    let out = &opts.out;
    let data = match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let d = generate_dataset(&cfg.data)?;
            save_dataset(&d, &out.join("dataset.bin"))?;
            d
        }
    };
    if !cfg.export_frames.is_empty() {
        let dir = out.join("frames");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let side = data.config.image_side;
        for &i in &cfg.export_frames {
            let sample = data
                .train
                .get(i)
                .ok_or_else(|| RunError::Config(format!("export_frames: no training sample {i}")))?;
            for (k, frame) in sample.frames.chunks(side * side).enumerate() {
                let path = dir.join(format!("sample{i:03}_frame{k:02}.pgm"));
                fs::write(&path, frame_pgm(frame, side)).map_err(io_err(&path))?;
            }
        }
    }
    if cfg.generate_only {
        return Ok(None);
    }
    let report = run_regression_threads(&data, &cfg.regression, opts.threads)?;
    write_json(out, "results.json", &report)?;
    Ok(Some(report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub rows: Vec<PrimitiveCheck>,
    pub table: String,
}

/// Finite-difference check of every primitive. Writes `gradcheck.csv`
/// and fails naming every primitive over tolerance.
pub fn cmd_gradcheck(opts: &GlobalOptions) -> Result<GradcheckOutcome, RunError> {
    let cfg: GradcheckConfig = resolve_config(opts)?;
    let rows = primitive_suite(cfg.instances.max(1), cfg.seed, cfg.corrupt.as_deref())?;
    let mut table = String::from("primitive,instances,max_rel_err,tolerance,passed\n");
    for r in &rows {
        table.push_str(&format!("{},{},{:e},{:e},{}\n", r.primitive, r.instances, r.max_rel_err, FD_TOLERANCE, r.passed));
    }
    write_text(&opts.out, "gradcheck.csv", &table)?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.primitive.clone()).collect();
    if !failed.is_empty() {
        print!("{table}");
        return Err(RunError::GradcheckFailed(failed));
    }
    Ok(GradcheckOutcome { rows, table })
}
