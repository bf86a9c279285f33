use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lyapunov_value, verify_lyapunov_equation, EtcError, EtcPlant, CERTIFY_TOLERANCE};
use crate::ssm::Divergence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub integrator: Integrator,
}

impl Default for SimGrid {
    fn default() -> Self {
        Self {
            t_start: 0.0,
            t_end: 10.0,
            dt: 0.01,
            integrator: Integrator::Euler,
        }
    }
}

impl SimGrid {
    /// Number of steps; the grid has `steps() + 1` points.
    pub fn steps(&self) -> Result<usize, EtcError> {
        if !(self.dt > 0.0) || !(self.t_end > self.t_start) {
            return Err(EtcError::Grid(format!(
                "need dt > 0 and t_end > t_start, got dt = {}, [{}, {}]",
                self.dt, self.t_start, self.t_end
            )));
        }
        let ratio = (self.t_end - self.t_start) / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(EtcError::Grid(format!("window is not a whole number of steps ({ratio})")));
        }
        Ok(ratio.round() as usize)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }
}

/// One step of `ẋ = A x + B u` with `u` held constant.
fn step(a: &DMatrix<f64>, bu: &DVector<f64>, x: &DVector<f64>, dt: f64, integrator: Integrator) -> DVector<f64> {
    let f = |x: &DVector<f64>| a * x + bu;
    match integrator {
        Integrator::Euler => x + f(x) * dt,
        Integrator::Rk4 => {
            let k1 = f(x);
            let k2 = f(&(x + &k1 * (dt / 2.0)));
            let k3 = f(&(x + &k2 * (dt / 2.0)));
            let k4 = f(&(x + &k3 * dt));
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Trigger {
    pub fire: bool,
    /// `κ xᵀMx − 2 xᵀPBT e`
    pub lhs: f64,
    /// True when the check was skipped because `x` is at the origin.
    pub suppressed: bool,
}

/// Event rule: fire once `κ xᵀMx − 2 xᵀPBT e ≤ 0`. Skipped when `‖x‖ < 1e-9`.
pub fn trigger_check(x: &DVector<f64>, e: &DVector<f64>, plant: &EtcPlant) -> Trigger {
    let quad = (x.transpose() * &plant.m * x)[(0, 0)];
    let cross = (x.transpose() * &plant.p * &plant.b * &plant.t * e)[(0, 0)];
    let lhs = plant.kappa * quad - 2.0 * cross;
    if x.norm() < 1e-9 {
        return Trigger {
            fire: false,
            lhs,
            suppressed: true,
        };
    }
    Trigger {
        fire: lhs <= 0.0,
        lhs,
        suppressed: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtcTrajectory {
    pub times: Vec<f64>,
    /// State at every grid point.
    pub states: Vec<DVector<f64>>,
    /// Control applied from each grid point to the next; the last entry repeats the final hold.
    pub controls: Vec<DVector<f64>>,
    pub lyapunov: Vec<f64>,
    /// `‖x(t_i) − x(t)‖` after the trigger decision at each grid point.
    pub e_norm: Vec<f64>,
    /// Trigger-rule left-hand side at each grid point (evaluated before any reset).
    pub trigger_lhs: Vec<f64>,
    pub triggered: Vec<bool>,
    pub trigger_indices: Vec<usize>,
    pub divergence: Option<Divergence>,
}

impl EtcTrajectory {
    pub fn trigger_times(&self) -> Vec<f64> {
        self.trigger_indices.iter().map(|k| self.times[*k]).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.states.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// The held-control schedule the run produced.
    pub fn schedule(&self) -> HeldSchedule {
        HeldSchedule {
            values: self.controls[..self.controls.len() - 1].to_vec(),
        }
    }
}

/// Simulates the event-triggered loop on `grid`. The trigger is evaluated at
/// every grid point from the state reached there (the left limit), and the
/// first grid point always samples.
///
/// Refuses plants whose Lyapunov residual exceeds [`CERTIFY_TOLERANCE`] unless
/// `allow_uncertified` is set.
pub fn simulate_etc(plant: &EtcPlant, grid: &SimGrid, x0: &DVector<f64>, allow_uncertified: bool) -> Result<EtcTrajectory, EtcError> {
    plant.validate()?;
    let steps = grid.steps()?;
    if x0.len() != plant.state_dim() {
        return Err(EtcError::Contract(format!("x0 has {} entries, plant has {}", x0.len(), plant.state_dim())));
    }
    let check = verify_lyapunov_equation(plant);
    if check.max_abs >= CERTIFY_TOLERANCE && !allow_uncertified {
        return Err(EtcError::NotCertified { residual: check.max_abs });
    }
    let mut x = x0.clone();
    let mut held = x0.clone();
    let mut out = EtcTrajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        lyapunov: Vec::with_capacity(steps + 1),
        e_norm: Vec::with_capacity(steps + 1),
        trigger_lhs: Vec::with_capacity(steps + 1),
        triggered: Vec::with_capacity(steps + 1),
        trigger_indices: Vec::new(),
        divergence: None,
    };
    for k in 0..=steps {
        let fire = if k == 0 {
            out.trigger_lhs.push(trigger_check(&x, &DVector::zeros(x.len()), plant).lhs);
            true
        } else {
            let tr = trigger_check(&x, &(&held - &x), plant);
            out.trigger_lhs.push(tr.lhs);
            tr.fire
        };
        if fire {
            held = x.clone();
            out.trigger_indices.push(k);
        }
        let u = &plant.t * &held;
        out.times.push(grid.time(k));
        out.lyapunov.push(lyapunov_value(&plant.p, &x));
        out.e_norm.push((&held - &x).norm());
        out.triggered.push(fire);
        out.states.push(x.clone());
        if out.divergence.is_none() && !x.iter().all(|v| v.is_finite()) {
            out.divergence = Some(Divergence {
                step: k,
                magnitude: x.amax(),
            });
        }
        if k < steps {
            x = step(&plant.a, &(&plant.b * &u), &x, grid.dt, grid.integrator);
        }
        out.controls.push(u);
    }
    Ok(out)
}

/// Least-squares fit of `ln(L_V(t_i)/L_V(0)) = (κ − 1)·ι·t_i` over trigger times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub iota: f64,
    /// Root-mean-square residual of the log fit.
    pub rms_residual: f64,
    pub points: usize,
}

pub fn fit_decay_rate(traj: &EtcTrajectory, kappa: f64) -> Result<DecayFit, EtcError> {
    let l0 = traj.lyapunov[0];
    if !(l0 > 0.0) {
        return Err(EtcError::Contract("L_V(0) must be positive to fit a decay rate".into()));
    }
    let t0 = traj.times[0];
    let pts: Vec<(f64, f64)> = traj
        .trigger_indices
        .iter()
        .filter(|k| **k > 0 && traj.lyapunov[**k] > 0.0)
        .map(|k| (traj.times[*k] - t0, (traj.lyapunov[*k] / l0).ln()))
        .collect();
    if pts.is_empty() {
        return Err(EtcError::Contract("no triggers after the start to fit".into()));
    }
    let slope = pts.iter().map(|(t, y)| t * y).sum::<f64>() / pts.iter().map(|(t, _)| t * t).sum::<f64>();
    let rms = (pts.iter().map(|(t, y)| (y - slope * t).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok(DecayFit {
        iota: slope / (kappa - 1.0),
        rms_residual: rms,
        points: pts.len(),
    })
}

/// Control value applied over each grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldSchedule {
    pub values: Vec<DVector<f64>>,
}

/// Replaces each held sample `T·x(t_i)` by `T·x(t_i + δ_i)`, with
/// `δ_i ∈ (−δ_max/2, δ_max/2)` and `x` linearly interpolated on the nominal
/// grid. Hold intervals are unchanged.
pub fn perturb_samples(
    traj: &EtcTrajectory,
    plant: &EtcPlant,
    grid: &SimGrid,
    delta_max: f64,
    seed: u64,
) -> Result<HeldSchedule, EtcError> {
    if !(delta_max >= 0.0) || delta_max > grid.dt * (1.0 + 1e-12) {
        return Err(EtcError::Contract(format!("perturbation width {delta_max} exceeds grid width {}", grid.dt)));
    }
    let steps = grid.steps()?;
    if traj.states.len() != steps + 1 {
        return Err(EtcError::Contract("trajectory does not match the grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = delta_max / 2.0;
    let mut values = traj.schedule().values;
    let mut bounds = traj.trigger_indices.clone();
    bounds.push(steps + 1);
    for w in bounds.windows(2) {
        let (k, next) = (w[0], w[1].min(steps));
        let d = if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
        let f = (k as f64 + d / grid.dt).clamp(0.0, steps as f64);
        let j = (f.floor() as usize).min(steps - 1);
        let frac = f - j as f64;
        let x = &traj.states[j] * (1.0 - frac) + &traj.states[j + 1] * frac;
        let u = &plant.t * x;
        for v in values.iter_mut().take(next).skip(k) {
            *v = u.clone();
        }
    }
    Ok(HeldSchedule { values })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopRun {
    pub states: Vec<DVector<f64>>,
    pub lyapunov: Vec<f64>,
    pub max_norm: f64,
    pub divergence: Option<Divergence>,
}

/// Integrates `ẋ = A x + B u_held(t)` with the given schedule.
pub fn simulate_open_loop(plant: &EtcPlant, schedule: &HeldSchedule, grid: &SimGrid, x0: &DVector<f64>) -> Result<OpenLoopRun, EtcError> {
    let steps = grid.steps()?;
    if schedule.values.len() != steps {
        return Err(EtcError::Contract(format!("schedule has {} steps, grid has {steps}", schedule.values.len())));
    }
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(steps + 1);
    let mut lyapunov = Vec::with_capacity(steps + 1);
    let mut max_norm = 0.0f64;
    let mut divergence = None;
    for k in 0..=steps {
        let nrm = x.norm();
        if divergence.is_none() && !nrm.is_finite() {
            divergence = Some(Divergence { step: k, magnitude: nrm });
        }
        max_norm = if nrm.is_nan() { f64::INFINITY } else { max_norm.max(nrm) };
        lyapunov.push(lyapunov_value(&plant.p, &x));
        states.push(x.clone());
        if k < steps {
            x = step(&plant.a, &(&plant.b * &schedule.values[k]), &x, grid.dt, grid.integrator);
        }
    }
    Ok(OpenLoopRun {
        states,
        lyapunov,
        max_norm,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x0() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 0.0])
    }

    #[test]
    fn trigger_rule_cases() {
        let p = EtcPlant::corrected();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let t = trigger_check(&x, &DVector::zeros(2), &p);
        assert!(!t.fire && t.lhs > 0.0);
        let origin = trigger_check(&DVector::zeros(2), &DVector::zeros(2), &p);
        assert!(!origin.fire && origin.suppressed);
    }

    #[test]
    fn origin_stays_at_rest() {
        let traj = simulate_etc(&EtcPlant::corrected(), &SimGrid::default(), &DVector::zeros(2), false).unwrap();
        assert_eq!(traj.trigger_indices, vec![0]);
        assert!(traj.lyapunov.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nominal_run_is_stable_and_honors_rule() {
        let plant = EtcPlant::corrected();
        let traj = simulate_etc(&plant, &SimGrid::default(), &x0(), false).unwrap();
        assert_eq!(traj.states.len(), 1001);
        assert!(traj.lyapunov[1000] < 1e-3 * traj.lyapunov[0]);
        let at_triggers: Vec<f64> = traj.trigger_indices.iter().map(|k| traj.lyapunov[*k]).collect();
        assert!(at_triggers.windows(2).all(|w| w[1] <= w[0]));
        // between triggers the rule's left-hand side stays positive
        for k in 1..traj.states.len() {
            if !traj.triggered[k] {
                assert!(traj.trigger_lhs[k] > 0.0, "step {k}");
            } else {
                assert_eq!(traj.e_norm[k], 0.0);
            }
        }
        let fit = fit_decay_rate(&traj, plant.kappa).unwrap();
        assert!(fit.iota > 0.0);
    }

    #[test]
    fn uncertified_plant_needs_override() {
        let plant = EtcPlant::printed();
        assert!(matches!(
            simulate_etc(&plant, &SimGrid::default(), &x0(), false),
            Err(EtcError::NotCertified { .. })
        ));
        assert!(simulate_etc(&plant, &SimGrid::default(), &x0(), true).is_ok());
    }

    #[test]
    fn nominal_replay_reproduces_closed_loop() {
        let plant = EtcPlant::corrected();
        let grid = SimGrid::default();
        let traj = simulate_etc(&plant, &grid, &x0(), false).unwrap();
        let sched = perturb_samples(&traj, &plant, &grid, 0.0, 3).unwrap();
        assert_eq!(sched, traj.schedule());
        let run = simulate_open_loop(&plant, &sched, &grid, &x0()).unwrap();
        for (a, b) in run.states.iter().zip(&traj.states) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn stable_open_loop_decays_exponentially() {
        let plant = EtcPlant::new(
            -DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::zeros(1, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 2.0,
            0.5,
        )
        .unwrap();
        let grid = SimGrid {
            integrator: Integrator::Rk4,
            ..Default::default()
        };
        let sched = HeldSchedule {
            values: vec![DVector::zeros(1); 1000],
        };
        let run = simulate_open_loop(&plant, &sched, &grid, &x0()).unwrap();
        assert!((run.states[1000].norm() - (-10.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn wide_perturbation_rejected() {
        let plant = EtcPlant::corrected();
        let grid = SimGrid::default();
        let traj = simulate_etc(&plant, &grid, &x0(), false).unwrap();
        assert!(perturb_samples(&traj, &plant, &grid, 0.02, 0).is_err());
    }

    #[test]
    fn grid_must_divide_window() {
        let g = SimGrid { dt: 0.03, ..Default::default() };
        assert!(g.steps().is_err());
    }
}
