use nalgebra::DMatrix;
use serde::Serialize;

use super::{NssError, NssModel, Objective, Sample};
use crate::ssm::{operator_norm, spectral_radius, ssm_scan, DiscreteSsm, SpectralRadius};

/// Peak state magnitude treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NssReport {
    pub clean_mse: f64,
    pub perturbed_mse: f64,
    pub mse_ratio: f64,
    /// First-layer `Σ|x_k|` per step.
    pub clean_states: Vec<f64>,
    pub perturbed_states: Vec<f64>,
    /// Largest per-step state sum over both runs and all layers.
    pub peak_state: f64,
    pub divergence: bool,
    pub spectral_radius: f64,
}

fn mse(output: &[f64], target: &[f64], dims: usize, len: usize, objective: Objective) -> f64 {
    let shift = usize::from(objective == Objective::NextStep);
    let steps = len - shift;
    let mut acc = 0.0;
    for d in 0..dims {
        for k in 0..steps {
            let e = output[d * len + k] - target[d * len + k + shift];
            acc += e * e;
        }
    }
    acc / (dims * steps) as f64
}

/// Runs `model` on matching clean and perturbed sequences and compares
/// errors and first-layer state magnitudes.
pub fn evaluate_perturbed(model: &NssModel, clean: &Sample, perturbed: &Sample, objective: Objective) -> Result<NssReport, NssError> {
    if clean.len != perturbed.len || clean.input.len() != perturbed.input.len() {
        return Err(NssError::Contract("clean and perturbed sequences differ in length".into()));
    }
    let len = clean.len;
    let dims = model.config.output_dim;
    let a = model.run(&clean.input, len)?;
    let b = model.run(&perturbed.input, len)?;
    let clean_mse = mse(&a.output, &clean.target, dims, len, objective);
    let perturbed_mse = mse(&b.output, &perturbed.target, dims, len, objective);
    let peak_state = a
        .layer_states
        .iter()
        .chain(&b.layer_states)
        .flat_map(|l| l.abs_sum.iter().copied())
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::INFINITY } else { m.max(v) });
    let non_finite = a.layer_states.iter().chain(&b.layer_states).any(|l| l.non_finite);
    let divergence = non_finite || !(peak_state <= DIVERGENCE_THRESHOLD) || !perturbed_mse.is_finite();
    Ok(NssReport {
        clean_mse,
        perturbed_mse,
        mse_ratio: perturbed_mse / clean_mse,
        clean_states: a.layer_states[0].abs_sum.clone(),
        perturbed_states: b.layer_states[0].abs_sum.clone(),
        peak_state,
        divergence,
        spectral_radius: model.spectral_radius()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prop1Input {
    /// Bound on `‖u_k‖`.
    pub zeta: f64,
    /// Bound on `‖B̄‖`.
    pub b: f64,
    /// Bound on `‖C̄‖`.
    pub c: f64,
}

impl Prop1Input {
    /// Tightest bounds for `model` and `u`.
    pub fn tight(model: &DiscreteSsm, u: &DMatrix<f64>) -> Self {
        Self {
            zeta: u.column_iter().map(|c| c.norm()).fold(0.0, f64::max),
            b: operator_norm(&model.b_bar),
            c: operator_norm(&model.c_bar),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prop1Result {
    /// `‖y′_t − y_t‖` per step.
    pub realized: Vec<f64>,
    /// `Σ_{i ≤ t} |λ_max|^{t−i}·c·b·‖ε_i‖` per step.
    pub bound: Vec<f64>,
    pub lambda_max: SpectralRadius,
}

/// Relative slack allowed when checking the bound numerically.
const BOUND_SLACK: f64 = 1e-9;

/// Compares the error caused by observation noise `eps` with the geometric
/// accumulation bound. `u` and `eps` are `m × L`.
pub fn prop1_bound_check(model: &DiscreteSsm, u: &DMatrix<f64>, eps: &DMatrix<f64>, bounds: Prop1Input) -> Result<Prop1Result, NssError> {
    if u.shape() != eps.shape() {
        return Err(NssError::Contract(format!("u is {:?}, eps is {:?}", u.shape(), eps.shape())));
    }
    if model.residual {
        return Err(NssError::Contract("feed-through term is not covered by the bound".into()));
    }
    let zeta = u.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if zeta > bounds.zeta * (1.0 + BOUND_SLACK) {
        return Err(NssError::Contract(format!("input bound zeta = {} < max ‖u‖ = {zeta}", bounds.zeta)));
    }
    let nb = operator_norm(&model.b_bar);
    if nb > bounds.b * (1.0 + BOUND_SLACK) {
        return Err(NssError::Contract(format!("bound b = {} < ‖B̄‖ = {nb}", bounds.b)));
    }
    let nc = operator_norm(&model.c_bar);
    if nc > bounds.c * (1.0 + BOUND_SLACK) {
        return Err(NssError::Contract(format!("bound c = {} < ‖C̄‖ = {nc}", bounds.c)));
    }
    // ‖Āᵏ‖ ≤ |λ_max|ᵏ needs a normal transition matrix
    let a = &model.a_bar;
    let comm = (a * a.transpose() - a.transpose() * a).amax();
    if comm > 1e-12 * a.amax().max(1.0).powi(2) {
        return Err(NssError::Contract(format!(
            "power bound |λ_max|^k needs a normal transition matrix (‖ĀĀᵀ − ĀᵀĀ‖ = {comm:.3e})"
        )));
    }
    let lambda = spectral_radius(a, model.form);
    let clean = ssm_scan(model, u, None)?;
    let noisy = ssm_scan(model, &(u + eps), None)?;
    let len = u.ncols();
    let mut realized = Vec::with_capacity(len);
    let mut bound = Vec::with_capacity(len);
    let mut acc = 0.0;
    for t in 0..len {
        acc = lambda.value * acc + bounds.c * bounds.b * eps.column(t).norm();
        let r = (noisy.y.column(t) - clean.y.column(t)).norm();
        if r > acc + BOUND_SLACK * acc.max(1.0) {
            return Err(NssError::Contract(format!("geometric bound violated at step {t}: {r} > {acc}")));
        }
        realized.push(r);
        bound.push(acc);
    }
    Ok(Prop1Result {
        realized,
        bound,
        lambda_max: lambda,
    })
}
