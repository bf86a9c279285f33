//! Memory replay gate: a sigmoid of a causal convolution over the recent
//! input window, multiplied into the input before it reaches the state update.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gradkit::{GradError, PadMode, ParamId, ParamSet, Tape, Tensor, Var};
use crate::ssm::{ssm_conv, ssm_kernel, ssm_scan, DiscreteSsm, Divergence, SsmError, StateTrace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmrConfig {
    pub tau: usize,
    pub use_linear: bool,
    pub padding: PadMode,
}

impl Default for SmrConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            use_linear: false,
            padding: PadMode::Zero,
        }
    }
}

/// Numeric gate parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SmrGate {
    pub channels: usize,
    pub tau: usize,
    /// `[C_out × C_in × τ]`, row-major; tap `τ − 1` multiplies the current input.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Optional channel mixing `(W [C × C], b [C])` applied before the sigmoid.
    pub linear: Option<(Vec<f64>, Vec<f64>)>,
    pub padding: PadMode,
}

impl SmrGate {
    /// All-zero gate: every gate value is exactly 0.5.
    pub fn neutral(channels: usize, tau: usize) -> Self {
        Self {
            channels,
            tau,
            weight: vec![0.0; channels * channels * tau],
            bias: vec![0.0; channels],
            linear: None,
            padding: PadMode::Zero,
        }
    }

    /// Weights drawn uniformly from `±1/sqrt(C·τ)`.
    pub fn random(channels: usize, cfg: &SmrConfig, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((channels * cfg.tau) as f64).sqrt();
        let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(channels * channels * cfg.tau);
        let bias = draw(channels);
        let linear = cfg.use_linear.then(|| {
            let lb = 1.0 / (channels as f64).sqrt();
            let w = (0..channels * channels).map(|_| rng.gen_range(-lb..lb)).collect();
            let b = (0..channels).map(|_| rng.gen_range(-lb..lb)).collect();
            (w, b)
        });
        Self {
            channels,
            tau: cfg.tau,
            weight,
            bias,
            linear,
            padding: cfg.padding,
        }
    }

    fn validate(&self) -> Result<(), SsmError> {
        let c = self.channels;
        if self.tau == 0 {
            return Err(SsmError::Invalid("gate window must be at least 1".into()));
        }
        if self.weight.len() != c * c * self.tau || self.bias.len() != c {
            return Err(SsmError::Shape(format!("gate parameters do not match {c} channels and tau = {}", self.tau)));
        }
        if let Some((w, b)) = &self.linear {
            if w.len() != c * c || b.len() != c {
                return Err(SsmError::Shape("gate linear map does not match channel count".into()));
            }
        }
        Ok(())
    }
}

/// Gate values and gated sequence, both `C × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    pub gate: DMatrix<f64>,
    pub gated: DMatrix<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the gate to `u` (`C × L`).
pub fn smr_gate(gate: &SmrGate, u: &DMatrix<f64>) -> Result<GateOutput, SsmError> {
    gate.validate()?;
    let (c, len) = (gate.channels, u.ncols());
    if u.nrows() != c {
        return Err(SsmError::Shape(format!("gate expects {c} channels, input has {}", u.nrows())));
    }
    let tau = gate.tau;
    let padded = |ch: usize, pos: isize| -> f64 {
        if pos >= 0 {
            u[(ch, pos as usize)]
        } else {
            match gate.padding {
                PadMode::Zero => 0.0,
                PadMode::ReplicateFirst => u[(ch, 0)],
            }
        }
    };
    let mut pre = DMatrix::zeros(c, len);
    for o in 0..c {
        for k in 0..len {
            let mut acc = gate.bias[o];
            for i in 0..c {
                for j in 0..tau {
                    let pos = k as isize - (tau - 1 - j) as isize;
                    acc += gate.weight[(o * c + i) * tau + j] * padded(i, pos);
                }
            }
            pre[(o, k)] = acc;
        }
    }
    if let Some((w, b)) = &gate.linear {
        let wm = DMatrix::from_row_slice(c, c, w);
        pre = wm * pre;
        for (o, bo) in b.iter().enumerate() {
            pre.row_mut(o).add_scalar_mut(*bo);
        }
    }
    let g = pre.map(sigmoid);
    let gated = g.component_mul(u);
    Ok(GateOutput { gate: g, gated })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Scan,
    Conv,
}

/// Summary of the gated input fed to the state update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GateStats {
    pub min_gate: f64,
    pub max_gate: f64,
    pub input_max_abs: f64,
    pub gated_max_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmrForward {
    pub y: DMatrix<f64>,
    /// Hidden states; only recorded in scan mode.
    pub trace: Option<StateTrace>,
    pub gate: GateOutput,
    pub stats: GateStats,
    pub divergence: Option<Divergence>,
}

/// Gate followed by the state-space model, in recurrent or convolutional form.
pub fn smr_ssm_forward(model: &DiscreteSsm, gate: &SmrGate, u: &DMatrix<f64>, mode: ExecMode) -> Result<SmrForward, SsmError> {
    let g = smr_gate(gate, u)?;
    let stats = GateStats {
        min_gate: g.gate.min(),
        max_gate: g.gate.max(),
        input_max_abs: u.amax(),
        gated_max_abs: g.gated.amax(),
    };
    let (y, trace, divergence) = match mode {
        ExecMode::Scan => {
            let out = ssm_scan(model, &g.gated, None)?;
            (out.y, Some(out.trace), out.divergence)
        }
        ExecMode::Conv => {
            let y = ssm_conv(&ssm_kernel(model, u.ncols()), &g.gated)?;
            let div = y.iter().position(|v| !v.is_finite()).map(|i| Divergence {
                step: i / y.nrows(),
                magnitude: f64::INFINITY,
            });
            (y, None, div)
        }
    };
    Ok(SmrForward {
        y,
        trace,
        gate: g,
        stats,
        divergence,
    })
}

/// Gate parameters registered in a [`ParamSet`] under `{prefix}.*` names.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmrParams {
    pub channels: usize,
    pub tau: usize,
    pub padding: PadMode,
    pub weight: ParamId,
    pub bias: ParamId,
    pub linear: Option<(ParamId, ParamId)>,
}

impl SmrParams {
    pub fn register(params: &mut ParamSet, prefix: &str, gate: &SmrGate) -> Self {
        let c = gate.channels;
        let weight = params.add(
            format!("{prefix}.weight"),
            Tensor::new(&[c, c, gate.tau], gate.weight.clone()).expect("validated size"),
        );
        let bias = params.add(format!("{prefix}.bias"), Tensor::new(&[c], gate.bias.clone()).expect("validated size"));
        let linear = gate.linear.as_ref().map(|(w, b)| {
            (
                params.add(format!("{prefix}.linear.weight"), Tensor::new(&[c, c], w.clone()).expect("validated size")),
                params.add(format!("{prefix}.linear.bias"), Tensor::new(&[c], b.clone()).expect("validated size")),
            )
        });
        Self {
            channels: c,
            tau: gate.tau,
            padding: gate.padding,
            weight,
            bias,
            linear,
        }
    }

    /// Current numeric values.
    pub fn gate(&self, params: &ParamSet) -> SmrGate {
        SmrGate {
            channels: self.channels,
            tau: self.tau,
            weight: params.get(self.weight).data().to_vec(),
            bias: params.get(self.bias).data().to_vec(),
            linear: self
                .linear
                .map(|(w, b)| (params.get(w).data().to_vec(), params.get(b).data().to_vec())),
            padding: self.padding,
        }
    }

    /// Records the gate on `tape`; returns `(gated, gate)` for `u [C, L]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, u: Var) -> Result<(Var, Var), GradError> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let mut pre = tape.conv1d_causal(u, w, Some(b), false, self.padding)?;
        if let Some((lw, lb)) = self.linear {
            let lw = tape.param(params, lw);
            let lb = tape.param(params, lb);
            let len = tape.shape(u)[1];
            let mixed = tape.matmul(lw, pre)?;
            let bias = tape.broadcast_seq(lb, len);
            pre = tape.add(mixed, bias)?;
        }
        let gate = tape.sigmoid(pre);
        let gated = tape.mul(gate, u)?;
        Ok((gated, gate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkit::check::{check_gradients, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neutral_gate_halves_input() {
        let u = DMatrix::from_fn(2, 5, |i, k| (i * 5 + k) as f64 - 3.0);
        let out = smr_gate(&SmrGate::neutral(2, 4), &u).unwrap();
        assert_eq!(out.gated, u * 0.5);
    }

    #[test]
    fn strong_single_tap_passes_input() {
        let mut g = SmrGate::neutral(1, 1);
        g.weight[0] = 10.0;
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let out = smr_gate(&g, &u).unwrap();
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((out.gate[(0, 0)] - s10).abs() < 1e-15);
        assert!((out.gate[(0, 0)] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn tape_matches_numeric_with_linear_and_replicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [PadMode::Zero, PadMode::ReplicateFirst] {
            let cfg = SmrConfig { tau: 3, use_linear: true, padding };
            let gate = SmrGate::random(3, &cfg, &mut rng);
            let u = DMatrix::from_fn(3, 7, |i, k| ((i * 7 + k) as f64 * 0.9).sin() + 0.5);
            let reference = smr_gate(&gate, &u).unwrap();
            let mut ps = ParamSet::new();
            let sp = SmrParams::register(&mut ps, "smr", &gate);
            let mut tape = Tape::new();
            let row_major: Vec<f64> = (0..3).flat_map(|i| (0..7).map(move |k| (i, k))).map(|(i, k)| u[(i, k)]).collect();
            let uv = tape.constant_from(&[3, 7], row_major).unwrap();
            let (gated, _) = sp.forward(&mut tape, &ps, uv).unwrap();
            for i in 0..3 {
                for k in 0..7 {
                    assert!((tape.value(gated)[i * 7 + k] - reference.gated[(i, k)]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn scan_and_conv_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gate = SmrGate::random(2, &SmrConfig::default(), &mut rng);
        let a = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, -0.1, 0.7, 0.2, 0.0, 0.05, 0.9]);
        let b = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3 - 0.2);
        let c = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let model = DiscreteSsm::from_matrices(a, b, c).unwrap();
        let u = DMatrix::from_fn(2, 40, |i, k| ((k + i) as f64 * 0.21).cos());
        let s = smr_ssm_forward(&model, &gate, &u, ExecMode::Scan).unwrap();
        let v = smr_ssm_forward(&model, &gate, &u, ExecMode::Conv).unwrap();
        assert!((s.y - v.y).amax() < 1e-12);
        assert!(s.stats.max_gate < 1.0 && s.stats.min_gate > 0.0);
    }

    #[test]
    fn gate_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SmrConfig { tau: 3, use_linear: true, padding: PadMode::Zero };
        let gate = SmrGate::random(2, &cfg, &mut rng);
        let mut ps = ParamSet::new();
        let sp = SmrParams::register(&mut ps, "smr", &gate);
        let (err, name) = check_gradients(&mut ps, FD_STEP, |tape, ps| {
            let u = tape.constant_from(&[2, 6], (0..12).map(|i| (i as f64 * 0.4).sin()).collect())?;
            let (g, _) = sp.forward(tape, ps, u)?;
            let sq = tape.mul(g, g)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn channel_mismatch() {
        assert!(smr_gate(&SmrGate::neutral(2, 4), &DMatrix::zeros(3, 4)).is_err());
    }
}
