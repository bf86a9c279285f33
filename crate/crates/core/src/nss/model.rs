use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NssError;
use crate::gradkit::{GradError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::smr::{SmrConfig, SmrGate, SmrParams};
use crate::ssm::checkpoint::Checkpoint;
use crate::ssm::{diff, spectral_radius, ssm_scan, DiscreteSsm, ParamForm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    None,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    /// State size `n` of every channel.
    pub state_size: usize,
    /// Hidden channels `H`; each is an independent single-input SSM.
    pub channels: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub form: ParamForm,
    /// Gate before every layer's state update; absent means off.
    pub smr: Option<SmrConfig>,
    pub residual: bool,
    pub nonlinearity: Nonlinearity,
    /// Initial steps are log-uniform in this range.
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            state_size: 16,
            channels: 1,
            input_dim: 1,
            output_dim: 1,
            form: ParamForm::Dense,
            smr: None,
            residual: false,
            nonlinearity: Nonlinearity::None,
            dt_min: 0.01,
            dt_max: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NssError> {
        let positive = [
            ("layers", self.layers),
            ("state_size", self.state_size),
            ("channels", self.channels),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NssError::Config(format!("{name} must be at least 1")));
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min && self.dt_max.is_finite()) {
            return Err(NssError::Config(format!("invalid step range [{}, {}]", self.dt_min, self.dt_max)));
        }
        if let Some(s) = &self.smr {
            if s.tau == 0 {
                return Err(NssError::Config("smr.tau must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (h, n) = (self.channels, self.state_size);
        let a = match self.form {
            ParamForm::Dense => h * n * n,
            ParamForm::Diagonal => h * n,
        };
        let gate = self.smr.map_or(0, |s| h * h * s.tau + h + if s.use_linear { h * h + h } else { 0 });
        let layer = a + 2 * h * n + h + gate;
        h * self.input_dim + h + self.layers * layer + self.output_dim * h + self.output_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerIds {
    a: ParamId,
    b: ParamId,
    c: ParamId,
    log_dt: ParamId,
    smr: Option<SmrParams>,
}

/// Stack of gated state-space layers between linear input and output maps.
#[derive(Clone, Debug, PartialEq)]
pub struct NssModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    w_in: ParamId,
    b_in: ParamId,
    layers: Vec<LayerIds>,
    w_out: ParamId,
    b_out: ParamId,
}

/// Per-tape discretized layer parameters, shared by every sequence on the tape.
#[derive(Clone, Debug)]
pub struct Prepared {
    len: usize,
    layers: Vec<PreparedLayer>,
}

#[derive(Clone, Copy, Debug)]
struct PreparedLayer {
    a_bar: Var,
    b_bar: Var,
    c: Var,
    kernel: Var,
}

/// Records of one sequence's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// `[output_dim, L]`
    pub output: Var,
    /// Input to each layer's state update (after the gate), `[H, L]`.
    pub ssm_inputs: Vec<Var>,
    /// Gate values per layer, when the gate is enabled.
    pub gates: Vec<Var>,
}

fn uniform(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..count).map(|_| rng.gen_range(lo..hi)).collect()
}

impl NssModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NssError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, n) = (config.channels, config.state_size);
        let mut params = ParamSet::new();
        let bound_in = 1.0 / (config.input_dim as f64).sqrt();
        let w_in = params.add(
            "in.weight",
            Tensor::new(&[h, config.input_dim], uniform(&mut rng, h * config.input_dim, -bound_in, bound_in))?,
        );
        let b_in = params.add("in.bias", Tensor::zeros(&[h]));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let a = match config.form {
                ParamForm::Dense => {
                    let mut v = uniform(&mut rng, h * n * n, -0.1, 0.1);
                    for b in 0..h {
                        for i in 0..n {
                            v[b * n * n + i * n + i] -= 1.0;
                        }
                    }
                    Tensor::new(&[h, n, n], v)?
                }
                ParamForm::Diagonal => Tensor::new(&[h, n], uniform(&mut rng, h * n, -1.0, -0.1))?,
            };
            let a = params.add(format!("layer{l}.a"), a);
            let b = params.add(format!("layer{l}.b"), Tensor::new(&[h, n], uniform(&mut rng, h * n, -1.0, 1.0))?);
            let cb = 1.0 / (n as f64).sqrt();
            let c = params.add(format!("layer{l}.c"), Tensor::new(&[h, n], uniform(&mut rng, h * n, -cb, cb))?);
            let (lo, hi) = (config.dt_min.ln(), config.dt_max.ln());
            let log_dt = (0..h)
                .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
                .collect::<Vec<_>>();
            let log_dt = params.add(format!("layer{l}.log_dt"), Tensor::new(&[h], log_dt)?);
            let smr = config.smr.map(|s| {
                let gate = SmrGate::random(h, &s, &mut rng);
                SmrParams::register(&mut params, &format!("layer{l}.smr"), &gate)
            });
            layers.push(LayerIds { a, b, c, log_dt, smr });
        }
        let bound_out = 1.0 / (h as f64).sqrt();
        let w_out = params.add(
            "out.weight",
            Tensor::new(&[config.output_dim, h], uniform(&mut rng, config.output_dim * h, -bound_out, bound_out))?,
        );
        let b_out = params.add("out.bias", Tensor::zeros(&[config.output_dim]));
        Ok(Self {
            config,
            params,
            w_in,
            b_in,
            layers,
            w_out,
            b_out,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Discretizes every layer and builds its length-`len` kernel.
    pub fn prepare(&self, tape: &mut Tape, len: usize) -> Result<Prepared, GradError> {
        let form = self.config.form;
        let mut layers = Vec::with_capacity(self.layers.len());
        for ids in &self.layers {
            let a = tape.param(&self.params, ids.a);
            let b = tape.param(&self.params, ids.b);
            let c = tape.param(&self.params, ids.c);
            let log_dt = tape.param(&self.params, ids.log_dt);
            let dt = tape.exp(log_dt);
            let (a_bar, b_bar) = diff::discretize_bank(tape, form, a, b, dt)?;
            let kernel = diff::kernel_bank(tape, form, a_bar, b_bar, c, len)?;
            layers.push(PreparedLayer { a_bar, b_bar, c, kernel });
        }
        Ok(Prepared { len, layers })
    }

    /// Forward pass of one `[input_dim, L]` sequence.
    pub fn apply(&self, tape: &mut Tape, prep: &Prepared, u: Var) -> Result<ForwardRecord, GradError> {
        let len = tape.shape(u)[1];
        if len != prep.len {
            return Err(GradError::Shape {
                op: "model",
                detail: format!("prepared for length {}, got {len}", prep.len),
            });
        }
        let w_in = tape.param(&self.params, self.w_in);
        let b_in = tape.param(&self.params, self.b_in);
        let proj = tape.matmul(w_in, u)?;
        let bias = tape.broadcast_seq(b_in, len);
        let mut v = tape.add(proj, bias)?;
        let mut ssm_inputs = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::new();
        for (ids, layer) in self.layers.iter().zip(&prep.layers) {
            let x = match &ids.smr {
                Some(sp) => {
                    let (gated, gate) = sp.forward(tape, &self.params, v)?;
                    gates.push(gate);
                    gated
                }
                None => v,
            };
            ssm_inputs.push(x);
            let mut y = diff::conv_bank(tape, layer.kernel, x)?;
            if self.config.residual {
                y = tape.add(y, v)?;
            }
            if self.config.nonlinearity == Nonlinearity::Gelu {
                y = tape.gelu(y);
            }
            v = y;
        }
        let w_out = tape.param(&self.params, self.w_out);
        let b_out = tape.param(&self.params, self.b_out);
        let out = tape.matmul(w_out, v)?;
        let bias = tape.broadcast_seq(b_out, len);
        let output = tape.add(out, bias)?;
        Ok(ForwardRecord { output, ssm_inputs, gates })
    }

    /// Discrete per-channel models of every layer at the current parameters.
    pub fn discrete_layers(&self) -> Result<Vec<Vec<DiscreteSsm>>, NssError> {
        let mut tape = Tape::new();
        let prep = self.prepare(&mut tape, 1)?;
        Ok(prep.layers.iter().map(|l| self.split_channels(&tape, l)).collect())
    }

    fn split_channels(&self, tape: &Tape, layer: &PreparedLayer) -> Vec<DiscreteSsm> {
        let (h, n) = (self.config.channels, self.config.state_size);
        let (a, b, c) = (tape.value(layer.a_bar), tape.value(layer.b_bar), tape.value(layer.c));
        (0..h)
            .map(|ch| {
                let a_bar = match self.config.form {
                    ParamForm::Dense => DMatrix::from_row_slice(n, n, &a[ch * n * n..(ch + 1) * n * n]),
                    ParamForm::Diagonal => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&a[ch * n..(ch + 1) * n])),
                };
                let b_bar = DMatrix::from_column_slice(n, 1, &b[ch * n..(ch + 1) * n]);
                let c_bar = DMatrix::from_row_slice(1, n, &c[ch * n..(ch + 1) * n]);
                let mut m = DiscreteSsm::from_matrices(a_bar, b_bar, c_bar).expect("consistent shapes");
                m.form = self.config.form;
                m
            })
            .collect()
    }

    /// Largest spectral radius over all channels and layers.
    pub fn spectral_radius(&self) -> Result<f64, NssError> {
        Ok(self
            .discrete_layers()?
            .iter()
            .flatten()
            .map(|m| spectral_radius(&m.a_bar, m.form).value)
            .fold(0.0, f64::max))
    }

    /// Runs one sequence (`[input_dim × L]`, row-major) without gradients and
    /// returns the output together with every layer's hidden states.
    pub fn run(&self, input: &[f64], len: usize) -> Result<Evaluation, NssError> {
        let mut tape = Tape::new().with_max_conv_taps(len.max(crate::gradkit::DEFAULT_MAX_CONV_TAPS));
        let prep = self.prepare(&mut tape, len)?;
        let u = tape.constant_from(&[self.config.input_dim, len], input.to_vec())?;
        let rec = self.apply(&mut tape, &prep, u)?;
        let h = self.config.channels;
        let mut layer_states = Vec::with_capacity(self.layers.len());
        for (layer, x) in prep.layers.iter().zip(&rec.ssm_inputs) {
            let models = self.split_channels(&tape, layer);
            let xv = tape.value(*x);
            let mut abs_sum = vec![0.0; len];
            let mut non_finite = false;
            for (ch, m) in models.iter().enumerate().take(h) {
                let uh = DMatrix::from_row_slice(1, len, &xv[ch * len..(ch + 1) * len]);
                let out = ssm_scan(m, &uh, None)?;
                non_finite |= out.divergence.is_some();
                for (k, s) in out.trace.abs_sums().into_iter().enumerate() {
                    abs_sum[k] += s;
                }
            }
            layer_states.push(LayerStates { abs_sum, non_finite });
        }
        Ok(Evaluation {
            output: tape.value(rec.output).to_vec(),
            layer_states,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.config.form, self.config.state_size, self.config.channels, &self.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    /// `Σ_h Σ_j |x_k[h, j]|` per step.
    pub abs_sum: Vec<f64>,
    pub non_finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `[output_dim × L]`, row-major.
    pub output: Vec<f64>,
    pub layer_states: Vec<LayerStates>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_closed_form() {
        let cfg = ModelConfig { state_size: 16, ..Default::default() };
        let m = NssModel::new(cfg.clone(), 0).unwrap();
        // W_in 1, b_in 1, A 256, B 16, C 16, log_dt 1, W_out 1, b_out 1
        assert_eq!(m.parameter_count(), 293);
        assert_eq!(cfg.parameter_count(), 293);
        let with_gate = ModelConfig {
            smr: Some(SmrConfig::default()),
            ..cfg
        };
        assert_eq!(NssModel::new(with_gate.clone(), 0).unwrap().parameter_count(), 293 + 4 + 1);
        let with_linear = ModelConfig {
            smr: Some(SmrConfig { use_linear: true, ..Default::default() }),
            channels: 3,
            ..with_gate
        };
        assert_eq!(
            NssModel::new(with_linear.clone(), 0).unwrap().parameter_count(),
            with_linear.parameter_count()
        );
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig { channels: 2, ..Default::default() };
        assert_eq!(NssModel::new(cfg.clone(), 5).unwrap().params, NssModel::new(cfg.clone(), 5).unwrap().params);
        assert_ne!(NssModel::new(cfg.clone(), 5).unwrap().params, NssModel::new(cfg, 6).unwrap().params);
    }

    #[test]
    fn tape_output_matches_channel_scan() {
        let cfg = ModelConfig {
            channels: 2,
            state_size: 3,
            ..Default::default()
        };
        let m = NssModel::new(cfg, 1).unwrap();
        let u: Vec<f64> = (0..20).map(|k| (k as f64 * 0.3).sin()).collect();
        let ev = m.run(&u, 20).unwrap();
        // rebuild the output from per-channel scans
        let layers = m.discrete_layers().unwrap();
        let w_in = m.params.get(m.w_in).data().to_vec();
        let w_out = m.params.get(m.w_out).data().to_vec();
        let mut y = [0.0; 20];
        for (ch, model) in layers[0].iter().enumerate() {
            let uh = DMatrix::from_row_slice(1, 20, &u.iter().map(|v| v * w_in[ch]).collect::<Vec<_>>());
            let out = ssm_scan(model, &uh, None).unwrap();
            for (k, yk) in y.iter_mut().enumerate() {
                *yk += w_out[ch] * out.y[(0, k)];
            }
        }
        for (got, want) in ev.output.iter().zip(&y) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
