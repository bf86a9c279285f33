use serde::{Deserialize, Serialize};

use super::{PendulumDataset, PendulumError, PendulumSample};
use crate::gradkit::AdamConfig;
use crate::nss::{evaluate_loss, train_model_with, ModelConfig, Nonlinearity, NssModel, Objective, Sample, TrainConfig};
use crate::smr::SmrConfig;
use crate::ssm::ParamForm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    /// Shared architecture; `smr` is overridden per variant.
    pub model: ModelConfig,
    /// Gate used by the SMR variant.
    pub smr: SmrConfig,
    pub train: TrainConfig,
    /// Seed for both variants' initialization.
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 4,
                state_size: 16,
                channels: 64,
                input_dim: 576,
                output_dim: 2,
                form: ParamForm::Diagonal,
                smr: None,
                residual: true,
                nonlinearity: Nonlinearity::Gelu,
                dt_min: 1e-3,
                dt_max: 1e-1,
            },
            smr: SmrConfig::default(),
            train: TrainConfig {
                epochs: 100,
                optimizer: AdamConfig {
                    lr: 1e-4,
                    weight_decay: 0.01,
                    ..Default::default()
                },
                objective: Objective::Reconstruction,
                batch_size: 16,
                seed: 0,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub smr: bool,
    /// Lowest test MSE over all epochs, including the untrained model.
    pub best_test_mse: f64,
    /// Epoch of the best test MSE; `0` is the untrained model.
    pub best_epoch: usize,
    /// Test MSE before training and after every epoch.
    pub test_mse: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub diverged_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionReport {
    pub without_smr: VariantResult,
    pub with_smr: VariantResult,
    /// `1 − best_with / best_without`
    pub relative_improvement: f64,
    pub smr_improves: bool,
    /// MSE of predicting the training-set mean target everywhere.
    pub mean_predictor_mse: f64,
}

/// Frames become a `[pixels × L]` input and targets a `[2 × L]` target.
pub fn to_sample(s: &PendulumSample, pixels: usize) -> Sample {
    let len = s.timestamps.len();
    let mut input = vec![0.0; pixels * len];
    for (k, frame) in s.frames.chunks(pixels).enumerate() {
        for (p, v) in frame.iter().enumerate() {
            input[p * len + k] = *v;
        }
    }
    let mut target = vec![0.0; 2 * len];
    for (k, t) in s.targets.chunks(2).enumerate() {
        target[k] = t[0];
        target[len + k] = t[1];
    }
    Sample { input, target, len }
}

/// Mean squared error of the constant predictor equal to the mean of `fit`.
pub fn mean_predictor_mse(fit: &[PendulumSample], eval: &[PendulumSample]) -> f64 {
    let mut mean = [0.0; 2];
    let mut n = 0usize;
    for t in fit.iter().flat_map(|s| s.targets.chunks(2)) {
        mean[0] += t[0];
        mean[1] += t[1];
        n += 1;
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut acc = 0.0;
    let mut m = 0usize;
    for t in eval.iter().flat_map(|s| s.targets.chunks(2)) {
        acc += (t[0] - mean[0]).powi(2) + (t[1] - mean[1]).powi(2);
        m += 2;
    }
    acc / m as f64
}

fn run_variant(cfg: &RegressionConfig, smr: bool, train: &[Sample], test: &[Sample]) -> Result<VariantResult, PendulumError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.smr = smr.then_some(cfg.smr);
    let mut model = NssModel::new(model_cfg, cfg.seed)?;
    let mut test_mse = vec![evaluate_loss(&model, test, Objective::Reconstruction)?];
    let outcome = train_model_with(&mut model, train, &cfg.train, |_, m| {
        test_mse.push(evaluate_loss(m, test, Objective::Reconstruction)?);
        Ok(())
    })?;
    let (best_epoch, best_test_mse) = test_mse
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold((0, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b });
    Ok(VariantResult {
        smr,
        best_test_mse,
        best_epoch,
        test_mse,
        train_loss: outcome.losses,
        diverged_at: outcome.diverged_at,
    })
}

/// Trains the model with and without the gate from the same seed and
/// compares their best test MSE. Timestamps are not given to the model.
pub fn run_regression(data: &PendulumDataset, cfg: &RegressionConfig) -> Result<RegressionReport, PendulumError> {
    run_regression_threads(data, cfg, 1)
}

/// [`run_regression`] training the two variants on separate threads when
/// `threads > 1`. Results do not depend on the thread count.
pub fn run_regression_threads(data: &PendulumDataset, cfg: &RegressionConfig, threads: usize) -> Result<RegressionReport, PendulumError> {
    let pixels = data.config.pixels();
    if cfg.model.input_dim != pixels || cfg.model.output_dim != 2 {
        return Err(PendulumError::Config(format!(
            "model maps {} -> {}, data needs {pixels} -> 2",
            cfg.model.input_dim, cfg.model.output_dim
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(PendulumError::Contract("both splits must be non-empty".into()));
    }
    let train: Vec<Sample> = data.train.iter().map(|s| to_sample(s, pixels)).collect();
    let test: Vec<Sample> = data.test.iter().map(|s| to_sample(s, pixels)).collect();
    let (without_smr, with_smr) = if threads > 1 {
        std::thread::scope(|s| {
            let off = s.spawn(|| run_variant(cfg, false, &train, &test));
            let on = run_variant(cfg, true, &train, &test);
            (off.join().expect("variant thread panicked"), on)
        })
    } else {
        (run_variant(cfg, false, &train, &test), run_variant(cfg, true, &train, &test))
    };
    let (without_smr, with_smr) = (without_smr?, with_smr?);
    let relative_improvement = 1.0 - with_smr.best_test_mse / without_smr.best_test_mse;
    Ok(RegressionReport {
        smr_improves: with_smr.best_test_mse < without_smr.best_test_mse,
        relative_improvement,
        mean_predictor_mse: mean_predictor_mse(&data.train, &data.test),
        without_smr,
        with_smr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::{generate_dataset, PendulumConfig};

    fn tiny() -> (PendulumDataset, RegressionConfig) {
        let data = generate_dataset(&PendulumConfig {
            train_size: 4,
            test_size: 2,
            seq_len: 6,
            image_side: 6,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = RegressionConfig::default();
        cfg.model.input_dim = 36;
        cfg.model.channels = 4;
        cfg.model.state_size = 4;
        cfg.model.layers = 2;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        (data, cfg)
    }

    #[test]
    fn layout_transposes() {
        let s = PendulumSample {
            timestamps: vec![0.0, 1.0],
            frames: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            targets: vec![0.0, 1.0, 1.0, 0.0],
            mask: vec![false, false],
        };
        let t = to_sample(&s, 3);
        assert_eq!(t.input, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(t.target, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_predictor_is_target_variance() {
        let (data, _) = tiny();
        let all: Vec<f64> = data.test.iter().flat_map(|s| s.targets.clone()).collect();
        let v = mean_predictor_mse(&data.test, &data.test);
        let (mut ms, mut mc) = (0.0, 0.0);
        for p in all.chunks(2) {
            ms += p[0];
            mc += p[1];
        }
        let n = (all.len() / 2) as f64;
        let var = all.chunks(2).map(|p| (p[0] - ms / n).powi(2) + (p[1] - mc / n).powi(2)).sum::<f64>() / (2.0 * n);
        assert!((v - var).abs() < 1e-15);
    }

    #[test]
    fn paired_run_reports_both() {
        let (data, cfg) = tiny();
        let r = run_regression(&data, &cfg).unwrap();
        assert_eq!(r.without_smr.test_mse.len(), 3);
        assert_eq!(r.with_smr.test_mse.len(), 3);
        assert!(r.without_smr.best_test_mse.is_finite() && r.with_smr.best_test_mse.is_finite());
        assert_eq!(r.smr_improves, r.with_smr.best_test_mse < r.without_smr.best_test_mse);
    }

    #[test]
    fn zero_epochs_start_close() {
        let (data, mut cfg) = tiny();
        cfg.train.epochs = 0;
        let r = run_regression(&data, &cfg).unwrap();
        let (a, b) = (r.without_smr.best_test_mse, r.with_smr.best_test_mse);
        assert!((a - b).abs() < 0.5 * a.max(b), "{a} vs {b}");
    }
}
