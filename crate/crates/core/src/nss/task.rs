use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NssError;

/// Equidistant samples of `sin(frequency·t)` on `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SineTask {
    pub frequency: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SineTask {
    pub fn grid_width(&self) -> f64 {
        1.0 / self.times.len() as f64
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.frequency * t).sin()
    }
}

pub fn make_sine_task(count: usize, frequency: f64) -> Result<SineTask, NssError> {
    if count < 2 {
        return Err(NssError::Contract(format!("need at least two samples, got {count}")));
    }
    let times: Vec<f64> = (0..count).map(|i| i as f64 / count as f64).collect();
    let values = times.iter().map(|t| (frequency * t).sin()).collect();
    Ok(SineTask { frequency, times, values })
}

/// Jitters every sample time by `δ ∈ (−δ_max/2, δ_max/2)` and resamples.
/// Returns `(t′, u′)`. Perturbed times are clamped to `[t_0, t_{L−1}]`.
pub fn perturb_grid(
    times: &[f64],
    values_fn: impl Fn(f64) -> f64,
    delta_max: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), NssError> {
    let spacing = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if !(delta_max >= 0.0) || delta_max > spacing + 1e-15 {
        return Err(NssError::Contract(format!(
            "perturbation width {delta_max} must lie in [0, {spacing}] (minimum grid spacing)"
        )));
    }
    let (lo, hi) = (times[0], times[times.len() - 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = delta_max / 2.0;
    let perturbed: Vec<f64> = times
        .iter()
        .map(|t| {
            let d = if half > 0.0 { rng.gen_range(-half..half) } else { 0.0 };
            (t + d).clamp(lo, hi)
        })
        .collect();
    let values = perturbed.iter().map(|t| values_fn(*t)).collect();
    Ok((perturbed, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sine_task_values() {
        let task = make_sine_task(100, 5.0 * PI).unwrap();
        assert_eq!(task.values.len(), 100);
        assert_eq!(task.values[0], 0.0);
        assert!((task.values[10] - 1.0).abs() < 1e-12);
        assert!((task.grid_width() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_width_is_identity() {
        let task = make_sine_task(100, 5.0 * PI).unwrap();
        let (t, u) = perturb_grid(&task.times, |t| task.eval(t), 0.0, 4).unwrap();
        assert_eq!(t, task.times);
        assert_eq!(u, task.values);
    }

    #[test]
    fn ordering_and_lipschitz() {
        let task = make_sine_task(100, 5.0 * PI).unwrap();
        for seed in 0..1000 {
            let (t, _) = perturb_grid(&task.times, |t| task.eval(t), 0.01, seed).unwrap();
            assert!(t.windows(2).all(|w| w[1] > w[0]), "seed {seed}");
        }
        let (_, u) = perturb_grid(&task.times, |t| task.eval(t), 0.01, 0).unwrap();
        let dev = u.iter().zip(&task.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 5.0 * PI * 0.005 + 1e-12, "{dev}");
    }

    #[test]
    fn too_wide_is_rejected() {
        let task = make_sine_task(100, 5.0 * PI).unwrap();
        assert!(perturb_grid(&task.times, |t| task.eval(t), 0.02, 0).is_err());
    }
}
