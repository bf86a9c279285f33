use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PendulumError;

/// Largest RK4 substep used between requested times.
pub const MAX_SUBSTEP: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumConfig {
    pub seq_len: usize,
    pub image_side: usize,
    pub t_max: f64,
    /// `g / l`
    pub gravity: f64,
    pub damping: f64,
    pub corruption: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            seq_len: 50,
            image_side: 24,
            t_max: 100.0,
            gravity: 1.0,
            damping: 0.1,
            corruption: 0.2,
            train_size: 500,
            test_size: 200,
            seed: 0,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<(), PendulumError> {
        if self.seq_len == 0 {
            return Err(PendulumError::Config("seq_len must be at least 1".into()));
        }
        if self.image_side < 4 {
            return Err(PendulumError::Config(format!("image_side must be at least 4, got {}", self.image_side)));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(PendulumError::Config(format!("corruption must lie in [0, 1], got {}", self.corruption)));
        }
        if !(self.t_max > 0.0) || !(self.gravity >= 0.0) || !(self.damping >= 0.0) {
            return Err(PendulumError::Config("t_max must be positive, gravity and damping non-negative".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumSample {
    pub timestamps: Vec<f64>,
    /// `L × side²`, row-major per frame.
    pub frames: Vec<f64>,
    /// `L × 2`: `(sin θ, cos θ)` per frame.
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

fn deriv(s: [f64; 2], gravity: f64, damping: f64) -> [f64; 2] {
    [s[1], -gravity * s[0].sin() - damping * s[1]]
}

fn rk4(s: [f64; 2], h: f64, gravity: f64, damping: f64) -> [f64; 2] {
    let add = |a: [f64; 2], b: [f64; 2], c: f64| [a[0] + c * b[0], a[1] + c * b[1]];
    let k1 = deriv(s, gravity, damping);
    let k2 = deriv(add(s, k1, h / 2.0), gravity, damping);
    let k3 = deriv(add(s, k2, h / 2.0), gravity, damping);
    let k4 = deriv(add(s, k3, h), gravity, damping);
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Integrates `θ″ = −(g/l) sin θ − damping·θ′` from `t = 0` and returns
/// `(θ, θ′)` at each timestamp. Each gap is split into equal RK4 substeps
/// no longer than [`MAX_SUBSTEP`].
pub fn simulate_states(theta0: f64, omega0: f64, gravity: f64, damping: f64, timestamps: &[f64]) -> Result<Vec<[f64; 2]>, PendulumError> {
    if timestamps.windows(2).any(|w| w[1] < w[0]) || timestamps.first().is_some_and(|t| *t < 0.0) {
        return Err(PendulumError::Contract("timestamps must be sorted and non-negative".into()));
    }
    let mut s = [theta0, omega0];
    let mut t = 0.0;
    let mut out = Vec::with_capacity(timestamps.len());
    for &target in timestamps {
        let gap = target - t;
        if gap > 0.0 {
            let n = (gap / MAX_SUBSTEP).ceil() as usize;
            let h = gap / n as f64;
            for _ in 0..n {
                s = rk4(s, h, gravity, damping);
            }
        }
        t = target;
        out.push(s);
    }
    Ok(out)
}

pub fn simulate_angles(theta0: f64, omega0: f64, gravity: f64, damping: f64, timestamps: &[f64]) -> Result<Vec<f64>, PendulumError> {
    Ok(simulate_states(theta0, omega0, gravity, damping, timestamps)?.into_iter().map(|s| s[0]).collect())
}

fn segment_distance(px: f64, py: f64, bx: f64, by: f64) -> f64 {
    // segment from the origin to (bx, by)
    let len2 = bx * bx + by * by;
    let s = if len2 > 0.0 { ((px * bx + py * by) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (px - s * bx, py - s * by);
    (dx * dx + dy * dy).sqrt()
}

/// Grayscale frame, row-major, values in `[0, 1]`. The rod runs from the
/// image centre to the bob at `centre + 0.8·(side/2)·(sin θ, cos θ)`, with
/// `θ = 0` pointing down; the bob is a disc of radius `side/12`.
pub fn render_frame(angle: f64, side: usize) -> Vec<f64> {
    let c = side as f64 / 2.0;
    let reach = 0.8 * c;
    let (bx, by) = (reach * angle.sin(), reach * angle.cos());
    let radius = side as f64 / 12.0;
    let mut img = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let px = (col as f64 + 0.5) - c;
            let py = (row as f64 + 0.5) - c;
            let rod = 0.5 * (1.0 - segment_distance(px, py, bx, by)).clamp(0.0, 1.0);
            let (dx, dy) = (px - bx, py - by);
            let bob = (radius + 0.5 - (dx * dx + dy * dy).sqrt()).clamp(0.0, 1.0);
            img[row * side + col] = rod.max(bob);
        }
    }
    img
}

/// Replaces each frame with uniform noise with the given probability.
/// `frames` holds consecutive frames of `pixels` values.
pub fn corrupt_frames(frames: &mut [f64], pixels: usize, probability: f64, rng: &mut impl Rng) -> Result<Vec<bool>, PendulumError> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(PendulumError::Contract(format!("probability {probability} outside [0, 1]")));
    }
    if pixels == 0 || !frames.len().is_multiple_of(pixels) {
        return Err(PendulumError::Contract("frame buffer is not a whole number of frames".into()));
    }
    let mut mask = Vec::with_capacity(frames.len() / pixels);
    for frame in frames.chunks_mut(pixels) {
        let hit = rng.gen_bool(probability);
        if hit {
            frame.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        }
        mask.push(hit);
    }
    Ok(mask)
}

/// One sample from its own RNG stream.
pub fn generate_sample(cfg: &PendulumConfig, rng: &mut ChaCha8Rng) -> Result<PendulumSample, PendulumError> {
    let theta0 = rng.gen_range(-PI..PI);
    let omega0 = rng.gen_range(-0.5..0.5);
    let timestamps = loop {
        let mut t: Vec<f64> = (0..cfg.seq_len).map(|_| rng.gen_range(0.0..=cfg.t_max)).collect();
        t.sort_by(f64::total_cmp);
        if t.windows(2).all(|w| w[1] > w[0]) {
            break t;
        }
    };
    let angles = simulate_angles(theta0, omega0, cfg.gravity, cfg.damping, &timestamps)?;
    let mut frames = Vec::with_capacity(cfg.seq_len * cfg.pixels());
    let mut targets = Vec::with_capacity(cfg.seq_len * 2);
    for a in &angles {
        frames.extend(render_frame(*a, cfg.image_side));
        targets.extend([a.sin(), a.cos()]);
    }
    let mask = corrupt_frames(&mut frames, cfg.pixels(), cfg.corruption, rng)?;
    Ok(PendulumSample {
        timestamps,
        frames,
        targets,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumDataset {
    pub config: PendulumConfig,
    pub train: Vec<PendulumSample>,
    pub test: Vec<PendulumSample>,
}

/// Stream id of sample `index` in a split; train and test never share one.
fn stream(split: u64, index: usize) -> u64 {
    (split << 32) | index as u64
}

pub fn generate_dataset(cfg: &PendulumConfig) -> Result<PendulumDataset, PendulumError> {
    cfg.validate()?;
    let make = |split: u64, count: usize| -> Result<Vec<PendulumSample>, PendulumError> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(stream(split, i));
                generate_sample(cfg, &mut rng)
            })
            .collect()
    };
    Ok(PendulumDataset {
        config: cfg.clone(),
        train: make(0, cfg.train_size)?,
        test: make(1, cfg.test_size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_stays_at_rest() {
        let t: Vec<f64> = (0..20).map(|k| k as f64 * 5.0).collect();
        assert!(simulate_angles(0.0, 0.0, 1.0, 0.1, &t).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn small_angle_matches_cosine() {
        let t: Vec<f64> = (0..=100).map(|k| k as f64 * 2.0 * PI / 100.0).collect();
        let got = simulate_angles(0.01, 0.0, 1.0, 0.0, &t).unwrap();
        for (a, t) in got.iter().zip(&t) {
            assert!((a - 0.01 * t.cos()).abs() < 1e-5);
        }
    }

    #[test]
    fn frames_mirror_and_cover_partially() {
        let side = 24;
        for theta in [0.3, 1.2, 2.9, -0.7] {
            let a = render_frame(theta, side);
            let b = render_frame(-theta, side);
            for r in 0..side {
                for c in 0..side {
                    assert_eq!(a[r * side + c], b[r * side + side - 1 - c]);
                }
            }
            let s: f64 = a.iter().sum();
            assert!(s > 0.0 && s < (side * side) as f64);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hanging_bob_is_centred_low() {
        let side = 24;
        let img = render_frame(0.0, side);
        let (arg, _) = img.iter().enumerate().fold((0, -1.0), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
        let (row, col) = (arg / side, arg % side);
        assert!(row >= side / 2);
        assert!(col == side / 2 || col == side / 2 - 1);
    }

    #[test]
    fn corruption_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig = vec![0.5; 4 * 9];
        let mut f = orig.clone();
        assert_eq!(corrupt_frames(&mut f, 9, 0.0, &mut rng).unwrap(), vec![false; 4]);
        assert_eq!(f, orig);
        assert_eq!(corrupt_frames(&mut f, 9, 1.0, &mut rng).unwrap(), vec![true; 4]);
        assert!(f.iter().all(|v| *v != 0.5));
    }

    #[test]
    fn small_dataset_shapes() {
        let cfg = PendulumConfig {
            train_size: 3,
            test_size: 2,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (3, 2));
        for s in d.train.iter().chain(&d.test) {
            assert_eq!(s.timestamps.len(), 50);
            assert_eq!(s.frames.len(), 50 * 576);
            assert_eq!(s.targets.len(), 100);
            assert!(s.timestamps.windows(2).all(|w| w[1] > w[0]));
            for p in s.targets.chunks(2) {
                assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(d.train[0].timestamps, d.test[0].timestamps);
    }
}
