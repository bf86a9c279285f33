use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{DiscreteSsm, SsmError};

/// First step at which the recurrence left the finite range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub magnitude: f64,
}

/// Hidden states visited by [`ssm_scan`], one column per step.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrace {
    pub states: DMatrix<f64>,
}

impl StateTrace {
    /// `Σ_j |x_k[j]|` for every step `k`.
    pub fn abs_sums(&self) -> Vec<f64> {
        self.states.column_iter().map(|c| c.iter().map(|v| v.abs()).sum()).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.states.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    /// `m × L`
    pub y: DMatrix<f64>,
    pub trace: StateTrace,
    /// Set when a state became non-finite; later values are not meaningful.
    pub divergence: Option<Divergence>,
}

/// Runs the recurrence over `u` (`m × L`, one column per step) from `x0`
/// (zero when `None`).
pub fn ssm_scan(model: &DiscreteSsm, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<ScanOutput, SsmError> {
    let n = model.state_dim();
    let m = model.io_dim();
    if u.nrows() != m {
        return Err(SsmError::Shape(format!("input has {} channels, model expects {m}", u.nrows())));
    }
    let mut x = match x0 {
        Some(x) if x.len() != n => return Err(SsmError::Shape(format!("initial state has {} entries, expected {n}", x.len()))),
        Some(x) => x.clone(),
        None => DVector::zeros(n),
    };
    let len = u.ncols();
    let mut y = DMatrix::zeros(m, len);
    let mut states = DMatrix::zeros(n, len);
    let mut divergence = None;
    for k in 0..len {
        x = &model.a_bar * &x + &model.b_bar * u.column(k);
        let mut yk = &model.c_bar * &x;
        if model.residual {
            yk += u.column(k);
        }
        if divergence.is_none() && !x.iter().all(|v| v.is_finite()) {
            divergence = Some(Divergence {
                step: k,
                magnitude: x.amax(),
            });
        }
        states.set_column(k, &x);
        y.set_column(k, &yk);
    }
    Ok(ScanOutput {
        y,
        trace: StateTrace { states },
        divergence,
    })
}

/// Convolution kernel `K̄[i] = C̄ Āⁱ B̄` for `i = 0 .. L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub taps: Vec<DMatrix<f64>>,
    pub residual: bool,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

pub fn ssm_kernel(model: &DiscreteSsm, len: usize) -> Kernel {
    let mut w = model.b_bar.clone();
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        taps.push(&model.c_bar * &w);
        w = &model.a_bar * w;
    }
    Kernel {
        taps,
        residual: model.residual,
    }
}

/// `y_k = Σ_{i ≤ k} K̄[i] u_{k−i}` (plus `u_k` when the kernel carries a residual).
pub fn ssm_conv(kernel: &Kernel, u: &DMatrix<f64>) -> Result<DMatrix<f64>, SsmError> {
    let len = u.ncols();
    if kernel.len() < len {
        return Err(SsmError::Contract(format!("kernel has {} taps for a sequence of {len}", kernel.len())));
    }
    let m = kernel.taps.first().map_or(u.nrows(), |t| t.nrows());
    if kernel.taps.first().is_some_and(|t| t.ncols() != u.nrows()) {
        return Err(SsmError::Shape(format!("kernel expects {} channels, input has {}", kernel.taps[0].ncols(), u.nrows())));
    }
    let mut y = DMatrix::zeros(m, len);
    for k in 0..len {
        let mut acc = DVector::zeros(m);
        for i in 0..=k {
            acc += &kernel.taps[i] * u.column(k - i);
        }
        if kernel.residual {
            acc += u.column(k);
        }
        y.set_column(k, &acc);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel_is_geometric() {
        let m = DiscreteSsm::scalar(0.5, 1.0, 1.0);
        let k = ssm_kernel(&m, 4);
        let vals: Vec<f64> = k.taps.iter().map(|t| t[(0, 0)]).collect();
        assert_eq!(vals, vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn impulse_response_matches_kernel() {
        let m = DiscreteSsm::scalar(0.5, 1.0, 1.0);
        let mut u = DMatrix::zeros(1, 4);
        u[(0, 0)] = 1.0;
        let out = ssm_scan(&m, &u, None).unwrap();
        assert_eq!(out.y.as_slice(), &[1.0, 0.5, 0.25, 0.125]);
        assert!(out.divergence.is_none());
    }

    #[test]
    fn scan_and_conv_agree_with_residual() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.7]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 1.0]);
        let m = DiscreteSsm::from_matrices(a, b, c).unwrap().with_residual(true);
        let u = DMatrix::from_fn(2, 30, |i, k| ((k + 3 * i) as f64 * 0.37).sin());
        let s = ssm_scan(&m, &u, None).unwrap().y;
        let c = ssm_conv(&ssm_kernel(&m, 30), &u).unwrap();
        assert!((s - c).amax() < 1e-12);
    }

    #[test]
    fn overflow_is_reported_with_step() {
        let m = DiscreteSsm::scalar(1e200, 1.0, 1.0);
        let u = DMatrix::from_element(1, 5, 1.0);
        let out = ssm_scan(&m, &u, None).unwrap();
        assert_eq!(out.divergence.unwrap().step, 2);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let m = DiscreteSsm::scalar(0.5, 1.0, 1.0);
        assert!(ssm_scan(&m, &DMatrix::zeros(2, 3), None).is_err());
        assert!(ssm_conv(&ssm_kernel(&m, 2), &DMatrix::zeros(1, 3)).is_err());
    }
}
