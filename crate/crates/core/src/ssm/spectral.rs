use nalgebra::DMatrix;
use serde::Serialize;

use super::ParamForm;

pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpectralRadius {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `value` is then the last estimate.
    pub converged: bool,
}

/// Largest eigenvalue modulus of a square matrix.
///
/// Diagonal matrices are read off exactly. Otherwise a two-vector block power
/// iteration is used so that dominant complex-conjugate pairs converge too.
pub fn spectral_radius(a: &DMatrix<f64>, form: ParamForm) -> SpectralRadius {
    let n = a.nrows();
    let is_diag = form == ParamForm::Diagonal || (0..n).all(|i| (0..n).all(|j| i == j || a[(i, j)] == 0.0));
    if is_diag {
        return SpectralRadius {
            value: a.diagonal().amax(),
            iterations: 0,
            converged: true,
        };
    }
    let width = n.min(2);
    let mut q = DMatrix::from_fn(n, width, |i, j| ((i + 1) as f64 * (j as f64 + 1.7) * 1.3).sin() + 0.1);
    q = q.qr().q();
    let mut est = f64::NAN;
    for it in 1..=POWER_MAX_ITERS {
        let z = a * &q;
        if z.amax() == 0.0 {
            return SpectralRadius {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        let h = q.transpose() * &z;
        let ritz = ritz_pair(&h);
        est = ritz.modulus;
        // converged once the dominant Ritz pair (or the 2-D subspace for a
        // complex pair) is an eigenpair to within the tolerance
        let residual = match &ritz.vector {
            Some(v) => (&z * v - &q * v * ritz.modulus_signed).norm(),
            None => (&z - &q * &h).norm(),
        };
        if residual <= POWER_TOLERANCE * est.max(1.0) {
            return SpectralRadius {
                value: est,
                iterations: it,
                converged: true,
            };
        }
        q = z.qr().q();
    }
    SpectralRadius {
        value: est,
        iterations: POWER_MAX_ITERS,
        converged: false,
    }
}

struct Ritz {
    modulus: f64,
    /// Dominant real Ritz value.
    modulus_signed: f64,
    /// Unit eigenvector of `h` for a real, simple dominant Ritz value.
    vector: Option<nalgebra::DVector<f64>>,
}

fn ritz_pair(h: &DMatrix<f64>) -> Ritz {
    if h.nrows() == 1 {
        return Ritz {
            modulus: h[(0, 0)].abs(),
            modulus_signed: h[(0, 0)],
            vector: Some(nalgebra::DVector::from_element(1, 1.0)),
        };
    }
    let (a, b, c, d) = (h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
    let half_tr = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_tr * half_tr - det;
    if disc < 0.0 {
        let m = det.sqrt();
        return Ritz {
            modulus: m,
            modulus_signed: m,
            vector: None,
        };
    }
    let r = disc.sqrt();
    let mu = if (half_tr + r).abs() >= (half_tr - r).abs() { half_tr + r } else { half_tr - r };
    let v1 = nalgebra::DVector::from_vec(vec![b, mu - a]);
    let v2 = nalgebra::DVector::from_vec(vec![mu - d, c]);
    let v = if v1.norm() >= v2.norm() { v1 } else { v2 };
    let nv = v.norm();
    Ritz {
        modulus: mu.abs(),
        modulus_signed: mu,
        vector: (nv > 0.0 && r > 0.0).then(|| v / nv),
    }
}
