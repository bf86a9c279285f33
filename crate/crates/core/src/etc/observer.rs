use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{EtcError, SimGrid};
use crate::ssm::operator_norm;

/// Linear system `ẋ = A x + B u` with a quadratic error energy `eᵀPe`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl ObserverSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self, EtcError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || p.shape() != (n, n) {
            return Err(EtcError::Plant(format!(
                "A {:?}, B {:?}, P {:?} are inconsistent",
                a.shape(),
                b.shape(),
                p.shape()
            )));
        }
        if (&p - p.transpose()).amax() > 1e-12 || p.clone().cholesky().is_none() {
            return Err(EtcError::Plant("P must be symmetric positive definite".into()));
        }
        Ok(Self { a, b, p })
    }

    /// Damped rotation with `P = I`; `‖A‖ < 1`, so the bound's premise holds.
    pub fn reference() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, -0.3, -0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
        )
        .expect("reference system is valid")
    }

    /// The bound drops the `‖PA‖` and `‖P‖` factors, so it is only implied
    /// when both norms are at most one.
    pub fn premise_holds(&self) -> bool {
        operator_norm(&(&self.p * &self.a)) <= 1.0 + 1e-12 && operator_norm(&self.p) <= 1.0 + 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObserverRun {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
    /// `eᵀPe`
    pub l_e: Vec<f64>,
    /// `d(eᵀPe)/dt = 2eᵀPė`
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub min_slack: f64,
    pub rhs_mean: f64,
    pub premise_holds: bool,
}

/// Uniform noise schedule in `(−amplitude, amplitude)`, one `m`-vector per grid point.
pub fn observer_noise(points: usize, m: usize, amplitude: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..points)
        .map(|_| DVector::from_fn(m, |_, _| if amplitude > 0.0 { rng.gen_range(-amplitude..amplitude) } else { 0.0 }))
        .collect()
}

/// Co-integrates the true state
/// `ẋ = A(x + ∫₀ᵗ k(t−l) h(l) ε(l) dl) + B h u` and the observer
/// `ż = A z + B h (u + ε)` with forward Euler on `grid`, where
/// `k(s) = exp(A s) B` and the memory integral uses the trapezoid rule.
///
/// At every grid point it compares `2eᵀPė` with
/// `eᵀ(PA + AᵀP)e + 2‖h‖∞‖e‖(∫‖k(t−l)‖‖ε(l)‖dl + ‖B‖‖ε(t)‖)`.
#[allow(clippy::too_many_arguments)]
pub fn observer_bound_check(
    sys: &ObserverSystem,
    h: &[f64],
    u: &[DVector<f64>],
    eps: &[DVector<f64>],
    grid: &SimGrid,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<ObserverRun, EtcError> {
    let steps = grid.steps()?;
    let points = steps + 1;
    let (n, m) = sys.b.shape();
    if h.len() != points || u.len() != points || eps.len() != points {
        return Err(EtcError::Contract(format!(
            "h, u and eps need {points} grid points, got {}, {}, {}",
            h.len(),
            u.len(),
            eps.len()
        )));
    }
    if u.iter().chain(eps).any(|v| v.len() != m) || x0.len() != n || z0.len() != n {
        return Err(EtcError::Contract("signal dimensions do not match the system".into()));
    }
    let h_inf = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if h_inf > 1.0 + 1e-12 {
        return Err(EtcError::Contract(format!("‖h‖∞ = {h_inf} exceeds 1")));
    }
    let dt = grid.dt;
    let step = (&sys.a * dt).exp();
    let mut kernel = Vec::with_capacity(points);
    let mut k = sys.b.clone();
    for _ in 0..points {
        kernel.push(k.clone());
        k = &step * k;
    }
    let k_norm: Vec<f64> = kernel.iter().map(operator_norm).collect();
    let eps_norm: Vec<f64> = eps.iter().map(|v| v.norm()).collect();
    let b_norm = operator_norm(&sys.b);
    let sym = &sys.p * &sys.a + sys.a.transpose() * &sys.p;

    let mut x = x0.clone();
    let mut z = z0.clone();
    let mut run = ObserverRun {
        times: Vec::with_capacity(points),
        x: Vec::with_capacity(points),
        z: Vec::with_capacity(points),
        e: Vec::with_capacity(points),
        h: h.to_vec(),
        eps: eps.iter().map(|v| v.as_slice().to_vec()).collect(),
        l_e: Vec::with_capacity(points),
        lhs: Vec::with_capacity(points),
        rhs: Vec::with_capacity(points),
        min_slack: f64::INFINITY,
        rhs_mean: 0.0,
        premise_holds: sys.premise_holds(),
    };
    for i in 0..points {
        // trapezoid over l ∈ [0, t_i]
        let mut memory = DVector::zeros(n);
        let mut memory_norm = 0.0;
        if i > 0 {
            for j in 0..=i {
                let w = if j == 0 || j == i { 0.5 * dt } else { dt };
                memory += &kernel[i - j] * &eps[j] * (w * h[j]);
                memory_norm += w * k_norm[i - j] * eps_norm[j];
            }
        }
        let e = &x - &z;
        let e_dot = &sys.a * &e + &sys.a * &memory - &sys.b * &eps[i] * h[i];
        let lhs = 2.0 * (e.transpose() * &sys.p * &e_dot)[(0, 0)];
        let rhs = (e.transpose() * &sym * &e)[(0, 0)] + 2.0 * h_inf * e.norm() * (memory_norm + b_norm * eps_norm[i]);
        run.times.push(grid.time(i));
        run.x.push(x.as_slice().to_vec());
        run.z.push(z.as_slice().to_vec());
        run.l_e.push((e.transpose() * &sys.p * &e)[(0, 0)]);
        run.e.push(e.as_slice().to_vec());
        run.lhs.push(lhs);
        run.rhs.push(rhs);
        run.min_slack = run.min_slack.min(rhs - lhs);
        if i < steps {
            let x_dot = &sys.a * (&x + &memory) + &sys.b * &u[i] * h[i];
            let z_dot = &sys.a * &z + &sys.b * (&u[i] + &eps[i]) * h[i];
            x += x_dot * dt;
            z += z_dot * dt;
        }
    }
    run.rhs_mean = run.rhs.iter().sum::<f64>() / points as f64;
    Ok(run)
}
