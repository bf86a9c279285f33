//! Event-triggered state feedback: Lyapunov certification, trigger rule,
//! closed-loop simulation, sampling-perturbation replay and the observer
//! error bound.

mod export;
mod observer;
mod sim;

pub use export::{trajectory_csv, triggers_json};
pub use observer::{observer_bound_check, observer_noise, ObserverRun, ObserverSystem};
pub use sim::{
    fit_decay_rate, perturb_samples, simulate_etc, simulate_open_loop, trigger_check, DecayFit, EtcTrajectory, HeldSchedule,
    Integrator, OpenLoopRun, SimGrid, Trigger,
};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EtcError {
    #[error("invalid plant: {0}")]
    Plant(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("Lyapunov identity not certified: residual max-abs {residual:.3e} (set the override to simulate anyway)")]
    NotCertified { residual: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Linear plant `ẋ = A x + B u` under sampled feedback `u = T x(t_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EtcPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `m × n` feedback gain.
    pub t: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub kappa: f64,
}

/// Certification threshold on the Lyapunov residual.
pub const CERTIFY_TOLERANCE: f64 = 1e-9;

fn m2(v: [f64; 4]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &v)
}

impl EtcPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, t: DMatrix<f64>, p: DMatrix<f64>, m: DMatrix<f64>, kappa: f64) -> Result<Self, EtcError> {
        let plant = Self { a, b, t, p, m, kappa };
        plant.validate()?;
        Ok(plant)
    }

    /// Second-order example with `A = [[0, 1], [−2, 3]]`, for which the
    /// Lyapunov identity holds exactly with the listed `P` and `M`.
    pub fn corrected() -> Self {
        Self::with_a(m2([0.0, 1.0, -2.0, 3.0]))
    }

    /// Same example with `A = [[0, 1], [2, −3]]` as printed in the source;
    /// it does not satisfy the identity and its closed loop is a saddle.
    pub fn printed() -> Self {
        Self::with_a(m2([0.0, 1.0, 2.0, -3.0]))
    }

    fn with_a(a: DMatrix<f64>) -> Self {
        Self::new(
            a,
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, -4.0]),
            m2([1.0, 0.25, 0.25, 1.0]),
            m2([0.5, 0.25, 0.25, 1.5]),
            0.05,
        )
        .expect("reference plant is valid")
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self, EtcError> {
        self.kappa = kappa;
        self.validate()?;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.t
    }

    pub fn validate(&self) -> Result<(), EtcError> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let shapes = [
            ("A", self.a.shape(), (n, n)),
            ("B", self.b.shape(), (n, m)),
            ("T", self.t.shape(), (m, n)),
            ("P", self.p.shape(), (n, n)),
            ("M", self.m.shape(), (n, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(EtcError::Plant(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        for (name, mat) in [("P", &self.p), ("M", &self.m)] {
            if (mat - mat.transpose()).amax() > 1e-12 {
                return Err(EtcError::Plant(format!("{name} is not symmetric")));
            }
            if mat.clone().cholesky().is_none() {
                return Err(EtcError::Plant(format!("{name} is not positive definite")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(EtcError::Plant(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovCheck {
    /// `(A+BT)ᵀP + P(A+BT) + M`, row-major.
    pub residual: Vec<f64>,
    pub max_abs: f64,
    /// Largest real part among eigenvalues of `A + BT`.
    pub spectral_abscissa: f64,
}

pub fn verify_lyapunov_equation(plant: &EtcPlant) -> LyapunovCheck {
    let cl = plant.closed_loop();
    let r = cl.transpose() * &plant.p + &plant.p * &cl + &plant.m;
    let abscissa = cl.complex_eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    LyapunovCheck {
        residual: r.transpose().as_slice().to_vec(),
        max_abs: r.amax(),
        spectral_abscissa: abscissa,
    }
}

/// `xᵀ P x`.
pub fn lyapunov_value(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrected_plant_is_certified() {
        let c = verify_lyapunov_equation(&EtcPlant::corrected());
        assert!(c.max_abs < 1e-12, "{}", c.max_abs);
        assert!(c.spectral_abscissa < 0.0);
        assert_eq!(EtcPlant::corrected().closed_loop(), m2([0.0, 1.0, -1.0, -1.0]));
    }

    #[test]
    fn printed_plant_fails_certification() {
        let plant = EtcPlant::printed();
        let c = verify_lyapunov_equation(&plant);
        // (A+BT)ᵀP + P(A+BT) + M with A+BT = [[0,1],[3,−7]]
        let cl = m2([0.0, 1.0, 3.0, -7.0]);
        let expect = cl.transpose() * &plant.p + &plant.p * &cl + &plant.m;
        assert!((c.max_abs - expect.amax()).abs() < 1e-12);
        assert!(c.max_abs > 1.0);
        assert!(plant.closed_loop().determinant() < 0.0);
    }

    #[test]
    fn scalar_identity_case() {
        let plant = EtcPlant::new(
            DMatrix::from_element(1, 1, -2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            0.5,
        )
        .unwrap();
        assert_eq!(verify_lyapunov_equation(&plant).max_abs, 0.0);
    }

    #[test]
    fn lyapunov_values() {
        let p = EtcPlant::corrected().p;
        assert_eq!(lyapunov_value(&p, &DVector::from_vec(vec![1.0, 1.0])), 2.5);
        assert_eq!(lyapunov_value(&DMatrix::identity(2, 2), &DVector::from_vec(vec![3.0, 4.0])), 25.0);
        assert_eq!(lyapunov_value(&p, &DVector::zeros(2)), 0.0);
    }

    #[test]
    fn invalid_plants_rejected() {
        let bad_p = m2([1.0, 0.3, 0.2, 1.0]);
        let c = EtcPlant::corrected();
        assert!(EtcPlant::new(c.a.clone(), c.b.clone(), c.t.clone(), bad_p, c.m.clone(), 0.05).is_err());
        assert!(EtcPlant::corrected().with_kappa(1.0).is_err());
    }
}
