//! Linear state-space models: bilinear discretization, recurrent and
//! convolutional execution, and spectral diagnostics.

pub mod checkpoint;
pub mod diff;
mod exec;
mod spectral;

pub use exec::{ssm_conv, ssm_kernel, ssm_scan, Divergence, Kernel, ScanOutput, StateTrace};
pub use spectral::{spectral_radius, SpectralRadius};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(
        "bilinear discretization is ill-conditioned at dt = {dt}: cond(I - dt/2 A) = {condition:.3e}, \
         eigenvalue of A nearest 2/dt has magnitude {eigen_estimate:.6}"
    )]
    Discretization { dt: f64, condition: f64, eigen_estimate: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Storage layout of the state matrix `A`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamForm {
    #[default]
    Dense,
    Diagonal,
}

/// Continuous-time model `ẋ = A x + B u`, `y = C x (+ u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    /// `n × n`; for [`ParamForm::Diagonal`] only the diagonal is meaningful.
    pub a: DMatrix<f64>,
    /// `n × m`
    pub b: DMatrix<f64>,
    /// `m × n`
    pub c: DMatrix<f64>,
    pub dt: f64,
    pub form: ParamForm,
    /// Identity feed-through `D = I`.
    pub residual: bool,
}

/// Condition-number ceiling for `I − Δt/2·A`.
pub const MAX_CONDITION: f64 = 1e12;

impl ContinuousSsm {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self, SsmError> {
        let model = Self {
            a,
            b,
            c,
            dt,
            form: ParamForm::Dense,
            residual: false,
        };
        model.validate()?;
        Ok(model)
    }

    /// Diagonal model from the diagonal of `A`.
    pub fn diagonal(a_diag: &[f64], b: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self, SsmError> {
        let model = Self {
            a: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(a_diag)),
            b,
            c,
            dt,
            form: ParamForm::Diagonal,
            residual: false,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn io_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        let n = self.a.nrows();
        if self.a.ncols() != n || n == 0 {
            return Err(SsmError::Shape(format!("A is {}x{}", self.a.nrows(), self.a.ncols())));
        }
        let m = self.b.ncols();
        if self.b.nrows() != n || self.c.shape() != (m, n) || m == 0 {
            return Err(SsmError::Shape(format!(
                "B is {:?}, C is {:?} for n = {n}",
                self.b.shape(),
                self.c.shape()
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SsmError::Invalid(format!("dt must be positive and finite, got {}", self.dt)));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.a) && finite(&self.b) && finite(&self.c)) {
            return Err(SsmError::Invalid("non-finite parameter".into()));
        }
        if self.form == ParamForm::Diagonal {
            let off_diag = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).any(|(i, j)| i != j && self.a[(i, j)] != 0.0);
            if off_diag {
                return Err(SsmError::Invalid("diagonal form with off-diagonal entries".into()));
            }
        }
        Ok(())
    }
}

/// Discrete-time model `x_k = Ā x_{k−1} + B̄ u_k`, `y_k = C̄ x_k (+ u_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub form: ParamForm,
    pub residual: bool,
    /// Step of the continuous model this was derived from, if any.
    pub source_dt: Option<f64>,
}

impl DiscreteSsm {
    /// Builds a discrete model directly from its matrices.
    pub fn from_matrices(a_bar: DMatrix<f64>, b_bar: DMatrix<f64>, c_bar: DMatrix<f64>) -> Result<Self, SsmError> {
        let n = a_bar.nrows();
        let m = b_bar.ncols();
        if a_bar.ncols() != n || b_bar.nrows() != n || c_bar.shape() != (m, n) {
            return Err(SsmError::Shape(format!(
                "A {:?}, B {:?}, C {:?}",
                a_bar.shape(),
                b_bar.shape(),
                c_bar.shape()
            )));
        }
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || a_bar[(i, j)] == 0.0));
        Ok(Self {
            a_bar,
            b_bar,
            c_bar,
            form: if is_diag && n > 1 { ParamForm::Diagonal } else { ParamForm::Dense },
            residual: false,
            source_dt: None,
        })
    }

    /// Scalar single-input single-output model.
    pub fn scalar(a: f64, b: f64, c: f64) -> Self {
        Self::from_matrices(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
        )
        .expect("1x1 shapes")
    }

    pub fn with_residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn io_dim(&self) -> usize {
        self.b_bar.ncols()
    }
}

/// Bilinear (Tustin) discretization:
/// `Ā = (I − Δt/2·A)⁻¹(I + Δt/2·A)`, `B̄ = (I − Δt/2·A)⁻¹·Δt·B`, `C̄ = C`.
pub fn discretize_bilinear(model: &ContinuousSsm) -> Result<DiscreteSsm, SsmError> {
    model.validate()?;
    let n = model.state_dim();
    let half = model.dt / 2.0;
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = &eye - &model.a * half;
    let rhs = &eye + &model.a * half;
    let condition = condition_number(&lhs);
    if !(condition < MAX_CONDITION) {
        // eigenvalue of A closest to the pole 2/dt, reported for diagnosis
        let eig = model
            .a
            .complex_eigenvalues()
            .iter()
            .map(|l| (l.re, l.im))
            .min_by(|x, y| {
                let dx = (x.0 - 1.0 / half).hypot(x.1);
                let dy = (y.0 - 1.0 / half).hypot(y.1);
                dx.total_cmp(&dy)
            })
            .map(|(re, im)| re.hypot(im))
            .unwrap_or(f64::NAN);
        return Err(SsmError::Discretization {
            dt: model.dt,
            condition,
            eigen_estimate: eig,
        });
    }
    let lu = lhs.lu();
    let a_bar = lu.solve(&rhs).ok_or_else(|| SsmError::Discretization {
        dt: model.dt,
        condition: f64::INFINITY,
        eigen_estimate: 1.0 / half,
    })?;
    let b_bar = lu.solve(&(&model.b * model.dt)).expect("factorization already succeeded");
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c_bar: model.c.clone(),
        form: model.form,
        residual: model.residual,
        source_dt: Some(model.dt),
    })
}

/// 2-norm condition number from singular values.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().fold(0.0_f64, |a, b| a.max(*b));
    let min = sv.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest singular value.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(0.0_f64, |a, b| a.max(*b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn zero_dynamics_gives_identity_transition() {
        let m = ContinuousSsm::new(DMatrix::zeros(2, 2), mat(2, 1, &[1.0, -2.0]), mat(1, 2, &[1.0, 1.0]), 0.1).unwrap();
        let d = discretize_bilinear(&m).unwrap();
        assert_eq!(d.a_bar, DMatrix::identity(2, 2));
        assert!((d.b_bar[(0, 0)] - 0.1).abs() < 1e-15);
        assert!((d.b_bar[(1, 0)] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn vanishing_step_limit() {
        let a = mat(2, 2, &[-1.0, 0.5, 0.3, -2.0]);
        let m = ContinuousSsm::new(a, mat(2, 1, &[1.0, 1.0]), mat(1, 2, &[1.0, 0.0]), 1e-8).unwrap();
        let d = discretize_bilinear(&m).unwrap();
        assert!((d.a_bar.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-6);
        assert!(d.b_bar.abs().max() < 1e-6);
    }

    #[test]
    fn scalar_hand_values() {
        // A = −1, B = 1, Δt = 1: Ā = (1 − 0.5)/(1 + 0.5) = 1/3, B̄ = 1/1.5 = 2/3
        let m = ContinuousSsm::new(mat(1, 1, &[-1.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), 1.0).unwrap();
        let d = discretize_bilinear(&m).unwrap();
        assert!((d.a_bar[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.b_bar[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_step_is_reported() {
        // A = 2 with Δt = 1 makes I − Δt/2·A exactly zero
        let m = ContinuousSsm::new(mat(1, 1, &[2.0]), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), 1.0).unwrap();
        match discretize_bilinear(&m) {
            Err(SsmError::Discretization { dt, eigen_estimate, .. }) => {
                assert_eq!(dt, 1.0);
                assert!((eigen_estimate - 2.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_shapes_and_steps() {
        assert!(ContinuousSsm::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2), 0.1).is_err());
        assert!(ContinuousSsm::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(1, 2), 0.0).is_err());
    }
}
