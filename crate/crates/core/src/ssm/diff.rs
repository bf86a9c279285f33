//! Differentiable versions of discretization, scan and kernel evaluation,
//! recorded on a [`Tape`].
//!
//! Two layouts are supported:
//! * a single MIMO model: `A [n,n]` (or `[n]` diagonal), `B [n,m]`, `C [m,n]`, `Δt []`;
//! * a bank of `H` independent single-channel models: `A [H,n,n]` (or `[H,n]`),
//!   `B [H,n]`, `C [H,n]`, `Δt [H]`.
//!
//! Sequences are `[channels, L]`.

use crate::gradkit::{GradError, PadMode, Tape, Tensor, Var};

use super::ParamForm;

fn shape_err(detail: String) -> GradError {
    GradError::Shape { op: "ssm", detail }
}

/// Repeats a scalar or per-channel value into `shape`.
fn spread(tape: &mut Tape, v: Var, shape: &[usize]) -> Result<Var, GradError> {
    let src = tape.shape(v).iter().product::<usize>().max(1);
    let total: usize = shape.iter().product();
    let flat = tape.reshape(v, &[src])?;
    let rep = tape.broadcast_seq(flat, total / src);
    tape.reshape(rep, shape)
}

fn identity_batch(h: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; h * n * n];
    for b in 0..h {
        for i in 0..n {
            data[b * n * n + i * n + i] = 1.0;
        }
    }
    Tensor::new(&[h, n, n], data).expect("sized")
}

/// Bilinear discretization of a single model. Returns `(Ā, B̄)` in the
/// layout of the inputs.
pub fn discretize(tape: &mut Tape, form: ParamForm, a: Var, b: Var, dt: Var) -> Result<(Var, Var), GradError> {
    let sb = tape.shape(b).to_vec();
    let [n, m] = sb[..] else {
        return Err(shape_err(format!("B is {sb:?}")));
    };
    match form {
        ParamForm::Dense => {
            if tape.shape(a) != [n, n] {
                return Err(shape_err(format!("A is {:?}, expected [{n}, {n}]", tape.shape(a))));
            }
            let dt_a = spread(tape, dt, &[n, n])?;
            let dt_b = spread(tape, dt, &[n, m])?;
            dense_core(tape, a, b, dt_a, dt_b, Tensor::identity(n))
        }
        ParamForm::Diagonal => {
            if tape.shape(a) != [n] {
                return Err(shape_err(format!("diagonal A is {:?}, expected [{n}]", tape.shape(a))));
            }
            let dt_a = spread(tape, dt, &[n])?;
            let dt_b = spread(tape, dt, &[n, m])?;
            let (a_bar, den) = diag_core(tape, a, dt_a)?;
            let den_b = tape.broadcast_seq(den, m);
            let scaled = tape.mul(dt_b, b)?;
            let b_bar = tape.div(scaled, den_b)?;
            Ok((a_bar, b_bar))
        }
    }
}

/// Bilinear discretization of a bank of single-channel models.
pub fn discretize_bank(tape: &mut Tape, form: ParamForm, a: Var, b: Var, dt: Var) -> Result<(Var, Var), GradError> {
    let sb = tape.shape(b).to_vec();
    let [h, n] = sb[..] else {
        return Err(shape_err(format!("bank B is {sb:?}")));
    };
    if tape.shape(dt) != [h] {
        return Err(shape_err(format!("bank dt is {:?}, expected [{h}]", tape.shape(dt))));
    }
    let dt_n = tape.broadcast_seq(dt, n);
    match form {
        ParamForm::Dense => {
            if tape.shape(a) != [h, n, n] {
                return Err(shape_err(format!("bank A is {:?}", tape.shape(a))));
            }
            let dt_a = spread(tape, dt, &[h, n, n])?;
            dense_core(tape, a, b, dt_a, dt_n, identity_batch(h, n))
        }
        ParamForm::Diagonal => {
            if tape.shape(a) != [h, n] {
                return Err(shape_err(format!("diagonal bank A is {:?}", tape.shape(a))));
            }
            let (a_bar, den) = diag_core(tape, a, dt_n)?;
            let scaled = tape.mul(dt_n, b)?;
            let b_bar = tape.div(scaled, den)?;
            Ok((a_bar, b_bar))
        }
    }
}

fn dense_core(tape: &mut Tape, a: Var, b: Var, dt_a: Var, dt_b: Var, eye: Tensor) -> Result<(Var, Var), GradError> {
    let half = tape.scale(dt_a, 0.5);
    let ha = tape.mul(half, a)?;
    let eye = tape.constant(&eye);
    let lhs = tape.sub(eye, ha)?;
    let rhs = tape.add(eye, ha)?;
    let a_bar = tape.solve(lhs, rhs)?;
    let db = tape.mul(dt_b, b)?;
    let b_bar = tape.solve(lhs, db)?;
    Ok((a_bar, b_bar))
}

/// Returns `((1 + Δt/2·a)/(1 − Δt/2·a), 1 − Δt/2·a)`.
fn diag_core(tape: &mut Tape, a: Var, dt: Var) -> Result<(Var, Var), GradError> {
    let half = tape.scale(dt, 0.5);
    let ha = tape.mul(half, a)?;
    let num = tape.offset(ha, 1.0);
    let neg = tape.scale(ha, -1.0);
    let den = tape.offset(neg, 1.0);
    Ok((tape.div(num, den)?, den))
}

fn advance(tape: &mut Tape, form: ParamForm, a_bar: Var, w: Var) -> Result<Var, GradError> {
    match form {
        ParamForm::Dense => tape.matmul(a_bar, w),
        ParamForm::Diagonal => {
            let ws = tape.shape(w).to_vec();
            if ws.len() == tape.shape(a_bar).len() {
                tape.mul(a_bar, w)
            } else {
                // single model: Ā [n] against W [n, m]
                let rep = tape.broadcast_seq(a_bar, ws[1]);
                tape.mul(rep, w)
            }
        }
    }
}

/// Kernel taps of a single model, `K̄[i] = C̄ Āⁱ B̄`, each `[m, m]`.
pub fn kernel(tape: &mut Tape, form: ParamForm, a_bar: Var, b_bar: Var, c: Var, len: usize) -> Result<Vec<Var>, GradError> {
    let mut w = b_bar;
    let mut taps = Vec::with_capacity(len);
    for i in 0..len {
        taps.push(tape.matmul(c, w)?);
        if i + 1 < len {
            w = advance(tape, form, a_bar, w)?;
        }
    }
    Ok(taps)
}

/// Kernel of a bank as an `[H, L]` record.
pub fn kernel_bank(tape: &mut Tape, form: ParamForm, a_bar: Var, b_bar: Var, c: Var, len: usize) -> Result<Var, GradError> {
    let h = tape.shape(b_bar)[0];
    let mut w = b_bar;
    let mut cols = Vec::with_capacity(len);
    for i in 0..len {
        let cw = tape.mul(c, w)?;
        let k = tape.sum_axis(cw, 1)?;
        cols.push(tape.reshape(k, &[h, 1])?);
        if i + 1 < len {
            w = advance(tape, form, a_bar, w)?;
        }
    }
    tape.concat(&cols, 1)
}

/// Causal long convolution of `u [m, L]` with single-model taps.
pub fn conv(tape: &mut Tape, taps: &[Var], u: Var, residual: bool) -> Result<Var, GradError> {
    let su = tape.shape(u).to_vec();
    let [m, len] = su[..] else {
        return Err(shape_err(format!("input is {su:?}")));
    };
    if taps.len() < len {
        return Err(shape_err(format!("{} taps for length {len}", taps.len())));
    }
    let mut rev = Vec::with_capacity(len);
    for t in taps[..len].iter().rev() {
        rev.push(tape.reshape(*t, &[m, m, 1])?);
    }
    let w = tape.concat(&rev, 2)?;
    let y = tape.conv1d_causal(u, w, None, false, PadMode::Zero)?;
    if residual {
        tape.add(y, u)
    } else {
        Ok(y)
    }
}

/// Channel-wise causal convolution of `u [H, L]` with a bank kernel `[H, L]`.
pub fn conv_bank(tape: &mut Tape, kernel: Var, u: Var) -> Result<Var, GradError> {
    let sk = tape.shape(kernel).to_vec();
    let [h, len] = sk[..] else {
        return Err(shape_err(format!("bank kernel is {sk:?}")));
    };
    if tape.shape(u) != [h, len] {
        return Err(shape_err(format!("input {:?} vs kernel {sk:?}", tape.shape(u))));
    }
    let mut rev = Vec::with_capacity(len);
    for i in (0..len).rev() {
        rev.push(tape.slice(kernel, 1, i, 1)?);
    }
    let flipped = tape.concat(&rev, 1)?;
    let w = tape.reshape(flipped, &[h, 1, len])?;
    tape.conv1d_causal(u, w, None, true, PadMode::Zero)
}

/// Recurrent evaluation of a single model over `u [m, L]` from a zero state.
pub fn scan(tape: &mut Tape, form: ParamForm, a_bar: Var, b_bar: Var, c: Var, u: Var, residual: bool) -> Result<Var, GradError> {
    let su = tape.shape(u).to_vec();
    let [m, len] = su[..] else {
        return Err(shape_err(format!("input is {su:?}")));
    };
    let n = tape.shape(b_bar)[0];
    let mut x = tape.constant(&Tensor::zeros(&[n]));
    let mut cols = Vec::with_capacity(len);
    for k in 0..len {
        let uk = tape.slice(u, 1, k, 1)?;
        let uk = tape.reshape(uk, &[m])?;
        let ax = match form {
            ParamForm::Dense => tape.matvec(a_bar, x)?,
            ParamForm::Diagonal => tape.mul(a_bar, x)?,
        };
        let bu = tape.matvec(b_bar, uk)?;
        x = tape.add(ax, bu)?;
        let mut yk = tape.matvec(c, x)?;
        if residual {
            yk = tape.add(yk, uk)?;
        }
        cols.push(tape.reshape(yk, &[m, 1])?);
    }
    tape.concat(&cols, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkit::check::{check_gradients, FD_STEP};
    use crate::gradkit::ParamSet;
    use crate::ssm::{discretize_bilinear, ssm_conv, ssm_kernel, ssm_scan, ContinuousSsm};
    use nalgebra::DMatrix;

    fn example() -> (ParamSet, [crate::gradkit::ParamId; 4], DMatrix<f64>) {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::matrix(&[&[-0.5, 0.3], &[-0.2, -0.8]]));
        let b = ps.add("b", Tensor::matrix(&[&[1.0], &[0.4]]));
        let c = ps.add("c", Tensor::matrix(&[&[0.7, -0.3]]));
        let dt = ps.add("dt", Tensor::scalar(0.3));
        let u = DMatrix::from_fn(1, 12, |_, k| (k as f64 * 0.5).sin());
        (ps, [a, b, c, dt], u)
    }

    #[test]
    fn tape_paths_match_numeric() {
        let (ps, [a, b, c, dt], u) = example();
        let mut tape = Tape::new();
        let (av, bv, cv, dv) = (tape.param(&ps, a), tape.param(&ps, b), tape.param(&ps, c), tape.param(&ps, dt));
        let (ab, bb) = discretize(&mut tape, ParamForm::Dense, av, bv, dv).unwrap();
        let uv = tape.constant_from(&[1, 12], u.as_slice().to_vec()).unwrap();
        let ys = scan(&mut tape, ParamForm::Dense, ab, bb, cv, uv, true).unwrap();
        let taps = kernel(&mut tape, ParamForm::Dense, ab, bb, cv, 12).unwrap();
        let yc = conv(&mut tape, &taps, uv, true).unwrap();

        let model = ContinuousSsm::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, -0.2, -0.8]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.4]),
            DMatrix::from_row_slice(1, 2, &[0.7, -0.3]),
            0.3,
        )
        .unwrap()
        .with_residual(true);
        let d = discretize_bilinear(&model).unwrap();
        let reference = ssm_scan(&d, &u, None).unwrap().y;
        let via_conv = ssm_conv(&ssm_kernel(&d, 12), &u).unwrap();
        for k in 0..12 {
            assert!((tape.value(ys)[k] - reference[(0, k)]).abs() < 1e-12);
            assert!((tape.value(yc)[k] - via_conv[(0, k)]).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let (mut ps, [a, b, c, dt], u) = example();
        let target: Vec<f64> = u.iter().map(|v| 0.5 * v).collect();
        let (err, name) = check_gradients(&mut ps, FD_STEP, |tape, ps| {
            let (av, bv, cv, dv) = (tape.param(ps, a), tape.param(ps, b), tape.param(ps, c), tape.param(ps, dt));
            let (ab, bb) = discretize(tape, ParamForm::Dense, av, bv, dv)?;
            let uv = tape.constant_from(&[1, 12], u.as_slice().to_vec())?;
            let y = scan(tape, ParamForm::Dense, ab, bb, cv, uv, false)?;
            let t = tape.constant_from(&[1, 12], target.clone())?;
            tape.mse(y, t)
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }

    #[test]
    fn bank_conv_matches_per_channel_scan() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 2], vec![-0.5, -1.5, -0.1, -3.0]).unwrap();
        let b = tape.constant_from(&[2, 2], vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let c = tape.constant_from(&[2, 2], vec![0.3, 0.9, 1.0, -0.4]).unwrap();
        let dt = tape.constant_from(&[2], vec![0.1, 0.4]).unwrap();
        let (ab, bb) = discretize_bank(&mut tape, ParamForm::Diagonal, a, b, dt).unwrap();
        let k = kernel_bank(&mut tape, ParamForm::Diagonal, ab, bb, c, 9).unwrap();
        let u: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let uv = tape.constant_from(&[2, 9], u.clone()).unwrap();
        let y = conv_bank(&mut tape, k, uv).unwrap();
        let params = [([-0.5, -1.5], [1.0, 0.5], [0.3, 0.9], 0.1), ([-0.1, -3.0], [-1.0, 2.0], [1.0, -0.4], 0.4)];
        for (h, (ad, bd, cd, step)) in params.iter().enumerate() {
            let m = ContinuousSsm::diagonal(ad, DMatrix::from_column_slice(2, 1, bd), DMatrix::from_row_slice(1, 2, cd), *step).unwrap();
            let d = discretize_bilinear(&m).unwrap();
            let uh = DMatrix::from_row_slice(1, 9, &u[h * 9..(h + 1) * 9]);
            let r = ssm_scan(&d, &uh, None).unwrap().y;
            for t in 0..9 {
                assert!((tape.value(y)[h * 9 + t] - r[(0, t)]).abs() < 1e-12);
            }
        }
    }
}
