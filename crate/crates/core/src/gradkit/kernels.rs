//! Raw numeric kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` for row-major slices addressed through explicit strides,
/// so transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the strides
    // (checked above for the contiguous layouts every caller uses).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Row-major strides of an `r × c` matrix and of its transpose view.
pub(crate) fn rm(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

pub(crate) fn rm_t(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Clone, Debug)]
pub(crate) struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    /// Returns `None` when a pivot underflows, i.e. the matrix is numerically singular.
    pub(crate) fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for col in 0..n {
            let (p, pmax) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= scale * 1e-300 || !pmax.is_finite() {
                return None;
            }
            if p != col {
                for j in 0..n {
                    lu.swap(col * n + j, p * n + j);
                }
                piv.swap(col, p);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Some(Self { n, lu, piv })
    }

    /// Solves `A·X = B` in place; `b` is row-major `n × k`.
    pub(crate) fn solve(&self, b: &mut [f64], k: usize) {
        let n = self.n;
        let mut permuted = vec![0.0; n * k];
        for (i, &p) in self.piv.iter().enumerate() {
            permuted[i * k..(i + 1) * k].copy_from_slice(&b[p * k..(p + 1) * k]);
        }
        // forward substitution with unit lower factor
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l != 0.0 {
                    for c in 0..k {
                        permuted[i * k + c] -= l * permuted[j * k + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u != 0.0 {
                    for c in 0..k {
                        permuted[i * k + c] -= u * permuted[j * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                permuted[i * k + c] /= d;
            }
        }
        b.copy_from_slice(&permuted);
    }

    /// Solves `Aᵀ·X = B` in place; `b` is row-major `n × k`.
    pub(crate) fn solve_transposed(&self, b: &mut [f64], k: usize) {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ Pᵀ... with P·A = L·U we have Aᵀ = Uᵀ·Lᵀ·P.
        let mut w = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                let u = self.lu[j * n + i];
                if u != 0.0 {
                    for c in 0..k {
                        w[i * k + c] -= u * w[j * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                w[i * k + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let l = self.lu[j * n + i];
                if l != 0.0 {
                    for c in 0..k {
                        w[i * k + c] -= l * w[j * k + c];
                    }
                }
            }
        }
        for (i, &p) in self.piv.iter().enumerate() {
            b[p * k..(p + 1) * k].copy_from_slice(&w[i * k..(i + 1) * k]);
        }
    }
}

/// Geometry of a causal 1-D convolution over a `[channels × len]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub taps: usize,
    pub depthwise: bool,
    pub replicate: bool,
}

impl ConvGeom {
    /// Input value at padded position `pos` (left pad of `taps - 1`).
    #[inline]
    fn padded(&self, x: &[f64], ch: usize, pos: usize) -> f64 {
        let pad = self.taps - 1;
        if pos >= pad {
            x[ch * self.len + pos - pad]
        } else if self.replicate {
            x[ch * self.len]
        } else {
            0.0
        }
    }

    /// Source index feeding padded position `pos`, if any.
    #[inline]
    fn source(&self, ch: usize, pos: usize) -> Option<usize> {
        let pad = self.taps - 1;
        if pos >= pad {
            Some(ch * self.len + pos - pad)
        } else if self.replicate {
            Some(ch * self.len)
        } else {
            None
        }
    }

    /// `[c_in·taps × len]` unfolded view; row `i·taps + j` holds tap `j` of channel `i`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let rows = self.c_in * self.taps;
        let mut cols = vec![0.0; rows * self.len];
        for i in 0..self.c_in {
            for j in 0..self.taps {
                let row = &mut cols[(i * self.taps + j) * self.len..(i * self.taps + j + 1) * self.len];
                for (k, v) in row.iter_mut().enumerate() {
                    *v = self.padded(x, i, k + j);
                }
            }
        }
        cols
    }

    /// out[c, k] = bias[c] + Σ_i Σ_j w[c, i, j] · xpad[i, k + j]
    pub(crate) fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let l = self.len;
        let mut out = vec![0.0; self.c_out * l];
        if let Some(b) = bias {
            for c in 0..self.c_out {
                out[c * l..(c + 1) * l].iter_mut().for_each(|v| *v = b[c]);
            }
        }
        if self.depthwise {
            for c in 0..self.c_out {
                let wc = &w[c * self.taps..(c + 1) * self.taps];
                let row = &mut out[c * l..(c + 1) * l];
                for (k, o) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, wj) in wc.iter().enumerate() {
                        acc += wj * self.padded(x, c, k + j);
                    }
                    *o += acc;
                }
            }
        } else {
            let cols = self.im2col(x);
            let kdim = self.c_in * self.taps;
            gemm(self.c_out, kdim, l, w, rm(kdim), &cols, rm(l), 1.0, &mut out, rm(l));
        }
        out
    }

    /// Returns (d_input, d_weight, d_bias).
    pub(crate) fn backward(&self, x: &[f64], w: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let l = self.len;
        let dbias: Vec<f64> = (0..self.c_out).map(|c| dout[c * l..(c + 1) * l].iter().sum()).collect();
        let mut dx = vec![0.0; self.c_in * l];
        if self.depthwise {
            let mut dw = vec![0.0; self.c_out * self.taps];
            for c in 0..self.c_out {
                let g = &dout[c * l..(c + 1) * l];
                for j in 0..self.taps {
                    let wj = w[c * self.taps + j];
                    let mut acc = 0.0;
                    for (k, gk) in g.iter().enumerate() {
                        if let Some(src) = self.source(c, k + j) {
                            acc += gk * x[src];
                            dx[src] += gk * wj;
                        }
                    }
                    dw[c * self.taps + j] = acc;
                }
            }
            (dx, dw, dbias)
        } else {
            let kdim = self.c_in * self.taps;
            let cols = self.im2col(x);
            let mut dw = vec![0.0; self.c_out * kdim];
            // dW = dout · colsᵀ
            gemm(self.c_out, l, kdim, dout, rm(l), &cols, rm_t(l), 0.0, &mut dw, rm(kdim));
            // dcols = Wᵀ · dout
            let mut dcols = vec![0.0; kdim * l];
            gemm(kdim, self.c_out, l, w, rm_t(kdim), dout, rm(l), 0.0, &mut dcols, rm(l));
            for i in 0..self.c_in {
                for j in 0..self.taps {
                    let row = &dcols[(i * self.taps + j) * l..(i * self.taps + j + 1) * l];
                    for (k, g) in row.iter().enumerate() {
                        if let Some(src) = self.source(i, k + j) {
                            dx[src] += g;
                        }
                    }
                }
            }
            (dx, dw, dbias)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, rm(2), &b, rm(2), 0.0, &mut c, rm(2));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, rm_t(2), &b, rm(2), 0.0, &mut c, rm(2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn lu_solves_both_orientations() {
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let lu = Lu::factor(&a, 3).unwrap();
        let x_true = [1.0, -2.0, 0.5];
        let mut b: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum()).collect();
        lu.solve(&mut b, 1);
        for (x, t) in b.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-12);
        }
        let mut bt: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[j * 3 + i] * x_true[j]).sum()).collect();
        lu.solve_transposed(&mut bt, 1);
        for (x, t) in bt.iter().zip(x_true) {
            assert!((x - t).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_rejects_singular() {
        assert!(Lu::factor(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }
}
