//! Operation tape and reverse-mode replay.
//!
//! Each primitive call evaluates its forward value eagerly and appends one
//! record to the tape. Records only reference earlier records, so the tape
//! is always in topological order and `backward` is a single reverse sweep.

use super::kernels::{gemm, rm, rm_t, ConvGeom, Lu};
use super::{GradError, ParamId, ParamSet, Tensor};

/// Reference to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero or replicate-first left padding for causal convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    #[default]
    Zero,
    ReplicateFirst,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { slot: Option<ParamId> },
    MatMul { a: Var, b: Var, batch: usize, p: usize, q: usize, r: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    SumAxis { src: Var, outer: usize, axis_len: usize, inner: usize },
    Mse(Var, Var),
    Slice { src: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Reshape(Var),
    BroadcastSeq { src: Var, len: usize },
    Conv1d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Solve { m: Var, rhs: Var, lus: Vec<Lu>, n: usize, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mse(..) => "mse",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::BroadcastSeq { .. } => "broadcast_seq",
            Op::Conv1d { .. } => "conv1d_causal",
            Op::Solve { .. } => "solve",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    max_conv_taps: usize,
    corrupt: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-record gradients produced by [`Tape::gradients`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when `var` does not depend on any parameter.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Default ceiling on convolution kernel length.
pub const DEFAULT_MAX_CONV_TAPS: usize = 1024;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn shape_err(op: &'static str, detail: String) -> GradError {
    GradError::Shape { op, detail }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            max_conv_taps: DEFAULT_MAX_CONV_TAPS,
            corrupt: None,
        }
    }

    pub fn with_max_conv_taps(mut self, taps: usize) -> Self {
        self.max_conv_taps = taps;
        self
    }

    /// Fault-injection hook: scrambles the backward rule of the named primitive.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &str) {
        self.corrupt = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf { slot: None }, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, GradError> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Leaf { slot: None }, shape, t.into_data(), false))
    }

    /// Records a snapshot of a parameter; its gradient flows back to `params[id]`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(
            Op::Leaf { slot: Some(id) },
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Matrix product. Accepts `[p,q]·[q,r]`, `[p,q]·[q]` (matrix–vector),
    /// and the batched forms `[B,p,q]·[B,q,r]` and `[B,p,q]·[B,q]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, p, q, q2, r, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([p, q], [q2, r]) => (1, *p, *q, *q2, *r, vec![*p, *r]),
            ([p, q], [q2]) => (1, *p, *q, *q2, 1, vec![*p]),
            ([b1, p, q], [b2, q2, r]) if b1 == b2 => (*b1, *p, *q, *q2, *r, vec![*b1, *p, *r]),
            ([b1, p, q], [b2, q2]) if b1 == b2 => (*b1, *p, *q, *q2, 1, vec![*b1, *p]),
            _ => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        };
        if q != q2 {
            return Err(shape_err("matmul", format!("inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * p * r];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                gemm(
                    p,
                    q,
                    r,
                    &av[i * p * q..],
                    rm(q),
                    &bv[i * q * r..],
                    rm(r),
                    0.0,
                    &mut out[i * p * r..],
                    rm(r),
                );
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, batch, p, q, r }, out_shape, out, ng))
    }

    /// Matrix–vector product; alias of [`Tape::matmul`] with a rank-1 right operand.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, GradError> {
        let rank = self.shape(v).len();
        let mrank = self.shape(m).len();
        if rank + 1 != mrank {
            return Err(shape_err("matvec", format!("{:?} x {:?}", self.shape(m), self.shape(v))));
        }
        self.matmul(m, v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), s, v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), s, v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), s, v, ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), s, v, ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let s = self.shape(a).to_vec();
        let v = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let ng = self.needs(a);
        self.push(op, s, v, ng)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), vec![], vec![total], ng)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                let base = (o * axis_len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let ng = self.needs(a);
        Ok(self.push(Op::SumAxis { src: a, outer, axis_len, inner }, out_shape, out, ng))
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (_, d) = self.binary(a, b, "mse", |x, y| x - y)?;
        if d.is_empty() {
            return Err(shape_err("mse", "empty operands".into()));
        }
        let v = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse(a, b), vec![], vec![v], ng))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("{start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(Op::Slice { src: a, outer, axis_len, inner, start, len }, out_shape, out, ng))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GradError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no parts".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base_shape:?}")));
            }
            total += s[axis];
            lens.push((p, s[axis]));
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &lens {
                let src = &self.nodes[p.0].value;
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Op::Concat { parts: lens, outer, inner }, out_shape, out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let v = self.nodes[a.0].value.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), v, ng))
    }

    /// Repeats a tensor along a new trailing axis of length `len`
    /// (a `[C]` vector becomes a `[C × len]` sequence).
    pub fn broadcast_seq(&mut self, a: Var, len: usize) -> Var {
        let mut shape = self.shape(a).to_vec();
        shape.push(len);
        let out = self.nodes[a.0]
            .value
            .iter()
            .flat_map(|v| std::iter::repeat_n(*v, len))
            .collect();
        let ng = self.needs(a);
        self.push(Op::BroadcastSeq { src: a, len }, shape, out, ng)
    }

    /// Causal 1-D convolution over a `[C_in × L]` sequence with stride 1 and a
    /// left pad of `τ − 1`, so the output keeps length `L` and position `k`
    /// sees only inputs `k − τ + 1 ..= k`.
    ///
    /// `kernel` is `[C_out × C_in × τ]`, or `[C × 1 × τ]` when `depthwise`.
    /// Tap `τ − 1` multiplies the current input.
    pub fn conv1d_causal(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        depthwise: bool,
        pad: PadMode,
    ) -> Result<Var, GradError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (c_in, len) = match si.as_slice() {
            [c, l] => (*c, *l),
            _ => return Err(shape_err("conv1d_causal", format!("input {si:?} is not [C, L]"))),
        };
        let (c_out, k_in, taps) = match sk.as_slice() {
            [a, b, c] => (*a, *b, *c),
            _ => return Err(shape_err("conv1d_causal", format!("kernel {sk:?} is not [C_out, C_in, tau]"))),
        };
        if taps == 0 || len == 0 {
            return Err(shape_err("conv1d_causal", format!("empty kernel or sequence: tau={taps}, L={len}")));
        }
        if taps > self.max_conv_taps {
            return Err(GradError::Config(format!(
                "kernel length {taps} exceeds configured maximum {}",
                self.max_conv_taps
            )));
        }
        let channels_ok = if depthwise { k_in == 1 && c_out == c_in } else { k_in == c_in };
        if !channels_ok {
            return Err(shape_err("conv1d_causal", format!("channel mismatch: input {si:?}, kernel {sk:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d_causal", format!("bias {:?}, expected [{c_out}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            len,
            taps,
            depthwise,
            replicate: pad == PadMode::ReplicateFirst,
        };
        let out = geom.forward(
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            bias.map(|b| self.nodes[b.0].value.as_slice()),
        );
        let ng = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Conv1d { input, kernel, bias, geom }, vec![c_out, len], out, ng))
    }

    /// Solves `M·X = R` for `X`. Accepts `[n,n]` with `[n,k]`/`[n]`, or the
    /// batched `[B,n,n]` with `[B,n,k]`/`[B,n]`.
    pub fn solve(&mut self, m: Var, rhs: Var) -> Result<Var, GradError> {
        let sm = self.shape(m).to_vec();
        let sr = self.shape(rhs).to_vec();
        let (batch, n, k) = match (sm.as_slice(), sr.as_slice()) {
            ([a, b], [c, k]) if a == b && b == c => (1, *a, *k),
            ([a, b], [c]) if a == b && b == c => (1, *a, 1),
            ([bt, a, b], [bt2, c, k]) if a == b && b == c && bt == bt2 => (*bt, *a, *k),
            ([bt, a, b], [bt2, c]) if a == b && b == c && bt == bt2 => (*bt, *a, 1),
            _ => return Err(shape_err("solve", format!("{sm:?} \\ {sr:?}"))),
        };
        let mut out = self.nodes[rhs.0].value.clone();
        let mut lus = Vec::with_capacity(batch);
        for i in 0..batch {
            let lu = Lu::factor(&self.nodes[m.0].value[i * n * n..(i + 1) * n * n], n)
                .ok_or(GradError::Singular { op: "solve", batch_index: i })?;
            lu.solve(&mut out[i * n * k..(i + 1) * n * k], k);
            lus.push(lu);
        }
        let ng = self.needs(m) || self.needs(rhs);
        Ok(self.push(Op::Solve { m, rhs, lus, n, k }, sr, out, ng))
    }

    /// Reverse sweep from a scalar `loss`; returns the gradient of every record.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, GradError> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| GradError::Contract(format!("loss {loss:?} is not on this tape")))?;
        if loss_node.value.len() != 1 {
            return Err(GradError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad && idx != loss.0 {
                grads[idx] = Some(g);
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GradError::NonFinite { op: node.op.name(), node: idx });
            }
            if !self.propagate(idx, &g, &mut grads) {
                return Err(GradError::NonFinite { op: node.op.name(), node: idx });
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and accumulates into every `requires_grad`
    /// parameter recorded via [`Tape::param`]. Gradients add onto whatever the
    /// parameters already hold; reset them with [`ParamSet::zero_grads`].
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<(), GradError> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { slot: Some(id) } = node.op {
                let t = params.get_mut(id);
                if !t.requires_grad() {
                    continue;
                }
                if t.shape() != node.shape.as_slice() {
                    return Err(shape_err("backward", format!("parameter {} changed shape", params.name(id))));
                }
                match grads.grads[idx].as_deref() {
                    Some(g) => t.accumulate_grad(g),
                    None => t.accumulate_grad(&vec![0.0; node.value.len()]),
                }
            }
        }
        Ok(())
    }

    /// Pushes `g` through record `idx`; returns false if any produced gradient is non-finite.
    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> bool {
        let node = &self.nodes[idx];
        let mut finite = true;
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            finite &= delta.iter().all(|d| d.is_finite());
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                None => grads[v.0] = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, batch, p, q, r } => {
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; batch * p * q];
                    for i in 0..batch {
                        gemm(p, r, q, &g[i * p * r..], rm(r), &val(b)[i * q * r..], rm_t(r), 0.0, &mut da[i * p * q..], rm(q));
                    }
                    send(a, self.maybe_corrupt("matmul", da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; batch * q * r];
                    for i in 0..batch {
                        gemm(q, p, r, &val(a)[i * p * q..], rm_t(q), &g[i * p * r..], rm(r), 0.0, &mut db[i * q * r..], rm(r));
                    }
                    send(b, db);
                }
            }
            &Op::Add(a, b) => {
                send(a, self.maybe_corrupt("add", g.to_vec()));
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, self.maybe_corrupt("sub", g.to_vec()));
                send(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                send(a, self.maybe_corrupt("mul", g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                send(b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                send(a, self.maybe_corrupt("div", g.iter().zip(bv).map(|(g, y)| g / y).collect()));
                send(b, g.iter().zip(av).zip(bv).map(|((g, x), y)| -g * x / (y * y)).collect());
            }
            &Op::Scale(a, c) => send(a, self.maybe_corrupt("scale", g.iter().map(|x| c * x).collect())),
            &Op::Offset(a) => send(a, self.maybe_corrupt("offset", g.to_vec())),
            &Op::Sigmoid(a) => {
                let d = g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                send(a, self.maybe_corrupt("sigmoid", d));
            }
            &Op::Exp(a) => {
                let d = g.iter().zip(&node.value).map(|(g, e)| g * e).collect();
                send(a, self.maybe_corrupt("exp", d));
            }
            &Op::Tanh(a) => {
                let d = g.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                send(a, self.maybe_corrupt("tanh", d));
            }
            &Op::Gelu(a) => {
                let d = g.iter().zip(val(a)).map(|(g, x)| g * gelu_grad(*x)).collect();
                send(a, self.maybe_corrupt("gelu", d));
            }
            &Op::Sum(a) => send(a, self.maybe_corrupt("sum", vec![g[0]; val(a).len()])),
            &Op::SumAxis { src, outer, axis_len, inner } => {
                let mut d = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    for k in 0..axis_len {
                        let base = (o * axis_len + k) * inner;
                        d[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(src, self.maybe_corrupt("sum_axis", d));
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (val(a), val(b));
                let s = 2.0 * g[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                send(a, self.maybe_corrupt("mse", da));
                send(b, db);
            }
            &Op::Slice { src, outer, axis_len, inner, start, len } => {
                let mut d = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    let base = (o * axis_len + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(src, self.maybe_corrupt("slice", d));
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    send(p, self.maybe_corrupt("concat", d));
                }
            }
            &Op::Reshape(a) => send(a, self.maybe_corrupt("reshape", g.to_vec())),
            &Op::BroadcastSeq { src, len } => {
                let d = g.chunks(len).map(|c| c.iter().sum()).collect();
                send(src, self.maybe_corrupt("broadcast_seq", d));
            }
            &Op::Conv1d { input, kernel, bias, geom } => {
                let (dx, dw, db) = geom.backward(val(input), val(kernel), g);
                send(input, self.maybe_corrupt("conv1d_causal", dx));
                send(kernel, dw);
                if let Some(b) = bias {
                    send(b, db);
                }
            }
            Op::Solve { m, rhs, lus, n, k } => {
                let (n, k) = (*n, *k);
                // dR = M⁻ᵀ·G,  dM = −dR·Xᵀ
                let mut dr = g.to_vec();
                for (i, lu) in lus.iter().enumerate() {
                    lu.solve_transposed(&mut dr[i * n * k..(i + 1) * n * k], k);
                }
                if self.nodes[m.0].needs_grad {
                    let x = &node.value;
                    let mut dm = vec![0.0; lus.len() * n * n];
                    for i in 0..lus.len() {
                        gemm(n, k, n, &dr[i * n * k..], rm(k), &x[i * n * k..], rm_t(k), 0.0, &mut dm[i * n * n..], rm(n));
                    }
                    dm.iter_mut().for_each(|v| *v = -*v);
                    send(*m, self.maybe_corrupt("solve", dm));
                }
                send(*rhs, dr);
            }
        }
        finite
    }

    fn maybe_corrupt(&self, op: &'static str, mut d: Vec<f64>) -> Vec<f64> {
        if self.corrupt.as_deref() == Some(op) {
            d.iter_mut().for_each(|v| *v = 1.5 * *v + 0.1);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(ps: &mut ParamSet, shape: &[usize], data: &[f64]) -> ParamId {
        ps.add("p", Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn conv_moving_sum_with_zero_pad() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.constant(&Tensor::new(&[1, 1, 2], vec![1.0, 1.0]).unwrap());
        let y = tape.conv1d_causal(x, k, None, false, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity_and_zero_kernel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 4], vec![0.3, -1.0, 2.0, 7.0]).unwrap());
        let delta = tape.constant(&Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d_causal(x, delta, None, false, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let zk = tape.constant(&Tensor::zeros(&[2, 1, 3]));
        let zb = tape.constant(&Tensor::zeros(&[2]));
        let z = tape.conv1d_causal(x, zk, Some(zb), false, PadMode::Zero).unwrap();
        assert!(tape.value(z).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_channels_and_long_kernels() {
        let mut tape = Tape::new().with_max_conv_taps(8);
        let x = tape.constant(&Tensor::zeros(&[2, 5]));
        let k = tape.constant(&Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(
            tape.conv1d_causal(x, k, None, false, PadMode::Zero),
            Err(GradError::Shape { .. })
        ));
        let long = tape.constant(&Tensor::zeros(&[1, 2, 9]));
        assert!(matches!(
            tape.conv1d_causal(x, long, None, false, PadMode::Zero),
            Err(GradError::Config(_))
        ));
    }

    #[test]
    fn replicate_padding_repeats_first_sample() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3], vec![2.0, 5.0, 1.0]).unwrap());
        let k = tape.constant(&Tensor::new(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.conv1d_causal(x, k, None, false, PadMode::ReplicateFirst).unwrap();
        assert_eq!(tape.value(y), &[6.0, 9.0, 8.0]);
    }

    #[test]
    fn independent_parameter_gets_exact_zero() {
        let mut ps = ParamSet::new();
        let w = p(&mut ps, &[2], &[1.0, 2.0]);
        let unused = p(&mut ps, &[3], &[1.0, 1.0, 1.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let _ = tape.param(&ps, unused);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(unused).grad().unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(ps.get(w).grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_loss_gradient_is_the_coefficient_vector() {
        let mut ps = ParamSet::new();
        let w = p(&mut ps, &[3], &[0.2, -0.4, 1.0]);
        let mut tape = Tape::new();
        let u = tape.constant(&Tensor::vector(&[3.0, -1.0, 0.5]));
        let wv = tape.param(&ps, w);
        let prod = tape.mul(wv, u).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad().unwrap(), &[3.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut ps = ParamSet::new();
        let w = p(&mut ps, &[1], &[2.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut ps).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad().unwrap(), &[8.0]);
        ps.zero_grads();
        assert_eq!(ps.get(w).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut ps = ParamSet::new();
        let w = p(&mut ps, &[2], &[1.0, 2.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        assert!(matches!(tape.backward(wv, &mut ps), Err(GradError::Contract(_))));
    }

    #[test]
    fn nan_gradient_names_the_op() {
        let mut ps = ParamSet::new();
        let w = p(&mut ps, &[1], &[0.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let zero = tape.constant(&Tensor::vector(&[0.0]));
        let q = tape.div(wv, zero).unwrap(); // 0/0
        let loss = tape.sum(q);
        let err = tape.backward(loss, &mut ps).unwrap_err();
        assert!(matches!(err, GradError::NonFinite { op: "div", .. }), "{err:?}");
    }

    #[test]
    fn solve_matches_hand_inverse() {
        let mut tape = Tape::new();
        let m = tape.constant(&Tensor::matrix(&[&[2.0, 0.0], &[1.0, 4.0]]));
        let r = tape.constant(&Tensor::vector(&[2.0, 9.0]));
        let x = tape.solve(m, r).unwrap();
        assert!((tape.value(x)[0] - 1.0).abs() < 1e-15);
        assert!((tape.value(x)[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(b), &[2., 3., 5., 6.]);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
