//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes, so it is independent of the
//! backward rules it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{GradError, ParamSet, PadMode, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖), with an absolute floor
/// so that exactly-zero gradients compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compares tape gradients with central differences for every tensor in
/// `params`. `build` must record a scalar loss. Returns the worst relative
/// error across tensors together with the offending tensor's name.
pub fn check_gradients<F>(params: &mut ParamSet, h: f64, build: F) -> Result<(f64, String), GradError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, GradError>,
{
    check_gradients_on(params, h, Tape::new, build)
}

pub(crate) fn check_gradients_on<F, T>(
    params: &mut ParamSet,
    h: f64,
    make_tape: T,
    build: F,
) -> Result<(f64, String), GradError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, GradError>,
    T: Fn() -> Tape,
{
    params.zero_grads();
    let mut tape = make_tape();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;
    let mut worst = (0.0_f64, String::new());
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = params
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.get(id).len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + h;
            let mut tp = Tape::new();
            let lp = build(&mut tp, params)?;
            let fp = tp.scalar_value(lp);
            params.get_mut(id).data_mut()[j] = orig - h;
            let mut tm = Tape::new();
            let lm = build(&mut tm, params)?;
            let fm = tm.scalar_value(lm);
            params.get_mut(id).data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        let err = relative_error(&analytic, &numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, params.name(id).to_string());
        }
    }
    params.zero_grads();
    Ok(worst)
}

/// One row of the primitive gradient-check table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrimitiveCheck {
    pub primitive: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape product")
}

/// Weighted sum `Σ wᵢ·xᵢ` with fixed random weights, turning any tensor into a scalar loss.
fn project(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var, GradError> {
    let w = tape.constant(weights);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type Builder = Box<dyn Fn(&mut Tape, &ParamSet) -> Result<Var, GradError>>;

/// Names of every primitive covered by [`primitive_suite`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matvec",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "offset",
    "sigmoid",
    "exp",
    "tanh",
    "gelu",
    "sum",
    "sum_axis",
    "mse",
    "slice",
    "concat",
    "reshape",
    "broadcast_seq",
    "conv1d_causal",
    "solve",
    "composite",
];

/// Builds a random instance exercising `primitive`; returns the parameters and the loss builder.
pub fn primitive_instance(primitive: &str, seed: u64) -> (ParamSet, Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9c);
    let mut ps = ParamSet::new();
    let builder: Builder = match primitive {
        "matmul" | "matvec" | "solve" => {
            let (p, q, r) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
            let batched = rng.gen_bool(0.5);
            let vector = primitive == "matvec";
            let n = q;
            let a_shape: Vec<usize> = match (primitive, batched) {
                ("solve", false) => vec![n, n],
                ("solve", true) => vec![2, n, n],
                (_, false) => vec![p, q],
                (_, true) => vec![2, p, q],
            };
            let mut a = rand_tensor(&mut rng, &a_shape, -1.0, 1.0);
            if primitive == "solve" {
                // diagonally dominant keeps the instance well conditioned
                let batches = if batched { 2 } else { 1 };
                for b in 0..batches {
                    for i in 0..n {
                        a.data_mut()[b * n * n + i * n + i] += n as f64 + 1.0;
                    }
                }
            }
            let mut b_shape = if batched { vec![2, q] } else { vec![q] };
            if !vector {
                b_shape.push(r);
            }
            let b = rand_tensor(&mut rng, &b_shape, -1.0, 1.0);
            let out_shape: Vec<usize> = match primitive {
                "solve" => b_shape.clone(),
                _ => {
                    let mut s = if batched { vec![2, p] } else { vec![p] };
                    if !vector {
                        s.push(r);
                    }
                    s
                }
            };
            let w = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
            let ia = ps.add("a", a);
            let ib = ps.add("b", b);
            let op = primitive.to_string();
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let (a, b) = (t.param(ps, ia), t.param(ps, ib));
                let y = match op.as_str() {
                    "solve" => t.solve(a, b)?,
                    "matvec" => t.matvec(a, b)?,
                    _ => t.matmul(a, b)?,
                };
                project(t, y, &w)
            })
        }
        "add" | "sub" | "mul" | "div" | "mse" => {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let b = if primitive == "div" {
                rand_tensor(&mut rng, &shape, 0.5, 2.0)
            } else {
                rand_tensor(&mut rng, &shape, -1.0, 1.0)
            };
            let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let ia = ps.add("a", a);
            let ib = ps.add("b", b);
            let op = primitive.to_string();
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let (a, b) = (t.param(ps, ia), t.param(ps, ib));
                match op.as_str() {
                    "add" => {
                        let y = t.add(a, b)?;
                        project(t, y, &w)
                    }
                    "sub" => {
                        let y = t.sub(a, b)?;
                        project(t, y, &w)
                    }
                    "mul" => {
                        let y = t.mul(a, b)?;
                        project(t, y, &w)
                    }
                    "div" => {
                        let y = t.div(a, b)?;
                        project(t, y, &w)
                    }
                    _ => t.mse(a, b),
                }
            })
        }
        "scale" | "offset" | "sigmoid" | "exp" | "tanh" | "gelu" | "sum" | "reshape" | "broadcast_seq" => {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..5)];
            let a = rand_tensor(&mut rng, &shape, -2.0, 2.0);
            let c = rng.gen_range(-2.0..2.0);
            let len = rng.gen_range(1..4);
            let w_shape = if primitive == "broadcast_seq" {
                vec![shape[0], shape[1], len]
            } else {
                shape.to_vec()
            };
            let w = rand_tensor(&mut rng, &w_shape, -1.0, 1.0);
            let ia = ps.add("a", a);
            let op = primitive.to_string();
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let a = t.param(ps, ia);
                let y = match op.as_str() {
                    "scale" => t.scale(a, c),
                    "offset" => t.offset(a, c),
                    "sigmoid" => t.sigmoid(a),
                    "exp" => t.exp(a),
                    "tanh" => t.tanh(a),
                    "gelu" => t.gelu(a),
                    "reshape" => {
                        let r = t.reshape(a, &[shape[1], shape[0]])?;
                        t.reshape(r, &shape)?
                    }
                    "broadcast_seq" => t.broadcast_seq(a, len),
                    _ => {
                        let weighted = {
                            let wv = t.constant(&w);
                            t.mul(a, wv)?
                        };
                        return Ok(t.sum(weighted));
                    }
                };
                project(t, y, &w)
            })
        }
        "sum_axis" | "slice" | "concat" => {
            let shape = [rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4)];
            let axis = rng.gen_range(0..3);
            let a = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &shape, -1.0, 1.0);
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            let mut out_shape = shape.to_vec();
            match primitive {
                "sum_axis" => {
                    out_shape.remove(axis);
                }
                "slice" => out_shape[axis] = len,
                _ => out_shape[axis] *= 2,
            }
            let w = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
            let ia = ps.add("a", a);
            let ib = ps.add("b", b);
            let op = primitive.to_string();
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let (a, b) = (t.param(ps, ia), t.param(ps, ib));
                let y = match op.as_str() {
                    "sum_axis" => {
                        let s = t.sum_axis(a, axis)?;
                        let sb = t.sum_axis(b, axis)?;
                        t.mul(s, sb)?
                    }
                    "slice" => {
                        let s = t.slice(a, axis, start, len)?;
                        let sb = t.slice(b, axis, start, len)?;
                        t.mul(s, sb)?
                    }
                    _ => {
                        let ab = t.mul(a, b)?;
                        t.concat(&[ab, a], axis)?
                    }
                };
                project(t, y, &w)
            })
        }
        "conv1d_causal" => {
            let depthwise = rng.gen_bool(0.3);
            let pad = if rng.gen_bool(0.3) { PadMode::ReplicateFirst } else { PadMode::Zero };
            let c_in = rng.gen_range(1..4);
            let c_out = if depthwise { c_in } else { rng.gen_range(1..4) };
            let taps = rng.gen_range(1..5);
            let len = rng.gen_range(1..9);
            let x = rand_tensor(&mut rng, &[c_in, len], -1.0, 1.0);
            let k = rand_tensor(&mut rng, &[c_out, if depthwise { 1 } else { c_in }, taps], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, &[c_out], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[c_out, len], -1.0, 1.0);
            let ix = ps.add("input", x);
            let ik = ps.add("kernel", k);
            let ib = ps.add("bias", bias);
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let (x, k, b) = (t.param(ps, ix), t.param(ps, ik), t.param(ps, ib));
                let y = t.conv1d_causal(x, k, Some(b), depthwise, pad)?;
                project(t, y, &w)
            })
        }
        "composite" => {
            // three layers: affine → sigmoid gate → affine → gelu, squared-error loss
            let (d0, d1, d2) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..4));
            let len = rng.gen_range(2..6);
            let x = rand_tensor(&mut rng, &[d0, len], -1.0, 1.0);
            let target = rand_tensor(&mut rng, &[d2, len], -1.0, 1.0);
            let w1 = ps.add("w1", rand_tensor(&mut rng, &[d1, d0], -1.0, 1.0));
            let b1 = ps.add("b1", rand_tensor(&mut rng, &[d1], -0.5, 0.5));
            let w2 = ps.add("w2", rand_tensor(&mut rng, &[d1, d1], -1.0, 1.0));
            let w3 = ps.add("w3", rand_tensor(&mut rng, &[d2, d1], -1.0, 1.0));
            Box::new(move |t: &mut Tape, ps: &ParamSet| {
                let xv = t.constant(&x);
                let tv = t.constant(&target);
                let (w1, b1, w2, w3) = (t.param(ps, w1), t.param(ps, b1), t.param(ps, w2), t.param(ps, w3));
                let h = t.matmul(w1, xv)?;
                let bb = t.broadcast_seq(b1, len);
                let h = t.add(h, bb)?;
                let g = t.sigmoid(h);
                let h = t.mul(g, h)?;
                let h = t.matmul(w2, h)?;
                let h = t.gelu(h);
                let y = t.matmul(w3, h)?;
                t.mse(y, tv)
            })
        }
        other => panic!("unknown primitive {other}"),
    };
    (ps, builder)
}

/// Runs `instances` seeded random checks for every primitive.
/// `corrupt` names a primitive whose backward rule is deliberately broken.
pub fn primitive_suite(instances: usize, seed: u64, corrupt: Option<&str>) -> Result<Vec<PrimitiveCheck>, GradError> {
    PRIMITIVES
        .iter()
        .map(|&name| {
            let mut worst = 0.0_f64;
            for i in 0..instances {
                let (mut ps, build) = primitive_instance(name, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
                let make = || {
                    let mut t = Tape::new();
                    if let Some(op) = corrupt {
                        t.corrupt_backward(op);
                    }
                    t
                };
                let (err, _) = check_gradients_on(&mut ps, FD_STEP, make, &build)?;
                worst = worst.max(err);
            }
            Ok(PrimitiveCheck {
                primitive: name.to_string(),
                instances,
                max_rel_err: worst,
                passed: worst < FD_TOLERANCE,
            })
        })
        .collect()
}
