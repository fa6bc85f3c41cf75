//! Reverse-mode automatic differentiation over f64 `ndarray` tensors.
//!
//! A [`Graph`] is a per-use tape: ops compute their value eagerly and record
//! themselves as nodes; [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients for every node that (transitively) depends on an
//! input or parameter leaf. Constants are skipped entirely, so frozen
//! subgraphs cost nothing at backward time.
//!
//! Everything is f64 and single-threaded by design: runs are bit-reproducible
//! for a given op sequence, which the trainer and checkpoint-resume logic
//! rely on.

mod conv;
mod raster;

pub use raster::{RasterInfo, RasterOptions};

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::collections::HashMap;
use std::sync::Arc;

use crate::camera::CameraIntrinsics;
use crate::geometry::{self, Mat3};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op {
    /// Input, parameter, or constant; no inputs.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Clamp01(Var),
    SumAll(Var),
    SumChannels(Var),
    /// (C, ...) * (1, ...) with broadcast over the channel axis.
    MulChan(Var, Var),
    /// (C, ...) * (C,) with broadcast over all trailing axes.
    MulCvec(Var, Var),
    /// Tensor times a 0-d scalar variable.
    MulSv(Var, Var),
    /// Tensor plus a 0-d scalar variable.
    AddSv(Var, Var),
    /// Extract element i of a 1-d tensor as a 0-d scalar.
    Index1(Var, usize),
    /// Assemble 0-d scalars into a 1-d tensor.
    StackScalars(Vec<Var>),
    ConcatChannels(Vec<Var>),
    SliceChannels(Var, usize, usize),
    /// out(i, j) = in(i - dy, j - dx), zero outside.
    Shift2d(Var, isize, isize),
    /// Central differences along width then height with indices clamped to
    /// the border; (C, H, W) -> (2C, H, W).
    ClampedDiff2d(Var),
    /// Unit-normalize along the channel axis per spatial location.
    NormalizeChannels(Var, f64),
    Reshape(Var),
    /// y = W x + b for 1-d x.
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    /// p' = R (p - pivot) + pivot + t, pose = (rx, ry, rz, tx, ty, tz).
    RigidTransform { points: Var, pose: Var, pivot: [f64; 3] },
    /// Soft-edge triangle rasterization of a deformed pixel grid.
    Raster { points: Var, attrs: Var },
}

enum Saved {
    None,
    GroupNorm { mean: Vec<f64>, istd: Vec<f64> },
    Rigid { rot: Mat3, drot: [Mat3; 3] },
    Raster(Box<raster::RasterSaved>),
}

struct Node {
    value: Arc<ArrayD<f64>>,
    op: Op,
    saved: Saved,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` needed one.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, Var>,
}

fn acc_grad(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, saved: Saved, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            saved,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node as a plain f64.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.ndim(), 0, "scalar_value on non-scalar node");
        a[IxDyn(&[])]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- leaves ----

    /// Non-differentiable data: backward never visits anything that depends
    /// only on constants.
    pub fn constant(&mut self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, Saved::None, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(ndarray::arr0(x).into_dyn())
    }

    /// Differentiable input (gradcheck probes, warm-started tensors, ...).
    pub fn input(&mut self, a: ArrayD<f64>) -> Var {
        self.push(a, Op::Leaf, Saved::None, true)
    }

    /// Differentiable parameter leaf, deduplicated per `param_id` so a
    /// parameter used several times in one graph accumulates one gradient.
    pub fn param(&mut self, param_id: usize, value: &Arc<ArrayD<f64>>) -> Var {
        if let Some(&v) = self.param_leaves.get(&param_id) {
            return v;
        }
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf,
            saved: Saved::None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(param_id, v);
        v
    }

    /// The parameter leaves that were inserted into this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.param_leaves.iter().map(|(&id, &v)| (id, v))
    }

    // ---- elementwise arithmetic ----

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let v = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        let ng = self.any_needs(&[a, b]);
        self.push(v, Op::Add(a, b), Saved::None, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let v = &*self.nodes[a.0].value - &*self.nodes[b.0].value;
        let ng = self.any_needs(&[a, b]);
        self.push(v, Op::Sub(a, b), Saved::None, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let v = &*self.nodes[a.0].value * &*self.nodes[b.0].value;
        let ng = self.any_needs(&[a, b]);
        self.push(v, Op::Mul(a, b), Saved::None, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let v = &*self.nodes[a.0].value / &*self.nodes[b.0].value;
        let ng = self.any_needs(&[a, b]);
        self.push(v, Op::Div(a, b), Saved::None, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), Saved::None, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), Saved::None, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- unary maps ----

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), Saved::None, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), Saved::None, ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), Saved::None, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), Saved::None, ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        debug_assert!(
            self.nodes[a.0].value.iter().all(|&x| x > 0.0),
            "ln of non-positive value"
        );
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), Saved::None, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), Saved::None, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), Saved::None, ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), Saved::None, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    /// Clamp to [0, 1]; gradient passes through strictly inside the interval
    /// and is zero where the clamp is active.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(0.0, 1.0));
        let ng = self.needs(a);
        self.push(v, Op::Clamp01(a), Saved::None, ng)
    }

    // ---- reductions ----

    /// Sum of all elements, as a 0-d scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), Saved::None, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// (C, ...) -> (1, ...) by summing the channel axis.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        assert!(self.shape(a).len() >= 2, "sum_channels needs a channel axis");
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(v, Op::SumChannels(a), Saved::None, ng)
    }

    // ---- broadcasting products ----

    /// (C, ...) * (1, ...): per-location scale shared across channels.
    pub fn mul_chan(&mut self, x: Var, m: Var) -> Var {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        assert_eq!(sm[0], 1, "mul_chan: second operand must have 1 channel");
        assert_eq!(sx[1..], sm[1..], "mul_chan: spatial shapes differ");
        let m_b = self.nodes[m.0].value.broadcast(IxDyn(&sx)).unwrap().to_owned();
        let v = &*self.nodes[x.0].value * &m_b;
        let ng = self.any_needs(&[x, m]);
        self.push(v, Op::MulChan(x, m), Saved::None, ng)
    }

    /// (C, ...) * (C,): per-channel scale shared across locations.
    pub fn mul_cvec(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(self.shape(w), &[sx[0]], "mul_cvec: weight length != channels");
        let mut v = (*self.nodes[x.0].value).clone();
        let wv = Arc::clone(&self.nodes[w.0].value);
        for (c, mut lane) in v.axis_iter_mut(Axis(0)).enumerate() {
            lane.mapv_inplace(|t| t * wv[IxDyn(&[c])]);
        }
        let ng = self.any_needs(&[x, w]);
        self.push(v, Op::MulCvec(x, w), Saved::None, ng)
    }

    /// Tensor times 0-d scalar variable.
    pub fn mul_sv(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s).len(), 0, "mul_sv: scale must be 0-d");
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|t| t * sv);
        let ng = self.any_needs(&[x, s]);
        self.push(v, Op::MulSv(x, s), Saved::None, ng)
    }

    /// Tensor plus 0-d scalar variable.
    pub fn add_sv(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.shape(s).len(), 0, "add_sv: addend must be 0-d");
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|t| t + sv);
        let ng = self.any_needs(&[x, s]);
        self.push(v, Op::AddSv(x, s), Saved::None, ng)
    }

    // ---- indexing / assembly ----

    /// Element i of a 1-d tensor, as a 0-d scalar.
    pub fn index1(&mut self, a: Var, i: usize) -> Var {
        assert_eq!(self.shape(a).len(), 1, "index1 needs a 1-d tensor");
        let v = ndarray::arr0(self.nodes[a.0].value[IxDyn(&[i])]).into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::Index1(a, i), Saved::None, ng)
    }

    /// Assemble 0-d scalars into a 1-d tensor.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<f64> = parts.iter().map(|&p| self.scalar_value(p)).collect();
        let v = ndarray::Array1::from_vec(vals).into_dyn();
        let ng = self.any_needs(parts);
        self.push(v, Op::StackScalars(parts.to_vec()), Saved::None, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_channels shape mismatch");
        let ng = self.any_needs(parts);
        self.push(v, Op::ConcatChannels(parts.to_vec()), Saved::None, ng)
    }

    /// Channels [from, to) of the input.
    pub fn slice_channels(&mut self, a: Var, from: usize, to: usize) -> Var {
        let c = self.shape(a)[0];
        assert!(from < to && to <= c, "slice_channels: bad range {from}..{to} of {c}");
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(0), Slice::from(from..to))
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceChannels(a, from, to), Saved::None, ng)
    }

    /// out(i, j) = in(i - dy, j - dx), zero-filled at the borders.
    /// Input is (C, H, W).
    pub fn shift2d(&mut self, a: Var, dy: isize, dx: isize) -> Var {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 3, "shift2d needs (C, H, W)");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let src = Arc::clone(&self.nodes[a.0].value);
        let mut v = ArrayD::zeros(IxDyn(&sh));
        for ci in 0..c {
            for i in 0..h {
                let si = i as isize - dy;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize - dx;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    v[[ci, i, j]] = src[[ci, si as usize, sj as usize]];
                }
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::Shift2d(a, dy, dx), Saved::None, ng)
    }

    /// Central differences with border indices clamped in place of
    /// wrapping: channel block [0, C) holds in(i, j+1) - in(i, j-1) and
    /// block [C, 2C) holds in(i+1, j) - in(i-1, j). At the borders the
    /// out-of-range index collapses onto the border pixel, halving the
    /// stencil span without changing its direction.
    pub fn clamped_diff2d(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 3, "clamped_diff2d needs (C, H, W)");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let src = Arc::clone(&self.nodes[a.0].value);
        let mut v = ArrayD::zeros(IxDyn(&[2 * c, h, w]));
        for ci in 0..c {
            for i in 0..h {
                let iu = i.saturating_sub(1);
                let id = (i + 1).min(h - 1);
                for j in 0..w {
                    let jl = j.saturating_sub(1);
                    let jr = (j + 1).min(w - 1);
                    v[[ci, i, j]] = src[[ci, i, jr]] - src[[ci, i, jl]];
                    v[[c + ci, i, j]] = src[[ci, id, j]] - src[[ci, iu, j]];
                }
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::ClampedDiff2d(a), Saved::None, ng)
    }

    /// Unit L2 normalization along the channel axis at every location,
    /// with an epsilon inside the square root for stability.
    pub fn normalize_channels(&mut self, a: Var, eps: f64) -> Var {
        let sh = self.shape(a).to_vec();
        assert!(sh.len() >= 2, "normalize_channels needs a channel axis");
        let x = &*self.nodes[a.0].value;
        let mut sumsq = x.mapv(|t| t * t).sum_axis(Axis(0));
        sumsq.mapv_inplace(|s| 1.0 / (s + eps).sqrt());
        let mut v = x.clone();
        for mut lane in v.axis_iter_mut(Axis(0)) {
            lane *= &sumsq;
        }
        let ng = self.needs(a);
        self.push(v, Op::NormalizeChannels(a, eps), Saved::None, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.nodes[a.0].value.len(), "reshape changes element count");
        let data: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), Saved::None, ng)
    }

    // ---- linear / conv / norm layers ----

    /// y = W x + b with x: (N,), W: (M, N), b: (M,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        assert_eq!(sx.len(), 1, "linear: x must be 1-d");
        assert_eq!(sw, vec![sb[0], sx[0]], "linear: weight shape mismatch");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (wv.dot(&xv) + bv).into_dyn();
        let ng = self.any_needs(&[x, w, b]);
        self.push(v, Op::Linear { x, w, b }, Saved::None, ng)
    }

    /// 2D convolution, x: (Cin, H, W), w: (Cout, Cin, K, K), b: (Cout,).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = conv::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let ng = self.any_needs(&[x, w, b]);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, Saved::None, ng)
    }

    /// Transposed 2D convolution, x: (Cin, H, W), w: (Cin, Cout, K, K),
    /// b: (Cout,). Output is ((H-1)*stride - 2*pad + K) square.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = conv::conv_transpose2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let ng = self.any_needs(&[x, w, b]);
        self.push(
            v,
            Op::ConvTranspose2d { x, w, b, stride, pad },
            Saved::None,
            ng,
        )
    }

    /// Group normalization over (C, H, W) with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let sh = self.shape(x).to_vec();
        let c = sh[0];
        assert!(groups >= 1 && c % groups == 0, "group_norm: channels {c} not divisible by groups {groups}");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let xv = &*self.nodes[x.0].value;
        let spatial: usize = sh[1..].iter().product();
        let per_group = c / groups * spatial;
        let xs = xv.as_slice().expect("group_norm input must be contiguous");
        let mut mean = vec![0.0; groups];
        let mut istd = vec![0.0; groups];
        let mut v = ArrayD::zeros(IxDyn(&sh));
        {
            let vs = v.as_slice_mut().unwrap();
            let gm = self.nodes[gamma.0].value.as_slice().unwrap();
            let bt = self.nodes[beta.0].value.as_slice().unwrap();
            for g in 0..groups {
                let lo = g * per_group;
                let hi = lo + per_group;
                let m = xs[lo..hi].iter().sum::<f64>() / per_group as f64;
                let var = xs[lo..hi].iter().map(|&t| (t - m) * (t - m)).sum::<f64>()
                    / per_group as f64;
                let is = 1.0 / (var + eps).sqrt();
                mean[g] = m;
                istd[g] = is;
                for idx in lo..hi {
                    let ch = idx / spatial;
                    vs[idx] = gm[ch] * (xs[idx] - m) * is + bt[ch];
                }
            }
        }
        let ng = self.any_needs(&[x, gamma, beta]);
        self.push(
            v,
            Op::GroupNorm { x, gamma, beta, groups },
            Saved::GroupNorm { mean, istd },
            ng,
        )
    }

    // ---- geometry ----

    /// Rigid pose applied about a fixed pivot point: p' = R (p - pivot) +
    /// pivot + t. Points are (3, H, W); pose is (6,) as (rx, ry, rz, tx,
    /// ty, tz) with extrinsic x-y-z rotation order.
    pub fn rigid_transform(&mut self, points: Var, pose: Var, pivot: [f64; 3]) -> Var {
        let sh = self.shape(points).to_vec();
        assert_eq!(sh[0], 3, "rigid_transform: points must be (3, ...)");
        assert_eq!(self.shape(pose), &[6], "rigid_transform: pose must be (6,)");
        let pv = &*self.nodes[pose.0].value;
        let (rx, ry, rz) = (pv[IxDyn(&[0])], pv[IxDyn(&[1])], pv[IxDyn(&[2])]);
        let t = [pv[IxDyn(&[3])], pv[IxDyn(&[4])], pv[IxDyn(&[5])]];
        let rot = geometry::rotation_matrix(rx, ry, rz);
        let drot = geometry::rotation_matrix_grads(rx, ry, rz);
        let xv = &*self.nodes[points.0].value;
        let spatial: usize = sh[1..].iter().product();
        let xs = xv.as_slice().unwrap();
        let mut v = ArrayD::zeros(IxDyn(&sh));
        {
            let vs = v.as_slice_mut().unwrap();
            for idx in 0..spatial {
                let p = [
                    xs[idx] - pivot[0],
                    xs[spatial + idx] - pivot[1],
                    xs[2 * spatial + idx] - pivot[2],
                ];
                let q = geometry::matvec(&rot, p);
                vs[idx] = q[0] + pivot[0] + t[0];
                vs[spatial + idx] = q[1] + pivot[1] + t[1];
                vs[2 * spatial + idx] = q[2] + pivot[2] + t[2];
            }
        }
        let ng = self.any_needs(&[points, pose]);
        self.push(
            v,
            Op::RigidTransform { points, pose, pivot },
            Saved::Rigid { rot, drot },
            ng,
        )
    }

    /// Rasterize the deformed pixel grid `points` (3, H, W in camera space)
    /// carrying per-vertex `attrs` (K, H, W). Output is (K + 2, H, W):
    /// interpolated attributes, then interpolated depth, then soft edge
    /// coverage. Pixels outside every triangle get zeros in all channels.
    /// The returned [`RasterInfo`] carries the hard mask and per-pixel
    /// interior margins (not differentiable).
    pub fn raster(
        &mut self,
        points: Var,
        attrs: Var,
        cam: &CameraIntrinsics,
        opts: &RasterOptions,
    ) -> (Var, RasterInfo) {
        let (value, saved, info) = raster::raster_forward(
            &self.nodes[points.0].value,
            &self.nodes[attrs.0].value,
            cam,
            opts,
        );
        let ng = self.any_needs(&[points, attrs]);
        let v = self.push(
            value,
            Op::Raster { points, attrs },
            Saved::Raster(Box::new(saved)),
            ng,
        );
        (v, info)
    }

    // ---- backward ----

    /// Reverse sweep from a 0-d `root`, producing gradients for every node
    /// that transitively feeds it and needs one.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.shape(root).len(),
            0,
            "backward root must be a 0-d scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, gy: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        // Accumulate `delta` into the gradient slot of `v` unless `v` is a
        // constant subtree.
        macro_rules! acc {
            ($v:expr, $delta:expr) => {
                if self.needs($v) {
                    acc_grad(&mut grads[$v.0], $delta);
                }
            };
        }
        let node = &self.nodes[id];
        let val = |v: Var| -> &ArrayD<f64> { &self.nodes[v.0].value };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, gy.clone());
                acc!(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc!(*a, gy.clone());
                acc!(*b, gy.mapv(|t| -t));
            }
            Op::Mul(a, b) => {
                acc!(*a, gy * val(*b));
                acc!(*b, gy * val(*a));
            }
            Op::Div(a, b) => {
                // y = a / b
                acc!(*a, gy / val(*b));
                if self.needs(*b) {
                    let mut d = gy * &*node.value; // gy * y
                    d /= val(*b); // gy * y / b = gy * a / b^2
                    d.mapv_inplace(|t| -t);
                    acc_grad(&mut grads[b.0], d);
                }
            }
            Op::AddScalar(a) => acc!(*a, gy.clone()),
            Op::Scale(a, s) => acc!(*a, gy.mapv(|t| t * s)),
            Op::Abs(a) => {
                let mut d = gy.clone();
                ndarray::Zip::from(&mut d).and(val(*a)).for_each(|g, &x| {
                    *g *= if x >= 0.0 { 1.0 } else { -1.0 };
                });
                acc!(*a, d);
            }
            Op::Square(a) => {
                let mut d = gy * val(*a);
                d.mapv_inplace(|t| 2.0 * t);
                acc!(*a, d);
            }
            Op::Sqrt(a) => {
                // y = sqrt(x), dy/dx = 1 / (2 y)
                let mut d = gy / &*node.value;
                d.mapv_inplace(|t| 0.5 * t);
                acc!(*a, d);
            }
            Op::Exp(a) => acc!(*a, gy * &*node.value),
            Op::Ln(a) => acc!(*a, gy / val(*a)),
            Op::Tanh(a) => {
                let mut d = gy.clone();
                ndarray::Zip::from(&mut d).and(&*node.value).for_each(|g, &y| {
                    *g *= 1.0 - y * y;
                });
                acc!(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = gy.clone();
                ndarray::Zip::from(&mut d).and(&*node.value).for_each(|g, &y| {
                    *g *= y * (1.0 - y);
                });
                acc!(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = gy.clone();
                ndarray::Zip::from(&mut d).and(val(*a)).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g *= slope;
                    }
                });
                acc!(*a, d);
            }
            Op::Clamp01(a) => {
                let mut d = gy.clone();
                ndarray::Zip::from(&mut d).and(val(*a)).for_each(|g, &x| {
                    if !(0.0..=1.0).contains(&x) {
                        *g = 0.0;
                    }
                });
                acc!(*a, d);
            }
            Op::SumAll(a) => {
                let g = gy[IxDyn(&[])];
                acc!(*a, ArrayD::from_elem(val(*a).raw_dim(), g));
            }
            Op::SumChannels(a) => {
                let sh = val(*a).shape().to_vec();
                let d = gy.broadcast(IxDyn(&sh)).unwrap().to_owned();
                acc!(*a, d);
            }
            Op::MulChan(x, m) => {
                if self.needs(*x) {
                    let sh = val(*x).shape().to_vec();
                    let mb = val(*m).broadcast(IxDyn(&sh)).unwrap();
                    acc_grad(&mut grads[x.0], gy * &mb);
                }
                if self.needs(*m) {
                    let d = (gy * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc_grad(&mut grads[m.0], d);
                }
            }
            Op::MulCvec(x, w) => {
                if self.needs(*x) {
                    let mut d = gy.clone();
                    let wv = val(*w);
                    for (c, mut lane) in d.axis_iter_mut(Axis(0)).enumerate() {
                        lane.mapv_inplace(|t| t * wv[IxDyn(&[c])]);
                    }
                    acc_grad(&mut grads[x.0], d);
                }
                if self.needs(*w) {
                    let prod = gy * val(*x);
                    let c = prod.shape()[0];
                    let mut d = ndarray::Array1::zeros(c);
                    for (ci, lane) in prod.axis_iter(Axis(0)).enumerate() {
                        d[ci] = lane.sum();
                    }
                    acc_grad(&mut grads[w.0], d.into_dyn());
                }
            }
            Op::MulSv(x, s) => {
                let sv = self.scalar_value(*s);
                acc!(*x, gy.mapv(|t| t * sv));
                if self.needs(*s) {
                    let d = (gy * val(*x)).sum();
                    acc_grad(&mut grads[s.0], ndarray::arr0(d).into_dyn());
                }
            }
            Op::AddSv(x, s) => {
                acc!(*x, gy.clone());
                if self.needs(*s) {
                    acc_grad(&mut grads[s.0], ndarray::arr0(gy.sum()).into_dyn());
                }
            }
            Op::Index1(a, i) => {
                let mut d = ArrayD::zeros(val(*a).raw_dim());
                d[IxDyn(&[*i])] = gy[IxDyn(&[])];
                acc!(*a, d);
            }
            Op::StackScalars(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    acc!(*p, ndarray::arr0(gy[IxDyn(&[i])]).into_dyn());
                }
            }
            Op::ConcatChannels(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = val(*p).shape()[0];
                    let d = gy
                        .slice_axis(Axis(0), Slice::from(at..at + c))
                        .to_owned();
                    acc!(*p, d);
                    at += c;
                }
            }
            Op::SliceChannels(a, from, _to) => {
                if self.needs(*a) {
                    let mut d = ArrayD::zeros(val(*a).raw_dim());
                    let c = gy.shape()[0];
                    d.slice_axis_mut(Axis(0), Slice::from(*from..*from + c))
                        .assign(gy);
                    acc_grad(&mut grads[a.0], d);
                }
            }
            Op::Shift2d(a, dy, dx) => {
                if self.needs(*a) {
                    // Inverse shift of the incoming gradient.
                    let sh = gy.shape().to_vec();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut d = ArrayD::zeros(IxDyn(&sh));
                    for ci in 0..c {
                        for i in 0..h {
                            let si = i as isize + dy;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + dx;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                d[[ci, i, j]] = gy[[ci, si as usize, sj as usize]];
                            }
                        }
                    }
                    acc_grad(&mut grads[a.0], d);
                }
            }
            Op::ClampedDiff2d(a) => {
                if self.needs(*a) {
                    let sh = val(*a).shape().to_vec();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut d = ArrayD::zeros(IxDyn(&sh));
                    for ci in 0..c {
                        for i in 0..h {
                            let iu = i.saturating_sub(1);
                            let id = (i + 1).min(h - 1);
                            for j in 0..w {
                                let jl = j.saturating_sub(1);
                                let jr = (j + 1).min(w - 1);
                                let gx = gy[[ci, i, j]];
                                let gv = gy[[c + ci, i, j]];
                                d[[ci, i, jr]] += gx;
                                d[[ci, i, jl]] -= gx;
                                d[[ci, id, j]] += gv;
                                d[[ci, iu, j]] -= gv;
                            }
                        }
                    }
                    acc_grad(&mut grads[a.0], d);
                }
            }
            Op::NormalizeChannels(a, eps) => {
                if self.needs(*a) {
                    let x = val(*a);
                    let y = &*node.value;
                    let mut r = x.mapv(|t| t * t).sum_axis(Axis(0));
                    r.mapv_inplace(|s| (s + eps).sqrt());
                    // d = gy / r - y * sum_c(gy * y) / r
                    let dot = (gy * y).sum_axis(Axis(0));
                    let mut d = gy.clone();
                    for (mut lane, ylane) in d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        ndarray::Zip::from(&mut lane)
                            .and(&ylane)
                            .and(&dot)
                            .and(&r)
                            .for_each(|g, &yv, &dt, &rv| {
                                *g = (*g - yv * dt) / rv;
                            });
                    }
                    acc_grad(&mut grads[a.0], d);
                }
            }
            Op::Reshape(a) => {
                let data: Vec<f64> = gy.iter().copied().collect();
                let d = ArrayD::from_shape_vec(val(*a).raw_dim(), data).unwrap();
                acc!(*a, d);
            }
            Op::Linear { x, w, b } => {
                let gyv = gy.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if self.needs(*x) {
                    let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    acc_grad(&mut grads[x.0], wv.t().dot(&gyv).into_dyn());
                }
                if self.needs(*w) {
                    let xv = val(*x).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let m = gyv.len();
                    let n = xv.len();
                    let mut d = ndarray::Array2::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            d[[i, j]] = gyv[i] * xv[j];
                        }
                    }
                    acc_grad(&mut grads[w.0], d.into_dyn());
                }
                acc!(*b, gy.clone());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    val(*x),
                    val(*w),
                    gy,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                if let Some(d) = dx {
                    acc_grad(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    acc_grad(&mut grads[w.0], d);
                }
                if let Some(d) = db {
                    acc_grad(&mut grads[b.0], d);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    val(*x),
                    val(*w),
                    gy,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    self.needs(*b),
                );
                if let Some(d) = dx {
                    acc_grad(&mut grads[x.0], d);
                }
                if let Some(d) = dw {
                    acc_grad(&mut grads[w.0], d);
                }
                if let Some(d) = db {
                    acc_grad(&mut grads[b.0], d);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let Saved::GroupNorm { mean, istd } = &node.saved else {
                    unreachable!()
                };
                let xv = val(*x);
                let sh = xv.shape().to_vec();
                let c = sh[0];
                let spatial: usize = sh[1..].iter().product();
                let per_group = c / groups * spatial;
                let xs = xv.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let gm = val(*gamma).as_slice().unwrap();

                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ch in 0..c {
                        let g = ch * spatial / per_group;
                        for s in 0..spatial {
                            let idx = ch * spatial + s;
                            let xhat = (xs[idx] - mean[g]) * istd[g];
                            dgamma[ch] += gys[idx] * xhat;
                            dbeta[ch] += gys[idx];
                        }
                    }
                    if self.needs(*gamma) {
                        acc_grad(
                            &mut grads[gamma.0],
                            ndarray::Array1::from_vec(dgamma).into_dyn(),
                        );
                    }
                    if self.needs(*beta) {
                        acc_grad(
                            &mut grads[beta.0],
                            ndarray::Array1::from_vec(dbeta).into_dyn(),
                        );
                    }
                }
                if self.needs(*x) {
                    let mut d = ArrayD::zeros(IxDyn(&sh));
                    let ds = d.as_slice_mut().unwrap();
                    let n = per_group as f64;
                    for g in 0..*groups {
                        let lo = g * per_group;
                        let hi = lo + per_group;
                        // dxhat = gy * gamma; reduce to the two group sums.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for idx in lo..hi {
                            let ch = idx / spatial;
                            let dxhat = gys[idx] * gm[ch];
                            let xhat = (xs[idx] - mean[g]) * istd[g];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for idx in lo..hi {
                            let ch = idx / spatial;
                            let dxhat = gys[idx] * gm[ch];
                            let xhat = (xs[idx] - mean[g]) * istd[g];
                            ds[idx] = istd[g]
                                * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                    acc_grad(&mut grads[x.0], d);
                }
            }
            Op::RigidTransform { points, pose, pivot } => {
                let Saved::Rigid { rot, drot } = &node.saved else {
                    unreachable!()
                };
                let xv = val(*points);
                let sh = xv.shape().to_vec();
                let spatial: usize = sh[1..].iter().product();
                let xs = xv.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let need_points = self.needs(*points);
                let need_pose = self.needs(*pose);
                let mut dpoints = if need_points {
                    Some(ArrayD::<f64>::zeros(IxDyn(&sh)))
                } else {
                    None
                };
                let mut dpose = [0.0; 6];
                for idx in 0..spatial {
                    let g = [gys[idx], gys[spatial + idx], gys[2 * spatial + idx]];
                    if let Some(dp) = dpoints.as_mut() {
                        let back = geometry::matvec_t(rot, g);
                        let ds = dp.as_slice_mut().unwrap();
                        ds[idx] = back[0];
                        ds[spatial + idx] = back[1];
                        ds[2 * spatial + idx] = back[2];
                    }
                    if need_pose {
                        let p = [
                            xs[idx] - pivot[0],
                            xs[spatial + idx] - pivot[1],
                            xs[2 * spatial + idx] - pivot[2],
                        ];
                        for a in 0..3 {
                            let dq = geometry::matvec(&drot[a], p);
                            dpose[a] += g[0] * dq[0] + g[1] * dq[1] + g[2] * dq[2];
                        }
                        dpose[3] += g[0];
                        dpose[4] += g[1];
                        dpose[5] += g[2];
                    }
                }
                if let Some(dp) = dpoints {
                    acc_grad(&mut grads[points.0], dp);
                }
                if need_pose {
                    acc_grad(
                        &mut grads[pose.0],
                        ndarray::Array1::from_vec(dpose.to_vec()).into_dyn(),
                    );
                }
            }
            Op::Raster { points, attrs } => {
                let Saved::Raster(saved) = &node.saved else {
                    unreachable!()
                };
                let (dpoints, dattrs) = raster::raster_backward(
                    val(*points),
                    val(*attrs),
                    gy,
                    saved,
                    self.needs(*points),
                    self.needs(*attrs),
                );
                if let Some(d) = dpoints {
                    acc_grad(&mut grads[points.0], d);
                }
                if let Some(d) = dattrs {
                    acc_grad(&mut grads[attrs.0], d);
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, ArrayD};

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn arithmetic_values_and_grads() {
        let mut g = Graph::new();
        let a = g.input(arr(&[2], &[1.0, 2.0]));
        let b = g.input(arr(&[2], &[3.0, -1.0]));
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        assert_abs_diff_eq!(g.scalar_value(s), 1.0);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(a).unwrap(), &arr(&[2], &[3.0, -1.0]));
        assert_eq!(grads.wrt(b).unwrap(), &arr(&[2], &[1.0, 2.0]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(arr(&[2], &[1.0, 2.0]));
        let c = g.constant(arr(&[2], &[5.0, 5.0]));
        let p = g.mul(a, c);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(a).is_some());
    }

    #[test]
    fn param_leaves_deduplicate_and_accumulate() {
        let mut g = Graph::new();
        let w = Arc::new(arr(&[2], &[2.0, 3.0]));
        let p1 = g.param(7, &w);
        let p2 = g.param(7, &w);
        assert_eq!(p1, p2);
        // loss = sum(w * w) via two separate uses of the same leaf
        let prod = g.mul(p1, p2);
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        // d/dw sum(w^2) = 2w
        assert_eq!(grads.wrt(p1).unwrap(), &arr(&[2], &[4.0, 6.0]));
    }

    #[test]
    fn linear_matches_manual() {
        let mut g = Graph::new();
        let x = g.input(arr1(&[1.0, 2.0]).into_dyn());
        let w = g.input(arr2(&[[1.0, -1.0], [0.5, 2.0], [3.0, 0.0]]).into_dyn());
        let b = g.input(arr1(&[0.1, 0.2, 0.3]).into_dyn());
        let y = g.linear(x, w, b);
        let expect = arr1(&[-0.9, 4.7, 3.3]);
        for i in 0..3 {
            assert_abs_diff_eq!(g.value(y)[IxDyn(&[i])], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn shift2d_round_trip_is_masked_identity() {
        let mut g = Graph::new();
        let x = g.input(arr(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let fwd = g.shift2d(x, 1, 0);
        let back = g.shift2d(fwd, -1, 0);
        // Rows shifted down then up: bottom row lost, top row zeroed.
        assert_eq!(
            g.value(back),
            &arr(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 0., 0., 0.])
        );
    }

    #[test]
    fn clamped_diff2d_values_and_adjoint() {
        let mut g = Graph::new();
        // Column ramp: x(i, j) = j. Central difference along width gives 2
        // in the middle and 1 at the clamped borders; rows are constant so
        // the vertical block is zero.
        let x = g.input(arr(&[1, 3, 3], &[0., 1., 2., 0., 1., 2., 0., 1., 2.]));
        let d = g.clamped_diff2d(x);
        let expect_dx = [1., 2., 1.];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(g.value(d)[[0, i, j]], expect_dx[j]);
                assert_abs_diff_eq!(g.value(d)[[1, i, j]], 0.0);
            }
        }
        // Adjoint identity <D x, y> = <x, D^T y> for a fixed cotangent y:
        // backward of sum(D(x) * y) must equal D^T y.
        let y = g.constant(arr(
            &[2, 3, 3],
            &[
                0.3, -1.0, 2.0, 0.5, 0.0, 1.5, -0.7, 0.2, 0.9, //
                1.1, 0.4, -0.3, 0.0, 2.0, -1.2, 0.6, 0.1, 0.8,
            ],
        ));
        let prod = g.mul(d, y);
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        let gx = grads.wrt(x).unwrap();
        // Probe the adjoint by finite differences of the forward map, which
        // is linear, so a unit step is exact.
        let base = g.value(d).clone();
        let yv = g.value(y).clone();
        for i in 0..3 {
            for j in 0..3 {
                let mut bumped = g.value(x).clone();
                bumped[[0, i, j]] += 1.0;
                let mut g2 = Graph::new();
                let xb = g2.input(bumped);
                let db = g2.clamped_diff2d(xb);
                let delta = (g2.value(db) - &base) * &yv;
                assert_abs_diff_eq!(gx[[0, i, j]], delta.sum(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sum_channels_keeps_leading_axis() {
        let mut g = Graph::new();
        let x = g.input(arr(&[2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]));
        let s = g.sum_channels(x);
        assert_eq!(g.shape(s), &[1, 2, 2]);
        assert_eq!(g.value(s), &arr(&[1, 2, 2], &[11., 22., 33., 44.]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(arr(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap(), &arr(&[2], &[2.0, 4.0]));
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let mut g = Graph::new();
        let x = g.input(arr(&[2, 1, 4], &[1., 2., 3., 4., 10., 20., 30., 40.]));
        let gamma = g.input(arr(&[2], &[1.0, 1.0]));
        let beta = g.input(arr(&[2], &[0.0, 0.0]));
        let y = g.group_norm(x, gamma, beta, 2, 1e-5);
        let v = g.value(y);
        // Each group should come out zero-mean, unit-variance.
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).map(|j| v[[c, 0, j]]).collect();
            let m: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn rigid_identity_pose_adds_translation_only() {
        let mut g = Graph::new();
        let pts = g.input(arr(&[3, 1, 2], &[0.1, 0.2, 0.3, 0.4, 1.0, 1.1]));
        let pose = g.input(arr(&[6], &[0., 0., 0., 0.01, -0.02, 0.05]));
        let out = g.rigid_transform(pts, pose, [0.0, 0.0, 1.0]);
        let v = g.value(out);
        assert_abs_diff_eq!(v[[0, 0, 0]], 0.11, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 0, 1]], 0.38, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[2, 0, 0]], 1.05, epsilon = 1e-12);
    }
}
