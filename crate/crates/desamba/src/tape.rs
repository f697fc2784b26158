//! Reverse-mode autodiff over [`Array`] values.
//!
//! A [`Tape`] records eagerly-evaluated ops; [`Tape::backward`] walks the
//! record in reverse and accumulates cotangents for every node, so gradients
//! are available both for parameters (training) and for intermediate
//! activations (Grad-CAM). Loss terms that are disabled by a config flag are
//! simply never recorded, which makes "this term contributes exactly zero
//! gradient" hold at the graph level rather than numerically.

use std::collections::BTreeMap;

use crate::fft;
use crate::kernels::{self, ConvSpec};
use crate::rng::Rng;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_B * x * x * x)).tanh()
}

/// Gradient given x and the cached tanh of the inner polynomial.
fn gelu_grad_cached(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_B * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Hypot(usize, usize),
    AddConst(usize),
    MulConst(usize, f64),
    Gelu { x: usize, tanh: Array },
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv3d { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    LayerNormCh { x: usize, gamma: usize, beta: usize, mean: Array, inv_std: Array },
    Grn { x: usize, gamma: usize, beta: usize, gx: Array, nx: Array, eps: f64 },
    ChannelStd { x: usize, std: Array, eps: f64 },
    Gap { x: usize },
    MulChannel { x: usize, s: usize },
    ScaleScalar { x: usize, s: usize },
    ConcatAx1(Vec<usize>),
    SliceAx1 { x: usize, from: usize, to: usize },
    Stack0 { a: usize, b: usize },
    Index0 { x: usize, idx: usize },
    Rfft3 { x: usize },
    Irfft3 { s: usize },
    PadSpatial { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropyMean { logits: usize, labels: Vec<usize>, softmax: Array },
    L1Mean { a: usize, b: usize },
    SumAll { x: usize },
    SelectElem { x: usize, idx: usize },
}

struct Node {
    value: Array,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<usize, Var>,
    param_nodes: Vec<(usize, usize)>,
}

pub struct Gradients {
    g: Vec<Option<Array>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameter slots bound on this tape, with their leaf nodes.
    pub fn bound_params(&self) -> &[(usize, usize)] {
        &self.param_nodes
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter slot; repeated binds return the same node.
    pub fn bind_param(&mut self, slot: usize, value: &Array) -> Var {
        if let Some(&v) = self.bound.get(&slot) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.bound.insert(slot, v);
        self.param_nodes.push((slot, v.0));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise `sqrt(a^2 + b^2)`; the magnitude of a complex pair.
    pub fn hypot(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::hypot);
        self.push(v, Op::Hypot(a.0, b.0))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t + c);
        self.push(v, Op::AddConst(x.0))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::MulConst(x.0, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        // Cache the inner tanh: it is the expensive part of both passes.
        let tanh = self.value(x).map(gelu_tanh);
        let v = self.value(x).zip_map(&tanh, |xv, tv| 0.5 * xv * (1.0 + tv));
        self.push(v, Op::Gelu { x: x.0, tanh })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x.0))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = kernels::linear_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
        );
        self.push(v, Op::Linear { x: x.0, w: w.0, b: b.map(|bv| bv.0) })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let v = kernels::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            &spec,
        );
        self.push(v, Op::Conv3d { x: x.0, w: w.0, b: b.map(|bv| bv.0), spec })
    }

    pub fn layer_norm_ch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (v, mean, inv_std) =
            kernels::layer_norm_ch_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(v, Op::LayerNormCh { x: x.0, gamma: gamma.0, beta: beta.0, mean, inv_std })
    }

    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (v, gx, nx) =
            kernels::grn_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(v, Op::Grn { x: x.0, gamma: gamma.0, beta: beta.0, gx, nx, eps })
    }

    pub fn channel_std(&mut self, x: Var, eps: f64) -> Var {
        let (v, _mean, std) = kernels::channel_std_forward(self.value(x), eps);
        self.push(v, Op::ChannelStd { x: x.0, std, eps })
    }

    /// Global average pool over spatial axes: `[b, c, ...] -> [b, c]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (b, c, sp) = kernels::bcs(self.shape(x));
        let xd = self.value(x).data();
        let mut out = Array::zeros(&[b, c]);
        for i in 0..b * c {
            out.data_mut()[i] = xd[i * sp..(i + 1) * sp].iter().sum::<f64>() / sp as f64;
        }
        self.push(out, Op::Gap { x: x.0 })
    }

    /// Broadcast-multiply `x[b, c, ...]` by a per-channel field `s[b, c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (b, c, sp) = kernels::bcs(self.shape(x));
        assert_eq!(self.shape(s), [b, c], "per-channel field shape mismatch");
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = Array::zeros(self.shape(x));
        for i in 0..b * c {
            let sv = sd[i];
            let dst = &mut out.data_mut()[i * sp..(i + 1) * sp];
            for (o, &v) in dst.iter_mut().zip(&xd[i * sp..(i + 1) * sp]) {
                *o = v * sv;
            }
        }
        self.push(out, Op::MulChannel { x: x.0, s: s.0 })
    }

    /// Multiply a tensor by a scalar parameter (shape `[1]`).
    pub fn scale_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_scalar expects a [1] scalar");
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|t| t * sv);
        self.push(v, Op::ScaleScalar { x: x.0, s: s.0 })
    }

    /// Concatenate along axis 1 (channels / features).
    pub fn concat_ax1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let outer = self.shape(parts[0])[0];
        let inner: usize = self.shape(parts[0])[2..].iter().product::<usize>().max(1);
        let mut total_c = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh[0], outer, "concat outer dim mismatch");
            assert_eq!(
                sh[2..].iter().product::<usize>().max(1),
                inner,
                "concat inner dims mismatch"
            );
            total_c += sh[1];
        }
        let mut shape = self.shape(parts[0]).to_vec();
        shape[1] = total_c;
        let mut out = Array::zeros(&shape);
        let mut c_off = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * total_c + c_off) * inner;
                let src_base = o * c * inner;
                out.data_mut()[dst_base..dst_base + c * inner]
                    .copy_from_slice(&src[src_base..src_base + c * inner]);
            }
            c_off += c;
        }
        self.push(out, Op::ConcatAx1(parts.iter().map(|v| v.0).collect()))
    }

    /// Slice `[from, to)` along axis 1.
    pub fn slice_ax1(&mut self, x: Var, from: usize, to: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(from < to && to <= sh[1], "slice [{from}, {to}) out of {} channels", sh[1]);
        let outer = sh[0];
        let inner: usize = sh[2..].iter().product::<usize>().max(1);
        let mut shape = sh.clone();
        shape[1] = to - from;
        let mut out = Array::zeros(&shape);
        let src = self.value(x).data();
        for o in 0..outer {
            let src_base = (o * sh[1] + from) * inner;
            let dst_base = o * (to - from) * inner;
            out.data_mut()[dst_base..dst_base + (to - from) * inner]
                .copy_from_slice(&src[src_base..src_base + (to - from) * inner]);
        }
        self.push(out, Op::SliceAx1 { x: x.0, from, to })
    }

    /// Stack two same-shape tensors along a new leading axis of size 2.
    pub fn stack0(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "stack0 shape mismatch");
        let mut shape = vec![2];
        shape.extend_from_slice(self.shape(a));
        let mut out = Array::zeros(&shape);
        let n = self.value(a).len();
        out.data_mut()[..n].copy_from_slice(self.value(a).data());
        out.data_mut()[n..].copy_from_slice(self.value(b).data());
        self.push(out, Op::Stack0 { a: a.0, b: b.0 })
    }

    /// Select one slice of a leading stack axis.
    pub fn index0(&mut self, x: Var, idx: usize) -> Var {
        let sh = self.shape(x).to_vec();
        assert!(idx < sh[0], "index0 {idx} out of {}", sh[0]);
        let inner: usize = sh[1..].iter().product();
        let out = Array::from_vec(
            &sh[1..],
            self.value(x).data()[idx * inner..(idx + 1) * inner].to_vec(),
        );
        self.push(out, Op::Index0 { x: x.0, idx })
    }

    /// Forward spectral transform; output is `[2, b, c, d, h, wh]`.
    pub fn rfft3(&mut self, x: Var) -> Var {
        let v = fft::rfft3(self.value(x));
        self.push(v, Op::Rfft3 { x: x.0 })
    }

    /// Inverse spectral transform back to spatial width `width`.
    pub fn irfft3(&mut self, s: Var, width: usize) -> Var {
        let v = fft::irfft3(self.value(s), width);
        self.push(v, Op::Irfft3 { s: s.0 })
    }

    /// Zero-pad the three spatial axes of `[b, c, d, h, w]` on the right to
    /// the requested extents.
    pub fn pad_spatial(&mut self, x: Var, target: [usize; 3]) -> Var {
        let [b, c, d, h, w] = self.value(x).dims5();
        assert!(
            target[0] >= d && target[1] >= h && target[2] >= w,
            "pad target {target:?} smaller than input ({d}, {h}, {w})"
        );
        if target == [d, h, w] {
            return x;
        }
        let [td, th, tw] = target;
        let mut out = Array::zeros(&[b, c, td, th, tw]);
        let src = self.value(x).data();
        for bc in 0..b * c {
            for z in 0..d {
                for y in 0..h {
                    let s = ((bc * d + z) * h + y) * w;
                    let dst = ((bc * td + z) * th + y) * tw;
                    out.data_mut()[dst..dst + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        self.push(out, Op::PadSpatial { x: x.0 })
    }

    /// Row-gather from an embedding table `[v, e]` given per-sample ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let [vocab, e] = self.value(table).dims2();
        let mut out = Array::zeros(&[ids.len(), e]);
        for (b, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "embedding id {id} out of vocabulary {vocab}");
            let src = &self.value(table).data()[id * e..(id + 1) * e];
            out.data_mut()[b * e..(b + 1) * e].copy_from_slice(src);
        }
        self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() })
    }

    /// Mean cross-entropy from raw logits `[b, classes]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let [bn, classes] = self.value(logits).dims2();
        assert_eq!(bn, labels.len(), "label count mismatch");
        let ld = self.value(logits).data();
        let mut softmax = Array::zeros(&[bn, classes]);
        let mut loss = 0.0;
        for b in 0..bn {
            assert!(labels[b] < classes, "label {} out of {classes}", labels[b]);
            let row = &ld[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            loss += lse - row[labels[b]];
            for (c, &v) in row.iter().enumerate() {
                softmax.data_mut()[b * classes + c] = (v - lse).exp();
            }
        }
        loss /= bn as f64;
        self.push(
            Array::scalar(loss),
            Op::CrossEntropyMean { logits: logits.0, labels: labels.to_vec(), softmax },
        )
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1_mean shape mismatch");
        let n = self.value(a).len() as f64;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        self.push(Array::scalar(v), Op::L1Mean { a: a.0, b: b.0 })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Array::scalar(v), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.mul_const(s, 1.0 / n)
    }

    /// Pick one element (by flat index) as a `[1]` scalar.
    pub fn select_elem(&mut self, x: Var, idx: usize) -> Var {
        assert!(idx < self.value(x).len());
        let v = Array::scalar(self.value(x).data()[idx]);
        self.push(v, Op::SelectElem { x: x.0, idx })
    }

    /// Inverted dropout; identity when `p <= 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = Array::from_vec(
            self.shape(x),
            (0..self.value(x).len())
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let m = self.leaf(mask);
        self.mul(x, m)
    }

    /// Accumulate cotangents for every node reachable from `target`.
    pub fn backward(&self, target: Var) -> Gradients {
        assert_eq!(self.value(target).len(), 1, "backward target must be scalar");
        let mut g: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        g[target.0] = Some(Array::scalar(1.0));
        for i in (0..=target.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            self.step_backward(i, &gy, &mut g);
            g[i] = Some(gy);
        }
        Gradients { g }
    }

    fn step_backward(&self, i: usize, gy: &Array, g: &mut [Option<Array>]) {
        fn acc(g: &mut [Option<Array>], idx: usize, delta: Array) {
            match &mut g[idx] {
                Some(a) => a.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }
        let val = |idx: usize| &self.nodes[idx].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gy.clone());
                acc(g, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(g, *a, gy.zip_map(val(*b), |gv, bv| gv * bv));
                acc(g, *b, gy.zip_map(val(*a), |gv, av| gv * av));
            }
            Op::Hypot(a, b) => {
                let phi = &self.nodes[i].value;
                let da = Array::from_vec(
                    gy.shape(),
                    gy.data()
                        .iter()
                        .zip(val(*a).data())
                        .zip(phi.data())
                        .map(|((&gv, &av), &pv)| if pv > 0.0 { gv * av / pv } else { 0.0 })
                        .collect(),
                );
                let db = Array::from_vec(
                    gy.shape(),
                    gy.data()
                        .iter()
                        .zip(val(*b).data())
                        .zip(phi.data())
                        .map(|((&gv, &bv), &pv)| if pv > 0.0 { gv * bv / pv } else { 0.0 })
                        .collect(),
                );
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::AddConst(x) => acc(g, *x, gy.clone()),
            Op::MulConst(x, c) => {
                let c = *c;
                acc(g, *x, gy.map(|v| v * c));
            }
            Op::Gelu { x, tanh } => {
                let grad = val(*x).zip_map(tanh, gelu_grad_cached);
                acc(g, *x, gy.zip_map(&grad, |gv, dv| gv * dv));
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                acc(g, *x, gy.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Softplus(x) => acc(g, *x, gy.zip_map(val(*x), |gv, xv| gv * sigmoid(xv))),
            Op::Abs(x) => acc(g, *x, gy.zip_map(val(*x), |gv, xv| gv * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 })),
            Op::Linear { x, w, b } => {
                acc(g, *x, kernels::linear_back_input(gy, val(*w)));
                acc(g, *w, kernels::linear_back_weight(gy, val(*x)));
                if let Some(b) = b {
                    acc(g, *b, kernels::linear_back_bias(gy));
                }
            }
            Op::Conv3d { x, w, b, spec } => {
                acc(g, *x, kernels::conv3d_back_input(gy, val(*w), val(*x).shape(), spec));
                acc(g, *w, kernels::conv3d_back_weight(gy, val(*x), val(*w).shape(), spec));
                if let Some(b) = b {
                    acc(g, *b, kernels::conv3d_back_bias(gy));
                }
            }
            Op::LayerNormCh { x, gamma, beta, mean, inv_std } => {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_ch_backward(gy, val(*x), val(*gamma), mean, inv_std);
                acc(g, *x, dx);
                acc(g, *gamma, dgamma);
                acc(g, *beta, dbeta);
            }
            Op::Grn { x, gamma, beta, gx, nx, eps } => {
                let (dx, dgamma, dbeta) =
                    kernels::grn_backward(gy, val(*x), val(*gamma), gx, nx, *eps);
                acc(g, *x, dx);
                acc(g, *gamma, dgamma);
                acc(g, *beta, dbeta);
            }
            Op::ChannelStd { x, std, eps } => {
                let dx = kernels::channel_std_backward(gy, &self.nodes[i].value, std, *eps);
                acc(g, *x, dx);
            }
            Op::Gap { x } => {
                let (b, c, sp) = kernels::bcs(val(*x).shape());
                let _ = (b, c);
                let mut dx = Array::zeros(val(*x).shape());
                let inv = 1.0 / sp as f64;
                for (bc_idx, &gv) in gy.data().iter().enumerate() {
                    for v in &mut dx.data_mut()[bc_idx * sp..(bc_idx + 1) * sp] {
                        *v = gv * inv;
                    }
                }
                acc(g, *x, dx);
            }
            Op::MulChannel { x, s } => {
                let (b, c, sp) = kernels::bcs(val(*x).shape());
                let _ = (b, c);
                let sd = val(*s).data();
                let xd = val(*x).data();
                let mut dx = Array::zeros(val(*x).shape());
                let mut ds = Array::zeros(val(*s).shape());
                for bc_idx in 0..sd.len() {
                    let sv = sd[bc_idx];
                    let mut acc_s = 0.0;
                    let grow = &gy.data()[bc_idx * sp..(bc_idx + 1) * sp];
                    let xrow = &xd[bc_idx * sp..(bc_idx + 1) * sp];
                    let dxrow = &mut dx.data_mut()[bc_idx * sp..(bc_idx + 1) * sp];
                    for p in 0..sp {
                        dxrow[p] = grow[p] * sv;
                        acc_s += grow[p] * xrow[p];
                    }
                    ds.data_mut()[bc_idx] = acc_s;
                }
                acc(g, *x, dx);
                acc(g, *s, ds);
            }
            Op::ScaleScalar { x, s } => {
                let sv = val(*s).data()[0];
                acc(g, *x, gy.map(|v| v * sv));
                let ds = gy
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| gv * xv)
                    .sum::<f64>();
                acc(g, *s, Array::scalar(ds));
            }
            Op::ConcatAx1(parts) => {
                let sh = self.nodes[i].value.shape();
                let outer = sh[0];
                let total_c = sh[1];
                let inner: usize = sh[2..].iter().product::<usize>().max(1);
                let mut c_off = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    let mut dp = Array::zeros(val(p).shape());
                    for o in 0..outer {
                        let src_base = (o * total_c + c_off) * inner;
                        let dst_base = o * c * inner;
                        dp.data_mut()[dst_base..dst_base + c * inner]
                            .copy_from_slice(&gy.data()[src_base..src_base + c * inner]);
                    }
                    acc(g, p, dp);
                    c_off += c;
                }
            }
            Op::SliceAx1 { x, from, to } => {
                let sh = val(*x).shape();
                let outer = sh[0];
                let total_c = sh[1];
                let inner: usize = sh[2..].iter().product::<usize>().max(1);
                let c = to - from;
                let mut dx = Array::zeros(sh);
                for o in 0..outer {
                    let dst_base = (o * total_c + from) * inner;
                    let src_base = o * c * inner;
                    dx.data_mut()[dst_base..dst_base + c * inner]
                        .copy_from_slice(&gy.data()[src_base..src_base + c * inner]);
                }
                acc(g, *x, dx);
            }
            Op::Stack0 { a, b } => {
                let n = val(*a).len();
                let da = Array::from_vec(val(*a).shape(), gy.data()[..n].to_vec());
                let db = Array::from_vec(val(*b).shape(), gy.data()[n..].to_vec());
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::Index0 { x, idx } => {
                let mut dx = Array::zeros(val(*x).shape());
                let inner = gy.len();
                dx.data_mut()[idx * inner..(idx + 1) * inner].copy_from_slice(gy.data());
                acc(g, *x, dx);
            }
            Op::Rfft3 { x } => {
                let w = val(*x).shape()[4];
                acc(g, *x, fft::rfft3_adjoint(gy, w));
            }
            Op::Irfft3 { s } => {
                acc(g, *s, fft::irfft3_adjoint(gy));
            }
            Op::PadSpatial { x } => {
                let [b, c, d, h, w] = val(*x).dims5();
                let [_, _, td, th, tw] = self.nodes[i].value.dims5();
                let mut dx = Array::zeros(val(*x).shape());
                for bc in 0..b * c {
                    for z in 0..d {
                        for y in 0..h {
                            let s = ((bc * td + z) * th + y) * tw;
                            let dst = ((bc * d + z) * h + y) * w;
                            dx.data_mut()[dst..dst + w].copy_from_slice(&gy.data()[s..s + w]);
                        }
                    }
                }
                acc(g, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let [_, e] = val(*table).dims2();
                let mut dt = Array::zeros(val(*table).shape());
                for (b, &id) in ids.iter().enumerate() {
                    let grow = &gy.data()[b * e..(b + 1) * e];
                    let drow = &mut dt.data_mut()[id * e..(id + 1) * e];
                    for (o, &gv) in drow.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                acc(g, *table, dt);
            }
            Op::CrossEntropyMean { logits, labels, softmax } => {
                let [bn, classes] = val(*logits).dims2();
                let scale = gy.data()[0] / bn as f64;
                let mut dl = Array::zeros(&[bn, classes]);
                for b in 0..bn {
                    for c in 0..classes {
                        let onehot = if labels[b] == c { 1.0 } else { 0.0 };
                        dl.data_mut()[b * classes + c] =
                            scale * (softmax.data()[b * classes + c] - onehot);
                    }
                }
                acc(g, *logits, dl);
            }
            Op::L1Mean { a, b } => {
                let n = val(*a).len() as f64;
                let s = gy.data()[0] / n;
                let da = val(*a).zip_map(val(*b), |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                let db = da.map(|v| -v);
                acc(g, *a, da);
                acc(g, *b, db);
            }
            Op::SumAll { x } => {
                let gv = gy.data()[0];
                acc(g, *x, Array::filled(val(*x).shape(), gv));
            }
            Op::SelectElem { x, idx } => {
                let mut dx = Array::zeros(val(*x).shape());
                dx.data_mut()[*idx] = gy.data()[0];
                acc(g, *x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central finite difference of a scalar-valued rebuild closure.
    fn numeric_grad(
        inputs: &mut [Array],
        which: usize,
        eval: &dyn Fn(&[Array]) -> f64,
        eps: f64,
    ) -> Array {
        let mut out = Array::zeros(inputs[which].shape());
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            inputs[which].data_mut()[i] = orig + eps;
            let up = eval(inputs);
            inputs[which].data_mut()[i] = orig - eps;
            let down = eval(inputs);
            inputs[which].data_mut()[i] = orig;
            out.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out
    }

    fn check_op(
        mut inputs: Vec<Array>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |arrs: &[Array]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = arrs.iter().map(|a| t.leaf(a.clone())).collect();
            let out = build(&mut t, &vars);
            // Weighted sum so every output element contributes asymmetrically.
            t.value(out)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * ((i % 7) as f64 + 0.5))
                .sum()
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone())).collect();
        let out = build(&mut t, &vars);
        let weights = Array::from_vec(
            t.shape(out),
            (0..t.value(out).len()).map(|i| (i % 7) as f64 + 0.5).collect(),
        );
        let w = t.leaf(weights);
        let prod = t.mul(out, w);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss);
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var).expect("missing grad");
            let numeric = numeric_grad(&mut inputs, k, &eval, 1e-5);
            for i in 0..numeric.len() {
                let a = analytic.data()[i];
                let n = numeric.data()[i];
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < tol,
                    "input {k} elem {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = Rng::new(1);
        let a = Array::randn(&[2, 3], 1.0, &mut rng);
        let b = Array::randn(&[2, 3], 1.0, &mut rng);
        check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-6);
        check_op(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-6);
        check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-6);
        check_op(vec![a.clone(), b.clone()], |t, v| t.hypot(v[0], v[1]), 1e-5);
        check_op(vec![a.clone()], |t, v| t.gelu(v[0]), 1e-5);
        check_op(vec![a.clone()], |t, v| t.sigmoid(v[0]), 1e-5);
        check_op(vec![a.clone()], |t, v| t.softplus(v[0]), 1e-5);
        check_op(vec![a.clone()], |t, v| t.mul_const(v[0], -1.7), 1e-6);
        check_op(vec![a], |t, v| t.add_const(v[0], 0.3), 1e-6);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let x = Array::randn(&[3, 4], 1.0, &mut rng);
        let w = Array::randn(&[5, 4], 0.5, &mut rng);
        let b = Array::randn(&[5], 0.5, &mut rng);
        check_op(vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])), 1e-5);
    }

    #[test]
    fn conv3d_matches_finite_differences() {
        let mut rng = Rng::new(3);
        // Dense conv, stride 1, same padding.
        let x = Array::randn(&[1, 2, 3, 4, 5], 1.0, &mut rng);
        let w = Array::randn(&[3, 2, 3, 3, 3], 0.3, &mut rng);
        let b = Array::randn(&[3], 0.2, &mut rng);
        let spec = ConvSpec { stride: [1, 1, 1], pad: [1, 1, 1], groups: 1 };
        check_op(vec![x, w, b], move |t, v| t.conv3d(v[0], v[1], Some(v[2]), spec), 1e-5);
        // Depthwise conv.
        let x = Array::randn(&[2, 3, 2, 4, 4], 1.0, &mut rng);
        let w = Array::randn(&[3, 1, 3, 3, 3], 0.3, &mut rng);
        let spec = ConvSpec { stride: [1, 1, 1], pad: [1, 1, 1], groups: 3 };
        check_op(vec![x, w], move |t, v| t.conv3d(v[0], v[1], None, spec), 1e-5);
        // Strided stem conv, no padding.
        let x = Array::randn(&[1, 1, 4, 6, 6], 1.0, &mut rng);
        let w = Array::randn(&[4, 1, 2, 2, 2], 0.3, &mut rng);
        let spec = ConvSpec { stride: [2, 2, 2], pad: [0, 0, 0], groups: 1 };
        check_op(vec![x, w], move |t, v| t.conv3d(v[0], v[1], None, spec), 1e-5);
    }

    #[test]
    fn conv3d_matches_naive_oracle() {
        let mut rng = Rng::new(4);
        let x = Array::randn(&[2, 4, 3, 5, 4], 1.0, &mut rng);
        let w = Array::randn(&[6, 2, 3, 1, 3], 0.4, &mut rng);
        let b = Array::randn(&[6], 0.1, &mut rng);
        let spec = ConvSpec { stride: [1, 1, 1], pad: [1, 0, 1], groups: 2 };
        let y = kernels::conv3d_forward(&x, &w, Some(&b), &spec);
        // Independent 7-nested-loop evaluation.
        let out_shape = kernels::conv3d_out_shape(x.shape(), w.shape(), &spec);
        let cig = 2;
        let co_per_g = 3;
        for bi in 0..out_shape[0] {
            for oc in 0..out_shape[1] {
                for oz in 0..out_shape[2] {
                    for oy in 0..out_shape[3] {
                        for ox in 0..out_shape[4] {
                            let mut acc = b.data()[oc];
                            let gidx = oc / co_per_g;
                            for icg in 0..cig {
                                for kz in 0..3 {
                                    for ky in 0..1 {
                                        for kx in 0..3 {
                                            let iz = oz as isize + kz as isize - 1;
                                            let iy = oy as isize + ky as isize;
                                            let ix = ox as isize + kx as isize - 1;
                                            if iz < 0 || iz >= 3 || iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                                continue;
                                            }
                                            acc += w.at(&[oc, icg, kz, ky, kx])
                                                * x.at(&[
                                                    bi,
                                                    gidx * cig + icg,
                                                    iz as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                ]);
                                        }
                                    }
                                }
                            }
                            let got = y.at(&[bi, oc, oz, oy, ox]);
                            assert!((got - acc).abs() < 1e-10, "oracle mismatch: {got} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn normalizers_match_finite_differences() {
        let mut rng = Rng::new(5);
        let x = Array::randn(&[2, 4, 2, 3, 3], 1.0, &mut rng);
        let gamma = Array::randn(&[4], 0.5, &mut rng);
        let beta = Array::randn(&[4], 0.5, &mut rng);
        check_op(
            vec![x.clone(), gamma.clone(), beta.clone()],
            |t, v| t.layer_norm_ch(v[0], v[1], v[2], 1e-6),
            1e-4,
        );
        check_op(
            vec![x.clone(), gamma, beta],
            |t, v| t.grn(v[0], v[1], v[2], 1e-6),
            1e-4,
        );
        check_op(vec![x.clone()], |t, v| t.channel_std(v[0], 1e-6), 1e-4);
        check_op(vec![x.clone()], |t, v| t.gap(v[0]), 1e-6);
        let s = Array::randn(&[2, 4], 1.0, &mut rng);
        check_op(vec![x.clone(), s], |t, v| t.mul_channel(v[0], v[1]), 1e-5);
        let sc = Array::scalar(0.7);
        check_op(vec![x, sc], |t, v| t.scale_scalar(v[0], v[1]), 1e-5);
    }

    #[test]
    fn spectral_ops_match_finite_differences() {
        let mut rng = Rng::new(6);
        let x = Array::randn(&[1, 2, 2, 3, 4], 1.0, &mut rng);
        check_op(vec![x.clone()], |t, v| t.rfft3(v[0]), 1e-5);
        check_op(
            vec![x.clone()],
            |t, v| {
                let s = t.rfft3(v[0]);
                t.irfft3(s, 4)
            },
            1e-5,
        );
        // Odd width exercises the no-Nyquist-column path.
        let x = Array::randn(&[1, 1, 2, 2, 5], 1.0, &mut rng);
        check_op(
            vec![x],
            |t, v| {
                let s = t.rfft3(v[0]);
                t.irfft3(s, 5)
            },
            1e-5,
        );
    }

    #[test]
    fn structure_ops_match_finite_differences() {
        let mut rng = Rng::new(7);
        let a = Array::randn(&[2, 3, 2], 1.0, &mut rng);
        let b = Array::randn(&[2, 5, 2], 1.0, &mut rng);
        check_op(vec![a.clone(), b.clone()], |t, v| t.concat_ax1(&[v[0], v[1]]), 1e-6);
        check_op(vec![b], |t, v| t.slice_ax1(v[0], 1, 4), 1e-6);
        check_op(vec![a.clone(), a.clone()], |t, v| t.stack0(v[0], v[1]), 1e-6);
        check_op(
            vec![a.clone()],
            |t, v| {
                let s = t.stack0(v[0], v[0]);
                t.index0(s, 1)
            },
            1e-6,
        );
    }

    #[test]
    fn pad_spatial_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let x = Array::randn(&[1, 2, 2, 3, 3], 1.0, &mut rng);
        check_op(vec![x], |t, v| t.pad_spatial(v[0], [4, 4, 4]), 1e-6);
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = Rng::new(8);
        let logits = Array::randn(&[4, 6], 1.0, &mut rng);
        let labels = vec![0usize, 3, 5, 2];
        let mut t = Tape::new();
        let lv = t.leaf(logits.clone());
        let loss = t.cross_entropy_mean(lv, &labels);
        let grads = t.backward(loss);
        let analytic = grads.wrt(lv).unwrap().clone();
        let mut arr = [logits].to_vec();
        let eval = |arrs: &[Array]| {
            let mut t = Tape::new();
            let lv = t.leaf(arrs[0].clone());
            let loss = t.cross_entropy_mean(lv, &labels);
            t.value(loss).data()[0]
        };
        let numeric = numeric_grad(&mut arr, 0, &eval, 1e-6);
        assert!(analytic.max_abs_diff(&numeric) < 1e-6);

        let a = Array::randn(&[3, 4], 1.0, &mut rng);
        let b = Array::randn(&[3, 4], 1.0, &mut rng);
        check_op(vec![a, b], |t, v| t.l1_mean(v[0], v[1]), 1e-5);
    }

    #[test]
    fn embedding_accumulates_repeated_ids() {
        let table = Array::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut t = Tape::new();
        let tv = t.leaf(table);
        let e = t.embedding(tv, &[1, 1, 2]);
        let s = t.sum_all(e);
        let grads = t.backward(s);
        let gt = grads.wrt(tv).unwrap();
        assert_eq!(gt.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x*x + x used twice: dy/dx = 2x + 1.
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let grads = t.backward(y);
        assert_eq!(grads.wrt(x).unwrap().data()[0], 7.0);
    }
}
