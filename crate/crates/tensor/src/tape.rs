//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed during one forward pass, in
//! execution order, so node inputs always precede the node itself. The
//! backward sweep walks the record once in reverse from the root.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, to_channel_major, to_sample_major, ConvGeometry};
use crate::param::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannels(Var, Var),
    ChannelMean(Var),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
    Conv2d { input: Var, kernel: Var, stride: usize },
    ConvTranspose2d { input: Var, kernel: Var, stride: usize },
    Reshape(Var),
    ConcatCols(Var, Var),
    Crop(Var),
    NeighborMean(Var),
    Outer(Var, Var),
    BceWithLogits { logits: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.dims() == b.dims() {
        a.zip_map(b, f)
    } else if b.is_scalar() {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else if a.is_scalar() {
        let s = a.item();
        Ok(b.map(|x| f(s, x)))
    } else {
        Err(TensorError::shape(op, a.dims(), b.dims()))
    }
}

/// Folds an output-shaped gradient back onto a possibly scalar-broadcast input.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.dims() == target.dims() {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(mean(exp(x)))` with the max shifted out.
pub fn logmeanexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    m + (s / x.len() as f64).ln()
}

fn neighbor_mean_forward(x: &Tensor) -> Tensor {
    let dims = x.dims();
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    match dims.len() {
        4 => {
            let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let (mut s, mut cnt) = (0.0, 0usize);
                        for yy in y.saturating_sub(1)..(y + 2).min(h) {
                            for xj in xx.saturating_sub(1)..(xx + 2).min(w) {
                                s += data[base + yy * w + xj];
                                cnt += 1;
                            }
                        }
                        out[base + y * w + xx] = s / cnt as f64;
                    }
                }
            }
        }
        _ => {
            let u = *dims.last().unwrap();
            for row in 0..x.len() / u {
                let base = row * u;
                for i in 0..u {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 2).min(u);
                    let s: f64 = data[base + lo..base + hi].iter().sum();
                    out[base + i] = s / (hi - lo) as f64;
                }
            }
        }
    }
    Tensor::new(dims, out).unwrap()
}

fn neighbor_mean_backward(g: &Tensor) -> Tensor {
    let dims = g.dims();
    let mut out = vec![0.0; g.len()];
    let gd = g.data();
    match dims.len() {
        4 => {
            let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let ylo = y.saturating_sub(1);
                        let yhi = (y + 2).min(h);
                        let xlo = xx.saturating_sub(1);
                        let xhi = (xx + 2).min(w);
                        let share = gd[base + y * w + xx] / ((yhi - ylo) * (xhi - xlo)) as f64;
                        for yy in ylo..yhi {
                            for xj in xlo..xhi {
                                out[base + yy * w + xj] += share;
                            }
                        }
                    }
                }
            }
        }
        _ => {
            let u = *dims.last().unwrap();
            for row in 0..g.len() / u {
                let base = row * u;
                for i in 0..u {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 2).min(u);
                    let share = gd[base + i] / (hi - lo) as f64;
                    for o in &mut out[base + lo..base + hi] {
                        *o += share;
                    }
                }
            }
        }
    }
    Tensor::new(dims, out).unwrap()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The parameter a node was recorded from, if any.
    pub fn parameter_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (input data, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter; repeated requests reuse one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::domain("log", format!("non-positive input {bad}")));
        }
        let out = x.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dims()[1] != tb.dims()[0] {
            return Err(TensorError::shape("matmul", ta.dims(), tb.dims()));
        }
        let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `[k]` bias to every row of an `[n×k]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tx.dims()[1] != tb.dims()[0] {
            return Err(TensorError::shape("add_bias", tx.dims(), tb.dims()));
        }
        let k = tb.len();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(k) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.dims(), out)?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Adds a per-channel value to `[n×c×h×w]`; `y` is `[c]` (shared) or
    /// `[n×c]` (per sample).
    pub fn add_channels(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let ok = tx.rank() == 4
            && match ty.rank() {
                1 => ty.dims()[0] == tx.dims()[1],
                2 => ty.dims() == &tx.dims()[..2],
                _ => false,
            };
        if !ok {
            return Err(TensorError::shape("add_channels", tx.dims(), ty.dims()));
        }
        let (n, c) = (tx.dims()[0], tx.dims()[1]);
        let hw = tx.dims()[2] * tx.dims()[3];
        let shared = ty.rank() == 1;
        let mut out = tx.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let v = if shared { ty.data()[ch] } else { ty.data()[s * c + ch] };
                let base = (s * c + ch) * hw;
                for o in &mut out[base..base + hw] {
                    *o += v;
                }
            }
        }
        let out = Tensor::new(tx.dims(), out)?;
        Ok(self.push(out, Op::AddChannels(x, y)))
    }

    /// Spatial mean per channel: `[n×c×h×w] → [n×c]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(TensorError::shape("channel_mean", tx.dims(), &[0, 0, 0, 0]));
        }
        let (n, c) = (tx.dims()[0], tx.dims()[1]);
        let hw = tx.dims()[2] * tx.dims()[3];
        let out: Vec<f64> = tx
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(out, Op::ChannelMean(x)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// `log(mean(exp(x)))` over all elements, computed with a max shift.
    pub fn logmeanexp(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(logmeanexp(self.value(a).data()));
        self.push(out, Op::LogMeanExp(a))
    }

    /// Valid cross-correlation. `input` is `[n×c×h×w]` or `[c×h×w]`,
    /// `kernel` is `[o×c×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        if self.value(input).rank() == 3 {
            let d = self.dims(input).to_vec();
            let x4 = self.reshape(input, &[1, d[0], d[1], d[2]])?;
            let y4 = self.conv2d(x4, kernel, stride)?;
            let yd = self.dims(y4).to_vec();
            return self.reshape(y4, &yd[1..]);
        }
        let (tx, tk) = (self.value(input), self.value(kernel));
        if tx.rank() != 4
            || tk.rank() != 4
            || tk.dims()[1] != tx.dims()[1]
            || tk.dims()[2] != tk.dims()[3]
            || stride == 0
            || tk.dims()[2] > tx.dims()[2]
            || tk.dims()[3] > tx.dims()[3]
        {
            return Err(TensorError::shape("conv2d", tx.dims(), tk.dims()));
        }
        let n = tx.dims()[0];
        let o = tk.dims()[0];
        let g = ConvGeometry::new(tx.dims()[1], tx.dims()[2], tx.dims()[3], tk.dims()[2], stride);
        let (pl, pos, ckk) = (g.plane_len(), g.positions(), g.patch_len());
        debug_assert_eq!(tx.len(), n * pl);
        let mut cols = vec![0.0; ckk * n * pos];
        im2col(tx.data(), n, &g, &mut cols);
        let mut out = vec![0.0; o * n * pos];
        gemm_nn(tk.data(), &cols, &mut out, o, ckk, n * pos);
        let out = Tensor::new(&[n, o, g.out_h, g.out_w], to_sample_major(&out, n, o, pos))?;
        Ok(self.push(out, Op::Conv2d { input, kernel, stride }))
    }

    /// Linear adjoint of [`Tape::conv2d`]. `input` is `[n×ci×h×w]` or
    /// `[ci×h×w]`, `kernel` is `[ci×co×k×k]`; output extent is
    /// `(h−1)·stride + k`.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        if self.value(input).rank() == 3 {
            let d = self.dims(input).to_vec();
            let x4 = self.reshape(input, &[1, d[0], d[1], d[2]])?;
            let y4 = self.conv2d_transpose(x4, kernel, stride)?;
            let yd = self.dims(y4).to_vec();
            return self.reshape(y4, &yd[1..]);
        }
        let (tx, tk) = (self.value(input), self.value(kernel));
        if tx.rank() != 4
            || tk.rank() != 4
            || tk.dims()[0] != tx.dims()[1]
            || tk.dims()[2] != tk.dims()[3]
            || stride == 0
        {
            return Err(TensorError::shape("conv2d_transpose", tx.dims(), tk.dims()));
        }
        let (n, ci, ih, iw) = (tx.dims()[0], tx.dims()[1], tx.dims()[2], tx.dims()[3]);
        let (co, k) = (tk.dims()[1], tk.dims()[2]);
        let g = ConvGeometry::new(co, (ih - 1) * stride + k, (iw - 1) * stride + k, k, stride);
        debug_assert_eq!((g.out_h, g.out_w), (ih, iw));
        let (pl, pos, ckk) = (g.plane_len(), g.positions(), g.patch_len());
        let xc = to_channel_major(tx.data(), n, ci, pos);
        let mut cols = vec![0.0; ckk * n * pos];
        gemm_tn(tk.data(), &xc, &mut cols, ckk, ci, n * pos);
        let mut out = vec![0.0; n * pl];
        col2im(&cols, n, &g, &mut out);
        let out = Tensor::new(&[n, co, g.height, g.width], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { input, kernel, stride }))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `[n×p] ‖ [n×q] → [n×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dims()[0] != tb.dims()[0] {
            return Err(TensorError::shape("concat_cols", ta.dims(), tb.dims()));
        }
        let (n, p, q) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
        let mut out = Vec::with_capacity(n * (p + q));
        for s in 0..n {
            out.extend_from_slice(&ta.data()[s * p..(s + 1) * p]);
            out.extend_from_slice(&tb.data()[s * q..(s + 1) * q]);
        }
        let out = Tensor::new(&[n, p + q], out)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Top-left spatial crop of `[n×c×h×w]` to `[n×c×height×width]`.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || height > tx.dims()[2] || width > tx.dims()[3] || height == 0 || width == 0 {
            return Err(TensorError::shape("crop", tx.dims(), &[height, width]));
        }
        let (n, c, h, w) = (tx.dims()[0], tx.dims()[1], tx.dims()[2], tx.dims()[3]);
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            for y in 0..height {
                let base = plane * h * w + y * w;
                out.extend_from_slice(&tx.data()[base..base + width]);
            }
        }
        let out = Tensor::new(&[n, c, height, width], out)?;
        Ok(self.push(out, Op::Crop(x)))
    }

    /// Mean over the immediate neighbourhood of each unit (window of 3 along
    /// the last axis for `[n×u]`, 3×3 spatial window for `[n×c×h×w]`),
    /// clipped at the borders.
    pub fn neighbor_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 && tx.rank() != 4 {
            return Err(TensorError::shape("neighbor_mean", tx.dims(), &[]));
        }
        let out = neighbor_mean_forward(tx);
        Ok(self.push(out, Op::NeighborMean(x)))
    }

    /// Per-row outer product: `[n×p], [n×q] → [n×(p·q)]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dims()[0] != tb.dims()[0] {
            return Err(TensorError::shape("outer", ta.dims(), tb.dims()));
        }
        let (n, p, q) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
        let mut out = Vec::with_capacity(n * p * q);
        for s in 0..n {
            for i in 0..p {
                let av = ta.data()[s * p + i];
                out.extend(tb.data()[s * q..(s + 1) * q].iter().map(|bv| av * bv));
            }
        }
        let out = Tensor::new(&[n, p * q], out)?;
        Ok(self.push(out, Op::Outer(a, b)))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// in the overflow-free `max(x,0) − x·y + ln(1 + e^{−|x|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.dims() != targets.dims() {
            return Err(TensorError::shape("bce_with_logits", tl.dims(), targets.dims()));
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / tl.len() as f64);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }))
    }

    /// Adjoints of `root` with respect to every recorded node.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot(rv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::new(rv.dims(), vec![1.0]).unwrap());
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward sweep and writes `∂root/∂θ` into `store`.
    /// Parameters that did not take part get a zero gradient.
    pub fn backward(&self, root: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        store.zero_grad();
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Add(a, b) => {
                acc(grads, a, reduce_to(g.clone(), self.value(a)));
                acc(grads, b, reduce_to(g.clone(), self.value(b)));
            }
            &Op::Sub(a, b) => {
                acc(grads, a, reduce_to(g.clone(), self.value(a)));
                acc(grads, b, reduce_to(g.map(|x| -x), self.value(b)));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let ga = broadcast_binary("mul", g, tb, |x, y| x * y).unwrap();
                let gb = broadcast_binary("mul", g, ta, |x, y| x * y).unwrap();
                acc(grads, a, reduce_to(ga, ta));
                acc(grads, b, reduce_to(gb, tb));
            }
            &Op::Scale(a, k) => acc(grads, a, g.map(|x| x * k)),
            &Op::AddScalar(a) => acc(grads, a, g.clone()),
            &Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap();
                acc(grads, a, d);
            }
            &Op::Sigmoid(a) => acc(grads, a, g.zip_map(out, |gv, s| gv * s * (1.0 - s)).unwrap()),
            &Op::Tanh(a) => acc(grads, a, g.zip_map(out, |gv, t| gv * (1.0 - t * t)).unwrap()),
            &Op::Exp(a) => acc(grads, a, g.zip_map(out, |gv, e| gv * e).unwrap()),
            &Op::Log(a) => acc(grads, a, g.zip_map(self.value(a), |gv, x| gv / x).unwrap()),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn(ta.data(), g.data(), &mut gb, k, m, n);
                acc(grads, a, Tensor::new(&[m, k], ga).unwrap());
                acc(grads, b, Tensor::new(&[k, n], gb).unwrap());
            }
            &Op::AddBias(x, b) => {
                let k = self.value(b).len();
                let mut gb = vec![0.0; k];
                for row in g.data().chunks(k) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, x, g.clone());
                acc(grads, b, Tensor::new(&[k], gb).unwrap());
            }
            &Op::AddChannels(x, y) => {
                let dims = g.dims();
                let (n, c) = (dims[0], dims[1]);
                let hw = dims[2] * dims[3];
                let ty = self.value(y);
                let mut gy = vec![0.0; ty.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let total: f64 = g.data()[base..base + hw].iter().sum();
                        let slot = if ty.rank() == 1 { ch } else { s * c + ch };
                        gy[slot] += total;
                    }
                }
                acc(grads, x, g.clone());
                acc(grads, y, Tensor::new(ty.dims(), gy).unwrap());
            }
            &Op::ChannelMean(x) => {
                let tx = self.value(x);
                let hw = tx.dims()[2] * tx.dims()[3];
                let mut gx = Vec::with_capacity(tx.len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(grads, x, Tensor::new(tx.dims(), gx).unwrap());
            }
            &Op::Sum(a) => {
                let gv = g.item();
                acc(grads, a, Tensor::full(self.value(a).dims(), gv));
            }
            &Op::Mean(a) => {
                let ta = self.value(a);
                acc(grads, a, Tensor::full(ta.dims(), g.item() / ta.len() as f64));
            }
            &Op::LogMeanExp(a) => {
                let ta = self.value(a);
                let m = ta.max();
                let w: Vec<f64> = ta.data().iter().map(|&x| (x - m).exp()).collect();
                let z: f64 = w.iter().sum();
                let gv = g.item();
                acc(grads, a, Tensor::new(ta.dims(), w.iter().map(|e| gv * e / z).collect()).unwrap());
            }
            &Op::Conv2d { input, kernel, stride } => {
                let (tx, tk) = (self.value(input), self.value(kernel));
                let n = tx.dims()[0];
                let o = tk.dims()[0];
                let geo = ConvGeometry::new(tx.dims()[1], tx.dims()[2], tx.dims()[3], tk.dims()[2], stride);
                let (pos, ckk) = (geo.positions(), geo.patch_len());
                let gc = to_channel_major(g.data(), n, o, pos);
                let mut cols = vec![0.0; ckk * n * pos];
                im2col(tx.data(), n, &geo, &mut cols);
                let mut gk = vec![0.0; tk.len()];
                gemm_nt(&gc, &cols, &mut gk, o, n * pos, ckk);
                let mut dcols = vec![0.0; ckk * n * pos];
                gemm_tn(tk.data(), &gc, &mut dcols, ckk, o, n * pos);
                let mut gx = vec![0.0; tx.len()];
                col2im(&dcols, n, &geo, &mut gx);
                acc(grads, input, Tensor::new(tx.dims(), gx).unwrap());
                acc(grads, kernel, Tensor::new(tk.dims(), gk).unwrap());
            }
            &Op::ConvTranspose2d { input, kernel, stride } => {
                let (tx, tk) = (self.value(input), self.value(kernel));
                let (n, ci) = (tx.dims()[0], tx.dims()[1]);
                let (co, k) = (tk.dims()[1], tk.dims()[2]);
                let geo = ConvGeometry::new(co, out.dims()[2], out.dims()[3], k, stride);
                let (pos, ckk) = (geo.positions(), geo.patch_len());
                let mut cols = vec![0.0; ckk * n * pos];
                im2col(g.data(), n, &geo, &mut cols);
                let mut gx = vec![0.0; tx.len()];
                gemm_nn(tk.data(), &cols, &mut gx, ci, ckk, n * pos);
                let xc = to_channel_major(tx.data(), n, ci, pos);
                let mut gk = vec![0.0; tk.len()];
                gemm_nt(&xc, &cols, &mut gk, ci, n * pos, ckk);
                acc(grads, input, Tensor::new(tx.dims(), to_sample_major(&gx, n, ci, pos)).unwrap());
                acc(grads, kernel, Tensor::new(tk.dims(), gk).unwrap());
            }
            &Op::Reshape(a) => acc(grads, a, g.reshape(self.value(a).dims()).unwrap()),
            &Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(a).dims()[1], self.value(b).dims()[1]);
                let n = g.dims()[0];
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for row in g.data().chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(grads, a, Tensor::new(&[n, p], ga).unwrap());
                acc(grads, b, Tensor::new(&[n, q], gb).unwrap());
            }
            &Op::Crop(x) => {
                let tx = self.value(x);
                let (h, w) = (tx.dims()[2], tx.dims()[3]);
                let (ch, cw) = (g.dims()[2], g.dims()[3]);
                let mut gx = vec![0.0; tx.len()];
                for (plane, src) in g.data().chunks(ch * cw).enumerate() {
                    for y in 0..ch {
                        let base = plane * h * w + y * w;
                        gx[base..base + cw].copy_from_slice(&src[y * cw..(y + 1) * cw]);
                    }
                }
                acc(grads, x, Tensor::new(tx.dims(), gx).unwrap());
            }
            &Op::NeighborMean(x) => acc(grads, x, neighbor_mean_backward(g)),
            &Op::Outer(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, p, q) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                let mut ga = vec![0.0; n * p];
                let mut gb = vec![0.0; n * q];
                for s in 0..n {
                    for i in 0..p {
                        let row = &g.data()[(s * p + i) * q..(s * p + i + 1) * q];
                        let av = ta.data()[s * p + i];
                        let brow = &tb.data()[s * q..(s + 1) * q];
                        ga[s * p + i] = row.iter().zip(brow).map(|(x, y)| x * y).sum();
                        for (o, gv) in gb[s * q..(s + 1) * q].iter_mut().zip(row) {
                            *o += gv * av;
                        }
                    }
                }
                acc(grads, a, Tensor::new(ta.dims(), ga).unwrap());
                acc(grads, b, Tensor::new(tb.dims(), gb).unwrap());
            }
            Op::BceWithLogits { logits, targets } => {
                let tl = self.value(*logits);
                let scale = g.item() / tl.len() as f64;
                let gl = tl.zip_map(targets, |x, y| scale * (sigmoid(x) - y)).unwrap();
                acc(grads, *logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 0.0]));
        assert!(matches!(t.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn logmeanexp_cases() {
        assert_eq!(logmeanexp(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(logmeanexp(&[1000.0, 1000.0]), 1000.0);
        assert_relative_eq!(logmeanexp(&[0.0, 3f64.ln()]), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(t.gradients(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn scalar_broadcast_gradient_is_summed() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let k = t.constant(Tensor::scalar(2.0));
        let y = t.mul(x, k).unwrap();
        let s = t.sum(y);
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(k).unwrap().item(), 6.0);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mismatched_elementwise_shapes_fail() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(TensorError::Shape { .. })));
        assert!(t.matmul(a, a).is_err());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 2, 2]));
        let k = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(t.conv2d(x, k, 1).is_err());
    }

    #[test]
    fn neighbor_mean_of_uniform_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 3, 4, 5], 0.7));
        let y = t.neighbor_mean(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let d = t.constant(Tensor::full(&[2, 6], 0.3));
        let e = t.neighbor_mean(d).unwrap();
        assert!(t.value(e).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
