//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Values are immutable once recorded; only gradient buffers are written
//! during the sweep. A graph is confined to one thread.

use alloc::{format, vec, vec::Vec};

use rand_core::RngCore;

use crate::{
    error::{Error, Result},
    losses::kernels,
    scalar::Scalar,
    tensor::Tensor,
};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode uses batch statistics and active dropout; eval mode uses
/// running statistics and disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        // normalized input and per-channel 1/sqrt(var + eps)
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reduce {
        x: Var,
        scale: T,
    },
    Reshape {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Encoding {
        x: Var,
        codewords: Var,
        smoothing: Var,
        assign: Vec<T>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<u16>,
        omega: Vec<T>,
    },
    Dice {
        probs: Var,
        labels: Vec<u16>,
    },
    BinaryCrossEntropy {
        logits: Var,
        targets: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape holding forward values and gradient buffers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Calls `f(big_index, small_index)` for every element of `big`, where
/// `small` is broadcast into `big` along its singleton dims.
fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    let mut small_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let total: usize = big.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut s = 0usize;
    for i in 0..total {
        f(i, s);
        for d in (0..rank).rev() {
            idx[d] += 1;
            s += small_strides[d];
            if idx[d] < big[d] {
                break;
            }
            s -= small_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    big.len() == small.len() && big.iter().zip(small).all(|(&b, &s)| s == b || s == 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    [ho, wo]: [usize; 2],
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    [ho, wo]: [usize; 2],
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// Source taps for align-corners-false bilinear ×2 along one axis.
fn bilinear_taps<T: Scalar>(len: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = if src < 0.0 { 0.0 } else { src };
            let i0 = src as usize;
            let i1 = if i0 + 1 < len { i0 + 1 } else { len - 1 };
            let l1 = src - i0 as f64;
            (i0, i1, T::from_f64_lossy(1.0 - l1), T::from_f64_lossy(l1))
        })
        .collect()
}

fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            branches: FNV_OFFSET,
        }
    }

    /// Hash of every discrete choice made by the recorded forward pass
    /// (ReLU signs, max-pool winners, elementwise-max sides, log clamps).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branch(&mut self, word: u64) {
        self.branches = (self.branches ^ word).wrapping_mul(FNV_PRIME);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Records a leaf detached from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros if the leaf was
    /// not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).dims4(op)
    }

    /// Batched 2D cross-correlation. `x`: N×Cin×H×W, `w`: Cout×Cin×k×k,
    /// `b`: Cout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.dims4(x, "conv2d")?;
        let [co, wci, k, k2] = self.dims4(w, "conv2d")?;
        if wci != ci || k != k2 {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(mismatch("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {k} with stride {stride} and padding {pad} does not fit {h}×{wd}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let plane = ho * wo;
        let rows = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * co * plane];
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        for s in 0..n {
            let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            let colsr: &[T] = if direct {
                xs
            } else {
                im2col(xs, [ci, h, wd], k, stride, pad, [ho, wo], &mut cols);
                &cols
            };
            let os = &mut out[s * co * plane..(s + 1) * co * plane];
            T::gemm(co, rows, plane, wv, false, colsr, false, T::zero(), os);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, &bias) in os.chunks_mut(plane).zip(bv) {
                    o.iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        }
        let value = Tensor::new([n, co, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Non-overlapping max pooling with `window == stride`. Ties route to
    /// the first position in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "maxpool2d")?;
        for extent in [h, w] {
            if window == 0 || extent % window != 0 {
                return Err(Error::Indivisible {
                    op: "maxpool2d",
                    extent,
                    divisor: window,
                });
            }
        }
        let (ho, wo) = (h / window, w / window);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        for &i in &argmax {
            self.note_branch(i as u64);
        }
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Argmax positions recorded by a max-pool node.
    pub fn pool_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool2d { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Bilinear ×2 upsampling with half-pixel (align-corners-false) sampling.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "upsample_bilinear2x")?;
        let ty = bilinear_taps::<T>(h);
        let tx = bilinear_taps::<T>(w);
        let xv = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx {
                    let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                    let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                    out.push(top * wy0 + bot * wy1);
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample2x { x }, &[x]))
    }

    fn check_channel_params(&self, op: &'static str, x: Var, c: usize, params: &[Var]) -> Result<()> {
        for &p in params {
            if self.shape(p) != [c] {
                return Err(mismatch(op, self.shape(x), self.shape(p)));
            }
        }
        Ok(())
    }

    /// Batch normalization with batch statistics. Returns the output and
    /// the per-channel batch mean and biased variance so the caller can
    /// update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, scale: Var, shift: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.dims4(x, "batchnorm2d")?;
        self.check_channel_params("batchnorm2d", x, c, &[scale, shift])?;
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * plane;
                sum = sum + xv[base..base + plane].iter().copied().sum::<T>();
            }
            let m = sum / count;
            let mut sq = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * plane;
                sq = sq + xv[base..base + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = sq / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, scale, shift, &mean, &inv_std, [n, c, plane]);
        let value = Tensor::new([n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            batch_stats: true,
        };
        Ok((self.push(value, op, &[x, scale, shift]), mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, scale: Var, shift: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "batchnorm2d")?;
        self.check_channel_params("batchnorm2d", x, c, &[scale, shift])?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch(
                "batchnorm2d running stats",
                self.shape(x),
                &[mean.len(), var.len()],
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, scale, shift, mean, &inv_std, [n, c, h * w]);
        let value = Tensor::new([n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            batch_stats: false,
        };
        Ok(self.push(value, op, &[x, scale, shift]))
    }

    fn bn_apply(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: &[T],
        [n, c, plane]: [usize; 3],
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        (out, xhat)
    }

    /// Affine map `x·wᵀ + b` with `x`: N×Fin, `w`: Fout×Fin, `b`: Fout.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = match self.shape(x) {
            &[n, f] => (n, f),
            s => {
                return Err(Error::Rank {
                    op: "linear",
                    expected: 2,
                    shape: s.to_vec(),
                })
            }
        };
        let fout = match self.shape(w) {
            &[o, i] if i == fin => o,
            s => return Err(mismatch("linear", self.shape(x), s)),
        };
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(mismatch("linear bias", self.shape(w), self.shape(b)));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new([n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(value, op, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.note_signs(x, |v| v > T::zero());
        self.map(x, Op::Relu { x }, |v| if v > T::zero() { v } else { T::zero() })
    }

    fn note_signs(&mut self, x: Var, pred: impl Fn(T) -> bool) {
        let mut h = self.branches;
        for &v in self.nodes[x.0].value.data() {
            h = (h ^ pred(v) as u64).wrapping_mul(FNV_PRIME);
        }
        self.branches = h;
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid { x }, sigmoid)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", Op::Add { a, b }, |p, q| p + q)
    }

    /// Elementwise maximum; ties take `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "maximum", Op::Maximum { a, b }, |p, q| if q > p { q } else { p })?;
        let mut h = self.branches;
        for (p, q) in self.nodes[a.0].value.data().iter().zip(self.nodes[b.0].value.data()) {
            h = (h ^ (q > p) as u64).wrapping_mul(FNV_PRIME);
        }
        self.branches = h;
        Ok(out)
    }

    /// Elementwise product where `b` broadcasts into `a` along any dim in
    /// which `b` has extent 1 (channel gates N×C×1×1, spatial gates
    /// N×1×H×W).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch("mul", sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); av.len()];
        for_each_broadcast(sa, sb, |i, j| out[i] = av[i] * bv[j]);
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Softmax over the channel axis of an N×L×H×W tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, l, h, w] = self.dims4(x, "softmax_channels")?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            let base = s * l * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let mx = (0..l).map(|c| xv[at(c)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for c in 0..l {
                    let e = (xv[at(c)] - mx).exp();
                    out[at(c)] = e;
                    sum = sum + e;
                }
                for c in 0..l {
                    out[at(c)] = out[at(c)] / sum;
                }
            }
        }
        let value = Tensor::new([n, l, h, w], out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Concatenates N×Ci×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels: no inputs".into()))?;
        let [n, _, h, w] = self.dims4(first, "concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims4(p, "concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(mismatch("concat_channels", self.shape(first), self.shape(p)));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::new([n, channels, h, w], out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Channels `start..start+len` of an N×C×H×W tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "slice_channels")?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels: range {start}..{} exceeds {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            out.extend_from_slice(&xv[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let value = Tensor::new([n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out_shape = shape.clone();
        let mut count = 1usize;
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::InvalidArgument(format!(
                    "reduce: axis {a} out of range for {shape:?}"
                )));
            }
            if out_shape[a] != 1 {
                count *= shape[a];
                out_shape[a] = 1;
            }
        }
        let scale = if mean {
            T::one() / T::from_usize(count).unwrap()
        } else {
            T::one()
        };
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_broadcast(&shape, &out_shape, |i, j| out[j] = out[j] + xv[i]);
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { x, scale }, &[x]))
    }

    /// Sum over `axes`, keeping them as extent-1 dims.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Mean over `axes`, keeping them as extent-1 dims.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum(x, &axes)?;
        self.reshape(s, [1])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Inverted dropout. Identity (the same [`Var`]) in eval mode or at
    /// rate 0.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                let u = rng.next_u32() as f64 / 4_294_967_296.0;
                if u < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Soft-assignment residual encoding of the H·W descriptors of an
    /// N×C×H×W map against K codewords (K×C) with smoothing factors
    /// `exp(smoothing_raw)` (K). Returns N×C: the residual aggregates
    /// averaged over codewords, before any activation.
    pub fn encoding(&mut self, x: Var, codewords: Var, smoothing_raw: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "encoding")?;
        let k = match self.shape(codewords) {
            &[k, cc] if cc == c && k > 0 => k,
            s => return Err(mismatch("encoding codewords", self.shape(x), s)),
        };
        if self.shape(smoothing_raw) != [k] {
            return Err(mismatch(
                "encoding smoothing",
                self.shape(codewords),
                self.shape(smoothing_raw),
            ));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let d = self.value(codewords).data();
        let s: Vec<T> = self.value(smoothing_raw).data().iter().map(|v| v.exp()).collect();
        let inv_k = T::one() / T::from_usize(k).unwrap();
        let mut assign = vec![T::zero(); n * plane * k];
        let mut out = vec![T::zero(); n * c];
        let mut desc = vec![T::zero(); c];
        let mut z = vec![T::zero(); k];
        for b in 0..n {
            let xs = &xv[b * c * plane..(b + 1) * c * plane];
            let agg = &mut out[b * c..(b + 1) * c];
            for i in 0..plane {
                for (ch, v) in desc.iter_mut().enumerate() {
                    *v = xs[ch * plane + i];
                }
                for kk in 0..k {
                    let dk = &d[kk * c..(kk + 1) * c];
                    let dist: T = desc.iter().zip(dk).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    z[kk] = -s[kk] * dist;
                }
                let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
                let a = &mut assign[(b * plane + i) * k..(b * plane + i + 1) * k];
                let mut total = T::zero();
                for kk in 0..k {
                    a[kk] = (z[kk] - mx).exp();
                    total = total + a[kk];
                }
                for kk in 0..k {
                    a[kk] = a[kk] / total;
                    let dk = &d[kk * c..(kk + 1) * c];
                    for ch in 0..c {
                        agg[ch] = agg[ch] + a[kk] * (desc[ch] - dk[ch]);
                    }
                }
            }
            agg.iter_mut().for_each(|v| *v = *v * inv_k);
        }
        let value = Tensor::new([n, c], out)?;
        let op = Op::Encoding {
            x,
            codewords,
            smoothing: smoothing_raw,
            assign,
        };
        Ok(self.push(value, op, &[x, codewords, smoothing_raw]))
    }

    /// Pixel-normalized weighted cross-entropy of N×L×H×W probabilities
    /// against N·H·W labels, with per-class weights `omega`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[u16], omega: &[T]) -> Result<Var> {
        let dims = self.dims4(probs, "cross_entropy")?;
        let loss = kernels::ce_value(self.value(probs).data(), dims, labels, omega)?;
        let clamp = T::from_f64_lossy(crate::losses::LOG_CLAMP);
        self.note_signs(probs, |v| v < clamp);
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            omega: omega.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[probs]))
    }

    /// Negated class-averaged soft Dice, averaged over the batch.
    pub fn dice_loss(&mut self, probs: Var, labels: &[u16]) -> Result<Var> {
        let dims = self.dims4(probs, "dice_loss")?;
        let loss = kernels::dice_value(self.value(probs).data(), dims, labels)?;
        let op = Op::Dice {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[probs]))
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let loss = kernels::bce_value(self.value(logits).data(), targets)?;
        let op = Op::BinaryCrossEntropy {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ weight·term` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, wgt) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::NonScalarRoot(self.shape(v).to_vec()));
            }
            total = total + wgt * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum { terms: terms.to_vec() },
            &inputs,
        ))
    }

    /// Reverse sweep from a one-element root, accumulating into every
    /// reachable node that requires gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let seed = self.grads[root.0].get_or_insert_with(|| vec![T::zero()]);
        seed[0] = seed[0] + T::one();
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop(i, &gout);
        }
        Ok(())
    }

    /// Drops all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn backprop(&mut self, i: usize, gout: &[T]) {
        let Self { nodes, grads, .. } = self;
        let node = &nodes[i];
        // Gradient buffer of an input, allocated on first touch; `None` for
        // inputs detached from differentiation.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.numel();
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![T::zero(); len])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let [n, ci, h, wd] = nodes[x.0].value.dims4("conv2d").unwrap();
                let [co, _, k, _] = nodes[w.0].value.dims4("conv2d").unwrap();
                let [_, _, ho, wo] = node.value.dims4("conv2d").unwrap();
                let plane = ho * wo;
                let rows = ci * k * k;
                let direct = k == 1 && stride == 1 && pad == 0;
                if let Some(db) = b.and_then(|b| acc!(b)) {
                    for s in 0..n {
                        for (o, g) in gout[s * co * plane..(s + 1) * co * plane].chunks(plane).enumerate() {
                            db[o] = db[o] + g.iter().copied().sum::<T>();
                        }
                    }
                }
                let xv = val(x);
                let wv = val(w);
                let mut cols = if direct {
                    Vec::new()
                } else {
                    vec![T::zero(); rows * plane]
                };
                if let Some(dw) = acc!(w) {
                    for s in 0..n {
                        let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                        let colsr: &[T] = if direct {
                            xs
                        } else {
                            im2col(xs, [ci, h, wd], k, stride, pad, [ho, wo], &mut cols);
                            &cols
                        };
                        let g = &gout[s * co * plane..(s + 1) * co * plane];
                        T::gemm(co, plane, rows, g, false, colsr, true, T::one(), dw);
                    }
                }
                if let Some(dx) = acc!(x) {
                    for s in 0..n {
                        let g = &gout[s * co * plane..(s + 1) * co * plane];
                        let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                        if direct {
                            T::gemm(rows, co, plane, wv, true, g, false, T::one(), dxs);
                        } else {
                            T::gemm(rows, co, plane, wv, true, g, false, T::zero(), &mut cols);
                            col2im(&cols, [ci, h, wd], k, stride, pad, [ho, wo], dxs);
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = acc!(*x) {
                    for (&src, &g) in argmax.iter().zip(gout) {
                        dx[src] = dx[src] + g;
                    }
                }
            }
            &Op::Upsample2x { x } => {
                if let Some(dx) = acc!(x) {
                    let [n, c, h, w] = nodes[x.0].value.dims4("upsample").unwrap();
                    let ty = bilinear_taps::<T>(h);
                    let tx = bilinear_taps::<T>(w);
                    let mut it = gout.iter();
                    for plane in 0..n * c {
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for &(y0, y1, wy0, wy1) in &ty {
                            for &(x0, x1, wx0, wx1) in &tx {
                                let g = *it.next().unwrap();
                                dst[y0 * w + x0] = dst[y0 * w + x0] + g * wy0 * wx0;
                                dst[y0 * w + x1] = dst[y0 * w + x1] + g * wy0 * wx1;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + g * wy1 * wx0;
                                dst[y1 * w + x1] = dst[y1 * w + x1] + g * wy1 * wx1;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = node.value.dims4("batchnorm2d").unwrap();
                let plane = h * w;
                let count = T::from_usize(n * plane).unwrap();
                // per-channel Σ dy and Σ dy·xhat
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for j in base..base + plane {
                            sum_dy[ch] = sum_dy[ch] + gout[j];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gout[j] * xhat[j];
                        }
                    }
                }
                if let Some(dg) = acc!(*scale) {
                    for ch in 0..c {
                        dg[ch] = dg[ch] + sum_dy_xhat[ch];
                    }
                }
                if let Some(db) = acc!(*shift) {
                    for ch in 0..c {
                        db[ch] = db[ch] + sum_dy[ch];
                    }
                }
                let g = nodes[scale.0].value.data().to_vec();
                if let Some(dx) = acc!(*x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for j in base..base + plane {
                                let d = if *batch_stats {
                                    k * (gout[j] - (sum_dy[ch] + xhat[j] * sum_dy_xhat[ch]) / count)
                                } else {
                                    k * gout[j]
                                };
                                dx[j] = dx[j] + d;
                            }
                        }
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, fin) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let fout = nodes[w.0].value.shape()[0];
                if let Some(db) = b.and_then(|b| acc!(b)) {
                    for row in gout.chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                }
                let xv = val(x);
                let wv = val(w);
                if let Some(dw) = acc!(w) {
                    T::gemm(fout, n, fin, gout, true, xv, false, T::one(), dw);
                }
                if let Some(dx) = acc!(x) {
                    T::gemm(n, fout, fin, gout, false, wv, false, T::one(), dx);
                }
            }
            &Op::Relu { x } => {
                if let Some(dx) = acc!(x) {
                    for ((d, &v), &g) in dx.iter_mut().zip(node.value.data()).zip(gout) {
                        if v > T::zero() {
                            *d = *d + g;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if let Some(dx) = acc!(x) {
                    for ((d, &y), &g) in dx.iter_mut().zip(node.value.data()).zip(gout) {
                        *d = *d + g * y * (T::one() - y);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(gout).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let sa = nodes[a.0].value.shape().to_vec();
                let sb = nodes[b.0].value.shape().to_vec();
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                if let Some(da) = acc!(a) {
                    for_each_broadcast(&sa, &sb, |i, j| da[i] = da[i] + gout[i] * bv[j]);
                }
                if let Some(db) = acc!(b) {
                    for_each_broadcast(&sa, &sb, |i, j| db[j] = db[j] + gout[i] * av[i]);
                }
            }
            &Op::Maximum { a, b } => {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                if let Some(da) = acc!(a) {
                    for i in 0..gout.len() {
                        if av[i] >= bv[i] {
                            da[i] = da[i] + gout[i];
                        }
                    }
                }
                if let Some(db) = acc!(b) {
                    for i in 0..gout.len() {
                        if bv[i] > av[i] {
                            db[i] = db[i] + gout[i];
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if let Some(dx) = acc!(x) {
                    let [n, l, h, w] = node.value.dims4("softmax").unwrap();
                    let plane = h * w;
                    let p = node.value.data();
                    for s in 0..n {
                        let base = s * l * plane;
                        for q in 0..plane {
                            let at = |c: usize| base + c * plane + q;
                            let dot: T = (0..l).map(|c| p[at(c)] * gout[at(c)]).sum();
                            for c in 0..l {
                                dx[at(c)] = dx[at(c)] + p[at(c)] * (gout[at(c)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let [n, c, h, w] = node.value.dims4("concat").unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.shape()[1];
                    if let Some(dp) = acc!(p) {
                        for s in 0..n {
                            let src = &gout[(s * c + offset) * plane..(s * c + offset + pc) * plane];
                            let dst = &mut dp[s * pc * plane..(s + 1) * pc * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                    offset += pc;
                }
            }
            &Op::SliceChannels { x, start } => {
                let [n, c, h, w] = nodes[x.0].value.dims4("slice").unwrap();
                let len = node.value.shape()[1];
                let plane = h * w;
                if let Some(dx) = acc!(x) {
                    for s in 0..n {
                        let dst = &mut dx[(s * c + start) * plane..(s * c + start + len) * plane];
                        let src = &gout[s * len * plane..(s + 1) * len * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
            }
            &Op::Reduce { x, scale } => {
                let shape = nodes[x.0].value.shape().to_vec();
                let out_shape = node.value.shape().to_vec();
                if let Some(dx) = acc!(x) {
                    for_each_broadcast(&shape, &out_shape, |i, j| dx[i] = dx[i] + gout[j] * scale);
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = acc!(x) {
                    dx.iter_mut().zip(gout).for_each(|(d, &g)| *d = *d + g);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &m), &g) in dx.iter_mut().zip(mask).zip(gout) {
                        *d = *d + g * m;
                    }
                }
            }
            Op::Encoding {
                x,
                codewords,
                smoothing,
                assign,
            } => {
                let [n, c, h, w] = nodes[x.0].value.dims4("encoding").unwrap();
                let plane = h * w;
                let xv = nodes[x.0].value.data().to_vec();
                let d = nodes[codewords.0].value.data().to_vec();
                let s: Vec<T> = nodes[smoothing.0].value.data().iter().map(|v| v.exp()).collect();
                let k = s.len();
                let inv_k = T::one() / T::from_usize(k).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dd = vec![T::zero(); d.len()];
                let mut ds = vec![T::zero(); k];
                let two = T::one() + T::one();
                let mut r = vec![T::zero(); k * c];
                let mut q = vec![T::zero(); k];
                let mut dr = vec![T::zero(); c];
                for b in 0..n {
                    let gk: Vec<T> = gout[b * c..(b + 1) * c].iter().map(|&g| g * inv_k).collect();
                    let xs = &xv[b * c * plane..(b + 1) * c * plane];
                    for i in 0..plane {
                        let a = &assign[(b * plane + i) * k..(b * plane + i + 1) * k];
                        for kk in 0..k {
                            let rk = &mut r[kk * c..(kk + 1) * c];
                            for ch in 0..c {
                                rk[ch] = xs[ch * plane + i] - d[kk * c + ch];
                            }
                            q[kk] = rk.iter().zip(&gk).map(|(&rv, &gv)| rv * gv).sum();
                        }
                        let aq: T = a.iter().zip(&q).map(|(&av, &qv)| av * qv).sum();
                        for kk in 0..k {
                            let rk = &r[kk * c..(kk + 1) * c];
                            let dz = a[kk] * (q[kk] - aq);
                            let dist: T = rk.iter().map(|&v| v * v).sum();
                            ds[kk] = ds[kk] - dz * dist * s[kk];
                            let coef = -two * s[kk] * dz;
                            for ch in 0..c {
                                dr[ch] = a[kk] * gk[ch] + coef * rk[ch];
                                dx[b * c * plane + ch * plane + i] = dx[b * c * plane + ch * plane + i] + dr[ch];
                                dd[kk * c + ch] = dd[kk * c + ch] - dr[ch];
                            }
                        }
                    }
                }
                for (v, g) in [(*x, dx), (*codewords, dd), (*smoothing, ds)] {
                    if let Some(buf) = acc!(v) {
                        buf.iter_mut().zip(&g).for_each(|(b, &g)| *b = *b + g);
                    }
                }
            }
            Op::CrossEntropy { probs, labels, omega } => {
                let dims = nodes[probs.0].value.dims4("cross_entropy").unwrap();
                let p = nodes[probs.0].value.data();
                if let Some(dp) = acc!(*probs) {
                    kernels::ce_grad(p, dims, labels, omega, gout[0], dp);
                }
            }
            Op::Dice { probs, labels } => {
                let dims = nodes[probs.0].value.dims4("dice_loss").unwrap();
                let p = nodes[probs.0].value.data();
                if let Some(dp) = acc!(*probs) {
                    kernels::dice_grad(p, dims, labels, gout[0], dp);
                }
            }
            Op::BinaryCrossEntropy { logits, targets } => {
                let z = nodes[logits.0].value.data();
                if let Some(dz) = acc!(*logits) {
                    kernels::bce_grad(z, targets, gout[0], dz);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, wgt) in terms {
                    if let Some(d) = acc!(v) {
                        d[0] = d[0] + gout[0] * wgt;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 1, 3, 4], |i| i as f64 * 0.5 - 2.0));
        let w = g.param(Tensor::ones([1, 1, 1, 1]));
        let b = g.param(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_all_ones_3x3() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.param(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let w = g.param(Tensor::zeros([2, 4, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, [1, 3, 4, 4]);
                assert_eq!(right, [2, 4, 3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_padding_preserves_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 8, 8]));
        let w5 = g.param(Tensor::zeros([3, 2, 5, 5]));
        let y = g.conv2d(x, w5, None, 1, 2).unwrap();
        assert_eq!(g.shape(y), [1, 3, 8, 8]);
        let w2 = g.param(Tensor::zeros([3, 2, 3, 3]));
        let y = g.conv2d(x, w2, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), [1, 3, 4, 4]);
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let c = g.param(Tensor::full([1, 1, 2, 2], 7.0));
        let y = g.maxpool2d(c, 2).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(matches!(g.maxpool2d(x, 2), Err(Error::Indivisible { extent: 3, .. })));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..64).map(|_| rng.next_u32() as f64).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 8, 8], &data));
        let y = g.maxpool2d(x, 2).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let mut best = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(data[(2 * oy + dy) * 8 + 2 * ox + dx]);
                    }
                }
                assert_eq!(g.value(y).data()[oy * 4 + ox], best);
            }
        }
    }

    #[test]
    fn upsample_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 2, 3, 5], 1.75));
        let y = g.upsample_bilinear2x(x).unwrap();
        assert_eq!(g.shape(y), [1, 2, 6, 10]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
        let one = g.constant(t(&[1, 1, 1, 1], &[-3.0]));
        let y = g.upsample_bilinear2x(one).unwrap();
        assert_eq!(g.value(y).data(), &[-3.0; 4]);
    }

    #[test]
    fn upsample_half_pixel_weights() {
        // 1D row [0, 4]: samples at -0.25→0, 0.25, 0.75, 1.25→clamped tap.
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 4.0]));
        let y = g.upsample_bilinear2x(x).unwrap();
        assert_eq!(&g.value(y).data()[..4], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn batchnorm_normalizes_and_eval_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([3, 2, 2, 2], |i| (i * i) as f64 * 0.3 - 1.0));
        let scale = g.param(Tensor::ones([2]));
        let shift = g.param(Tensor::zeros([2]));
        let (y, _, _) = g.batchnorm_train(x, scale, shift, 1e-5).unwrap();
        let yv = g.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|s| yv[(s * 2 + ch) * 4..(s * 2 + ch + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let e = g
            .batchnorm_eval(x, scale, shift, &[0.0, 0.0], &[1.0, 1.0], 1e-5)
            .unwrap();
        for (a, b) in g.value(e).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-12);
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.param(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = g.param(Tensor::zeros([3]));
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let w0 = g.param(Tensor::zeros([2, 3]));
        let b = g.param(t(&[2], &[0.5, -1.0]));
        let y = g.linear(x, w0, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);
        let bad = g.param(Tensor::zeros([2, 4]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn mul_channel_and_spatial_broadcast() {
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f64 - 7.5));
        let ones = g.constant(Tensor::ones([2, 3, 1, 1]));
        let y = g.mul(map, ones).unwrap();
        assert_eq!(g.value(y), g.value(map));
        let spatial = g.constant(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let y = g.mul(map, spatial).unwrap();
        // sample 1, channel 2, pixel 3 → map (1*12 + 2*4 + 3) - 7.5, gate 4 + 3
        assert_eq!(g.value(y).data()[23], (23.0 - 7.5) * 7.0);
        let bad = g.constant(Tensor::ones([2, 2, 1, 1]));
        assert!(g.mul(map, bad).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let eq = g.constant(Tensor::full([1, 4, 2, 2], 3.3));
        let p = g.softmax_channels(eq).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = g.constant(t(&[1, 2, 1, 1], &[core::f64::consts::LN_2, 0.0]));
        let p = g.softmax_channels(x).unwrap();
        let pv = g.value(p).data();
        assert!((pv[0] - 2.0 / 3.0).abs() < 1e-15 && (pv[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn concat_slice_roundtrip_and_grad_split() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn([2, 3, 2, 2], |i| i as f64));
        let b = g.param(Tensor::from_fn([2, 5, 2, 2], |i| -(i as f64)));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), [2, 8, 2, 2]);
        let a2 = g.slice_channels(c, 0, 3).unwrap();
        let b2 = g.slice_channels(c, 3, 5).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));
        let bad = g.constant(Tensor::zeros([2, 1, 3, 2]));
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([2, 3, 4], 2.5));
        let m = g.mean(c, &[0, 2]).unwrap();
        assert_eq!(g.shape(m), [1, 3, 1]);
        assert!(g.value(m).data().iter().all(|&v| v == 2.5));
        let ones = g.param(Tensor::ones([2, 3]));
        let s = g.sum_all(ones).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let p = g.param(Tensor::ones([4, 5]));
        let m = g.mean(p, &[0, 1]).unwrap();
        let root = g.reshape(m, [1]).unwrap();
        g.backward(root).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn dropout_modes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1_000_000]));
        assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, Mode::Train, &mut rng).is_err());
        let y = g.dropout(x, 0.1, Mode::Train, &mut rng).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 1e6;
        assert!((frac - 0.1).abs() < 0.01, "zero fraction {frac}");
        let kept = g.value(y).data().iter().find(|&&v| v != 0.0).copied().unwrap();
        assert_eq!(kept, 1.0 / 0.9);
    }

    #[test]
    fn backward_polynomials_and_scalar_root() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, -4.0, 1.0]);
        assert!(matches!(g.backward(sq), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn detached_leaf_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }
}
