//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every op appends a node holding its forward value. A node requires grad when
//! any of its inputs does; nodes that do not are recorded as plain leaves, so a
//! forward pass with no tracked inputs carries no backward bookkeeping.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor with its gradient slot.
///
/// Cloning yields a new identity, so gradients recorded for the original never
/// land on the copy.
#[derive(Debug)]
pub struct Param<T: Scalar = f32> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param {
            id: ParamId::fresh(),
            value,
            grad,
            trainable,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Mse(Var, Var),
    Sum(Var),
    AddChannelBias(Var, Var),
    ConcatChannels(Var, Var),
    BroadcastSpatial(Var),
    Upsample2x(Var),
    EmbedMean {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    by_var: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Adds the recorded gradient of every trainable param into its `grad` slot.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        for p in params {
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.by_param.get(&p.id) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

fn bad(op: &'static str, msg: impl Into<String>) -> Error {
    Error::BadShape {
        op,
        msg: msg.into(),
    }
}

/// `[N, C, rest...]` viewed as `(N, C, S)`.
fn ncs(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(bad(op, format!("need at least [N, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(bad(op, format!("expected [N, C, H, W], got {shape:?}"))),
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize, col: &mut [T]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dxc[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A tape that binds every param as a constant; for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Free leaf; with `requires_grad` its gradient is readable through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad, None)
    }

    /// Leaf bound to `p`; tracked only when `p` is trainable.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        self.leaf(p.value.clone(), p.trainable && self.track_params, Some(p.id))
    }

    /// `sg[p]`: contributes its value, never receives gradient.
    pub fn stop_grad(&mut self, p: &Param<T>) -> Var {
        self.leaf(p.value.clone(), false, None)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// `x [M, N] + b [N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::shape("add_row_bias", xs, bs));
        }
        let n = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[i % n];
        }
        Ok(self.push(v, Op::AddRowBias(x, b), &[x, b]))
    }

    /// 3x3 convolution with zero padding 1. `w` is `[C_out, C_in * 9]`, `b` is `[C_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(bad("conv2d_3x3", "stride must be positive"));
        }
        let (n, c, h, wd) = nchw(self.value(x).shape(), "conv2d_3x3")?;
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != c * 9 {
            return Err(Error::shape("conv2d_3x3", self.value(x).shape(), ws));
        }
        let co = ws[0];
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [co] {
                return Err(Error::shape("conv2d_3x3 bias", ws, bs));
            }
        }
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * co * plane];
        let mut col = vec![T::zero(); c * 9 * plane];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for i in 0..n {
            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, stride, &mut col);
            gemm(
                MatRef::new(wdat, co, c * 9),
                MatRef::new(&col, c * 9, plane),
                T::zero(),
                &mut out[i * co * plane..(i + 1) * co * plane],
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (j, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[j % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let v = Tensor::new([n, co, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv3x3 { x, w, b, stride }, &inputs))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Normalizes each sample over all non-batch dims, then applies a per-channel affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.value(x).shape(), "layernorm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("layernorm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let eps = T::of(LAYERNORM_EPS);
        let m = T::from_usize(c * s).unwrap();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let xs = &xd[i * c * s..(i + 1) * c * s];
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for ci in 0..c {
                for j in 0..s {
                    let k = ci * s + j;
                    out[i * c * s + k] = (xs[k] - mean) * rstd * g[ci] + bt[ci];
                }
            }
        }
        let v = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = T::from_usize(av.numel()).unwrap();
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `x [N, C, ...] + b [N, C]`, broadcast over the spatial dims.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, s) = ncs(self.value(x).shape(), "add_channel_bias")?;
        if self.value(b).shape() != [n, c] {
            return Err(Error::shape("add_channel_bias", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (j, chunk) in v.data_mut().chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|e| *e += bias[j]);
        }
        Ok(self.push(v, Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (na, ca, spa) = ncs(sa, "concat_channels")?;
        let (nb, cb, spb) = ncs(sb, "concat_channels")?;
        if na != nb || spa != spb || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for i in 0..na {
            out.extend_from_slice(&ad[i * ca * spa..(i + 1) * ca * spa]);
            out.extend_from_slice(&bd[i * cb * spa..(i + 1) * cb * spa]);
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `[N, E]` -> `[N, E, h, w]` by repetition.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(bad("broadcast_spatial", format!("expected [N, E], got {s:?}")));
        }
        let (n, e) = (s[0], s[1]);
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(n * e * h * w);
        for &x in src {
            out.extend(std::iter::repeat_n(x, h * w));
        }
        let t = Tensor::new([n, e, h, w], out)?;
        Ok(self.push(t, Op::BroadcastSpatial(v), &[v]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x).shape(), "upsample2x")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new([n, c, h2, w2], out)?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    /// Row `n` of the output is the mean of `table[ids[n][..]]`.
    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let ts = self.value(table).shape();
        if ts.len() != 2 {
            return Err(bad("embed_mean", format!("table must be [V, E], got {ts:?}")));
        }
        let (vocab, e) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * e];
        for (row, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(bad("embed_mean", "empty id sequence"));
            }
            let inv = T::one() / T::from_usize(seq.len()).unwrap();
            for &id in seq {
                if id >= vocab {
                    return Err(bad("embed_mean", format!("id {id} outside vocabulary {vocab}")));
                }
                for k in 0..e {
                    out[row * e + k] += td[id * e + k] * inv;
                }
            }
        }
        let v = Tensor::new([ids.len(), e], out)?;
        Ok(self.push(v, Op::EmbedMean { table, ids }, &[table]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls.to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // A param bound more than once on the same tape sums its contributions.
        let mut by_param: HashMap<ParamId, Option<Tensor<T>>> = HashMap::new();
        for (node, g) in self.nodes.iter().zip(grads.iter()) {
            if let (Some(id), Some(g)) = (node.param, g) {
                accumulate(by_param.entry(id).or_default(), g.clone());
            }
        }
        let by_param = by_param
            .into_iter()
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        Ok(Gradients {
            by_var: grads,
            by_param,
        })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.scale(*s));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if rg(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(MatRef::new(g.data(), m, n), MatRef::new(bv.data(), k, n).t(), T::zero(), &mut ga);
                    accumulate(&mut grads[a.0], Tensor::new([m, k], ga)?);
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g.data(), m, n), T::zero(), &mut gb);
                    accumulate(&mut grads[b.0], Tensor::new([k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                if rg(a) {
                    accumulate(&mut grads[a.0], g.transpose()?);
                }
            }
            Op::AddRowBias(x, b) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if rg(b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % n] += v;
                    }
                    accumulate(&mut grads[b.0], Tensor::new([n], gb)?);
                }
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let stride = *stride;
                let xv = self.value(*x);
                let (n, c, h, wd) = nchw(xv.shape(), "conv2d_3x3")?;
                let wv = self.value(*w);
                let co = wv.dim(0);
                let plane = conv_out(h, stride) * conv_out(wd, stride);
                let gd = g.data();
                if let Some(b) = b {
                    if rg(b) {
                        let mut gb = vec![T::zero(); co];
                        for (j, chunk) in gd.chunks(plane).enumerate() {
                            gb[j % co] += chunk.iter().copied().sum::<T>();
                        }
                        accumulate(&mut grads[b.0], Tensor::new([co], gb)?);
                    }
                }
                let (need_w, need_x) = (rg(w), rg(x));
                if need_w || need_x {
                    let mut col = vec![T::zero(); c * 9 * plane];
                    let mut gw = vec![T::zero(); co * c * 9];
                    let mut gx = if need_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
                    let xd = xv.data();
                    for i in 0..n {
                        let go = &gd[i * co * plane..(i + 1) * co * plane];
                        if need_w {
                            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, stride, &mut col);
                            gemm(
                                MatRef::new(go, co, plane),
                                MatRef::new(&col, c * 9, plane).t(),
                                T::one(),
                                &mut gw,
                            );
                        }
                        if need_x {
                            gemm(
                                MatRef::new(wv.data(), co, c * 9).t(),
                                MatRef::new(go, co, plane),
                                T::zero(),
                                &mut col,
                            );
                            col2im(&col, c, h, wd, stride, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    }
                    if need_w {
                        accumulate(&mut grads[w.0], Tensor::new([co, c * 9], gw)?);
                    }
                    if need_x {
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), gx)?);
                    }
                }
            }
            Op::Silu(a) => {
                if rg(a) {
                    let d = g.zip_map(self.value(*a), "silu", |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    })?;
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let (n, c, s) = ncs(xv.shape(), "layernorm")?;
                let gam = self.value(*gamma).data();
                let xd = xv.data();
                let gd = g.data();
                let m = T::from_usize(c * s).unwrap();
                let mut ggam = vec![T::zero(); c];
                let mut gbet = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xd.len()];
                for i in 0..n {
                    let (mean, rstd) = stats[i];
                    let base = i * c * s;
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for ci in 0..c {
                        for j in 0..s {
                            let k = base + ci * s + j;
                            let xh = (xd[k] - mean) * rstd;
                            ggam[ci] += gd[k] * xh;
                            gbet[ci] += gd[k];
                            let dxh = gd[k] * gam[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                    }
                    for ci in 0..c {
                        for j in 0..s {
                            let k = base + ci * s + j;
                            let xh = (xd[k] - mean) * rstd;
                            let dxh = gd[k] * gam[ci];
                            gx[k] = rstd / m * (m * dxh - sum_dxh - xh * sum_dxh_xh);
                        }
                    }
                }
                if rg(x) {
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if rg(gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::new([c], ggam)?);
                }
                if rg(beta) {
                    accumulate(&mut grads[beta.0], Tensor::new([c], gbet)?);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.item() * T::of(2.0) / T::from_usize(av.numel()).unwrap();
                let d = av.zip_map(bv, "mse", |x, y| (x - y) * scale)?;
                if rg(b) {
                    accumulate(&mut grads[b.0], d.scale(-T::one()));
                }
                if rg(a) {
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Sum(a) => {
                if rg(a) {
                    let av = self.value(*a);
                    accumulate(&mut grads[a.0], Tensor::full(av.shape().to_vec(), g.item()));
                }
            }
            Op::AddChannelBias(x, b) => {
                if rg(x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if rg(b) {
                    let (n, c, s) = ncs(g.shape(), "add_channel_bias")?;
                    let gb: Vec<T> = g.data().chunks(s).map(|ch| ch.iter().copied().sum()).collect();
                    accumulate(&mut grads[b.0], Tensor::new([n, c], gb)?);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, s) = ncs(self.value(*a).shape(), "concat_channels")?;
                let cb = self.value(*b).dim(1);
                let gd = g.data();
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    ga.extend_from_slice(&gd[base..base + ca * s]);
                    gb.extend_from_slice(&gd[base + ca * s..base + (ca + cb) * s]);
                }
                if rg(a) {
                    accumulate(&mut grads[a.0], Tensor::new(self.value(*a).shape().to_vec(), ga)?);
                }
                if rg(b) {
                    accumulate(&mut grads[b.0], Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
            }
            Op::BroadcastSpatial(v) => {
                if rg(v) {
                    let vs = self.value(*v).shape().to_vec();
                    let hw = g.numel() / self.value(*v).numel();
                    let gv: Vec<T> = g.data().chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                    accumulate(&mut grads[v.0], Tensor::new(vs, gv)?);
                }
            }
            Op::Upsample2x(x) => {
                if rg(x) {
                    let (n, c, h, w) = nchw(self.value(*x).shape(), "upsample2x")?;
                    let (h2, w2) = (2 * h, 2 * w);
                    let gd = g.data();
                    let mut gx = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new([n, c, h, w], gx)?);
                }
            }
            Op::EmbedMean { table, ids } => {
                if rg(table) {
                    let ts = self.value(*table).shape().to_vec();
                    let e = ts[1];
                    let mut gt = vec![T::zero(); ts[0] * e];
                    for (row, seq) in ids.iter().enumerate() {
                        let inv = T::one() / T::from_usize(seq.len()).unwrap();
                        for &id in seq {
                            for k in 0..e {
                                gt[id * e + k] += g.data()[row * e + k] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[table.0], Tensor::new(ts, gt)?);
                }
            }
        }
        Ok(())
    }
}
