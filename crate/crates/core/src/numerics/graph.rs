use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttnGeom, ConvGeom};
use crate::numerics::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation implemented outside the core kernel set.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    /// Gradients for each input given the output gradient. Entries for inputs
    /// that do not need a gradient may be empty.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Vec<T>>;
}

/// Whether batch normalization uses batch statistics or stored running ones.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train { eps: T },
    Infer { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch moments from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        geom: ConvGeom,
        batch: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Attention {
        qkv: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec_unchecked(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs 2 axes, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_data(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec_unchecked(&[c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec_unchecked(&shape, out)?, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// position embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec_unchecked(&shape, out)?, Op::AddBroadcast(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec_unchecked(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        let t = Tensor::from_vec_unchecked(&shape, out).expect("same shape");
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize_lossy(t.numel());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::dim(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(a).data();
        let inv = T::one() / T::from_usize_lossy(len);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec_unchecked(&new_shape, out)?,
            Op::MeanAxis { input: a, axis },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        self.unary(a, out, Op::Relu(a))
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        self.unary(a, out, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.value(a).last_dim();
        let out = kernels::softmax_rows(self.value(a).data(), width);
        Ok(self.unary(a, out, Op::Softmax(a)))
    }

    fn unary(&mut self, a: Var, out: Vec<T>, op: Op<T>) -> Var {
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        let t = Tensor::from_vec_unchecked(&shape, out).expect("same shape");
        self.push(t, op, rg)
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (out, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec_unchecked(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Cross-correlation of `[c, h, w]` or `[n, c, h, w]` input with a
    /// `[c_out, c_in, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (batch, c, h, w, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => return Err(Error::dim(format!("conv2d input {xs:?}"))),
        };
        if ws.len() != 4 || ws[1] != c {
            return Err(Error::dim(format!("conv2d weight {ws:?} for {c} input channels")));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let h_out = ConvGeom::out_extent(h, kh, stride, padding);
        let w_out = ConvGeom::out_extent(w, kw, stride, padding);
        let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
            return Err(Error::dim(format!(
                "conv2d output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        };
        let geom = ConvGeom {
            c_in: c,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(weight).data(), batch, &geom);
        let shape = if batched {
            vec![batch, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(
            Tensor::from_vec_unchecked(&shape, out)?,
            Op::Conv2d {
                x,
                weight,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Batch norm over axis 1 of `[n, c, ...]`. Training mode also returns
    /// the batch moments so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch_norm input {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "batch_norm affine {:?} for {c} channels",
                self.shape(gamma)
            )));
        }
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), n, c, spatial);
                (m, v, eps, true)
            }
            BnMode::Infer { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = kernels::channel_normalize(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &invstd,
            n,
            spatial,
        );
        let moments = train.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count: n * spatial,
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_vec_unchecked(&xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
            rg,
        );
        Ok((v, moments))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec_unchecked(&out_shape, out)?,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over packed projections
    /// `qkv: [n, p, 3 * dim]` laid out as `[q | k | v]`; returns `[n, p, dim]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(3) {
            return Err(Error::dim(format!("attention input {s:?}")));
        }
        let dim = s[2] / 3;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::dim(format!("width {dim} not divisible by {heads} heads")));
        }
        let geom = AttnGeom {
            batch: s[0],
            tokens: s[1],
            dim,
            heads,
        };
        let (out, probs) = kernels::attention_forward(self.value(qkv).data(), &geom);
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::from_vec_unchecked(&[s[0], s[1], dim], out)?,
            Op::Attention { qkv, geom, probs },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit L2 norm. An all-zero row is a
    /// degenerate input.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let width = self.value(a).last_dim();
        let data = self.value(a).data();
        let mut out = vec![T::zero(); data.len()];
        let mut norms = Vec::with_capacity(data.len() / width);
        for (r, (src, dst)) in data.chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let norm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric {
                    location: format!("l2_normalize row {r}"),
                    detail: format!("degenerate row norm {norm}"),
                });
            }
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s / norm;
            }
            norms.push(norm);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_vec_unchecked(&shape, out)?,
            Op::L2Normalize { input: a, norms },
            rg,
        ))
    }

    /// Records an externally implemented op whose forward value is `output`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar `loss`. Every node requiring a gradient,
    /// including disconnected leaves, ends up with one (zeros if unreached).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; call reset_grads first",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::contract("loss does not depend on any trainable input"));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let mut pending: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        MatRef::row_major(g, m, n),
                        MatRef::row_major(tb.data(), k, n).t(),
                        T::zero(),
                        MatMut::row_major(&mut ga, m, k),
                    );
                    pending.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        MatRef::row_major(ta.data(), m, k).t(),
                        MatRef::row_major(g, m, n),
                        T::zero(),
                        MatMut::row_major(&mut gb, k, n),
                    );
                    pending.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                pending.push((*a, transpose_data(g, s[0], s[1])));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.to_vec()));
            }
            Op::AddBroadcast(a, b) => {
                pending.push((*a, g.to_vec()));
                if rg(*b) {
                    let inner = val(*b).numel();
                    let mut gb = vec![T::zero(); inner];
                    for chunk in g.chunks(inner) {
                        for (d, &s) in gb.iter_mut().zip(chunk) {
                            *d = *d + s;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    pending.push((*a, zip_map(g, val(*b).data(), |x, y| x * y)));
                }
                if rg(*b) {
                    pending.push((*b, zip_map(g, val(*a).data(), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                pending.push((*a, g.iter().map(|&x| x * *c).collect()));
            }
            Op::Sum(a) => {
                pending.push((*a, vec![g[0]; val(*a).numel()]));
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                pending.push((*a, vec![g[0] / T::from_usize_lossy(n); n]));
            }
            Op::MeanAxis { input, axis } => {
                let shape = val(*input).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let inv = T::one() / T::from_usize_lossy(len);
                let mut gi = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut gi[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = s * inv;
                        }
                    }
                }
                pending.push((*input, gi));
            }
            Op::Relu(a) => {
                let gi = zip_map(g, val(*a).data(), |gv, x| if x > T::zero() { gv } else { T::zero() });
                pending.push((*a, gi));
            }
            Op::Gelu(a) => {
                let gi = zip_map(g, val(*a).data(), |gv, x| gv * kernels::gelu_grad(x));
                pending.push((*a, gi));
            }
            Op::Softmax(a) => {
                let width = node.value.last_dim();
                pending.push((*a, kernels::softmax_rows_backward(node.value.data(), g, width)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(val(*x).data(), val(*gamma).data(), mean, rstd, g);
                pending.push((*x, dx));
                pending.push((*gamma, dg));
                pending.push((*beta, db));
            }
            Op::Conv2d {
                x,
                weight,
                geom,
                batch,
            } => {
                let (dx, dw) = kernels::conv2d_backward(
                    val(*x).data(),
                    val(*weight).data(),
                    g,
                    *batch,
                    geom,
                    rg(*x),
                    rg(*weight),
                );
                if rg(*x) {
                    pending.push((*x, dx));
                }
                if rg(*weight) {
                    pending.push((*weight, dw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let xs = val(*x).shape();
                let spatial: usize = xs[2..].iter().product();
                let (dx, dg, db) = kernels::batch_norm_backward(
                    val(*x).data(),
                    val(*gamma).data(),
                    mean,
                    invstd,
                    g,
                    xs[0],
                    spatial,
                    *train,
                );
                pending.push((*x, dx));
                pending.push((*gamma, dg));
                pending.push((*beta, db));
            }
            Op::Reshape(a) => pending.push((*a, g.to_vec())),
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                pending.push((*input, permute_data(g, node.value.shape(), &inverse)));
            }
            Op::Attention { qkv, geom, probs } => {
                pending.push((*qkv, kernels::attention_backward(val(*qkv).data(), probs, g, geom)));
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let width = node.value.last_dim();
                let mut gi = vec![T::zero(); y.len()];
                for (r, ((yr, gr), out)) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(gi.chunks_mut(width))
                    .enumerate()
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                pending.push((*input, gi));
            }
            Op::Custom { inputs, op } => {
                let in_vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&in_vals, &node.value, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if rg(v) {
                        assert_eq!(gv.len(), val(v).numel(), "custom op {} gradient size", op.name());
                        pending.push((v, gv));
                    }
                }
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_data<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
