//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every op applied to it.
//! [`Graph::backward`] walks the tape in reverse and returns one gradient
//! tensor per stored parameter. Graphs built with [`Graph::inference`] record
//! nothing and are used for stop-gradient (teacher) evaluations.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

use kernels::{col2im, gemm, gemm_t, im2col};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Whether `other` has the same names and shapes.
    pub fn congruent(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        ks: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    AddChannel {
        x: Var,
        bias: Var,
    },
    MulBroadcast {
        x: Var,
        m: Var,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Reshape(Var),
    PseudoHuber {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
        c: T,
    },
    Mean(Var),
}

enum NodeValue<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: NodeValue<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph that records ops for [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
        }
    }

    /// A graph whose values are all treated as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(params)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: NodeValue::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: NodeValue::Param(id),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies row `i` (leading axis) by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: &[T]) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != s.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} row scales for leading dim {}",
                s.len(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        for (i, &si) in s.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= si;
            }
        }
        Ok(self.push(out, Op::ScaleRows(a, s.to_vec()), &[a]))
    }

    /// `x·wᵀ + b` for `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch(format!("linear {xs:?} x {ws:?}")));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        gemm_t(
            batch,
            fan_out,
            fan_in,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != fan_out {
                return Err(Error::ShapeMismatch("linear bias".into()));
            }
            for row in out.chunks_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::from_vec(&[batch, fan_out], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// Stride-1 "same" convolution, `x: (B, Cin, H, W)`, `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d {xs:?} * {ws:?}")));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, ks) = (ws[0], ws[2]);
        let hw = h * wd;
        let kdim = cin * ks * ks;
        let mut out = vec![T::zero(); batch * cout * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut col = if ks > 1 { vec![T::zero(); kdim * hw] } else { Vec::new() };
        for n in 0..batch {
            let xn = &xv[n * cin * hw..(n + 1) * cin * hw];
            let src = if ks > 1 {
                im2col(xn, cin, h, wd, ks, &mut col);
                &col[..]
            } else {
                xn
            };
            gemm(cout, hw, kdim, wv, src, &mut out[n * cout * hw..(n + 1) * cout * hw]);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != cout {
                return Err(Error::ShapeMismatch("conv bias".into()));
            }
            for plane in out.chunks_mut(hw).enumerate() {
                let bv = bias[plane.0 % cout];
                for v in plane.1 {
                    *v += bv;
                }
            }
        }
        let out = Tensor::from_vec(&[batch, cout, h, wd], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv { x, w, b, ks }, &parents))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("avg_pool2 on {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * oh * ow];
        let quarter = T::of(0.25);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("upsample2 on {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        Ok(self.push(out, Op::Upsample2(x), &[x]))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (la, lb) = (sa[1] * inner, sb[1] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for n in 0..sa[0] {
            out.extend_from_slice(&av[n * la..(n + 1) * la]);
            out.extend_from_slice(&bv[n * lb..(n + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Concat(a, b), &[a, b]))
    }

    /// Adds a per-sample, per-channel bias `(B, C)` to `x: (B, C, ...)`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.len() < 2 || bs != xs[..2] {
            return Err(Error::ShapeMismatch(format!("add_channel {xs:?} + {bs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (plane, &b) in out.data_mut().chunks_mut(inner).zip(bv) {
            for v in plane {
                *v += b;
            }
        }
        Ok(self.push(out, Op::AddChannel { x, bias }, &[x, bias]))
    }

    /// Multiplies `x: (B, C, H, W)` by a single-channel map `m: (B, 1, H, W)`.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        if xs.len() != 4 || ms.len() != 4 || ms[1] != 1 || xs[0] != ms[0] || xs[2..] != ms[2..] {
            return Err(Error::ShapeMismatch(format!("mul_broadcast {xs:?} * {ms:?}")));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let mv = self.value(m).data();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let mp = &mv[(i / xs[1]) * hw..(i / xs[1] + 1) * hw];
            for (v, &mm) in plane.iter_mut().zip(mp) {
                *v *= mm;
            }
        }
        Ok(self.push(out, Op::MulBroadcast { x, m }, &[x, m]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Group normalization over `(C/groups, spatial...)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::ShapeMismatch(format!(
                "group_norm with {groups} groups on {xs:?}"
            )));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch("group_norm affine".into()));
        }
        let inner: usize = xs[2..].iter().product();
        let per_group = c / groups * inner;
        let eps = T::of(1e-5);
        let mut out = self.value(x).clone();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut stats = Vec::with_capacity(xs[0] * groups);
        for (gi, chunk) in out.data_mut().chunks_mut(per_group).enumerate() {
            let count = T::of_usize(per_group);
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            let c0 = (gi % groups) * (c / groups);
            for (ci, plane) in chunk.chunks_mut(inner).enumerate() {
                let (g, b) = (gv[c0 + ci], bv[c0 + ci]);
                for v in plane {
                    *v = (*v - mean) * rstd * g + b;
                }
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batched matrix product of 3-d tensors with optional transposes of the
    /// trailing two axes.
    pub fn bmm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch(format!("bmm {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::ShapeMismatch(format!("bmm inner {k} vs {kb}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); sa[0] * m * n];
        for i in 0..sa[0] {
            gemm_t(
                m,
                n,
                k,
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::from_vec(&[sa[0], m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let last = *self.shape(x).last().unwrap_or(&1);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Weighted batch mean of `sqrt(‖pred_b − target_b‖² + c²) − c`. The
    /// target is a constant: no gradient flows into it.
    pub fn pseudo_huber(&mut self, pred: Var, target: &Tensor<T>, weights: &[T], c: T) -> Result<Var> {
        let p = self.value(pred);
        p.check_same_shape(target)?;
        if p.rows() != weights.len() || weights.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for batch of {}",
                weights.len(),
                p.rows()
            )));
        }
        let mut total = T::zero();
        for (i, &w) in weights.iter().enumerate() {
            let sq: T = p
                .row(i)
                .iter()
                .zip(target.row(i))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            total += w * pseudo_huber_from_sq(sq, c);
        }
        let out = Tensor::from_vec(&[1], vec![total / T::of_usize(weights.len())])?;
        Ok(self.push(
            out,
            Op::PseudoHuber {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
                c,
            },
            &[pred],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::full(&[1], v.sum() / T::of_usize(v.numel().max(1)));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Reverse sweep from the scalar `loss`. Returns one gradient per stored
    /// parameter (zeros for parameters that did not take part).
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut param_grads = self.params.zeros_like();
        if !self.nodes[loss.0].requires_grad {
            return Ok(param_grads);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut param_grads)?;
        }
        Ok(param_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => param_grads[id.0].add_assign(&g),
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::ScaleRows(a, s) => {
                let mut ga = g;
                for (r, &si) in s.iter().enumerate() {
                    for v in ga.row_mut(r) {
                        *v *= si;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); batch * fan_in];
                    gemm(batch, fan_in, fan_out, g.data(), self.value(*w).data(), &mut gx);
                    self.accumulate(grads, *x, Tensor::from_vec(xs, gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); fan_out * fan_in];
                    gemm_t(
                        fan_out,
                        fan_in,
                        batch,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut gw,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(ws, gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); fan_out];
                        for row in g.data().chunks(fan_out) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[fan_out], gb)?);
                    }
                }
            }
            Op::Conv { x, w, b, ks } => self.conv_backward(*x, *w, *b, *ks, &g, grads)?,
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(s);
                let quarter = T::of(0.25);
                for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                let mut gx = Tensor::zeros(s);
                for (p, plane) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            plane[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let inner: usize = sa[2..].iter().product();
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * la);
                let mut gb = Vec::with_capacity(sb[0] * lb);
                for row in g.data().chunks(la + lb) {
                    ga.extend_from_slice(&row[..la]);
                    gb.extend_from_slice(&row[la..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&sa, ga)?);
                self.accumulate(grads, *b, Tensor::from_vec(&sb, gb)?);
            }
            Op::AddChannel { x, bias } => {
                if self.wants(*bias) {
                    let s = self.shape(*x);
                    let inner: usize = s[2..].iter().product();
                    let gb: Vec<T> = g
                        .data()
                        .chunks(inner)
                        .map(|plane| plane.iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *bias, Tensor::from_vec(&s[..2], gb)?);
                }
                self.accumulate(grads, *x, g);
            }
            Op::MulBroadcast { x, m } => {
                let xs = self.shape(*x).to_vec();
                let hw = xs[2] * xs[3];
                let c = xs[1];
                let mv = self.value(*m).data();
                if self.wants(*m) {
                    let xv = self.value(*x).data();
                    let mut gm = Tensor::zeros(self.shape(*m));
                    for (pi, (gp, xp)) in g.data().chunks(hw).zip(xv.chunks(hw)).enumerate() {
                        let n = pi / c;
                        let dst = &mut gm.data_mut()[n * hw..(n + 1) * hw];
                        for ((d, &gv), &xv) in dst.iter_mut().zip(gp).zip(xp) {
                            *d += gv * xv;
                        }
                    }
                    self.accumulate(grads, *m, gm);
                }
                if self.wants(*x) {
                    let mut gx = g;
                    for (pi, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let n = pi / c;
                        for (v, &mm) in plane.iter_mut().zip(&mv[n * hw..(n + 1) * hw]) {
                            *v *= mm;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * (s + xv * s * (T::one() - s))
                })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx = g.zip_map(self.value(*x), |gv, xv| two * gv * xv)?;
                self.accumulate(grads, *x, gx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, stats, &g, grads)?,
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); sa[0] * m * k];
                    for i in 0..sa[0] {
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            gemm_t(k, m, n, bi, *tb, gc, true, dst);
                        } else {
                            gemm_t(m, k, n, gc, false, bi, !*tb, dst);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); sb[0] * k * n];
                    for i in 0..sb[0] {
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm_t(n, k, m, gc, true, ai, *ta, dst);
                        } else {
                            gemm_t(k, n, m, ai, !*ta, gc, false, dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&sb, gb)?);
                }
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().unwrap_or(&1);
                let mut gx = g;
                for (grow, yrow) in gx.data_mut().chunks_mut(last).zip(out.data().chunks(last)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx);
            }
            Op::PseudoHuber {
                pred,
                target,
                weights,
                c,
            } => {
                let p = self.value(*pred);
                let scale = g.data()[0] / T::of_usize(weights.len());
                let mut gp = Tensor::zeros(p.shape());
                for (r, &w) in weights.iter().enumerate() {
                    let (pr, tr) = (p.row(r), target.row(r));
                    let sq: T = pr.iter().zip(tr).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    let root = (sq + *c * *c).sqrt();
                    if root == T::zero() {
                        continue;
                    }
                    let coef = scale * w / root;
                    for ((d, &a), &b) in gp.row_mut(r).iter_mut().zip(pr).zip(tr) {
                        *d = coef * (a - b);
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = T::of_usize(self.value(*x).numel().max(1));
                self.accumulate(grads, *x, Tensor::full(s, g.data()[0] / n));
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        ks: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let hw = h * wd;
        let kdim = cin * ks * ks;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = vec![T::zero(); cout];
                for (pi, plane) in gd.chunks(hw).enumerate() {
                    gb[pi % cout] += plane.iter().copied().sum::<T>();
                }
                self.accumulate(grads, b, Tensor::from_vec(&[cout], gb)?);
            }
        }
        if self.wants(w) {
            let mut gw = vec![T::zero(); cout * kdim];
            let mut col = if ks > 1 { vec![T::zero(); kdim * hw] } else { Vec::new() };
            for n in 0..batch {
                let xn = &xv[n * cin * hw..(n + 1) * cin * hw];
                let src = if ks > 1 {
                    im2col(xn, cin, h, wd, ks, &mut col);
                    &col[..]
                } else {
                    xn
                };
                gemm_t(
                    cout,
                    kdim,
                    hw,
                    &gd[n * cout * hw..(n + 1) * cout * hw],
                    false,
                    src,
                    true,
                    &mut gw,
                );
            }
            self.accumulate(grads, w, Tensor::from_vec(&ws, gw)?);
        }
        if self.wants(x) {
            let wt = kernels::transpose(cout, kdim, wv);
            let mut gx = vec![T::zero(); batch * cin * hw];
            let mut col = vec![T::zero(); kdim * hw];
            for n in 0..batch {
                col.fill(T::zero());
                gemm(kdim, hw, cout, &wt, &gd[n * cout * hw..(n + 1) * cout * hw], &mut col);
                let dst = &mut gx[n * cin * hw..(n + 1) * cin * hw];
                if ks > 1 {
                    col2im(&col, cin, h, wd, ks, dst);
                } else {
                    dst.copy_from_slice(&col);
                }
            }
            self.accumulate(grads, x, Tensor::from_vec(&xs, gx)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(T, T)],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        let cg = c / groups;
        let inner: usize = xs[2..].iter().product();
        let per_group = cg * inner;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        let mut gx = vec![T::zero(); xv.len()];
        let count = T::of_usize(per_group);
        for (gi, &(mean, rstd)) in stats.iter().enumerate() {
            let base = gi * per_group;
            let c0 = (gi % groups) * cg;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let gam = gv[c0 + ci];
                for j in 0..inner {
                    let idx = base + ci * inner + j;
                    let xhat = (xv[idx] - mean) * rstd;
                    let dy = g.data()[idx];
                    ggamma[c0 + ci] += dy * xhat;
                    gbeta[c0 + ci] += dy;
                    let dxhat = dy * gam;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / count;
            let mean_dxhat_xhat = sum_dxhat_xhat / count;
            for ci in 0..cg {
                let gam = gv[c0 + ci];
                for j in 0..inner {
                    let idx = base + ci * inner + j;
                    let xhat = (xv[idx] - mean) * rstd;
                    let dxhat = g.data()[idx] * gam;
                    gx[idx] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        self.accumulate(grads, x, Tensor::from_vec(&xs, gx)?);
        self.accumulate(grads, gamma, Tensor::from_vec(&[c], ggamma)?);
        self.accumulate(grads, beta, Tensor::from_vec(&[c], gbeta)?);
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `sqrt(sq + c²) − c`, written to avoid cancellation when `sq ≪ c²`.
#[inline]
pub(crate) fn pseudo_huber_from_sq<T: Real>(sq: T, c: T) -> T {
    let denom = (sq + c * c).sqrt() + c;
    if denom == T::zero() {
        T::zero()
    } else {
        sq / denom
    }
}

#[cfg(test)]
mod tests;
