//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value. [`Tape::backward`] replays the nodes in reverse and
//! returns the gradient of a scalar loss with respect to every parameter
//! leaf registered with [`Tape::param`]. Constant leaves (observations,
//! frozen teacher outputs) never receive gradient.
//!
//! Ops are deliberately coarse (a whole dense layer, a whole mixture
//! log-density) so that graphs stay small and each backward rule can be
//! checked against central differences.

mod attention;
mod gradcheck;
mod kernels;

use std::collections::BTreeMap;

pub use attention::{attend_last, causal_self_attention, AttentionWeights};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradients, GradCheckReport};

use crate::error::{shape_err, Error, Result};
use crate::gmm;
use crate::tensor::Tensor;
use kernels::{gemm, Layout};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a learnable parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        act: Activation,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    GmmLogProb {
        logits: Var,
        means: Var,
        log_scales: Var,
        actions: Var,
    },
    GmmPathwise {
        means: Var,
        log_scales: Var,
        comp: Vec<usize>,
        eps: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the parameter leaves of a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn suffix_rows(shape: &[usize], inner: usize) -> usize {
    let n: usize = shape.iter().product();
    n.checked_div(inner).unwrap_or(0)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable parameter leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// `act(x W + b)` over the trailing axis of `x`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err(
                "dense",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err(
                    "dense",
                    format!("bias {:?} does not match output width {dout}", self.shape(b)),
                ));
            }
        }
        let rows = suffix_rows(&xs, din);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            Layout::row_major(din),
            self.value(w).data(),
            Layout::row_major(dout),
            &mut out,
            dout,
            1.0,
        );
        match act {
            Activation::Identity => {}
            Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Dense { x, w, b, act },
            ng,
        ))
    }

    /// Batched matrix product `[B,M,K] x [B,K,N]` (or `[B,N,K]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", format!("{as_:?} x {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(shape_err("bmm", format!("{as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let lb = if trans_b {
            Layout::transposed(k)
        } else {
            Layout::row_major(n)
        };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                Layout::row_major(k),
                &bd[i * k * n..],
                lb,
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data).unwrap(), op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data).unwrap(), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return Err(shape_err("add_broadcast", format!("{as_:?} + {bs:?}")));
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_exact_mut(inner) {
                chunk.iter_mut().zip(&bd).for_each(|(x, y)| *x += y);
            }
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Softmax over the trailing axis of `[..., L, L]` scores, with entries
    /// above the diagonal (future positions) masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        if c == 0 {
            return Err(shape_err("softmax", "empty last axis"));
        }
        let rows_per_block = if causal {
            if shape.len() < 2 || shape[shape.len() - 2] != c {
                return Err(shape_err(
                    "causal_softmax",
                    format!("expected square trailing axes, got {shape:?}"),
                ));
            }
            c
        } else {
            1
        };
        let mut data = self.value(a).data().to_vec();
        for (r, row) in data.chunks_exact_mut(c).enumerate() {
            let visible = if causal { r % rows_per_block + 1 } else { c };
            kernels::softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), ng))
    }

    /// Numerically stable `log Σ exp` over the trailing axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| shape_err("log_sum_exp", "scalar input"))?;
        if c == 0 {
            return Err(shape_err("log_sum_exp", "empty last axis"));
        }
        let data = self
            .value(a)
            .data()
            .chunks_exact(c)
            .map(kernels::log_sum_exp)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), data)?,
            Op::LogSumExp(a),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { a, axis, start }, ng))
    }

    /// Log-density of actions under diagonal Gaussian mixtures.
    ///
    /// `logits: [B,C]`, `means`/`log_scales: [B,C,A]`, `actions: [B,S,A]`,
    /// output `[B,S]`. Mixture weights are `softmax(logits)`.
    pub fn gmm_log_prob(
        &mut self,
        logits: Var,
        means: Var,
        log_scales: Var,
        actions: Var,
    ) -> Result<Var> {
        let (b, c, a) = self.check_gmm("gmm_log_prob", logits, means, log_scales)?;
        let acts = self.shape(actions).to_vec();
        if acts.len() != 3 || acts[0] != b || acts[2] != a {
            return Err(shape_err(
                "gmm_log_prob",
                format!("actions {acts:?} do not match head [{b}, _, {a}]"),
            ));
        }
        let s = acts[1];
        let (ld, md, sd, xd) = (
            self.value(logits).data(),
            self.value(means).data(),
            self.value(log_scales).data(),
            self.value(actions).data(),
        );
        let mut out = Vec::with_capacity(b * s);
        let mut log_w = vec![0.0; c];
        let mut comp = vec![0.0; c];
        for i in 0..b {
            gmm::log_softmax_into(&ld[i * c..(i + 1) * c], &mut log_w);
            let mu = &md[i * c * a..(i + 1) * c * a];
            let ls = &sd[i * c * a..(i + 1) * c * a];
            for j in 0..s {
                let x = &xd[(i * s + j) * a..(i * s + j + 1) * a];
                out.push(gmm::mixture_log_prob_row(&log_w, mu, ls, x, &mut comp));
            }
        }
        let ng = [logits, means, log_scales, actions]
            .iter()
            .any(|v| self.ng(*v));
        Ok(self.push(
            Tensor::new(vec![b, s], out)?,
            Op::GmmLogProb {
                logits,
                means,
                log_scales,
                actions,
            },
            ng,
        ))
    }

    /// Reparameterized mixture samples `mu[c] + exp(log_scale[c]) * eps`
    /// with component indices `comp: [B*S]` and noise `eps: [B*S*A]` held
    /// constant. Output `[B,S,A]`.
    pub fn gmm_pathwise(
        &mut self,
        means: Var,
        log_scales: Var,
        comp: Vec<usize>,
        eps: Vec<f64>,
    ) -> Result<Var> {
        self.same_shape("gmm_pathwise", means, log_scales)?;
        let ms = self.shape(means).to_vec();
        if ms.len() != 3 {
            return Err(shape_err("gmm_pathwise", format!("means {ms:?}")));
        }
        let (b, c, a) = (ms[0], ms[1], ms[2]);
        if b == 0 || !comp.len().is_multiple_of(b) || eps.len() != comp.len() * a {
            return Err(shape_err(
                "gmm_pathwise",
                format!("{} indices / {} noise values for batch {b}", comp.len(), eps.len()),
            ));
        }
        if let Some(bad) = comp.iter().find(|&&k| k >= c) {
            return Err(shape_err("gmm_pathwise", format!("component {bad} >= {c}")));
        }
        let s = comp.len() / b;
        let (md, sd) = (self.value(means).data(), self.value(log_scales).data());
        let mut out = Vec::with_capacity(b * s * a);
        for i in 0..b {
            for j in 0..s {
                let k = comp[i * s + j];
                let off = (i * c + k) * a;
                for d in 0..a {
                    out.push(md[off + d] + sd[off + d].exp() * eps[(i * s + j) * a + d]);
                }
            }
        }
        let ng = self.ng(means) || self.ng(log_scales);
        Ok(self.push(
            Tensor::new(vec![b, s, a], out)?,
            Op::GmmPathwise {
                means,
                log_scales,
                comp,
                eps,
            },
            ng,
        ))
    }

    fn check_gmm(
        &self,
        op: &'static str,
        logits: Var,
        means: Var,
        log_scales: Var,
    ) -> Result<(usize, usize, usize)> {
        let ls = self.shape(logits);
        let ms = self.shape(means);
        if ls.len() != 2 || ms.len() != 3 || ms[..2] != *ls || self.shape(log_scales) != ms {
            return Err(shape_err(
                op,
                format!(
                    "logits {ls:?}, means {ms:?}, log_scales {:?}",
                    self.shape(log_scales)
                ),
            ));
        }
        Ok((ms[0], ms[1], ms[2]))
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf.
    ///
    /// Parameters that the loss does not depend on get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        let Some(l) = lv.item() else {
            return Err(shape_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        };
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: "loss passed to backward".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut out = Gradients::default();
        for &(id, v) in &self.params {
            let shape = self.shape(v).to_vec();
            let data = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
            let t = Tensor::new(shape, data)?;
            match out.grads.get_mut(&id) {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(x, y)| *x += y),
                None => {
                    out.grads.insert(id, t);
                }
            }
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b, act } => {
                let din = self.shape(*w)[0];
                let dout = self.shape(*w)[1];
                let rows = y.len() / dout.max(1);
                let dz: Vec<f64> = match act {
                    Activation::Identity => g.to_vec(),
                    Activation::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Relu => g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(
                        din,
                        rows,
                        dout,
                        self.value(*x).data(),
                        Layout::transposed(din),
                        &dz,
                        Layout::row_major(dout),
                        gw,
                        dout,
                        1.0,
                    );
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in dz.chunks_exact(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    }
                }
                let wd = self.value(*w).data();
                if let Some(gx) = self.acc(grads, *x) {
                    gemm(
                        rows,
                        dout,
                        din,
                        &dz,
                        Layout::row_major(dout),
                        wd,
                        Layout::transposed(dout),
                        gx,
                        din,
                        1.0,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.value.shape()[2];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC B^T
                    let lb = if *trans_b {
                        Layout::row_major(k)
                    } else {
                        Layout::transposed(n)
                    };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            Layout::row_major(n),
                            &bd[i * k * n..],
                            lb,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k,
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..batch {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dC^T A
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                Layout::transposed(n),
                                &ad[i * m * k..],
                                Layout::row_major(k),
                                dst,
                                k,
                                1.0,
                            );
                        } else {
                            // dB[k,n] = A^T dC
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..],
                                Layout::transposed(k),
                                &g[i * m * n..],
                                Layout::row_major(n),
                                dst,
                                n,
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gi * bi;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let inner = self.value(*b).numel();
                if let Some(gb) = self.acc(grads, *b) {
                    if inner > 0 {
                        for chunk in g.chunks_exact(inner) {
                            gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi;
                    }
                }
            }
            Op::Log(a) => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(ad) {
                        *x += gi / ai;
                    }
                }
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(ad) {
                        *x += 2.0 * gi * ai;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gx, gy), yy) in ga
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                        for i in 0..c {
                            gx[i] += yy[i] * (gy[i] - dot);
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let av = self.value(*a);
                let c = av.last_dim();
                let ad = av.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (gx, xs)) in ga.chunks_exact_mut(c).zip(ad.chunks_exact(c)).enumerate() {
                        for i in 0..c {
                            gx[i] += g[r] * (xs[i] - y[r]).exp();
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    if let Some(gp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let ad = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), ai) in ga.iter_mut().zip(g).zip(ad) {
                        if *ai >= *lo && *ai <= *hi {
                            *x += gi;
                        }
                    }
                }
            }
            Op::GmmLogProb {
                logits,
                means,
                log_scales,
                actions,
            } => self.backward_gmm_log_prob(*logits, *means, *log_scales, *actions, g, grads),
            Op::GmmPathwise {
                means,
                log_scales,
                comp,
                eps,
            } => {
                let ms = self.shape(*means);
                let (b, c, a) = (ms[0], ms[1], ms[2]);
                let s = comp.len() / b;
                if let Some(gm) = self.acc(grads, *means) {
                    for i in 0..b {
                        for j in 0..s {
                            let off = (i * c + comp[i * s + j]) * a;
                            for d in 0..a {
                                gm[off + d] += g[(i * s + j) * a + d];
                            }
                        }
                    }
                }
                let sd = self.value(*log_scales).data();
                if let Some(gs) = self.acc(grads, *log_scales) {
                    for i in 0..b {
                        for j in 0..s {
                            let off = (i * c + comp[i * s + j]) * a;
                            for d in 0..a {
                                let k = (i * s + j) * a + d;
                                gs[off + d] += g[k] * sd[off + d].exp() * eps[k];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_gmm_log_prob(
        &self,
        logits: Var,
        means: Var,
        log_scales: Var,
        actions: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ms = self.shape(means);
        let (b, c, a) = (ms[0], ms[1], ms[2]);
        let s = self.shape(actions)[1];
        let ld = self.value(logits).data();
        let md = self.value(means).data();
        let sd = self.value(log_scales).data();
        let xd = self.value(actions).data();

        let mut d_logits = vec![0.0; b * c];
        let mut d_means = vec![0.0; b * c * a];
        let mut d_scales = vec![0.0; b * c * a];
        let mut d_actions = vec![0.0; b * s * a];
        let mut log_w = vec![0.0; c];
        let mut comp = vec![0.0; c];
        for i in 0..b {
            gmm::log_softmax_into(&ld[i * c..(i + 1) * c], &mut log_w);
            let mu = &md[i * c * a..(i + 1) * c * a];
            let ls = &sd[i * c * a..(i + 1) * c * a];
            for j in 0..s {
                let gij = g[i * s + j];
                if gij == 0.0 {
                    continue;
                }
                let x = &xd[(i * s + j) * a..(i * s + j + 1) * a];
                let total = gmm::mixture_log_prob_row(&log_w, mu, ls, x, &mut comp);
                for k in 0..c {
                    let resp = (comp[k] - total).exp();
                    d_logits[i * c + k] += gij * (resp - log_w[k].exp());
                    for d in 0..a {
                        let off = k * a + d;
                        let inv = (-ls[off]).exp();
                        let z = (x[d] - mu[off]) * inv;
                        d_means[i * c * a + off] += gij * resp * z * inv;
                        d_scales[i * c * a + off] += gij * resp * (z * z - 1.0);
                        d_actions[(i * s + j) * a + d] -= gij * resp * z * inv;
                    }
                }
            }
        }
        for (v, d) in [
            (logits, d_logits),
            (means, d_means),
            (log_scales, d_scales),
            (actions, d_actions),
        ] {
            if let Some(gv) = self.acc(grads, v) {
                gv.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
            }
        }
    }
}

#[cfg(test)]
mod tests;
