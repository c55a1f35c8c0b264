//! Tape-based reverse-mode differentiation over the kernel set.
//!
//! A [`Tape`] owns every intermediate value of a forward pass. Operations
//! append nodes and return [`Var`] handles; [`Tape::backward`] walks the tape
//! once in reverse and returns gradients for the trainable leaves. Gradients
//! of interior nodes are dropped as soon as their consumers are processed,
//! which keeps the peak memory of a backward pass close to the forward pass.
//!
//! The attention ops are fused nodes: they keep only the softmax outputs they
//! need for the reverse pass (O(N·M) per head for the latent mixer, O(N²) per
//! head for quadratic attention) instead of leaving every intermediate on the
//! tape.

use crate::error::{Error, Result};
use crate::linalg::{self, gelu_grad_scalar};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T: Scalar> {
    Leaf {
        trainable: bool,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    /// C = A · Bᵀ.
    MatMulNt {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRowBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    RowSoftmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: usize,
    },
    ColSlice {
        x: usize,
        start: usize,
    },
    ColConcat {
        parts: Vec<usize>,
    },
    SumAll {
        x: usize,
    },
    /// ‖pred − target‖₂ / ‖target‖₂ over the flattened tensors.
    RelativeL2 {
        pred: usize,
        target: Tensor<T>,
        diff_norm: T,
        target_norm: T,
    },
    /// Latent-token mixer over H heads: two chained softmax attentions with
    /// M latent queries. Saves the encode probabilities (M×N), decode
    /// probabilities (N×M) and latent summaries (M×D) per head.
    LatentMix {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        enc: Vec<Tensor<T>>,
        dec: Vec<Tensor<T>>,
        latent: Vec<Tensor<T>>,
    },
    /// Quadratic softmax attention over H heads; saves the N×N probability
    /// matrix per head.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        scale: T,
        probs: Vec<Tensor<T>>,
    },
}

/// Gradients of trainable leaves, indexed by the [`Var`] returned at leaf
/// creation. Interior-node gradients are not retained.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape when the loss did not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: `backward` retains its gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    /// Non-trainable input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt { a: a.0, b: b.0 }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::sub(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = linalg::hadamard(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = linalg::add_row_bias(self.value(x), self.value(bias))?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias { x: x.0, bias: bias.0 }, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = linalg::scale(self.value(x), s);
        let ng = self.needs(x);
        self.push(value, Op::Scale { x: x.0, s }, ng)
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let value = linalg::row_softmax(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::RowSoftmax { x: x.0 }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) =
            linalg::layer_norm_parts(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = linalg::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::Gelu { x: x.0 }, ng)
    }

    /// Columns `[start, start + len)` of a rank-2 node.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = col_block(self.value(x), start, len)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::ColSlice { x: x.0, start }, ng))
    }

    /// Concatenates rank-2 nodes with equal row counts along columns.
    pub fn col_concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("col_concat", "no parts"));
        }
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(&[n, total]);
        let mut start = 0;
        for p in parts {
            let part = self.value(*p);
            if part.rows() != n {
                return Err(Error::shape("col_concat", "row counts differ"));
            }
            scatter_col_block(&mut value, start, part);
            start += part.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            value,
            Op::ColConcat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(linalg::sum_all(self.value(x)));
        let ng = self.needs(x);
        self.push(value, Op::SumAll { x: x.0 }, ng)
    }

    /// Relative L2 error against a fixed target; the node value is a scalar.
    pub fn relative_l2(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "relative_l2",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let target_norm = target.frobenius_norm();
        if target_norm == 0.0 {
            return Err(Error::invalid_value("relative_l2", "target norm is zero"));
        }
        let mut diff_sq = 0.0_f64;
        for (a, b) in p.data().iter().zip(target.data()) {
            let d = a.to_f64() - b.to_f64();
            diff_sq += d * d;
        }
        let diff_norm = diff_sq.sqrt();
        let value = Tensor::scalar(T::from_f64(diff_norm / target_norm));
        let ng = self.needs(pred);
        Ok(self.push(
            value,
            Op::RelativeL2 {
                pred: pred.0,
                target: target.clone(),
                diff_norm: T::from_f64(diff_norm),
                target_norm: T::from_f64(target_norm),
            },
            ng,
        ))
    }

    /// Latent-token mixing: latent queries `q` (M×C) against keys/values
    /// (N×C), split over `heads` column blocks. Returns the merged N×C
    /// result.
    pub fn latent_mix(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = check_mix_shapes("latent_mix", qv, kv, vv, heads)?;
        let d = c / heads;
        let n = kv.rows();
        let mut out = Tensor::zeros(&[n, c]);
        let mut enc = Vec::with_capacity(heads);
        let mut dec = Vec::with_capacity(heads);
        let mut latent = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = col_block(qv, h * d, d)?;
            let kh = col_block(kv, h * d, d)?;
            let vh = col_block(vv, h * d, d)?;
            let scores = linalg::matmul_nt(&qh, &kh)?;
            let p = linalg::row_softmax(&scores)?;
            let z = linalg::matmul(&p, &vh)?;
            let r = linalg::row_softmax(&linalg::transpose(&scores)?)?;
            let yh = linalg::matmul(&r, &z)?;
            scatter_col_block(&mut out, h * d, &yh);
            enc.push(p);
            dec.push(r);
            latent.push(z);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::LatentMix {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                enc,
                dec,
                latent,
            },
            ng,
        ))
    }

    /// Quadratic softmax attention over head column blocks of N×C inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: T) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = check_mix_shapes("attention", qv, kv, vv, heads)?;
        if qv.rows() != kv.rows() {
            return Err(Error::shape(
                "attention",
                format!("{} query rows vs {} key rows", qv.rows(), kv.rows()),
            ));
        }
        let d = c / heads;
        let n = kv.rows();
        let mut out = Tensor::zeros(&[n, c]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = col_block(qv, h * d, d)?;
            let kh = col_block(kv, h * d, d)?;
            let vh = col_block(vv, h * d, d)?;
            let mut scores = linalg::matmul_nt(&qh, &kh)?;
            if scale != T::ONE {
                for s in scores.data_mut() {
                    *s *= scale;
                }
            }
            let p = linalg::row_softmax(&scores)?;
            drop(scores);
            let yh = linalg::matmul(&p, &vh)?;
            scatter_col_block(&mut out, h * d, &yh);
            probs.push(p);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients for trainable
    /// leaves the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node_count = self.nodes.len();
        if loss.0 >= node_count {
            return Err(Error::invalid_value("backward", "variable not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(node_count);
        grads.resize_with(node_count, || None);
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        let mut retained: Vec<Option<Tensor<T>>> = Vec::with_capacity(node_count);
        retained.resize_with(node_count, || None);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        retained[idx] = Some(g);
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], linalg::matmul_nt(&g, bv)?);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], linalg::matmul_tn(av, &g)?);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], linalg::matmul(&g, bv)?);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], linalg::matmul_tn(&g, av)?);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], linalg::scale(&g, -T::ONE));
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], linalg::hadamard(&g, bv)?);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], linalg::hadamard(&g, av)?);
                    }
                }
                Op::AddRowBias { x, bias } => {
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads[*x], g.clone());
                    }
                    if self.nodes[*bias].needs_grad {
                        accumulate(&mut grads[*bias], col_sum(&g));
                    }
                }
                Op::Scale { x, s } => {
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads[*x], linalg::scale(&g, *s));
                    }
                }
                Op::RowSoftmax { x } => {
                    if self.nodes[*x].needs_grad {
                        let y = &self.nodes[idx].value;
                        accumulate(&mut grads[*x], softmax_backward(y, &g));
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.nodes[*gamma].value;
                    if self.nodes[*beta].needs_grad {
                        accumulate(&mut grads[*beta], col_sum(&g));
                    }
                    if self.nodes[*gamma].needs_grad {
                        accumulate(&mut grads[*gamma], col_sum(&linalg::hadamard(&g, xhat)?));
                    }
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads[*x], layer_norm_backward(&g, gv, xhat, inv_std));
                    }
                }
                Op::Gelu { x } => {
                    if self.nodes[*x].needs_grad {
                        let xv = &self.nodes[*x].value;
                        let data = xv
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &dy)| gelu_grad_scalar(x) * dy)
                            .collect();
                        accumulate(&mut grads[*x], Tensor::new(xv.shape(), data)?);
                    }
                }
                Op::ColSlice { x, start } => {
                    if self.nodes[*x].needs_grad {
                        let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                        scatter_col_block(&mut dx, *start, &g);
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::ColConcat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.cols();
                        if self.nodes[*p].needs_grad {
                            accumulate(&mut grads[*p], col_block(&g, start, w)?);
                        }
                        start += w;
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[*x].needs_grad {
                        let shape = self.nodes[*x].value.shape();
                        accumulate(&mut grads[*x], Tensor::filled(shape, g.data()[0]));
                    }
                }
                Op::RelativeL2 {
                    pred,
                    target,
                    diff_norm,
                    target_norm,
                } => {
                    if self.nodes[*pred].needs_grad {
                        let pv = &self.nodes[*pred].value;
                        let dl = g.data()[0];
                        let dn = diff_norm.to_f64();
                        let grad = if dn == 0.0 {
                            Tensor::zeros(pv.shape())
                        } else {
                            let c = dl.to_f64() / (dn * target_norm.to_f64());
                            let data = pv
                                .data()
                                .iter()
                                .zip(target.data())
                                .map(|(&p, &t)| T::from_f64((p.to_f64() - t.to_f64()) * c))
                                .collect();
                            Tensor::new(pv.shape(), data)?
                        };
                        accumulate(&mut grads[*pred], grad);
                    }
                }
                Op::LatentMix {
                    q,
                    k,
                    v,
                    heads,
                    enc,
                    dec,
                    latent,
                } => {
                    let (dq, dk, dv) = self.latent_mix_backward(&g, *q, *k, *v, *heads, enc, dec, latent)?;
                    if self.nodes[*q].needs_grad {
                        accumulate(&mut grads[*q], dq);
                    }
                    if self.nodes[*k].needs_grad {
                        accumulate(&mut grads[*k], dk);
                    }
                    if self.nodes[*v].needs_grad {
                        accumulate(&mut grads[*v], dv);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    scale,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, *scale, probs)?;
                    if self.nodes[*q].needs_grad {
                        accumulate(&mut grads[*q], dq);
                    }
                    if self.nodes[*k].needs_grad {
                        accumulate(&mut grads[*k], dk);
                    }
                    if self.nodes[*v].needs_grad {
                        accumulate(&mut grads[*v], dv);
                    }
                }
            }
        }
        Ok(Gradients { by_node: retained })
    }

    #[allow(clippy::too_many_arguments)]
    fn latent_mix_backward(
        &self,
        g: &Tensor<T>,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        enc: &[Tensor<T>],
        dec: &[Tensor<T>],
        latent: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let c = qv.cols();
        let d = c / heads;
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        for h in 0..heads {
            let qh = col_block(qv, h * d, d)?;
            let kh = col_block(kv, h * d, d)?;
            let vh = col_block(vv, h * d, d)?;
            let (p, r, z) = (&enc[h], &dec[h], &latent[h]);
            let dyh = col_block(g, h * d, d)?;
            // y = R z with R = softmax(Sᵀ) rows, z = P v, P = softmax(S).
            let dz = linalg::matmul_tn(r, &dyh)?;
            let dr = linalg::matmul_nt(&dyh, z)?;
            let dst = softmax_backward(r, &dr);
            let dvh = linalg::matmul_tn(p, &dz)?;
            let dp = linalg::matmul_nt(&dz, &vh)?;
            let mut ds = softmax_backward(p, &dp);
            let dst_t = linalg::transpose(&dst)?;
            for (a, b) in ds.data_mut().iter_mut().zip(dst_t.data()) {
                *a += *b;
            }
            let dqh = linalg::matmul(&ds, &kh)?;
            let dkh = linalg::matmul_tn(&ds, &qh)?;
            scatter_col_block(&mut dq, h * d, &dqh);
            scatter_col_block(&mut dk, h * d, &dkh);
            scatter_col_block(&mut dv, h * d, &dvh);
        }
        Ok((dq, dk, dv))
    }

    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: usize,
        k: usize,
        v: usize,
        scale: T,
        probs: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let heads = probs.len();
        let c = qv.cols();
        let d = c / heads;
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dv = Tensor::zeros(vv.shape());
        for (h, p) in probs.iter().enumerate() {
            let qh = col_block(qv, h * d, d)?;
            let kh = col_block(kv, h * d, d)?;
            let vh = col_block(vv, h * d, d)?;
            let dyh = col_block(g, h * d, d)?;
            let dvh = linalg::matmul_tn(p, &dyh)?;
            let dp = linalg::matmul_nt(&dyh, &vh)?;
            let mut ds = softmax_backward(p, &dp);
            if scale != T::ONE {
                for s in ds.data_mut() {
                    *s *= scale;
                }
            }
            let dqh = linalg::matmul(&ds, &kh)?;
            let dkh = linalg::matmul_tn(&ds, &qh)?;
            scatter_col_block(&mut dq, h * d, &dqh);
            scatter_col_block(&mut dk, h * d, &dkh);
            scatter_col_block(&mut dv, h * d, &dvh);
        }
        Ok((dq, dk, dv))
    }
}

/// dX for Y = row_softmax(X), given Y and dY: y ⊙ (dY − ⟨dY, y⟩ per row).
fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.cols();
    let mut out = Tensor::zeros(y.shape());
    let yd = y.data();
    let dyd = dy.data();
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        let yr = &yd[i * c..(i + 1) * c];
        let dyr = &dyd[i * c..(i + 1) * c];
        let mut dot = T::ZERO;
        for (&a, &b) in yr.iter().zip(dyr) {
            dot += a * b;
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = yr[j] * (dyr[j] - dot);
        }
    }
    out
}

fn layer_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
) -> Tensor<T> {
    let c = xhat.cols();
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut dx = Tensor::zeros(xhat.shape());
    let g = gamma.data();
    for i in 0..xhat.rows() {
        let dyr = dy.row(i);
        let xr = xhat.row(i);
        let mut mean_g = T::ZERO;
        let mut mean_gx = T::ZERO;
        for j in 0..c {
            let gj = dyr[j] * g[j];
            mean_g += gj;
            mean_gx += gj * xr[j];
        }
        mean_g *= inv_c;
        mean_gx *= inv_c;
        let s = inv_std[i];
        let row = &mut dx.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            row[j] = (dyr[j] * g[j] - mean_g - xr[j] * mean_gx) * s;
        }
    }
    dx
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += *b;
            }
        }
    }
}

/// Copy of columns `[start, start+len)` of a rank-2 tensor.
pub(crate) fn col_block<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if t.rank() != 2 || start + len > t.cols() {
        return Err(Error::shape(
            "col_block",
            format!("cols [{}, {}) of {:?}", start, start + len, t.shape()),
        ));
    }
    let (n, c) = (t.rows(), t.cols());
    let src = t.data();
    let mut out = Tensor::zeros(&[n, len]);
    let dst = out.data_mut();
    for i in 0..n {
        dst[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
    }
    Ok(out)
}

/// Writes `src` into columns starting at `start` of `dst`.
pub(crate) fn scatter_col_block<T: Scalar>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let (n, c) = (dst.rows(), dst.cols());
    let len = src.cols();
    debug_assert!(src.rows() == n && start + len <= c);
    let s = src.data();
    let d = dst.data_mut();
    for i in 0..n {
        d[i * c + start..i * c + start + len].copy_from_slice(&s[i * len..(i + 1) * len]);
    }
}

/// Column sums of a rank-2 tensor as a rank-1 tensor.
fn col_sum<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = Tensor::zeros(&[c]);
    let o = out.data_mut();
    for row in t.data().chunks(c) {
        for (a, &b) in o.iter_mut().zip(row) {
            *a += b;
        }
    }
    out
}

fn check_mix_shapes<T: Scalar>(
    op: &'static str,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<usize> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
        }
    }
    let c = q.cols();
    if k.cols() != c || v.cols() != c {
        return Err(Error::shape(
            op,
            format!("channel dims differ: {} / {} / {}", c, k.cols(), v.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            op,
            format!("{} key rows vs {} value rows", k.rows(), v.rows()),
        ));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "{}: channels {} not divisible by heads {}",
            op, c, heads
        )));
    }
    Ok(c)
}

/// Finite-difference check of the reverse pass.
///
/// `build` assembles a scalar loss from leaf variables created from
/// `inputs`. Every input entry is perturbed by ±h and the central difference
/// is compared against the tape gradient. Returns the worst relative error,
/// measured as |analytic − fd| / max(|analytic|, |fd|, 1e-8).
pub fn grad_check<F>(build: &F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let lv = tape.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("grad_check", "loss must be scalar"));
        }
        if !lv.all_finite() {
            return Err(Error::non_finite("grad_check", "loss is not finite"));
        }
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    drop(tape);

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[pi].data_mut()[j] = orig + h;
            let (t_plus, _, l_plus) = eval(&work)?;
            let f_plus = t_plus.value(l_plus).data()[0];
            work[pi].data_mut()[j] = orig - h;
            let (t_minus, _, l_minus) = eval(&work)?;
            let f_minus = t_minus.value(l_minus).data()[0];
            work[pi].data_mut()[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic[pi].data()[j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
