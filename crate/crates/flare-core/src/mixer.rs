//! Latent-token attention mixer.
//!
//! Token mixing is routed through M learnable latent tokens: an encode
//! attention compresses the N input tokens onto the latents, a decode
//! attention (the same score matrix read along the other axis) expands them
//! back. The fused path never materializes an N×N matrix; the materialized
//! path builds the explicit encode/decode weights for analysis and testing.

use crate::autodiff::{col_block, scatter_col_block};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{resmlp_forward, LinearParams, ResMlpConfig, ResMlpParams};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one mixer sublayer. `kv_cfg` describes the key/value
/// ResMLP stacks so the layer is self-contained.
#[derive(Clone)]
pub struct MixerParams<T: Scalar> {
    /// Learnable latent queries, M×C.
    pub latent_queries: Tensor<T>,
    pub key_proj: ResMlpParams<T>,
    pub value_proj: ResMlpParams<T>,
    pub out_proj: LinearParams<T>,
    pub kv_cfg: ResMlpConfig,
    pub heads: usize,
}

/// Explicit per-head mixing weights from the materialized path.
pub struct MixerTrace<T: Scalar> {
    /// Row-stochastic M×N encode weights per head.
    pub w_encode: Vec<Tensor<T>>,
    /// Row-stochastic N×M decode weights per head.
    pub w_decode: Vec<Tensor<T>>,
    /// Latent summaries Z, M×D per head.
    pub latent: Vec<Tensor<T>>,
}

/// Splits N×C features into H heads of width D = C/H; head h holds feature
/// columns [hD, (h+1)D). Returns an H×N×D tensor.
pub fn head_split<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("head_split", format!("rank {} input", x.rank())));
    }
    let (n, c) = (x.rows(), x.cols());
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "head_split: {} channels not divisible by {} heads",
            c, heads
        )));
    }
    let d = c / heads;
    let mut out = Tensor::zeros(&[heads, n, d]);
    let src = x.data();
    let dst = out.data_mut();
    for h in 0..heads {
        for i in 0..n {
            let from = i * c + h * d;
            let to = h * n * d + i * d;
            dst[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    Ok(out)
}

/// Inverse of [`head_split`]: H×N×D back to N×(H·D).
pub fn head_merge<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [heads, n, d] = rank3_dims("head_merge", x)?;
    let c = heads * d;
    let mut out = Tensor::zeros(&[n, c]);
    let src = x.data();
    let dst = out.data_mut();
    for h in 0..heads {
        for i in 0..n {
            let from = h * n * d + i * d;
            let to = i * c + h * d;
            dst[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    Ok(out)
}

/// Head `h` of an H×N×D stack as an owned N×D matrix.
pub fn head_tensor<T: Scalar>(x: &Tensor<T>, h: usize) -> Result<Tensor<T>> {
    let [heads, n, d] = rank3_dims("head_tensor", x)?;
    if h >= heads {
        return Err(Error::shape("head_tensor", format!("head {} of {}", h, heads)));
    }
    Tensor::new(&[n, d], x.data()[h * n * d..(h + 1) * n * d].to_vec())
}

/// Fused mixer: per head Z = softmax(Q Kᵀ)·V then Y = softmax(K Qᵀ)·Z, both
/// softmaxes row-stabilized, scale fixed at 1. Peak extra memory is
/// O(N·M + N·D) per head.
pub fn flare_mix_fused<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ([heads, m, d], [hk, n, dk], [hv, nv, dv]) = (
        rank3_dims("flare_mix_fused", q)?,
        rank3_dims("flare_mix_fused", k)?,
        rank3_dims("flare_mix_fused", v)?,
    );
    if hk != heads || hv != heads || dk != d || dv != d || nv != n {
        return Err(Error::shape(
            "flare_mix_fused",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let _ = m;
    let mut out = Tensor::zeros(&[heads, n, d]);
    for h in 0..heads {
        let qh = head_tensor(q, h)?;
        let kh = head_tensor(k, h)?;
        let vh = head_tensor(v, h)?;
        let scores = linalg::matmul_nt(&qh, &kh)?;
        let enc = linalg::row_softmax(&scores)?;
        let z = linalg::matmul(&enc, &vh)?;
        let dec = linalg::row_softmax(&linalg::transpose(&scores)?)?;
        let yh = linalg::matmul(&dec, &z)?;
        out.data_mut()[h * n * d..(h + 1) * n * d].copy_from_slice(yh.data());
    }
    Ok(out)
}

/// Materialized mixer: identical output contract to the fused path, but
/// builds the explicit encode/decode weight matrices and returns them.
///
/// A single global max shift is applied to the score matrix before
/// exponentiation. Per-row shifts would leave the encode weights unchanged
/// but alter the decode weights, which normalize the other axis of the same
/// matrix; one scalar cancels in both normalizations.
pub fn flare_mix_materialized<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, MixerTrace<T>)> {
    let ([heads, _m, d], [hk, n, dk], [hv, nv, dv]) = (
        rank3_dims("flare_mix_materialized", q)?,
        rank3_dims("flare_mix_materialized", k)?,
        rank3_dims("flare_mix_materialized", v)?,
    );
    if hk != heads || hv != heads || dk != d || dv != d || nv != n {
        return Err(Error::shape(
            "flare_mix_materialized",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[heads, n, d]);
    let mut trace = MixerTrace {
        w_encode: Vec::with_capacity(heads),
        w_decode: Vec::with_capacity(heads),
        latent: Vec::with_capacity(heads),
    };
    for h in 0..heads {
        let qh = head_tensor(q, h)?;
        let kh = head_tensor(k, h)?;
        let vh = head_tensor(v, h)?;
        let scores = linalg::matmul_nt(&qh, &kh)?;
        let (w_enc, w_dec) = encode_decode_weights(&scores)?;
        let z = linalg::matmul(&w_enc, &vh)?;
        let yh = linalg::matmul(&w_dec, &z)?;
        out.data_mut()[h * n * d..(h + 1) * n * d].copy_from_slice(yh.data());
        trace.w_encode.push(w_enc);
        trace.w_decode.push(w_dec);
        trace.latent.push(z);
    }
    Ok((out, trace))
}

/// From an M×N score matrix, the row-stochastic encode (M×N) and decode
/// (N×M) weights that share one exponentiated score matrix.
pub(crate) fn encode_decode_weights<T: Scalar>(
    scores: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !scores.all_finite() {
        return Err(Error::non_finite("encode_decode_weights", "scores"));
    }
    let (m, n) = (scores.rows(), scores.cols());
    let mut shift = scores.data()[0];
    for &s in scores.data() {
        shift = shift.maximum(s);
    }
    let a = scores.map(|s| (s - shift).exp());
    let mut w_enc = a.clone();
    for row in w_enc.data_mut().chunks_mut(n) {
        let mut sum = T::ZERO;
        for &x in row.iter() {
            sum += x;
        }
        let inv = T::ONE / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    let mut col_sums = vec![T::ZERO; n];
    for row in a.data().chunks(n) {
        for (acc, &x) in col_sums.iter_mut().zip(row) {
            *acc += x;
        }
    }
    let mut w_dec = Tensor::zeros(&[n, m]);
    let wd = w_dec.data_mut();
    let ad = a.data();
    for i in 0..m {
        for j in 0..n {
            wd[j * m + i] = ad[i * n + j] / col_sums[j];
        }
    }
    Ok((w_enc, w_dec))
}

/// Explicit N×N token-communication matrix W = W_decode · W_encode for one
/// head. Row-stochastic with rank at most M; test and analysis use only.
pub fn communication_matrix<T: Scalar>(q_h: &Tensor<T>, k_h: &Tensor<T>) -> Result<Tensor<T>> {
    let scores = linalg::matmul_nt(q_h, k_h)?;
    let (w_enc, w_dec) = encode_decode_weights(&scores)?;
    linalg::matmul(&w_dec, &w_enc)
}

/// Quadratic softmax attention baseline: per head softmax(Q Kᵀ / s) · V.
pub fn vanilla_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    s: T,
) -> Result<Tensor<T>> {
    let ([heads, nq, d], [hk, n, dk], [hv, nv, dv]) = (
        rank3_dims("vanilla_attention", q)?,
        rank3_dims("vanilla_attention", k)?,
        rank3_dims("vanilla_attention", v)?,
    );
    if hk != heads || hv != heads || dk != d || dv != d || nv != n {
        return Err(Error::shape(
            "vanilla_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if !(s > T::ZERO) {
        return Err(Error::invalid_value("vanilla_attention", format!("scale {}", s)));
    }
    let inv = T::ONE / s;
    let mut out = Tensor::zeros(&[heads, nq, d]);
    for h in 0..heads {
        let qh = head_tensor(q, h)?;
        let kh = head_tensor(k, h)?;
        let vh = head_tensor(v, h)?;
        let mut scores = linalg::matmul_nt(&qh, &kh)?;
        for x in scores.data_mut() {
            *x *= inv;
        }
        let p = linalg::row_softmax(&scores)?;
        drop(scores);
        let yh = linalg::matmul(&p, &vh)?;
        out.data_mut()[h * nq * d..(h + 1) * nq * d].copy_from_slice(yh.data());
    }
    Ok(out)
}

/// Full mixer sublayer: key/value ResMLP projections, fused latent mixing
/// over heads, head merge, output projection.
pub fn flare_layer_forward<T: Scalar>(x: &Tensor<T>, params: &MixerParams<T>) -> Result<Tensor<T>> {
    let heads = params.heads;
    let c = params.latent_queries.cols();
    if x.rank() != 2 || x.cols() != c {
        return Err(Error::shape(
            "flare_layer_forward",
            format!("input {:?} vs {} channels", x.shape(), c),
        ));
    }
    let k = resmlp_forward(x, &params.kv_cfg, &params.key_proj)?;
    let v = resmlp_forward(x, &params.kv_cfg, &params.value_proj)?;
    let n = x.rows();
    let d = c / heads;
    let mut merged = Tensor::zeros(&[n, c]);
    for h in 0..heads {
        let qh = col_block(&params.latent_queries, h * d, d)?;
        let kh = col_block(&k, h * d, d)?;
        let vh = col_block(&v, h * d, d)?;
        let scores = linalg::matmul_nt(&qh, &kh)?;
        let enc = linalg::row_softmax(&scores)?;
        let z = linalg::matmul(&enc, &vh)?;
        let dec = linalg::row_softmax(&linalg::transpose(&scores)?)?;
        let yh = linalg::matmul(&dec, &z)?;
        scatter_col_block(&mut merged, h * d, &yh);
    }
    let projected = linalg::matmul(&merged, &params.out_proj.weight)?;
    linalg::add_row_bias(&projected, &params.out_proj.bias)
}

fn rank3_dims<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 3]> {
    if t.rank() != 3 {
        return Err(Error::shape(
            op,
            format!("expected rank 3, got shape {:?}", t.shape()),
        ));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2]])
}
