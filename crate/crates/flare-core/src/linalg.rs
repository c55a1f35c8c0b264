//! Matrix kernels: matmul variants, row softmax, layer norm, exact GELU.
//!
//! All kernels are written as straight loops over contiguous rows so the
//! compiler can vectorize them, and they parallelize over output rows, which
//! keeps results independent of thread count.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Scalar, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// C = A · B for rank-2 tensors, shapes (n,k)·(k,p) -> (n,p).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank2("matmul", a)?;
    check_rank2("matmul", b)?;
    let (n, k) = (a.rows(), a.cols());
    let (kb, p) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims {}x{} vs {}x{}", n, k, kb, p),
        ));
    }
    let mut c = Tensor::zeros(&[n, p]);
    matmul_into(a.data(), b.data(), c.data_mut(), n, k, p);
    Ok(c)
}

/// C = A · Bᵀ, shapes (n,k)·(m,k) -> (n,m).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank2("matmul_nt", a)?;
    check_rank2("matmul_nt", b)?;
    let (n, k) = (a.rows(), a.cols());
    let (m, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape(
            "matmul_nt",
            format!("inner dims {}x{} vs ({}x{})ᵀ", n, k, m, kb),
        ));
    }
    let mut c = Tensor::zeros(&[n, m]);
    matmul_nt_into(a.data(), b.data(), c.data_mut(), n, k, m);
    Ok(c)
}

/// C = Aᵀ · B, shapes (n,k)·(n,p) -> (k,p). Implemented as an explicit
/// transpose followed by the row kernel, so it shares its cache behavior.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let at = transpose(a)?;
    matmul(&at, b)
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), n * p);
    for_each_chunk(c, p, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * p..(l + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_il * bj;
            }
        }
    });
}

pub(crate) fn matmul_nt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    n: usize,
    k: usize,
    m: usize,
) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(c.len(), n * m);
    for_each_chunk(c, m, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cj = acc;
        }
    });
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank2("transpose", a)?;
    let (n, k) = (a.rows(), a.cols());
    let src = a.data();
    let mut out = Tensor::zeros(&[k, n]);
    let dst = out.data_mut();
    for i in 0..n {
        for j in 0..k {
            dst[j * n + i] = src[i * k + j];
        }
    }
    Ok(out)
}

/// Elementwise sum; shapes must match.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

/// Elementwise difference; shapes must match.
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise("sub", a, b, |x, y| x - y)
}

/// Elementwise product; shapes must match.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise("hadamard", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Adds a length-c bias to every row of an (n,c) tensor.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank2("add_row_bias", x)?;
    if bias.rank() != 1 || bias.len() != x.cols() {
        return Err(Error::shape(
            "add_row_bias",
            format!("bias {:?} for input {:?}", bias.shape(), x.shape()),
        ));
    }
    let mut out = x.clone();
    let c = x.cols();
    let b = bias.data();
    for_each_chunk(out.data_mut(), c, |_, row| {
        for (r, &bv) in row.iter_mut().zip(b) {
            *r += bv;
        }
    });
    Ok(out)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> T {
    let mut acc = T::ZERO;
    for &v in a.data() {
        acc += v;
    }
    acc
}

fn zip_elementwise<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

/// Numerically stable softmax along the last axis of a rank-2 tensor.
///
/// Each row is shifted by its own maximum before exponentiation, so rows with
/// entries of magnitude 1e4 stay finite. Non-finite inputs are rejected.
pub fn row_softmax<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    check_rank2("row_softmax", s)?;
    if !s.all_finite() {
        return Err(Error::non_finite("row_softmax", "input contains NaN or inf"));
    }
    let mut out = s.clone();
    let c = s.cols();
    for_each_chunk(out.data_mut(), c, |_, row| row_softmax_in_place(row));
    Ok(out)
}

#[inline]
pub(crate) fn row_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Layer normalization over the last axis with affine parameters.
///
/// Uses the population variance (divide by c) and `1/sqrt(var + eps)`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Layer norm that also returns the normalized input and per-row inverse
/// standard deviation, which the backward pass needs.
pub(crate) fn layer_norm_parts<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    check_rank2("layer_norm", x)?;
    let c = x.cols();
    if gamma.rank() != 1 || gamma.len() != c || beta.rank() != 1 || beta.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?}, beta {:?} for input {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ),
        ));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid_value("layer_norm", format!("eps = {}", eps)));
    }
    let n = x.rows();
    let mut y = Tensor::zeros(&[n, c]);
    let mut xhat = Tensor::zeros(&[n, c]);
    let mut inv_std = vec![T::ZERO; n];
    let inv_c = T::from_f64(1.0 / c as f64);
    let eps_t = T::from_f64(eps);
    let g = gamma.data();
    let b = beta.data();
    let xd = x.data();
    // Row blocks would parallelize here too, but layer norm is never the hot
    // kernel; keep it sequential and simple so the three outputs stay in step.
    for i in 0..n {
        let row = &xd[i * c..(i + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let s = T::ONE / (var + eps_t).sqrt();
        inv_std[i] = s;
        let xh_row = &mut xhat.data_mut()[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            xh_row[j] = (v - mean) * s;
        }
        let y_row = &mut y.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            y_row[j] = xh_row[j] * g[j] + b[j];
        }
    }
    Ok((y, xhat, inv_std))
}

/// Exact GELU, `x * Phi(x)` with the Gaussian CDF written via `erf`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline(always)]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
#[inline(always)]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let xf = x.to_f64();
    let pdf = (-0.5 * xf * xf).exp() * INV_SQRT_2PI;
    normal_cdf(x) + x * T::from_f64(pdf)
}

#[inline(always)]
fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::ONE + (x * T::from_f64(INV_SQRT_2)).erf())
}

fn check_rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected rank 2, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}
