//! Eigenanalysis of the token-communication matrix from Q and K alone.
//!
//! The communication matrix W = W_decode·W_encode is N×N but similar to the
//! M×M Gram matrix of a scaled score matrix J, so its spectrum is computable
//! in O(M³ + M²N) without ever materializing W. A dense N×N oracle backs the
//! fast path in tests. All spectral computation is double precision:
//! eigenvalue separations below single-precision epsilon are common.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Relative threshold below which a singular value is treated as zero and
/// its eigenvector column is not formed.
const NULL_SIGMA_REL: f64 = 1e-12;
/// Jacobi convergence: off-diagonal Frobenius norm relative to input norm.
const JACOBI_TOL_REL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Spectrum of one head's communication matrix.
pub struct SpectralResult {
    /// Length M, real, sorted descending; top value is 1 for row-stochastic W.
    pub eigenvalues: Vec<f64>,
    /// N×M; column i pairs with eigenvalue i. Null columns are zeros.
    pub eigenvectors: Tensor<f64>,
    /// Columns whose singular value fell below 1e-12·σ₁; emitted as zeros.
    pub null_columns: Vec<bool>,
}

/// The shifted exponentiated score matrix and its normalizations.
pub struct ScaledScores {
    /// exp(S − max S), strictly positive, M×N.
    pub a: Tensor<f64>,
    /// Inverse row sums of `a`, length M.
    pub lambda_m: Vec<f64>,
    /// Inverse column sums of `a`, length N.
    pub lambda_n: Vec<f64>,
    /// J = Λ_M^{1/2} · A · Λ_N^{1/2}, M×N.
    pub j: Tensor<f64>,
}

/// Builds [`ScaledScores`] from a raw M×N score matrix. The single global
/// shift keeps the exponentials finite and cancels in both normalizations,
/// so the spectrum is invariant to it.
pub fn scaled_scores(scores: &Tensor<f64>) -> Result<ScaledScores> {
    if scores.rank() != 2 {
        return Err(Error::shape("scaled_scores", format!("{:?}", scores.shape())));
    }
    if !scores.all_finite() {
        return Err(Error::non_finite("scaled_scores", "scores"));
    }
    let (m, n) = (scores.rows(), scores.cols());
    let shift = scores.data().iter().cloned().fold(f64::MIN, f64::max);
    let a = scores.map(|s| (s - shift).exp());
    let mut row_sums = vec![0.0_f64; m];
    let mut col_sums = vec![0.0_f64; n];
    for i in 0..m {
        for j in 0..n {
            let v = a.at2(i, j);
            row_sums[i] += v;
            col_sums[j] += v;
        }
    }
    let lambda_m: Vec<f64> = row_sums.iter().map(|s| 1.0 / s).collect();
    let lambda_n: Vec<f64> = col_sums.iter().map(|s| 1.0 / s).collect();
    let mut j_mat = Tensor::zeros(&[m, n]);
    let jd = j_mat.data_mut();
    let ad = a.data();
    for i in 0..m {
        let rm = lambda_m[i].sqrt();
        for j in 0..n {
            jd[i * n + j] = rm * ad[i * n + j] * lambda_n[j].sqrt();
        }
    }
    Ok(ScaledScores {
        a,
        lambda_m,
        lambda_n,
        j: j_mat,
    })
}

/// Spectrum of W for one head from its M×D latent queries and N×D keys.
/// Runtime O(M³ + M²N); no N×N buffer is allocated.
pub fn flare_spectrum(q_h: &Tensor<f64>, k_h: &Tensor<f64>) -> Result<SpectralResult> {
    if q_h.rank() != 2 || k_h.rank() != 2 || q_h.cols() != k_h.cols() {
        return Err(Error::shape(
            "flare_spectrum",
            format!("q {:?} vs k {:?}", q_h.shape(), k_h.shape()),
        ));
    }
    if q_h.rows() > k_h.rows() {
        return Err(Error::InvalidConfig(format!(
            "flare_spectrum needs M <= N, got M={} N={}",
            q_h.rows(),
            k_h.rows()
        )));
    }
    let scores = linalg::matmul_nt(q_h, k_h)?;
    spectrum_from_scores(&scores)
}

/// As [`flare_spectrum`], starting from a precomputed M×N score matrix.
pub fn spectrum_from_scores(scores: &Tensor<f64>) -> Result<SpectralResult> {
    let ss = scaled_scores(scores)?;
    let (m, n) = (ss.j.rows(), ss.j.cols());
    let gram = linalg::matmul_nt(&ss.j, &ss.j)?;
    let (eigenvalues, u) = symmetric_eig(&gram)?;
    let sigma: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let tau_sigma = NULL_SIGMA_REL * sigma[0];
    // Λ_N^{1/2} Jᵀ U Σ⁻¹, column by column; null columns stay zero.
    let jt_u = linalg::matmul_tn(&ss.j, &u)?;
    let mut vecs = Tensor::zeros(&[n, m]);
    let mut null_columns = vec![false; m];
    let vd = vecs.data_mut();
    let pd = jt_u.data();
    for i in 0..m {
        if sigma[i] < tau_sigma || sigma[i] == 0.0 {
            null_columns[i] = true;
            continue;
        }
        let inv_sigma = 1.0 / sigma[i];
        for row in 0..n {
            vd[row * m + i] = ss.lambda_n[row].sqrt() * pd[row * m + i] * inv_sigma;
        }
    }
    Ok(SpectralResult {
        eigenvalues,
        eigenvectors: vecs,
        null_columns,
    })
}

/// Brute-force reference: materializes the symmetric N×N matrix JᵀJ, solves
/// it densely and maps eigenvectors through Λ_N^{1/2}. Top-M pairs,
/// descending. Test-scale N only.
pub fn dense_spectrum_oracle(q_h: &Tensor<f64>, k_h: &Tensor<f64>) -> Result<SpectralResult> {
    let scores = linalg::matmul_nt(q_h, k_h)?;
    let ss = scaled_scores(&scores)?;
    let (m, n) = (ss.j.rows(), ss.j.cols());
    let big = linalg::matmul_tn(&ss.j, &ss.j)?;
    let (evals, v) = symmetric_eig(&big)?;
    let mut vecs = Tensor::zeros(&[n, m]);
    let vd = vecs.data_mut();
    let sd = v.data();
    for row in 0..n {
        let scale = ss.lambda_n[row].sqrt();
        for i in 0..m {
            vd[row * m + i] = scale * sd[row * n + i];
        }
    }
    Ok(SpectralResult {
        eigenvalues: evals[..m].to_vec(),
        eigenvectors: vecs,
        null_columns: vec![false; m],
    })
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Returns eigenvalues sorted descending and the matching orthonormal
/// eigenvector columns. Input asymmetry beyond 1e-8 relative is rejected;
/// smaller asymmetry is symmetrized away. Each eigenvector's largest-
/// magnitude entry is made positive so results are sign-deterministic.
pub fn symmetric_eig(s: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    if s.rank() != 2 || s.rows() != s.cols() {
        return Err(Error::shape("symmetric_eig", format!("{:?}", s.shape())));
    }
    let n = s.rows();
    let max_abs = s.max_abs();
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s.at2(i, j) - s.at2(j, i)).abs());
        }
    }
    if max_asym > 1e-8 * max_abs.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid_value(
            "symmetric_eig",
            format!("asymmetry {:.3e} exceeds 1e-8 of max entry {:.3e}", max_asym, max_abs),
        ));
    }

    let mut a = vec![0.0_f64; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (s.at2(i, j) + s.at2(j, i));
        }
    }
    let mut v = vec![0.0_f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL_REL * frob;
    let mut off = off_diagonal_norm(&a, n);
    let mut sweeps = 0;
    while off > tol {
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                solver: "jacobi symmetric eigensolver",
                iters: sweeps,
                residual: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                let tau = sn / (1.0 + c);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[r * n + p];
                        let arq = a[r * n + q];
                        let new_rp = arp - sn * (arq + tau * arp);
                        let new_rq = arq + sn * (arp - tau * arq);
                        a[r * n + p] = new_rp;
                        a[p * n + r] = new_rp;
                        a[r * n + q] = new_rq;
                        a[q * n + r] = new_rq;
                    }
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - sn * vrq;
                    v[r * n + q] = sn * vrp + c * vrq;
                }
            }
        }
        sweeps += 1;
        off = off_diagonal_norm(&a, n);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    let vd = vecs.data_mut();
    for (col, &src) in order.iter().enumerate() {
        let mut extreme = 0.0_f64;
        let mut flip = 1.0_f64;
        for r in 0..n {
            let val = v[r * n + src];
            if val.abs() > extreme {
                extreme = val.abs();
                flip = if val < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for r in 0..n {
            vd[r * n + col] = flip * v[r * n + src];
        }
    }
    Ok((eigenvalues, vecs))
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = a[i * n + j];
            sum += 2.0 * x * x;
        }
    }
    sum.sqrt()
}

/// Number of eigenvalues at or above `tau` times the largest.
pub fn effective_rank(eigenvalues: &[f64], tau: f64) -> Result<usize> {
    let first = *eigenvalues
        .first()
        .ok_or_else(|| Error::invalid_value("effective_rank", "empty spectrum"))?;
    if !(first > 0.0) {
        return Err(Error::invalid_value(
            "effective_rank",
            format!("leading eigenvalue {} must be positive", first),
        ));
    }
    let threshold = tau * first;
    Ok(eigenvalues.iter().filter(|&&l| l >= threshold).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::communication_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn jacobi_diagonal_matrix() {
        let s = Tensor::new(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let (evals, vecs) = symmetric_eig(&s).unwrap();
        assert_eq!(evals, vec![5.0, 2.0, -1.0]);
        // Eigenvectors are signed unit basis vectors.
        assert_eq!(vecs.at2(2, 0), 1.0);
        assert_eq!(vecs.at2(0, 1), 1.0);
        assert_eq!(vecs.at2(1, 2), 1.0);
    }

    #[test]
    fn jacobi_analytic_2x2() {
        let s = Tensor::new(&[2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (evals, _) = symmetric_eig(&s).unwrap();
        assert!((evals[0] - 3.0).abs() < 1e-14);
        assert!((evals[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_random_residual_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 32;
        let raw = rand_tensor(&[n, n], &mut rng);
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                s.set2(i, j, 0.5 * (raw.at2(i, j) + raw.at2(j, i)));
            }
        }
        let (evals, vecs) = symmetric_eig(&s).unwrap();
        let spectral_norm = evals.iter().fold(0.0_f64, |m, &l| m.max(l.abs()));
        for i in 0..n {
            // Residual ‖S v − λ v‖ per eigenpair.
            let mut res = 0.0_f64;
            for r in 0..n {
                let mut sv = 0.0;
                for c in 0..n {
                    sv += s.at2(r, c) * vecs.at2(c, i);
                }
                let d = sv - evals[i] * vecs.at2(r, i);
                res += d * d;
            }
            assert!(res.sqrt() <= 1e-10 * spectral_norm, "residual {}", res.sqrt());
            for j in i..n {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += vecs.at2(r, i) * vecs.at2(r, j);
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10, "vᵀv[{},{}] = {}", i, j, dot);
            }
        }
        for w in evals.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn jacobi_rejects_asymmetric_input() {
        let s = Tensor::new(&[2, 2], vec![1.0, 2.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            symmetric_eig(&s),
            Err(Error::InvalidValue { .. })
        ));
    }

    #[test]
    fn zero_keys_give_rank_one_uniform_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = rand_tensor(&[4, 6], &mut rng);
        let k = Tensor::zeros(&[17, 6]);
        let res = flare_spectrum(&q, &k).unwrap();
        assert!((res.eigenvalues[0] - 1.0).abs() < 1e-12);
        for &l in &res.eigenvalues[1..] {
            assert!(l.abs() < 1e-12, "trailing eigenvalue {}", l);
        }
        assert!(!res.null_columns[0]);
        // Flagged columns, if any, must come out as exact zeros.
        for (i, &flagged) in res.null_columns.iter().enumerate() {
            if flagged {
                for r in 0..17 {
                    assert_eq!(res.eigenvectors.at2(r, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn exactly_singular_gram_flags_null_column() {
        // Uniform 2×2 scores make JJᵀ = [[.5,.5],[.5,.5]], whose Jacobi
        // rotation produces eigenvalues 1.0 and 0.0 exactly.
        let res = spectrum_from_scores(&Tensor::zeros(&[2, 2])).unwrap();
        assert!((res.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert_eq!(res.eigenvalues[1], 0.0);
        assert_eq!(res.null_columns, vec![false, true]);
        assert_eq!(res.eigenvectors.at2(0, 1), 0.0);
        assert_eq!(res.eigenvectors.at2(1, 1), 0.0);
    }

    #[test]
    fn top_eigenpair_is_one_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let q = rand_tensor(&[5, 4], &mut rng);
        let k = rand_tensor(&[29, 4], &mut rng);
        let res = flare_spectrum(&q, &k).unwrap();
        assert!((res.eigenvalues[0] - 1.0).abs() < 1e-8);
        // Leading eigenvector is the all-ones direction.
        let first = res.eigenvectors.at2(0, 0);
        assert!(first != 0.0);
        for r in 0..29 {
            assert!(
                (res.eigenvectors.at2(r, 0) / first - 1.0).abs() < 1e-8,
                "row {} deviates",
                r
            );
        }
    }

    #[test]
    fn eigenvalues_bounded_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let q = rand_tensor(&[8, 5], &mut rng);
            let k = rand_tensor(&[41, 5], &mut rng);
            let res = flare_spectrum(&q, &k).unwrap();
            for &l in &res.eigenvalues {
                assert!((-1e-8..=1.0 + 1e-8).contains(&l), "eigenvalue {}", l);
            }
            for w in res.eigenvalues.windows(2) {
                assert!(w[0] >= w[1] - 1e-14);
            }
        }
    }

    #[test]
    fn fast_path_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let q = rand_tensor(&[16, 8], &mut rng);
        let k = rand_tensor(&[200, 8], &mut rng);
        let fast = flare_spectrum(&q, &k).unwrap();
        let dense = dense_spectrum_oracle(&q, &k).unwrap();
        for (a, b) in fast.eigenvalues.iter().zip(&dense.eigenvalues) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "{} vs {}", a, b);
        }
        // Eigenpair residuals against the explicit communication matrix.
        let w = communication_matrix(&q, &k).unwrap();
        for i in 0..16 {
            if fast.null_columns[i] {
                continue;
            }
            let mut v_norm = 0.0_f64;
            let mut res = 0.0_f64;
            for r in 0..200 {
                let mut wv = 0.0;
                for c in 0..200 {
                    wv += w.at2(r, c) * fast.eigenvectors.at2(c, i);
                }
                let d = wv - fast.eigenvalues[i] * fast.eigenvectors.at2(r, i);
                res += d * d;
                v_norm += fast.eigenvectors.at2(r, i).powi(2);
            }
            assert!(
                res.sqrt() <= 1e-6 * v_norm.sqrt(),
                "eigenpair {} residual {:.3e} (‖v‖ {:.3e})",
                i,
                res.sqrt(),
                v_norm.sqrt()
            );
        }
    }

    #[test]
    fn dense_path_trailing_eigenvalues_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let q = rand_tensor(&[6, 4], &mut rng);
        let k = rand_tensor(&[40, 4], &mut rng);
        let scores = linalg::matmul_nt(&q, &k).unwrap();
        let ss = scaled_scores(&scores).unwrap();
        let big = linalg::matmul_tn(&ss.j, &ss.j).unwrap();
        let (evals, _) = symmetric_eig(&big).unwrap();
        for &l in &evals[6..] {
            assert!(l.abs() <= 1e-10, "rank bound violated: {}", l);
        }
        // Same multiset as the Gram matrix of Jᵀ (direct SVD equivalence).
        let gram = linalg::matmul_nt(&ss.j, &ss.j).unwrap();
        let (gvals, _) = symmetric_eig(&gram).unwrap();
        for (a, b) in gvals.iter().zip(&evals[..6]) {
            assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn spectrum_invariant_to_global_score_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let scores = rand_tensor(&[8, 50], &mut rng);
        let shifted = scores.map(|v| v + 37.25);
        let a = spectrum_from_scores(&scores).unwrap();
        let b = spectrum_from_scores(&shifted).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() <= 1e-10, "{} vs {}", x, y);
        }
    }

    #[test]
    fn spectrum_rejects_more_latents_than_tokens() {
        let q = Tensor::<f64>::zeros(&[5, 3]);
        let k = Tensor::<f64>::zeros(&[4, 3]);
        assert!(matches!(
            flare_spectrum(&q, &k),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 0.0, 0.0, 0.0], 1e-3).unwrap(), 1);
        assert_eq!(effective_rank(&[0.5; 6], 0.5).unwrap(), 6);
        let geometric: Vec<f64> = (0..10).map(|i| 2.0_f64.powi(-i)).collect();
        assert_eq!(effective_rank(&geometric, 1e-2).unwrap(), 7);
        assert!(effective_rank(&[], 0.5).is_err());
        assert!(effective_rank(&[0.0, 0.0], 0.5).is_err());
    }
}
