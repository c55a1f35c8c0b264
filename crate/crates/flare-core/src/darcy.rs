//! Synthetic two-phase Darcy flow on the unit square.
//!
//! A binary permeability field a ∈ {3, 12} is drawn from smoothed seeded
//! noise split at its median, then −∇·(a∇u) = 1 with u = 0 on the boundary
//! is solved by conjugate gradients on a 5-point stencil with harmonic-mean
//! face coefficients. Each grid point becomes one sample point with
//! features (x, y, a) and label u.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PHASE_LOW: f64 = 3.0;
pub const PHASE_HIGH: f64 = 12.0;
const CG_TOL: f64 = 1e-10;
const CG_MAX_ITERS: usize = 20_000;
/// Smallest grid the blur/threshold pipeline produces sensible fields on.
pub const MIN_GRID: usize = 8;

/// Binary coefficient field on a g×g grid: uniform noise, separable box
/// blur of radius g/8 (clamped at edges), median threshold. Deterministic
/// per (g, seed).
pub fn coefficient_field(grid_size: usize, seed: u64) -> Result<Tensor<f64>> {
    if grid_size < MIN_GRID {
        return Err(Error::InvalidConfig(format!(
            "grid_size {} below minimum {}",
            grid_size, MIN_GRID
        )));
    }
    let g = grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
    let r = (g / 8).max(1) as isize;
    let clamp = |v: isize| v.clamp(0, g as isize - 1) as usize;
    let mut horiz = vec![0.0f64; g * g];
    for i in 0..g {
        for j in 0..g {
            let mut acc = 0.0;
            for dj in -r..=r {
                acc += noise[i * g + clamp(j as isize + dj)];
            }
            horiz[i * g + j] = acc / (2 * r + 1) as f64;
        }
    }
    let mut blurred = vec![0.0f64; g * g];
    for i in 0..g {
        for j in 0..g {
            let mut acc = 0.0;
            for di in -r..=r {
                acc += horiz[clamp(i as isize + di) * g + j];
            }
            blurred[i * g + j] = acc / (2 * r + 1) as f64;
        }
    }
    let mut sorted = blurred.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("noise is finite"));
    let median = sorted[g * g / 2];
    let field: Vec<f64> = blurred
        .iter()
        .map(|&v| if v < median { PHASE_LOW } else { PHASE_HIGH })
        .collect();
    Tensor::new(&[g, g], field)
}

/// Conjugate gradients for a symmetric positive definite operator given as
/// `apply_a(x, out)`. Stops when ‖Ax − b‖/‖b‖ ≤ tol.
pub fn cg_solve<F>(apply_a: F, b: &[f64], tol: f64, max_iters: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0f64; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0f64; n];
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    for iter in 0..max_iters {
        if rs.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        apply_a(&p, &mut ap);
        let p_ap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(p_ap > 0.0) {
            return Err(Error::NoConvergence {
                solver: "conjugate gradients (operator not positive definite)",
                iters: iter,
                residual: rs.sqrt() / b_norm,
            });
        }
        let alpha = rs / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rs.sqrt() <= tol * b_norm {
        return Ok(x);
    }
    Err(Error::NoConvergence {
        solver: "conjugate gradients",
        iters: max_iters,
        residual: rs.sqrt() / b_norm,
    })
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Applies the interior finite-difference operator for −∇·(a∇u) with zero
/// Dirichlet boundary. `x` and `out` index the (g−2)² interior nodes
/// row-major; `coeff` is the full g×g nodal coefficient field.
fn apply_darcy_operator(coeff: &Tensor<f64>, x: &[f64], out: &mut [f64]) {
    let g = coeff.rows();
    let gi = g - 2;
    let h2 = {
        let h = 1.0 / (g - 1) as f64;
        h * h
    };
    let at = |xv: &[f64], i: usize, j: usize| -> f64 {
        // Full-grid coordinates; boundary values are zero.
        if i == 0 || j == 0 || i == g - 1 || j == g - 1 {
            0.0
        } else {
            xv[(i - 1) * gi + (j - 1)]
        }
    };
    for i in 1..g - 1 {
        for j in 1..g - 1 {
            let a0 = coeff.at2(i, j);
            let ae = harmonic(a0, coeff.at2(i, j + 1));
            let aw = harmonic(a0, coeff.at2(i, j - 1));
            let an = harmonic(a0, coeff.at2(i - 1, j));
            let asn = harmonic(a0, coeff.at2(i + 1, j));
            let u0 = at(x, i, j);
            let flux = ae * (u0 - at(x, i, j + 1))
                + aw * (u0 - at(x, i, j - 1))
                + an * (u0 - at(x, i - 1, j))
                + asn * (u0 - at(x, i + 1, j));
            out[(i - 1) * gi + (j - 1)] = flux / h2;
        }
    }
}

/// Solves −∇·(a∇u) = 1, u = 0 on the boundary, for a nodal coefficient
/// field. Returns the g×g solution grid including the zero boundary.
pub fn solve_darcy(coeff: &Tensor<f64>) -> Result<Tensor<f64>> {
    let g = coeff.rows();
    if coeff.rank() != 2 || coeff.cols() != g {
        return Err(Error::shape("solve_darcy", format!("{:?}", coeff.shape())));
    }
    if coeff.data().iter().any(|&a| !(a > 0.0)) {
        return Err(Error::invalid_value(
            "solve_darcy",
            "coefficient field must be strictly positive",
        ));
    }
    let gi = g - 2;
    let b = vec![1.0f64; gi * gi];
    let x = cg_solve(
        |v, out| apply_darcy_operator(coeff, v, out),
        &b,
        CG_TOL,
        CG_MAX_ITERS,
    )?;
    let mut u = Tensor::zeros(&[g, g]);
    for i in 0..gi {
        for j in 0..gi {
            u.set2(i + 1, j + 1, x[i * gi + j]);
        }
    }
    Ok(u)
}

/// One synthetic sample on a g×g grid: N = g² points with coordinates
/// (x, y) = (j, i)/(g−1), features (x, y, a) and label u.
pub fn generate_darcy_sample(grid_size: usize, seed: u64) -> Result<Sample> {
    let coeff = coefficient_field(grid_size, seed)?;
    let u = solve_darcy(&coeff)?;
    let g = grid_size;
    let n = g * g;
    let step = 1.0 / (g - 1) as f64;
    let mut coords = Tensor::zeros(&[n, 2]);
    let mut features = Tensor::zeros(&[n, 3]);
    let mut labels = Tensor::zeros(&[n, 1]);
    for i in 0..g {
        for j in 0..g {
            let p = i * g + j;
            let (x, y) = (j as f64 * step, i as f64 * step);
            coords.set2(p, 0, x);
            coords.set2(p, 1, y);
            features.set2(p, 0, x);
            features.set2(p, 1, y);
            features.set2(p, 2, coeff.at2(i, j));
            labels.set2(p, 0, u.at2(i, j));
        }
    }
    let sample = Sample {
        coords,
        features,
        labels,
    };
    sample.validate()?;
    Ok(sample)
}

/// `count` samples with seeds `first_seed`, `first_seed+1`, …; disjoint
/// splits come from disjoint seed ranges.
pub fn generate_darcy_dataset(grid_size: usize, count: usize, first_seed: u64) -> Result<Dataset> {
    let samples: Result<Vec<Sample>> = crate::parallel::map_indexed(count, |i| {
        generate_darcy_sample(grid_size, first_seed.wrapping_add(i as u64))
    })
    .into_iter()
    .collect();
    Ok(Dataset { samples: samples? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_is_binary_and_roughly_balanced() {
        let g = 32;
        let field = coefficient_field(g, 11).unwrap();
        let mut low = 0;
        let mut high = 0;
        for &a in field.data() {
            if a == PHASE_LOW {
                low += 1;
            } else if a == PHASE_HIGH {
                high += 1;
            } else {
                panic!("unexpected phase value {}", a);
            }
        }
        assert_eq!(low + high, g * g);
        let imbalance = (low as f64 - high as f64).abs() / (g * g) as f64;
        assert!(imbalance < 0.1, "split {} vs {}", low, high);
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(matches!(
            coefficient_field(4, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_darcy_sample(16, 5).unwrap();
        let b = generate_darcy_sample(16, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_darcy_sample(16, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cg_identity_converges_immediately() {
        let b = vec![1.0, -2.0, 3.0];
        let x = cg_solve(|v, out| out.copy_from_slice(v), &b, 1e-12, 5).unwrap();
        for (a, e) in x.iter().zip(&b) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_analytic_2x2() {
        let apply = |v: &[f64], out: &mut [f64]| {
            out[0] = 4.0 * v[0] + v[1];
            out[1] = v[0] + 3.0 * v[1];
        };
        let x = cg_solve(apply, &[1.0, 2.0], 1e-14, 50).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn cg_matches_dense_direct_solve() {
        use rand::{Rng, SeedableRng};
        let n = 50;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        // SPD by construction: BᵀB + n·I.
        let b_mat: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b_mat[k * n + i] * b_mat[k * n + j];
                }
                a[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Oracle: Gaussian elimination with partial pivoting.
        let mut aug = vec![0.0f64; n * (n + 1)];
        for i in 0..n {
            aug[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&a[i * n..(i + 1) * n]);
            aug[i * (n + 1) + n] = rhs[i];
        }
        let w = n + 1;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&p, &q| {
                    aug[p * w + col]
                        .abs()
                        .partial_cmp(&aug[q * w + col].abs())
                        .unwrap()
                })
                .unwrap();
            if pivot != col {
                for k in 0..w {
                    aug.swap(col * w + k, pivot * w + k);
                }
            }
            for row in col + 1..n {
                let f = aug[row * w + col] / aug[col * w + col];
                for k in col..w {
                    aug[row * w + k] -= f * aug[col * w + k];
                }
            }
        }
        let mut x_direct = vec![0.0f64; n];
        for row in (0..n).rev() {
            let mut s = aug[row * w + n];
            for k in row + 1..n {
                s -= aug[row * w + k] * x_direct[k];
            }
            x_direct[row] = s / aug[row * w + row];
        }

        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s += a[i * n + j] * v[j];
                }
                out[i] = s;
            }
        };
        let x_cg = cg_solve(apply, &rhs, 1e-12, 2000).unwrap();
        for (c, d) in x_cg.iter().zip(&x_direct) {
            assert!((c - d).abs() < 1e-8, "{} vs {}", c, d);
        }
    }

    #[test]
    fn cg_reports_nonconvergence() {
        // Indefinite operator trips the positive definiteness guard.
        let apply = |v: &[f64], out: &mut [f64]| {
            out[0] = -v[0];
            out[1] = v[1];
        };
        assert!(matches!(
            cg_solve(apply, &[1.0, 1.0], 1e-12, 3),
            Err(Error::NoConvergence { .. })
        ));
    }

    #[test]
    fn solution_satisfies_discrete_system() {
        let g = 24;
        let coeff = coefficient_field(g, 3).unwrap();
        let u = solve_darcy(&coeff).unwrap();
        let gi = g - 2;
        let mut interior = vec![0.0f64; gi * gi];
        for i in 0..gi {
            for j in 0..gi {
                interior[i * gi + j] = u.at2(i + 1, j + 1);
            }
        }
        let mut au = vec![0.0f64; gi * gi];
        apply_darcy_operator(&coeff, &interior, &mut au);
        let res: f64 = au.iter().map(|&v| (v - 1.0) * (v - 1.0)).sum::<f64>().sqrt();
        let b_norm = (gi * gi) as f64;
        assert!(
            res / b_norm.sqrt() <= 1e-8,
            "relative residual {}",
            res / b_norm.sqrt()
        );
    }

    #[test]
    fn solution_respects_maximum_principle() {
        let g = 20;
        let sample = generate_darcy_sample(g, 9).unwrap();
        let u = sample.labels.data();
        // Positive source and zero Dirichlet data: interior strictly
        // positive, boundary exactly zero.
        for i in 0..g {
            for j in 0..g {
                let v = u[i * g + j];
                if i == 0 || j == 0 || i == g - 1 || j == g - 1 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0, "interior node ({},{}) has u = {}", i, j, v);
                }
            }
        }
        let max = u.iter().cloned().fold(0.0f64, f64::max);
        assert!(max > 0.0);
    }

    #[test]
    fn scaling_both_phases_scales_solution_inversely() {
        let g = 16;
        let coeff = coefficient_field(g, 14).unwrap();
        let u1 = solve_darcy(&coeff).unwrap();
        let c = 2.5;
        let scaled = coeff.map(|a| c * a);
        let u2 = solve_darcy(&scaled).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in u1.data().iter().zip(u2.data()) {
            if *a != 0.0 {
                worst = worst.max((c * b - a).abs() / a.abs());
            }
        }
        assert!(worst <= 1e-8, "relative deviation {}", worst);
    }

    #[test]
    fn sample_layout_and_coordinates() {
        let g = 8;
        let s = generate_darcy_sample(g, 1).unwrap();
        assert_eq!(s.coords.shape(), &[64, 2]);
        assert_eq!(s.features.shape(), &[64, 3]);
        assert_eq!(s.labels.shape(), &[64, 1]);
        // Point p = i·g + j sits at (x, y) = (j, i)/(g−1).
        let p = 2 * g + 5;
        assert!((s.coords.at2(p, 0) - 5.0 / 7.0).abs() < 1e-15);
        assert!((s.coords.at2(p, 1) - 2.0 / 7.0).abs() < 1e-15);
        // Features repeat the coordinates and append the coefficient.
        assert_eq!(s.features.at2(p, 0), s.coords.at2(p, 0));
        assert_eq!(s.features.at2(p, 1), s.coords.at2(p, 1));
        assert!(s.features.at2(p, 2) == PHASE_LOW || s.features.at2(p, 2) == PHASE_HIGH);
    }

    #[test]
    fn dataset_uses_consecutive_seeds() {
        let ds = generate_darcy_dataset(8, 3, 100).unwrap();
        assert_eq!(ds.len(), 3);
        let direct = generate_darcy_sample(8, 101).unwrap();
        assert_eq!(ds.samples[1], direct);
    }
}
