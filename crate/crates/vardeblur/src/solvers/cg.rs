//! Conjugate gradient on SPD systems, matrix-free.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iters: usize,
    pub rel_residual: f64,
}

/// Solve A x = b for SPD A given as a closure, warm-started at x0. Stops at
/// `tol` relative residual or `max_iters`. A residual norm that grows for 5
/// consecutive iterations aborts with a diagnostic; `on_iter` sees every
/// iterate (used by tests to track the quadratic's value).
pub fn solve_spd(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: &[f64],
    tol: f64,
    max_iters: usize,
    mut on_iter: impl FnMut(&[f64]),
) -> Result<(Vec<f64>, CgStats)> {
    let n = b.len();
    assert_eq!(x0.len(), n);
    let mut x = x0.to_vec();
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let b_norm = norm(b).max(1e-300);
    let mut rs_old = dot(&r, &r);
    let mut p = r.clone();
    let mut prev_res = rs_old.sqrt();
    let mut best_res = prev_res;
    let mut grew = 0usize;

    if prev_res / b_norm <= tol {
        return Ok((
            x,
            CgStats {
                iters: 0,
                rel_residual: prev_res / b_norm,
            },
        ));
    }

    for iter in 1..=max_iters {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // numerically lost positive-definiteness; stop with what we have
            return Ok((
                x,
                CgStats {
                    iters: iter - 1,
                    rel_residual: prev_res / b_norm,
                },
            ));
        }
        let alpha = rs_old / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        on_iter(&x);
        let rs_new = dot(&r, &r);
        let res = rs_new.sqrt();
        // Residual 2-norms oscillate on ill-conditioned SPD systems even
        // though the quadratic decreases, so only sustained growth well
        // above the best residual seen counts as divergence.
        if res > prev_res && res > 4.0 * best_res {
            grew += 1;
            if grew >= 5 {
                return Err(Error::CgDivergence {
                    iter,
                    grew,
                    rel_residual: res / b_norm,
                });
            }
        } else {
            grew = 0;
        }
        best_res = best_res.min(res);
        prev_res = res;
        if res / b_norm <= tol {
            return Ok((
                x,
                CgStats {
                    iters: iter,
                    rel_residual: res / b_norm,
                },
            ));
        }
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    Ok((
        x,
        CgStats {
            iters: max_iters,
            rel_residual: prev_res / b_norm,
        },
    ))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small dense SPD system: A = M^T M + I.
    fn spd_apply(m: &[Vec<f64>]) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |x: &[f64]| {
            let n = x.len();
            let mut mx = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    mx[i] += m[i][j] * x[j];
                }
            }
            let mut out = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    out[i] += m[j][i] * mx[j];
                }
                out[i] += x[i];
            }
            out
        }
    }

    #[test]
    fn solves_small_system_and_quadratic_decreases_monotonically() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let m: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let apply = spd_apply(&m);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x0 = vec![0.0; n];

        let quad = |x: &[f64]| 0.5 * super::dot(x, &apply(x)) - super::dot(&b, x);
        let mut values = vec![quad(&x0)];
        let (x, stats) = solve_spd(&apply, &b, &x0, 1e-10, 200, |xi| values.push(quad(xi))).unwrap();
        assert!(stats.rel_residual <= 1e-10);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "quadratic must not increase: {w:?}");
        }
        let ax = apply(&x);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn warm_start_at_solution_exits_immediately() {
        let apply = |x: &[f64]| x.to_vec(); // identity system
        let b = vec![1.0, 2.0, 3.0];
        let (x, stats) = solve_spd(apply, &b, &b, 1e-8, 10, |_| {}).unwrap();
        assert_eq!(stats.iters, 0);
        assert_eq!(x, b);
    }
}
