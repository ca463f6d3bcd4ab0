//! The three alternating sub-solvers: latent-frame restoration, flow
//! update, and defocus-scale update. Each follows the same first-order
//! primal-dual pattern: dual ascent with a pointwise projection onto the
//! unit ball, then a primal step (a CG-solved proximal quadratic for the
//! latent frames, an explicit drift step for the fields).

mod cg;
mod flow;
mod latent;
mod sigma;

pub use cg::{solve_spd, CgStats};
pub use flow::{linearize_rho_u, update_flow, FlowDir, FlowDuals};
pub use latent::{restore_latent, LatentDuals, RestoreStats, TemporalDiffOp, TemporalEntry};
pub use sigma::{linearize_rho_sigma, update_sigma};

/// Step sizes and iteration budgets for one primal-dual sub-solver.
///
/// The steps must satisfy eta * epsilon * |K|^2 <= 1 for the operator K the
/// dual ascends on; `for_fields` and `for_latent` bake in the norm bounds of
/// the respective schemes.
#[derive(Debug, Clone)]
pub struct PDConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl PDConfig {
    /// Steps for the flow/sigma updates, where the dual operator is
    /// nu * W * A with |A|^2 <= 8 and W <= 1.
    pub fn for_fields(nu: f64, iters: usize) -> Self {
        let l = (8.0f64).sqrt() * nu.max(1e-12);
        PDConfig {
            eta: 1.0 / l,
            epsilon: 1.0 / l,
            iters,
            cg_iters: 50,
            cg_tol: 1e-4,
        }
    }

    /// Steps for latent restoration, where the dual operator stacks the
    /// spatial differences (norm^2 <= 8) with mu * D. Rows of D hold one
    /// unit entry plus four bilinear weights summing to one, and smooth
    /// flows scatter at most a few rows onto one source pixel, giving
    /// |D|^2 <~ 10 * N per direction pair; the bound below is conservative.
    pub fn for_latent(mu: f64, n_radius: usize, iters: usize) -> Self {
        let l2 = 8.0 + mu * mu * 10.0 * (2 * n_radius.max(1)) as f64;
        let l = l2.sqrt();
        PDConfig {
            eta: 1.0 / l,
            epsilon: 1.0 / l,
            iters,
            cg_iters: 50,
            cg_tol: 1e-4,
        }
    }
}

/// Project each per-pixel 2-vector onto the unit disc: z / max(1, |z|).
#[inline]
pub(crate) fn project_disc(zx: &mut f64, zy: &mut f64) {
    let norm = (*zx * *zx + *zy * *zy).sqrt();
    if norm > 1.0 {
        *zx /= norm;
        *zy /= norm;
    }
}

/// One primal-dual pass on a scalar field with edge-weighted TV and a
/// frozen gradient drift term:
///   p <- project(p + eta * nu * W * A fbar)
///   f <- f - epsilon * ((nu * W * A)^T p + grad)
/// where fbar = 2 f^m - f^{m-1} is the over-relaxed primal the cited
/// first-order scheme ascends on; without it the plain two-line iteration
/// oscillates and TV does not descend. `dual` holds the (px, py) planes
/// back to back and is warm-started by the caller within a pyramid level.
pub(crate) fn cp_drift_field(
    field: &mut [f64],
    width: usize,
    height: usize,
    grad: &[f64],
    weight: &[f64],
    nu: f64,
    pd: &PDConfig,
    dual: &mut [f64],
) {
    let npx = width * height;
    assert_eq!(field.len(), npx);
    assert_eq!(grad.len(), npx);
    assert_eq!(weight.len(), npx);
    assert_eq!(dual.len(), 2 * npx);

    let mut prev = field.to_vec();
    let mut wpx = vec![0.0; npx];
    let mut wpy = vec![0.0; npx];
    for _ in 0..pd.iters {
        // dual ascent on the weighted forward differences of 2 f - f_prev
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let fb = |j: usize| 2.0 * field[j] - prev[j];
                let dx = if x + 1 < width { fb(i + 1) - fb(i) } else { 0.0 };
                let dy = if y + 1 < height {
                    fb(i + width) - fb(i)
                } else {
                    0.0
                };
                let scale = pd.eta * nu * weight[i];
                dual[i] += scale * dx;
                dual[npx + i] += scale * dy;
                let (mut zx, mut zy) = (dual[i], dual[npx + i]);
                project_disc(&mut zx, &mut zy);
                dual[i] = zx;
                dual[npx + i] = zy;
            }
        }
        prev.copy_from_slice(field);
        // primal descent: adjoint of the weighted differences plus drift
        for i in 0..npx {
            let s = nu * weight[i];
            wpx[i] = s * dual[i];
            wpy[i] = s * dual[npx + i];
        }
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let mut div = 0.0;
                if x + 1 < width {
                    div -= wpx[i];
                }
                if x > 0 {
                    div += wpx[i - 1];
                }
                if y + 1 < height {
                    div -= wpy[i];
                }
                if y > 0 {
                    div += wpy[i - width];
                }
                field[i] -= pd.epsilon * (div + grad[i]);
            }
        }
    }
}
