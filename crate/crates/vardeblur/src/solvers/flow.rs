//! Flow sub-solver: linearization of the non-convex temporal + data
//! coupling around the current flow, then an edge-weighted TV primal-dual
//! drift step with a trust-region clamp.

use crate::energy::{charbonnier_deriv, EnergyParams, INTENSITY_RESIDUAL_WEIGHT};
use crate::grid::{in_rect, spatial_gradient, FlowField, Image};
use crate::ops::{build_defocus_op, build_motion_blur_op, LinearOperator};
use crate::solvers::{cp_drift_field, PDConfig};
use crate::state::SequenceState;

/// Largest per-level flow change the linearization is trusted for.
pub const FLOW_STEP_CLAMP: f64 = 1.0;

/// Central-difference step (pixels) for the kernel's flow dependence.
pub const FLOW_FD_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDir {
    Fwd,
    Bwd,
}

/// Warm-started dual variables for one directional flow (u and v planes).
#[derive(Debug, Clone)]
pub struct FlowDuals {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowDuals {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowDuals {
            u: vec![0.0; 2 * width * height],
            v: vec![0.0; 2 * width * height],
        }
    }
}

/// Derivative of the bilinear interpolant of `img` at a sample position,
/// taken inside the sample's cell. Matches what central differences of the
/// interpolated value converge to away from cell boundaries.
#[inline]
fn interp_gradient(img: &Image, c: usize, sx: f64, sy: f64) -> (f64, f64) {
    let w = img.width();
    let h = img.height();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p = img.plane(c);
    let v00 = p[y0 * w + x0];
    let v10 = p[y0 * w + x0 + 1];
    let v01 = p[(y0 + 1) * w + x0];
    let v11 = p[(y0 + 1) * w + x0 + 1];
    let gx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let gy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    (gx, gy)
}

/// Per-pixel data residual map of one frame:
/// lambda * sum_d sum_c (d(KG L) - d B)^2 (+ optional intensity residual).
fn data_residual_map(kgl: &Image, b: &Image, params: &EnergyParams) -> Vec<f64> {
    let (dxk, dyk) = spatial_gradient(kgl);
    let (dxb, dyb) = spatial_gradient(b);
    let npx = kgl.num_pixels();
    let mut out = vec![0.0; npx];
    for c in 0..kgl.channels() {
        let kx = dxk.plane(c);
        let ky = dyk.plane(c);
        let bx = dxb.plane(c);
        let by = dyb.plane(c);
        for p in 0..npx {
            let rx = kx[p] - bx[p];
            let ry = ky[p] - by[p];
            out[p] += rx * rx + ry * ry;
        }
        if params.intensity_residual {
            let kp = kgl.plane(c);
            let bp = b.plane(c);
            for p in 0..npx {
                let r = kp[p] - bp[p];
                out[p] += INTENSITY_RESIDUAL_WEIGHT * r * r;
            }
        }
    }
    for v in &mut out {
        *v *= params.lambda;
    }
    out
}

/// Gradient of the linearized flow coupling at the current flow of frame
/// `i` in direction `dir`: the analytic Charbonnier brightness-constancy
/// derivative plus a diagonal central-difference probe of the kernel's
/// dependence on the flow (all pixels perturbed simultaneously).
pub fn linearize_rho_u(
    state: &SequenceState,
    params: &EnergyParams,
    i: usize,
    dir: FlowDir,
) -> Vec<(f64, f64)> {
    let (w, h) = state.dims();
    let npx = w * h;
    let mut grad = vec![(0.0, 0.0); npx];
    let f = &state.frames[i];
    let flow0 = match dir {
        FlowDir::Fwd => f.u_fwd.as_ref(),
        FlowDir::Bwd => f.u_bwd.as_ref(),
    };
    let Some(flow0) = flow0 else {
        return grad;
    };
    let target_idx = match dir {
        FlowDir::Fwd => i + 1,
        FlowDir::Bwd => i.wrapping_sub(1),
    };

    // temporal part, for the unit-step neighbor this flow points at
    if target_idx < state.num_frames() {
        let lt = &state.frames[target_idx].l;
        let li = &f.l;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (du, dv) = flow0.at(x, y);
                let sx = x as f64 + du;
                let sy = y as f64 + dv;
                if !in_rect(sx, sy, w, h) {
                    continue;
                }
                let mut gx_acc = 0.0;
                let mut gy_acc = 0.0;
                for c in 0..li.channels() {
                    let sampled = crate::grid::sample_bilinear(lt, c, sx, sy);
                    let d = charbonnier_deriv(li.plane(c)[p] - sampled, params.charbonnier_eps);
                    let (gx, gy) = interp_gradient(lt, c, sx, sy);
                    gx_acc += d * (-gx);
                    gy_acc += d * (-gy);
                }
                grad[p].0 += params.mu * gx_acc;
                grad[p].1 += params.mu * gy_acc;
            }
        }
    }

    // data part through the kernel, diagonal central differences
    if params.lambda > 0.0 {
        let (fwd0, bwd0) = state.kernel_flows(i);
        let gl = if state.enable_defocus {
            build_defocus_op(&f.sigma).expect("sigma is non-negative").apply(&f.l)
        } else {
            f.l.clone()
        };
        let h_fd = FLOW_FD_STEP;
        let probe = |flow_perturbed: &FlowField, other: &FlowField, swap: bool| -> Vec<f64> {
            let (pf, pb) = if swap {
                (other, flow_perturbed)
            } else {
                (flow_perturbed, other)
            };
            let k = build_motion_blur_op(pf, pb, f.tau).expect("finite flows");
            data_residual_map(&k.apply(&gl), &f.b, params)
        };
        let (base, other, swap) = match dir {
            FlowDir::Fwd => (&fwd0, &bwd0, false),
            FlowDir::Bwd => (&bwd0, &fwd0, true),
        };
        for comp in 0..2 {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let (pu, pv) = (&mut plus.u, &mut plus.v);
            let (mu_, mv) = (&mut minus.u, &mut minus.v);
            if comp == 0 {
                pu.iter_mut().for_each(|x| *x += h_fd);
                mu_.iter_mut().for_each(|x| *x -= h_fd);
            } else {
                pv.iter_mut().for_each(|x| *x += h_fd);
                mv.iter_mut().for_each(|x| *x -= h_fd);
            }
            let e_plus = probe(&plus, other, swap);
            let e_minus = probe(&minus, other, swap);
            for p in 0..npx {
                let g = (e_plus[p] - e_minus[p]) / (2.0 * h_fd);
                if comp == 0 {
                    grad[p].0 += g;
                } else {
                    grad[p].1 += g;
                }
            }
        }
    }

    grad
}

/// Primal-dual drift step on one directional flow with edge-weighted TV,
/// followed by the per-pixel trust-region clamp |u - u0| <= 1 px.
pub fn update_flow(
    u0: &FlowField,
    grad: &[(f64, f64)],
    edge_map: &Image,
    nu_u: f64,
    pd: &PDConfig,
    duals: &mut FlowDuals,
) -> FlowField {
    let w = u0.width();
    let h = u0.height();
    let npx = w * h;
    assert_eq!(grad.len(), npx);
    let mut u = u0.u.clone();
    let mut v = u0.v.clone();
    let gu: Vec<f64> = grad.iter().map(|g| g.0).collect();
    let gv: Vec<f64> = grad.iter().map(|g| g.1).collect();
    cp_drift_field(&mut u, w, h, &gu, edge_map.plane(0), nu_u, pd, &mut duals.u);
    cp_drift_field(&mut v, w, h, &gv, edge_map.plane(0), nu_u, pd, &mut duals.v);
    // trust region for the Taylor linearization
    for p in 0..npx {
        let du = u[p] - u0.u[p];
        let dv = v[p] - u0.v[p];
        let norm = (du * du + dv * dv).sqrt();
        if norm > FLOW_STEP_CLAMP {
            let s = FLOW_STEP_CLAMP / norm;
            u[p] = u0.u[p] + du * s;
            v[p] = u0.v[p] + dv * s;
        }
    }
    let mut out = FlowField::new(w, h);
    out.u = u;
    out.v = v;
    out
}
