//! Evaluation of every term of the objective: the derivative-domain data
//! term, the flow-coupled temporal term, the TV priors with their edge
//! maps, and the exact-L1 restoration objective used for descent checks.
//! This module is the single source of truth the solvers are tested against.

use serde::Serialize;

use crate::grid::{spatial_gradient, warp_bilinear, Image};
use crate::ops::{BlurChain, LinearOperator};
use crate::state::SequenceState;

/// Weight the optional raw-intensity residual carries relative to lambda
/// when enabled; the derivative-only data term leaves per-frame DC
/// unconstrained.
pub const INTENSITY_RESIDUAL_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct EnergyParams {
    pub lambda: f64,
    pub mu: f64,
    pub nu_u: f64,
    pub nu_sigma: f64,
    pub v_i: f64,
    pub n_radius: usize,
    pub charbonnier_eps: f64,
    pub intensity_residual: bool,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            lambda: 250.0,
            mu: 2.0,
            nu_u: 0.08 * 250.0,
            nu_sigma: 0.08 * 250.0,
            v_i: (25.0 / 255.0) * (25.0 / 255.0),
            n_radius: 2,
            charbonnier_eps: 1e-3,
            intensity_residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyBreakdown {
    pub data: f64,
    pub temporal: f64,
    pub spatial_l: f64,
    pub spatial_u: f64,
    pub spatial_sigma: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn assemble(data: f64, temporal: f64, spatial_l: f64, spatial_u: f64, spatial_sigma: f64) -> Self {
        EnergyBreakdown {
            data,
            temporal,
            spatial_l,
            spatial_u,
            spatial_sigma,
            total: data + temporal + spatial_l + spatial_u + spatial_sigma,
        }
    }
}

#[inline]
pub fn charbonnier(t: f64, eps: f64) -> f64 {
    (t * t + eps * eps).sqrt() - eps
}

#[inline]
pub fn charbonnier_deriv(t: f64, eps: f64) -> f64 {
    t / (t * t + eps * eps).sqrt()
}

/// Edge weights g = exp(-|grad L0|^2 / v_I) on luminance; 1 on flat areas,
/// small across edges.
pub fn edge_map(l0: &Image, v_i: f64) -> Image {
    assert!(v_i > 0.0);
    let lum = l0.luminance();
    let (dx, dy) = spatial_gradient(&lum);
    let mut out = Image::new(l0.width(), l0.height(), 1);
    for i in 0..out.num_pixels() {
        let g2 = dx.data()[i] * dx.data()[i] + dy.data()[i] * dy.data()[i];
        out.data_mut()[i] = (-g2 / v_i).exp();
    }
    out
}

/// Squared derivative-domain residual of one frame:
/// sum_d |d(KG L) - d B|^2 (+ the optional intensity residual), unweighted.
pub fn frame_data_residual(op: &dyn LinearOperator, l: &Image, b: &Image, intensity: bool) -> f64 {
    let kgl = op.apply(l);
    let (dxk, dyk) = spatial_gradient(&kgl);
    let (dxb, dyb) = spatial_gradient(b);
    let mut acc = 0.0;
    for i in 0..kgl.data().len() {
        let rx = dxk.data()[i] - dxb.data()[i];
        let ry = dyk.data()[i] - dyb.data()[i];
        acc += rx * rx + ry * ry;
        if intensity {
            let r = kgl.data()[i] - b.data()[i];
            acc += INTENSITY_RESIDUAL_WEIGHT * r * r;
        }
    }
    acc
}

pub fn data_energy_with_ops(state: &SequenceState, ops: &[BlurChain], params: &EnergyParams) -> f64 {
    let mut acc = 0.0;
    for (i, f) in state.frames.iter().enumerate() {
        acc += frame_data_residual(&ops[i], &f.l, &f.b, params.intensity_residual);
    }
    params.lambda * acc
}

pub fn data_energy(state: &SequenceState, params: &EnergyParams) -> f64 {
    let ops = state.build_blur_ops().expect("state flows are finite");
    data_energy_with_ops(state, &ops, params)
}

/// Charbonnier-smoothed brightness-constancy penalty over the temporal
/// neighborhood, masked where a warp leaves the image or a frame is absent.
pub fn temporal_energy(state: &SequenceState, params: &EnergyParams) -> f64 {
    temporal_penalty(state, params, |t| charbonnier(t, params.charbonnier_eps))
}

fn temporal_penalty(state: &SequenceState, params: &EnergyParams, rho: impl Fn(f64) -> f64) -> f64 {
    let mut acc = 0.0;
    let n_radius = params.n_radius as i32;
    for i in 0..state.num_frames() {
        for n in -n_radius..=n_radius {
            if n == 0 {
                continue;
            }
            let Some((flow, chain_mask)) = state.flow_to_neighbor(i, n) else {
                continue;
            };
            let target = (i as i32 + n) as usize;
            let (warped, warp_mask) = warp_bilinear(&state.frames[target].l, &flow)
                .expect("state dims are consistent");
            let mask = chain_mask.intersect(&warp_mask);
            let l_i = &state.frames[i].l;
            let npx = l_i.num_pixels();
            for c in 0..l_i.channels() {
                let a = l_i.plane(c);
                let b = warped.plane(c);
                for p in 0..npx {
                    if mask.data[p] {
                        acc += rho(a[p] - b[p]);
                    }
                }
            }
        }
    }
    params.mu * acc
}

/// Isotropic TV with Charbonnier smoothing, optionally weighted per pixel.
fn tv_charbonnier(img: &Image, eps: f64, weight: Option<&Image>) -> f64 {
    let (dx, dy) = spatial_gradient(img);
    let npx = img.num_pixels();
    let mut acc = 0.0;
    for c in 0..img.channels() {
        let gx = dx.plane(c);
        let gy = dy.plane(c);
        for p in 0..npx {
            let tv = (gx[p] * gx[p] + gy[p] * gy[p] + eps * eps).sqrt() - eps;
            acc += weight.map_or(tv, |w| w.data()[p] * tv);
        }
    }
    acc
}

/// (spatial_L, spatial_u, spatial_sigma) of the current state. Edge maps are
/// the per-frame weights frozen at level entry.
pub fn spatial_energy(
    state: &SequenceState,
    params: &EnergyParams,
    edge_maps: &[Image],
) -> (f64, f64, f64) {
    let eps = params.charbonnier_eps;
    let mut s_l = 0.0;
    let mut s_u = 0.0;
    let mut s_sig = 0.0;
    let (w, h) = state.dims();
    for (i, f) in state.frames.iter().enumerate() {
        let g = &edge_maps[i];
        s_l += tv_charbonnier(&f.l, eps, None);
        for flow in [&f.u_fwd, &f.u_bwd].into_iter().flatten() {
            let u_img = Image::from_data(w, h, 1, flow.u.clone());
            let v_img = Image::from_data(w, h, 1, flow.v.clone());
            s_u += tv_charbonnier(&u_img, eps, Some(g)) + tv_charbonnier(&v_img, eps, Some(g));
        }
        let sig_img = Image::from_data(w, h, 1, f.sigma.sigma.clone());
        s_sig += tv_charbonnier(&sig_img, eps, Some(g));
    }
    (s_l, params.nu_u * s_u, params.nu_sigma * s_sig)
}

pub fn total_energy_with_ops(
    state: &SequenceState,
    ops: &[BlurChain],
    params: &EnergyParams,
    edge_maps: &[Image],
) -> EnergyBreakdown {
    let data = data_energy_with_ops(state, ops, params);
    let temporal = temporal_energy(state, params);
    let (s_l, s_u, s_sig) = spatial_energy(state, params, edge_maps);
    EnergyBreakdown::assemble(data, temporal, s_l, s_u, s_sig)
}

pub fn total_energy(
    state: &SequenceState,
    params: &EnergyParams,
    edge_maps: &[Image],
) -> EnergyBreakdown {
    let ops = state.build_blur_ops().expect("state flows are finite");
    total_energy_with_ops(state, &ops, params, edge_maps)
}

/// The latent-restoration objective with exact (non-smoothed) L1 terms:
/// quadratic data residual + plain isotropic TV of L + absolute temporal
/// differences. Used to check non-increase across a restoration sub-solve.
pub fn restoration_objective(
    state: &SequenceState,
    ops: &[BlurChain],
    params: &EnergyParams,
) -> f64 {
    let data = data_energy_with_ops(state, ops, params);
    let mut tv = 0.0;
    for f in &state.frames {
        tv += tv_charbonnier(&f.l, 0.0, None);
    }
    let temporal = temporal_penalty(state, params, f64::abs);
    data + tv + temporal
}
