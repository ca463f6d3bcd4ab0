//! Latent-frame restoration: dual ascent on the spatial and temporal
//! difference operators, then a CG-solved proximal quadratic for the
//! frames themselves.

use rayon::prelude::*;

use crate::energy::{restoration_objective, EnergyParams, INTENSITY_RESIDUAL_WEIGHT};
use crate::error::Result;
use crate::grid::{gradient_adjoint, in_rect, spatial_gradient, FlowField, Image, Mask};
use crate::ops::LinearOperator;
use crate::solvers::{project_disc, PDConfig};
use crate::state::SequenceState;

/// Bilinear corner indices and weights for a clamped sample position,
/// consistent with `grid::sample_bilinear`.
#[inline]
pub(crate) fn bilinear_weights(w: usize, h: usize, sx: f64, sy: f64) -> [(usize, f64); 4] {
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// One row group of the temporal difference operator: frame -> neighbor
/// along a fixed (possibly chained) flow.
#[derive(Debug, Clone)]
pub struct TemporalEntry {
    pub frame: usize,
    pub target: usize,
    pub flow: FlowField,
    pub mask: Mask,
}

/// The operator D of the restoration scheme:
/// (D L)_{i,n}(x) = L_i(x) - L_{i+n}(x + u_{i->i+n}), rows masked to zero
/// where the warp leaves the image.
pub struct TemporalDiffOp {
    pub entries: Vec<TemporalEntry>,
    num_frames: usize,
    channels: usize,
    width: usize,
    height: usize,
}

impl TemporalDiffOp {
    pub fn from_state(state: &SequenceState, n_radius: usize) -> Self {
        let (width, height) = state.dims();
        let mut entries = Vec::new();
        for i in 0..state.num_frames() {
            for n in -(n_radius as i32)..=(n_radius as i32) {
                if n == 0 {
                    continue;
                }
                if let Some((flow, chain_mask)) = state.flow_to_neighbor(i, n) {
                    // restrict rows to samples that land inside the image
                    let mut mask = chain_mask;
                    for y in 0..height {
                        for x in 0..width {
                            let (du, dv) = flow.at(x, y);
                            if !in_rect(x as f64 + du, y as f64 + dv, width, height) {
                                mask.data[y * width + x] = false;
                            }
                        }
                    }
                    entries.push(TemporalEntry {
                        frame: i,
                        target: (i as i32 + n) as usize,
                        flow,
                        mask,
                    });
                }
            }
        }
        TemporalDiffOp {
            entries,
            num_frames: state.num_frames(),
            channels: state.frames[0].l.channels(),
            width,
            height,
        }
    }

    pub fn apply(&self, latents: &[Image]) -> Vec<Image> {
        let w = self.width;
        let h = self.height;
        self.entries
            .iter()
            .map(|e| {
                let li = &latents[e.frame];
                let lt = &latents[e.target];
                let mut out = li.zeros_like();
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        if !e.mask.data[p] {
                            continue;
                        }
                        let (du, dv) = e.flow.at(x, y);
                        let corners = bilinear_weights(w, h, x as f64 + du, y as f64 + dv);
                        for c in 0..li.channels() {
                            let lt_p = lt.plane(c);
                            let mut sampled = 0.0;
                            for (idx, wt) in corners {
                                sampled += wt * lt_p[idx];
                            }
                            out.plane_mut(c)[p] = li.plane(c)[p] - sampled;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub fn adjoint(&self, duals: &[Image]) -> Vec<Image> {
        assert_eq!(duals.len(), self.entries.len());
        let w = self.width;
        let h = self.height;
        let channels = self.channels;
        let mut out: Vec<Image> = (0..self.num_frames)
            .map(|_| Image::new(w, h, channels))
            .collect();
        for (e, q) in self.entries.iter().zip(duals) {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    if !e.mask.data[p] {
                        continue;
                    }
                    let (du, dv) = e.flow.at(x, y);
                    let corners = bilinear_weights(w, h, x as f64 + du, y as f64 + dv);
                    for c in 0..channels {
                        let qv = q.plane(c)[p];
                        if qv == 0.0 {
                            continue;
                        }
                        out[e.frame].plane_mut(c)[p] += qv;
                        let tgt = out[e.target].plane_mut(c);
                        for (idx, wt) in corners {
                            tgt[idx] -= wt * qv;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }
}

/// Dual variables of the restoration scheme, warm-started within a pyramid
/// level and reset to zero when the level changes.
pub struct LatentDuals {
    /// Per frame: channels * 2 planes (sx, sy interleaved per channel).
    pub s: Vec<Vec<f64>>,
    /// Per temporal entry: channels planes.
    pub q: Vec<Image>,
}

impl LatentDuals {
    pub fn zeros(state: &SequenceState, n_radius: usize) -> Self {
        let (w, h) = state.dims();
        let ch = state.frames[0].l.channels();
        let dop = TemporalDiffOp::from_state(state, n_radius);
        LatentDuals {
            s: (0..state.num_frames())
                .map(|_| vec![0.0; ch * 2 * w * h])
                .collect(),
            q: (0..dop.num_entries()).map(|_| Image::new(w, h, ch)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RestoreStats {
    /// Exact-L1 restoration objective before the first iteration.
    pub objective_initial: f64,
    /// Same objective at the accepted final iterate.
    pub objective_final: f64,
    /// True when the primal-dual pass ended above its start and the input
    /// latents were kept instead.
    pub reverted: bool,
    pub cg_iters: usize,
}

/// Run `pd.iters` primal-dual iterations on the latent frames with flows
/// and sigma fixed. The final exact-L1 objective never exceeds the initial
/// one: a pass that ends higher (primal-dual iterates are not monotone) is
/// discarded in favor of the input latents.
pub fn restore_latent(
    state: &mut SequenceState,
    params: &EnergyParams,
    pd: &PDConfig,
    duals: &mut LatentDuals,
) -> Result<RestoreStats> {
    let ops = state.build_blur_ops()?;
    let dop = TemporalDiffOp::from_state(state, params.n_radius);
    let (w, h) = state.dims();
    let npx = w * h;
    let ch = state.frames[0].l.channels();
    assert_eq!(duals.s.len(), state.num_frames());
    assert_eq!(duals.q.len(), dop.num_entries());

    let objective_initial = restoration_objective(state, &ops, params);
    let l_initial: Vec<Image> = state.frames.iter().map(|f| f.l.clone()).collect();
    let mut l_prev: Vec<Image> = l_initial.clone();
    let mut cg_iters_total = 0usize;

    for _ in 0..pd.iters {
        // over-relaxed primal the duals ascend on: 2 L^m - L^{m-1}
        let l_bar: Vec<Image> = state
            .frames
            .iter()
            .zip(&l_prev)
            .map(|(f, lp)| {
                let mut lb = f.l.clone();
                for (v, pv) in lb.data_mut().iter_mut().zip(lp.data()) {
                    *v = 2.0 * *v - pv;
                }
                lb
            })
            .collect();

        // dual ascent on s: spatial differences, disc projection
        for (i, lb) in l_bar.iter().enumerate() {
            let (dx, dy) = spatial_gradient(lb);
            let s = &mut duals.s[i];
            for c in 0..ch {
                let gx = dx.plane(c);
                let gy = dy.plane(c);
                let base_x = (c * 2) * npx;
                let base_y = (c * 2 + 1) * npx;
                for p in 0..npx {
                    s[base_x + p] += pd.eta * gx[p];
                    s[base_y + p] += pd.eta * gy[p];
                    let (mut zx, mut zy) = (s[base_x + p], s[base_y + p]);
                    project_disc(&mut zx, &mut zy);
                    s[base_x + p] = zx;
                    s[base_y + p] = zy;
                }
            }
        }

        // dual ascent on q: temporal differences, per-component projection
        let dl = dop.apply(&l_bar);
        for (e_idx, entry) in dop.entries.iter().enumerate() {
            let q = &mut duals.q[e_idx];
            for c in 0..ch {
                let d = dl[e_idx].plane(c);
                let qp = q.plane_mut(c);
                for p in 0..npx {
                    if entry.mask.data[p] {
                        let z = qp[p] + pd.eta * params.mu * d[p];
                        qp[p] = z / z.abs().max(1.0);
                    } else {
                        qp[p] = 0.0;
                    }
                }
            }
        }

        // primal target V = L - eps (A^T s + mu D^T q)
        let dtq = dop.adjoint(&duals.q);
        let mut targets: Vec<Image> = Vec::with_capacity(state.num_frames());
        for (i, f) in state.frames.iter().enumerate() {
            let s = &duals.s[i];
            let mut sx = Image::new(w, h, ch);
            let mut sy = Image::new(w, h, ch);
            for c in 0..ch {
                sx.plane_mut(c).copy_from_slice(&s[c * 2 * npx..(c * 2 + 1) * npx]);
                sy.plane_mut(c)
                    .copy_from_slice(&s[(c * 2 + 1) * npx..(c * 2 + 2) * npx]);
            }
            let at_s = gradient_adjoint(&sx, &sy);
            let mut v = f.l.clone();
            let dtq_i = &dtq[i];
            for idx in 0..v.data().len() {
                v.data_mut()[idx] -=
                    pd.epsilon * (at_s.data()[idx] + params.mu * dtq_i.data()[idx]);
            }
            targets.push(v);
        }

        l_prev = state.frames.iter().map(|f| f.l.clone()).collect();

        // primal step: per frame and channel, solve the proximal quadratic
        //   (lambda (KG)^T M (KG) + I/(2 eps)) L = lambda (KG)^T M B + V/(2 eps)
        let tasks: Vec<(usize, usize)> = (0..state.num_frames())
            .flat_map(|i| (0..ch).map(move |c| (i, c)))
            .collect();
        let solved: Result<Vec<(usize, usize, Vec<f64>, usize)>> = tasks
            .par_iter()
            .map(|&(i, c)| {
                let op = &ops[i];
                let f = &state.frames[i];
                let plane_img = |src: &Image, c: usize| {
                    Image::from_data(w, h, 1, src.plane(c).to_vec())
                };
                let b_c = plane_img(&f.b, c);
                let v_c = plane_img(&targets[i], c);
                let l0_c = plane_img(&f.l, c);
                let inv_two_eps = 1.0 / (2.0 * pd.epsilon);
                let intensity = params.intensity_residual;

                let apply_m = |img: &Image| -> Image {
                    let (gx, gy) = spatial_gradient(img);
                    let mut m = gradient_adjoint(&gx, &gy);
                    if intensity {
                        for (mv, iv) in m.data_mut().iter_mut().zip(img.data()) {
                            *mv += INTENSITY_RESIDUAL_WEIGHT * iv;
                        }
                    }
                    m
                };
                let normal_apply = |x: &[f64]| -> Vec<f64> {
                    let xi = Image::from_data(w, h, 1, x.to_vec());
                    let kgx = op.apply(&xi);
                    let mk = apply_m(&kgx);
                    let mut out = op.adjoint(&mk);
                    for (o, xv) in out.data_mut().iter_mut().zip(x) {
                        *o = params.lambda * *o + inv_two_eps * xv;
                    }
                    out.data().to_vec()
                };
                let mb = apply_m(&b_c);
                let mut rhs = op.adjoint(&mb);
                for (r, vv) in rhs.data_mut().iter_mut().zip(v_c.data()) {
                    *r = params.lambda * *r + inv_two_eps * vv;
                }
                let (sol, stats) = crate::solvers::solve_spd(
                    normal_apply,
                    rhs.data(),
                    l0_c.data(),
                    pd.cg_tol,
                    pd.cg_iters,
                    |_| {},
                )?;
                Ok((i, c, sol, stats.iters))
            })
            .collect();
        for (i, c, sol, iters) in solved? {
            state.frames[i].l.plane_mut(c).copy_from_slice(&sol);
            cg_iters_total += iters;
        }
    }

    let objective_final = restoration_objective(state, &ops, params);
    if objective_final > objective_initial * (1.0 + 1e-6) + 1e-15 {
        for (f, l0) in state.frames.iter_mut().zip(l_initial) {
            f.l = l0;
        }
        return Ok(RestoreStats {
            objective_initial,
            objective_final: objective_initial,
            reverted: true,
            cg_iters: cg_iters_total,
        });
    }
    Ok(RestoreStats {
        objective_initial,
        objective_final,
        reverted: false,
        cg_iters: cg_iters_total,
    })
}
