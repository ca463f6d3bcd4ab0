//! End-to-end orchestration: initialization with an internal TV-L1 flow
//! bootstrap, the per-level alternation of the three sub-solvers inside the
//! coarse-to-fine loop, occlusion detection, the spatio-temporal
//! post-filter, and variable propagation between pyramid levels.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::energy::{edge_map, total_energy, EnergyBreakdown, EnergyParams};
use crate::error::{Error, Result};
use crate::grid::{resample_flow, resample_image, FlowField, Image, SigmaMap};
use crate::pyramid::build_pyramid;
use crate::solvers::{
    linearize_rho_sigma, linearize_rho_u, restore_latent, update_flow, update_sigma, FlowDir,
    FlowDuals, LatentDuals, PDConfig,
};
use crate::state::{FrameState, SequenceState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub num_levels: usize,
    pub scale: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu_u: f64,
    pub nu_sigma: f64,
    #[serde(rename = "v_I")]
    pub v_i: f64,
    #[serde(rename = "N")]
    pub n_radius: usize,
    pub tau: f64,
    pub sigma_init: f64,
    pub alternation_rounds: usize,
    pub enable_defocus: bool,
    pub sigma_w: f64,
    pub occlusion_low_weight: f64,
    pub fb_threshold: f64,
    pub pd_iters: usize,
    pub flow_pd_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub charbonnier_eps: f64,
    pub sigma_max: f64,
    pub add_intensity_residual: bool,
    pub bootstrap_rounds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let lambda = 250.0;
        PipelineConfig {
            num_levels: 17,
            scale: 0.9,
            lambda,
            mu: 2.0,
            nu_u: 0.08 * lambda,
            nu_sigma: 0.08 * lambda,
            v_i: (25.0 / 255.0) * (25.0 / 255.0),
            n_radius: 2,
            tau: 0.5,
            sigma_init: 0.8,
            alternation_rounds: 3,
            enable_defocus: true,
            sigma_w: 25.0 / 255.0,
            occlusion_low_weight: 0.01,
            fb_threshold: 0.5,
            pd_iters: 10,
            flow_pd_iters: 60,
            cg_iters: 50,
            cg_tol: 1e-4,
            charbonnier_eps: 1e-3,
            sigma_max: 5.0,
            add_intensity_residual: false,
            bootstrap_rounds: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.num_levels >= 1, "num_levels must be >= 1")?;
        check(self.scale > 0.0 && self.scale < 1.0, "scale must be in (0,1)")?;
        check(self.lambda > 0.0, "lambda must be > 0")?;
        check(self.mu > 0.0, "mu must be > 0")?;
        check(self.nu_u > 0.0 && self.nu_sigma > 0.0, "nu weights must be > 0")?;
        check(self.v_i > 0.0, "v_I must be > 0")?;
        check(self.n_radius >= 1, "N must be >= 1")?;
        check(self.tau > 0.0 && self.tau <= 1.0, "tau must be in (0,1]")?;
        check(self.sigma_init >= 0.0, "sigma_init must be >= 0")?;
        check(self.alternation_rounds >= 1, "alternation_rounds must be >= 1")?;
        check(self.sigma_w > 0.0, "sigma_w must be > 0")?;
        check(
            self.occlusion_low_weight > 0.0 && self.occlusion_low_weight <= 1.0,
            "occlusion_low_weight must be in (0,1]",
        )?;
        check(self.fb_threshold > 0.0, "fb_threshold must be > 0")?;
        check(self.charbonnier_eps > 0.0, "charbonnier_eps must be > 0")?;
        check(self.sigma_max > 0.0, "sigma_max must be > 0")?;
        Ok(())
    }

    pub fn energy_params(&self) -> EnergyParams {
        EnergyParams {
            lambda: self.lambda,
            mu: self.mu,
            nu_u: self.nu_u,
            nu_sigma: self.nu_sigma,
            v_i: self.v_i,
            n_radius: self.n_radius,
            charbonnier_eps: self.charbonnier_eps,
            intensity_residual: self.add_intensity_residual,
        }
    }

    fn pd_latent(&self) -> PDConfig {
        let mut pd = PDConfig::for_latent(self.mu, self.n_radius, self.pd_iters);
        pd.cg_iters = self.cg_iters;
        pd.cg_tol = self.cg_tol;
        pd
    }

    fn pd_flow(&self) -> PDConfig {
        PDConfig::for_fields(self.nu_u, self.flow_pd_iters)
    }

    fn pd_sigma(&self) -> PDConfig {
        PDConfig::for_fields(self.nu_sigma, self.flow_pd_iters)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub restore_objective_initial: f64,
    pub restore_objective_final: f64,
    pub restore_reverted: bool,
    pub flow_reverted: bool,
    pub sigma_reverted: bool,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub energy_start: EnergyBreakdown,
    /// Energy after the last alternation round, before the post-filter.
    pub energy_end: EnergyBreakdown,
    pub rounds: Vec<RoundReport>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: PipelineConfig,
    pub levels: Vec<LevelReport>,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct DeblurOutput {
    pub latents: Vec<Image>,
    pub flows_fwd: Vec<Option<FlowField>>,
    pub flows_bwd: Vec<Option<FlowField>>,
    pub sigmas: Vec<SigmaMap>,
}

/// L <- B, sigma <- sigma_init (0 with defocus off), flows <- internal
/// coarse-to-fine TV-L1 bootstrap between the blurry frames.
pub fn initialize(b_seq: &[Image], config: &PipelineConfig) -> Result<SequenceState> {
    if b_seq.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 frames, got {}",
            b_seq.len()
        )));
    }
    config.validate()?;
    let (w, h) = (b_seq[0].width(), b_seq[0].height());
    for f in b_seq {
        if f.width() != w || f.height() != h || f.channels() != b_seq[0].channels() {
            return Err(Error::DimensionMismatch {
                context: "initialize frames",
                a_w: w,
                a_h: h,
                b_w: f.width(),
                b_h: f.height(),
            });
        }
    }
    let flows = bootstrap_flow(b_seq, config)?;
    let sigma0 = if config.enable_defocus {
        config.sigma_init
    } else {
        0.0
    };
    let frames = b_seq
        .iter()
        .zip(flows)
        .map(|(b, (u_fwd, u_bwd))| FrameState {
            b: b.clone(),
            l: b.clone(),
            u_fwd,
            u_bwd,
            sigma: SigmaMap::uniform(w, h, sigma0),
            tau: config.tau,
            occ_fwd: None,
            occ_bwd: None,
        })
        .collect();
    Ok(SequenceState {
        frames,
        enable_defocus: config.enable_defocus,
    })
}

/// Pure TV-L1 optical flow between the given frames (kernels treated as
/// identity), run coarse to fine. Replaces any external flow method for
/// both initialization and the flow-accuracy baseline.
pub fn bootstrap_flow(
    frames: &[Image],
    config: &PipelineConfig,
) -> Result<Vec<(Option<FlowField>, Option<FlowField>)>> {
    let n = frames.len();
    let pyr = build_pyramid(frames, config.num_levels, config.scale)?;
    let mut params = config.energy_params();
    params.lambda = 0.0; // temporal term only; kernels are identity
    params.n_radius = 1;
    let pd = config.pd_flow();

    let coarsest = &pyr.levels[0];
    let mut flows: Vec<(Option<FlowField>, Option<FlowField>)> = (0..n)
        .map(|i| {
            let fw = (i + 1 < n).then(|| FlowField::new(coarsest.width, coarsest.height));
            let bw = (i > 0).then(|| FlowField::new(coarsest.width, coarsest.height));
            (fw, bw)
        })
        .collect();

    for (lv, level) in pyr.levels.iter().enumerate() {
        if lv > 0 {
            for (fw, bw) in &mut flows {
                if let Some(f) = fw {
                    *f = resample_flow(f, level.width, level.height);
                }
                if let Some(f) = bw {
                    *f = resample_flow(f, level.width, level.height);
                }
            }
        }
        let mut state = SequenceState {
            frames: (0..n)
                .map(|i| FrameState {
                    b: level.images[i].clone(),
                    l: level.images[i].clone(),
                    u_fwd: flows[i].0.clone(),
                    u_bwd: flows[i].1.clone(),
                    sigma: SigmaMap::uniform(level.width, level.height, 0.0),
                    tau: config.tau,
                    occ_fwd: None,
                    occ_bwd: None,
                })
                .collect(),
            enable_defocus: false,
        };
        let edge_maps: Vec<Image> = state
            .frames
            .iter()
            .map(|f| edge_map(&f.l, config.v_i))
            .collect();
        let mut duals: Vec<(FlowDuals, FlowDuals)> = (0..n)
            .map(|_| {
                (
                    FlowDuals::zeros(level.width, level.height),
                    FlowDuals::zeros(level.width, level.height),
                )
            })
            .collect();
        for _ in 0..config.bootstrap_rounds {
            let mut grads = Vec::new();
            for i in 0..n {
                if state.frames[i].u_fwd.is_some() {
                    grads.push((i, FlowDir::Fwd, linearize_rho_u(&state, &params, i, FlowDir::Fwd)));
                }
                if state.frames[i].u_bwd.is_some() {
                    grads.push((i, FlowDir::Bwd, linearize_rho_u(&state, &params, i, FlowDir::Bwd)));
                }
            }
            for (i, dir, grad) in grads {
                let (fw_duals, bw_duals) = &mut duals[i];
                match dir {
                    FlowDir::Fwd => {
                        let u0 = state.frames[i].u_fwd.as_ref().unwrap();
                        let updated =
                            update_flow(u0, &grad, &edge_maps[i], config.nu_u, &pd, fw_duals);
                        state.frames[i].u_fwd = Some(updated);
                    }
                    FlowDir::Bwd => {
                        let u0 = state.frames[i].u_bwd.as_ref().unwrap();
                        let updated =
                            update_flow(u0, &grad, &edge_maps[i], config.nu_u, &pd, bw_duals);
                        state.frames[i].u_bwd = Some(updated);
                    }
                }
            }
        }
        for i in 0..n {
            flows[i] = (state.frames[i].u_fwd.clone(), state.frames[i].u_bwd.clone());
        }
    }
    Ok(flows)
}

/// Forward-backward consistency check: occluded (low weight) where
/// |u_fwd(x) + u_bwd(x + u_fwd(x))| exceeds the threshold or the warp
/// leaves the image; 1 elsewhere.
pub fn detect_occlusion(
    u_fwd: &FlowField,
    u_bwd: &FlowField,
    threshold: f64,
    low_weight: f64,
) -> Image {
    let w = u_fwd.width();
    let h = u_fwd.height();
    let bu = Image::from_data(w, h, 1, u_bwd.u.clone());
    let bv = Image::from_data(w, h, 1, u_bwd.v.clone());
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = u_fwd.at(x, y);
            let sx = x as f64 + du;
            let sy = y as f64 + dv;
            let value = if !crate::grid::in_rect(sx, sy, w, h) {
                low_weight
            } else {
                let ru = du + crate::grid::sample_bilinear(&bu, 0, sx, sy);
                let rv = dv + crate::grid::sample_bilinear(&bv, 0, sx, sy);
                if (ru * ru + rv * rv).sqrt() > threshold {
                    low_weight
                } else {
                    1.0
                }
            };
            out.set(x, y, 0, value);
        }
    }
    out
}

fn refresh_occlusions(state: &mut SequenceState, config: &PipelineConfig) {
    let n = state.num_frames();
    for i in 0..n {
        let occ_fwd = match (&state.frames[i].u_fwd, i + 1 < n) {
            (Some(fw), true) => state.frames[i + 1]
                .u_bwd
                .as_ref()
                .map(|bw| detect_occlusion(fw, bw, config.fb_threshold, config.occlusion_low_weight)),
            _ => None,
        };
        let occ_bwd = match (&state.frames[i].u_bwd, i > 0) {
            (Some(bw), true) => state.frames[i - 1]
                .u_fwd
                .as_ref()
                .map(|fw| detect_occlusion(bw, fw, config.fb_threshold, config.occlusion_low_weight)),
            _ => None,
        };
        state.frames[i].occ_fwd = occ_fwd;
        state.frames[i].occ_bwd = occ_bwd;
    }
}

/// Squared distance between the 5x5 patches centered at (xa, ya) and
/// (xb, yb), coordinates clamped to the image, summed over channels.
fn patch_distance_sq(a: &Image, xa: i64, ya: i64, b: &Image, xb: i64, yb: i64) -> f64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let mut acc = 0.0;
    for dy in -2..=2 {
        for dx in -2..=2 {
            let pa = ((ya + dy).clamp(0, h - 1) as usize) * a.width()
                + (xa + dx).clamp(0, w - 1) as usize;
            let pb = ((yb + dy).clamp(0, h - 1) as usize) * b.width()
                + (xb + dx).clamp(0, w - 1) as usize;
            for c in 0..a.channels() {
                let d = a.plane(c)[pa] - b.plane(c)[pb];
                acc += d * d;
            }
        }
    }
    acc
}

/// Occlusion-aware patch-similarity average over the temporal neighborhood
/// (n = 0 included with unit occlusion and zero flow). The output at every
/// pixel is a convex combination of latent values inside the stencil.
pub fn spatio_temporal_filter(state: &SequenceState, config: &PipelineConfig) -> Vec<Image> {
    let (w, h) = state.dims();
    let n_frames = state.num_frames();
    let n_radius = config.n_radius as i32;
    let two_sig_sq = 2.0 * config.sigma_w * config.sigma_w;
    let mut filtered = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        // per-neighbor flow, occlusion map, and validity for this frame
        struct Term<'a> {
            target: usize,
            flow: Option<FlowField>,
            occ: Option<&'a Image>,
            occ_chained: Option<Image>,
        }
        let mut terms: Vec<Term> = Vec::new();
        for n in -n_radius..=n_radius {
            if n == 0 {
                terms.push(Term {
                    target: i,
                    flow: None,
                    occ: None,
                    occ_chained: None,
                });
                continue;
            }
            let Some((flow, _mask)) = state.flow_to_neighbor(i, n) else {
                continue;
            };
            let target = (i as i32 + n) as usize;
            let (occ, occ_chained) = match n {
                1 => (state.frames[i].occ_fwd.as_ref(), None),
                -1 => (state.frames[i].occ_bwd.as_ref(), None),
                _ => {
                    // cross-check the chained pair for distant neighbors
                    let reverse = state.flow_to_neighbor(target, -n).map(|(f, _)| f);
                    let occ = reverse.map(|rev| {
                        detect_occlusion(
                            &flow,
                            &rev,
                            config.fb_threshold,
                            config.occlusion_low_weight,
                        )
                    });
                    (None, occ)
                }
            };
            terms.push(Term {
                target,
                flow: Some(flow),
                occ,
                occ_chained,
            });
        }

        let li = &state.frames[i].l;
        let mut out = li.zeros_like();
        let ch = li.channels();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut z = 0.0;
                let mut acc = vec![0.0; ch];
                for term in &terms {
                    let lt = &state.frames[term.target].l;
                    let (cx, cy, o) = match &term.flow {
                        None => (x as i64, y as i64, 1.0),
                        Some(flow) => {
                            let (du, dv) = flow.at(x, y);
                            let sx = x as f64 + du;
                            let sy = y as f64 + dv;
                            let o = term
                                .occ
                                .map(|m| m.data()[p])
                                .or_else(|| term.occ_chained.as_ref().map(|m| m.data()[p]))
                                .unwrap_or(1.0);
                            let o = if crate::grid::in_rect(sx, sy, w, h) {
                                o
                            } else {
                                config.occlusion_low_weight
                            };
                            (
                                sx.round().clamp(0.0, (w - 1) as f64) as i64,
                                sy.round().clamp(0.0, (h - 1) as f64) as i64,
                                o,
                            )
                        }
                    };
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let yx = cx + dx;
                            let yy = cy + dy;
                            if yx < 0 || yy < 0 || yx >= w as i64 || yy >= h as i64 {
                                continue;
                            }
                            let dist = patch_distance_sq(li, x as i64, y as i64, lt, yx, yy);
                            let wgt = o * (-dist / two_sig_sq).exp();
                            if wgt == 0.0 {
                                continue;
                            }
                            let q = (yy as usize) * w + yx as usize;
                            z += wgt;
                            for c in 0..ch {
                                acc[c] += wgt * lt.plane(c)[q];
                            }
                        }
                    }
                }
                for c in 0..ch {
                    out.plane_mut(c)[p] = acc[c] / z;
                }
            }
        }
        filtered.push(out);
    }
    filtered
}

fn resample_state(state: &SequenceState, new_w: usize, new_h: usize, b_level: &[Image]) -> SequenceState {
    let frames = state
        .frames
        .iter()
        .zip(b_level)
        .map(|(f, b)| FrameState {
            b: b.clone(),
            l: resample_image(&f.l, new_w, new_h),
            u_fwd: f.u_fwd.as_ref().map(|u| resample_flow(u, new_w, new_h)),
            u_bwd: f.u_bwd.as_ref().map(|u| resample_flow(u, new_w, new_h)),
            // values deliberately unscaled; the next level re-estimates
            sigma: SigmaMap::from_vec(
                new_w,
                new_h,
                resample_image(
                    &Image::from_data(f.sigma.width(), f.sigma.height(), 1, f.sigma.sigma.clone()),
                    new_w,
                    new_h,
                )
                .data()
                .to_vec(),
            ),
            tau: f.tau,
            occ_fwd: None,
            occ_bwd: None,
        })
        .collect();
    SequenceState {
        frames,
        enable_defocus: state.enable_defocus,
    }
}

pub fn deblur_sequence(b_seq: &[Image], config: &PipelineConfig) -> Result<(DeblurOutput, Report)> {
    deblur_sequence_logged(b_seq, config, None)
}

/// Full Algorithm-1 style run. When `log` is given, one JSON line per
/// sub-step with the current energy breakdown is appended to it.
pub fn deblur_sequence_logged(
    b_seq: &[Image],
    config: &PipelineConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<(DeblurOutput, Report)> {
    let t_total = Instant::now();
    let full_state = initialize(b_seq, config)?;
    let pyr = build_pyramid(b_seq, config.num_levels, config.scale)?;
    let params = config.energy_params();
    let pd_latent = config.pd_latent();
    let pd_flow = config.pd_flow();
    let pd_sigma = config.pd_sigma();

    // state at the coarsest level
    let coarsest = &pyr.levels[0];
    let mut state = resample_state(&full_state, coarsest.width, coarsest.height, &coarsest.images);

    let mut level_reports = Vec::new();
    let n_frames = state.num_frames();
    for (lv, level) in pyr.levels.iter().enumerate() {
        let t_level = Instant::now();
        if lv > 0 {
            state = resample_state(&state, level.width, level.height, &level.images);
        }
        state.assert_finite(&format!("level {lv} entry"))?;

        // edge maps frozen from the latents the level starts with
        let edge_maps: Vec<Image> = state
            .frames
            .iter()
            .map(|f| edge_map(&f.l, config.v_i))
            .collect();

        let energy_start = total_energy(&state, &params, &edge_maps);
        let mut energy_prev = energy_start;
        let mut latent_duals = LatentDuals::zeros(&state, params.n_radius);
        let mut flow_duals: Vec<(FlowDuals, FlowDuals)> = (0..n_frames)
            .map(|_| {
                (
                    FlowDuals::zeros(level.width, level.height),
                    FlowDuals::zeros(level.width, level.height),
                )
            })
            .collect();
        let mut sigma_duals: Vec<Vec<f64>> = (0..n_frames)
            .map(|_| vec![0.0; 2 * level.width * level.height])
            .collect();

        let mut rounds = Vec::new();
        for round in 0..config.alternation_rounds {
            // 1) latent restoration with flows and sigma fixed
            let stats = restore_latent(&mut state, &params, &pd_latent, &mut latent_duals)?;
            let energy_after_restore = total_energy(&state, &params, &edge_maps);
            emit(&mut log, lv, round, "restore", &energy_after_restore);

            // 2) flow update from frozen latents. The full linearized step
            // can overshoot its trust region, so back off toward the
            // current flows until the total energy stops increasing;
            // revert outright when even the smallest fraction fails.
            let snapshot: Vec<(Option<FlowField>, Option<FlowField>)> = state
                .frames
                .iter()
                .map(|f| (f.u_fwd.clone(), f.u_bwd.clone()))
                .collect();
            let mut grads = Vec::new();
            for i in 0..n_frames {
                if state.frames[i].u_fwd.is_some() {
                    grads.push((i, FlowDir::Fwd, linearize_rho_u(&state, &params, i, FlowDir::Fwd)));
                }
                if state.frames[i].u_bwd.is_some() {
                    grads.push((i, FlowDir::Bwd, linearize_rho_u(&state, &params, i, FlowDir::Bwd)));
                }
            }
            let mut proposals: Vec<(usize, FlowDir, FlowField)> = Vec::new();
            for (i, dir, grad) in grads {
                let (fw_duals, bw_duals) = &mut flow_duals[i];
                let (u0, duals) = match dir {
                    FlowDir::Fwd => (state.frames[i].u_fwd.as_ref().unwrap(), fw_duals),
                    FlowDir::Bwd => (state.frames[i].u_bwd.as_ref().unwrap(), bw_duals),
                };
                proposals.push((
                    i,
                    dir,
                    update_flow(u0, &grad, &edge_maps[i], config.nu_u, &pd_flow, duals),
                ));
            }
            let mut energy_after_flow = energy_after_restore;
            let mut flow_reverted = true;
            for scale in [1.0, 0.5, 0.25, 0.125] {
                for (i, dir, prop) in &proposals {
                    let (base_f, base_b) = &snapshot[*i];
                    let (base, slot) = match dir {
                        FlowDir::Fwd => (base_f.as_ref().unwrap(), &mut state.frames[*i].u_fwd),
                        FlowDir::Bwd => (base_b.as_ref().unwrap(), &mut state.frames[*i].u_bwd),
                    };
                    let mut blended = base.clone();
                    for p in 0..blended.u.len() {
                        blended.u[p] += scale * (prop.u[p] - base.u[p]);
                        blended.v[p] += scale * (prop.v[p] - base.v[p]);
                    }
                    *slot = Some(blended);
                }
                let e = total_energy(&state, &params, &edge_maps);
                if e.total <= energy_after_restore.total * (1.0 + 1e-12) {
                    energy_after_flow = e;
                    flow_reverted = false;
                    break;
                }
            }
            if flow_reverted {
                for (f, (fw, bw)) in state.frames.iter_mut().zip(snapshot) {
                    f.u_fwd = fw;
                    f.u_bwd = bw;
                }
            }
            emit(&mut log, lv, round, "flow", &energy_after_flow);

            // 3) sigma update, same backtracking accept
            let mut sigma_reverted = false;
            let mut energy_after_sigma = energy_after_flow;
            if config.enable_defocus {
                let sigma_snapshot: Vec<SigmaMap> =
                    state.frames.iter().map(|f| f.sigma.clone()).collect();
                let sigma_grads: Vec<Vec<f64>> = (0..n_frames)
                    .map(|i| linearize_rho_sigma(&state, &params, i))
                    .collect();
                let sigma_proposals: Vec<SigmaMap> = sigma_grads
                    .iter()
                    .enumerate()
                    .map(|(i, grad)| {
                        update_sigma(
                            &state.frames[i].sigma,
                            grad,
                            &edge_maps[i],
                            config.nu_sigma,
                            config.sigma_max,
                            &pd_sigma,
                            &mut sigma_duals[i],
                        )
                    })
                    .collect();
                sigma_reverted = true;
                for scale in [1.0, 0.5, 0.25, 0.125] {
                    for i in 0..n_frames {
                        let base = &sigma_snapshot[i];
                        let prop = &sigma_proposals[i];
                        let blended: Vec<f64> = base
                            .sigma
                            .iter()
                            .zip(&prop.sigma)
                            .map(|(b, p)| b + scale * (p - b))
                            .collect();
                        state.frames[i].sigma =
                            SigmaMap::from_vec(level.width, level.height, blended);
                    }
                    let e = total_energy(&state, &params, &edge_maps);
                    if e.total <= energy_after_flow.total * (1.0 + 1e-12) {
                        energy_after_sigma = e;
                        sigma_reverted = false;
                        break;
                    }
                }
                if sigma_reverted {
                    for (f, s) in state.frames.iter_mut().zip(sigma_snapshot) {
                        f.sigma = s;
                    }
                    energy_after_sigma = energy_after_flow;
                }
                emit(&mut log, lv, round, "sigma", &energy_after_sigma);
            }

            // 4) occlusion maps from the accepted flows
            refresh_occlusions(&mut state, config);

            state.assert_finite(&format!("level {lv} round {round}"))?;
            energy_prev = energy_after_sigma;
            rounds.push(RoundReport {
                round,
                restore_objective_initial: stats.objective_initial,
                restore_objective_final: stats.objective_final,
                restore_reverted: stats.reverted,
                flow_reverted,
                sigma_reverted,
                energy: energy_prev,
            });
        }

        let energy_end = energy_prev;

        // spatio-temporal post-filter once per level, after the rounds
        let filtered = spatio_temporal_filter(&state, config);
        for (f, l) in state.frames.iter_mut().zip(filtered) {
            f.l = l;
        }
        state.assert_finite(&format!("level {lv} post-filter"))?;

        level_reports.push(LevelReport {
            level: lv,
            width: level.width,
            height: level.height,
            energy_start,
            energy_end,
            rounds,
            wall_ms: t_level.elapsed().as_secs_f64() * 1e3,
        });
    }

    let output = DeblurOutput {
        latents: state.frames.iter().map(|f| f.l.clone()).collect(),
        flows_fwd: state.frames.iter().map(|f| f.u_fwd.clone()).collect(),
        flows_bwd: state.frames.iter().map(|f| f.u_bwd.clone()).collect(),
        sigmas: state.frames.iter().map(|f| f.sigma.clone()).collect(),
    };
    let report = Report {
        config: config.clone(),
        levels: level_reports,
        total_wall_ms: t_total.elapsed().as_secs_f64() * 1e3,
    };
    Ok((output, report))
}

fn emit(log: &mut Option<&mut dyn Write>, level: usize, round: usize, stage: &str, e: &EnergyBreakdown) {
    if let Some(w) = log {
        let record = serde_json::json!({
            "level": level,
            "round": round,
            "stage": stage,
            "energy": e,
        });
        let _ = writeln!(w, "{record}");
    }
}
