//! Synthetic ground-truth generation: a deterministic procedural scene
//! renderer (textured background, moving textured sprites, camera drift,
//! shake, and rotation), frame averaging into blurry/sharp pairs with known
//! flows, and the dataset directory layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, FlowField, Image};
use crate::io::{save_png, write_flo};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub subframes: usize,
    pub background_seed: u64,
    /// Base cell size of the background value noise, in pixels.
    #[serde(default = "default_cell")]
    pub background_cell: f64,
    #[serde(default = "default_octaves")]
    pub background_octaves: usize,
    #[serde(default)]
    pub camera: CameraPath,
    #[serde(default)]
    pub sprites: Vec<SpriteSpec>,
}

fn default_cell() -> f64 {
    12.0
}

fn default_octaves() -> usize {
    3
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    /// Linear drift in px per subframe.
    #[serde(default)]
    pub drift: (f64, f64),
    /// Sinusoidal shake amplitude in px.
    #[serde(default)]
    pub shake_amp: (f64, f64),
    /// Shake period in subframes (ignored when amplitude is zero).
    #[serde(default = "default_period")]
    pub shake_period: f64,
    /// Rotation about the canvas center, radians per subframe.
    #[serde(default)]
    pub rot_per_subframe: f64,
}

fn default_period() -> f64 {
    60.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpriteSpec {
    pub seed: u64,
    pub size: usize,
    /// World position of the sprite's top-left corner at t = 0.
    pub start: (f64, f64),
    /// Linear velocity in px per subframe.
    pub velocity: (f64, f64),
    #[serde(default)]
    pub wobble_amp: (f64, f64),
    #[serde(default = "default_period")]
    pub wobble_period: f64,
}

impl CameraPath {
    fn shift(&self, t: f64) -> (f64, f64) {
        let phase = 2.0 * std::f64::consts::PI * t / self.shake_period;
        (
            self.drift.0 * t + self.shake_amp.0 * phase.sin(),
            self.drift.1 * t + self.shake_amp.1 * phase.sin(),
        )
    }

    fn angle(&self, t: f64) -> f64 {
        self.rot_per_subframe * t
    }
}

impl SpriteSpec {
    fn position(&self, t: f64) -> (f64, f64) {
        let phase = 2.0 * std::f64::consts::PI * t / self.wobble_period;
        (
            self.start.0 + self.velocity.0 * t + self.wobble_amp.0 * phase.sin(),
            self.start.1 + self.velocity.1 * t + self.wobble_amp.1 * phase.sin(),
        )
    }
}

/// Integer lattice hash -> [0,1), stable across platforms.
fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = (ix as u64)
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((iy as u64).wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(seed.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothstep-interpolated value noise; C1, so blur solvers see smooth
/// gradients everywhere.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let ix = x.floor() as i64;
    let iy = y.floor() as i64;
    let fx = x - ix as f64;
    let fy = y - iy as f64;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let v00 = lattice_hash(ix, iy, seed);
    let v10 = lattice_hash(ix + 1, iy, seed);
    let v01 = lattice_hash(ix, iy + 1, seed);
    let v11 = lattice_hash(ix + 1, iy + 1, seed);
    (1.0 - sy) * ((1.0 - sx) * v00 + sx * v10) + sy * ((1.0 - sx) * v01 + sx * v11)
}

fn octave_noise(x: f64, y: f64, seed: u64, base_cell: f64, octaves: usize) -> f64 {
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut cell = base_cell;
    let mut total = 0.0;
    for o in 0..octaves {
        acc += amp * value_noise(x / cell, y / cell, seed.wrapping_add(o as u64 * 7919));
        total += amp;
        amp *= 0.5;
        cell *= 0.5;
    }
    acc / total
}

/// Deterministic scene: world-space content observed through a rigid
/// camera path. Exposes exact per-pixel flows between any two subframes.
pub struct Scene {
    spec: SceneSpec,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Scene> {
        if spec.width < 8 || spec.height < 8 {
            return Err(Error::Config("scene canvas must be at least 8x8".into()));
        }
        if spec.subframes < 1 {
            return Err(Error::Config("scene needs at least one subframe".into()));
        }
        for (j, s) in spec.sprites.iter().enumerate() {
            let mut visible = false;
            for t in 0..spec.subframes {
                let (px, py) = s.position(t as f64);
                if px + s.size as f64 > 0.0
                    && py + s.size as f64 > 0.0
                    && px < spec.width as f64
                    && py < spec.height as f64
                {
                    visible = true;
                    break;
                }
            }
            if !visible {
                return Err(Error::Config(format!(
                    "sprite {j} never intersects the canvas"
                )));
            }
        }
        let scene = Scene { spec };
        scene.validate_speed()?;
        Ok(scene)
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Largest per-pixel displacement between adjacent subframes must stay
    /// under one pixel (the capture premise of frame-averaged blur).
    fn validate_speed(&self) -> Result<()> {
        let mut worst = 0.0f64;
        for t in 0..self.spec.subframes.saturating_sub(1) {
            let flow = self.flow_between(t as f64, t as f64 + 1.0);
            for (u, v) in flow.u.iter().zip(&flow.v) {
                worst = worst.max((u * u + v * v).sqrt());
            }
        }
        if worst >= 1.0 {
            return Err(Error::Config(format!(
                "per-subframe displacement {worst:.3} px reaches 1 px; slow the scene down"
            )));
        }
        Ok(())
    }

    fn center(&self) -> (f64, f64) {
        (
            (self.spec.width as f64 - 1.0) / 2.0,
            (self.spec.height as f64 - 1.0) / 2.0,
        )
    }

    /// canvas = R(theta) (world - c) + c + shift
    fn world_to_canvas(&self, t: f64, wx: f64, wy: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let th = self.spec.camera.angle(t);
        let (s, c) = th.sin_cos();
        let (sx, sy) = self.spec.camera.shift(t);
        let dx = wx - cx;
        let dy = wy - cy;
        (c * dx - s * dy + cx + sx, s * dx + c * dy + cy + sy)
    }

    fn canvas_to_world(&self, t: f64, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        let th = self.spec.camera.angle(t);
        let (s, c) = th.sin_cos();
        let (sx, sy) = self.spec.camera.shift(t);
        let dx = x - cx - sx;
        let dy = y - cy - sy;
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    }

    /// Topmost sprite covering a world point at time t (last in the list
    /// wins, matching paint order).
    fn sprite_at(&self, t: f64, wx: f64, wy: f64) -> Option<usize> {
        let mut hit = None;
        for (j, s) in self.spec.sprites.iter().enumerate() {
            let (px, py) = s.position(t);
            if wx >= px && wx < px + s.size as f64 && wy >= py && wy < py + s.size as f64 {
                hit = Some(j);
            }
        }
        hit
    }

    fn color(&self, t: f64, wx: f64, wy: f64, channel: usize) -> f64 {
        if let Some(j) = self.sprite_at(t, wx, wy) {
            let s = &self.spec.sprites[j];
            let (px, py) = s.position(t);
            // fine two-octave texture: flows are only observable on texture
            let cell = (s.size as f64 / 6.0).max(1.5);
            let seed = s.seed.wrapping_add(channel as u64 * 104729);
            let v = 0.65 * value_noise((wx - px) / cell, (wy - py) / cell, seed)
                + 0.35
                    * value_noise(
                        2.0 * (wx - px) / cell,
                        2.0 * (wy - py) / cell,
                        seed.wrapping_add(7),
                    );
            0.15 + 0.7 * v
        } else {
            let v = octave_noise(
                wx,
                wy,
                self.spec.background_seed.wrapping_add(channel as u64 * 15485863),
                self.spec.background_cell,
                self.spec.background_octaves,
            );
            0.1 + 0.8 * v
        }
    }

    pub fn render_subframe(&self, t: usize) -> Image {
        let w = self.spec.width;
        let h = self.spec.height;
        let mut img = Image::new(w, h, 3);
        let tf = t as f64;
        for y in 0..h {
            for x in 0..w {
                let (wx, wy) = self.canvas_to_world(tf, x as f64, y as f64);
                for c in 0..3 {
                    img.set(x, y, c, self.color(tf, wx, wy, c));
                }
            }
        }
        img
    }

    pub fn render_all(&self) -> Vec<Image> {
        (0..self.spec.subframes).map(|t| self.render_subframe(t)).collect()
    }

    /// Exact flow of the content visible at subframe `a` toward its
    /// position at subframe `b`.
    pub fn flow_between(&self, a: f64, b: f64) -> FlowField {
        let w = self.spec.width;
        let h = self.spec.height;
        let mut flow = FlowField::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (wx, wy) = self.canvas_to_world(a, x as f64, y as f64);
                let (wx_b, wy_b) = match self.sprite_at(a, wx, wy) {
                    Some(j) => {
                        let s = &self.spec.sprites[j];
                        let (pa_x, pa_y) = s.position(a);
                        let (pb_x, pb_y) = s.position(b);
                        (wx + pb_x - pa_x, wy + pb_y - pa_y)
                    }
                    None => (wx, wy),
                };
                let (bx, by) = self.world_to_canvas(b, wx_b, wy_b);
                flow.set(x, y, bx - x as f64, by - y as f64);
            }
        }
        flow
    }
}

/// One blurry frame with its mid-exposure ground truth. Flows point at the
/// neighboring windows' mid-frames (absent at sequence boundaries).
#[derive(Debug, Clone)]
pub struct BlurPair {
    pub blurry: Image,
    pub sharp_gt: Image,
    pub gt_flow_fwd: Option<FlowField>,
    pub gt_flow_bwd: Option<FlowField>,
    pub tau: f64,
}

/// Average non-overlapping windows of k subframes. The optional uniform
/// pre-blur is applied to the averaged inputs only; ground truth stays
/// sharp. k must be odd so the mid-frame is unambiguous.
pub fn synthesize_blur(subframes: &[Image], k: usize, pre_blur_sigma: f64) -> Result<Vec<BlurPair>> {
    if k % 2 == 0 {
        return Err(Error::InvalidParam(format!("k must be odd, got {k}")));
    }
    if k > subframes.len() {
        return Err(Error::InvalidParam(format!(
            "k = {k} exceeds the {} available subframes",
            subframes.len()
        )));
    }
    let windows = subframes.len() / k;
    let mut pairs = Vec::with_capacity(windows);
    for w in 0..windows {
        let start = w * k;
        let mid = start + (k - 1) / 2;
        let mut blurry = if pre_blur_sigma > 0.0 {
            gaussian_blur(&subframes[start], pre_blur_sigma)
        } else {
            subframes[start].clone()
        };
        for t in start + 1..start + k {
            let f = if pre_blur_sigma > 0.0 {
                gaussian_blur(&subframes[t], pre_blur_sigma)
            } else {
                subframes[t].clone()
            };
            for (acc, v) in blurry.data_mut().iter_mut().zip(f.data()) {
                *acc += v;
            }
        }
        for v in blurry.data_mut() {
            *v /= k as f64;
        }
        pairs.push(BlurPair {
            blurry,
            sharp_gt: subframes[mid].clone(),
            gt_flow_fwd: None,
            gt_flow_bwd: None,
            tau: 0.5,
        });
    }
    Ok(pairs)
}

/// Render a scene, average it into blur pairs, and attach the exact
/// mid-frame-to-mid-frame flows of adjacent windows.
pub fn generate_dataset(scene: &Scene, k: usize, pre_blur_sigma: f64) -> Result<Vec<BlurPair>> {
    let subframes = scene.render_all();
    let mut pairs = synthesize_blur(&subframes, k, pre_blur_sigma)?;
    let windows = pairs.len();
    let mid = |w: usize| (w * k + (k - 1) / 2) as f64;
    for w in 0..windows {
        if w + 1 < windows {
            pairs[w].gt_flow_fwd = Some(scene.flow_between(mid(w), mid(w + 1)));
        }
        if w > 0 {
            pairs[w].gt_flow_bwd = Some(scene.flow_between(mid(w), mid(w - 1)));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub k: usize,
    pub tau: f64,
    pub pre_blur_sigma: f64,
    pub frames: usize,
    pub scene: SceneSpec,
}

/// Layout: blurry/%05d.png, sharp/%05d.png, flow/%05d_{fwd,bwd}.flo,
/// manifest.json.
pub fn write_dataset(dir: &Path, pairs: &[BlurPair], manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir.join("blurry"))?;
    std::fs::create_dir_all(dir.join("sharp"))?;
    std::fs::create_dir_all(dir.join("flow"))?;
    for (i, p) in pairs.iter().enumerate() {
        save_png(&dir.join(format!("blurry/{i:05}.png")), &p.blurry)?;
        save_png(&dir.join(format!("sharp/{i:05}.png")), &p.sharp_gt)?;
        if let Some(f) = &p.gt_flow_fwd {
            write_flo(&dir.join(format!("flow/{i:05}_fwd.flo")), f)?;
        }
        if let Some(f) = &p.gt_flow_bwd {
            write_flo(&dir.join(format!("flow/{i:05}_bwd.flo")), f)?;
        }
    }
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{build_motion_blur_op, LinearOperator};

    fn pan_spec(vx: f64) -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            subframes: 27,
            background_seed: 7,
            background_cell: 12.0,
            background_octaves: 2,
            camera: CameraPath {
                drift: (vx, 0.0),
                shake_amp: (0.0, 0.0),
                shake_period: 60.0,
                rot_per_subframe: 0.0,
            },
            sprites: vec![],
        }
    }

    #[test]
    fn zero_trajectories_render_identical_subframes() {
        let scene = Scene::new(pan_spec(0.0)).unwrap();
        let frames = scene.render_all();
        for f in &frames[1..] {
            assert_eq!(*f, frames[0]);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = Scene::new(pan_spec(0.4)).unwrap().render_subframe(13);
        let b = Scene::new(pan_spec(0.4)).unwrap().render_subframe(13);
        assert_eq!(a, b);
    }

    #[test]
    fn sprite_travels_its_summed_displacement() {
        let mut spec = pan_spec(0.0);
        spec.sprites.push(SpriteSpec {
            seed: 3,
            size: 12,
            start: (10.0, 10.0),
            velocity: (0.5, 0.0),
            wobble_amp: (0.0, 0.0),
            wobble_period: 60.0,
        });
        spec.subframes = 9;
        let scene = Scene::new(spec).unwrap();
        let flow = scene.flow_between(0.0, 8.0);
        // a pixel inside the sprite at t=0 moves 8 * 0.5 = 4 px
        let (u, v) = flow.at(14, 14);
        assert!((u - 4.0).abs() < 1e-9 && v.abs() < 1e-9);
        // background stays put
        let (u, v) = flow.at(50, 40);
        assert_eq!((u, v), (0.0, 0.0));
    }

    #[test]
    fn scene_rejects_too_fast_motion() {
        assert!(Scene::new(pan_spec(1.2)).is_err());
    }

    #[test]
    fn scene_rejects_invisible_sprite() {
        let mut spec = pan_spec(0.0);
        spec.sprites.push(SpriteSpec {
            seed: 1,
            size: 8,
            start: (500.0, 500.0),
            velocity: (0.0, 0.0),
            wobble_amp: (0.0, 0.0),
            wobble_period: 60.0,
        });
        assert!(Scene::new(spec).is_err());
    }

    #[test]
    fn k1_synthesis_is_identity() {
        let scene = Scene::new(pan_spec(0.3)).unwrap();
        let frames = scene.render_all();
        let pairs = synthesize_blur(&frames, 1, 0.0).unwrap();
        assert_eq!(pairs.len(), frames.len());
        for (p, f) in pairs.iter().zip(&frames) {
            assert_eq!(p.blurry, *f);
            assert_eq!(p.sharp_gt, *f);
        }
    }

    #[test]
    fn static_scene_average_equals_ground_truth() {
        let scene = Scene::new(pan_spec(0.0)).unwrap();
        let frames = scene.render_all();
        let pairs = synthesize_blur(&frames, 9, 0.0).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert!(p.blurry.max_abs_diff(&p.sharp_gt) < 1e-12);
        }
    }

    #[test]
    fn even_k_and_oversize_k_are_rejected() {
        let scene = Scene::new(pan_spec(0.0)).unwrap();
        let frames = scene.render_all();
        assert!(synthesize_blur(&frames, 4, 0.0).is_err());
        assert!(synthesize_blur(&frames, 99, 0.0).is_err());
    }

    #[test]
    fn averaging_commutes_with_uniform_pre_blur() {
        let scene = Scene::new(pan_spec(0.5)).unwrap();
        let frames = scene.render_all();
        let sigma = 1.5;
        let a = synthesize_blur(&frames, 9, sigma).unwrap();
        let plain = synthesize_blur(&frames, 9, 0.0).unwrap();
        for (pa, pp) in a.iter().zip(&plain) {
            let blur_after = gaussian_blur(&pp.blurry, sigma);
            assert!(
                pa.blurry.max_abs_diff(&blur_after) <= 1e-6,
                "linearity violated: {}",
                pa.blurry.max_abs_diff(&blur_after)
            );
        }
    }

    #[test]
    fn uniform_pan_average_matches_streak_kernel_on_smooth_content() {
        // The dataset premise: averaging k frames of a uniform pan equals
        // the bidirectional streak kernel built from the mid-to-mid flows
        // with tau = 0.5, away from the borders.
        let v = 0.5;
        let k = 9;
        let scene = Scene::new(pan_spec(v)).unwrap();
        let pairs = generate_dataset(&scene, k, 0.0).unwrap();
        let p = &pairs[1]; // interior window with both flows present
        let (w, h) = (p.sharp_gt.width(), p.sharp_gt.height());
        let fwd = p.gt_flow_fwd.as_ref().unwrap();
        let bwd = p.gt_flow_bwd.as_ref().unwrap();
        assert!((fwd.at(10, 10).0 - v * k as f64).abs() < 1e-9);
        let op = build_motion_blur_op(fwd, bwd, p.tau).unwrap();
        let modeled = op.apply(&p.sharp_gt);
        let margin = (v * k as f64 * 0.5).ceil() as usize + 2;
        let mut worst = 0.0f64;
        for c in 0..3 {
            for y in margin..h - margin {
                for x in margin..w - margin {
                    worst = worst.max((modeled.get(x, y, c) - p.blurry.get(x, y, c)).abs());
                }
            }
        }
        assert!(worst <= 0.01, "kernel vs averaging mismatch {worst}");
    }

    #[test]
    fn dataset_directory_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = Scene::new(pan_spec(0.4)).unwrap();
        let pairs = generate_dataset(&scene, 9, 0.0).unwrap();
        let manifest = DatasetManifest {
            k: 9,
            tau: 0.5,
            pre_blur_sigma: 0.0,
            frames: pairs.len(),
            scene: scene.spec().clone(),
        };
        write_dataset(dir.path(), &pairs, &manifest).unwrap();
        assert!(dir.path().join("blurry/00000.png").exists());
        assert!(dir.path().join("sharp/00002.png").exists());
        assert!(dir.path().join("flow/00001_fwd.flo").exists());
        assert!(dir.path().join("flow/00001_bwd.flo").exists());
        assert!(!dir.path().join("flow/00000_bwd.flo").exists());
        let m: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(m.k, 9);
        let f = crate::io::read_flo(&dir.path().join("flow/00001_fwd.flo")).unwrap();
        let orig = pairs[1].gt_flow_fwd.as_ref().unwrap();
        // f32 storage
        assert!((f.at(5, 5).0 - orig.at(5, 5).0).abs() < 1e-6);
    }
}
