// Does the energy actually prefer ground-truth flows over the estimate?
use vardeblur::dataset::{generate_dataset, Scene, SceneSpec};
use vardeblur::energy::{edge_map, total_energy};
use vardeblur::grid::{resample_flow, Image};
use vardeblur::io::read_flo;
use vardeblur::metrics::epe;
use vardeblur::pipeline::*;
use vardeblur::state::{FrameState, SequenceState};

fn main() {
    let spec: SceneSpec = serde_json::from_str(
        &std::fs::read_to_string("crates/vardeblur/assets/scenes/rot_shake.json").unwrap(),
    )
    .unwrap();
    let scene = Scene::new(spec).unwrap();
    let pairs = generate_dataset(&scene, 9, 0.0).unwrap();
    let cfg = PipelineConfig { enable_defocus: false, ..PipelineConfig::default() };
    let params = cfg.energy_params();

    // load the deblur output (latents + flows) from the previous run
    let latents: Vec<Image> = (0..5)
        .map(|i| vardeblur::io::load_png(std::path::Path::new(&format!("/tmp/out_rot_shake/latent/{i:05}.png"))).unwrap())
        .collect();
    let (w, h) = (latents[0].width(), latents[0].height());
    let est_state = SequenceState {
        frames: (0..5)
            .map(|i| FrameState {
                b: pairs[i].blurry.clone(),
                l: latents[i].clone(),
                u_fwd: (i < 4).then(|| read_flo(std::path::Path::new(&format!("/tmp/out_rot_shake/flow/{i:05}_fwd.flo"))).unwrap()),
                u_bwd: (i > 0).then(|| read_flo(std::path::Path::new(&format!("/tmp/out_rot_shake/flow/{i:05}_bwd.flo"))).unwrap()),
                sigma: vardeblur::grid::SigmaMap::uniform(w, h, 0.0),
                tau: 0.5,
                occ_fwd: None,
                occ_bwd: None,
            })
            .collect(),
        enable_defocus: false,
    };
    let mut gt_state = est_state.clone();
    for i in 0..5 {
        gt_state.frames[i].u_fwd = pairs[i].gt_flow_fwd.clone();
        gt_state.frames[i].u_bwd = pairs[i].gt_flow_bwd.clone();
    }
    // ...and a GT-latent variant
    let mut gt_all = gt_state.clone();
    for i in 0..5 {
        gt_all.frames[i].l = pairs[i].sharp_gt.clone();
    }
    let maps: Vec<Image> = est_state.frames.iter().map(|f| edge_map(&f.l, cfg.v_i)).collect();
    let e_est = total_energy(&est_state, &params, &maps);
    let e_gt = total_energy(&gt_state, &params, &maps);
    let e_all = total_energy(&gt_all, &params, &maps);
    println!("E(est L, est u):  total {:.2} data {:.2} temporal {:.2} tv_u {:.2}", e_est.total, e_est.data, e_est.temporal, e_est.spatial_u);
    println!("E(est L, gt  u):  total {:.2} data {:.2} temporal {:.2} tv_u {:.2}", e_gt.total, e_gt.data, e_gt.temporal, e_gt.spatial_u);
    println!("E(gt  L, gt  u):  total {:.2} data {:.2} temporal {:.2} tv_u {:.2}", e_all.total, e_all.data, e_all.temporal, e_all.spatial_u);
    let est_f = est_state.frames[2].u_fwd.as_ref().unwrap();
    let gt_f = pairs[2].gt_flow_fwd.as_ref().unwrap();
    println!("frame2 fwd: est mean ({:.2},{:.2}) gt mean ({:.2},{:.2}) epe {:.3}",
        est_f.u.iter().sum::<f64>() / est_f.u.len() as f64,
        est_f.v.iter().sum::<f64>() / est_f.v.len() as f64,
        gt_f.u.iter().sum::<f64>() / gt_f.u.len() as f64,
        gt_f.v.iter().sum::<f64>() / gt_f.v.len() as f64,
        epe(est_f, gt_f, None).unwrap());
    let _ = resample_flow(gt_f, w, h);
}
