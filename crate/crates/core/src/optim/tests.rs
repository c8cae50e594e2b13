use nalgebra::Vector3;

use super::*;
use crate::eval::psnr;
use crate::fields::{Aabb, DecoderConfig, FieldConfig, ModelConfig};
use crate::losses::LossWeights;
use crate::scenes::io::Dataset;
use crate::scenes::presets::toy_layout;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("b{i}")).collect()
}

#[test]
fn zero_gradient_keeps_parameters() {
    let mut p = vec![vec![1.0, -2.0], vec![0.5]];
    let orig = p.clone();
    let mut adam = Adam::new(&[2, 1]);
    for _ in 0..5 {
        let mut refs: Vec<&mut Vec<f64>> = p.iter_mut().collect();
        adam.update(&mut refs, &[vec![0.0, 0.0], vec![0.0]], &names(2), &[0.1, 0.1]).unwrap();
    }
    assert_eq!(p, orig);
}

#[test]
fn first_step_moves_by_lr_against_gradient() {
    let mut p = vec![vec![0.0, 0.0]];
    let mut adam = Adam::new(&[2]);
    let mut refs: Vec<&mut Vec<f64>> = p.iter_mut().collect();
    adam.update(&mut refs, &[vec![3.0, -0.2]], &names(1), &[0.01]).unwrap();
    assert!((p[0][0] + 0.01).abs() < 1e-8);
    assert!((p[0][1] - 0.01).abs() < 1e-8);
}

#[test]
fn scalar_trajectory_matches_reference() {
    // minimize (x - 3)^2 from x = 0; reference recursion written out longhand
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut expected = Vec::new();
    for t in 1..=10 {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        expected.push(x);
    }
    let mut p = vec![vec![0.0]];
    let mut adam = Adam::new(&[1]);
    for want in expected {
        let g = 2.0 * (p[0][0] - 3.0);
        let mut refs: Vec<&mut Vec<f64>> = p.iter_mut().collect();
        adam.update(&mut refs, &[vec![g]], &names(1), &[lr]).unwrap();
        assert!((p[0][0] - want).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradient_names_block_and_changes_nothing() {
    let mut p = vec![vec![1.0], vec![2.0, 3.0]];
    let orig = p.clone();
    let mut adam = Adam::new(&[1, 2]);
    let mut refs: Vec<&mut Vec<f64>> = p.iter_mut().collect();
    let err = adam
        .update(&mut refs, &[vec![1.0], vec![f64::NAN, 0.0]], &["field.grid".into(), "decoder.color".into()], &[0.1, 0.1])
        .unwrap_err();
    match err {
        Error::NonFiniteGradient { block } => assert_eq!(block, "decoder.color"),
        e => panic!("unexpected {e}"),
    }
    assert_eq!(p, orig);
    assert_eq!(adam.step, 0);
    assert!(adam.m.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let s = LrSchedule { initial: 5e-4, final_lr: 5e-6 };
    assert!((s.at(0, 100) - 5e-4).abs() < 1e-18);
    assert!((s.at(100, 100) - 5e-6).abs() < 1e-18);
    assert!((s.at(50, 100) - 5e-5).abs() < 1e-15);
}

#[test]
fn log_format_has_header_and_columns() {
    let t = format_log(&[LogEntry { iter: 3, loss: 0.5, psnr: 20.0, lr: 1e-3 }]);
    let mut lines = t.lines();
    assert_eq!(lines.next(), Some("iter loss psnr lr"));
    let cols: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(cols.len(), 4);
    assert_eq!(cols[0], "3");
}

fn voxel_model(bbox: Aabb, head: bool) -> ModelConfig {
    ModelConfig {
        bbox,
        field: FieldConfig::Voxel { resolution: [12, 10, 12], feature_dim: 6 },
        decoder: DecoderConfig { view_degrees: 2, visibility_head: head, ..Default::default() },
        density_shift: -1.0,
        hidden: 16,
    }
}

fn toy_data(w: usize, h: usize) -> (Dataset, StaticData) {
    let spec = toy_layout(w, h, &[0.0, 0.3]);
    let ds = Dataset::from_spec(&spec).unwrap();
    let data = StaticData::from_dataset(&ds, &[0, 1], 0).unwrap();
    (ds, data)
}

fn toy_bbox() -> Aabb {
    Aabb::new([-3.0, -2.5, 1.5], [3.0, 2.5, 8.0]).unwrap()
}

#[test]
fn static_fit_improves_training_view() {
    let (_, data) = toy_data(32, 24);
    let cfg = StaticFitConfig { iters: 60, batch: 64, samples: 24, log_every: 5, ..Default::default() };
    let model = voxel_model(toy_bbox(), false);
    let before = {
        let c = StaticFitConfig { iters: 1, ..cfg.clone() };
        let f = fit_static(&data, &model, &c).unwrap();
        psnr(&f.render(&data.views[0].camera, data.near, data.far).0, &data.views[0].image, 1.0)
    };
    let fit = fit_static(&data, &model, &cfg).unwrap();
    let after = psnr(&fit.render(&data.views[0].camera, data.near, data.far).0, &data.views[0].image, 1.0);
    assert!(after > before + 2.0, "{before} -> {after}");
}

#[test]
fn static_fit_is_deterministic_across_thread_counts() {
    let (_, mut data) = toy_data(24, 16);
    data.build_priors(16, 10.0);
    let cfg = StaticFitConfig {
        iters: 6,
        batch: 40,
        samples: 10,
        fine_samples: 6,
        weights: LossWeights { vip: 0.001, visibility: 0.1, coarse_fine: 0.1, ..Default::default() },
        augmented: vec![vec![crate::fields::AugmentKind::Lambertian]],
        log_every: 1,
        ..Default::default()
    };
    let model = voxel_model(toy_bbox(), true);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit_static(&data, &model, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.log_text(), b.log_text());
    assert_eq!(a.coarse.field, b.coarse.field);
    let c = run(1);
    assert_eq!(a.log, c.log);
}

#[test]
fn config_rejects_missing_visibility_head() {
    let (_, data) = toy_data(8, 6);
    let cfg = StaticFitConfig { weights: LossWeights::vip_nerf(), ..Default::default() };
    let err = fit_static(&data, &voxel_model(toy_bbox(), false), &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn dynamic_fit_on_static_scene_keeps_motion_small() {
    let spec = toy_layout(24, 16, &[0.0]);
    let mut spec = spec;
    // repeat the single frame four times with a still camera
    spec.frames = 4;
    spec.cameras = vec![vec![spec.cameras[0][0].clone(); 4]];
    let ds = Dataset::from_spec(&spec).unwrap();
    let data = DynamicData::from_dataset(&ds, &[0]).unwrap();
    let cfg = DynamicFitConfig { iters: 30, batch: 48, samples: 16, ..Default::default() };
    let fit = fit_dynamic(&data, &voxel_model(toy_bbox(), false), &cfg).unwrap();
    // a shared offset is unobservable; only the change across frames counts
    let mut worst: f64 = 0.0;
    let mut cache = Vec::new();
    for z in [3.0, 5.0, 6.0] {
        let d0 = Vector3::from(fit.motion.query(&[0.1, -0.2, z], 0.0, &mut cache));
        for t in 1..4 {
            let d = Vector3::from(fit.motion.query(&[0.1, -0.2, z], t as f64, &mut cache));
            worst = worst.max((d - d0).norm());
        }
    }
    assert!(worst < 0.05, "frame-to-frame displacement {worst}");
    assert!(fit.log.last().unwrap().psnr > fit.log[0].psnr);
}
