use nalgebra::{Vector2, Vector3};

use super::sparse::*;
use super::*;
use crate::scenes::presets::{self, SpriteConfig};
use crate::scenes::{Primitive, SceneSpec, Shape, Texture};

fn wall_scene(depth: f64, baseline: f64) -> SceneSpec {
    let wall = Primitive {
        shape: Shape::Plane { depth },
        texture: Texture::Noise { scale: 0.6, seed: 4, a: [0.1, 0.1, 0.1], b: [0.9, 0.9, 0.9] },
        tint: 0.0,
        velocity: [0.0; 3],
    };
    SceneSpec {
        primitives: vec![wall],
        background: [0.0; 3],
        cameras: presets::static_rig(64, 48, &[Vector3::zeros(), Vector3::new(baseline, 0.05, 0.0)], 1),
        frames: 1,
        z_near: 1.0,
        z_far: 10.0,
    }
}

#[test]
fn planes_are_equispaced_in_inverse_depth() {
    let d = plane_depths(DEFAULT_PLANES, 1.0, 10.0);
    assert_eq!(d.len(), 64);
    assert!((d[0] - 1.0).abs() < 1e-12 && (d[63] - 10.0).abs() < 1e-9);
    let step = 1.0 / d[1] - 1.0 / d[0];
    for k in 1..64 {
        assert!((1.0 / d[k] - 1.0 / d[k - 1] - step).abs() < 1e-12);
    }
}

#[test]
fn gamma_threshold() {
    let t = 10.0 * std::f64::consts::LN_2;
    assert!((t - 6.931471805599453).abs() < 1e-12);
    assert!(prior_visible(6.93, DEFAULT_GAMMA));
    assert!(!prior_visible(6.932, DEFAULT_GAMMA));
    assert!(!prior_visible(f64::INFINITY, DEFAULT_GAMMA));
}

#[test]
fn same_view_has_zero_error() {
    let s = wall_scene(4.0, 0.0);
    let (rgb, _) = s.render_gt(0, 0);
    let v = View { camera: s.camera(0, 0), image: &rgb };
    let psv = build_psv(v, v, 16, 1.0, 10.0);
    for e in &psv.errors {
        assert!(e.data.iter().all(|&x| x.abs() < 1e-9));
    }
}

#[test]
fn textured_plane_selects_its_depth() {
    let z = 3.7;
    let s = wall_scene(z, 1.2);
    let (a, _) = s.render_gt(0, 0);
    let (b, _) = s.render_gt(1, 0);
    let psv = build_psv(
        View { camera: s.camera(0, 0), image: &a },
        View { camera: s.camera(1, 0), image: &b },
        DEFAULT_PLANES,
        1.0,
        10.0,
    );
    let k = psv.plane_index(z);
    let prior = visibility_prior(&psv, DEFAULT_GAMMA);
    let mut n = 0;
    for (i, &arg) in prior.argmin.iter().enumerate() {
        // only pixels whose true correspondence lies inside the secondary image
        if psv.errors[k].data[i].is_finite() {
            assert!((arg as i64 - k as i64).abs() <= 1, "pixel {i}: {arg} vs {k}");
            n += 1;
        }
    }
    assert!(n > 64 * 48 / 2);
}

#[test]
fn toy_prior_flags_occlusion() {
    let s = presets::toy_layout(96, 64, &[0.0, 0.4]);
    let (a, _) = s.render_gt(0, 0);
    let (b, _) = s.render_gt(1, 0);
    let va = View { camera: s.camera(0, 0), image: &a };
    let vb = View { camera: s.camera(1, 0), image: &b };
    let prior = visibility_prior(&build_psv(va, vb, DEFAULT_PLANES, s.z_near, s.z_far), DEFAULT_GAMMA);
    let gt = s.gt_visibility(0, 1, 0);
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for i in 0..gt.data.len() {
        match (prior.visible.data[i], gt.data[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    assert!(gt.count() < gt.data.len(), "layout must contain occlusions");
    assert!(fp as f64 / ((tp + fp) as f64) < 0.05, "tp {tp} fp {fp}");
    assert!(tp as f64 / ((tp + fneg) as f64) > 0.8, "tp {tp} fn {fneg}");
}

#[test]
fn reliability_table() {
    let r = reliability_from_errors(0.2, 0.05, 0.1);
    assert!(r.m_a && !r.m_m);
    let r = reliability_from_errors(0.2, 0.15, 0.1);
    assert!(!r.m_a && !r.m_m);
    let r = reliability_from_errors(0.05, 0.05, 0.1);
    assert!(r.m_a && r.m_m);
}

#[test]
fn nearest_view_breaks_ties_low() {
    let f = |x: f64| crate::geometry::Camera::looking_forward(10.0, 4, 4, Vector3::new(x, 0.0, 0.0));
    let cams = [f(-1.0), f(0.0), f(1.0), f(0.3)];
    let refs: Vec<_> = cams.iter().collect();
    assert_eq!(nearest_view(&refs, 1), Some(3));
    assert_eq!(nearest_view(&refs[..3], 1), Some(0));
    assert_eq!(nearest_view(&refs[..1], 0), None);
}

#[test]
fn reliability_prefers_true_depth() {
    let z = 4.0;
    let s = wall_scene(z, 0.3);
    let (a, _) = s.render_gt(0, 0);
    let (b, _) = s.render_gt(1, 0);
    let va = View { camera: s.camera(0, 0), image: &a };
    let vb = View { camera: s.camera(1, 0), image: &b };
    let zm = Image::filled(64, 48, 1, z);
    let za = Image::filled(64, 48, 1, 2.0);
    let m = reliability_mask(&zm, &za, va, vb, DEFAULT_PATCH, DEFAULT_E_TAU);
    for i in 0..m.m_a.data.len() {
        if m.m_a.data[i] {
            assert!(m.e_a.data[i] <= m.e_m.data[i] && m.e_a.data[i] <= DEFAULT_E_TAU);
        }
    }
    assert!(m.m_m.count() > m.m_a.count() * 4);
    // fully out-of-bounds patches carry no supervision
    let far = crate::geometry::Camera::looking_forward(50.0, 64, 48, Vector3::new(100.0, 0.0, 0.0));
    let r = reliability_at(va, View { camera: &far, image: &b }, &Vector2::new(5.0, 5.0), z, z, 5, 1.0);
    assert!(!r.m_a && !r.m_m);
}

#[test]
fn sparse_depth_oracle() {
    let s = presets::toy_layout(48, 32, &[0.0, 0.3]);
    assert!(oracle_sparse_depth(&s, &[0, 1], 0, 0, 0.0, 1).is_empty());
    let pts = oracle_sparse_depth(&s, &[0, 1], 0, 40, 0.0, 1);
    assert_eq!(pts.len(), 80);
    for p in &pts {
        let (_, d) = s.render_gt(p.view, 0);
        assert_eq!(p.z, d.get(p.x as usize, p.y as usize, 0));
    }
    assert_eq!(pts, oracle_sparse_depth(&s, &[0, 1], 0, 40, 0.0, 1));
    let noisy = oracle_sparse_depth(&s, &[0], 0, 40, 0.1, 1);
    assert!(noisy.iter().zip(&pts).all(|(a, b)| (a.z / b.z - 1.0).abs() <= 0.1 + 1e-12));
}

#[test]
fn static_flow_oracle_is_zero() {
    let s = presets::moving_sprite(&SpriteConfig { width: 48, height: 32, sprite_velocity: [0.0; 3], ..Default::default() });
    let m = oracle_sparse_flow(&s, (0, 0), (0, 0), 50, 0.0, 3);
    assert_eq!(m.len(), 50);
    assert!(m.iter().all(|m| m.flow().norm() < 1e-9));
}

#[test]
fn translating_sprite_flow_oracle() {
    let cfg = SpriteConfig { width: 64, height: 48, frames: 12, ..Default::default() };
    let s = presets::moving_sprite(&cfg);
    let m = oracle_sparse_flow(&s, (0, 0), (10, 0), 200, 0.0, 3);
    let gt = s.gt_object_flow(0, 0, 10);
    let ids = s.primitive_ids(0, 0);
    let mut moving = 0;
    for r in &m {
        let (x, y) = (r.x as usize, r.y as usize);
        let g = gt.pixel(x, y);
        assert!((r.flow().x - g[0]).abs() < 1e-9 && (r.flow().y - g[1]).abs() < 1e-9);
        if ids[y * 64 + x] == 1 {
            moving += 1;
            assert!(r.flow().x > 1.0);
        }
    }
    assert!(moving > 0);
    let set = oracle_flow_set(&s, 10, 5, 0.0, 3);
    assert!(set.iter().all(|r| (r.s as i64 - r.t as i64).abs() == 10));
}

#[test]
fn sparse_text_round_trip() {
    let d = vec![SparseDepthPoint { view: 1, t: 0, x: 3.0, y: 4.5, z: 2.25 }];
    assert_eq!(depth_from_text(&depth_to_text(&d)).unwrap(), d);
    let f = vec![SparseFlowMatch { v: 0, t: 2, x: 1.0, y: 2.0, u: 1, s: 12, x2: 3.5, y2: -0.125 }];
    assert_eq!(flow_from_text(&flow_to_text(&f)).unwrap(), f);
    assert!(depth_from_text("0 0 1 1").is_err());
    assert!(depth_from_text("0 0 1 1 -2").is_err());
}
