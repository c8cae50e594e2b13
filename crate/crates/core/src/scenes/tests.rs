use nalgebra::{Vector2, Vector3};

use super::io::{self, Dataset};
use super::presets::{self, SpriteConfig};
use super::*;
use crate::geometry::Camera;

fn plain(primitives: Vec<Primitive>, centers: &[Vector3<f64>], frames: usize) -> SceneSpec {
    SceneSpec {
        primitives,
        background: [0.2, 0.3, 0.4],
        cameras: presets::static_rig(32, 24, centers, frames),
        frames,
        z_near: 1.0,
        z_far: 10.0,
    }
}

fn flat(color: [f64; 3]) -> Texture {
    Texture::Gradient { base: color, dx: [0.0; 3], dy: [0.0; 3], dz: [0.0; 3] }
}

#[test]
fn empty_scene_is_background_at_far() {
    let s = plain(vec![], &[Vector3::zeros()], 1);
    let (rgb, depth) = s.render_gt(0, 0);
    assert!(depth.data.iter().all(|&d| d == 10.0));
    assert!(rgb.data.chunks(3).all(|p| p == [0.2, 0.3, 0.4]));
}

#[test]
fn plane_has_constant_depth() {
    let plane = Primitive { shape: Shape::Plane { depth: 4.0 }, texture: flat([0.5; 3]), tint: 0.0, velocity: [0.0; 3] };
    let s = plain(vec![plane], &[Vector3::new(0.3, -0.1, 0.0)], 1);
    let (_, depth) = s.render_gt(0, 0);
    assert!(depth.data.iter().all(|&d| (d - 4.0).abs() < 1e-12));
}

#[test]
fn sphere_silhouette_radius() {
    let (r, z) = (0.5, 5.0);
    let sphere = Primitive {
        shape: Shape::Sphere { center: [0.0, 0.0, z], radius: r },
        texture: flat([1.0; 3]),
        tint: 0.0,
        velocity: [0.0; 3],
    };
    let f = 100.0;
    let cam = Camera::looking_forward(f, 101, 101, Vector3::zeros());
    let s = SceneSpec { primitives: vec![sphere], background: [0.0; 3], cameras: vec![vec![cam]], frames: 1, z_near: 1.0, z_far: 10.0 };
    // exact silhouette of a sphere seen head-on: tan = r / sqrt(z^2 - r^2)
    let expected = f * r / (z * z - r * r).sqrt();
    assert!((expected - f * r / z).abs() < 0.06);
    let ids = s.primitive_ids(0, 0);
    let row: Vec<_> = (0..101).map(|x| ids[50 * 101 + x] == 0).collect();
    let hits = row.iter().filter(|&&b| b).count() as f64;
    assert!((hits - 2.0 * expected).abs() <= 2.0, "hits {hits} expected {}", 2.0 * expected);
}

#[test]
fn identical_views_are_all_visible() {
    let s = presets::occluder_scene(3, 48, 32);
    let mut s2 = s.clone();
    s2.cameras[1] = s2.cameras[0].clone();
    let m = s2.gt_visibility(0, 1, 0);
    assert_eq!(m.count(), 48 * 32);
}

#[test]
fn occluded_point_is_invisible() {
    let wall = Primitive { shape: Shape::Plane { depth: 8.0 }, texture: flat([0.5; 3]), tint: 0.0, velocity: [0.0; 3] };
    let blocker = Primitive {
        shape: Shape::Box { min: [0.5, -0.5, 3.0], max: [1.5, 0.5, 3.5] },
        texture: flat([0.9; 3]),
        tint: 0.0,
        velocity: [0.0; 3],
    };
    let s = plain(vec![wall, blocker], &[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)], 1);
    // wall point straight ahead of view 0; view 1 sees it through the box
    let p = Vector3::new(0.0, 0.0, 8.0);
    let b = s.camera(1, 0);
    let (_, z) = b.project(&p).unwrap();
    let ray = b.ray(&b.project(&p).unwrap().0);
    let hit = s.trace(&ray.origin, &ray.direction, 0.0).unwrap();
    assert_eq!(hit.primitive, 1);
    assert!(hit.depth < z);
    assert!(!s.point_visible(b, &p, 0.0));
    assert!(s.point_visible(s.camera(0, 0), &p, 0.0));
}

#[test]
fn out_of_frustum_is_invisible() {
    let wall = Primitive { shape: Shape::Plane { depth: 5.0 }, texture: flat([0.5; 3]), tint: 0.0, velocity: [0.0; 3] };
    let s = plain(vec![wall], &[Vector3::zeros(), Vector3::new(50.0, 0.0, 0.0)], 1);
    assert_eq!(s.gt_visibility(0, 1, 0).count(), 0);
}

#[test]
fn gt_depth_reprojection_is_consistent() {
    let s = presets::occluder_scene(7, 64, 48);
    let (_, da) = s.render_gt(0, 0);
    let (_, db) = s.render_gt(1, 0);
    let vis = s.gt_visibility(0, 1, 0);
    let (a, b) = (s.camera(0, 0), s.camera(1, 0));
    let mut checked = 0;
    for y in 0..48 {
        for x in 0..64 {
            if !vis.get(x, y) {
                continue;
            }
            let p = a.backproject(&Vector2::new(x as f64, y as f64), da.get(x, y, 0));
            let (q, z) = b.project(&p).unwrap();
            // analytic trace at the exact reprojected location
            let hit = s.hit_at(b, &q, 0.0).map_or(s.z_far, |h| h.depth);
            assert!((hit - z).abs() <= 1e-6 * z, "{hit} vs {z}");
            checked += 1;
        }
    }
    assert!(checked > 64 * 48 / 2);
    assert_eq!(db.width, 64);
}

#[test]
fn static_scene_has_zero_flow() {
    let s = presets::moving_sprite(&SpriteConfig { width: 32, height: 24, sprite_velocity: [0.0; 3], ..Default::default() });
    let f = s.gt_object_flow(0, 0, 3);
    assert!(f.data.iter().all(|&v| v == 0.0));
}

#[test]
fn translation_flow_matches_projection() {
    let cfg = SpriteConfig { width: 64, height: 48, sprite_velocity: [0.05, 0.0, 0.02], ..Default::default() };
    let s = presets::moving_sprite(&cfg);
    let cam = s.camera(0, 0);
    let ids = s.primitive_ids(0, 0);
    let f = s.gt_object_flow(0, 1, 4);
    let dt = 3.0;
    // front face of the box sits at a constant depth
    let z = cfg.sprite_center[2] - cfg.sprite_half_size + 0.02 * 1.0;
    let mut n = 0;
    for y in 0..48 {
        for x in 0..64 {
            if ids[y * 64 + x] != 1 {
                continue;
            }
            let px = f.pixel(x, y);
            let Some(hit) = s.hit_at(cam, &Vector2::new(x as f64, y as f64), 1.0) else { continue };
            if (hit.depth - z).abs() > 1e-9 {
                continue;
            }
            let u = x as f64 - cam.k[(0, 2)];
            let expected_x = cam.fx() * (u / cam.fx() * z + 0.05 * dt) / (z + 0.02 * dt) - u;
            assert!((px[0] - expected_x).abs() < 1e-9);
            assert!((px[2] - 0.02 * dt).abs() < 1e-12);
            n += 1;
        }
    }
    assert!(n > 20);
    // lateral-only motion reduces to f V_x dt / z
    let s = presets::moving_sprite(&SpriteConfig { width: 64, height: 48, ..Default::default() });
    let f = s.gt_object_flow(0, 0, 2);
    let z = 3.0 - 0.35;
    let ids = s.primitive_ids(0, 0);
    let i = ids.iter().position(|&k| k == 1).unwrap();
    let expected = s.camera(0, 0).fx() * 0.04 * 2.0 / z;
    assert!((f.data[3 * i] - expected).abs() < 1e-9);
}

#[test]
fn dataset_round_trip() {
    let spec = presets::moving_sprite(&SpriteConfig { width: 24, height: 16, frames: 2, views: vec![[0.0; 3], [0.2, 0.0, 0.0]], ..Default::default() });
    let mut ds = Dataset::from_spec(&spec).unwrap();
    ds.rgb[0][0] = ds.rgb[0][0].map(|v| io::quantize(v) as f64 / 255.0);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.cameras, ds.cameras);
    assert_eq!(back.spec, ds.spec);
    assert_eq!(back.rgb[0][0], ds.rgb[0][0]);
    for v in 0..2 {
        for t in 0..2 {
            let d32: Vec<f64> = ds.depth[v][t].data.iter().map(|&d| d as f32 as f64).collect();
            assert_eq!(back.depth[v][t].data, d32);
        }
    }
}

#[test]
fn big_endian_pfm_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("be.pfm");
    let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
    bytes.extend_from_slice(&1.5f32.to_be_bytes());
    bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
    std::fs::write(&p, bytes).unwrap();
    let img = io::read_pfm(&p).unwrap();
    assert_eq!(img.data, vec![1.5, -2.0]);
}

#[test]
fn missing_depth_file_is_named() {
    let spec = presets::occluder_scene(1, 16, 12);
    let ds = Dataset::from_spec(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let gone = io::depth_path(dir.path(), 1, 0);
    std::fs::remove_file(&gone).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::MissingFile(p)) => assert_eq!(p, gone),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schema_version_is_checked() {
    let spec = presets::occluder_scene(1, 16, 12);
    let ds = Dataset::from_spec(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let mut m = ds.manifest();
    m.schema_version = 7;
    io::write_json(&dir.path().join("manifest.json"), &m).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::SchemaVersion { found: 7, expected: 1 })));
}

#[test]
fn spec_json_round_trip() {
    let spec = presets::toy_layout(16, 12, &[-0.2, 0.2]);
    let s = serde_json::to_string(&spec).unwrap();
    let back: SceneSpec = serde_json::from_str(&s).unwrap();
    assert_eq!(back, spec);
}
