//! Ready-made scenes used by tests, the CLI and the acceptance suite.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Primitive, SceneSpec, Shape, Texture};
use crate::geometry::Camera;

/// Focal length giving a horizontal field of view of roughly 60 degrees.
pub fn default_focal(width: usize) -> f64 {
    0.9 * width as f64
}

/// Static rig: one forward-looking camera per center, repeated over frames.
pub fn static_rig(width: usize, height: usize, centers: &[Vector3<f64>], frames: usize) -> Vec<Vec<Camera>> {
    let f = default_focal(width);
    centers
        .iter()
        .map(|c| vec![Camera::looking_forward(f, width, height, *c); frames])
        .collect()
}

fn background(depth: f64, seed: u64) -> Primitive {
    // low blue channel keeps background colors apart from occluders
    Primitive {
        shape: Shape::Plane { depth },
        texture: Texture::Noise {
            scale: 0.8,
            seed,
            a: [0.1, 0.15, 0.0],
            b: [0.95, 0.9, 0.35],
        },
        tint: 0.0,
        velocity: [0.0; 3],
    }
}

fn occluder_texture(seed: u64) -> Texture {
    Texture::Noise {
        scale: 0.4,
        seed,
        a: [0.0, 0.1, 0.6],
        b: [0.9, 0.8, 1.0],
    }
}

/// Two views (primary at the origin, secondary translated along +x) looking
/// at a textured background plane with one to three occluders in front.
pub fn occluder_scene(seed: u64, width: usize, height: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_bg = rng.gen_range(6.5..8.5);
    let mut primitives = vec![background(z_bg, rng.gen())];
    let n = rng.gen_range(1..=3);
    let f = default_focal(width);
    let half_w = (width as f64 / 2.0) / f;
    let half_h = (height as f64 / 2.0) / f;
    for _ in 0..n {
        let z = rng.gen_range(2.5..4.0);
        let x = rng.gen_range(-0.6..0.6) * half_w * z;
        let y = rng.gen_range(-0.5..0.5) * half_h * z;
        let r = rng.gen_range(0.25..0.45);
        let shape = if rng.gen_bool(0.5) {
            Shape::Sphere { center: [x, y, z], radius: r }
        } else {
            Shape::Box { min: [x - r, y - r, z - r], max: [x + r, y + r, z + r] }
        };
        primitives.push(Primitive { shape, texture: occluder_texture(rng.gen()), tint: 0.0, velocity: [0.0; 3] });
    }
    let baseline = rng.gen_range(0.3..0.45);
    SceneSpec {
        primitives,
        background: [0.0, 0.0, 0.0],
        cameras: static_rig(width, height, &[Vector3::zeros(), Vector3::new(baseline, 0.0, 0.0)], 1),
        frames: 1,
        z_near: 1.0,
        z_far: 10.0,
    }
}

/// A blue sphere and a brown box in front of a textured wall, seen by views
/// placed along the x axis at the given offsets.
pub fn toy_layout(width: usize, height: usize, offsets: &[f64]) -> SceneSpec {
    let sphere = Primitive {
        shape: Shape::Sphere { center: [-0.45, 0.05, 3.2], radius: 0.4 },
        texture: Texture::Noise { scale: 0.15, seed: 11, a: [0.05, 0.15, 0.55], b: [0.3, 0.45, 0.95] },
        tint: 0.0,
        velocity: [0.0; 3],
    };
    let cube = Primitive {
        shape: Shape::Box { min: [0.2, -0.2, 3.8], max: [0.8, 0.4, 4.4] },
        texture: Texture::Noise { scale: 0.15, seed: 12, a: [0.35, 0.18, 0.05], b: [0.75, 0.45, 0.2] },
        tint: 0.0,
        velocity: [0.0; 3],
    };
    let centers: Vec<_> = offsets.iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect();
    SceneSpec {
        primitives: vec![background(6.0, 10), sphere, cube],
        background: [0.0; 3],
        cameras: static_rig(width, height, &centers, 1),
        frames: 1,
        z_near: 1.5,
        z_far: 8.0,
    }
}

/// Textured box moving at constant velocity in front of a static wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Camera centers at frame 0, one per view.
    pub views: Vec<[f64; 3]>,
    /// Camera displacement per frame, shared by all views.
    pub camera_velocity: [f64; 3],
    pub sprite_velocity: [f64; 3],
    pub sprite_center: [f64; 3],
    pub sprite_half_size: f64,
    pub wall_depth: f64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 128,
            frames: 8,
            views: vec![[0.0; 3]],
            camera_velocity: [0.0; 3],
            sprite_velocity: [0.04, 0.0, 0.0],
            sprite_center: [-0.2, 0.0, 3.0],
            sprite_half_size: 0.35,
            wall_depth: 6.0,
        }
    }
}

impl SpriteConfig {
    /// Nothing moves but the camera.
    pub fn static_pan() -> Self {
        Self { camera_velocity: [0.03, 0.0, 0.0], sprite_velocity: [0.0; 3], ..Self::default() }
    }

    /// The sprite approaches the camera while drifting sideways.
    pub fn depth_parallax() -> Self {
        Self { sprite_velocity: [0.02, 0.0, -0.12], sprite_center: [-0.2, 0.0, 3.6], ..Self::default() }
    }
}

pub fn moving_sprite(cfg: &SpriteConfig) -> SceneSpec {
    let h = cfg.sprite_half_size;
    let c = cfg.sprite_center;
    let sprite = Primitive {
        shape: Shape::Box { min: [c[0] - h, c[1] - h, c[2] - h], max: [c[0] + h, c[1] + h, c[2] + h] },
        texture: occluder_texture(21),
        tint: 0.0,
        velocity: cfg.sprite_velocity,
    };
    let f = default_focal(cfg.width);
    let vel = Vector3::from(cfg.camera_velocity);
    let cameras = cfg
        .views
        .iter()
        .map(|c0| {
            (0..cfg.frames)
                .map(|t| Camera::looking_forward(f, cfg.width, cfg.height, Vector3::from(*c0) + vel * t as f64))
                .collect()
        })
        .collect();
    SceneSpec {
        primitives: vec![background(cfg.wall_depth, 20), sprite],
        background: [0.0; 3],
        cameras,
        frames: cfg.frames,
        z_near: 1.0,
        z_far: 10.0,
    }
}
