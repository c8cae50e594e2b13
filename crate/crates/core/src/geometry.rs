//! Pinhole cameras, rays, reprojection and forward splatting.
//!
//! Conventions: poses are camera-to-world rigid transforms; the camera frame is
//! x-right, y-down, z-forward; pixel centers sit at integer coordinates with
//! the origin at the top-left pixel.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Minimum camera-frame depth accepted by projections (meters).
pub const EPS_Z: f64 = 1e-6;
/// Minimum accumulated splat weight for a pixel to count as covered.
pub const EPS_W: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub k: Matrix3<f64>,
    /// Rotation block of the camera-to-world pose.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Flat row-major form used on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let mut k = [0.0; 9];
        for r in 0..3 {
            for col in 0..3 {
                k[r * 3 + col] = c.k[(r, col)];
            }
        }
        let pose = c.pose();
        let mut t = [0.0; 16];
        for r in 0..4 {
            for col in 0..4 {
                t[r * 4 + col] = pose[(r, col)];
            }
        }
        CameraRecord {
            k,
            t,
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let k = Matrix3::from_row_slice(&r.k);
        let pose = Matrix4::from_row_slice(&r.t);
        Camera::from_pose(k, pose, r.width, r.height)
    }
}

impl Camera {
    /// Builds a camera after validating intrinsics and the rotation block.
    pub fn new(
        k: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::Config("intrinsics must be upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(Error::Config(
                "intrinsics need positive focal lengths and K[2][2] = 1".into(),
            ));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho >= 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("pose rotation is not a proper rotation".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        Ok(Self {
            k,
            rotation,
            translation,
            width,
            height,
        })
    }

    pub fn from_pose(k: Matrix3<f64>, pose: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let rotation = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = pose.fixed_view::<3, 1>(0, 3).into_owned();
        if pose.fixed_view::<1, 4>(3, 0).into_owned() != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0) {
            return Err(Error::Config("pose bottom row must be [0 0 0 1]".into()));
        }
        Self::new(k, rotation, translation, width, height)
    }

    /// Pinhole camera with square pixels, principal point at the image center
    /// and the given camera-to-world rotation and center.
    pub fn simple(
        focal: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
    ) -> Self {
        let k = intrinsics(focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        Self::new(k, rotation, center, width, height).expect("valid simple camera")
    }

    /// Identity rotation looking down +z.
    pub fn looking_forward(focal: f64, width: usize, height: usize, center: Vector3<f64>) -> Self {
        Self::simple(focal, width, height, Matrix3::identity(), center)
    }

    pub fn pose(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    #[inline]
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    #[inline]
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-frame point for a pixel at unit depth, i.e. `K^-1 [x y 1]`.
    #[inline]
    pub fn unproject_unit(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let k = &self.k;
        let y = (pixel.y - k[(1, 2)]) / k[(1, 1)];
        let x = (pixel.x - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector3::new(x, y, 1.0)
    }

    /// World point seen at `pixel` with camera-frame depth `depth`.
    #[inline]
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&(self.unproject_unit(pixel) * depth))
    }

    /// Projects a camera-frame point.
    #[inline]
    pub fn project_camera_frame(&self, pc: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        if pc.z <= EPS_Z || !pc.z.is_finite() {
            return Err(Error::BehindCamera { z: pc.z });
        }
        let h = self.k * pc;
        Ok((Vector2::new(h.x / h.z, h.y / h.z), pc.z))
    }

    /// Pixel and camera-frame depth of a world point.
    #[inline]
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        self.project_camera_frame(&self.world_to_camera(point))
    }

    #[inline]
    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Ray through a pixel; its direction has unit camera-frame depth so that
    /// `origin + z * direction` lies at camera-frame depth `z`.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Ray {
        Ray::new(self.translation, self.rotation * self.unproject_unit(pixel))
    }

    /// Same camera with intrinsics rescaled for a resized image.
    pub fn scaled(&self, factor: f64) -> Camera {
        let mut k = self.k;
        k[(0, 0)] *= factor;
        k[(1, 1)] *= factor;
        k[(0, 1)] *= factor;
        k[(0, 2)] = (k[(0, 2)] + 0.5) * factor - 0.5;
        k[(1, 2)] = (k[(1, 2)] + 0.5) * factor - 0.5;
        Camera {
            k,
            rotation: self.rotation,
            translation: self.translation,
            width: ((self.width as f64 * factor).round() as usize).max(1),
            height: ((self.height as f64 * factor).round() as usize).max(1),
        }
    }
}

pub fn intrinsics(focal: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0)
}

/// Rotation about the world y axis (yaw), handy for toy rigs.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    /// Unit view direction.
    pub view: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        let view = direction / direction.norm();
        Self {
            origin,
            direction,
            view,
        }
    }

    #[inline]
    pub fn at(&self, z: f64) -> Vector3<f64> {
        self.origin + self.direction * z
    }
}

/// Ascending sample depths along a ray with their spacings. The last spacing
/// runs to the far bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleSet {
    pub fn from_depths(depths: Vec<f64>, far: f64) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::Shape("empty sample set".into()));
        }
        let n = depths.len();
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { depths[i + 1] } else { far };
            let d = next - depths[i];
            if !(d > 0.0) {
                return Err(Error::Shape(format!(
                    "sample depths must be strictly increasing and below far (index {i})"
                )));
            }
            deltas.push(d);
        }
        Ok(Self { depths, deltas })
    }

    /// `n` samples over `[near, far)`. With `jitter`, each bin receives one
    /// uniformly placed sample drawn from `rng`; otherwise samples sit at bin
    /// starts.
    pub fn stratified(near: f64, far: f64, n: usize, jitter: Option<&mut dyn rand::RngCore>) -> Self {
        let step = (far - near) / n as f64;
        let mut depths = Vec::with_capacity(n);
        match jitter {
            Some(rng) => {
                use rand::Rng;
                for i in 0..n {
                    // keep strict ordering and a positive last spacing
                    let u: f64 = rng.gen_range(0.0..0.999);
                    depths.push(near + (i as f64 + u) * step);
                }
            }
            None => depths.extend((0..n).map(|i| near + i as f64 * step)),
        }
        Self::from_depths(depths, far).expect("stratified samples are ordered")
    }

    /// Stratified samples uniform in normalized inverse depth `s` over
    /// `[s_lo, s_hi]`, where `s = 0` maps to `near` and `s = 1` to `far`.
    pub fn stratified_inverse(
        near: f64,
        far: f64,
        s_lo: f64,
        s_hi: f64,
        n: usize,
        jitter: Option<&mut dyn rand::RngCore>,
    ) -> Self {
        let unit = Self::stratified(s_lo, s_hi.max(s_lo + 1e-9), n, jitter);
        let depths: Vec<f64> = unit.depths.iter().map(|&s| depth_from_s(s, near, far)).collect();
        Self::from_depths(depths, far).expect("inverse-depth samples are ordered")
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn positions(&self, ray: &Ray) -> Vec<Vector3<f64>> {
        self.depths.iter().map(|&z| ray.at(z)).collect()
    }
}

/// Normalized inverse depth `s` in `[0, 1]` for depth `z` in `[near, far]`.
#[inline]
pub fn s_from_depth(z: f64, near: f64, far: f64) -> f64 {
    (1.0 / z - 1.0 / near) / (1.0 / far - 1.0 / near)
}

#[inline]
pub fn depth_from_s(s: f64, near: f64, far: f64) -> f64 {
    1.0 / (1.0 / near + s * (1.0 / far - 1.0 / near))
}

/// Pose-warping operator: back-projects the flowed pixel at the flowed depth
/// in `src`, then re-projects into `dst`.
///
/// `flow` holds `(dx, dy)` in pixels and `dz` in meters.
pub fn pose_warp(
    pixel: &Vector2<f64>,
    flow: &Vector3<f64>,
    depth: f64,
    src: &Camera,
    dst: &Camera,
) -> Result<(Vector2<f64>, f64)> {
    let d = depth + flow.z;
    if d <= EPS_Z {
        return Err(Error::BehindCamera { z: d });
    }
    let moved = Vector2::new(pixel.x + flow.x, pixel.y + flow.y);
    let world = src.backproject(&moved, d);
    dst.project(&world)
}

/// Output of [`splat_forward`].
#[derive(Debug, Clone)]
pub struct Splat {
    /// Weight-normalized payload.
    pub image: Image,
    /// Total splatted weight per pixel.
    pub weight: Vec<f64>,
    /// Pixels whose total weight exceeds [`EPS_W`].
    pub coverage: Vec<bool>,
}

/// Bilinear forward splatting of per-source payloads onto an output grid.
///
/// `values` holds `channels` entries per source. Sources are accumulated in
/// their given order, so the result is deterministic. Targets falling outside
/// the grid (partially or entirely) only deposit onto in-bounds neighbors.
pub fn splat_forward(
    values: &[f64],
    channels: usize,
    targets: &[Vector2<f64>],
    weights: &[f64],
    width: usize,
    height: usize,
) -> Splat {
    assert_eq!(values.len(), targets.len() * channels);
    assert_eq!(weights.len(), targets.len());
    let mut acc = vec![0.0; width * height * channels];
    let mut wsum = vec![0.0; width * height];
    for (i, t) in targets.iter().enumerate() {
        if !(t.x.is_finite() && t.y.is_finite()) || weights[i] == 0.0 {
            continue;
        }
        let x0 = t.x.floor();
        let y0 = t.y.floor();
        let fx = t.x - x0;
        let fy = t.y - y0;
        let payload = &values[i * channels..(i + 1) * channels];
        for (dx, dy, bw) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if bw == 0.0 {
                continue;
            }
            let xi = x0 as i64 + dx;
            let yi = y0 as i64 + dy;
            if xi < 0 || yi < 0 || xi >= width as i64 || yi >= height as i64 {
                continue;
            }
            let p = yi as usize * width + xi as usize;
            let w = bw * weights[i];
            wsum[p] += w;
            for c in 0..channels {
                acc[p * channels + c] += w * payload[c];
            }
        }
    }
    let coverage: Vec<bool> = wsum.iter().map(|&w| w > EPS_W).collect();
    for p in 0..width * height {
        if coverage[p] {
            for c in 0..channels {
                acc[p * channels + c] /= wsum[p];
            }
        } else {
            for c in 0..channels {
                acc[p * channels + c] = 0.0;
            }
        }
    }
    Splat {
        image: Image {
            width,
            height,
            channels,
            data: acc,
        },
        weight: wsum,
        coverage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(center: Vector3<f64>) -> Camera {
        Camera::new(intrinsics(100.0, 50.0, 50.0), Matrix3::identity(), center, 101, 101).unwrap()
    }

    #[test]
    fn project_principal_ray() {
        let c = cam(Vector3::zeros());
        let (px, d) = c.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (50.0, 50.0, 2.0));
    }

    #[test]
    fn project_offset_point_uses_pinhole_ratio() {
        let c = cam(Vector3::zeros());
        let (px, _) = c.project(&Vector3::new(0.1, 0.0, 2.0)).unwrap();
        // f * x / z = 100 * 0.1 / 2
        assert!((px.x - 55.0).abs() < 1e-12 && (px.y - 50.0).abs() < 1e-12);
    }

    #[test]
    fn project_rejects_zero_depth() {
        let c = cam(Vector3::zeros());
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(c.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn camera_validation() {
        let bad_k = Matrix3::new(100.0, 0.0, 5.0, 1.0, 100.0, 5.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(bad_k, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(intrinsics(10.0, 5.0, 5.0), skewed, Vector3::zeros(), 10, 10).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(intrinsics(10.0, 5.0, 5.0), reflect, Vector3::zeros(), 10, 10).is_err());
    }

    #[test]
    fn pose_warp_identity_is_exact() {
        let c = cam(Vector3::new(0.3, -0.2, 0.1));
        let px = Vector2::new(12.25, 80.5);
        let (out, d) = pose_warp(&px, &Vector3::zeros(), 3.5, &c, &c).unwrap();
        assert!((out - px).norm() < 1e-12);
        assert!((d - 3.5).abs() < 1e-12);
    }

    #[test]
    fn pose_warp_translation_shift() {
        let src = cam(Vector3::zeros());
        let dst = cam(Vector3::new(0.2, 0.0, 0.0));
        let px = Vector2::new(50.0, 40.0);
        let (out, _) = pose_warp(&px, &Vector3::zeros(), 4.0, &src, &dst).unwrap();
        // camera moves right, scene shifts left by f * t / d
        assert!((out.x - (50.0 - 100.0 * 0.2 / 4.0)).abs() < 1e-12);
        assert!((out.y - 40.0).abs() < 1e-12);
    }

    #[test]
    fn pose_warp_depth_flow_scales_toward_principal_point() {
        let c = cam(Vector3::zeros());
        let px = Vector2::new(70.0, 30.0);
        let (out, d) = pose_warp(&px, &Vector3::new(0.0, 0.0, 1.0), 2.0, &c, &c).unwrap();
        // same world point moved in depth: pixel offset scales by d / (d + dz)
        assert!((d - 3.0).abs() < 1e-12);
        assert!((out.x - 70.0).abs() < 1e-12, "flow changes depth only, pixel stays: {out}");
        let world = c.backproject(&px, 2.0);
        let (moved, _) = c.project(&(world + Vector3::new(0.0, 0.0, 1.0))).unwrap();
        let scale = 2.0 / 3.0;
        assert!((moved.x - (50.0 + 20.0 * scale)).abs() < 1e-12);
        assert!((moved.y - (50.0 - 20.0 * scale)).abs() < 1e-12);
    }

    #[test]
    fn pose_warp_rejects_negative_depth() {
        let c = cam(Vector3::zeros());
        assert!(pose_warp(&Vector2::new(1.0, 1.0), &Vector3::new(0.0, 0.0, -3.0), 2.0, &c, &c).is_err());
    }

    #[test]
    fn splat_integer_target() {
        let s = splat_forward(&[7.0], 1, &[Vector2::new(2.0, 1.0)], &[1.0], 4, 3);
        assert_eq!(s.image.get(2, 1, 0), 7.0);
        assert_eq!(s.weight[4 + 2], 1.0);
        assert_eq!(s.coverage.iter().filter(|&&c| c).count(), 1);
    }

    #[test]
    fn splat_half_pixel_splits_evenly() {
        let s = splat_forward(&[4.0], 1, &[Vector2::new(1.5, 0.0)], &[1.0], 4, 1);
        assert_eq!(s.weight, vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(s.image.data, vec![0.0, 4.0, 4.0, 0.0]);
    }

    #[test]
    fn splat_two_sources_average_by_weight() {
        let s = splat_forward(
            &[1.0, 4.0],
            1,
            &[Vector2::new(1.0, 1.0), Vector2::new(1.0, 1.0)],
            &[1.0, 3.0],
            3,
            3,
        );
        // (1 * 1 + 4 * 3) / 4
        assert!((s.image.get(1, 1, 0) - 3.25).abs() < 1e-12);
    }

    #[test]
    fn ray_depth_parametrization() {
        let c = Camera::simple(80.0, 64, 48, rotation_y(0.3), Vector3::new(1.0, 0.5, -2.0));
        let px = Vector2::new(10.3, 40.7);
        let ray = c.ray(&px);
        let (back, d) = c.project(&ray.at(3.25)).unwrap();
        assert!((back - px).norm() < 1e-9 && (d - 3.25).abs() < 1e-9);
        assert!((ray.view.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_set_last_delta_reaches_far() {
        let s = SampleSet::stratified(1.0, 3.0, 4, None);
        assert_eq!(s.depths, vec![1.0, 1.5, 2.0, 2.5]);
        assert_eq!(s.deltas, vec![0.5; 4]);
        assert!(SampleSet::from_depths(vec![1.0, 1.0], 2.0).is_err());
    }

    #[test]
    fn inverse_depth_map_round_trips() {
        for s in [0.0, 0.25, 0.9, 1.0] {
            let z = depth_from_s(s, 1.0, 10.0);
            assert!((s_from_depth(z, 1.0, 10.0) - s).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            x in 0.0f64..100.0, y in 0.0f64..100.0, depth in 0.1f64..50.0,
            yaw in -1.0f64..1.0, tx in -2.0f64..2.0, tz in -2.0f64..2.0,
        ) {
            let c = Camera::simple(120.0, 101, 101, rotation_y(yaw), Vector3::new(tx, 0.3, tz));
            let px = Vector2::new(x, y);
            let world = c.backproject(&px, depth);
            let (back, d) = c.project(&world).unwrap();
            prop_assert!((back - px).norm() < 1e-9);
            prop_assert!((d - depth).abs() < 1e-9 * depth.max(1.0));
        }

        #[test]
        fn splat_conserves_mass(
            pts in proptest::collection::vec((-2.0f64..12.0, -2.0f64..9.0, 0.1f64..2.0, -1.0f64..1.0), 1..40)
        ) {
            let targets: Vec<_> = pts.iter().map(|p| Vector2::new(p.0, p.1)).collect();
            let weights: Vec<_> = pts.iter().map(|p| p.2).collect();
            let values: Vec<_> = pts.iter().map(|p| p.3).collect();
            let s = splat_forward(&values, 1, &targets, &weights, 10, 7);
            // reference: in-bounds deposits before normalization
            let mut expected = 0.0;
            for (i, t) in targets.iter().enumerate() {
                let (x0, y0) = (t.x.floor(), t.y.floor());
                let (fx, fy) = (t.x - x0, t.y - y0);
                for (dx, dy, bw) in [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)] {
                    let (xi, yi) = (x0 + dx, y0 + dy);
                    if xi >= 0.0 && yi >= 0.0 && xi < 10.0 && yi < 7.0 {
                        expected += bw * weights[i] * values[i];
                    }
                }
            }
            let got: f64 = s.image.data.iter().zip(&s.weight).map(|(v, w)| v * w).sum();
            prop_assert!((got - expected).abs() < 1e-9);
        }
    }
}
