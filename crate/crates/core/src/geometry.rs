//! Pinhole camera math and axis-aligned box utilities.
//!
//! Pixel `(u, v)` addresses column `u`, row `v`; the camera frame is x right,
//! y down, z forward. Extrinsics map camera coordinates to world coordinates:
//! `p_world = R * p_cam + t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("rotation is not orthonormal with determinant +1")]
    Rotation,
    #[error("point is not visible (behind the camera)")]
    NotVisible,
    #[error("degenerate ray: point coincides with the camera center")]
    DegenerateRay,
    #[error("pixel ({u}, {v}) has no valid depth")]
    NoDepth { u: usize, v: usize },
    #[error("frame extents disagree: {0}")]
    Extents(String),
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::Intrinsics(format!("{self:?}")))
        }
    }

    /// `K^-1 (u, v, 1)`.
    pub fn unproject(&self, u: f64, v: f64) -> Point3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Row-major camera-to-world rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: Point3) -> Result<Self, GeometryError> {
        let e = Self { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(GeometryError::Rotation);
                }
            }
        }
        if (dot(r[0], cross(r[1], r[2])) - 1.0).abs() > 1e-6 {
            return Err(GeometryError::Rotation);
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Point3, target: Point3, up: Point3) -> Result<Self, GeometryError> {
        let f = sub(target, eye);
        let fl = norm(f);
        if fl == 0.0 {
            return Err(GeometryError::Rotation);
        }
        let z = scale(f, 1.0 / fl);
        let x = cross(z, up);
        let xl = norm(x);
        if xl < 1e-9 {
            return Err(GeometryError::Rotation);
        }
        let x = scale(x, 1.0 / xl);
        let y = cross(z, x);
        // Columns of R are the camera axes in world coordinates.
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Self::new(rotation, eye)
    }

    pub fn cam_to_world(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        add([dot(r[0], p), dot(r[1], p), dot(r[2], p)], self.translation)
    }

    pub fn world_to_cam(&self, p: Point3) -> Point3 {
        let d = sub(p, self.translation);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// `other ∘ self`: apply `self`, then the rigid motion `other`.
    pub fn then(&self, other: &Extrinsics) -> Extrinsics {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| other.rotation[i][k] * self.rotation[k][j]).sum();
            }
        }
        Extrinsics {
            rotation,
            translation: other.cam_to_world(self.translation),
        }
    }
}

/// One posed RGB-D observation. Depth 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    /// Row-major `H x W x 3`, one byte per channel (value / 255 in [0, 1]).
    pub color: Vec<u8>,
    /// Row-major `H x W`, meters along the optical axis.
    pub depth: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraFrame {
    pub fn new(color: Vec<u8>, depth: Vec<f64>, intrinsics: Intrinsics, extrinsics: Extrinsics) -> Result<Self, GeometryError> {
        let f = Self {
            color,
            depth,
            intrinsics,
            extrinsics,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()?;
        let n = self.width() * self.height();
        if self.depth.len() != n || self.color.len() != 3 * n {
            return Err(GeometryError::Extents(format!(
                "{}x{} image with {} depth and {} color values",
                self.width(),
                self.height(),
                self.depth.len(),
                self.color.len()
            )));
        }
        if self.depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(GeometryError::Extents("depth must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width() + u]
    }

    pub fn rgb_at(&self, u: usize, v: usize) -> [f64; 3] {
        let i = 3 * (v * self.width() + u);
        [
            self.color[i] as f64 / 255.0,
            self.color[i + 1] as f64 / 255.0,
            self.color[i + 2] as f64 / 255.0,
        ]
    }

    /// World point seen at pixel `(u, v)`; `None` for invalid depth or
    /// out-of-bounds pixels.
    pub fn backproject_pixel(&self, u: usize, v: usize) -> Option<Point3> {
        if u >= self.width() || v >= self.height() {
            return None;
        }
        let d = self.depth_at(u, v);
        (d > 0.0).then(|| self.backproject(u as f64, v as f64, d))
    }

    /// `T [d K^-1 (u, v, 1); 1]` for arbitrary (sub)pixel coordinates.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Point3 {
        let ray = self.intrinsics.unproject(u, v);
        self.extrinsics.cam_to_world(scale(ray, depth))
    }

    /// Inverse of [`backproject`](Self::backproject): `(u, v, depth)`.
    pub fn project_world_to_pixel(&self, p: Point3) -> Result<(f64, f64, f64), GeometryError> {
        let c = self.extrinsics.world_to_cam(p);
        if c[2] <= 0.0 {
            return Err(GeometryError::NotVisible);
        }
        let k = &self.intrinsics;
        Ok((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
    }

    pub fn ray_for_pixel(&self, u: usize, v: usize) -> Result<Ray, GeometryError> {
        let p = self.backproject_pixel(u, v).ok_or(GeometryError::NoDepth { u, v })?;
        Ray::new(self.extrinsics.translation, p)
    }

    /// Ray through subpixel `(u, v)` terminating at `depth`.
    pub fn ray_through(&self, u: f64, v: f64, depth: f64) -> Result<Ray, GeometryError> {
        Ray::new(self.extrinsics.translation, self.backproject(u, v, depth))
    }

    /// Valid world points of every pixel in patch `(pr, pc)`.
    pub fn patch_points(&self, patch_size: usize, pr: usize, pc: usize) -> Vec<Point3> {
        let (v0, u0) = (pr * patch_size, pc * patch_size);
        let mut pts = Vec::with_capacity(patch_size * patch_size);
        for v in v0..(v0 + patch_size).min(self.height()) {
            for u in u0..(u0 + patch_size).min(self.width()) {
                if let Some(p) = self.backproject_pixel(u, v) {
                    pts.push(p);
                }
            }
        }
        pts
    }

    /// Patch grid extents; partial edge patches are padded with invalid pixels.
    pub fn patch_grid(&self, patch_size: usize) -> (usize, usize) {
        (self.height().div_ceil(patch_size), self.width().div_ceil(patch_size))
    }

    /// Mean world coordinate over the valid pixels of every patch, row-major.
    pub fn patch_mean_world(&self, patch_size: usize) -> PatchPoints {
        let (hp, wp) = self.patch_grid(patch_size);
        let mut means = Vec::with_capacity(hp * wp);
        let mut valid = Vec::with_capacity(hp * wp);
        for pr in 0..hp {
            for pc in 0..wp {
                let pts = self.patch_points(patch_size, pr, pc);
                match mean_point(&pts) {
                    Some(m) => {
                        means.push(m);
                        valid.push(true);
                    }
                    None => {
                        means.push([0.0; 3]);
                        valid.push(false);
                    }
                }
            }
        }
        PatchPoints { hp, wp, means, valid }
    }

    /// Mean valid depth of every patch (0 where the patch has none).
    pub fn patch_mean_depth(&self, patch_size: usize) -> Vec<f64> {
        let (hp, wp) = self.patch_grid(patch_size);
        let mut out = Vec::with_capacity(hp * wp);
        for pr in 0..hp {
            for pc in 0..wp {
                let (mut s, mut n) = (0.0, 0usize);
                for v in pr * patch_size..((pr + 1) * patch_size).min(self.height()) {
                    for u in pc * patch_size..((pc + 1) * patch_size).min(self.width()) {
                        let d = self.depth_at(u, v);
                        if d > 0.0 {
                            s += d;
                            n += 1;
                        }
                    }
                }
                out.push(if n > 0 { s / n as f64 } else { 0.0 });
            }
        }
        out
    }

    /// Ray through every patch's center, terminated at the patch mean depth;
    /// `None` for patches without valid depth.
    pub fn patch_center_ray(&self, patch_size: usize) -> Vec<Option<Ray>> {
        let (_, wp) = self.patch_grid(patch_size);
        let half = (patch_size as f64 - 1.0) / 2.0;
        self.patch_mean_depth(patch_size)
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let (pr, pc) = (i / wp, i % wp);
                let u = (pc * patch_size) as f64 + half;
                let v = (pr * patch_size) as f64 + half;
                (d > 0.0).then(|| self.ray_through(u, v, d).ok()).flatten()
            })
            .collect()
    }
}

pub fn mean_point(pts: &[Point3]) -> Option<Point3> {
    if pts.is_empty() {
        return None;
    }
    let s = pts.iter().fold([0.0; 3], |acc, p| add(acc, *p));
    Some(scale(s, 1.0 / pts.len() as f64))
}

/// Per-patch mean world coordinates with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPoints {
    pub hp: usize,
    pub wp: usize,
    pub means: Vec<Point3>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub point: Point3,
    /// Unit direction from `origin` toward `point`.
    pub direction: Point3,
}

impl Ray {
    pub fn new(origin: Point3, point: Point3) -> Result<Self, GeometryError> {
        let d = sub(point, origin);
        let n = norm(d);
        if n == 0.0 {
            return Err(GeometryError::DegenerateRay);
        }
        Ok(Self {
            origin,
            point,
            direction: scale(d, 1.0 / n),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    /// Box spanning the two corners in any order.
    pub fn from_corners(a: Point3, b: Point3) -> Self {
        Self {
            min: [a[0].min(b[0]), a[1].min(b[1]), a[2].min(b[2])],
            max: [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])],
        }
    }

    pub fn from_center_size(c: Point3, size: Point3) -> Self {
        let h = scale(size, 0.5);
        Self {
            min: sub(c, h),
            max: add(c, h),
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i])
    }

    pub fn center(&self) -> Point3 {
        scale(add(self.min, self.max), 0.5)
    }

    pub fn size(&self) -> Point3 {
        sub(self.max, self.min)
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    /// Closed-bounds containment.
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|i| (self.max[i].min(other.max[i]) - self.min[i].max(other.min[i])).max(0.0))
            .product()
    }

    /// Slab-method entry distance along `origin + s * dir`, if the ray hits.
    pub fn ray_entry(&self, origin: Point3, dir: Point3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

/// Intersection over union of two boxes; 0 when the union has no volume.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> f64 {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    /// Fraction of valid points inside the box.
    pub fraction: f64,
    /// `fraction > 0.5`, strictly.
    pub eligible: bool,
    /// Set when there were no valid points to test.
    pub empty: bool,
}

pub fn patch_box_coverage(points: &[Point3], b: &Aabb) -> Coverage {
    if points.is_empty() {
        return Coverage {
            fraction: 0.0,
            eligible: false,
            empty: true,
        };
    }
    let inside = points.iter().filter(|p| b.contains(**p)).count();
    let fraction = inside as f64 / points.len() as f64;
    Coverage {
        fraction,
        eligible: fraction > 0.5,
        empty: false,
    }
}
