//! Rigid camera poses and the pinhole camera model.
//!
//! Poses are stored camera-to-world: `p_world = R * p_cam + t`, so `t` is the
//! camera center. Projection uses the inverse, `p_cam = Rᵀ (p_world − t)`.
//!
//! Pixel convention: a continuous coordinate `(u, v)` falls in pixel
//! `(floor(u), floor(v))`. Depth is the camera-frame `z`, not ray length.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Maximum element of `|RᵀR − I|` accepted for a stored rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Camera-to-world rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
    frame_id: Option<u64>,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("pose has non-finite entries"));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::domain(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::domain(format!("rotation determinant is {det}")));
        }
        Ok(Pose {
            rotation,
            translation,
            frame_id: None,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            frame_id: None,
        }
    }

    pub fn from_translation(t: Vec3) -> Result<Self> {
        Pose::new(Mat3::identity(), t)
    }

    /// Builds a pose from the 12 entries of a row-major 3×4 `[R | t]` matrix.
    pub fn from_rows(m: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }

    /// Row-major 3×4 `[R | t]`.
    #[rustfmt::skip]
    pub fn to_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn with_frame_id(mut self, frame_id: u64) -> Self {
        self.frame_id = Some(frame_id);
        self
    }

    pub fn frame_id(&self) -> Option<u64> {
        self.frame_id
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vec3 {
        self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            frame_id: self.frame_id,
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Result<CamPoint> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("world point has non-finite coordinates"));
        }
        let c = self.transform().apply([p[0], p[1], p[2]]);
        Ok(CamPoint {
            x: c[0],
            y: c[1],
            z: c[2],
        })
    }

    pub fn camera_to_world(&self, c: &CamPoint) -> Vec3 {
        self.rotation * Vec3::new(c.x, c.y, c.z) + self.translation
    }

    /// Maps a point given in this pose's local frame into the world frame.
    pub fn local_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub(crate) fn transform(&self) -> WorldToCamera {
        let r = &self.rotation;
        WorldToCamera {
            rows: [
                [r[(0, 0)], r[(1, 0)], r[(2, 0)]],
                [r[(0, 1)], r[(1, 1)], r[(2, 1)]],
                [r[(0, 2)], r[(1, 2)], r[(2, 2)]],
            ],
            t: [self.translation[0], self.translation[1], self.translation[2]],
        }
    }
}

/// Max element of `|RᵀR − I|`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

/// Closest rotation to `m` in the Frobenius sense, or `None` when the
/// closest orthogonal matrix is a reflection.
pub fn nearest_rotation(m: &Mat3) -> Option<Mat3> {
    if m.determinant() <= 0.0 {
        return None;
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let r = u * v_t;
    (r.determinant() > 0.0).then_some(r)
}

/// Precomputed `Rᵀ` and `t` so the hot loops share one arithmetic path with
/// [`Pose::world_to_camera`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct WorldToCamera {
    rows: [[f64; 3]; 3],
    t: [f64; 3],
}

impl WorldToCamera {
    #[inline]
    pub(crate) fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        let r = &self.rows;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }
}

/// A point in camera coordinates, meters. `z` is depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CamPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        CamPoint { x, y, z }
    }
}

/// Result of projecting a camera point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Image { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

impl Projection {
    pub fn image(self) -> Option<(f64, f64, f64)> {
        match self {
            Projection::Image { u, v, depth } => Some((u, v, depth)),
            Projection::BehindCamera => None,
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::domain(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::domain("principal point must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::domain(format!("image size {width}x{height} is empty")));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn project(&self, c: &CamPoint) -> Projection {
        match self.project_raw(c.x, c.y, c.z) {
            Some((u, v)) => Projection::Image { u, v, depth: c.z },
            None => Projection::BehindCamera,
        }
    }

    #[inline]
    pub(crate) fn project_raw(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        // `!(z > 0)` also rejects NaN
        if !(z > 0.0) {
            return None;
        }
        Some((self.fx * (x / z) + self.cx, self.fy * (y / z) + self.cy))
    }

    /// Integer pixel containing `(u, v)`, if inside the image.
    #[inline]
    pub fn pixel(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        pixel_in(u, v, self.width, self.height)
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> CamPoint {
        CamPoint {
            x: (u - self.cx) / self.fx * depth,
            y: (v - self.cy) / self.fy * depth,
            z: depth,
        }
    }

    /// Intrinsics of the image downsampled by `2^level`.
    pub fn scale(&self, level: u32) -> Result<Intrinsics> {
        if level >= 32 {
            return Err(Error::domain(format!("pyramid level {level} is out of range")));
        }
        let f = (1u64 << level) as f64;
        let width = self.width >> level;
        let height = self.height >> level;
        if width == 0 || height == 0 {
            return Err(Error::domain(format!(
                "level {level} reduces {}x{} to an empty image",
                self.width, self.height
            )));
        }
        Ok(Intrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width,
            height,
        })
    }
}

#[inline]
pub(crate) fn pixel_in(u: f64, v: f64, width: u32, height: u32) -> Option<(u32, u32)> {
    let (fu, fv) = (u.floor(), v.floor());
    // NaN fails both comparisons
    if fu >= 0.0 && fv >= 0.0 && fu < width as f64 && fv < height as f64 {
        Some((fu as u32, fv as u32))
    } else {
        None
    }
}

pub fn world_to_camera(pose: &Pose, p: &Vec3) -> Result<CamPoint> {
    pose.world_to_camera(p)
}

pub fn project(k: &Intrinsics, c: &CamPoint) -> Projection {
    k.project(c)
}

pub fn scale_intrinsics(k: &Intrinsics, level: u32) -> Result<Intrinsics> {
    k.scale(level)
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}
