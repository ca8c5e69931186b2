//! Pinhole-camera math and the vehicle-state problem definition.
//!
//! The camera frame has x pointing right, y pointing down, and z forward
//! along the optical axis. Target vehicles live on a flat ground plane at
//! `y = height_above_ground`, so their positions reduce to planar `(x, z)`
//! coordinates in meters; velocities are planar too. The y component of the
//! full 3-D state is unmodeled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from camera geometry operations.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("focal lengths and camera height must be positive (f_x={f_x}, f_y={f_y}, height={height})")]
    InvalidIntrinsics { f_x: f64, f_y: f64, height: f64 },
    #[error("bounding box must have positive size (b_w={b_w}, b_h={b_h})")]
    DegenerateBox { b_w: f64, b_h: f64 },
    #[error("fixed depth must be positive (z_hat={z_hat})")]
    InvalidZHat { z_hat: f64 },
    #[error("box bottom edge (v={bottom_v}) is at or above the horizon row (c_y={horizon}); ground back-projection is undefined")]
    HorizonDegenerate { bottom_v: f64, horizon: f64 },
    #[error("frame gap must be positive (dt={dt})")]
    NonPositiveDt { dt: f64 },
    #[error("projection requires positive depth (z={z})")]
    NonPositiveDepth { z: f64 },
}

/// Pinhole camera parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length along x, in pixels.
    pub f_x: f64,
    /// Focal length along y, in pixels.
    pub f_y: f64,
    /// Principal-point x, in pixels.
    pub c_x: f64,
    /// Principal-point y, in pixels.
    pub c_y: f64,
    /// Camera height above the flat ground plane, in meters.
    pub height_above_ground: f64,
}

impl CameraIntrinsics {
    pub fn new(
        f_x: f64,
        f_y: f64,
        c_x: f64,
        c_y: f64,
        height_above_ground: f64,
    ) -> Result<Self, GeometryError> {
        let cam = CameraIntrinsics { f_x, f_y, c_x, c_y, height_above_ground };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f_x > 0.0) || !(self.f_y > 0.0) || !(self.height_above_ground > 0.0) {
            return Err(GeometryError::InvalidIntrinsics {
                f_x: self.f_x,
                f_y: self.f_y,
                height: self.height_above_ground,
            });
        }
        Ok(())
    }

    /// Project a camera-frame point (x right, y down, z forward, meters) to
    /// pixel coordinates `(u, v)`.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Result<(f64, f64), GeometryError> {
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { z });
        }
        Ok((self.c_x + self.f_x * x / z, self.c_y + self.f_y * y / z))
    }
}

/// Axis-aligned 2-D box in pixel coordinates, stored as center + size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    /// Center x in pixels.
    pub b_x: f64,
    /// Center y in pixels.
    pub b_y: f64,
    /// Width in pixels.
    pub b_w: f64,
    /// Height in pixels.
    pub b_h: f64,
}

impl BoundingBox2D {
    pub fn new(b_x: f64, b_y: f64, b_w: f64, b_h: f64) -> Result<Self, GeometryError> {
        let b = BoundingBox2D { b_x, b_y, b_w, b_h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.b_w > 0.0) || !(self.b_h > 0.0) {
            return Err(GeometryError::DegenerateBox { b_w: self.b_w, b_h: self.b_h });
        }
        Ok(())
    }

    /// Box from edge coordinates.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self, GeometryError> {
        Self::new((left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top)
    }

    pub fn left(&self) -> f64 {
        self.b_x - self.b_w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.b_x + self.b_w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.b_y - self.b_h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.b_y + self.b_h / 2.0
    }

    /// Box grown by `factor` of its size on each side (e.g. 0.2 adds 20% of
    /// the width to the left and to the right).
    pub fn expanded(&self, factor: f64) -> BoundingBox2D {
        BoundingBox2D {
            b_x: self.b_x,
            b_y: self.b_y,
            b_w: self.b_w * (1.0 + 2.0 * factor),
            b_h: self.b_h * (1.0 + 2.0 * factor),
        }
    }
}

/// Planar ground-plane vector `(x, z)` in meters (point) or m/s (velocity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Planar {
    pub x: f64,
    pub z: f64,
}

impl Planar {
    pub fn new(x: f64, z: f64) -> Self {
        Planar { x, z }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.z)
    }
}

impl std::ops::Add for Planar {
    type Output = Planar;
    fn add(self, rhs: Planar) -> Planar {
        Planar { x: self.x + rhs.x, z: self.z + rhs.z }
    }
}

impl std::ops::Sub for Planar {
    type Output = Planar;
    fn sub(self, rhs: Planar) -> Planar {
        Planar { x: self.x - rhs.x, z: self.z - rhs.z }
    }
}

impl std::ops::Mul<f64> for Planar {
    type Output = Planar;
    fn mul(self, k: f64) -> Planar {
        Planar { x: self.x * k, z: self.z * k }
    }
}

/// Per-vehicle ground truth or prediction: closest-point planar position,
/// relative planar velocity, and the scalar camera distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Closest-point position `(x, z)` in meters, camera frame.
    pub position: Planar,
    /// Relative velocity `(v_x, v_z)` in m/s.
    pub velocity: Planar,
    /// Scalar distance in meters; equals `position.norm()` by convention.
    pub distance: f64,
}

impl VehicleState {
    /// Build a state with the distance derived from the position.
    pub fn new(position: Planar, velocity: Planar) -> Self {
        VehicleState { position, velocity, distance: planar_distance(position) }
    }
}

/// World-coordinate box quantities at a fixed nominal depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub p_x: f64,
    pub p_y: f64,
    pub p_w: f64,
    pub p_h: f64,
}

/// Lift a pixel box to world-coordinate quantities at the fixed depth
/// `z_hat`: center offsets scale with depth, sizes are focal-normalized.
pub fn box_to_world(
    bbox: &BoundingBox2D,
    cam: &CameraIntrinsics,
    z_hat: f64,
) -> Result<NormalizedBox, GeometryError> {
    cam.validate()?;
    bbox.validate()?;
    if !(z_hat > 0.0) {
        return Err(GeometryError::InvalidZHat { z_hat });
    }
    Ok(NormalizedBox {
        p_x: (bbox.b_x - cam.c_x) / cam.f_x * z_hat,
        p_y: (bbox.b_y - cam.c_y) / cam.f_y * z_hat,
        p_w: bbox.b_w / cam.f_x,
        p_h: bbox.b_h / cam.f_y,
    })
}

/// Invert [`box_to_world`] at the same depth; useful for round-trip checks.
pub fn world_to_box(
    nbox: &NormalizedBox,
    cam: &CameraIntrinsics,
    z_hat: f64,
) -> Result<BoundingBox2D, GeometryError> {
    cam.validate()?;
    if !(z_hat > 0.0) {
        return Err(GeometryError::InvalidZHat { z_hat });
    }
    BoundingBox2D::new(
        nbox.p_x / z_hat * cam.f_x + cam.c_x,
        nbox.p_y / z_hat * cam.f_y + cam.c_y,
        nbox.p_w * cam.f_x,
        nbox.p_h * cam.f_y,
    )
}

/// Lift the box's bottom-center pixel to the flat ground plane, returning the
/// world `(x, z)` of the ground point. This is the geometric reference for
/// the depth of a vehicle whose contact edge projects to that pixel.
pub fn backproject_bottom_center(
    bbox: &BoundingBox2D,
    cam: &CameraIntrinsics,
) -> Result<(f64, f64), GeometryError> {
    cam.validate()?;
    bbox.validate()?;
    let bottom_v = bbox.b_y + bbox.b_h / 2.0;
    if bottom_v <= cam.c_y {
        return Err(GeometryError::HorizonDegenerate { bottom_v, horizon: cam.c_y });
    }
    let z = cam.f_y * cam.height_above_ground / (bottom_v - cam.c_y);
    let x = (bbox.b_x - cam.c_x) * z / cam.f_x;
    Ok((x, z))
}

/// Finite-difference velocity `(p_now − p_prev) / dt`.
pub fn relative_velocity(p_now: Planar, p_prev: Planar, dt: f64) -> Result<Planar, GeometryError> {
    if !(dt > 0.0) {
        return Err(GeometryError::NonPositiveDt { dt });
    }
    Ok(Planar { x: (p_now.x - p_prev.x) / dt, z: (p_now.z - p_prev.z) / dt })
}

/// Scalar distance convention: planar Euclidean norm of the closest point.
pub fn planar_distance(p: Planar) -> f64 {
    p.norm()
}
