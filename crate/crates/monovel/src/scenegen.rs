//! Synthetic driving-scene generation with exact ground truth.
//!
//! Scenes are viewed by a static camera over a flat road: each target vehicle
//! is a fronto-parallel textured quad gliding at constant planar velocity,
//! hovering a small ground-clearance above the road like a real car body.
//! Because the geometry is closed-form, every label is exact: boxes come from
//! projecting quad corners, states from the quad centers, and dense optical
//! flow from per-pixel visibility.
//!
//! Rendering is 4x4 supersampled so sub-pixel motion survives quantization;
//! positions and displacements are sampled on a 2⁻¹⁶ grid so the kinematic
//! consistency invariants hold bitwise (exactly, when `dt` is a power of
//! two — the default 0.5 s is).
//!
//! The module also owns dataset (de)serialization and an adapter for
//! Tusimple-style clip directories.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    relative_velocity, BoundingBox2D, CameraIntrinsics, GeometryError, Planar, VehicleState,
};

/// Position grid pitch: all sampled coordinates and displacements are
/// integer multiples of this, keeping kinematics exact in double precision.
const GRID: f64 = 1.0 / 65536.0;

/// Vehicle body width range in meters.
const WIDTH_RANGE: (f64, f64) = (1.5, 2.3);
/// Vehicle body height range in meters.
const HEIGHT_RANGE: (f64, f64) = (1.0, 1.5);
/// Ground clearance range in meters: the body bottom hovers this far above
/// the road, so flat-ground back-projection of the box bottom overestimates
/// depth — the residual the network learns.
const CLEARANCE_RANGE: (f64, f64) = (0.15, 0.35);
/// Minimum depth separation between vehicles, meters (keeps painter's
/// ordering unambiguous).
const MIN_DEPTH_GAP: f64 = 0.75;
/// Maximum fraction of a farther vehicle's box the nearer one may cover.
const MAX_OCCLUSION: f64 = 0.5;
/// Placement attempts per vehicle before giving up.
const MAX_ATTEMPTS: usize = 100;
/// Supersampling factor per axis.
const AA: usize = 4;

/// Errors from scene generation.
#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place vehicle {index} within {attempts} attempts (image bounds, depth separation, or occlusion limit)")]
    PlacementFailed { index: usize, attempts: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Errors from dataset reading/writing.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset format error at {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), message: message.into() }
}

/// Sampling bounds for vehicle placement, meters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PositionRange {
    pub x: (f64, f64),
    pub z: (f64, f64),
}

/// Everything the generator needs to produce one scene. Omitted JSON
/// fields fall back to these defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub num_vehicles: usize,
    /// Inter-frame gap in seconds.
    pub dt: f64,
    pub intrinsics: CameraIntrinsics,
    pub position_range: PositionRange,
    /// Per-component velocity bounds in m/s.
    pub speed_range: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            image_size: (64, 192),
            num_vehicles: 3,
            dt: 0.5,
            intrinsics: CameraIntrinsics {
                f_x: 96.0,
                f_y: 96.0,
                c_x: 96.0,
                c_y: 32.0,
                height_above_ground: 1.5,
            },
            position_range: PositionRange { x: (-5.5, 5.5), z: (8.0, 60.0) },
            speed_range: (-4.0, 4.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.intrinsics.validate().map_err(|e| SceneError::InvalidConfig(e.to_string()))?;
        if self.num_vehicles < 1 {
            return Err(SceneError::InvalidConfig("num_vehicles must be ≥ 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(SceneError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.position_range.z.0 > 0.0) {
            return Err(SceneError::InvalidConfig("position z lower bound must be positive".into()));
        }
        if self.position_range.x.0 > self.position_range.x.1
            || self.position_range.z.0 > self.position_range.z.1
            || self.speed_range.0 > self.speed_range.1
        {
            return Err(SceneError::InvalidConfig("range lower bound exceeds upper bound".into()));
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return Err(SceneError::InvalidConfig("image_size must be at least 16x16".into()));
        }
        Ok(())
    }
}

/// Procedural paint job for one vehicle.
#[derive(Debug, Clone, Copy)]
pub struct VehicleStyle {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub stripes: u32,
}

/// One target vehicle: a fronto-parallel quad at constant planar velocity.
/// `center_x`/`z` are the current-frame position of the quad center bottom.
#[derive(Debug, Clone, Copy)]
pub struct QuadVehicle {
    pub center_x: f64,
    pub z: f64,
    pub width: f64,
    pub height: f64,
    /// Gap between the body bottom and the road, meters.
    pub clearance: f64,
    pub velocity: Planar,
    pub style: VehicleStyle,
}

impl QuadVehicle {
    /// Current-frame planar position of the closest point (quad center bottom).
    pub fn position(&self) -> Planar {
        Planar::new(self.center_x, self.z)
    }

    /// Quad extent at the current frame or one `dt` earlier.
    fn extent(&self, cam: &CameraIntrinsics, dt: f64, prev: bool) -> QuadExtent {
        let (cx, z) = if prev {
            (self.center_x - self.velocity.x * dt, self.z - self.velocity.z * dt)
        } else {
            (self.center_x, self.z)
        };
        let y_bottom = cam.height_above_ground - self.clearance;
        QuadExtent {
            x_left: cx - self.width / 2.0,
            x_right: cx + self.width / 2.0,
            y_top: y_bottom - self.height,
            y_bottom,
            z,
        }
    }
}

/// World-space rectangle of a quad at one instant (camera frame, y down).
#[derive(Debug, Clone, Copy)]
struct QuadExtent {
    x_left: f64,
    x_right: f64,
    y_top: f64,
    y_bottom: f64,
    z: f64,
}

impl QuadExtent {
    fn project(&self, cam: &CameraIntrinsics) -> Result<BoundingBox2D, GeometryError> {
        let (l, t) = cam.project(self.x_left, self.y_top, self.z)?;
        let (r, b) = cam.project(self.x_right, self.y_bottom, self.z)?;
        BoundingBox2D::from_edges(l, t, r, b)
    }

    /// World point under a continuous pixel, if the quad covers it.
    fn hit(&self, cam: &CameraIntrinsics, u: f64, v: f64) -> Option<(f64, f64)> {
        let x = (u - cam.c_x) * self.z / cam.f_x;
        let y = (v - cam.c_y) * self.z / cam.f_y;
        if x >= self.x_left && x <= self.x_right && y >= self.y_top && y <= self.y_bottom {
            Some((x, y))
        } else {
            None
        }
    }
}

/// A training/eval unit: two frames, current-frame boxes, exact states, and
/// (for synthetic data) dense prev→curr flow.
#[derive(Debug, Clone)]
pub struct FramePairSample {
    /// (3, H, W) RGB in [0, 1].
    pub image_prev: Array3<f64>,
    /// (3, H, W) RGB in [0, 1].
    pub image_curr: Array3<f64>,
    /// Current-frame amodal boxes, aligned with `states`.
    pub boxes: Vec<BoundingBox2D>,
    pub states: Vec<VehicleState>,
    /// (2, H, W): channel 0 = du, channel 1 = dv, in pixels, prev→curr;
    /// absent for ingested datasets without flow ground truth.
    pub flow_gt: Option<Array3<f64>>,
    pub dt: f64,
    pub intrinsics: CameraIntrinsics,
}

impl FramePairSample {
    pub fn image_size(&self) -> (usize, usize) {
        let d = self.image_curr.dim();
        (d.1, d.2)
    }
}

/// Static background color at a continuous pixel: sky gradient above the
/// horizon, shaded road with dashed lane markings below. Purely a function
/// of the pixel, so background flow is zero.
fn background_color(cam: &CameraIntrinsics, u: f64, v: f64) -> [f64; 3] {
    if v <= cam.c_y {
        let t = (v / cam.c_y.max(1.0)).clamp(0.0, 1.0);
        [0.55 + 0.20 * t, 0.70 + 0.10 * t, 0.90]
    } else {
        let zg = cam.f_y * cam.height_above_ground / (v - cam.c_y);
        let xg = (u - cam.c_x) * zg / cam.f_y * (cam.f_y / cam.f_x);
        let shade = (1.0 / (1.0 + 0.03 * zg)).clamp(0.0, 1.0);
        let mut col = [0.18 + 0.16 * shade, 0.18 + 0.16 * shade, 0.19 + 0.16 * shade];
        // Dashed lane markings at fixed lateral offsets.
        for lane_x in [-3.7, 0.0, 3.7] {
            if (xg - lane_x).abs() < 0.08 && (zg / 4.0).fract() < 0.5 {
                col = [0.85, 0.85, 0.80];
            }
        }
        col
    }
}

/// Texture of a vehicle quad in local coordinates (s across, t down, both in
/// [0,1]): body color, darker window band, vertical accent stripes, and two
/// bright taillights near the bottom corners.
fn vehicle_color(style: &VehicleStyle, s: f64, t: f64) -> [f64; 3] {
    let mut col = style.base;
    if (0.15..0.45).contains(&t) {
        col = [col[0] * 0.35, col[1] * 0.35, col[2] * 0.40];
    }
    let stripe = ((s * style.stripes as f64).floor() as i64) % 2 == 0;
    if stripe && t >= 0.45 {
        col = [
            col[0] * 0.75 + style.accent[0] * 0.25,
            col[1] * 0.75 + style.accent[1] * 0.25,
            col[2] * 0.75 + style.accent[2] * 0.25,
        ];
    }
    if t > 0.80 && ((0.05..0.20).contains(&s) || (0.80..0.95).contains(&s)) {
        col = [0.95, 0.25, 0.20];
    }
    col
}

/// Color of the scene at a continuous pixel for one frame, painter's order.
fn scene_color(
    vehicles_near_to_far: &[(QuadExtent, &VehicleStyle)],
    cam: &CameraIntrinsics,
    u: f64,
    v: f64,
) -> [f64; 3] {
    for (ext, style) in vehicles_near_to_far {
        if let Some((x, y)) = ext.hit(cam, u, v) {
            let s = (x - ext.x_left) / (ext.x_right - ext.x_left);
            let t = (y - ext.y_top) / (ext.y_bottom - ext.y_top);
            return vehicle_color(style, s, t);
        }
    }
    background_color(cam, u, v)
}

/// Render one frame with 4x4 supersampling, quantized to 8-bit levels so a
/// PNG round trip is bit-identical.
fn render_frame(
    vehicles: &[QuadVehicle],
    cam: &CameraIntrinsics,
    size: (usize, usize),
    dt: f64,
    prev: bool,
) -> Array3<f64> {
    let (h, w) = size;
    let mut order: Vec<(QuadExtent, &VehicleStyle)> =
        vehicles.iter().map(|veh| (veh.extent(cam, dt, prev), &veh.style)).collect();
    order.sort_by(|a, b| a.0.z.partial_cmp(&b.0.z).expect("non-finite depth"));
    let mut img = Array3::<f64>::zeros((3, h, w));
    let inv = 1.0 / (AA * AA) as f64;
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..AA {
                for sx in 0..AA {
                    let u = px as f64 + (sx as f64 + 0.5) / AA as f64;
                    let v = py as f64 + (sy as f64 + 0.5) / AA as f64;
                    let c = scene_color(&order, cam, u, v);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            for ch in 0..3 {
                let q = (acc[ch] * inv * 255.0).round().clamp(0.0, 255.0);
                img[(ch, py, px)] = q / 255.0;
            }
        }
    }
    img
}

/// Dense prev→curr flow at pixel centers: the motion of the surface point
/// visible at each center in the previous frame; zero on background.
fn render_flow(
    vehicles: &[QuadVehicle],
    cam: &CameraIntrinsics,
    size: (usize, usize),
    dt: f64,
) -> Array3<f64> {
    let (h, w) = size;
    let mut order: Vec<(QuadExtent, &QuadVehicle)> =
        vehicles.iter().map(|veh| (veh.extent(cam, dt, true), veh)).collect();
    order.sort_by(|a, b| a.0.z.partial_cmp(&b.0.z).expect("non-finite depth"));
    let mut flow = Array3::<f64>::zeros((2, h, w));
    for py in 0..h {
        for px in 0..w {
            let u = px as f64 + 0.5;
            let v = py as f64 + 0.5;
            for (ext, veh) in &order {
                if let Some((x, y)) = ext.hit(cam, u, v) {
                    let z_curr = ext.z + veh.velocity.z * dt;
                    let x_curr = x + veh.velocity.x * dt;
                    let u2 = cam.c_x + cam.f_x * x_curr / z_curr;
                    let v2 = cam.c_y + cam.f_y * y / z_curr;
                    flow[(0, py, px)] = u2 - u;
                    flow[(1, py, px)] = v2 - v;
                    break;
                }
            }
        }
    }
    flow
}

/// Render a fully specified vehicle list into a sample with exact labels.
/// Placement validity (in-frame, occlusion budget) is the caller's business;
/// this only requires positive depths in both frames.
pub fn render_scene(
    vehicles: &[QuadVehicle],
    config: &SceneConfig,
) -> Result<FramePairSample, SceneError> {
    config.validate()?;
    let cam = &config.intrinsics;
    let mut boxes = Vec::with_capacity(vehicles.len());
    let mut states = Vec::with_capacity(vehicles.len());
    for veh in vehicles {
        let curr = veh.extent(cam, config.dt, false);
        let prev = veh.extent(cam, config.dt, true);
        if prev.z <= 0.0 || curr.z <= 0.0 {
            return Err(SceneError::Geometry(GeometryError::NonPositiveDepth {
                z: prev.z.min(curr.z),
            }));
        }
        boxes.push(curr.project(cam)?);
        let p_curr = veh.position();
        let p_prev =
            Planar::new(veh.center_x - veh.velocity.x * config.dt, veh.z - veh.velocity.z * config.dt);
        // Store the velocity exactly as the finite difference of the two
        // frame positions, so recomputing it from the sample is bit-equal.
        let v = relative_velocity(p_curr, p_prev, config.dt)?;
        states.push(VehicleState::new(p_curr, v));
    }
    let image_prev = render_frame(vehicles, cam, config.image_size, config.dt, true);
    let image_curr = render_frame(vehicles, cam, config.image_size, config.dt, false);
    let flow = render_flow(vehicles, cam, config.image_size, config.dt);
    Ok(FramePairSample {
        image_prev,
        image_curr,
        boxes,
        states,
        flow_gt: Some(flow),
        dt: config.dt,
        intrinsics: *cam,
    })
}

/// Sample `n` uniformly from the 2⁻¹⁶ grid restricted to `[lo, hi]`.
fn grid_sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let k_lo = (lo / GRID).ceil() as i64;
    let k_hi = (hi / GRID).floor() as i64;
    if k_lo >= k_hi {
        return k_lo as f64 * GRID;
    }
    rng.gen_range(k_lo..=k_hi) as f64 * GRID
}

fn box_area(b: &BoundingBox2D) -> f64 {
    b.b_w * b.b_h
}

fn box_intersection_area(a: &BoundingBox2D, b: &BoundingBox2D) -> f64 {
    let w = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    w * h
}

fn inside_image(b: &BoundingBox2D, size: (usize, usize)) -> bool {
    b.left() >= 0.0 && b.top() >= 0.0 && b.right() <= size.1 as f64 && b.bottom() <= size.0 as f64
}

/// Sample one scene's worth of vehicles, rejecting placements that leave the
/// image, share a depth slab, or occlude a farther vehicle beyond the budget.
fn sample_vehicles(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<QuadVehicle>, SceneError> {
    let cam = &config.intrinsics;
    let mut placed: Vec<(QuadVehicle, BoundingBox2D, BoundingBox2D)> = Vec::new();
    for index in 0..config.num_vehicles {
        let mut ok = false;
        for _attempt in 0..MAX_ATTEMPTS {
            let z = grid_sample(rng, config.position_range.z.0, config.position_range.z.1);
            let x = grid_sample(rng, config.position_range.x.0, config.position_range.x.1);
            let disp_lo = config.speed_range.0 * config.dt;
            let disp_hi = config.speed_range.1 * config.dt;
            let disp_x = grid_sample(rng, disp_lo, disp_hi);
            let disp_z = grid_sample(rng, disp_lo, disp_hi);
            let veh = QuadVehicle {
                center_x: x,
                z,
                width: rng.gen_range(WIDTH_RANGE.0..WIDTH_RANGE.1),
                height: rng.gen_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1),
                clearance: rng.gen_range(CLEARANCE_RANGE.0..CLEARANCE_RANGE.1),
                velocity: Planar::new(disp_x / config.dt, disp_z / config.dt),
                style: VehicleStyle {
                    base: [
                        rng.gen_range(0.25..0.9),
                        rng.gen_range(0.25..0.9),
                        rng.gen_range(0.25..0.9),
                    ],
                    accent: [
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                    ],
                    stripes: rng.gen_range(2..6),
                },
            };
            let prev_ext = veh.extent(cam, config.dt, true);
            if prev_ext.z <= 0.5 {
                continue;
            }
            let curr_box = match veh.extent(cam, config.dt, false).project(cam) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let prev_box = match prev_ext.project(cam) {
                Ok(b) => b,
                Err(_) => continue,
            };
            if !inside_image(&curr_box, config.image_size) || !inside_image(&prev_box, config.image_size) {
                continue;
            }
            let mut valid = true;
            for (other, ob_curr, ob_prev) in &placed {
                if (other.z - veh.z).abs() < MIN_DEPTH_GAP {
                    valid = false;
                    break;
                }
                for (mine, theirs, z_mine, z_theirs) in [
                    (&curr_box, ob_curr, veh.z, other.z),
                    (&prev_box, ob_prev, veh.z, other.z),
                ] {
                    let inter = box_intersection_area(mine, theirs);
                    let occluded_area =
                        if z_mine < z_theirs { box_area(theirs) } else { box_area(mine) };
                    if inter / occluded_area > MAX_OCCLUSION {
                        valid = false;
                        break;
                    }
                }
                if !valid {
                    break;
                }
            }
            if valid {
                placed.push((veh, curr_box, prev_box));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SceneError::PlacementFailed { index, attempts: MAX_ATTEMPTS });
        }
    }
    Ok(placed.into_iter().map(|(v, _, _)| v).collect())
}

/// Generate one scene deterministically from the config seed.
pub fn generate_scene(config: &SceneConfig) -> Result<FramePairSample, SceneError> {
    generate_scene_detailed(config).map(|(s, _)| s)
}

/// Like [`generate_scene`] but also returns the underlying vehicle list for
/// introspection (oracle tests, visualization).
pub fn generate_scene_detailed(
    config: &SceneConfig,
) -> Result<(FramePairSample, Vec<QuadVehicle>), SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vehicles = sample_vehicles(config, &mut rng)?;
    let sample = render_scene(&vehicles, config)?;
    Ok((sample, vehicles))
}

/// Generate a dataset of `clips` scenes, clip `i` seeded with `seed + i`.
pub fn generate_dataset(config: &SceneConfig, clips: usize) -> Result<Vec<FramePairSample>, SceneError> {
    (0..clips)
        .map(|i| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(i as u64);
            generate_scene(&c)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset serialization
// ---------------------------------------------------------------------------

/// Current on-disk schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    clips: Vec<String>,
}

/// One vehicle's labels as stored in `annotation.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub vehicle_id: usize,
    /// [left, top, width, height] in pixels.
    pub bbox: [f64; 4],
    /// [p_x, p_z] in meters.
    pub position: [f64; 2],
    /// [v_x, v_z] in m/s.
    pub velocity: [f64; 2],
    /// Scalar camera distance in meters.
    pub distance: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipAnnotation {
    dt: f64,
    intrinsics: CameraIntrinsics,
    /// (height, width).
    image_size: (usize, usize),
    records: Vec<AnnotationRecord>,
}

fn array_to_rgb8(img: &Array3<f64>) -> image::RgbImage {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected RGB image");
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf[(y * w + x) * 3 + ch] = (img[(ch, y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf).expect("image buffer size")
}

fn rgb8_to_array(im: &image::RgbImage) -> Array3<f64> {
    let (w, h) = im.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in im.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = p.0[ch] as f64 / 255.0;
        }
    }
    out
}

fn write_flow(path: &Path, flow: &Array3<f64>) -> Result<(), DatasetError> {
    let (c, h, w) = flow.dim();
    assert_eq!(c, 2, "flow must have 2 channels");
    let mut bytes = Vec::with_capacity(h * w * 2 * 4);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..2 {
                bytes.extend_from_slice(&(flow[(ch, y, x)] as f32).to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

fn read_flow(path: &Path, size: (usize, usize)) -> Result<Array3<f64>, DatasetError> {
    let (h, w) = size;
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let want = h * w * 2 * 4;
    if bytes.len() != want {
        return Err(format_err(path, format!("flow file has {} bytes, expected {want}", bytes.len())));
    }
    let mut flow = Array3::<f64>::zeros((2, h, w));
    let mut off = 0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..2 {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                flow[(ch, y, x)] = v as f64;
                off += 4;
            }
        }
    }
    Ok(flow)
}

fn load_image(path: &Path) -> Result<Array3<f64>, DatasetError> {
    let im = image::open(path)
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    Ok(rgb8_to_array(&im))
}

/// Write samples under `directory` (created if needed) and return the path
/// of the written `manifest.json`.
pub fn export_dataset(samples: &[FramePairSample], directory: &Path) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(directory).map_err(|e| io_err(directory, e))?;
    let mut clips = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let clip = format!("clip_{i:05}");
        let clip_dir = directory.join(&clip);
        let imgs = clip_dir.join("imgs");
        fs::create_dir_all(&imgs).map_err(|e| io_err(&imgs, e))?;
        let p0 = imgs.join("0.png");
        array_to_rgb8(&s.image_prev).save(&p0).map_err(|e| DatasetError::Image {
            path: p0.clone(),
            message: e.to_string(),
        })?;
        let p1 = imgs.join("1.png");
        array_to_rgb8(&s.image_curr).save(&p1).map_err(|e| DatasetError::Image {
            path: p1.clone(),
            message: e.to_string(),
        })?;
        if let Some(flow) = &s.flow_gt {
            write_flow(&clip_dir.join("flow.bin"), flow)?;
        }
        let ann = ClipAnnotation {
            dt: s.dt,
            intrinsics: s.intrinsics,
            image_size: s.image_size(),
            records: s
                .boxes
                .iter()
                .zip(&s.states)
                .enumerate()
                .map(|(id, (b, st))| AnnotationRecord {
                    vehicle_id: id,
                    bbox: [b.left(), b.top(), b.b_w, b.b_h],
                    position: [st.position.x, st.position.z],
                    velocity: [st.velocity.x, st.velocity.z],
                    distance: st.distance,
                })
                .collect(),
        };
        let ann_path = clip_dir.join("annotation.json");
        let json = serde_json::to_string_pretty(&ann)
            .map_err(|e| format_err(&ann_path, e.to_string()))?;
        fs::write(&ann_path, json).map_err(|e| io_err(&ann_path, e))?;
        clips.push(clip);
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, clips };
    let mpath = directory.join("manifest.json");
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&mpath, e.to_string()))?;
    fs::write(&mpath, json).map_err(|e| io_err(&mpath, e))?;
    Ok(mpath)
}

/// Load a dataset previously written by [`export_dataset`].
pub fn load_dataset(directory: &Path) -> Result<Vec<FramePairSample>, DatasetError> {
    let mpath = directory.join("manifest.json");
    let mjson = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&mjson).map_err(|e| format_err(&mpath, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(format_err(
            &mpath,
            format!("schema version {} unsupported (expected {SCHEMA_VERSION})", manifest.schema_version),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.clips.len());
    for clip in &manifest.clips {
        let clip_dir = directory.join(clip);
        let ann_path = clip_dir.join("annotation.json");
        let ajson = fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
        let ann: ClipAnnotation =
            serde_json::from_str(&ajson).map_err(|e| format_err(&ann_path, e.to_string()))?;
        let image_prev = load_image(&clip_dir.join("imgs").join("0.png"))?;
        let image_curr = load_image(&clip_dir.join("imgs").join("1.png"))?;
        if image_curr.dim() != (3, ann.image_size.0, ann.image_size.1) {
            return Err(format_err(
                &ann_path,
                format!("image size {:?} does not match annotation {:?}", image_curr.dim(), ann.image_size),
            ));
        }
        let flow_path = clip_dir.join("flow.bin");
        let flow_gt =
            if flow_path.exists() { Some(read_flow(&flow_path, ann.image_size)?) } else { None };
        let mut boxes = Vec::with_capacity(ann.records.len());
        let mut states = Vec::with_capacity(ann.records.len());
        for r in &ann.records {
            let b = BoundingBox2D::from_edges(
                r.bbox[0],
                r.bbox[1],
                r.bbox[0] + r.bbox[2],
                r.bbox[1] + r.bbox[3],
            )
            .map_err(|e| format_err(&ann_path, e.to_string()))?;
            if !(r.distance > 0.0) {
                return Err(format_err(
                    &ann_path,
                    format!("vehicle {} has non-positive distance", r.vehicle_id),
                ));
            }
            boxes.push(b);
            states.push(VehicleState {
                position: Planar::new(r.position[0], r.position[1]),
                velocity: Planar::new(r.velocity[0], r.velocity[1]),
                distance: r.distance,
            });
        }
        samples.push(FramePairSample {
            image_prev,
            image_curr,
            boxes,
            states,
            flow_gt,
            dt: ann.dt,
            intrinsics: ann.intrinsics,
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Tusimple-style ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TusimpleBbox {
    top: f64,
    left: f64,
    bottom: f64,
    right: f64,
}

#[derive(Debug, Deserialize)]
struct TusimpleRecord {
    bbox: TusimpleBbox,
    velocity: [f64; 2],
    position: [f64; 2],
}

/// Ingest a Tusimple-style directory: one subdirectory per clip holding a
/// numbered frame sequence (`1.jpg`, `2.jpg`, … or `.png`) plus an
/// `annotation.json` array of `{bbox, velocity, position}` for the last
/// frame. Emits one sample per clip from the last two frames with
/// `dt = 1/fps`; flow ground truth is absent. The benchmark ships no camera
/// calibration, so intrinsics are supplied by the caller.
pub fn load_tusimple_format(
    directory: &Path,
    fps: f64,
    intrinsics: CameraIntrinsics,
) -> Result<Vec<FramePairSample>, DatasetError> {
    if !(fps > 0.0) {
        return Err(format_err(directory, format!("fps must be positive, got {fps}")));
    }
    let mut clip_dirs: Vec<PathBuf> = fs::read_dir(directory)
        .map_err(|e| io_err(directory, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let mut samples = Vec::with_capacity(clip_dirs.len());
    for clip_dir in &clip_dirs {
        let mut frames: Vec<(u64, PathBuf)> = fs::read_dir(clip_dir)
            .map_err(|e| io_err(clip_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let ext = p.extension()?.to_str()?.to_ascii_lowercase();
                if ext != "jpg" && ext != "jpeg" && ext != "png" {
                    return None;
                }
                let n: u64 = p.file_stem()?.to_str()?.parse().ok()?;
                Some((n, p))
            })
            .collect();
        frames.sort_by_key(|(n, _)| *n);
        if frames.len() < 2 {
            return Err(format_err(
                clip_dir,
                format!("clip has {} frame(s); a pair is required", frames.len()),
            ));
        }
        let ann_path = clip_dir.join("annotation.json");
        let ajson = fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
        let records: Vec<TusimpleRecord> =
            serde_json::from_str(&ajson).map_err(|e| format_err(&ann_path, e.to_string()))?;
        let image_prev = load_image(&frames[frames.len() - 2].1)?;
        let image_curr = load_image(&frames[frames.len() - 1].1)?;
        let mut boxes = Vec::with_capacity(records.len());
        let mut states = Vec::with_capacity(records.len());
        for r in &records {
            let b = BoundingBox2D::from_edges(r.bbox.left, r.bbox.top, r.bbox.right, r.bbox.bottom)
                .map_err(|e| format_err(&ann_path, e.to_string()))?;
            boxes.push(b);
            states.push(VehicleState::new(
                Planar::new(r.position[0], r.position[1]),
                Planar::new(r.velocity[0], r.velocity[1]),
            ));
        }
        samples.push(FramePairSample {
            image_prev,
            image_curr,
            boxes,
            states,
            flow_gt: None,
            dt: 1.0 / fps,
            intrinsics,
        });
    }
    Ok(samples)
}
