//! The three trainable feature streams.
//!
//! * **Motion**: a small encoder–decoder flow network over the concatenated
//!   frame pair (optionally with a teacher-forcing flow hint as two extra
//!   channels). Its penultimate feature map is pooled per box into motion
//!   tokens and a flat motion vector; its head predicts dense flow.
//! * **Context**: a four-stage appearance backbone over the current frame,
//!   refined by a residual block of densely connected dilated convolutions,
//!   pooled per box into context tokens and a flat context vector.
//! * **Spatial**: box geometry lifted to world coordinates through a
//!   two-layer fully connected encoder, concatenated with features of a
//!   coarse binary location mask.
//!
//! Every encoder runs the full frame once; per-box features are pooled from
//! the shared maps with ROI align, so multi-vehicle frames cost one backbone
//! pass. ROI regions use boxes expanded by 20% per side; the geometric
//! branches (world lift, location mask) use the raw box.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_to_world, BoundingBox2D, CameraIntrinsics, GeometryError};
use crate::params::{Binder, Init, ParamStore};
use crate::tape::{ConvSpec, NodeId, RoiRegion, Tape};

/// Fraction of the box size added to each side before ROI pooling.
pub const CROP_EXPANSION: f64 = 0.2;

/// Resolution of the binary location mask, fixed regardless of input size so
/// the pattern feature encodes normalized position.
pub const MASK_SIZE: (usize, usize) = (32, 96);

// Internal conv widths (kept small for CPU-scale training).
const MOTION_C1: usize = 10;
const MOTION_C2: usize = 14;
const MOTION_C3: usize = 14;
const MOTION_DEC: usize = 10;
/// Channels of the motion token map (the flow network's penultimate map).
pub const MOTION_MAP_CHANNELS: usize = 8;
const CONTEXT_C1: usize = 8;
/// Channels of the context token map (backbone output).
pub const CONTEXT_MAP_CHANNELS: usize = 14;
const ASPP_GROWTH: usize = 6;
const MASK_C1: usize = 4;
const MASK_C2: usize = 8;

/// Errors from the feature streams.
#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("box [{left:.1}, {top:.1}, {right:.1}, {bottom:.1}] does not intersect the {width}x{height} image extent")]
    InvalidRegion { left: f64, top: f64, right: f64, bottom: f64, width: usize, height: usize },
    #[error("frame sizes differ: prev {prev:?}, curr {curr:?}")]
    MismatchedImages { prev: (usize, usize), curr: (usize, usize) },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Stream output dimensions and pooling geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Length of the flat motion vector.
    pub motion_channels: usize,
    /// Length of the flat context vector.
    pub context_channels: usize,
    /// Length of the world-geometry (instance) feature.
    pub instance_dim: usize,
    /// Length of the location-mask (pattern) feature.
    pub pattern_dim: usize,
    /// ROI pooling grid (h, w); its cells are the attention tokens.
    pub roi_size: (usize, usize),
    /// Dilation rates of the dense context-refinement branches.
    pub denseaspp_rates: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            motion_channels: 32,
            context_channels: 32,
            instance_dim: 16,
            pattern_dim: 16,
            roi_size: (7, 7),
            denseaspp_rates: vec![1, 2, 4],
        }
    }
}

impl EncoderConfig {
    /// Length of the combined spatial feature f_i ∥ f_p.
    pub fn spatial_dim(&self) -> usize {
        self.instance_dim + self.pattern_dim
    }

    /// Tokens per box: the ROI grid flattened.
    pub fn token_count(&self) -> usize {
        self.roi_size.0 * self.roi_size.1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.motion_channels == 0
            || self.context_channels == 0
            || self.instance_dim == 0
            || self.pattern_dim == 0
            || self.roi_size.0 == 0
            || self.roi_size.1 == 0
        {
            return Err("encoder dimensions must be positive".into());
        }
        if self.denseaspp_rates.is_empty() || self.denseaspp_rates.contains(&0) {
            return Err("dilation rates must be a nonempty list of positive integers".into());
        }
        Ok(())
    }
}

/// A spatial feature map node plus its pixel stride relative to the input.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub node: NodeId,
    pub stride: usize,
}

/// Average-of-bilinear-samples pooling of a box region; gradients flow into
/// the map. Errors if the box misses the image entirely.
pub fn roi_align(
    tape: &mut Tape,
    map: &FeatureMap,
    bbox: &BoundingBox2D,
    image_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<NodeId, StreamError> {
    let (h, w) = image_size;
    if bbox.right() <= 0.0 || bbox.left() >= w as f64 || bbox.bottom() <= 0.0 || bbox.top() >= h as f64
    {
        return Err(StreamError::InvalidRegion {
            left: bbox.left(),
            top: bbox.top(),
            right: bbox.right(),
            bottom: bbox.bottom(),
            width: w,
            height: h,
        });
    }
    let s = map.stride as f64;
    let region = RoiRegion {
        x0: bbox.left() / s,
        y0: bbox.top() / s,
        x1: bbox.right() / s,
        y1: bbox.bottom() / s,
    };
    Ok(tape.roi_align(map.node, region, out_size))
}

fn conv_block(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    spec: ConvSpec,
    silu: bool,
) -> NodeId {
    let w = binder.bind(tape, store, &format!("{name}.w"));
    let b = binder.bind(tape, store, &format!("{name}.b"));
    let y = tape.conv2d(x, w, b, spec);
    if silu {
        tape.silu(y)
    } else {
        y
    }
}

fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) {
    store
        .init(&format!("{name}.w"), &[c_out, c_in, k, k], Init::FanIn { fan_in: c_in * k * k, gain: 1.0 }, rng)
        .expect("conv weight registration");
    store.init(&format!("{name}.b"), &[c_out], Init::Zeros, rng).expect("conv bias registration");
}

fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize) {
    store
        .init(&format!("{name}.w"), &[out, inp], Init::FanIn { fan_in: inp, gain: 1.0 }, rng)
        .expect("linear weight registration");
    store.init(&format!("{name}.b"), &[out], Init::Zeros, rng).expect("linear bias registration");
}

fn linear_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    name: &str,
    x: NodeId,
) -> NodeId {
    let w = binder.bind(tape, store, &format!("{name}.w"));
    let b = binder.bind(tape, store, &format!("{name}.b"));
    tape.linear(x, w, Some(b))
}

/// Pool a map over an expanded box and emit `(tokens, flat)`:
/// tokens are the `(L, C)` grid cells, flat is `flatten → linear`.
#[allow(clippy::too_many_arguments)]
fn pool_tokens_and_project(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    cfg: &EncoderConfig,
    map: &FeatureMap,
    proj_name: &str,
    bbox: &BoundingBox2D,
    image_size: (usize, usize),
) -> Result<(NodeId, NodeId), StreamError> {
    let expanded = bbox.expanded(CROP_EXPANSION);
    let pooled = roi_align(tape, map, &expanded, image_size, cfg.roi_size)?;
    let c = tape.shape(pooled)[0];
    let l = cfg.token_count();
    let chan_major = tape.reshape(pooled, &[c, l]);
    let tokens = tape.transpose2(chan_major);
    let flat = tape.reshape(chan_major, &[c * l]);
    let projected = linear_layer(tape, binder, store, proj_name, flat);
    Ok((tokens, projected))
}

// ---------------------------------------------------------------------------
// Motion stream
// ---------------------------------------------------------------------------

/// Full-frame products of the motion stream.
#[derive(Debug)]
pub struct MotionFrame {
    /// Penultimate feature map (stride 2), the source of motion tokens.
    pub map: FeatureMap,
    /// Dense flow prediction at input resolution, `(2, H, W)`.
    pub flow_pred: NodeId,
}

/// Per-box motion features.
#[derive(Debug)]
pub struct MotionBoxFeatures {
    /// `(L, C)` token matrix over the ROI grid.
    pub tokens: NodeId,
    /// Flat motion vector of length `motion_channels`.
    pub f_m: NodeId,
}

pub struct MotionEncoder;

impl MotionEncoder {
    /// Input channels: two RGB frames plus a two-channel flow hint.
    pub const IN_CHANNELS: usize = 8;

    pub fn register(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        init_conv(store, rng, "motion.enc1", MOTION_C1, Self::IN_CHANNELS, 3);
        init_conv(store, rng, "motion.enc2", MOTION_C2, MOTION_C1, 3);
        init_conv(store, rng, "motion.enc3", MOTION_C3, MOTION_C2, 3);
        init_conv(store, rng, "motion.dec1", MOTION_DEC, MOTION_C3, 3);
        init_conv(store, rng, "motion.dec2", MOTION_MAP_CHANNELS, MOTION_DEC, 3);
        init_conv(store, rng, "motion.flow", 2, MOTION_MAP_CHANNELS, 3);
        let l = cfg.token_count();
        init_linear(store, rng, "motion.proj", cfg.motion_channels, MOTION_MAP_CHANNELS * l);
    }

    /// Run the flow network over one frame pair. `flow_hint` teacher-forces
    /// the network with ground-truth flow; `None` feeds zeros so the input
    /// arity never changes.
    pub fn encode_frame(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        image_prev: &Array3<f64>,
        image_curr: &Array3<f64>,
        flow_hint: Option<&Array3<f64>>,
    ) -> Result<MotionFrame, StreamError> {
        let dp = image_prev.dim();
        let dc = image_curr.dim();
        if dp != dc {
            return Err(StreamError::MismatchedImages { prev: (dp.1, dp.2), curr: (dc.1, dc.2) });
        }
        let (_, h, w) = dc;
        let hint = match flow_hint {
            Some(f) => {
                assert_eq!(f.dim(), (2, h, w), "flow hint must match image size");
                f.clone()
            }
            None => Array3::zeros((2, h, w)),
        };
        let prev = tape.constant(image_prev.clone().into_dyn());
        let curr = tape.constant(image_curr.clone().into_dyn());
        let hint = tape.constant(hint.into_dyn());
        let input = tape.concat(&[prev, curr, hint], 0);
        Self::forward(tape, binder, store, input)
    }

    /// Forward pass from a prepared `(8, H, W)` input node (exposed so
    /// gradient checks can probe the image input).
    pub fn forward(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        input: NodeId,
    ) -> Result<MotionFrame, StreamError> {
        let s2 = ConvSpec { stride: 2, pad: 1, dilation: 1 };
        let s1 = ConvSpec::default();
        let e1 = conv_block(tape, binder, store, "motion.enc1", input, s2, true);
        let e2 = conv_block(tape, binder, store, "motion.enc2", e1, s2, true);
        let e3 = conv_block(tape, binder, store, "motion.enc3", e2, s1, true);
        let up = tape.upsample2x(e3);
        let d1 = conv_block(tape, binder, store, "motion.dec1", up, s1, true);
        let fm = conv_block(tape, binder, store, "motion.dec2", d1, s1, true);
        let flow_half = conv_block(tape, binder, store, "motion.flow", fm, s1, false);
        let flow_pred = tape.upsample2x(flow_half);
        Ok(MotionFrame { map: FeatureMap { node: fm, stride: 2 }, flow_pred })
    }

    /// Pool per-box motion features from a frame's map.
    pub fn pool_box(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        frame: &MotionFrame,
        bbox: &BoundingBox2D,
        image_size: (usize, usize),
    ) -> Result<MotionBoxFeatures, StreamError> {
        let (tokens, f_m) = pool_tokens_and_project(
            tape,
            binder,
            store,
            cfg,
            &frame.map,
            "motion.proj",
            bbox,
            image_size,
        )?;
        Ok(MotionBoxFeatures { tokens, f_m })
    }

    /// One-box convenience wrapper: `(f_m, flow_pred)`.
    #[allow(clippy::too_many_arguments)]
    pub fn motion_encode(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        image_prev: &Array3<f64>,
        image_curr: &Array3<f64>,
        bbox: &BoundingBox2D,
        flow_hint: Option<&Array3<f64>>,
    ) -> Result<(NodeId, NodeId), StreamError> {
        let frame = Self::encode_frame(tape, binder, store, image_prev, image_curr, flow_hint)?;
        let size = (image_curr.dim().1, image_curr.dim().2);
        let feats = Self::pool_box(tape, binder, store, cfg, &frame, bbox, size)?;
        Ok((feats.f_m, frame.flow_pred))
    }
}

// ---------------------------------------------------------------------------
// Context stream
// ---------------------------------------------------------------------------

/// Full-frame products of the context stream.
#[derive(Debug)]
pub struct ContextFrame {
    /// Plain backbone output (before refinement), stride 4.
    pub backbone: FeatureMap,
    /// Residually refined map `D(F) + F`, the source of context tokens.
    pub fused: FeatureMap,
}

/// Per-box context features.
#[derive(Debug)]
pub struct ContextBoxFeatures {
    pub tokens: NodeId,
    pub f_c: NodeId,
}

pub struct ContextEncoder;

impl ContextEncoder {
    pub fn register(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        init_conv(store, rng, "context.stage1", CONTEXT_C1, 3, 3);
        init_conv(store, rng, "context.stage2", CONTEXT_MAP_CHANNELS, CONTEXT_C1, 3);
        init_conv(store, rng, "context.stage3", CONTEXT_MAP_CHANNELS, CONTEXT_MAP_CHANNELS, 3);
        init_conv(store, rng, "context.stage4", CONTEXT_MAP_CHANNELS, CONTEXT_MAP_CHANNELS, 3);
        let mut in_ch = CONTEXT_MAP_CHANNELS;
        for (i, _) in cfg.denseaspp_rates.iter().enumerate() {
            init_conv(store, rng, &format!("context.aspp{i}"), ASPP_GROWTH, in_ch, 3);
            in_ch += ASPP_GROWTH;
        }
        init_conv(store, rng, "context.aspp_proj", CONTEXT_MAP_CHANNELS, in_ch, 1);
        let l = cfg.token_count();
        init_linear(store, rng, "context.proj", cfg.context_channels, CONTEXT_MAP_CHANNELS * l);
    }

    pub fn encode_frame(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        image_curr: &Array3<f64>,
    ) -> Result<ContextFrame, StreamError> {
        let input = tape.constant(image_curr.clone().into_dyn());
        Self::forward(tape, binder, store, cfg, input)
    }

    /// Forward pass from a prepared `(3, H, W)` input node.
    pub fn forward(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        input: NodeId,
    ) -> Result<ContextFrame, StreamError> {
        let s2 = ConvSpec { stride: 2, pad: 1, dilation: 1 };
        let s1 = ConvSpec::default();
        let c1 = conv_block(tape, binder, store, "context.stage1", input, s2, true);
        let c2 = conv_block(tape, binder, store, "context.stage2", c1, s2, true);
        let c3 = conv_block(tape, binder, store, "context.stage3", c2, s1, true);
        let fc = conv_block(tape, binder, store, "context.stage4", c3, s1, true);
        // Densely connected dilated branches: each consumes the backbone
        // output concatenated with all earlier branch outputs.
        let mut cat = fc;
        for (i, rate) in cfg.denseaspp_rates.iter().enumerate() {
            let spec = ConvSpec { stride: 1, pad: *rate, dilation: *rate };
            let bi = conv_block(tape, binder, store, &format!("context.aspp{i}"), cat, spec, true);
            cat = tape.concat(&[cat, bi], 0);
        }
        let refined = conv_block(
            tape,
            binder,
            store,
            "context.aspp_proj",
            cat,
            ConvSpec { stride: 1, pad: 0, dilation: 1 },
            false,
        );
        let fused = tape.add(refined, fc);
        Ok(ContextFrame {
            backbone: FeatureMap { node: fc, stride: 4 },
            fused: FeatureMap { node: fused, stride: 4 },
        })
    }

    pub fn pool_box(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        frame: &ContextFrame,
        bbox: &BoundingBox2D,
        image_size: (usize, usize),
    ) -> Result<ContextBoxFeatures, StreamError> {
        let (tokens, f_c) = pool_tokens_and_project(
            tape,
            binder,
            store,
            cfg,
            &frame.fused,
            "context.proj",
            bbox,
            image_size,
        )?;
        Ok(ContextBoxFeatures { tokens, f_c })
    }

    /// One-box convenience wrapper returning the flat context vector.
    pub fn context_encode(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &EncoderConfig,
        image_curr: &Array3<f64>,
        bbox: &BoundingBox2D,
    ) -> Result<NodeId, StreamError> {
        let frame = Self::encode_frame(tape, binder, store, cfg, image_curr)?;
        let size = (image_curr.dim().1, image_curr.dim().2);
        Ok(Self::pool_box(tape, binder, store, cfg, &frame, bbox, size)?.f_c)
    }
}

// ---------------------------------------------------------------------------
// Spatial stream
// ---------------------------------------------------------------------------

/// Rasterize the binary location mask: ones in cells whose centers fall
/// inside the box mapped onto the fixed mask grid.
pub fn pattern_mask(bbox: &BoundingBox2D, image_size: (usize, usize)) -> Array3<f64> {
    let (mh, mw) = MASK_SIZE;
    let (h, w) = image_size;
    let mut mask = Array3::<f64>::zeros((1, mh, mw));
    for i in 0..mh {
        for j in 0..mw {
            let u = (j as f64 + 0.5) * w as f64 / mw as f64;
            let v = (i as f64 + 0.5) * h as f64 / mh as f64;
            if u >= bbox.left() && u <= bbox.right() && v >= bbox.top() && v <= bbox.bottom() {
                mask[(0, i, j)] = 1.0;
            }
        }
    }
    mask
}

pub struct SpatialEncoder;

impl SpatialEncoder {
    pub fn register(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        init_linear(store, rng, "spatial.fc1", 32, 4);
        init_linear(store, rng, "spatial.fc2", cfg.instance_dim, 32);
        init_conv(store, rng, "spatial.mask1", MASK_C1, 1, 3);
        init_conv(store, rng, "spatial.mask2", MASK_C2, MASK_C1, 3);
        init_linear(store, rng, "spatial.maskproj", cfg.pattern_dim, MASK_C2);
    }

    /// Encode box geometry into f_sp = f_i ∥ f_p.
    pub fn spatial_encode(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        bbox: &BoundingBox2D,
        cam: &CameraIntrinsics,
        image_size: (usize, usize),
        z_hat: f64,
    ) -> Result<NodeId, StreamError> {
        // Instance branch: world-lifted box through two FC layers.
        let nb = box_to_world(bbox, cam, z_hat)?;
        let nb_node = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![nb.p_x, nb.p_y, nb.p_w, nb.p_h]).unwrap(),
        );
        let h1 = linear_layer(tape, binder, store, "spatial.fc1", nb_node);
        let h1 = tape.tanh(h1);
        let f_i = linear_layer(tape, binder, store, "spatial.fc2", h1);
        // Pattern branch: conv + global average pool over the location mask.
        let mask = tape.constant(pattern_mask(bbox, image_size).into_dyn());
        let s2 = ConvSpec { stride: 2, pad: 1, dilation: 1 };
        let m1 = conv_block(tape, binder, store, "spatial.mask1", mask, s2, true);
        let m2 = conv_block(tape, binder, store, "spatial.mask2", m1, s2, true);
        let c = tape.shape(m2)[0];
        let hw = tape.shape(m2)[1] * tape.shape(m2)[2];
        let flat = tape.reshape(m2, &[c, hw]);
        let gap = tape.mean_axis(flat, 1);
        let f_p = linear_layer(tape, binder, store, "spatial.maskproj", gap);
        Ok(tape.concat(&[f_i, f_p], 0))
    }
}
