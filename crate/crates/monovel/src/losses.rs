//! Training objectives.
//!
//! * **Robust distance**: componentwise √((s−ŝ)² + ε²), a smooth L1
//!   surrogate; the per-residual kernel is pluggable (L1, smooth-L1, or the
//!   robust form) for ablations.
//! * **Regression**: per-vehicle velocity error plus a down-weighted
//!   position error.
//! * **Global relative constraint**: the robust distance between predicted
//!   and target *pairwise state differences* (velocity and position, four
//!   components per ordered pair), averaged over ordered pairs. Absolute
//!   errors shared by all vehicles cancel in the differences, so this term
//!   penalizes inconsistent relative layouts that the plain regression loss
//!   cannot distinguish.
//! * **Smoothness**: edge-aware total variation of the dense flow,
//!   forward differences weighted by exp(−|∂I|) of the grayscale image.
//!
//! Every objective exists in two forms that share one definition: a plain
//! evaluation on concrete states, and a tape evaluation on graph nodes used
//! for training. A test pins them to each other.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::VehicleState;
use crate::head::DecodedNodes;
use crate::tape::{NodeId, Tape};

/// Scaling constants of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the position term inside the regression loss.
    pub lambda_pos: f64,
    /// Weight of the smoothness term in the total.
    pub lambda1: f64,
    /// Weight of the relative-constraint term in the total.
    pub lambda2: f64,
    /// Robust-distance constant.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_pos: 0.1, lambda1: 1.0, lambda2: 0.3, epsilon: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_pos < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(LossError::InvalidWeights("loss weights must be nonnegative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(LossError::InvalidWeights("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-residual kernel used inside the regression loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HVariant {
    L1,
    SmoothL1,
    #[default]
    Charbonnier,
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("arrays have different lengths: {left} vs {right}")]
    ShapeMismatch { left: usize, right: usize },
    #[error("batch holds {predictions} predictions but {targets} targets")]
    MisalignedBatch { predictions: usize, targets: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("flow is {flow_h}x{flow_w} but the image is {image_h}x{image_w}")]
    MisalignedFlow { flow_h: usize, flow_w: usize, image_h: usize, image_w: usize },
    #[error("flow must have 2 channels and the image 3 (got {flow_c} and {image_c})")]
    BadChannels { flow_c: usize, image_c: usize },
    #[error("{0}")]
    InvalidWeights(String),
}

/// One frame's supervision: aligned prediction/target lists plus the dense
/// flow and the image it should be smooth against.
#[derive(Debug)]
pub struct FrameBatch<'a> {
    pub predictions: &'a [VehicleState],
    pub targets: &'a [VehicleState],
    /// Dense flow `(2, H, W)`.
    pub flow_pred: &'a Array3<f64>,
    /// RGB image `(3, H, W)` aligned with the flow.
    pub crop_image: &'a Array3<f64>,
}

impl FrameBatch<'_> {
    fn validate(&self) -> Result<(), LossError> {
        if self.predictions.len() != self.targets.len() {
            return Err(LossError::MisalignedBatch {
                predictions: self.predictions.len(),
                targets: self.targets.len(),
            });
        }
        if self.predictions.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        Ok(())
    }
}

/// Per-term breakdown of the combined objective (unweighted terms plus the
/// weighted total).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regression: f64,
    pub smoothness: f64,
    pub glc: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Plain evaluations
// ---------------------------------------------------------------------------

/// Componentwise robust distance Σ √((s−ŝ)² + ε²).
pub fn charbonnier(s: &[f64], s_hat: &[f64], epsilon: f64) -> Result<f64, LossError> {
    if s.len() != s_hat.len() {
        return Err(LossError::ShapeMismatch { left: s.len(), right: s_hat.len() });
    }
    Ok(s.iter().zip(s_hat).map(|(a, b)| ((a - b) * (a - b) + epsilon * epsilon).sqrt()).sum())
}

/// Evaluate the pluggable per-residual kernel.
pub fn h_value(residual: f64, variant: HVariant, epsilon: f64) -> f64 {
    match variant {
        HVariant::L1 => residual.abs(),
        HVariant::SmoothL1 => {
            let a = residual.abs();
            if a <= 1.0 {
                0.5 * residual * residual
            } else {
                a - 0.5
            }
        }
        HVariant::Charbonnier => (residual * residual + epsilon * epsilon).sqrt(),
    }
}

fn h_sum(s: &[f64], s_hat: &[f64], variant: HVariant, epsilon: f64) -> Result<f64, LossError> {
    if s.len() != s_hat.len() {
        return Err(LossError::ShapeMismatch { left: s.len(), right: s_hat.len() });
    }
    Ok(s.iter().zip(s_hat).map(|(a, b)| h_value(a - b, variant, epsilon)).sum())
}

/// Velocity error plus down-weighted position error, summed over vehicles.
pub fn regression_loss(
    batch: &FrameBatch,
    w: &LossWeights,
    variant: HVariant,
) -> Result<f64, LossError> {
    batch.validate()?;
    let mut vel = 0.0;
    let mut pos = 0.0;
    for (p, t) in batch.predictions.iter().zip(batch.targets) {
        vel += h_sum(
            &[p.velocity.x, p.velocity.z],
            &[t.velocity.x, t.velocity.z],
            variant,
            w.epsilon,
        )?;
        pos += h_sum(
            &[p.position.x, p.position.z],
            &[t.position.x, t.position.z],
            variant,
            w.epsilon,
        )?;
    }
    Ok(vel + w.lambda_pos * pos)
}

fn pair_diff(a: &VehicleState, b: &VehicleState) -> [f64; 4] {
    [
        a.velocity.x - b.velocity.x,
        a.velocity.z - b.velocity.z,
        a.position.x - b.position.x,
        a.position.z - b.position.z,
    ]
}

/// Robust distance between predicted and target pairwise state differences,
/// over all ordered pairs; zero for a single vehicle. `normalize` divides by
/// the ordered-pair count.
pub fn glc_loss(batch: &FrameBatch, w: &LossWeights, normalize: bool) -> Result<f64, LossError> {
    batch.validate()?;
    let n = batch.predictions.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = pair_diff(&batch.predictions[i], &batch.predictions[j]);
            let d_hat = pair_diff(&batch.targets[i], &batch.targets[j]);
            sum += charbonnier(&d, &d_hat, w.epsilon)?;
        }
    }
    if normalize {
        sum /= (n * (n - 1)) as f64;
    }
    Ok(sum)
}

fn gray_at(image: &Array3<f64>, y: usize, x: usize) -> f64 {
    (image[(0, y, x)] + image[(1, y, x)] + image[(2, y, x)]) / 3.0
}

fn check_flow_image(flow: &Array3<f64>, image: &Array3<f64>) -> Result<(), LossError> {
    let (fc, fh, fw) = flow.dim();
    let (ic, ih, iw) = image.dim();
    if fc != 2 || ic != 3 {
        return Err(LossError::BadChannels { flow_c: fc, image_c: ic });
    }
    if fh != ih || fw != iw {
        return Err(LossError::MisalignedFlow { flow_h: fh, flow_w: fw, image_h: ih, image_w: iw });
    }
    Ok(())
}

/// Edge-aware total variation: forward differences of both flow channels,
/// each weighted by exp(−|forward difference of the grayscale image|).
pub fn smoothness_loss(flow: &Array3<f64>, image: &Array3<f64>) -> Result<f64, LossError> {
    check_flow_image(flow, image)?;
    let (_, h, w) = flow.dim();
    let mut sum = 0.0;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let df = (flow[(c, y, x + 1)] - flow[(c, y, x)]).abs();
                let di = (gray_at(image, y, x + 1) - gray_at(image, y, x)).abs();
                sum += df * (-di).exp();
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let df = (flow[(c, y + 1, x)] - flow[(c, y, x)]).abs();
                let di = (gray_at(image, y + 1, x) - gray_at(image, y, x)).abs();
                sum += df * (-di).exp();
            }
        }
    }
    Ok(sum)
}

/// Dense flow-matching distance: per-element mean of the robust distance
/// between a predicted flow field and its reference, so the value does not
/// scale with resolution. Used to pretrain the motion stream's flow head
/// before the joint objective takes over.
pub fn flow_matching_loss(
    flow_pred: &Array3<f64>,
    flow_gt: &Array3<f64>,
    epsilon: f64,
) -> Result<f64, LossError> {
    let (pc, ph, pw) = flow_pred.dim();
    let (gc, gh, gw) = flow_gt.dim();
    if pc != 2 || gc != 2 || ph != gh || pw != gw {
        return Err(LossError::MisalignedFlow { flow_h: ph, flow_w: pw, image_h: gh, image_w: gw });
    }
    let len = flow_pred.len() as f64;
    let sum: f64 = flow_pred
        .iter()
        .zip(flow_gt.iter())
        .map(|(p, g)| ((p - g) * (p - g) + epsilon * epsilon).sqrt())
        .sum();
    Ok(sum / len)
}

/// Tape form of [`flow_matching_loss`] for a `(2, H, W)` flow node.
pub fn flow_matching_loss_node(
    tape: &mut Tape,
    flow_pred: NodeId,
    flow_gt: &Array3<f64>,
    epsilon: f64,
) -> NodeId {
    let len = flow_gt.len() as f64;
    let target = tape.constant(flow_gt.to_owned().into_dyn());
    let summed = charbonnier_node(tape, flow_pred, target, epsilon);
    tape.scale(summed, 1.0 / len)
}

/// Weighted total `L_reg + λ1·L_smooth + λ2·L_rel` with its breakdown.
pub fn total_loss(
    batch: &FrameBatch,
    w: &LossWeights,
    variant: HVariant,
    glc_normalize: bool,
) -> Result<(f64, LossBreakdown), LossError> {
    w.validate()?;
    let regression = regression_loss(batch, w, variant)?;
    let smoothness = smoothness_loss(batch.flow_pred, batch.crop_image)?;
    let glc = glc_loss(batch, w, glc_normalize)?;
    let total = regression + w.lambda1 * smoothness + w.lambda2 * glc;
    Ok((total, LossBreakdown { regression, smoothness, glc, total }))
}

// ---------------------------------------------------------------------------
// Tape evaluations
// ---------------------------------------------------------------------------

/// Tape form of the robust distance between two equal-shape nodes.
pub fn charbonnier_node(tape: &mut Tape, s: NodeId, s_hat: NodeId, epsilon: f64) -> NodeId {
    let d = tape.sub(s, s_hat);
    let sq = tape.mul(d, d);
    let shifted = tape.add_scalar(sq, epsilon * epsilon);
    let root = tape.sqrt(shifted);
    tape.sum(root)
}

fn h_node(tape: &mut Tape, s: NodeId, s_hat: NodeId, variant: HVariant, epsilon: f64) -> NodeId {
    match variant {
        HVariant::L1 => {
            let d = tape.sub(s, s_hat);
            let a = tape.abs(d);
            tape.sum(a)
        }
        HVariant::SmoothL1 => {
            let d = tape.sub(s, s_hat);
            let h = tape.huber(d);
            tape.sum(h)
        }
        HVariant::Charbonnier => charbonnier_node(tape, s, s_hat, epsilon),
    }
}

fn state_constants(tape: &mut Tape, t: &VehicleState) -> (NodeId, NodeId) {
    let v = tape.constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![t.velocity.x, t.velocity.z])
            .unwrap(),
    );
    let p = tape.constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![t.position.x, t.position.z])
            .unwrap(),
    );
    (v, p)
}

/// Tape form of the regression loss over decoded prediction nodes.
pub fn regression_loss_node(
    tape: &mut Tape,
    predictions: &[DecodedNodes],
    targets: &[VehicleState],
    w: &LossWeights,
    variant: HVariant,
) -> Result<NodeId, LossError> {
    if predictions.len() != targets.len() {
        return Err(LossError::MisalignedBatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut vel: Option<NodeId> = None;
    let mut pos: Option<NodeId> = None;
    for (p, t) in predictions.iter().zip(targets) {
        let (tv, tp) = state_constants(tape, t);
        let hv = h_node(tape, p.velocity, tv, variant, w.epsilon);
        let hp = h_node(tape, p.position, tp, variant, w.epsilon);
        vel = Some(match vel {
            Some(acc) => tape.add(acc, hv),
            None => hv,
        });
        pos = Some(match pos {
            Some(acc) => tape.add(acc, hp),
            None => hp,
        });
    }
    let pos_scaled = tape.scale(pos.unwrap(), w.lambda_pos);
    Ok(tape.add(vel.unwrap(), pos_scaled))
}

/// Tape form of the relative-constraint loss.
pub fn glc_loss_node(
    tape: &mut Tape,
    predictions: &[DecodedNodes],
    targets: &[VehicleState],
    w: &LossWeights,
    normalize: bool,
) -> Result<NodeId, LossError> {
    if predictions.len() != targets.len() {
        return Err(LossError::MisalignedBatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = predictions.len();
    if n == 1 {
        return Ok(tape.constant_scalar(0.0));
    }
    let mut sum: Option<NodeId> = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dv = tape.sub(predictions[i].velocity, predictions[j].velocity);
            let dp = tape.sub(predictions[i].position, predictions[j].position);
            let d = tape.concat(&[dv, dp], 0);
            let d_hat = pair_diff(&targets[i], &targets[j]);
            let d_hat = tape.constant(
                ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), d_hat.to_vec()).unwrap(),
            );
            let c = charbonnier_node(tape, d, d_hat, w.epsilon);
            sum = Some(match sum {
                Some(acc) => tape.add(acc, c),
                None => c,
            });
        }
    }
    let mut out = sum.unwrap();
    if normalize {
        out = tape.scale(out, 1.0 / (n * (n - 1)) as f64);
    }
    Ok(out)
}

/// Tape form of the edge-aware smoothness of a `(2, H, W)` flow node.
pub fn smoothness_loss_node(
    tape: &mut Tape,
    flow: NodeId,
    image: &Array3<f64>,
) -> Result<NodeId, LossError> {
    let shape = tape.shape(flow).to_vec();
    let flow_dims = (shape[0], shape[1], shape[2]);
    let (ic, ih, iw) = image.dim();
    if flow_dims.0 != 2 || ic != 3 {
        return Err(LossError::BadChannels { flow_c: flow_dims.0, image_c: ic });
    }
    if flow_dims.1 != ih || flow_dims.2 != iw {
        return Err(LossError::MisalignedFlow {
            flow_h: flow_dims.1,
            flow_w: flow_dims.2,
            image_h: ih,
            image_w: iw,
        });
    }
    let (h, w) = (ih, iw);
    let mut terms: Vec<NodeId> = Vec::new();
    if w > 1 {
        let right = tape.slice_axis(flow, 2, 1, w);
        let left = tape.slice_axis(flow, 2, 0, w - 1);
        let d = tape.sub(right, left);
        let a = tape.abs(d);
        let mut weights = Array3::<f64>::zeros((2, h, w - 1));
        for y in 0..h {
            for x in 0..w - 1 {
                let wgt = (-(gray_at(image, y, x + 1) - gray_at(image, y, x)).abs()).exp();
                weights[(0, y, x)] = wgt;
                weights[(1, y, x)] = wgt;
            }
        }
        let wnode = tape.constant(weights.into_dyn());
        let prod = tape.mul(a, wnode);
        terms.push(tape.sum(prod));
    }
    if h > 1 {
        let down = tape.slice_axis(flow, 1, 1, h);
        let up = tape.slice_axis(flow, 1, 0, h - 1);
        let d = tape.sub(down, up);
        let a = tape.abs(d);
        let mut weights = Array3::<f64>::zeros((2, h - 1, w));
        for y in 0..h - 1 {
            for x in 0..w {
                let wgt = (-(gray_at(image, y + 1, x) - gray_at(image, y, x)).abs()).exp();
                weights[(0, y, x)] = wgt;
                weights[(1, y, x)] = wgt;
            }
        }
        let wnode = tape.constant(weights.into_dyn());
        let prod = tape.mul(a, wnode);
        terms.push(tape.sum(prod));
    }
    let mut out = match terms.first() {
        Some(t) => *t,
        None => return Ok(tape.constant_scalar(0.0)),
    };
    for t in &terms[1..] {
        out = tape.add(out, *t);
    }
    Ok(out)
}

/// Tape nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct TotalLossNodes {
    pub total: NodeId,
    pub regression: NodeId,
    pub smoothness: Option<NodeId>,
    pub glc: Option<NodeId>,
}

impl TotalLossNodes {
    /// Concrete per-term values for logging.
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            regression: tape.scalar(self.regression),
            smoothness: self.smoothness.map_or(0.0, |n| tape.scalar(n)),
            glc: self.glc.map_or(0.0, |n| tape.scalar(n)),
            total: tape.scalar(self.total),
        }
    }
}

/// Options for composing the total objective on the tape; terms can be
/// dropped entirely for ablations.
#[derive(Debug, Clone, Copy)]
pub struct TotalLossOptions {
    pub variant: HVariant,
    pub use_smooth: bool,
    pub use_glc: bool,
    pub glc_normalize: bool,
}

impl Default for TotalLossOptions {
    fn default() -> Self {
        TotalLossOptions {
            variant: HVariant::Charbonnier,
            use_smooth: true,
            use_glc: true,
            glc_normalize: true,
        }
    }
}

/// Compose the weighted total on the tape.
pub fn total_loss_node(
    tape: &mut Tape,
    predictions: &[DecodedNodes],
    targets: &[VehicleState],
    flow: NodeId,
    image: &Array3<f64>,
    w: &LossWeights,
    opts: &TotalLossOptions,
) -> Result<TotalLossNodes, LossError> {
    w.validate()?;
    let regression = regression_loss_node(tape, predictions, targets, w, opts.variant)?;
    let mut total = regression;
    let smoothness = if opts.use_smooth {
        let s = smoothness_loss_node(tape, flow, image)?;
        let scaled = tape.scale(s, w.lambda1);
        total = tape.add(total, scaled);
        Some(s)
    } else {
        None
    };
    let glc = if opts.use_glc {
        let g = glc_loss_node(tape, predictions, targets, w, opts.glc_normalize)?;
        let scaled = tape.scale(g, w.lambda2);
        total = tape.add(total, scaled);
        Some(g)
    } else {
        None
    };
    Ok(TotalLossNodes { total, regression, smoothness, glc })
}
