//! Evaluation metrics.
//!
//! Velocity error is reported as range-bucketed MSE: vehicles are grouped by
//! ground-truth distance into near (< 20 m), medium (20–45 m), and far
//! (≥ 45 m) buckets; each bucket's MSE is the mean squared Euclidean norm of
//! the planar velocity error, and the headline number is the unweighted mean
//! over nonempty buckets. Distance quality is reported with the standard
//! depth-style metrics (AbsRel, SqRel, RMSE, log RMSE, and the δ < 1.25^k
//! inlier fractions).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::geometry::VehicleState;

/// Near/medium boundary in meters.
pub const NEAR_LIMIT: f64 = 20.0;
/// Medium/far boundary in meters.
pub const FAR_LIMIT: f64 = 45.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("distance {value} must be positive")]
    NonPositiveDistance { value: f64 },
    #[error("{predictions} predictions but {targets} targets")]
    MisalignedLists { predictions: usize, targets: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
}

/// Distance range a vehicle falls into, by ground-truth distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeBucket {
    Near,
    Medium,
    Far,
}

/// Assign a ground-truth distance to its range bucket. Boundary values go
/// to the larger-range bucket.
pub fn bucketize(distance_gt: f64) -> Result<RangeBucket, MetricsError> {
    if !(distance_gt > 0.0) {
        return Err(MetricsError::NonPositiveDistance { value: distance_gt });
    }
    Ok(if distance_gt < NEAR_LIMIT {
        RangeBucket::Near
    } else if distance_gt < FAR_LIMIT {
        RangeBucket::Medium
    } else {
        RangeBucket::Far
    })
}

/// Range-bucketed velocity MSE. Empty buckets carry `None` and are excluded
/// from the average.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VelocityMse {
    pub near: Option<f64>,
    pub medium: Option<f64>,
    pub far: Option<f64>,
    /// Unweighted mean over nonempty buckets.
    pub avg: f64,
}

/// Vehicles per range bucket.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct BucketCounts {
    pub near: usize,
    pub medium: usize,
    pub far: usize,
}

impl BucketCounts {
    pub fn total(&self) -> usize {
        self.near + self.medium + self.far
    }
}

/// Depth-style distance metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DistanceMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Complete evaluation summary for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mse_velocity: VelocityMse,
    /// Mean squared Euclidean norm of the planar position error, all
    /// vehicles pooled.
    pub mse_position: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub counts: BucketCounts,
}

fn check_aligned(predictions: usize, targets: usize) -> Result<(), MetricsError> {
    if predictions != targets {
        return Err(MetricsError::MisalignedLists { predictions, targets });
    }
    if predictions == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    Ok(())
}

/// Range-bucketed velocity MSE with bucket occupancy.
pub fn velocity_mse(
    predictions: &[VehicleState],
    targets: &[VehicleState],
) -> Result<(VelocityMse, BucketCounts), MetricsError> {
    check_aligned(predictions.len(), targets.len())?;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (p, t) in predictions.iter().zip(targets) {
        let bucket = bucketize(t.distance)? as usize;
        let ex = p.velocity.x - t.velocity.x;
        let ez = p.velocity.z - t.velocity.z;
        sums[bucket] += ex * ex + ez * ez;
        counts[bucket] += 1;
    }
    let mse = |i: usize| -> Option<f64> {
        if counts[i] > 0 {
            Some(sums[i] / counts[i] as f64)
        } else {
            None
        }
    };
    let per = [mse(0), mse(1), mse(2)];
    let nonempty: Vec<f64> = per.iter().flatten().cloned().collect();
    let avg = nonempty.iter().sum::<f64>() / nonempty.len() as f64;
    Ok((
        VelocityMse { near: per[0], medium: per[1], far: per[2], avg },
        BucketCounts { near: counts[0], medium: counts[1], far: counts[2] },
    ))
}

/// Mean squared Euclidean norm of the position error, all vehicles pooled.
pub fn position_mse(
    predictions: &[VehicleState],
    targets: &[VehicleState],
) -> Result<f64, MetricsError> {
    check_aligned(predictions.len(), targets.len())?;
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let ex = p.position.x - t.position.x;
            let ez = p.position.z - t.position.z;
            ex * ex + ez * ez
        })
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Depth-style metrics between predicted and ground-truth distances.
pub fn distance_metrics(
    predicted_d: &[f64],
    target_d: &[f64],
) -> Result<DistanceMetrics, MetricsError> {
    check_aligned(predicted_d.len(), target_d.len())?;
    for d in predicted_d.iter().chain(target_d) {
        if !(*d > 0.0) {
            return Err(MetricsError::NonPositiveDistance { value: *d });
        }
    }
    let n = predicted_d.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut inliers = [0usize; 3];
    for (p, t) in predicted_d.iter().zip(target_d) {
        let e = p - t;
        abs_rel += e.abs() / t;
        sq_rel += e * e / t;
        sq += e * e;
        let l = p.ln() - t.ln();
        sq_log += l * l;
        let ratio = (p / t).max(t / p);
        for (k, hit) in inliers.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    Ok(DistanceMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: inliers[0] as f64 / n,
        delta2: inliers[1] as f64 / n,
        delta3: inliers[2] as f64 / n,
    })
}

/// Evaluate everything at once.
pub fn evaluate(
    predictions: &[VehicleState],
    targets: &[VehicleState],
) -> Result<EvalReport, MetricsError> {
    let (mse_velocity, counts) = velocity_mse(predictions, targets)?;
    let mse_position = position_mse(predictions, targets)?;
    let pred_d: Vec<f64> = predictions.iter().map(|s| s.distance).collect();
    let tgt_d: Vec<f64> = targets.iter().map(|s| s.distance).collect();
    let d = distance_metrics(&pred_d, &tgt_d)?;
    Ok(EvalReport {
        mse_velocity,
        mse_position,
        abs_rel: d.abs_rel,
        sq_rel: d.sq_rel,
        rmse: d.rmse,
        rmse_log: d.rmse_log,
        delta1: d.delta1,
        delta2: d.delta2,
        delta3: d.delta3,
        counts,
    })
}

impl EvalReport {
    /// Render as an aligned-column text table; empty buckets show a dash.
    pub fn to_table(&self) -> String {
        let headers = [
            "near", "medium", "far", "avg", "pos_mse", "abs_rel", "sq_rel", "rmse", "rmse_log",
            "d<1.25", "d<1.25^2", "d<1.25^3",
        ];
        let cell = |v: Option<f64>| -> String {
            match v {
                Some(x) => format!("{x:.4}"),
                None => "-".to_string(),
            }
        };
        let values = [
            cell(self.mse_velocity.near),
            cell(self.mse_velocity.medium),
            cell(self.mse_velocity.far),
            cell(Some(self.mse_velocity.avg)),
            cell(Some(self.mse_position)),
            cell(Some(self.abs_rel)),
            cell(Some(self.sq_rel)),
            cell(Some(self.rmse)),
            cell(Some(self.rmse_log)),
            cell(Some(self.delta1)),
            cell(Some(self.delta2)),
            cell(Some(self.delta3)),
        ];
        let counts = [
            format!("n={}", self.counts.near),
            format!("n={}", self.counts.medium),
            format!("n={}", self.counts.far),
            format!("n={}", self.counts.total()),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ];
        let widths: Vec<usize> = headers
            .iter()
            .enumerate()
            .map(|(i, head)| head.len().max(values[i].len()).max(counts[i].len()))
            .collect();
        let mut out = String::new();
        for (row, is_last) in
            [(&headers.map(String::from), false), (&values, false), (&counts, true)]
        {
            for (i, item) in row.iter().enumerate() {
                let _ = write!(out, "{:<width$}", item, width = widths[i] + 2);
            }
            while out.ends_with(' ') {
                out.pop();
            }
            if !is_last {
                out.push('\n');
            }
        }
        out
    }
}
