//! Pose-error metrics (MSSD, MSPD) and precision/recall over a threshold
//! grid. VSD is not computed: the averages cover MSSD and MSPD only.

use crate::graph::SolveReport;
use crate::lie::{rotation_angle, Pose};
use crate::tracker::Prediction;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground-truth stream is empty")]
    EmptyTruth,
    #[error("prediction stream has {predictions} frames but ground truth has {truth}")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("frame {index}: prediction timestamp {prediction} does not match ground truth {truth}")]
    Misaligned {
        index: usize,
        prediction: f64,
        truth: f64,
    },
    #[error("no object model for label `{0}`")]
    MissingModel(String),
    #[error("model point behind the camera")]
    BehindCamera,
    #[error("invalid object model `{label}`: {reason}")]
    InvalidModel { label: String, reason: String },
}

/// Pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 615.0,
            fy: 615.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl Intrinsics {
    /// Pixel coordinates of a camera-frame point, `None` unless `z > 0`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        (p.z > 0.0).then(|| Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Surface samples and discrete symmetries of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectModel {
    pub label: String,
    pub points: Vec<Vector3<f64>>,
    /// Includes the identity.
    pub symmetries: Vec<Pose>,
    pub diameter: f64,
}

/// Half-turns about the x, y and z axes plus the identity.
pub fn box_symmetries() -> Vec<Pose> {
    let mut out = vec![Pose::identity()];
    for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
        out.push(Pose::from_rotation(crate::lie::exp_so3(&(axis * std::f64::consts::PI))));
    }
    out
}

impl ObjectModel {
    pub fn new(
        label: impl Into<String>,
        points: Vec<Vector3<f64>>,
        symmetries: Vec<Pose>,
    ) -> Result<Self, EvalError> {
        let mut diameter: f64 = 0.0;
        for a in &points {
            for b in &points {
                diameter = diameter.max((a - b).norm());
            }
        }
        let model = Self {
            label: label.into(),
            points,
            symmetries,
            diameter,
        };
        model.validate()?;
        Ok(model)
    }

    /// Box with the given half extents sampled on a 5x5 grid per face.
    pub fn cuboid(label: impl Into<String>, half: Vector3<f64>, symmetries: Vec<Pose>) -> Result<Self, EvalError> {
        let mut points = Vec::new();
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                for &u in &grid {
                    for &v in &grid {
                        let mut p = Vector3::zeros();
                        p[axis] = sign;
                        p[(axis + 1) % 3] = u;
                        p[(axis + 2) % 3] = v;
                        let q = p.component_mul(&half);
                        if !points.contains(&q) {
                            points.push(q);
                        }
                    }
                }
            }
        }
        Self::new(label, points, symmetries)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: &str| EvalError::InvalidModel {
            label: self.label.clone(),
            reason: reason.into(),
        };
        if self.points.is_empty() {
            return Err(bad("no points"));
        }
        let has_identity = self
            .symmetries
            .iter()
            .any(|s| s.translation.norm() < 1e-9 && rotation_angle(&s.rotation) < 1e-9);
        if !has_identity {
            return Err(bad("symmetry set must contain the identity"));
        }
        if !(self.diameter > 0.0) {
            return Err(bad("diameter must be positive"));
        }
        Ok(())
    }
}

/// Maximum symmetry-aware surface distance, meters.
pub fn mssd(estimate: &Pose, truth: &Pose, model: &ObjectModel) -> f64 {
    let est: Vec<Vector3<f64>> = model.points.iter().map(|p| estimate.transform_point(p)).collect();
    model
        .symmetries
        .iter()
        .map(|s| {
            let ts = truth.compose(s);
            model
                .points
                .iter()
                .zip(&est)
                .map(|(p, e)| (e - ts.transform_point(p)).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum symmetry-aware projection distance, pixels. Poses are in the
/// camera frame.
pub fn mspd(
    estimate: &Pose,
    truth: &Pose,
    model: &ObjectModel,
    intrinsics: &Intrinsics,
) -> Result<f64, EvalError> {
    let est = model
        .points
        .iter()
        .map(|p| intrinsics.project(&estimate.transform_point(p)).ok_or(EvalError::BehindCamera))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        let ts = truth.compose(s);
        let mut worst: f64 = 0.0;
        for (p, e) in model.points.iter().zip(&est) {
            let t = intrinsics
                .project(&ts.transform_point(p))
                .ok_or(EvalError::BehindCamera)?;
            worst = worst.max((e - t).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Ground truth of one object at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthObject {
    pub label: String,
    pub instance: usize,
    /// World-frame pose.
    pub pose: Pose,
    pub visible: bool,
    pub n_px: u32,
    pub outcome: DetectionOutcome,
}

/// What the simulated detector produced for an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionOutcome {
    Detected,
    Dropped,
    Outlier,
    Occluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFrame {
    pub timestamp: f64,
    /// True world-frame camera pose.
    pub camera: Pose,
    pub objects: Vec<TruthObject>,
}

/// Predictions emitted for one frame, with the solver report when produced
/// by the tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub timestamp: f64,
    pub predictions: Vec<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// MSSD thresholds as fractions of the object diameter.
    pub mssd_fractions: Vec<f64>,
    /// MSPD thresholds in pixels.
    pub mspd_pixels: Vec<f64>,
    pub intrinsics: Intrinsics,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mssd_fractions: (1..=10).map(|k| 0.05 * k as f64).collect(),
            mspd_pixels: (1..=10).map(|k| 5.0 * k as f64).collect(),
            intrinsics: Intrinsics::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl Curve {
    pub fn average_recall(&self) -> f64 {
        mean(&self.recall)
    }

    pub fn average_precision(&self) -> f64 {
        mean(&self.precision)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub timestamp: f64,
    pub label: String,
    pub track: u64,
    pub instance: usize,
    pub visible: bool,
    pub mssd: f64,
    /// `None` when a point falls behind the camera.
    pub mspd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: String,
    pub frames: usize,
    pub visible_objects: usize,
    /// Predictions that count towards precision.
    pub scored_predictions: usize,
    /// Predictions matched to an object that is not visible.
    pub ignored_predictions: usize,
    pub mssd: Curve,
    pub mspd: Curve,
    pub average_recall: f64,
    pub average_precision: f64,
    pub matches: Vec<MatchRecord>,
}

impl MetricReport {
    /// Per-threshold curves as CSV: `metric,threshold,recall,precision`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("metric,threshold,recall,precision\n");
        for (name, c) in [("mssd", &self.mssd), ("mspd", &self.mspd)] {
            for i in 0..c.thresholds.len() {
                let _ = writeln!(out, "{name},{},{},{}", c.thresholds[i], c.recall[i], c.precision[i]);
            }
        }
        out
    }

    /// Recall at one MSSD diameter fraction, if it is on the grid.
    pub fn mssd_recall_at(&self, fraction: f64) -> Option<f64> {
        self.mssd
            .thresholds
            .iter()
            .position(|t| (t - fraction).abs() < 1e-12)
            .map(|i| self.mssd.recall[i])
    }
}

/// Per frame and label, greedily pairs predictions with ground-truth
/// objects by smallest MSSD. Predictions paired with an invisible object are
/// ignored; unpaired predictions are false positives; precision is 1 when
/// nothing is scored.
pub fn precision_recall(
    predictions: &[PredictionBatch],
    truth: &[TruthFrame],
    models: &BTreeMap<String, ObjectModel>,
    config: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    if predictions.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let mut visible = 0;
    let mut scored = 0;
    let mut ignored = 0;
    let mut matches = Vec::new();
    for (index, (batch, gt)) in predictions.iter().zip(truth).enumerate() {
        if batch.timestamp != gt.timestamp {
            return Err(EvalError::Misaligned {
                index,
                prediction: batch.timestamp,
                truth: gt.timestamp,
            });
        }
        visible += gt.objects.iter().filter(|o| o.visible).count();
        let cam_inv = gt.camera.inverse();
        let mut pairs = Vec::new();
        for (pi, p) in batch.predictions.iter().enumerate() {
            let model = models
                .get(&p.label)
                .ok_or_else(|| EvalError::MissingModel(p.label.clone()))?;
            for (oi, o) in gt.objects.iter().enumerate() {
                if o.label == p.label {
                    pairs.push((mssd(&p.pose, &o.pose, model), pi, oi));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_p = vec![false; batch.predictions.len()];
        let mut used_o = vec![false; gt.objects.len()];
        for (e, pi, oi) in pairs {
            if used_p[pi] || used_o[oi] {
                continue;
            }
            used_p[pi] = true;
            used_o[oi] = true;
            let p = &batch.predictions[pi];
            let o = &gt.objects[oi];
            let model = &models[&p.label];
            let err_px = mspd(
                &cam_inv.compose(&p.pose),
                &cam_inv.compose(&o.pose),
                model,
                &config.intrinsics,
            )
            .ok();
            matches.push(MatchRecord {
                timestamp: gt.timestamp,
                label: p.label.clone(),
                track: p.track,
                instance: o.instance,
                visible: o.visible,
                mssd: e,
                mspd: err_px,
            });
            if o.visible {
                scored += 1;
            } else {
                ignored += 1;
            }
        }
        scored += used_p.iter().filter(|u| !**u).count();
    }

    let curve = |thresholds: &[f64], correct: &dyn Fn(&MatchRecord, f64) -> bool| {
        let mut recall = Vec::with_capacity(thresholds.len());
        let mut precision = Vec::with_capacity(thresholds.len());
        for &th in thresholds {
            let tp = matches.iter().filter(|m| m.visible && correct(m, th)).count() as f64;
            recall.push(if visible == 0 { 0.0 } else { tp / visible as f64 });
            precision.push(if scored == 0 { 1.0 } else { tp / scored as f64 });
        }
        Curve {
            thresholds: thresholds.to_vec(),
            recall,
            precision,
        }
    };
    let diameters: BTreeMap<&str, f64> = models.iter().map(|(k, m)| (k.as_str(), m.diameter)).collect();
    let mssd_curve = curve(&config.mssd_fractions, &|m, th| m.mssd < th * diameters[m.label.as_str()]);
    let mspd_curve = curve(&config.mspd_pixels, &|m, th| m.mspd.is_some_and(|e| e < th));
    Ok(MetricReport {
        metrics: "MSSD and MSPD (VSD not computed)".into(),
        frames: truth.len(),
        visible_objects: visible,
        scored_predictions: scored,
        ignored_predictions: ignored,
        average_recall: 0.5 * (mssd_curve.average_recall() + mspd_curve.average_recall()),
        average_precision: 0.5 * (mssd_curve.average_precision() + mspd_curve.average_precision()),
        mssd: mssd_curve,
        mspd: mspd_curve,
        matches,
    })
}
