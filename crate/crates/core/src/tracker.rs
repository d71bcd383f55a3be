//! Online fixed-lag smoother over camera and object poses.
//!
//! Each [`Tracker::ingest`] call adds one camera variable, extends every live
//! track to the new timestamp through its motion model, associates the
//! frame's detections, slides the window and re-solves. Readers consume the
//! immutable [`Snapshot`] exported after each solve.

use crate::factors::{
    constant_pose_cov, integration_cov, measurement_covariance, smoothness_cov, CameraNoise,
    CovModelParams, FactorError, MotionNoise,
};
use crate::graph::{
    FactorGraph, FactorKind, GraphError, Owner, SolveReport, SolverConfig, VariableId,
    VariableValue, WindowMode,
};
use crate::lie::{exp_se3, log_se3, rotation_angle, translation_distance, Pose, Tangent6};
use log::{debug, info};
use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    #[default]
    ConstPose,
    ConstVel,
}

impl std::str::FromStr for MotionModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "const_pose" => Ok(MotionModel::ConstPose),
            "const_vel" => Ok(MotionModel::ConstVel),
            other => Err(format!("unknown motion model `{other}` (expected const_pose|const_vel)")),
        }
    }
}

/// Association and prediction thresholds. Angles in radians, volumes in
/// m^3 and rad^3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub tau_outlier_t: f64,
    pub tau_outlier_r: f64,
    pub tau_pred_t: f64,
    pub tau_pred_r: f64,
    pub horizon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GatePreset::RecallOriented.gates()
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        for (field, v) in [
            ("tau_outlier_t", self.tau_outlier_t),
            ("tau_outlier_r", self.tau_outlier_r),
            ("tau_pred_t", self.tau_pred_t),
            ("tau_pred_r", self.tau_pred_r),
        ] {
            if !(v > 0.0) {
                return Err(TrackerError::Config(format!("gates.{field} must be positive, got {v}")));
            }
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(TrackerError::Config(format!(
                "gates.horizon must be finite and non-negative, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Named prediction-gate settings picked from the precision/recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatePreset {
    RecallOriented,
    PrecisionOriented,
}

impl GatePreset {
    pub fn gates(self) -> GateConfig {
        let (tau_pred_t, tau_pred_r) = match self {
            GatePreset::RecallOriented => (1e-4, 1e-3),
            GatePreset::PrecisionOriented => (1e-6, 1e-4),
        };
        GateConfig {
            tau_outlier_t: 0.1,
            tau_outlier_r: 10f64.to_radians(),
            tau_pred_t,
            tau_pred_r,
            horizon: 1.0,
        }
    }
}

impl std::str::FromStr for GatePreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recall-oriented" => Ok(GatePreset::RecallOriented),
            "precision-oriented" => Ok(GatePreset::PrecisionOriented),
            other => Err(format!(
                "unknown preset `{other}` (expected recall-oriented|precision-oriented)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub motion: MotionModel,
    pub window_mode: WindowMode,
    pub gates: GateConfig,
    pub cov_model: CovModelParams,
    pub motion_noise: MotionNoise,
    pub camera_noise: CameraNoise,
    pub solver: SolverConfig,
    /// Std of the zero-mean prior on a new track's first twist, (m/s, rad/s).
    pub initial_twist_sigma: [f64; 2],
    /// Tracks without a detection for this many horizons are retired.
    pub retire_after: f64,
    /// Bounding-sphere radius per label, meters.
    pub radii: BTreeMap<String, f64>,
    pub default_radius: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            motion: MotionModel::ConstPose,
            window_mode: WindowMode::Prior,
            gates: GateConfig::default(),
            cov_model: CovModelParams::default(),
            motion_noise: MotionNoise::default(),
            camera_noise: CameraNoise::default(),
            solver: SolverConfig::default(),
            initial_twist_sigma: [0.5, 1.0],
            retire_after: 2.0,
            radii: BTreeMap::new(),
            default_radius: 0.1,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        self.gates.validate()?;
        self.cov_model.validate()?;
        self.motion_noise.validate()?;
        self.camera_noise.validate()?;
        if !(self.initial_twist_sigma.iter().all(|s| *s > 0.0)) {
            return Err(TrackerError::Config("initial_twist_sigma must be positive".into()));
        }
        if !(self.retire_after > 0.0) {
            return Err(TrackerError::Config("retire_after must be positive".into()));
        }
        if let Some((l, r)) = self.radii.iter().find(|(_, r)| !(**r > 0.0)) {
            return Err(TrackerError::Config(format!("radius of `{l}` must be positive, got {r}")));
        }
        if !(self.default_radius > 0.0) {
            return Err(TrackerError::Config("default_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn radius(&self, label: &str) -> f64 {
        self.radii.get(label).copied().unwrap_or(self.default_radius)
    }

    fn initial_twist_cov(&self) -> Matrix6<f64> {
        let [v, w] = self.initial_twist_sigma;
        Matrix6::from_diagonal(&Vector6::new(v * v, v * v, v * v, w * w, w * w, w * w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub label: String,
    /// Object pose in the camera frame.
    pub pose: Pose,
    pub n_px: u32,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub timestamp: f64,
    /// Measured camera pose in the world frame.
    pub camera: Pose,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub track: u64,
    pub label: String,
    /// World-frame pose.
    pub pose: Pose,
    pub volume_t: f64,
    pub volume_r: f64,
    pub timestamp: f64,
}

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("frame at t={got} is not after the previous frame at t={previous}")]
    OutOfOrder { previous: f64, got: f64 },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub timestamp: f64,
    pub pose: VariableId,
    pub twist: Option<VariableId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub label: String,
    pub radius: f64,
    pub motion: MotionModel,
    /// Window states, oldest first.
    pub states: Vec<TrackState>,
    pub last_detection: f64,
    pub detections: usize,
}

impl Track {
    pub fn latest(&self) -> &TrackState {
        self.states.last().expect("tracks always hold their newest state")
    }
}

/// Outcome of associating one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    Existing(u64),
    New(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub solve: SolveReport,
    /// One entry per detection, in input order.
    pub associations: Vec<Association>,
    pub retired: Vec<u64>,
}

/// Solved state of one track at its newest timestamp.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackEstimate {
    pub id: u64,
    pub label: String,
    pub radius: f64,
    pub motion: MotionModel,
    pub timestamp: f64,
    pub pose: Pose,
    pub pose_cov: Matrix6<f64>,
    pub twist: Option<Tangent6>,
    pub twist_cov: Option<Matrix6<f64>>,
    pub last_detection: f64,
    pub detections: usize,
}

/// Immutable export of the estimates after a solve. Cheap to extrapolate
/// from, shareable between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub timestamp: f64,
    pub tracks: Vec<TrackEstimate>,
    pub gates: GateConfig,
    pub noise: MotionNoise,
}

/// Volume of the one-sigma ellipsoid of a 3x3 covariance.
pub fn ellipsoid_volume(cov: &Matrix3<f64>) -> f64 {
    4.0 / 3.0 * PI * cov.determinant().max(0.0).sqrt()
}

impl Snapshot {
    fn empty(gates: GateConfig, noise: MotionNoise) -> Self {
        Self {
            timestamp: f64::NEG_INFINITY,
            tracks: Vec::new(),
            gates,
            noise,
        }
    }

    pub fn track(&self, id: u64) -> Option<&TrackEstimate> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Pose of `track` moved `dt >= 0` seconds forward by its motion model.
    pub fn extrapolate_pose(track: &TrackEstimate, dt: f64) -> Pose {
        match (track.motion, track.twist) {
            (MotionModel::ConstVel, Some(x)) if dt > 0.0 => track.pose.compose(&exp_se3(&x.scale(dt))),
            _ => track.pose,
        }
    }

    /// Pose marginal inflated by the motion-model process noise over `dt`.
    pub fn extrapolate_covariance(&self, track: &TrackEstimate, dt: f64) -> Matrix6<f64> {
        let dt = dt.max(0.0);
        let n = &self.noise;
        let added = match track.motion {
            MotionModel::ConstPose => {
                diag6(n.sigma_mt * n.sigma_mt, n.sigma_mr * n.sigma_mr) * dt
            }
            MotionModel::ConstVel => {
                let twist_cov = track.twist_cov.unwrap_or_else(Matrix6::zeros);
                twist_cov * (dt * dt)
                    + diag6(n.sigma_vt * n.sigma_vt, n.sigma_vr * n.sigma_vr) * (dt * dt * dt / 3.0)
            }
        };
        track.pose_cov + added
    }

    /// Gated predictions at time `now`, ordered by track id.
    pub fn predict(&self, now: f64) -> Vec<Prediction> {
        let mut passing: Vec<Prediction> = self
            .tracks
            .iter()
            .filter_map(|t| {
                let dt = (now - t.timestamp).max(0.0);
                let cov = self.extrapolate_covariance(t, dt);
                let volume_t = ellipsoid_volume(&cov.fixed_view::<3, 3>(0, 0).into_owned());
                let volume_r = ellipsoid_volume(&cov.fixed_view::<3, 3>(3, 3).into_owned());
                (volume_t < self.gates.tau_pred_t && volume_r < self.gates.tau_pred_r).then(|| Prediction {
                    track: t.id,
                    label: t.label.clone(),
                    pose: Self::extrapolate_pose(t, dt),
                    volume_t,
                    volume_r,
                    timestamp: now,
                })
            })
            .collect();
        passing.sort_by(|a, b| a.volume_t.total_cmp(&b.volume_t).then(a.track.cmp(&b.track)));
        let mut kept: Vec<Prediction> = Vec::with_capacity(passing.len());
        for p in passing {
            let radius = self.track(p.track).map_or(0.0, |t| t.radius);
            let shadowed = kept
                .iter()
                .any(|k| k.label == p.label && translation_distance(&k.pose, &p.pose) < radius);
            if !shadowed {
                kept.push(p);
            }
        }
        kept.sort_by_key(|p| p.track);
        kept
    }
}

fn diag6(t: f64, r: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
}

#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    graph: FactorGraph,
    tracks: BTreeMap<u64, Track>,
    next_track: u64,
    last_timestamp: Option<f64>,
    snapshot: Arc<Snapshot>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self, TrackerError> {
        config.validate()?;
        let snapshot = Arc::new(Snapshot::empty(config.gates, config.motion_noise));
        Ok(Self {
            config,
            graph: FactorGraph::new(),
            tracks: BTreeMap::new(),
            next_track: 0,
            last_timestamp: None,
            snapshot,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn tracks(&self) -> &BTreeMap<u64, Track> {
        &self.tracks
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot)
    }

    /// Gated predictions from the latest snapshot.
    pub fn predict(&self, now: f64) -> Vec<Prediction> {
        self.snapshot.predict(now)
    }

    fn validate_frame(&self, frame: &Frame) -> Result<(), TrackerError> {
        if !frame.timestamp.is_finite() {
            return Err(TrackerError::InvalidFrame(format!("timestamp {}", frame.timestamp)));
        }
        if let Some(prev) = self.last_timestamp {
            if !(frame.timestamp > prev) {
                return Err(TrackerError::OutOfOrder {
                    previous: prev,
                    got: frame.timestamp,
                });
            }
        }
        for (i, d) in frame.detections.iter().enumerate() {
            if d.n_px < 1 {
                return Err(TrackerError::InvalidFrame(format!("detection {i}: n_px must be >= 1")));
            }
            if d.timestamp != frame.timestamp {
                return Err(TrackerError::InvalidFrame(format!(
                    "detection {i}: timestamp {} differs from frame timestamp {}",
                    d.timestamp, frame.timestamp
                )));
            }
            if d.label.is_empty() {
                return Err(TrackerError::InvalidFrame(format!("detection {i}: empty label")));
            }
        }
        Ok(())
    }

    /// Track a detection would join given `camera` as the camera estimate,
    /// or `None` when it would spawn a new track. Candidates in `exclude`
    /// are skipped.
    fn best_candidate(
        &self,
        detection: &Detection,
        camera: &Pose,
        exclude: &BTreeSet<u64>,
    ) -> Result<Option<u64>, TrackerError> {
        let z = camera.compose(&detection.pose);
        let meas_cov = measurement_covariance(&detection.pose, detection.n_px as f64, &self.config.cov_model)?;
        let gates = &self.config.gates;
        let mut best: Option<(f64, u64)> = None;
        for t in &self.snapshot.tracks {
            if t.label != detection.label || exclude.contains(&t.id) {
                continue;
            }
            let dt = (detection.timestamp - t.timestamp).max(0.0);
            let pred = Snapshot::extrapolate_pose(t, dt);
            if translation_distance(&pred, &z) >= gates.tau_outlier_t
                || rotation_angle(&pred.between(&z).rotation) >= gates.tau_outlier_r
            {
                continue;
            }
            let r = log_se3(&pred.between(&z)).to_vector();
            let s = self.snapshot.extrapolate_covariance(t, dt) + meas_cov;
            let score = match s.cholesky() {
                Some(c) => r.dot(&c.solve(&r)),
                None => f64::INFINITY,
            };
            if best.map_or(true, |(b, _)| score < b) {
                best = Some((score, t.id));
            }
        }
        Ok(best.map(|(_, id)| id))
    }

    /// Association decision for a single detection against the current
    /// snapshot.
    pub fn associate(&self, detection: &Detection, camera: &Pose) -> Result<Option<u64>, TrackerError> {
        self.best_candidate(detection, camera, &BTreeSet::new())
    }

    pub fn ingest(&mut self, frame: &Frame) -> Result<IngestReport, TrackerError> {
        self.validate_frame(frame)?;
        let t = frame.timestamp;
        let dt = self.last_timestamp.map(|p| t - p);

        // greedy association in detection order; a track takes at most one
        // detection per frame
        let mut claimed = BTreeSet::new();
        let mut matches = Vec::with_capacity(frame.detections.len());
        for d in &frame.detections {
            let m = self.best_candidate(d, &frame.camera, &claimed)?;
            if let Some(id) = m {
                claimed.insert(id);
            }
            matches.push(m);
        }

        let cam = self
            .graph
            .add_variable(VariableValue::Pose(frame.camera), t, Owner::Camera)?;
        self.graph.add(
            FactorKind::Camera {
                measurement: frame.camera,
            },
            &[cam],
            self.config.camera_noise.covariance(),
        )?;

        if let Some(dt) = dt {
            let ids: Vec<u64> = self.tracks.keys().copied().collect();
            for id in ids {
                self.extend_track(id, t, dt)?;
            }
        }

        let mut associations = Vec::with_capacity(frame.detections.len());
        for (d, m) in frame.detections.iter().zip(matches) {
            let cov = measurement_covariance(&d.pose, d.n_px as f64, &self.config.cov_model)?;
            let id = match m {
                Some(id) => {
                    associations.push(Association::Existing(id));
                    id
                }
                None => {
                    let id = self.spawn_track(d, &frame.camera, t)?;
                    associations.push(Association::New(id));
                    id
                }
            };
            let track = self.tracks.get_mut(&id).expect("track exists");
            track.last_detection = t;
            track.detections += 1;
            let pose_var = track.latest().pose;
            self.graph
                .add(FactorKind::Object { measurement: d.pose }, &[pose_var, cam], cov)?;
        }

        let retired = self.retire_stale(t)?;
        self.slide_window(t)?;
        let solve = self.solve_robust()?;
        self.last_timestamp = Some(t);
        self.export_snapshot(t)?;
        debug!(
            "t={t:.4}: {} detections, {} tracks, {} variables, chi2 {:.3e} -> {:.3e} in {} iterations",
            frame.detections.len(),
            self.tracks.len(),
            self.graph.num_variables(),
            solve.initial_chi2,
            solve.final_chi2,
            solve.iterations
        );
        Ok(IngestReport {
            solve,
            associations,
            retired,
        })
    }

    fn spawn_track(&mut self, d: &Detection, camera: &Pose, t: f64) -> Result<u64, TrackerError> {
        let id = self.next_track;
        self.next_track += 1;
        let owner = Owner::Track(id);
        let pose = self
            .graph
            .add_variable(VariableValue::Pose(camera.compose(&d.pose)), t, owner)?;
        let twist = match self.config.motion {
            MotionModel::ConstPose => None,
            MotionModel::ConstVel => {
                let x = self
                    .graph
                    .add_variable(VariableValue::Twist(Tangent6::zero()), t, owner)?;
                self.graph.add(
                    FactorKind::TwistPrior { mean: Tangent6::zero() },
                    &[x],
                    self.config.initial_twist_cov(),
                )?;
                Some(x)
            }
        };
        self.tracks.insert(
            id,
            Track {
                id,
                label: d.label.clone(),
                radius: self.config.radius(&d.label),
                motion: self.config.motion,
                states: vec![TrackState { timestamp: t, pose, twist }],
                last_detection: t,
                detections: 0,
            },
        );
        debug!("spawned track {id} ({})", d.label);
        Ok(id)
    }

    /// Adds a state at `t` linked to the previous one by the motion model.
    fn extend_track(&mut self, id: u64, t: f64, dt: f64) -> Result<(), TrackerError> {
        let track = &self.tracks[&id];
        let prev = *track.latest();
        let owner = Owner::Track(id);
        let prev_pose = *self.graph.value(prev.pose).and_then(|v| v.as_pose()).expect("pose var");
        let state = match (track.motion, prev.twist) {
            (MotionModel::ConstVel, Some(prev_twist)) => {
                let x = *self.graph.value(prev_twist).and_then(|v| v.as_twist()).expect("twist var");
                let seed = prev_pose.compose(&exp_se3(&x.scale(dt)));
                let pose = self.graph.add_variable(VariableValue::Pose(seed), t, owner)?;
                let twist = self.graph.add_variable(VariableValue::Twist(x), t, owner)?;
                self.graph.add(
                    FactorKind::Smoothness,
                    &[prev_twist, twist],
                    smoothness_cov(&self.config.motion_noise, dt)?,
                )?;
                self.graph
                    .add(FactorKind::Integration { dt }, &[prev.pose, pose, twist], integration_cov(dt)?)?;
                TrackState {
                    timestamp: t,
                    pose,
                    twist: Some(twist),
                }
            }
            _ => {
                let pose = self.graph.add_variable(VariableValue::Pose(prev_pose), t, owner)?;
                self.graph.add(
                    FactorKind::Between {
                        measurement: Pose::identity(),
                    },
                    &[prev.pose, pose],
                    constant_pose_cov(&self.config.motion_noise, dt)?,
                )?;
                TrackState {
                    timestamp: t,
                    pose,
                    twist: None,
                }
            }
        };
        self.tracks.get_mut(&id).expect("track").states.push(state);
        Ok(())
    }

    fn remove_track(&mut self, id: u64) -> Result<(), TrackerError> {
        let track = self.tracks.remove(&id).expect("track");
        let vars: Vec<VariableId> = track
            .states
            .iter()
            .flat_map(|s| std::iter::once(s.pose).chain(s.twist))
            .collect();
        self.graph.marginalize(&vars, WindowMode::Delete)?;
        Ok(())
    }

    fn retire_stale(&mut self, now: f64) -> Result<Vec<u64>, TrackerError> {
        let limit = self.config.retire_after * self.config.gates.horizon;
        let stale: Vec<u64> = self
            .tracks
            .values()
            .filter(|t| now - t.last_detection > limit + crate::graph::WINDOW_EPSILON)
            .map(|t| t.id)
            .collect();
        for id in &stale {
            info!("retiring track {id} at t={now:.4} (no detection since t={:.4})", self.tracks[id].last_detection);
            self.remove_track(*id)?;
        }
        Ok(stale)
    }

    fn slide_window(&mut self, now: f64) -> Result<(), TrackerError> {
        self.graph
            .apply_window(self.config.gates.horizon, now, self.config.window_mode)?;
        for track in self.tracks.values_mut() {
            let graph = &self.graph;
            track.states.retain(|s| graph.variable(s.pose).is_some());
        }
        // without marginal priors a track can lose every absolute constraint
        let mut unobserved = Vec::new();
        for track in self.tracks.values() {
            let observed = track.states.iter().any(|s| {
                self.graph.factors_of(s.pose).any(|f| {
                    matches!(
                        self.graph.factor(f).map(|f| &f.kind),
                        Some(FactorKind::Object { .. } | FactorKind::PosePrior { .. })
                    )
                })
            });
            if !observed {
                unobserved.push(track.id);
            }
        }
        for id in unobserved {
            info!("retiring track {id} at t={now:.4}: no measurement left in the window");
            self.remove_track(id)?;
        }
        if self.config.window_mode == WindowMode::Delete {
            // the oldest twist needs an anchor once its predecessor is gone
            let cov = self.config.initial_twist_cov();
            let anchors: Vec<(VariableId, Tangent6)> = self
                .tracks
                .values()
                .filter_map(|t| t.states.first().and_then(|s| s.twist))
                .filter(|x| {
                    !self.graph.factors_of(*x).any(|f| {
                        matches!(
                            self.graph.factor(f).map(|f| &f.kind),
                            Some(FactorKind::TwistPrior { .. })
                        )
                    })
                })
                .map(|x| (x, *self.graph.value(x).and_then(|v| v.as_twist()).expect("twist")))
                .collect();
            for (x, mean) in anchors {
                self.graph.add(FactorKind::TwistPrior { mean }, &[x], cov)?;
            }
        }
        Ok(())
    }

    /// Solves, retiring any track the solver reports as rank deficient.
    fn solve_robust(&mut self) -> Result<SolveReport, TrackerError> {
        loop {
            match self.graph.solve(&self.config.solver) {
                Ok(r) => return Ok(r),
                Err(GraphError::RankDeficient(vars)) | Err(GraphError::Unconstrained(vars)) => {
                    let owners: BTreeSet<u64> = vars
                        .iter()
                        .filter_map(|v| match self.graph.variable(*v).map(|v| v.owner) {
                            Some(Owner::Track(id)) if self.tracks.contains_key(&id) => Some(id),
                            _ => None,
                        })
                        .collect();
                    if owners.is_empty() {
                        return Err(GraphError::RankDeficient(vars).into());
                    }
                    for id in owners {
                        info!("retiring unconstrained track {id}");
                        self.remove_track(id)?;
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn export_snapshot(&mut self, t: f64) -> Result<(), TrackerError> {
        let mut tracks = Vec::with_capacity(self.tracks.len());
        for track in self.tracks.values() {
            let s = track.latest();
            let pose = *self.graph.value(s.pose).and_then(|v| v.as_pose()).expect("pose var");
            let pose_cov = self.graph.marginal_covariance(s.pose)?;
            let (twist, twist_cov) = match s.twist {
                Some(x) => (
                    self.graph.value(x).and_then(|v| v.as_twist()).copied(),
                    Some(self.graph.marginal_covariance(x)?),
                ),
                None => (None, None),
            };
            tracks.push(TrackEstimate {
                id: track.id,
                label: track.label.clone(),
                radius: track.radius,
                motion: track.motion,
                timestamp: s.timestamp,
                pose,
                pose_cov,
                twist,
                twist_cov,
                last_detection: track.last_detection,
                detections: track.detections,
            });
        }
        self.snapshot = Arc::new(Snapshot {
            timestamp: t,
            tracks,
            gates: self.config.gates,
            noise: self.config.motion_noise,
        });
        Ok(())
    }
}
