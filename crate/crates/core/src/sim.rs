//! Synthetic scenes: ground-truth trajectories plus corrupted detections.

use crate::eval::{DetectionOutcome, Intrinsics, ObjectModel, TruthFrame, TruthObject};
use crate::factors::{measurement_covariance_sqrt, ray_frame, CovModelParams, FactorError};
use crate::lie::{exp_se3, exp_so3, log_se3, Pose, Tangent6};
use crate::tracker::{Detection, Frame};
use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("object `{label}` at t={timestamp} passes through the camera origin")]
    DegenerateGeometry { label: String, timestamp: f64 },
    #[error(transparent)]
    Factor(#[from] FactorError),
}

/// Constant body twist held for `duration` seconds from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
    pub twist: Tangent6,
}

/// Piecewise constant-twist motion. Between and after segments the pose is
/// held, so the trajectory is continuous by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub initial: Pose,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl Trajectory {
    pub fn fixed(pose: Pose) -> Self {
        Self {
            initial: pose,
            segments: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut end = f64::NEG_INFINITY;
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.start.is_finite() && s.duration >= 0.0 && s.duration.is_finite()) {
                return Err(SimError::Invalid(format!("segments[{i}]: bad start or duration")));
            }
            if s.start < end - 1e-12 {
                return Err(SimError::Invalid(format!("segments[{i}] overlaps its predecessor")));
            }
            if !s.twist.to_vector().iter().all(|v| v.is_finite()) {
                return Err(SimError::Invalid(format!("segments[{i}]: non-finite twist")));
            }
            end = s.start + s.duration;
        }
        Ok(())
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        let mut pose = self.initial;
        for s in &self.segments {
            if t <= s.start {
                break;
            }
            let tau = (t - s.start).min(s.duration);
            pose = pose.compose(&exp_se3(&s.twist.scale(tau)));
        }
        pose
    }

    /// Body twist active at `t` (zero outside segments).
    pub fn twist_at(&self, t: f64) -> Tangent6 {
        self.segments
            .iter()
            .find(|s| t >= s.start && t < s.start + s.duration)
            .map_or_else(Tangent6::zero, |s| s.twist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub label: String,
    /// Half extents of the box, meters.
    pub half_extents: [f64; 3],
    pub trajectory: Trajectory,
    /// Transforms the detector confuses the object with; flip outliers draw
    /// from the non-identity members.
    #[serde(default)]
    pub symmetries: Vec<Pose>,
    /// Whether evaluation treats `symmetries` as true symmetries.
    #[serde(default)]
    pub eval_symmetric: bool,
}

impl SceneObject {
    pub fn radius(&self) -> f64 {
        Vector3::from(self.half_extents).norm()
    }

    pub fn model(&self) -> ObjectModel {
        let mut syms = vec![Pose::identity()];
        if self.eval_symmetric {
            syms.extend(self.symmetries.iter().copied().filter(|s| !is_identity(s)));
        }
        ObjectModel::cuboid(self.label.clone(), Vector3::from(self.half_extents), syms)
            .expect("box models are valid")
    }
}

fn is_identity(p: &Pose) -> bool {
    p.translation.norm() < 1e-12 && crate::lie::rotation_angle(&p.rotation) < 1e-12
}

/// Image region `[u0, v0, u1, v1]` hidden during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: f64,
    pub end: f64,
    #[serde(default = "full_image")]
    pub region: [f64; 4],
}

fn full_image() -> [f64; 4] {
    // finite so that scenarios survive a JSON round trip
    [f64::MIN, f64::MIN, f64::MAX, f64::MAX]
}

impl Occlusion {
    fn hides(&self, t: f64, px: &nalgebra::Vector2<f64>) -> bool {
        t >= self.start
            && t < self.end
            && px.x >= self.region[0]
            && px.y >= self.region[1]
            && px.x <= self.region[2]
            && px.y <= self.region[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierMode {
    #[default]
    SymmetryFlip,
    Uniform,
    /// Flip or uniform with equal probability.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub dropout: f64,
    pub outlier: f64,
    pub outlier_mode: OutlierMode,
    /// Generative measurement noise.
    pub noise: CovModelParams,
    /// `n_px = round(pixel_scale * (radius / distance)^2)`, at least 1.
    pub pixel_scale: f64,
    /// Workspace box `[min, max]` (world frame) for uniform outliers.
    pub workspace: [[f64; 3]; 2],
    /// Camera measurement noise, meters and radians.
    pub camera_sigma_t: f64,
    pub camera_sigma_r: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            outlier: 0.1,
            outlier_mode: OutlierMode::SymmetryFlip,
            noise: CovModelParams::default(),
            pixel_scale: 4e5,
            workspace: [[-0.4, -0.4, 0.0], [0.4, 0.4, 0.3]],
            camera_sigma_t: 0.0,
            camera_sigma_r: 0.0,
        }
    }
}

impl CorruptionConfig {
    pub fn clean() -> Self {
        Self {
            dropout: 0.0,
            outlier: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [("dropout", self.dropout), ("outlier", self.outlier)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Invalid(format!("corruption.{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.pixel_scale > 0.0) {
            return Err(SimError::Invalid("corruption.pixel_scale must be positive".into()));
        }
        if !(self.camera_sigma_t >= 0.0 && self.camera_sigma_r >= 0.0) {
            return Err(SimError::Invalid("corruption camera sigmas must be non-negative".into()));
        }
        self.noise.validate()?;
        Ok(())
    }

    /// Visible pixel count proxy for a sphere of `radius` at `distance`.
    pub fn n_px(&self, radius: f64, distance: f64) -> u32 {
        (self.pixel_scale * (radius / distance).powi(2)).round().clamp(1.0, u32::MAX as f64) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub camera: Trajectory,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
    #[serde(default)]
    pub intrinsics: Intrinsics,
}

/// Detection error of one clean detection, in the ray frame for translation
/// and as rotation-vector components for rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub n_px: u32,
    pub xy: [f64; 2],
    pub z: f64,
    pub rot: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub frames: Vec<Frame>,
    pub truth: Vec<TruthFrame>,
    pub errors: Vec<ErrorRecord>,
    pub models: Vec<ObjectModel>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(SimError::Invalid(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(SimError::Invalid(format!("duration must be non-negative, got {}", self.duration)));
        }
        self.corruption.validate()?;
        self.camera.validate()?;
        for (i, o) in self.objects.iter().enumerate() {
            if o.label.is_empty() {
                return Err(SimError::Invalid(format!("objects[{i}].label is empty")));
            }
            if !o.half_extents.iter().all(|h| *h > 0.0) {
                return Err(SimError::Invalid(format!("objects[{i}].half_extents must be positive")));
            }
            o.trajectory.validate()?;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate + 1e-9).floor() as usize
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        k as f64 / self.frame_rate
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian6(rng: &mut ChaCha8Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| normal(rng))
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> crate::lie::Rotation {
    let q = nalgebra::Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    nalgebra::UnitQuaternion::from_quaternion(q)
}

/// Runs the scenario. The output is a pure function of `scenario`.
pub fn generate(scenario: &Scenario) -> Result<Simulation, SimError> {
    scenario.validate()?;
    let c = &scenario.corruption;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let n = scenario.frame_count();
    let mut frames = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut errors = Vec::new();
    for k in 0..n {
        let t = scenario.timestamp(k);
        let cam = scenario.camera.pose_at(t);
        let cam_noise = Tangent6::new(
            Vector3::from_fn(|_, _| c.camera_sigma_t * normal(&mut rng)),
            Vector3::from_fn(|_, _| c.camera_sigma_r * normal(&mut rng)),
        );
        let cam_meas = cam.retract(&cam_noise);
        let cam_inv = cam.inverse();
        let mut detections = Vec::new();
        let mut objects = Vec::with_capacity(scenario.objects.len());
        for (i, o) in scenario.objects.iter().enumerate() {
            let pose = o.trajectory.pose_at(t);
            let t_co = cam_inv.compose(&pose);
            let distance = t_co.translation.norm();
            if distance < 1e-6 {
                return Err(SimError::DegenerateGeometry {
                    label: o.label.clone(),
                    timestamp: t,
                });
            }
            let n_px = c.n_px(o.radius(), distance);
            let pixel = scenario.intrinsics.project(&t_co.translation);
            let in_view = pixel.is_some_and(|px| scenario.intrinsics.in_image(&px));
            let occluded = pixel.is_some_and(|px| scenario.occlusions.iter().any(|oc| oc.hides(t, &px)));
            let visible = in_view && !occluded;

            // draw every variate regardless of the branch taken so that one
            // object's fate does not shift the others' random streams
            let drop_u: f64 = rng.gen();
            let outlier_u: f64 = rng.gen();
            let mode_u: f64 = rng.gen();
            let pick_u: f64 = rng.gen();
            let z = gaussian6(&mut rng);
            let uniform_t = Vector3::from_fn(|j, _| {
                let u: f64 = rng.gen();
                c.workspace[0][j] + u * (c.workspace[1][j] - c.workspace[0][j])
            });
            let uniform_r = uniform_rotation(&mut rng);

            let sqrt = measurement_covariance_sqrt(&t_co, n_px as f64, &c.noise)?;
            let eps = Tangent6::from_vector(&(sqrt * z));
            let outcome = if !visible {
                DetectionOutcome::Occluded
            } else if drop_u < c.dropout {
                DetectionOutcome::Dropped
            } else if outlier_u < c.outlier {
                DetectionOutcome::Outlier
            } else {
                DetectionOutcome::Detected
            };
            let measured = match outcome {
                DetectionOutcome::Detected => {
                    let ray = ray_frame(&t_co.translation)?;
                    let e = ray.transpose() * (t_co.rotation_matrix() * eps.rho);
                    errors.push(ErrorRecord {
                        n_px,
                        xy: [e.x, e.y],
                        z: e.z,
                        rot: [eps.theta.x, eps.theta.y, eps.theta.z],
                    });
                    Some(t_co.retract(&eps))
                }
                DetectionOutcome::Outlier => {
                    let flips: Vec<&Pose> = o.symmetries.iter().filter(|s| !is_identity(s)).collect();
                    let flip = match c.outlier_mode {
                        OutlierMode::SymmetryFlip => !flips.is_empty(),
                        OutlierMode::Uniform => false,
                        OutlierMode::Mixed => !flips.is_empty() && mode_u < 0.5,
                    };
                    if flip {
                        let idx = ((pick_u * flips.len() as f64) as usize).min(flips.len() - 1);
                        Some(t_co.compose(flips[idx]).retract(&eps))
                    } else {
                        Some(cam_inv.compose(&Pose::new(uniform_r, uniform_t)))
                    }
                }
                _ => None,
            };
            if let Some(p) = measured {
                detections.push(Detection {
                    label: o.label.clone(),
                    pose: p,
                    n_px,
                    timestamp: t,
                });
            }
            objects.push(TruthObject {
                label: o.label.clone(),
                instance: i,
                pose,
                visible,
                n_px,
                outcome,
            });
        }
        frames.push(Frame {
            timestamp: t,
            camera: cam_meas,
            detections,
        });
        truth.push(TruthFrame {
            timestamp: t,
            camera: cam,
            objects,
        });
    }
    let models = scenario.objects.iter().map(|o| o.model()).collect();
    Ok(Simulation {
        frames,
        truth,
        errors,
        models,
    })
}

/// Camera pose at `eye` looking at `target` with image y pointing down
/// along world -z.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let down = -Vector3::z();
    let x = z.cross(&down);
    let x = if x.norm() < 1e-9 { Vector3::x() } else { x.normalize() };
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    let r = nalgebra::Rotation3::from_matrix_unchecked(m);
    Pose::new(nalgebra::UnitQuaternion::from_rotation_matrix(&r), eye)
}

/// Body twist that rotates a camera about the world vertical axis through
/// `center` at `omega` rad/s.
pub fn orbit_twist(camera: &Pose, center: Vector3<f64>, omega: f64) -> Tangent6 {
    let r_wc = camera.rotation_matrix();
    let w = r_wc.transpose() * (Vector3::z() * omega);
    let c = camera.inverse().transform_point(&center);
    Tangent6::new(-w.cross(&c), w)
}

fn box_symmetries() -> Vec<Pose> {
    crate::eval::box_symmetries()
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.03..0.06), rng.gen_range(0.02..0.045), rng.gen_range(0.015..0.035)]
}

fn check_count(n_objects: usize) {
    assert!((1..=20).contains(&n_objects), "n_objects must be in [1, 20]");
}

/// Static objects on a desk, camera orbiting the scene at 0.2 rad/s for
/// 300 frames at 30 Hz.
pub fn make_static_scene(n_objects: usize, seed: u64) -> Scenario {
    check_count(n_objects);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4154);
    let mut placed: Vec<Vector3<f64>> = Vec::new();
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let half = random_box(&mut rng);
        let mut p;
        let mut tries = 0;
        loop {
            let a = rng.gen_range(0.0..2.0 * PI);
            let r = 0.3 * rng.gen::<f64>().sqrt();
            p = Vector3::new(r * a.cos(), r * a.sin(), half[2]);
            tries += 1;
            if tries > 200 || placed.iter().all(|q| (q - p).norm() > 0.13) {
                break;
            }
        }
        placed.push(p);
        let yaw = rng.gen_range(-PI..PI);
        objects.push(SceneObject {
            label: format!("obj_{i:02}"),
            half_extents: half,
            trajectory: Trajectory::fixed(Pose::new(exp_so3(&(Vector3::z() * yaw)), p)),
            symmetries: box_symmetries(),
            eval_symmetric: false,
        });
    }
    let start_angle = rng.gen_range(0.0..2.0 * PI);
    let eye = Vector3::new(0.75 * start_angle.cos(), 0.75 * start_angle.sin(), 0.45);
    let camera0 = look_at(eye, Vector3::zeros());
    let duration = 10.0;
    let camera = Trajectory {
        initial: camera0,
        segments: vec![Segment {
            start: 0.0,
            duration,
            twist: orbit_twist(&camera0, Vector3::zeros(), 0.2),
        }],
    };
    Scenario {
        duration,
        frame_rate: 30.0,
        seed,
        objects,
        camera,
        corruption: CorruptionConfig::default(),
        occlusions: Vec::new(),
        intrinsics: Intrinsics::default(),
    }
}

/// Maximum linear and angular speed of dynamic-scene objects.
pub const DYNAMIC_MAX_SPEED: f64 = 0.3;
pub const DYNAMIC_MAX_ANGULAR_SPEED: f64 = 1.0;

/// Objects moving on random piecewise constant-twist paths kept inside the
/// workspace, a slowly orbiting camera, and a 1 s occluder over the image
/// center halfway through.
pub fn make_dynamic_scene(n_objects: usize, seed: u64) -> Scenario {
    check_count(n_objects);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4459_4e41);
    let duration = 10.0;
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let half = random_box(&mut rng);
        let start = Vector3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(0.05..0.25));
        let mut traj = Trajectory::fixed(Pose::new(uniform_rotation(&mut rng), start));
        let mut t = 0.0;
        while t < duration {
            let len: f64 = rng.gen_range(1.0..2.5_f64).min(duration - t);
            let pose = traj.pose_at(t);
            let speed = rng.gen_range(0.05..DYNAMIC_MAX_SPEED);
            let center = Vector3::new(0.0, 0.0, 0.15);
            let wander = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
            // steer back towards the middle of the workspace
            let home = (center - pose.translation) * 4.0;
            let dir = (wander + home).try_normalize(1e-9).unwrap_or_else(Vector3::x);
            let v_world = dir * speed;
            let v_body = pose.rotation.inverse() * v_world;
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                .try_normalize(1e-9)
                .unwrap_or_else(Vector3::z);
            let w = axis * rng.gen_range(0.0..0.5 * DYNAMIC_MAX_ANGULAR_SPEED);
            traj.segments.push(Segment {
                start: t,
                duration: len,
                twist: Tangent6::new(v_body, w),
            });
            t += len;
        }
        objects.push(SceneObject {
            label: format!("obj_{i:02}"),
            half_extents: half,
            trajectory: traj,
            symmetries: box_symmetries(),
            eval_symmetric: false,
        });
    }
    let start_angle = rng.gen_range(0.0..2.0 * PI);
    let eye = Vector3::new(0.9 * start_angle.cos(), 0.9 * start_angle.sin(), 0.55);
    let camera0 = look_at(eye, Vector3::new(0.0, 0.0, 0.1));
    let camera = Trajectory {
        initial: camera0,
        segments: vec![Segment {
            start: 0.0,
            duration,
            twist: orbit_twist(&camera0, Vector3::new(0.0, 0.0, 0.1), 0.1),
        }],
    };
    Scenario {
        duration,
        frame_rate: 30.0,
        seed,
        objects,
        camera,
        corruption: CorruptionConfig::default(),
        occlusions: vec![Occlusion {
            start: 4.5,
            end: 5.5,
            region: [160.0, 120.0, 480.0, 360.0],
        }],
        intrinsics: Intrinsics::default(),
    }
}

/// Detection log-error `log(T_true^-1 T_meas)` of a camera-frame measurement.
pub fn detection_error(truth_co: &Pose, measured_co: &Pose) -> Tangent6 {
    log_se3(&truth_co.between(measured_co))
}
