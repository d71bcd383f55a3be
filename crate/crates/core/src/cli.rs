//! File-based pipeline stages behind the `posetrack` binary.

use crate::eval::{precision_recall, EvalConfig, MetricReport, ObjectModel, PredictionBatch, TruthFrame};
use crate::factors::{fit_sigma_model, CovModelParams, SigmaFit, SigmaModel, DEFAULT_FIT_BINS};
use crate::graph::WindowMode;
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::sim::{generate, make_dynamic_scene, make_static_scene, ErrorRecord, Occlusion, Scenario};
use crate::tracker::{Frame, GatePreset, MotionModel, Prediction, Snapshot, Tracker, TrackerConfig};
use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Preset selector in a run config. `custom` keeps the gates as written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    RecallOriented,
    PrecisionOriented,
    #[default]
    Custom,
}

impl std::str::FromStr for PresetName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "custom" => Ok(PresetName::Custom),
            other => other.parse::<GatePreset>().map(|p| match p {
                GatePreset::RecallOriented => PresetName::RecallOriented,
                GatePreset::PrecisionOriented => PresetName::PrecisionOriented,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub scenario: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything one pipeline run needs; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: RunPaths,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
    pub preset: PresetName,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p).with_context(|| format!("loading run config {}", p.display())),
            None => Ok(Self::default()),
        }
    }

    /// Tracker config with the preset's prediction gates applied.
    pub fn effective_tracker(&self) -> TrackerConfig {
        let mut cfg = self.tracker.clone();
        let preset = match self.preset {
            PresetName::RecallOriented => Some(GatePreset::RecallOriented),
            PresetName::PrecisionOriented => Some(GatePreset::PrecisionOriented),
            PresetName::Custom => None,
        };
        if let Some(p) = preset {
            let g = p.gates();
            cfg.gates.tau_pred_t = g.tau_pred_t;
            cfg.gates.tau_pred_r = g.tau_pred_r;
        }
        cfg
    }
}

fn frame_error(index: usize, e: impl std::fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("frame {index}: {e}")
}

/// Runs the tracker over `frames`, returning the snapshot after each one.
pub fn track_snapshots(config: &TrackerConfig, frames: &[Frame]) -> Result<Vec<Arc<Snapshot>>> {
    let mut tracker = Tracker::new(config.clone())?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        tracker.ingest(f).map_err(|e| frame_error(i, e))?;
        out.push(tracker.snapshot());
    }
    Ok(out)
}

/// Runs the tracker and predicts at every frame timestamp.
pub fn run_tracker(config: &TrackerConfig, frames: &[Frame]) -> Result<Vec<PredictionBatch>> {
    let mut tracker = Tracker::new(config.clone())?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let start = Instant::now();
        let report = tracker.ingest(f).map_err(|e| frame_error(i, e))?;
        let predictions = tracker.predict(f.timestamp);
        info!(
            "frame {i} t={:.4}: {} detections, {} tracks, {} variables, {} iterations, {} predictions, {:.2} ms",
            f.timestamp,
            f.detections.len(),
            tracker.tracks().len(),
            tracker.graph().num_variables(),
            report.solve.iterations,
            predictions.len(),
            start.elapsed().as_secs_f64() * 1e3
        );
        out.push(PredictionBatch {
            timestamp: f.timestamp,
            predictions,
            solve: Some(report.solve),
        });
    }
    Ok(out)
}

/// Raw detections mapped to the world frame through the measured camera.
pub fn baseline_predictions(frames: &[Frame]) -> Vec<PredictionBatch> {
    frames
        .iter()
        .map(|f| PredictionBatch {
            timestamp: f.timestamp,
            predictions: f
                .detections
                .iter()
                .enumerate()
                .map(|(i, d)| Prediction {
                    track: i as u64,
                    label: d.label.clone(),
                    pose: f.camera.compose(&d.pose),
                    volume_t: 0.0,
                    volume_r: 0.0,
                    timestamp: f.timestamp,
                })
                .collect(),
            solve: None,
        })
        .collect()
}

pub fn models_by_label(models: Vec<ObjectModel>) -> Result<BTreeMap<String, ObjectModel>> {
    let mut out = BTreeMap::new();
    for m in models {
        m.validate()?;
        let label = m.label.clone();
        ensure!(out.insert(label.clone(), m).is_none(), "duplicate model for label `{label}`");
    }
    Ok(out)
}

/// Bounding-sphere radius per label (half the model diameter).
pub fn radii_from_models(models: &BTreeMap<String, ObjectModel>) -> BTreeMap<String, f64> {
    models.iter().map(|(k, m)| (k.clone(), 0.5 * m.diameter)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau_pred_t: Vec<f64>,
    pub tau_pred_r: Vec<f64>,
    /// Multipliers applied to every motion-noise standard deviation.
    pub motion_noise_scale: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            tau_pred_t: vec![1e-8, 3e-8, 1e-7, 3e-7, 1e-6, 3e-6, 1e-5, 1e-4],
            tau_pred_r: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            motion_noise_scale: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub motion_noise_scale: f64,
    pub tau_pred_t: f64,
    pub tau_pred_r: f64,
    pub recall: f64,
    pub precision: f64,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub baseline_recall: f64,
    pub baseline_precision: f64,
    /// Index into `rows`.
    pub recall_oriented: usize,
    pub precision_oriented: usize,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("motion_noise_scale,tau_pred_t,tau_pred_r,average_recall,average_precision,pareto\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{},{}",
                r.motion_noise_scale, r.tau_pred_t, r.tau_pred_r, r.recall, r.precision, r.pareto as u8
            );
        }
        out
    }

    /// Pareto-optimal rows sorted by increasing recall.
    pub fn front(&self) -> Vec<&SweepRow> {
        let mut f: Vec<&SweepRow> = self.rows.iter().filter(|r| r.pareto).collect();
        f.sort_by(|a, b| a.recall.total_cmp(&b.recall).then(b.precision.total_cmp(&a.precision)));
        f
    }
}

fn mark_pareto(rows: &mut [SweepRow]) {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.recall, r.precision)).collect();
    for (i, r) in rows.iter_mut().enumerate() {
        let (ri, pi) = pts[i];
        r.pareto = !pts.iter().enumerate().any(|(j, &(rj, pj))| {
            j != i && rj >= ri && pj >= pi && (rj > ri || pj > pi || j < i)
        });
    }
}

/// Index maximizing `primary` among rows whose `secondary` reaches
/// `floor`; falls back to all rows when none does. Ties go to the better
/// secondary, then the earlier row.
fn pick(rows: &[SweepRow], primary: fn(&SweepRow) -> f64, secondary: fn(&SweepRow) -> f64, floor: f64) -> usize {
    let best = |feasible: &dyn Fn(&SweepRow) -> bool| {
        rows.iter()
            .enumerate()
            .filter(|(_, r)| feasible(r))
            .fold(None::<usize>, |acc, (i, r)| match acc {
                Some(j) => {
                    let b = &rows[j];
                    let better = primary(r) > primary(b) || (primary(r) == primary(b) && secondary(r) > secondary(b));
                    Some(if better { i } else { j })
                }
                None => Some(i),
            })
    };
    best(&|r| secondary(r) >= floor).or_else(|| best(&|_| true)).expect("non-empty grid")
}

/// Tracks once per motion-noise scale (in parallel), scores every gate pair
/// of the grid, marks the Pareto front and selects the two presets.
pub fn sweep(
    run: &RunConfig,
    frames: &[Frame],
    truth: &[TruthFrame],
    models: &BTreeMap<String, ObjectModel>,
    grid: &SweepGrid,
) -> Result<SweepResult> {
    ensure!(
        !grid.tau_pred_t.is_empty() && !grid.tau_pred_r.is_empty() && !grid.motion_noise_scale.is_empty(),
        "sweep grid axes must be non-empty"
    );
    ensure!(frames.len() == truth.len(), "frames and ground truth have different lengths");
    let base = precision_recall(&baseline_predictions(frames), truth, models, &run.eval)?;
    let tracker = run.effective_tracker();
    let per_scale: Vec<Result<Vec<SweepRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .motion_noise_scale
            .iter()
            .map(|&scale| {
                let mut cfg = tracker.clone();
                cfg.motion_noise = cfg.motion_noise.scaled(scale);
                s.spawn(move || -> Result<Vec<SweepRow>> {
                    let snaps = track_snapshots(&cfg, frames)?;
                    let mut rows = Vec::new();
                    for &tt in &grid.tau_pred_t {
                        for &tr in &grid.tau_pred_r {
                            let batches: Vec<PredictionBatch> = snaps
                                .iter()
                                .zip(frames)
                                .map(|(snap, f)| {
                                    let mut snap = Snapshot::clone(snap);
                                    snap.gates.tau_pred_t = tt;
                                    snap.gates.tau_pred_r = tr;
                                    PredictionBatch {
                                        timestamp: f.timestamp,
                                        predictions: snap.predict(f.timestamp),
                                        solve: None,
                                    }
                                })
                                .collect();
                            let rep = precision_recall(&batches, truth, models, &run.eval)?;
                            rows.push(SweepRow {
                                motion_noise_scale: scale,
                                tau_pred_t: tt,
                                tau_pred_r: tr,
                                recall: rep.average_recall,
                                precision: rep.average_precision,
                                pareto: false,
                            });
                        }
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in per_scale {
        rows.extend(r?);
    }
    mark_pareto(&mut rows);
    let recall_oriented = pick(&rows, |r| r.recall, |r| r.precision, base.average_precision);
    let precision_oriented = pick(&rows, |r| r.precision, |r| r.recall, base.average_recall);
    Ok(SweepResult {
        rows,
        baseline_recall: base.average_recall,
        baseline_precision: base.average_precision,
        recall_oriented,
        precision_oriented,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFit {
    pub params: CovModelParams,
    pub xy: SigmaFit,
    pub z: SigmaFit,
    pub rot: SigmaFit,
    pub samples: usize,
    pub note: String,
}

/// Fits the three sigma models from per-detection errors. The two lateral
/// components share the `xy` model and the three rotation components share
/// the `rot` model.
pub fn fit_covariance(errors: &[ErrorRecord], bins: usize) -> Result<CovarianceFit> {
    ensure!(!errors.is_empty(), "no error records to fit");
    let xy: Vec<(f64, f64)> = errors
        .iter()
        .flat_map(|e| e.xy.iter().map(move |v| (e.n_px as f64, *v)))
        .collect();
    let z: Vec<(f64, f64)> = errors.iter().map(|e| (e.n_px as f64, e.z)).collect();
    let rot: Vec<(f64, f64)> = errors
        .iter()
        .flat_map(|e| e.rot.iter().map(move |v| (e.n_px as f64, *v)))
        .collect();
    let fit = |s: &[(f64, f64)], name: &str| -> Result<SigmaFit> {
        let f = fit_sigma_model(s, bins).with_context(|| format!("fitting {name}"))?;
        if f.b < 0.0 {
            // errors grow with visibility: keep the pooled spread instead
            return Ok(fit_sigma_model(s, 1)?);
        }
        Ok(f)
    };
    let (fxy, fz, frot) = (fit(&xy, "xy")?, fit(&z, "z")?, fit(&rot, "rot")?);
    let fallback: Vec<&str> = [("xy", &fxy), ("z", &fz), ("rot", &frot)]
        .iter()
        .filter(|(_, f)| f.fallback)
        .map(|(n, _)| *n)
        .collect();
    let note = if fallback.is_empty() {
        "all components fitted".to_string()
    } else {
        format!(
            "b = 0 fallback (a = pooled RMS) for: {}; pixel counts did not span two bins",
            fallback.join(", ")
        )
    };
    Ok(CovarianceFit {
        params: CovModelParams {
            xy: SigmaModel::new(fxy.a, fxy.b),
            z: SigmaModel::new(fz.a, fz.b),
            rot: SigmaModel::new(frot.a, frot.b),
            ..CovModelParams::default()
        },
        xy: fxy,
        z: fz,
        rot: frot,
        samples: errors.len(),
        note,
    })
}

fn require<'a>(flag: Option<&'a Path>, config: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    flag.or(config.as_deref())
        .with_context(|| format!("missing {name} path (flag or paths.{name} in the run config)"))
}

pub fn cmd_simulate(scenario: &Path, out_dir: &Path) -> Result<()> {
    let scenario: Scenario = read_json(scenario)?;
    let sim = generate(&scenario)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_jsonl(&out_dir.join("frames.jsonl"), &sim.frames)?;
    write_jsonl(&out_dir.join("truth.jsonl"), &sim.truth)?;
    write_jsonl(&out_dir.join("errors.jsonl"), &sim.errors)?;
    write_json(&out_dir.join("models.json"), &sim.models)?;
    info!("simulated {} frames into {}", sim.frames.len(), out_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Static,
    Dynamic,
}

pub fn cmd_scene(kind: SceneKind, objects: usize, seed: u64, occlusion: Option<(f64, f64)>, out: &Path) -> Result<()> {
    ensure!((1..=20).contains(&objects), "--objects must be in [1, 20], got {objects}");
    let mut s = match kind {
        SceneKind::Static => make_static_scene(objects, seed),
        SceneKind::Dynamic => make_dynamic_scene(objects, seed),
    };
    if let Some((start, end)) = occlusion {
        ensure!(end > start, "occlusion end must be after its start");
        s.occlusions.push(Occlusion {
            start,
            end,
            region: [f64::MIN, f64::MIN, f64::MAX, f64::MAX],
        });
    }
    write_json(out, &s)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrackOverrides {
    pub motion: Option<MotionModel>,
    pub window_mode: Option<WindowMode>,
    pub horizon: Option<f64>,
    pub preset: Option<PresetName>,
    pub models: Option<PathBuf>,
}

pub fn cmd_track(config: Option<&Path>, frames: Option<&Path>, out: Option<&Path>, o: &TrackOverrides) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(m) = o.motion {
        run.tracker.motion = m;
    }
    if let Some(w) = o.window_mode {
        run.tracker.window_mode = w;
    }
    if let Some(h) = o.horizon {
        run.tracker.gates.horizon = h;
    }
    if let Some(p) = o.preset {
        run.preset = p;
    }
    if let Some(m) = o.models.as_deref().or(run.paths.models.as_deref()) {
        let models = models_by_label(read_json(m)?)?;
        for (k, r) in radii_from_models(&models) {
            run.tracker.radii.entry(k).or_insert(r);
        }
    }
    let frames_path = require(frames, &run.paths.frames, "frames")?;
    let out_path = require(out, &run.paths.predictions, "predictions")?;
    let frames: Vec<Frame> = read_jsonl(frames_path)?;
    let batches = run_tracker(&run.effective_tracker(), &frames)?;
    write_jsonl(out_path, &batches)?;
    Ok(())
}

pub fn cmd_baseline(frames: &Path, out: &Path) -> Result<()> {
    let frames: Vec<Frame> = read_jsonl(frames)?;
    write_jsonl(out, &baseline_predictions(&frames))?;
    Ok(())
}

pub fn cmd_eval(
    config: Option<&Path>,
    predictions: Option<&Path>,
    truth: Option<&Path>,
    models: Option<&Path>,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> Result<MetricReport> {
    let run = RunConfig::load(config)?;
    let preds: Vec<PredictionBatch> = read_jsonl(require(predictions, &run.paths.predictions, "predictions")?)?;
    let truth: Vec<TruthFrame> = read_jsonl(require(truth, &run.paths.truth, "truth")?)?;
    let models = models_by_label(read_json(require(models, &run.paths.models, "models")?)?)?;
    let report = precision_recall(&preds, &truth, &models, &run.eval)?;
    write_json(require(out, &run.paths.report, "report")?, &report)?;
    if let Some(c) = csv {
        std::fs::write(c, report.curves_csv()).with_context(|| format!("writing {}", c.display()))?;
    }
    Ok(report)
}

pub fn cmd_sweep(
    config: Option<&Path>,
    frames: &Path,
    truth: &Path,
    models: &Path,
    grid: Option<&Path>,
    out: &Path,
    presets_out: Option<&Path>,
) -> Result<SweepResult> {
    let mut run = RunConfig::load(config)?;
    let grid: SweepGrid = match grid {
        Some(g) => read_json(g)?,
        None => SweepGrid::default(),
    };
    let frames: Vec<Frame> = read_jsonl(frames)?;
    let truth: Vec<TruthFrame> = read_jsonl(truth)?;
    let models = models_by_label(read_json(models)?)?;
    for (k, r) in radii_from_models(&models) {
        run.tracker.radii.entry(k).or_insert(r);
    }
    let result = sweep(&run, &frames, &truth, &models, &grid)?;
    std::fs::write(out, result.csv()).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = presets_out {
        write_json(p, &result)?;
    }
    Ok(result)
}

pub fn cmd_fitcov(errors: &Path, bins: Option<usize>, out: &Path) -> Result<CovarianceFit> {
    let records: Vec<ErrorRecord> = read_jsonl(errors)?;
    if records.is_empty() {
        bail!("{}: no error records", errors.display());
    }
    let fit = fit_covariance(&records, bins.unwrap_or(DEFAULT_FIT_BINS))?;
    write_json(out, &fit)?;
    Ok(fit)
}
