use nalgebra::Vector3;
use posetrack::eval::*;
use posetrack::lie::{exp_so3, Pose};
use posetrack::tracker::Prediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn models() -> BTreeMap<String, ObjectModel> {
    let m = ObjectModel::cuboid("box", Vector3::new(0.05, 0.03, 0.02), vec![Pose::identity()]).unwrap();
    BTreeMap::from([("box".to_string(), m)])
}

fn camera() -> Pose {
    // looking down +z of the world from 0.6 m away
    Pose::from_translation(Vector3::new(0.0, 0.0, -0.6))
}

fn object(x: f64) -> Pose {
    Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(x, 0.0, 0.0))
}

fn truth_frame(t: f64, visible: bool) -> TruthFrame {
    TruthFrame {
        timestamp: t,
        camera: camera(),
        objects: vec![TruthObject {
            label: "box".into(),
            instance: 0,
            pose: object(0.0),
            visible,
            n_px: 1000,
            outcome: if visible { DetectionOutcome::Detected } else { DetectionOutcome::Occluded },
        }],
    }
}

fn prediction(t: f64, track: u64, pose: Pose) -> Prediction {
    Prediction {
        track,
        label: "box".into(),
        pose,
        volume_t: 0.0,
        volume_r: 0.0,
        timestamp: t,
    }
}

fn batch(t: f64, predictions: Vec<Prediction>) -> PredictionBatch {
    PredictionBatch {
        timestamp: t,
        predictions,
        solve: None,
    }
}

#[test]
fn three_frame_fixture_with_one_miss_and_one_outlier() {
    let truth: Vec<TruthFrame> = (0..3).map(|k| truth_frame(k as f64, true)).collect();
    let preds = vec![
        batch(0.0, vec![prediction(0.0, 1, object(0.0))]),
        // correct estimate plus a spurious one 0.3 m away
        batch(1.0, vec![prediction(1.0, 1, object(0.0)), prediction(1.0, 2, object(0.3))]),
        // missed
        batch(2.0, vec![]),
    ];
    let r = precision_recall(&preds, &truth, &models(), &EvalConfig::default()).unwrap();
    assert_eq!(r.visible_objects, 3);
    assert_eq!(r.scored_predictions, 3);
    for c in [&r.mssd, &r.mspd] {
        assert!(c.recall.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-15));
        assert!(c.precision.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-15));
    }
    assert!((r.average_recall - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.average_precision - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_predictions() {
    let truth: Vec<TruthFrame> = (0..4).map(|k| truth_frame(k as f64, true)).collect();
    let perfect: Vec<_> = (0..4).map(|k| batch(k as f64, vec![prediction(k as f64, 0, object(0.0))])).collect();
    let r = precision_recall(&perfect, &truth, &models(), &EvalConfig::default()).unwrap();
    assert_eq!((r.average_recall, r.average_precision), (1.0, 1.0));

    let empty: Vec<_> = (0..4).map(|k| batch(k as f64, vec![])).collect();
    let r = precision_recall(&empty, &truth, &models(), &EvalConfig::default()).unwrap();
    assert_eq!((r.average_recall, r.average_precision), (0.0, 1.0));
}

#[test]
fn matches_to_invisible_objects_are_ignored() {
    let truth = vec![truth_frame(0.0, false), truth_frame(1.0, true)];
    let preds = vec![
        batch(0.0, vec![prediction(0.0, 0, object(0.0))]),
        batch(1.0, vec![prediction(1.0, 0, object(0.0))]),
    ];
    let r = precision_recall(&preds, &truth, &models(), &EvalConfig::default()).unwrap();
    assert_eq!(r.visible_objects, 1);
    assert_eq!(r.scored_predictions, 1);
    assert_eq!(r.ignored_predictions, 1);
    assert_eq!((r.average_recall, r.average_precision), (1.0, 1.0));
}

#[test]
fn stream_errors() {
    let truth = vec![truth_frame(0.0, true)];
    let m = models();
    let c = EvalConfig::default();
    assert!(matches!(precision_recall(&[], &truth, &m, &c), Err(EvalError::LengthMismatch { .. })));
    assert!(matches!(
        precision_recall(&[batch(0.5, vec![])], &truth, &m, &c),
        Err(EvalError::Misaligned { index: 0, .. })
    ));
    assert!(matches!(precision_recall(&[], &[], &m, &c), Err(EvalError::EmptyTruth)));
    let mut p = prediction(0.0, 0, object(0.0));
    p.label = "mug".into();
    assert!(matches!(
        precision_recall(&[batch(0.0, vec![p])], &truth, &m, &c),
        Err(EvalError::MissingModel(_))
    ));
}

#[test]
fn prediction_behind_camera_is_incorrect_for_mspd() {
    let truth = vec![truth_frame(0.0, true)];
    let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
    let r = precision_recall(&[batch(0.0, vec![prediction(0.0, 0, behind)])], &truth, &models(), &EvalConfig::default()).unwrap();
    assert_eq!(r.matches[0].mspd, None);
    assert!(r.mspd.recall.iter().all(|v| *v == 0.0));
}

#[test]
fn mssd_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sym = ObjectModel::cuboid("box", Vector3::new(0.05, 0.03, 0.02), box_symmetries()).unwrap();
    let plain = &models()["box"];
    for _ in 0..100 {
        let truth = Pose::new(
            exp_so3(&Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))),
            Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5)),
        );
        let est = truth.compose(&Pose::new(
            exp_so3(&Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3))),
            Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
        ));
        let base = mssd(&est, &truth, &sym);
        for s in &sym.symmetries {
            assert!((mssd(&est, &truth.compose(s), &sym) - base).abs() < 1e-12);
            assert!(mssd(&truth.compose(s), &truth, &sym) < 1e-12);
        }
        assert!(mssd(&est, &truth, plain) >= base - 1e-15);

        let d = Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
        let shifted = Pose::new(truth.rotation, truth.translation + d);
        assert!((mssd(&shifted, &truth, plain) - d.norm()).abs() < 1e-12);
    }
}

#[test]
fn mspd_matches_pinhole_oracle() {
    let model = &models()["box"];
    let intr = Intrinsics::default();
    let truth = Pose::new(exp_so3(&Vector3::new(0.2, -0.1, 0.4)), Vector3::new(0.02, -0.01, 0.7));
    let d = 0.01;
    let est = Pose::new(truth.rotation, truth.translation + Vector3::new(d, 0.0, 0.0));
    // each point moves by fx * d / depth pixels; the largest shift wins
    let want = model
        .points
        .iter()
        .map(|p| intr.fx * d / truth.transform_point(p).z)
        .fold(0.0, f64::max);
    let got = mspd(&est, &truth, model, &intr).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((got - intr.fx * d / 0.7).abs() / got < 0.1);

    let double = Intrinsics {
        fx: 2.0 * intr.fx,
        fy: 2.0 * intr.fy,
        ..intr
    };
    let got2 = mspd(&est, &truth, model, &double).unwrap();
    assert!((got2 - 2.0 * got).abs() < 1e-9);
    assert_eq!(mspd(&truth, &truth, model, &intr).unwrap(), 0.0);
}

#[test]
fn loosening_thresholds_never_lowers_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let truth: Vec<TruthFrame> = (0..50).map(|k| truth_frame(k as f64, rng.gen_bool(0.9))).collect();
    let preds: Vec<_> = (0..50)
        .map(|k| {
            let noise = Vector3::from_fn(|_, _| rng.gen_range(-0.03..0.03));
            let p = Pose::new(object(0.0).rotation, noise);
            batch(k as f64, vec![prediction(k as f64, 0, p)])
        })
        .collect();
    let r = precision_recall(&preds, &truth, &models(), &EvalConfig::default()).unwrap();
    for c in [&r.mssd, &r.mspd] {
        assert!(c.recall.windows(2).all(|w| w[1] >= w[0]));
        assert!(c.thresholds.windows(2).all(|w| w[1] > w[0]));
    }
    assert!(r.mssd.recall[0] < r.mssd.recall[9]);
}
