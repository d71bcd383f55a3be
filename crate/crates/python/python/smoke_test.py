"""Smoke test for the posetrack_py extension: poses, simulate, track, eval."""

import json
import math

import posetrack_py as pt


def check_pose():
    p = pt.Pose.exp([0.1, -0.2, 0.3, 0.4, 0.1, -0.2])
    back = p.log()
    assert max(abs(a - b) for a, b in zip(back, [0.1, -0.2, 0.3, 0.4, 0.1, -0.2])) < 1e-12
    ident = p.compose(p.inverse())
    assert max(abs(x) for x in ident.translation) < 1e-12
    q = pt.Pose.from_matrix(p.matrix())
    assert max(abs(a - b) for a, b in zip(q.translation, p.translation)) < 1e-12
    cov = pt.detection_covariance(pt.Pose([0.0, 0.0, 0.6]), 2000.0)
    assert len(cov) == 6 and all(cov[i][i] > 0 for i in range(6))


def check_pipeline():
    scene = json.loads(pt.make_scene("static", objects=2, seed=3))
    scene["duration"] = 2.0
    sim = pt.simulate(json.dumps(scene))
    frames = sim["frames"].splitlines()
    assert len(frames) == 60

    tracker = pt.Tracker(json.dumps({"motion": "const_pose"}))
    for line in frames:
        report = json.loads(tracker.ingest(line))
        assert report["solve"]["converged"] or report["solve"]["iterations"] > 0
    last_t = json.loads(frames[-1])["timestamp"]
    preds = json.loads(tracker.predict(last_t))
    assert 1 <= len(preds) <= tracker.num_tracks()

    ours = json.loads(pt.evaluate(pt.track(sim["frames"]), sim["truth"], sim["models"]))
    base = json.loads(pt.evaluate(pt.baseline(sim["frames"]), sim["truth"], sim["models"]))
    print(f"recall tracker {ours['average_recall']:.3f} baseline {base['average_recall']:.3f}")
    assert ours["average_recall"] >= base["average_recall"]


def check_fit():
    samples = []
    for k in range(10):
        n = 200 + 400 * k
        s = 0.02 * math.exp(-3e-4 * n)
        # deterministic symmetric spread with standard deviation s
        samples += [(n, s), (n, -s)] * 50
    a, b = pt.fit_sigma(samples)
    assert abs(a / 0.02 - 1) < 1e-6 and abs(b / 3e-4 - 1) < 1e-6, (a, b)


def check_errors():
    try:
        pt.Tracker().ingest("{}")
    except ValueError as e:
        assert "missing field" in str(e)
    else:
        raise AssertionError("bad frame accepted")


if __name__ == "__main__":
    check_pose()
    check_pipeline()
    check_fit()
    check_errors()
    print("smoke test passed")
