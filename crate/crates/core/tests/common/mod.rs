//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use posetrack::graph::{FactorGraph, FactorKind, Owner, VariableId, VariableValue};
use posetrack::lie::{exp_se3, hat, log_se3, Pose, Tangent6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm4(a: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = a.abs().max() * 4.0;
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.25 {
        s += 1;
    }
    let b = a / 2f64.powi(s);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..30 {
        term = term * b / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

pub fn twist_matrix(x: &Tangent6) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&x.theta));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&x.rho);
    m
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Tangent with rotation angle uniform in `[0, max_angle]` and translation
/// components in `[-t, t]`.
pub fn random_tangent(rng: &mut ChaCha8Rng, max_angle: f64, t: f64) -> Tangent6 {
    let angle = rng.gen_range(0.0..=max_angle);
    Tangent6::new(
        Vector3::new(rng.gen_range(-t..t), rng.gen_range(-t..t), rng.gen_range(-t..t)),
        random_unit(rng) * angle,
    )
}

pub fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, t: f64) -> Pose {
    exp_se3(&random_tangent(rng, max_angle, t))
}

/// Random SPD matrix with standard deviations roughly in `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Matrix6<f64> {
    let q = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0))
        .qr()
        .q();
    let d = Vector6::from_fn(|_, _| rng.gen_range(lo..hi).powi(2));
    let m = q * Matrix6::from_diagonal(&d) * q.transpose();
    (m + m.transpose()) * 0.5
}

pub fn value_distance(a: &VariableValue, b: &VariableValue) -> f64 {
    match (a, b) {
        (VariableValue::Pose(x), VariableValue::Pose(y)) => log_se3(&x.between(y)).norm(),
        (VariableValue::Twist(x), VariableValue::Twist(y)) => (*x - *y).norm(),
        _ => f64::INFINITY,
    }
}

/// Central-difference Jacobians of a factor residual on the retraction.
pub fn numeric_jacobians(kind: &FactorKind, values: &[VariableValue], step: f64) -> Vec<Matrix6<f64>> {
    (0..values.len())
        .map(|i| {
            let mut j = Matrix6::zeros();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = step;
                let mut plus = values.to_vec();
                let mut minus = values.to_vec();
                plus[i] = values[i].retract(&d);
                minus[i] = values[i].retract(&-d);
                let rp = kind.residual(&plus.iter().collect::<Vec<_>>()).to_vector();
                let rm = kind.residual(&minus.iter().collect::<Vec<_>>()).to_vector();
                j.set_column(k, &((rp - rm) / (2.0 * step)));
            }
            j
        })
        .collect()
}

/// Brute-force dense Gauss-Newton over the whole graph with numeric
/// Jacobians. Returns the optimum and the dense inverse information matrix.
pub struct DenseSolution {
    pub values: BTreeMap<VariableId, VariableValue>,
    pub covariance: DMatrix<f64>,
    pub index: BTreeMap<VariableId, usize>,
}

impl DenseSolution {
    pub fn marginal(&self, id: VariableId) -> Matrix6<f64> {
        let o = 6 * self.index[&id];
        self.covariance.fixed_view::<6, 6>(o, o).into_owned()
    }
}

fn dense_system(
    graph: &FactorGraph,
    values: &BTreeMap<VariableId, VariableValue>,
    index: &BTreeMap<VariableId, usize>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = 6 * index.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut chi2 = 0.0;
    for (_, f) in graph.factors() {
        let vals: Vec<VariableValue> = f.variables.iter().map(|v| values[v]).collect();
        let r = f.kind.residual(&vals.iter().collect::<Vec<_>>()).to_vector();
        let info = f.covariance.try_inverse().expect("spd");
        chi2 += (r.transpose() * info * r)[0];
        let jac = numeric_jacobians(&f.kind, &vals, 1e-6);
        for (a, va) in f.variables.iter().enumerate() {
            let ia = 6 * index[va];
            let mut gb = g.rows_mut(ia, 6);
            gb += jac[a].transpose() * info * r;
            for (b, vb) in f.variables.iter().enumerate() {
                let ib = 6 * index[vb];
                let mut hb = h.view_mut((ia, ib), (6, 6));
                hb += jac[a].transpose() * info * jac[b];
            }
        }
    }
    (h, g, chi2)
}

pub fn dense_gauss_newton(graph: &FactorGraph) -> DenseSolution {
    let index: BTreeMap<VariableId, usize> = graph
        .variables()
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let mut values: BTreeMap<VariableId, VariableValue> =
        graph.variables().map(|(id, v)| (*id, v.value)).collect();
    for _ in 0..100 {
        let (h, g, _) = dense_system(graph, &values, &index);
        let step = h.cholesky().expect("information matrix is SPD").solve(&-g);
        for (id, i) in &index {
            let d: Vector6<f64> = step.fixed_rows::<6>(6 * i).into_owned();
            let v = values[id].retract(&d);
            values.insert(*id, v);
        }
        if step.amax() < 1e-13 {
            break;
        }
    }
    let (h, _, _) = dense_system(graph, &values, &index);
    let covariance = h.try_inverse().expect("invertible");
    DenseSolution {
        values,
        covariance,
        index,
    }
}

/// Random well-posed graph with at most 12 variables. Odd seeds build a
/// constant-velocity object track observed from a moving camera; even seeds
/// build a pose chain with odometry, priors and loop closures.
pub fn random_graph(rng: &mut ChaCha8Rng) -> FactorGraph {
    let mut g = FactorGraph::new();
    if rng.gen_bool(0.5) {
        let steps = rng.gen_range(2..=4);
        let dt = rng.gen_range(0.03..0.3);
        let twist = random_tangent(rng, 0.5, 0.3);
        let mut obj = random_pose(rng, 2.5, 1.0);
        let mut prev: Option<(VariableId, VariableId)> = None;
        for k in 0..steps {
            let t = k as f64 * dt;
            let cam = random_pose(rng, 2.5, 1.0);
            let noisy = |rng: &mut ChaCha8Rng, p: &Pose| p.retract(&random_tangent(rng, 0.05, 0.02));
            let c = g
                .add_variable(VariableValue::Pose(noisy(rng, &cam)), t, Owner::Camera)
                .unwrap();
            let o = g
                .add_variable(VariableValue::Pose(noisy(rng, &obj)), t, Owner::Track(0))
                .unwrap();
            let x = g
                .add_variable(VariableValue::Twist(twist + random_tangent(rng, 0.05, 0.05)), t, Owner::Track(0))
                .unwrap();
            let cov = random_spd(rng, 0.005, 0.05);
            g.add(FactorKind::Camera { measurement: noisy(rng, &cam) }, &[c], cov).unwrap();
            let z = noisy(rng, &cam.inverse().compose(&obj));
            let cov = random_spd(rng, 0.005, 0.05);
            g.add(FactorKind::Object { measurement: z }, &[o, c], cov).unwrap();
            match prev {
                None => {
                    let cov = random_spd(rng, 0.1, 1.0);
                    g.add(FactorKind::TwistPrior { mean: twist }, &[x], cov).unwrap();
                }
                Some((po, px)) => {
                    let cov = random_spd(rng, 0.05, 0.3);
                    g.add(FactorKind::Smoothness, &[px, x], cov).unwrap();
                    let cov = random_spd(rng, 0.001, 0.01);
                    g.add(FactorKind::Integration { dt }, &[po, o, x], cov).unwrap();
                }
            }
            prev = Some((o, x));
            obj = obj.compose(&exp_se3(&twist.scale(dt)));
        }
    } else {
        let n = rng.gen_range(3..=12);
        let truth: Vec<Pose> = (0..n).map(|_| random_pose(rng, 2.5, 2.0)).collect();
        let ids: Vec<VariableId> = truth
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let init = p.retract(&random_tangent(rng, 0.1, 0.05));
                g.add_variable(VariableValue::Pose(init), i as f64, Owner::Free).unwrap()
            })
            .collect();
        let noisy = |rng: &mut ChaCha8Rng, p: &Pose| p.retract(&random_tangent(rng, 0.03, 0.02));
        g.add(
            FactorKind::PosePrior { mean: noisy(rng, &truth[0]) },
            &[ids[0]],
            random_spd(rng, 0.01, 0.1),
        )
        .unwrap();
        for i in 1..n {
            let z = noisy(rng, &truth[i - 1].between(&truth[i]));
            g.add(FactorKind::Between { measurement: z }, &[ids[i - 1], ids[i]], random_spd(rng, 0.01, 0.1))
                .unwrap();
        }
        for _ in 0..rng.gen_range(0..3) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                let z = noisy(rng, &truth[a].between(&truth[b]));
                g.add(FactorKind::Between { measurement: z }, &[ids[a], ids[b]], random_spd(rng, 0.01, 0.1))
                    .unwrap();
            }
        }
        if rng.gen_bool(0.5) {
            let k = rng.gen_range(0..n);
            g.add(
                FactorKind::Camera { measurement: noisy(rng, &truth[k]) },
                &[ids[k]],
                random_spd(rng, 0.01, 0.1),
            )
            .unwrap();
        }
    }
    g
}

/// Frobenius norm of `a - b` relative to `max(|b|, floor)`.
pub fn relative_error(a: &Matrix6<f64>, b: &Matrix6<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

pub fn so3_from(theta: Vector3<f64>) -> Matrix3<f64> {
    exp_se3(&Tangent6::new(Vector3::zeros(), theta)).rotation_matrix()
}
