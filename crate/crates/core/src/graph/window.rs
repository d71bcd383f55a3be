use super::{FactorGraph, FactorId, FactorKind, GraphError, VariableId, VariableValue};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Tolerance on window boundaries so that e.g. a 1 s horizon at 30 Hz keeps
/// exactly 30 frames despite floating-point timestamps.
pub const WINDOW_EPSILON: f64 = 1e-9;

/// How variables leave the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Summarize the discarded factors as Gaussian priors on the retained
    /// neighbours.
    #[default]
    Prior,
    /// Drop the discarded factors outright.
    Delete,
}

impl std::str::FromStr for WindowMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prior" => Ok(WindowMode::Prior),
            "delete" => Ok(WindowMode::Delete),
            other => Err(format!("unknown window mode `{other}` (expected prior|delete)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowOutcome {
    pub removed: Vec<VariableId>,
    /// Prior factors added on boundary variables.
    pub priors: Vec<(VariableId, FactorId)>,
}

/// True when a variable stamped `timestamp` falls out of a window of length
/// `horizon` ending at `now`. The newest timestamp is always retained.
pub fn outside_window(timestamp: f64, horizon: f64, now: f64) -> bool {
    let age = now - timestamp;
    age > WINDOW_EPSILON && age > horizon - WINDOW_EPSILON
}

fn cholesky_inverse_with_ridge(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut ridge = 0.0;
    loop {
        let mut a = (m + m.transpose()) * 0.5;
        for i in 0..n {
            a[(i, i)] += ridge;
        }
        if let Some(c) = a.cholesky() {
            return c.inverse();
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
}

/// Symmetrizes and clamps the spectrum so the block is a valid covariance.
fn sanitize_covariance(c: &Matrix6<f64>) -> Matrix6<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|v| v.clamp(1e-10, 1e10));
    let out = eig.eigenvectors * Matrix6::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

impl FactorGraph {
    /// Removes every variable older than `horizon` relative to `now`.
    pub fn apply_window(
        &mut self,
        horizon: f64,
        now: f64,
        mode: WindowMode,
    ) -> Result<WindowOutcome, GraphError> {
        let old: Vec<VariableId> = self
            .variables
            .iter()
            .filter(|(_, v)| outside_window(v.timestamp, horizon, now))
            .map(|(id, _)| *id)
            .collect();
        self.marginalize(&old, mode)
    }

    /// Removes `vars` and all factors touching them. In [`WindowMode::Prior`]
    /// the removed factors are linearized at the current estimate, the
    /// removed variables are eliminated by Schur complement, and each
    /// retained neighbour receives a prior with the resulting marginal mean
    /// and covariance.
    pub fn marginalize(
        &mut self,
        vars: &[VariableId],
        mode: WindowMode,
    ) -> Result<WindowOutcome, GraphError> {
        let removed: BTreeSet<VariableId> = vars.iter().copied().collect();
        for v in &removed {
            if !self.variables.contains_key(v) {
                return Err(GraphError::UnknownVariable(*v));
            }
        }
        if removed.is_empty() {
            return Ok(WindowOutcome::default());
        }
        let dropped: BTreeSet<FactorId> = removed
            .iter()
            .flat_map(|v| self.adjacency[v].iter().copied())
            .collect();
        let boundary: BTreeSet<VariableId> = dropped
            .iter()
            .flat_map(|f| self.factors[f].variables.iter().copied())
            .filter(|v| !removed.contains(v))
            .collect();

        let priors = if mode == WindowMode::Prior && !boundary.is_empty() {
            self.schur_priors(&removed, &boundary, &dropped)
        } else {
            Vec::new()
        };

        for f in &dropped {
            self.remove_factor(*f)?;
        }
        for v in &removed {
            self.remove_variable(*v)?;
        }
        let mut outcome = WindowOutcome {
            removed: removed.into_iter().collect(),
            priors: Vec::new(),
        };
        for (v, kind, cov) in priors {
            let fid = self.add(kind, &[v], cov)?;
            outcome.priors.push((v, fid));
        }
        Ok(outcome)
    }

    fn schur_priors(
        &self,
        removed: &BTreeSet<VariableId>,
        boundary: &BTreeSet<VariableId>,
        dropped: &BTreeSet<FactorId>,
    ) -> Vec<(VariableId, FactorKind, Matrix6<f64>)> {
        let order: Vec<VariableId> = removed.iter().chain(boundary.iter()).copied().collect();
        let slot: BTreeMap<VariableId, usize> =
            order.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let dim = 6 * order.len();
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for fid in dropped {
            let f = &self.factors[fid];
            let vals: Vec<&VariableValue> = f.variables.iter().map(|v| &self.variables[v].value).collect();
            let (r, jac) = f.kind.jacobians(&vals);
            let w = f.whitener();
            let e = w * r.to_vector();
            let jw: Vec<Matrix6<f64>> = jac.iter().map(|j| w * j).collect();
            for (a, va) in f.variables.iter().enumerate() {
                let ia = 6 * slot[va];
                let mut gb = g.rows_mut(ia, 6);
                gb += jw[a].transpose() * e;
                for (b, vb) in f.variables.iter().enumerate() {
                    let ib = 6 * slot[vb];
                    let mut hb = h.view_mut((ia, ib), (6, 6));
                    hb += jw[a].transpose() * jw[b];
                }
            }
        }
        let nr = 6 * removed.len();
        let nb = 6 * boundary.len();
        let h_rr = h.view((0, 0), (nr, nr)).into_owned();
        let h_br = h.view((nr, 0), (nb, nr)).into_owned();
        let h_bb = h.view((nr, nr), (nb, nb)).into_owned();
        let rr_inv = cholesky_inverse_with_ridge(&h_rr);
        let k = &h_br * &rr_inv;
        let h_s = &h_bb - &k * h_br.transpose();
        let g_s = g.rows(nr, nb) - &k * g.rows(0, nr);
        let cov = cholesky_inverse_with_ridge(&h_s);
        let shift = -(&cov * g_s);

        boundary
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let o = 6 * i;
                let block = sanitize_covariance(&cov.fixed_view::<6, 6>(o, o).into_owned());
                let delta: Vector6<f64> = shift.fixed_rows::<6>(o).into_owned();
                let kind = match self.variables[v].value.retract(&delta) {
                    VariableValue::Pose(mean) => FactorKind::PosePrior { mean },
                    VariableValue::Twist(mean) => FactorKind::TwistPrior { mean },
                };
                (*v, kind, block)
            })
            .collect()
    }
}
