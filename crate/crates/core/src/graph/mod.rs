//! Sparse factor graph over SE(3) poses and se(3) twists.
//!
//! Pose variables are perturbed on the right, `T <- T exp(delta)`; twist
//! variables live in a plain 6-vector space. Every factor has a 6-dim
//! residual weighted by a 6x6 covariance.

mod dump;
mod solve;
pub(crate) mod sparse;
mod window;

pub use dump::GraphDump;
pub use solve::{SolveReport, SolverConfig};
pub use window::{WindowMode, WindowOutcome, WINDOW_EPSILON};

use crate::factors::{
    between_jacobians, between_residual, camera_jacobian, camera_residual,
    integration_jacobians, integration_residual, object_jacobians, object_residual, FactorError,
};
use crate::lie::{Pose, Tangent6};
use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorId(pub u64);

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Pose,
    Twist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableValue {
    Pose(Pose),
    Twist(Tangent6),
}

impl VariableValue {
    pub fn kind(&self) -> VariableKind {
        match self {
            VariableValue::Pose(_) => VariableKind::Pose,
            VariableValue::Twist(_) => VariableKind::Twist,
        }
    }

    pub fn as_pose(&self) -> Option<&Pose> {
        match self {
            VariableValue::Pose(p) => Some(p),
            VariableValue::Twist(_) => None,
        }
    }

    pub fn as_twist(&self) -> Option<&Tangent6> {
        match self {
            VariableValue::Twist(t) => Some(t),
            VariableValue::Pose(_) => None,
        }
    }

    /// `value (+) delta`.
    pub fn retract(&self, delta: &Vector6<f64>) -> VariableValue {
        let d = Tangent6::from_vector(delta);
        match self {
            VariableValue::Pose(p) => VariableValue::Pose(p.retract(&d)),
            VariableValue::Twist(t) => VariableValue::Twist(*t + d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Camera,
    Track(u64),
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub value: VariableValue,
    pub timestamp: f64,
    pub owner: Owner,
}

impl Variable {
    pub fn kind(&self) -> VariableKind {
        self.value.kind()
    }
}

/// Residual family of a factor together with its measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FactorKind {
    /// `[camera]`: `log(T_C^-1 Z)`.
    Camera { measurement: Pose },
    /// `[pose]`: same residual as the camera factor; used for marginal priors.
    PosePrior { mean: Pose },
    /// `[object, camera]`: `log(T_O^-1 T_C Z_CO)`.
    Object { measurement: Pose },
    /// `[a, b]`: `log(Z^-1 A^-1 B)`; constant-pose motion uses `Z = I`.
    Between { measurement: Pose },
    /// `[twist]`: `x - mean`.
    TwistPrior { mean: Tangent6 },
    /// `[twist_prev, twist_cur]`: `x_cur - x_prev`.
    Smoothness,
    /// `[pose_prev, pose_cur, twist_cur]`: `log(T_cur^-1 T_prev exp(dt x_cur))`.
    Integration { dt: f64 },
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Camera { .. } => "camera",
            FactorKind::PosePrior { .. } => "pose_prior",
            FactorKind::Object { .. } => "object",
            FactorKind::Between { .. } => "between",
            FactorKind::TwistPrior { .. } => "twist_prior",
            FactorKind::Smoothness => "smoothness",
            FactorKind::Integration { .. } => "integration",
        }
    }

    /// Expected kinds of the connected variables, in order.
    pub fn signature(&self) -> &'static [VariableKind] {
        use VariableKind::*;
        match self {
            FactorKind::Camera { .. } | FactorKind::PosePrior { .. } => &[Pose],
            FactorKind::Object { .. } | FactorKind::Between { .. } => &[Pose, Pose],
            FactorKind::TwistPrior { .. } => &[Twist],
            FactorKind::Smoothness => &[Twist, Twist],
            FactorKind::Integration { .. } => &[Pose, Pose, Twist],
        }
    }

    fn pose(values: &[&VariableValue], i: usize) -> Pose {
        *values[i].as_pose().expect("factor signature checked on insert")
    }

    fn twist(values: &[&VariableValue], i: usize) -> Tangent6 {
        *values[i].as_twist().expect("factor signature checked on insert")
    }

    /// Unwhitened residual at `values` (ordered like the factor's variables).
    pub fn residual(&self, values: &[&VariableValue]) -> Tangent6 {
        match self {
            FactorKind::Camera { measurement } => camera_residual(&Self::pose(values, 0), measurement),
            FactorKind::PosePrior { mean } => camera_residual(&Self::pose(values, 0), mean),
            FactorKind::Object { measurement } => {
                object_residual(&Self::pose(values, 0), &Self::pose(values, 1), measurement)
            }
            FactorKind::Between { measurement } => {
                between_residual(&Self::pose(values, 0), &Self::pose(values, 1), measurement)
            }
            FactorKind::TwistPrior { mean } => Self::twist(values, 0) - *mean,
            FactorKind::Smoothness => Self::twist(values, 1) - Self::twist(values, 0),
            FactorKind::Integration { dt } => integration_residual(
                &Self::pose(values, 0),
                &Self::pose(values, 1),
                &Self::twist(values, 2),
                *dt,
            ),
        }
    }

    /// Residual and analytic Jacobians, one per connected variable.
    pub fn jacobians(&self, values: &[&VariableValue]) -> (Tangent6, Vec<Matrix6<f64>>) {
        match self {
            FactorKind::Camera { measurement } => {
                let (r, j) = camera_jacobian(&Self::pose(values, 0), measurement);
                (r, vec![j])
            }
            FactorKind::PosePrior { mean } => {
                let (r, j) = camera_jacobian(&Self::pose(values, 0), mean);
                (r, vec![j])
            }
            FactorKind::Object { measurement } => {
                let (r, j) = object_jacobians(&Self::pose(values, 0), &Self::pose(values, 1), measurement);
                (r, j.to_vec())
            }
            FactorKind::Between { measurement } => {
                let (r, j) = between_jacobians(&Self::pose(values, 0), &Self::pose(values, 1), measurement);
                (r, j.to_vec())
            }
            FactorKind::TwistPrior { mean } => (Self::twist(values, 0) - *mean, vec![Matrix6::identity()]),
            FactorKind::Smoothness => (
                Self::twist(values, 1) - Self::twist(values, 0),
                vec![-Matrix6::identity(), Matrix6::identity()],
            ),
            FactorKind::Integration { dt } => {
                let (r, j) = integration_jacobians(
                    &Self::pose(values, 0),
                    &Self::pose(values, 1),
                    &Self::twist(values, 2),
                    *dt,
                );
                (r, j.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub variables: Vec<VariableId>,
    pub covariance: Matrix6<f64>,
    /// `L^-1` with `covariance = L L^T`.
    whitener: Matrix6<f64>,
}

impl Factor {
    pub fn new(
        kind: FactorKind,
        variables: Vec<VariableId>,
        covariance: Matrix6<f64>,
    ) -> Result<Self, GraphError> {
        if variables.len() != kind.signature().len() {
            return Err(GraphError::Arity {
                kind: kind.name(),
                expected: kind.signature().len(),
                got: variables.len(),
            });
        }
        let whitener = whitener(&covariance)?;
        Ok(Self {
            kind,
            variables,
            covariance,
            whitener,
        })
    }

    pub fn whitener(&self) -> &Matrix6<f64> {
        &self.whitener
    }

    /// Squared Mahalanobis norm of the residual.
    pub fn chi2(&self, values: &[&VariableValue]) -> f64 {
        (self.whitener * self.kind.residual(values).to_vector()).norm_squared()
    }
}

/// Minimum eigenvalue accepted for a factor covariance.
pub const MIN_COVARIANCE_EIGENVALUE: f64 = 1e-12;

fn whitener(cov: &Matrix6<f64>) -> Result<Matrix6<f64>, GraphError> {
    let asym = (cov - cov.transpose()).abs().max();
    if !cov.iter().all(|v| v.is_finite()) || asym > 1e-9 * cov.abs().max().max(1.0) {
        return Err(GraphError::NonSpdCovariance { min_eigenvalue: f64::NAN });
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if !(min_eig > MIN_COVARIANCE_EIGENVALUE) {
        return Err(GraphError::NonSpdCovariance { min_eigenvalue: min_eig });
    }
    let l = sym
        .cholesky()
        .ok_or(GraphError::NonSpdCovariance { min_eigenvalue: min_eig })?
        .l();
    let mut inv = Matrix6::identity();
    l.solve_lower_triangular_mut(&mut inv);
    Ok(inv)
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown variable {0}")]
    UnknownVariable(VariableId),
    #[error("unknown factor {0}")]
    UnknownFactor(FactorId),
    #[error("covariance is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    NonSpdCovariance { min_eigenvalue: f64 },
    #[error("{kind} factor connects {expected} variables, got {got}")]
    Arity { kind: &'static str, expected: usize, got: usize },
    #[error("{kind} factor expects a {expected:?} at position {position}, {variable} is a {got:?}")]
    WrongVariableKind {
        kind: &'static str,
        position: usize,
        variable: VariableId,
        expected: VariableKind,
        got: VariableKind,
    },
    #[error("{0} factor connects the same variable twice")]
    DuplicateVariable(&'static str),
    #[error("timestamp must be finite, got {0}")]
    InvalidTimestamp(f64),
    #[error("graph has no factors")]
    Empty,
    #[error("variables without any factor: {0:?}")]
    Unconstrained(Vec<VariableId>),
    #[error("information matrix is rank deficient around {0:?}")]
    RankDeficient(Vec<VariableId>),
    #[error("no valid linearization; solve the graph after modifying it")]
    NotSolved,
    #[error("variable {0} was not part of the last solve")]
    NotInSolution(VariableId),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("graph dump: {0}")]
    Dump(String),
}

/// Immutable copy of estimates and marginals, safe to share across threads.
#[derive(Debug, Clone, Default)]
pub struct GraphSnapshot {
    pub values: BTreeMap<VariableId, Variable>,
    pub marginals: BTreeMap<VariableId, Matrix6<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    variables: BTreeMap<VariableId, Variable>,
    factors: BTreeMap<FactorId, Factor>,
    adjacency: BTreeMap<VariableId, BTreeSet<FactorId>>,
    next_variable: u64,
    next_factor: u64,
    revision: u64,
    solution: Option<solve::Solution>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn touch(&mut self) {
        self.revision += 1;
    }

    pub fn add_variable(
        &mut self,
        value: VariableValue,
        timestamp: f64,
        owner: Owner,
    ) -> Result<VariableId, GraphError> {
        if !timestamp.is_finite() {
            return Err(GraphError::InvalidTimestamp(timestamp));
        }
        let id = VariableId(self.next_variable);
        self.next_variable += 1;
        self.variables.insert(
            id,
            Variable {
                value,
                timestamp,
                owner,
            },
        );
        self.adjacency.insert(id, BTreeSet::new());
        self.touch();
        Ok(id)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<FactorId, GraphError> {
        let distinct: BTreeSet<_> = factor.variables.iter().collect();
        if distinct.len() != factor.variables.len() {
            return Err(GraphError::DuplicateVariable(factor.kind.name()));
        }
        for (position, (vid, expected)) in factor
            .variables
            .iter()
            .zip(factor.kind.signature())
            .enumerate()
        {
            let var = self
                .variables
                .get(vid)
                .ok_or(GraphError::UnknownVariable(*vid))?;
            if var.kind() != *expected {
                return Err(GraphError::WrongVariableKind {
                    kind: factor.kind.name(),
                    position,
                    variable: *vid,
                    expected: *expected,
                    got: var.kind(),
                });
            }
        }
        let id = FactorId(self.next_factor);
        self.next_factor += 1;
        for v in &factor.variables {
            self.adjacency.get_mut(v).expect("checked above").insert(id);
        }
        self.factors.insert(id, factor);
        self.touch();
        Ok(id)
    }

    /// Convenience wrapper around [`Factor::new`] + [`FactorGraph::add_factor`].
    pub fn add(
        &mut self,
        kind: FactorKind,
        variables: &[VariableId],
        covariance: Matrix6<f64>,
    ) -> Result<FactorId, GraphError> {
        self.add_factor(Factor::new(kind, variables.to_vec(), covariance)?)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor, GraphError> {
        let f = self.factors.remove(&id).ok_or(GraphError::UnknownFactor(id))?;
        for v in &f.variables {
            if let Some(set) = self.adjacency.get_mut(v) {
                set.remove(&id);
            }
        }
        self.touch();
        Ok(f)
    }

    /// Removes a variable and every factor touching it.
    pub fn remove_variable(&mut self, id: VariableId) -> Result<Variable, GraphError> {
        let fids: Vec<FactorId> = self
            .adjacency
            .get(&id)
            .ok_or(GraphError::UnknownVariable(id))?
            .iter()
            .copied()
            .collect();
        for f in fids {
            self.remove_factor(f)?;
        }
        self.adjacency.remove(&id);
        let v = self.variables.remove(&id).expect("adjacency and variables agree");
        self.touch();
        Ok(v)
    }

    pub fn variable(&self, id: VariableId) -> Option<&Variable> {
        self.variables.get(&id)
    }

    pub fn value(&self, id: VariableId) -> Option<&VariableValue> {
        self.variables.get(&id).map(|v| &v.value)
    }

    pub fn set_value(&mut self, id: VariableId, value: VariableValue) -> Result<(), GraphError> {
        let var = self.variables.get_mut(&id).ok_or(GraphError::UnknownVariable(id))?;
        if var.kind() != value.kind() {
            return Err(GraphError::WrongVariableKind {
                kind: "set_value",
                position: 0,
                variable: id,
                expected: var.kind(),
                got: value.kind(),
            });
        }
        var.value = value;
        self.touch();
        Ok(())
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(&id)
    }

    pub fn variables(&self) -> impl Iterator<Item = (&VariableId, &Variable)> {
        self.variables.iter()
    }

    pub fn factors(&self) -> impl Iterator<Item = (&FactorId, &Factor)> {
        self.factors.iter()
    }

    pub fn factors_of(&self, id: VariableId) -> impl Iterator<Item = FactorId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    fn factor_values(&self, f: &Factor) -> Vec<&VariableValue> {
        f.variables
            .iter()
            .map(|v| &self.variables[v].value)
            .collect()
    }

    /// Weighted objective: sum of squared Mahalanobis residual norms.
    pub fn chi2(&self) -> f64 {
        self.factors
            .values()
            .map(|f| f.chi2(&self.factor_values(f)))
            .sum()
    }

    /// Marginal covariance of `id` from the information matrix at the last
    /// solution.
    pub fn marginal_covariance(&self, id: VariableId) -> Result<Matrix6<f64>, GraphError> {
        let sol = self.solution.as_ref().ok_or(GraphError::NotSolved)?;
        if sol.revision != self.revision {
            return Err(GraphError::NotSolved);
        }
        sol.marginal(id)
    }

    /// Estimates of all variables plus marginals of `marginal_ids`.
    pub fn snapshot(&self, marginal_ids: &[VariableId]) -> Result<GraphSnapshot, GraphError> {
        let mut marginals = BTreeMap::new();
        for &id in marginal_ids {
            marginals.insert(id, self.marginal_covariance(id)?);
        }
        Ok(GraphSnapshot {
            values: self.variables.clone(),
            marginals,
        })
    }
}
