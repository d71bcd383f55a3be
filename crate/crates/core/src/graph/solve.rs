use super::sparse::{min_degree_ordering, BlockCholesky, BlockMatrix, Ordering, SelectedInverse, Symbolic};
use super::{FactorGraph, GraphError, VariableId, VariableValue};
use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

/// Levenberg-Marquardt settings. Damping is multiplicative on the diagonal
/// of the information matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iterations: usize,
    /// Converged once an accepted step lowers chi2 by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iterations: 50,
            relative_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub converged: bool,
    /// Damping used by each attempted step.
    pub damping_trace: Vec<f64>,
    /// chi2 after each accepted step, starting with the initial value.
    pub chi2_trace: Vec<f64>,
}

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-12;
const ABSOLUTE_CHI2: f64 = 1e-20;
const MIN_STEP: f64 = 1e-12;

/// Factorized information matrix at the last solution.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub revision: u64,
    index: BTreeMap<VariableId, usize>,
    ordering: Ordering,
    chol: BlockCholesky,
    inverse: OnceLock<SelectedInverse>,
}

impl Solution {
    pub fn marginal(&self, id: VariableId) -> Result<Matrix6<f64>, GraphError> {
        let idx = *self.index.get(&id).ok_or(GraphError::NotInSolution(id))?;
        let k = self.ordering.iperm[idx];
        Ok(self.inverse.get_or_init(|| self.chol.selected_inverse()).diag[k])
    }
}

/// Variable indexing and sparsity shared by every iteration of one solve.
struct Layout {
    ids: Vec<VariableId>,
    index: BTreeMap<VariableId, usize>,
    ordering: Ordering,
    symbolic: Symbolic,
    /// Per factor (in `factors` order), elimination-order block indices.
    factor_blocks: Vec<Vec<usize>>,
}

struct LinearSystem {
    diag: Vec<Matrix6<f64>>,
    off: Vec<Vec<Matrix6<f64>>>,
    gradient: Vec<Vector6<f64>>,
    chi2: f64,
}

impl FactorGraph {
    fn layout(&self) -> Layout {
        let ids: Vec<VariableId> = self.variables.keys().copied().collect();
        let index: BTreeMap<VariableId, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut adjacency = vec![BTreeSet::new(); ids.len()];
        for f in self.factors.values() {
            for a in &f.variables {
                for b in &f.variables {
                    if a != b {
                        adjacency[index[a]].insert(index[b]);
                    }
                }
            }
        }
        let ordering = min_degree_ordering(&adjacency);
        let symbolic = Symbolic::analyze(&adjacency, &ordering);
        let factor_blocks = self
            .factors
            .values()
            .map(|f| {
                f.variables
                    .iter()
                    .map(|v| ordering.iperm[index[v]])
                    .collect()
            })
            .collect();
        Layout {
            ids,
            index,
            ordering,
            symbolic,
            factor_blocks,
        }
    }

    fn assemble(&self, layout: &Layout, values: &[VariableValue]) -> LinearSystem {
        let n = layout.ids.len();
        let mut m = BlockMatrix::zeros(&layout.symbolic);
        let mut gradient = vec![Vector6::zeros(); n];
        let mut chi2 = 0.0;
        for (f, blocks) in self.factors.values().zip(&layout.factor_blocks) {
            let vals: Vec<&VariableValue> = blocks
                .iter()
                .map(|&k| &values[layout.ordering.perm[k]])
                .collect();
            let (r, jac) = f.kind.jacobians(&vals);
            let w = f.whitener();
            let e = w * r.to_vector();
            chi2 += e.norm_squared();
            let jw: Vec<Matrix6<f64>> = jac.iter().map(|j| w * j).collect();
            for a in 0..blocks.len() {
                gradient[blocks[a]] += jw[a].transpose() * e;
                for b in a..blocks.len() {
                    m.add(blocks[a], blocks[b], &(jw[a].transpose() * jw[b]));
                }
            }
        }
        LinearSystem {
            diag: m.diag,
            off: m.off,
            gradient,
            chi2,
        }
    }

    fn evaluate_chi2(&self, layout: &Layout, values: &[VariableValue]) -> f64 {
        self.factors
            .values()
            .zip(&layout.factor_blocks)
            .map(|(f, blocks)| {
                let vals: Vec<&VariableValue> = blocks
                    .iter()
                    .map(|&k| &values[layout.ordering.perm[k]])
                    .collect();
                f.chi2(&vals)
            })
            .sum()
    }

    fn check_solvable(&self) -> Result<(), GraphError> {
        if self.factors.is_empty() {
            if self.variables.is_empty() {
                return Err(GraphError::Empty);
            }
            return Err(GraphError::Unconstrained(self.variables.keys().copied().collect()));
        }
        let free: Vec<VariableId> = self
            .adjacency
            .iter()
            .filter(|(_, f)| f.is_empty())
            .map(|(v, _)| *v)
            .collect();
        if !free.is_empty() {
            return Err(GraphError::Unconstrained(free));
        }
        Ok(())
    }

    /// Minimizes the weighted objective with Levenberg-Marquardt, updating
    /// the estimates in place and caching the information-matrix factor for
    /// [`FactorGraph::marginal_covariance`].
    pub fn solve(&mut self, config: &SolverConfig) -> Result<SolveReport, GraphError> {
        self.solution = None;
        self.check_solvable()?;
        let layout = self.layout();
        let mut values: Vec<VariableValue> = layout
            .ids
            .iter()
            .map(|id| self.variables[id].value)
            .collect();
        let mut system = self.assemble(&layout, &values);
        let initial_chi2 = system.chi2;
        let mut lambda = config.initial_damping;
        let mut trace = Vec::new();
        let mut chi2_trace = vec![initial_chi2];
        let mut iterations = 0;
        let mut converged = system.chi2 <= ABSOLUTE_CHI2;
        // a single small decrease can come from an over-damped step, so the
        // relative test has to hold twice in a row
        let mut small_decreases = 0;

        while !converged && iterations < config.max_iterations {
            iterations += 1;
            trace.push(lambda);
            let mut damped = BlockMatrix {
                sym: &layout.symbolic,
                diag: system.diag.clone(),
                off: system.off.clone(),
            };
            for d in damped.diag.iter_mut() {
                for i in 0..6 {
                    d[(i, i)] += lambda * d[(i, i)].max(1e-12);
                }
            }
            let chol = match BlockCholesky::factor(damped) {
                Ok(c) => c,
                Err(_) => {
                    lambda *= config.damping_up;
                    if lambda > MAX_DAMPING {
                        break;
                    }
                    continue;
                }
            };
            let mut step: Vec<Vector6<f64>> = system.gradient.iter().map(|g| -g).collect();
            chol.solve_in_place(&mut step);
            let step_norm = step.iter().map(|s| s.amax()).fold(0.0, f64::max);
            let mut candidate = values.clone();
            for (k, s) in step.iter().enumerate() {
                let idx = layout.ordering.perm[k];
                candidate[idx] = values[idx].retract(s);
            }
            let new_chi2 = self.evaluate_chi2(&layout, &candidate);
            if new_chi2 <= system.chi2 {
                let decrease = (system.chi2 - new_chi2) / system.chi2.max(f64::MIN_POSITIVE);
                values = candidate;
                lambda = (lambda / config.damping_down).max(MIN_DAMPING);
                system = self.assemble(&layout, &values);
                chi2_trace.push(system.chi2);
                if decrease < config.relative_tolerance {
                    small_decreases += 1;
                } else {
                    small_decreases = 0;
                }
                if small_decreases >= 2 || system.chi2 <= ABSOLUTE_CHI2 || step_norm < MIN_STEP {
                    converged = true;
                }
            } else if new_chi2 - system.chi2 <= config.relative_tolerance * system.chi2
                && small_decreases > 0
            {
                // the model cannot improve beyond rounding noise
                converged = true;
            } else {
                lambda *= config.damping_up;
                if lambda > MAX_DAMPING {
                    // no descent direction left at machine precision
                    converged = true;
                }
            }
        }

        for (id, v) in layout.ids.iter().zip(&values) {
            self.variables.get_mut(id).expect("layout ids").value = *v;
        }
        self.touch();

        let undamped = BlockMatrix {
            sym: &layout.symbolic,
            diag: system.diag,
            off: system.off,
        };
        let chol = BlockCholesky::factor(undamped).map_err(|e| {
            GraphError::RankDeficient(vec![layout.ids[layout.ordering.perm[e.0]]])
        })?;
        self.solution = Some(Solution {
            revision: self.revision,
            index: layout.index,
            ordering: layout.ordering,
            chol,
            inverse: OnceLock::new(),
        });
        Ok(SolveReport {
            iterations,
            initial_chi2,
            final_chi2: system.chi2,
            converged,
            damping_trace: trace,
            chi2_trace,
        })
    }
}
