//! JSON dump/load of a whole graph, used for fixtures and debugging.
//!
//! ```json
//! {
//!   "variables": [{"id": 0, "value": {"pose": {"t": [..], "q": [..]}},
//!                  "timestamp": 0.0, "owner": "camera"}],
//!   "factors": [{"id": 0, "kind": {"type": "camera", "measurement": {..}},
//!                "variables": [0], "covariance": [[..6..], ..6 rows..]}],
//!   "next_variable": 1, "next_factor": 1
//! }
//! ```

use super::{Factor, FactorGraph, FactorId, FactorKind, GraphError, Owner, Variable, VariableId, VariableValue};
use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    pub id: VariableId,
    pub value: VariableValue,
    pub timestamp: f64,
    pub owner: Owner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub id: FactorId,
    pub kind: FactorKind,
    pub variables: Vec<VariableId>,
    /// Row-major 6x6.
    pub covariance: [[f64; 6]; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub variables: Vec<VariableRecord>,
    pub factors: Vec<FactorRecord>,
    pub next_variable: u64,
    pub next_factor: u64,
}

fn rows(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    let mut out = [[0.0; 6]; 6];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

impl FactorGraph {
    pub fn dump(&self) -> GraphDump {
        GraphDump {
            variables: self
                .variables
                .iter()
                .map(|(id, v)| VariableRecord {
                    id: *id,
                    value: v.value,
                    timestamp: v.timestamp,
                    owner: v.owner,
                })
                .collect(),
            factors: self
                .factors
                .iter()
                .map(|(id, f)| FactorRecord {
                    id: *id,
                    kind: f.kind,
                    variables: f.variables.clone(),
                    covariance: rows(&f.covariance),
                })
                .collect(),
            next_variable: self.next_variable,
            next_factor: self.next_factor,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("graph dump serializes")
    }

    pub fn from_dump(dump: &GraphDump) -> Result<Self, GraphError> {
        let mut g = FactorGraph::new();
        let mut seen = BTreeSet::new();
        for v in &dump.variables {
            if !seen.insert(v.id) || v.id.0 >= dump.next_variable {
                return Err(GraphError::Dump(format!("bad variable id {}", v.id)));
            }
            if !v.timestamp.is_finite() {
                return Err(GraphError::InvalidTimestamp(v.timestamp));
            }
            g.variables.insert(
                v.id,
                Variable {
                    value: v.value,
                    timestamp: v.timestamp,
                    owner: v.owner,
                },
            );
            g.adjacency.insert(v.id, BTreeSet::new());
        }
        g.next_variable = dump.next_variable;
        let mut by_id = BTreeMap::new();
        for f in &dump.factors {
            if f.id.0 >= dump.next_factor || by_id.contains_key(&f.id) {
                return Err(GraphError::Dump(format!("bad factor id {}", f.id)));
            }
            let cov = Matrix6::from_fn(|i, j| f.covariance[i][j]);
            by_id.insert(f.id, Factor::new(f.kind, f.variables.clone(), cov)?);
        }
        // re-insert through add_factor for validation, then restore ids
        for (id, factor) in by_id {
            g.next_factor = id.0;
            let got = g.add_factor(factor)?;
            debug_assert_eq!(got, id);
        }
        g.next_factor = dump.next_factor;
        Ok(g)
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        let dump: GraphDump = serde_json::from_str(s).map_err(|e| GraphError::Dump(e.to_string()))?;
        Self::from_dump(&dump)
    }
}
