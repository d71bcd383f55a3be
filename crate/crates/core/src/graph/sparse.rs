//! Block-sparse Cholesky factorization of the 6x6-blocked information matrix.

use nalgebra::{Matrix6, SMatrix};
use std::collections::BTreeSet;

/// Elimination order: `perm[new] = old`, `iperm[old] = new`.
#[derive(Debug, Clone)]
pub(crate) struct Ordering {
    pub perm: Vec<usize>,
    pub iperm: Vec<usize>,
}

/// Greedy minimum-degree ordering on the block graph, ties broken by
/// index.
pub(crate) fn min_degree_ordering(adjacency: &[BTreeSet<usize>]) -> Ordering {
    let n = adjacency.len();
    let mut graph: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (graph[v].len(), v)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, best)) = queue.pop_first() {
        let neighbors: Vec<usize> = std::mem::take(&mut graph[best]).into_iter().collect();
        for &u in &neighbors {
            queue.remove(&(graph[u].len(), u));
        }
        for (a, &u) in neighbors.iter().enumerate() {
            graph[u].remove(&best);
            for &w in &neighbors[a + 1..] {
                graph[u].insert(w);
                graph[w].insert(u);
            }
        }
        for &u in &neighbors {
            queue.insert((graph[u].len(), u));
        }
        perm.push(best);
    }
    let mut iperm = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    Ordering { perm, iperm }
}

/// Row structure of the strictly lower part of the factor, per column, in
/// elimination order.
#[derive(Debug, Clone)]
pub(crate) struct Symbolic {
    pub rows: Vec<Vec<usize>>,
}

impl Symbolic {
    /// `adjacency` is in original indices; the result is in elimination order.
    pub fn analyze(adjacency: &[BTreeSet<usize>], ordering: &Ordering) -> Self {
        let n = adjacency.len();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (old, nbrs) in adjacency.iter().enumerate() {
            let k = ordering.iperm[old];
            for &o in nbrs {
                let i = ordering.iperm[o];
                if i > k {
                    sets[k].insert(i);
                }
            }
        }
        for k in 0..n {
            if let Some(&parent) = sets[k].iter().next() {
                let inherited: Vec<usize> = sets[k].iter().copied().filter(|&i| i != parent).collect();
                sets[parent].extend(inherited);
            }
        }
        Self {
            rows: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

/// Symmetric block matrix in elimination order, lower triangle only, laid
/// out on a [`Symbolic`] pattern.
pub(crate) struct BlockMatrix<'a> {
    pub sym: &'a Symbolic,
    pub diag: Vec<Matrix6<f64>>,
    pub off: Vec<Vec<Matrix6<f64>>>,
}

impl<'a> BlockMatrix<'a> {
    pub fn zeros(sym: &'a Symbolic) -> Self {
        Self {
            sym,
            diag: vec![Matrix6::zeros(); sym.len()],
            off: sym.rows.iter().map(|r| vec![Matrix6::zeros(); r.len()]).collect(),
        }
    }

    /// Adds `block` at `(row, col)` (elimination order). For `row < col` the
    /// transpose is added at `(col, row)`.
    pub fn add(&mut self, row: usize, col: usize, block: &Matrix6<f64>) {
        use std::cmp::Ordering::*;
        match row.cmp(&col) {
            Equal => self.diag[row] += block,
            Greater => {
                let p = self.sym.rows[col]
                    .binary_search(&row)
                    .expect("block outside symbolic pattern");
                self.off[col][p] += block;
            }
            Less => {
                let p = self.sym.rows[row]
                    .binary_search(&col)
                    .expect("block outside symbolic pattern");
                self.off[row][p] += block.transpose();
            }
        }
    }
}

/// Lower-triangular factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub(crate) struct BlockCholesky {
    pub rows: Vec<Vec<usize>>,
    pub diag: Vec<Matrix6<f64>>,
    pub off: Vec<Vec<Matrix6<f64>>>,
}

/// Factorization failed at this pivot (elimination order).
#[derive(Debug, Clone, Copy)]
pub(crate) struct NotPositiveDefinite(pub usize);

fn lower_inverse(l: &Matrix6<f64>) -> Matrix6<f64> {
    let mut inv = Matrix6::identity();
    l.solve_lower_triangular_mut(&mut inv);
    inv
}

impl BlockCholesky {
    pub fn factor(a: BlockMatrix<'_>) -> Result<Self, NotPositiveDefinite> {
        let sym = a.sym;
        let mut diag = a.diag;
        let mut off = a.off;
        let n = sym.len();
        for k in 0..n {
            let d = (diag[k] + diag[k].transpose()) * 0.5;
            let scale = d.diagonal().max().max(f64::MIN_POSITIVE);
            let chol = d.cholesky().ok_or(NotPositiveDefinite(k))?;
            let l = chol.l();
            // relative pivot check catches numerically singular blocks
            if l.diagonal().min() <= 1e-12 * scale.sqrt() {
                return Err(NotPositiveDefinite(k));
            }
            let l_inv_t = lower_inverse(&l).transpose();
            diag[k] = l;
            let mut col = std::mem::take(&mut off[k]);
            for b in col.iter_mut() {
                *b *= l_inv_t;
            }
            let rows = &sym.rows[k];
            for p in 0..rows.len() {
                let i = rows[p];
                let lik = col[p];
                diag[i] -= lik * lik.transpose();
                for q in 0..p {
                    let j = rows[q];
                    let pos = sym.rows[j]
                        .binary_search(&i)
                        .expect("symbolic fill missing");
                    off[j][pos] -= lik * col[q].transpose();
                }
            }
            off[k] = col;
        }
        Ok(Self {
            rows: sym.rows.clone(),
            diag,
            off,
        })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A x = b` in place; `b` is indexed in elimination order.
    pub fn solve_in_place<const C: usize>(&self, b: &mut [SMatrix<f64, 6, C>]) {
        self.forward(b, 0);
        self.backward(b);
    }

    /// `L y = b`, skipping leading columns known to be zero.
    fn forward<const C: usize>(&self, b: &mut [SMatrix<f64, 6, C>], start: usize) {
        for k in start..self.len() {
            let mut y = b[k];
            self.diag[k].solve_lower_triangular_mut(&mut y);
            b[k] = y;
            for (p, &i) in self.rows[k].iter().enumerate() {
                b[i] -= self.off[k][p] * y;
            }
        }
    }

    /// `L^T x = y`.
    fn backward<const C: usize>(&self, b: &mut [SMatrix<f64, 6, C>]) {
        for k in (0..self.len()).rev() {
            let mut acc = b[k];
            for (p, &i) in self.rows[k].iter().enumerate() {
                acc -= self.off[k][p].transpose() * b[i];
            }
            self.diag[k].tr_solve_lower_triangular_mut(&mut acc);
            b[k] = acc;
        }
    }

    /// Blocks of `A^-1` on the factor's sparsity pattern (Takahashi
    /// recursion), in elimination order.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let n = self.len();
        let mut diag = vec![Matrix6::zeros(); n];
        let mut off: Vec<Vec<Matrix6<f64>>> = self.rows.iter().map(|r| vec![Matrix6::zeros(); r.len()]).collect();
        for k in (0..n).rev() {
            let d_inv = lower_inverse(&self.diag[k]);
            let d_inv_t = d_inv.transpose();
            let rows = &self.rows[k];
            // Σ_jk for every j in rows(k), from Σ_ij with i, j in rows(k)
            let mut col = vec![Matrix6::zeros(); rows.len()];
            for (q, &j) in rows.iter().enumerate() {
                let mut acc = Matrix6::zeros();
                for (p, &i) in rows.iter().enumerate() {
                    let sij = match i.cmp(&j) {
                        std::cmp::Ordering::Equal => diag[i],
                        std::cmp::Ordering::Less => {
                            let pos = self.rows[i].binary_search(&j).expect("pattern is closed");
                            off[i][pos].transpose()
                        }
                        std::cmp::Ordering::Greater => {
                            let pos = self.rows[j].binary_search(&i).expect("pattern is closed");
                            off[j][pos]
                        }
                    };
                    acc += self.off[k][p].transpose() * sij;
                }
                // Σ_kj = -D^-T acc, stored as Σ_jk
                col[q] = -(d_inv_t * acc).transpose();
            }
            let mut acc = d_inv;
            for (p, c) in col.iter().enumerate() {
                acc -= self.off[k][p].transpose() * c;
            }
            let dk = d_inv_t * acc;
            diag[k] = (dk + dk.transpose()) * 0.5;
            off[k] = col;
        }
        SelectedInverse { diag, off }
    }
}

/// Entries of `A^-1` on the pattern of `L`: `off[k][p]` is the block at
/// `(rows[k][p], k)`.
#[derive(Debug, Clone)]
pub(crate) struct SelectedInverse {
    pub diag: Vec<Matrix6<f64>>,
    #[allow(dead_code)]
    pub off: Vec<Vec<Matrix6<f64>>>,
}
