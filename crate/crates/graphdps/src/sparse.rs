//! Sparse symmetric positive definite direct solver.
//!
//! Envelope (skyline) Cholesky factorization with reverse Cuthill-McKee
//! ordering. FEM stiffness matrices on disk meshes have small RCM bandwidth,
//! so the envelope factorization is cheap at the mesh sizes used here.

use crate::error::{GraphDpsError, Result};

/// Triplet accumulator for a symmetric matrix; only the lower triangle
/// (including the diagonal) is stored.
#[derive(Debug, Clone)]
pub struct SymCooMatrix {
    pub n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SymCooMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    /// Accumulate `value` at (i, j); symmetric counterpart is implicit.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.n && j < self.n);
        if value == 0.0 {
            return;
        }
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, value));
    }

    /// Dense lower-triangle row representation, for small-system checks.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for &(i, j, v) in &self.entries {
            m[i][j] += v;
            if i != j {
                m[j][i] += v;
            }
        }
        m
    }

    /// Multiply by a vector (full symmetric matrix action).
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        let mut row_sums = vec![0.0; self.n];
        for &(i, j, v) in &self.entries {
            row_sums[i] += v.abs();
            if i != j {
                row_sums[j] += v.abs();
            }
        }
        row_sums.into_iter().fold(0.0, f64::max)
    }
}

/// Reverse Cuthill-McKee ordering of an undirected adjacency structure.
/// Returns `perm` with `perm[old] = new`.
pub fn reverse_cuthill_mckee(n: usize, adjacency: &[Vec<usize>]) -> Vec<usize> {
    let degree: Vec<usize> = adjacency.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);

    while order.len() < n {
        // Start each component from its minimum-degree node.
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        visited[start] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adjacency[u]
                .iter()
                .copied()
                .filter(|&v| !visited[v])
                .collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }

    order.reverse();
    let mut perm = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        perm[old] = new;
    }
    perm
}

/// Cholesky factorization of an SPD matrix stored by envelope (skyline) rows.
pub struct SkylineCholesky {
    n: usize,
    /// First stored column per row.
    first_col: Vec<usize>,
    /// Row start offsets into `values`.
    row_start: Vec<usize>,
    /// Packed rows of L (including diagonal).
    values: Vec<f64>,
}

impl SkylineCholesky {
    /// Factor a symmetric positive definite matrix. The optional `perm`
    /// (old index -> new index) is applied internally; RHS and solution stay
    /// in the original ordering.
    pub fn factor(matrix: &SymCooMatrix, perm: Option<Vec<usize>>) -> Result<PermutedCholesky> {
        let n = matrix.n;
        let perm = perm.unwrap_or_else(|| (0..n).collect());

        // Envelope per permuted row.
        let mut first_col: Vec<usize> = (0..n).collect();
        for &(i, j, _) in &matrix.entries {
            let (pi, pj) = (perm[i], perm[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            if c < first_col[r] {
                first_col[r] = c;
            }
        }
        let mut row_start = vec![0usize; n + 1];
        for i in 0..n {
            row_start[i + 1] = row_start[i] + (i - first_col[i] + 1);
        }
        let mut values = vec![0.0; row_start[n]];
        let at = |row_start: &[usize], first_col: &[usize], i: usize, j: usize| -> usize {
            row_start[i] + (j - first_col[i])
        };
        for &(i, j, v) in &matrix.entries {
            let (pi, pj) = (perm[i], perm[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            values[at(&row_start, &first_col, r, c)] += v;
        }

        // In-place envelope Cholesky: row i of L overwrites row i of A.
        for i in 0..n {
            let fi = first_col[i];
            for j in fi..i {
                let fj = first_col[j];
                let lo = fi.max(fj);
                let mut s = values[at(&row_start, &first_col, i, j)];
                for k in lo..j {
                    s -= values[at(&row_start, &first_col, i, k)]
                        * values[at(&row_start, &first_col, j, k)];
                }
                let dj = values[at(&row_start, &first_col, j, j)];
                values[at(&row_start, &first_col, i, j)] = s / dj;
            }
            let mut d = values[at(&row_start, &first_col, i, i)];
            for k in fi..i {
                let l = values[at(&row_start, &first_col, i, k)];
                d -= l * l;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(GraphDpsError::FemSolve(format!(
                    "matrix not positive definite at pivot {i} (value {d})"
                )));
            }
            values[at(&row_start, &first_col, i, i)] = d.sqrt();
        }

        Ok(PermutedCholesky {
            chol: SkylineCholesky {
                n,
                first_col,
                row_start,
                values,
            },
            perm,
        })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        // Forward: L y = b.
        for i in 0..n {
            let fi = self.first_col[i];
            let base = self.row_start[i];
            let mut s = x[i];
            for k in fi..i {
                s -= self.values[base + (k - fi)] * x[k];
            }
            x[i] = s / self.values[base + (i - fi)];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let fi = self.first_col[i];
            let base = self.row_start[i];
            let xi = x[i] / self.values[base + (i - fi)];
            x[i] = xi;
            for k in fi..i {
                x[k] -= self.values[base + (k - fi)] * xi;
            }
        }
    }
}

/// Factorization together with the fill-reducing permutation.
pub struct PermutedCholesky {
    chol: SkylineCholesky,
    perm: Vec<usize>,
}

impl PermutedCholesky {
    pub fn n(&self) -> usize {
        self.chol.n
    }

    /// Solve A x = b in the original (unpermuted) index space.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.chol.n, "rhs length mismatch");
        let mut pb = vec![0.0; b.len()];
        for (old, &new) in self.perm.iter().enumerate() {
            pb[new] = b[old];
        }
        self.chol.solve_in_place(&mut pb);
        let mut x = vec![0.0; b.len()];
        for (old, &new) in self.perm.iter().enumerate() {
            x[old] = pb[new];
        }
        x
    }
}
