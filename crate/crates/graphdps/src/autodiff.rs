//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-level primitives with cached forward values;
//! [`Tape::backward`] replays them in reverse to accumulate exact gradients
//! of a recorded scalar. Everything is f64: gradients are compared against
//! finite-difference oracles elsewhere in the test suite, and single
//! precision would drown those comparisons in rounding noise.
//!
//! Vectors are (n, 1) matrices; scalars are (1, 1). Broadcasting is limited
//! to scalar constants ([`Tape::scale`]) and row vectors
//! ([`Tape::broadcast_row`]); everything else requires exact shapes.

use crate::error::{GraphDpsError, Result};
use ndarray::Array2;
use std::sync::Arc;

/// SELU scale constant (standard published value).
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// SELU alpha constant (standard published value).
pub const SELU_ALPHA: f64 = 1.6732632423543772;
/// Layer-norm variance stabilizer.
const LN_EPS: f64 = 1e-8;

/// Handle to a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// External function spliced into the tape with a custom vector-Jacobian
/// product (the forward-operator boundary).
pub trait CustomVjp {
    /// Short name used in error messages.
    fn name(&self) -> &str;
    fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>>;
    /// Pull the upstream gradient back through the function.
    fn backward(&self, input: &Array2<f64>, upstream: &Array2<f64>) -> Result<Array2<f64>>;
}

enum Op {
    /// Differentiable input.
    Leaf,
    /// Non-differentiable input (indices, frozen data).
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    MatMul(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterAddRows(usize, Arc<Vec<usize>>),
    /// Rows scaled by fixed (non-differentiated) weights.
    RowScale(usize, Arc<Vec<f64>>),
    BroadcastRow(usize),
    Scale(usize, f64),
    LayerNorm(usize),
    Selu(usize),
    Square(usize),
    AbsSmooth(usize, f64),
    Sum(usize),
    Mean(usize),
    Custom(usize, Arc<dyn CustomVjp>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    /// Per-row inverse standard deviations for layer norm.
    ln_inv_std: Option<Vec<f64>>,
}

/// Recorded computation: forward values cached per node, replayed in reverse
/// by [`Tape::backward`]. Recording order is the topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every tape node after a backward pass; leaves not reachable
/// from the loss hold zero.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var` (zeros when the loss does not depend
    /// on it).
    pub fn wrt(&self, var: Var) -> Array2<f64> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.id].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.push_with_aux(op, value, None)
    }

    fn push_with_aux(&mut self, op: Op, value: Array2<f64>, ln_inv_std: Option<Vec<f64>>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            ln_inv_std,
        });
        Var { id }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.id].value.dim();
        (s.0, s.1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        self.push(Op::Add(a.id, b.id), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        self.push(Op::Sub(a.id, b.id), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        self.push(Op::Mul(a.id, b.id), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dims {ar}x{ac} . {br}x{bc}");
        let v = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        self.push(Op::MatMul(a.id, b.id), v)
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols: row mismatch");
                self.shape(p).1
            })
            .sum();
        let mut v = Array2::zeros((rows, total));
        let mut col = 0;
        for &p in parts {
            let w = self.shape(p).1;
            v.slice_mut(ndarray::s![.., col..col + w])
                .assign(&self.nodes[p.id].value);
            col += w;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), v)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, cols) = self.shape(a);
        assert!(start < end && end <= cols, "slice_cols: bad range");
        let v = self.nodes[a.id].value.slice(ndarray::s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a.id, start, end), v)
    }

    /// Rows of `a` addressed by an index list: out[k] = a[idx[k]].
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(idx.iter().all(|&i| i < rows), "gather_rows: index out of range");
        let mut v = Array2::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&self.nodes[a.id].value.row(i));
        }
        self.push(Op::GatherRows(a.id, idx), v)
    }

    /// Scatter-add rows into `n_rows` buckets: out[idx[k]] += a[k].
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, n_rows: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(rows, idx.len(), "scatter_add_rows: index length mismatch");
        assert!(idx.iter().all(|&i| i < n_rows), "scatter_add_rows: index out of range");
        let mut v = Array2::zeros((n_rows, cols));
        for (k, &i) in idx.iter().enumerate() {
            let mut row = v.row_mut(i);
            row += &self.nodes[a.id].value.row(k);
        }
        self.push(Op::ScatterAddRows(a.id, idx), v)
    }

    /// Scale each row by a fixed weight (the weights are data, not inputs).
    pub fn row_scale(&mut self, a: Var, weights: Arc<Vec<f64>>) -> Var {
        let (rows, _) = self.shape(a);
        assert_eq!(rows, weights.len(), "row_scale: weight length mismatch");
        let mut v = self.nodes[a.id].value.clone();
        for (k, mut row) in v.rows_mut().into_iter().enumerate() {
            row *= weights[k];
        }
        self.push(Op::RowScale(a.id, weights), v)
    }

    /// Repeat a (1, F) row vector over `n_rows` rows.
    pub fn broadcast_row(&mut self, a: Var, n_rows: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(rows, 1, "broadcast_row: input must be a row vector");
        let row = self.nodes[a.id].value.row(0).to_owned();
        let v = Array2::from_shape_fn((n_rows, cols), |(_, j)| row[j]);
        self.push(Op::BroadcastRow(a.id), v)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.id].value * c;
        self.push(Op::Scale(a.id, c), v)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine
    /// terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.id].value;
        let (rows, cols) = x.dim();
        let mut v = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            for c in 0..cols {
                v[(r, c)] = (row[c] - mean) * s;
            }
        }
        self.push_with_aux(Op::LayerNorm(a.id), v, Some(inv_std))
    }

    pub fn selu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(|x| {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
            }
        });
        self.push(Op::Selu(a.id), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.id].value.mapv(|x| x * x);
        self.push(Op::Square(a.id), v)
    }

    /// Smooth absolute value sqrt(x^2 + delta^2).
    pub fn abs_smooth(&mut self, a: Var, delta: f64) -> Var {
        assert!(delta > 0.0, "abs_smooth: delta must be positive");
        let v = self.nodes[a.id].value.mapv(|x| (x * x + delta * delta).sqrt());
        self.push(Op::AbsSmooth(a.id, delta), v)
    }

    /// Sum of all entries, as a (1, 1) scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.sum();
        self.push(Op::Sum(a.id), Array2::from_elem((1, 1), s))
    }

    /// Mean of all entries, as a (1, 1) scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let s = self.nodes[a.id].value.sum() / (rows * cols) as f64;
        self.push(Op::Mean(a.id), Array2::from_elem((1, 1), s))
    }

    /// Splice an external function with a registered VJP into the tape.
    pub fn custom(&mut self, a: Var, f: Arc<dyn CustomVjp>) -> Result<Var> {
        let v = f.forward(&self.nodes[a.id].value)?;
        Ok(self.push(Op::Custom(a.id, f), v))
    }

    /// Linear layer helper: x . w + b broadcast over rows (b may be omitted).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let rows = self.shape(y).0;
                let bb = self.broadcast_row(b, rows);
                self.add(y, bb)
            }
            None => y,
        }
    }

    /// Reverse accumulation from a scalar loss. Repeated calls on the same
    /// tape replay identically.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(GraphDpsError::Shape(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.dim().1;
                        let gp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        col += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (rows, cols) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((rows, cols));
                    ga.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((rows, cols));
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let cols = self.nodes[*a].value.dim().1;
                    let mut ga = Array2::zeros((idx.len(), cols));
                    for (k, &i) in idx.iter().enumerate() {
                        ga.row_mut(k).assign(&g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowScale(a, weights) => {
                    let mut ga = g.clone();
                    for (k, mut row) in ga.rows_mut().into_iter().enumerate() {
                        row *= weights[k];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRow(a) => {
                    let cols = g.dim().1;
                    let mut ga = Array2::zeros((1, cols));
                    for row in g.rows() {
                        let mut target = ga.row_mut(0);
                        target += &row;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::LayerNorm(a) => {
                    let y = &self.nodes[id].value;
                    let inv_std = self.nodes[id].ln_inv_std.as_ref().unwrap();
                    let (rows, cols) = y.dim();
                    let mut ga = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / cols as f64;
                        let mean_gy = gr
                            .iter()
                            .zip(yr.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            ga[(r, c)] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Selu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = ndarray::Zip::from(&g).and(x).map_collect(|&gi, &xi| {
                        if xi > 0.0 {
                            gi * SELU_LAMBDA
                        } else {
                            gi * SELU_LAMBDA * SELU_ALPHA * xi.exp()
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(x)
                        .map_collect(|&gi, &xi| 2.0 * gi * xi);
                    accumulate(&mut grads, *a, ga);
                }
                Op::AbsSmooth(a, delta) => {
                    let x = &self.nodes[*a].value;
                    let d2 = delta * delta;
                    let ga = ndarray::Zip::from(&g)
                        .and(x)
                        .map_collect(|&gi, &xi| gi * xi / (xi * xi + d2).sqrt());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.nodes[*a].value.dim();
                    let ga = Array2::from_elem((rows, cols), g[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.nodes[*a].value.dim();
                    let ga = Array2::from_elem((rows, cols), g[(0, 0)] / (rows * cols) as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Custom(a, f) => {
                    let ga = f.backward(&self.nodes[*a].value, &g)?;
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
