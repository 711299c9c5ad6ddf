//! Multi-scale denoising graph network predicting per-node noise on a
//! [`GraphHierarchy`].
//!
//! The network is a graph U-Net: node/edge/time embeddings, two graph
//! convolutions per resolution block, mean pooling to parents on the way
//! down, parent-to-child unpooling with encoder skip concatenation on the
//! way up, and a linear head emitting (eps, s) per node. The variance
//! interpolation output s is carried but not used by the deterministic
//! sampler.
//!
//! Edge features are re-initialized from physical edge lengths at every
//! resolution level; skip connections carry node features only.

use crate::autodiff::{Tape, Var};
use crate::mesh::GraphHierarchy;
use crate::seeds;
use crate::NodeField;
use ndarray::Array2;
use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Network hyperparameters. Two convolutions per resolution block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetConfig {
    /// Hidden feature width F_h.
    pub hidden_dim: usize,
    /// Hierarchy depth L (number of resolution levels).
    pub depth: usize,
    /// Sinusoidal time-encoding width (even).
    pub time_embed_dim: usize,
    /// KNN degree used when building coarse hierarchy levels.
    pub knn_k: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            depth: 3,
            time_embed_dim: 16,
            knn_k: 6,
        }
    }
}

impl ScoreNetConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.hidden_dim < 4 {
            return Err(crate::GraphDpsError::Shape(format!(
                "hidden_dim {} < 4",
                self.hidden_dim
            )));
        }
        if self.depth < 1 {
            return Err(crate::GraphDpsError::Shape("depth must be >= 1".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(crate::GraphDpsError::Shape(format!(
                "time_embed_dim {} must be even and >= 2",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Named learnable weights, iterated in a stable insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetParams {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl Default for ScoreNetParams {
    fn default() -> Self {
        Self::new()
    }
}

impl ScoreNetParams {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.values[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Conv-block identifiers in network order: encoder levels 1..L-1, coarsest
/// block, decoder levels L-1..1.
fn block_names(depth: usize) -> Vec<(String, usize)> {
    let mut blocks = Vec::new();
    for l in 1..depth {
        blocks.push((format!("enc{l}"), l));
    }
    blocks.push(("mid".to_string(), depth));
    for l in (1..depth).rev() {
        blocks.push((format!("dec{l}"), l));
    }
    blocks
}

/// Glorot-uniform initialization of all weights (biases zero), seeded per
/// parameter name so the layout order cannot change the draw.
pub fn init_params(config: &ScoreNetConfig, seed: u64) -> ScoreNetParams {
    let fh = config.hidden_dim;
    let dt = config.time_embed_dim;
    let mut params = ScoreNetParams::new();

    let glorot = |params: &mut ScoreNetParams, name: &str, rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = seeds::rng(seed, &format!("init/{name}"));
        let value = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        params.insert(name, value);
    };
    let zeros =
        |params: &mut ScoreNetParams, name: &str, cols: usize| params.insert(name, Array2::zeros((1, cols)));

    glorot(&mut params, "t_emb.w1", dt, fh);
    glorot(&mut params, "t_emb.w2", fh, fh);
    glorot(&mut params, "in.node_w", 1, fh);
    glorot(&mut params, "in.node_proj", 2 * fh, fh);
    glorot(&mut params, "in.edge_proj", 1, fh);

    for (block, _) in block_names(config.depth) {
        for conv in 1..=2 {
            let p = format!("{block}.c{conv}");
            glorot(&mut params, &format!("{p}.res_e"), fh, fh);
            glorot(&mut params, &format!("{p}.res_v"), fh, fh);
            glorot(&mut params, &format!("{p}.edge.w1"), 3 * fh, fh);
            zeros(&mut params, &format!("{p}.edge.b1"), fh);
            glorot(&mut params, &format!("{p}.edge.w2"), fh, fh);
            zeros(&mut params, &format!("{p}.edge.b2"), fh);
            glorot(&mut params, &format!("{p}.node.w1"), 2 * fh, fh);
            zeros(&mut params, &format!("{p}.node.b1"), fh);
            glorot(&mut params, &format!("{p}.node.w2"), fh, fh);
            zeros(&mut params, &format!("{p}.node.b2"), fh);
        }
    }
    for l in (1..config.depth).rev() {
        glorot(&mut params, &format!("dec{l}.up"), 2 * fh, fh);
    }
    glorot(&mut params, "out.w", fh, 2);
    zeros(&mut params, "out.b", 2);
    params
}

/// Per-level index data shared by forward passes: directed edge endpoints,
/// edge lengths as a column, and pooling maps with child-count weights.
#[derive(Debug, Clone)]
pub struct HierarchyIndex {
    levels: Vec<LevelIndex>,
    pools: Vec<PoolIndex>,
}

#[derive(Debug, Clone)]
struct LevelIndex {
    node_count: usize,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    lengths: Array2<f64>,
}

#[derive(Debug, Clone)]
struct PoolIndex {
    parent: Arc<Vec<usize>>,
    inv_child_count: Arc<Vec<f64>>,
    n_coarse: usize,
}

impl HierarchyIndex {
    pub fn new(hierarchy: &GraphHierarchy) -> Self {
        let levels = hierarchy
            .levels
            .iter()
            .map(|level| {
                let src = level.edge_list.iter().map(|&(i, _)| i).collect();
                let dst = level.edge_list.iter().map(|&(_, j)| j).collect();
                let lengths = Array2::from_shape_fn((level.edge_lengths.len(), 1), |(k, _)| {
                    level.edge_lengths[k]
                });
                LevelIndex {
                    node_count: level.node_count,
                    src: Arc::new(src),
                    dst: Arc::new(dst),
                    lengths,
                }
            })
            .collect();
        let pools = hierarchy
            .parent_of
            .iter()
            .zip(hierarchy.levels.iter().skip(1))
            .map(|(parents, coarse)| {
                let mut counts = vec![0.0; coarse.node_count];
                for &p in parents {
                    counts[p] += 1.0;
                }
                PoolIndex {
                    parent: Arc::new(parents.clone()),
                    inv_child_count: Arc::new(counts.iter().map(|&c| 1.0 / c).collect()),
                    n_coarse: coarse.node_count,
                }
            })
            .collect();
        Self { levels, pools }
    }

    pub fn fine_node_count(&self) -> usize {
        self.levels[0].node_count
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Parameters mounted on a tape as differentiable leaves.
pub struct MountedParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl MountedParams {
    pub fn mount(tape: &mut Tape, params: &ScoreNetParams) -> Self {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (name, value) in params.iter() {
            index.insert(name.to_string(), vars.len());
            vars.push(tape.leaf(value.clone()));
        }
        Self { vars, index }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// (name, var) pairs in parameter order.
    pub fn iter<'a>(&'a self, params: &'a ScoreNetParams) -> impl Iterator<Item = (&'a str, Var)> {
        params
            .names()
            .iter()
            .map(move |n| (n.as_str(), self.get(n)))
    }
}

/// Sinusoidal positional encoding of the time step: sines over
/// `dim/2` geometric frequencies, then cosines.
pub fn positional_encoding(t: usize, dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "encoding dim must be even");
    let half = dim / 2;
    let mut pe = Array2::zeros((1, dim));
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half as f64 - 1.0)
        } else {
            0.0
        };
        let omega = 10000f64.powf(-exponent);
        pe[(0, i)] = (t as f64 * omega).sin();
        pe[(0, half + i)] = (t as f64 * omega).cos();
    }
    pe
}

/// Network output: predicted noise and the (unused) variance interpolation.
#[derive(Debug, Clone)]
pub struct ScoreNetOutput {
    pub eps: NodeField,
    pub s: NodeField,
}

/// Time embedding on the tape: project the sinusoidal encoding to F_h.
pub fn time_embedding_on_tape(
    tape: &mut Tape,
    t: usize,
    config: &ScoreNetConfig,
    params: &MountedParams,
) -> Var {
    let pe = positional_encoding(t, config.time_embed_dim);
    let pe = tape.constant(pe);
    let h = tape.matmul(pe, params.get("t_emb.w1"));
    let h = tape.selu(h);
    tape.matmul(h, params.get("t_emb.w2"))
}

/// Input embeddings: per-node features from (x_t, t_emb), per-edge features
/// from physical edge lengths.
fn embed_nodes(
    tape: &mut Tape,
    x_t: Var,
    t_emb: Var,
    n_nodes: usize,
    params: &MountedParams,
) -> Var {
    let xw = tape.matmul(x_t, params.get("in.node_w"));
    let temb_rows = tape.broadcast_row(t_emb, n_nodes);
    let cat = tape.concat_cols(&[xw, temb_rows]);
    let act = tape.selu(cat);
    tape.matmul(act, params.get("in.node_proj"))
}

fn embed_edges(tape: &mut Tape, level: &LevelIndex, params: &MountedParams) -> Var {
    let lengths = tape.constant(level.lengths.clone());
    tape.matmul(lengths, params.get("in.edge_proj"))
}

/// One graph convolution: edge update then node update, both with residual
/// linear terms and LN -> linear -> SELU -> linear -> SELU kernels.
fn graph_conv(
    tape: &mut Tape,
    v: Var,
    e: Var,
    level: &LevelIndex,
    prefix: &str,
    params: &MountedParams,
) -> (Var, Var) {
    let p = |s: &str| format!("{prefix}.{s}");

    let vi = tape.gather_rows(v, level.src.clone());
    let vj = tape.gather_rows(v, level.dst.clone());
    let ye = tape.concat_cols(&[e, vi, vj]);
    let ye = tape.layer_norm(ye);
    let h = tape.linear(ye, params.get(&p("edge.w1")), Some(params.get(&p("edge.b1"))));
    let h = tape.selu(h);
    let h = tape.linear(h, params.get(&p("edge.w2")), Some(params.get(&p("edge.b2"))));
    let kernel_e = tape.selu(h);
    let res_e = tape.matmul(e, params.get(&p("res_e")));
    let e_new = tape.add(res_e, kernel_e);

    let agg = tape.scatter_add_rows(e_new, level.dst.clone(), level.node_count);
    let yv = tape.concat_cols(&[agg, v]);
    let yv = tape.layer_norm(yv);
    let h = tape.linear(yv, params.get(&p("node.w1")), Some(params.get(&p("node.b1"))));
    let h = tape.selu(h);
    let h = tape.linear(h, params.get(&p("node.w2")), Some(params.get(&p("node.b2"))));
    let kernel_v = tape.selu(h);
    let res_v = tape.matmul(v, params.get(&p("res_v")));
    let v_new = tape.add(res_v, kernel_v);

    (v_new, e_new)
}

fn conv_block(
    tape: &mut Tape,
    mut v: Var,
    mut e: Var,
    level: &LevelIndex,
    block: &str,
    params: &MountedParams,
) -> (Var, Var) {
    for conv in 1..=2 {
        let prefix = format!("{block}.c{conv}");
        let (nv, ne) = graph_conv(tape, v, e, level, &prefix, params);
        v = nv;
        e = ne;
    }
    (v, e)
}

/// Mean of child features per coarse node.
fn pool_mean(tape: &mut Tape, v: Var, pool: &PoolIndex) -> Var {
    let sums = tape.scatter_add_rows(v, pool.parent.clone(), pool.n_coarse);
    tape.row_scale(sums, pool.inv_child_count.clone())
}

/// Parent-to-child propagation, skip concatenation, learned projection back
/// to F_h.
fn unpool(
    tape: &mut Tape,
    coarse: Var,
    skip: Var,
    pool: &PoolIndex,
    level: usize,
    params: &MountedParams,
) -> Var {
    let spread = tape.gather_rows(coarse, pool.parent.clone());
    let cat = tape.concat_cols(&[spread, skip]);
    tape.matmul(cat, params.get(&format!("dec{level}.up")))
}

/// Full network pass recorded on an existing tape. Returns (eps, s) node
/// columns at the finest level.
pub fn dgn_forward_on_tape(
    tape: &mut Tape,
    x_t: Var,
    t: usize,
    index: &HierarchyIndex,
    config: &ScoreNetConfig,
    params: &MountedParams,
) -> (Var, Var) {
    let depth = config.depth;
    assert_eq!(
        index.depth(),
        depth,
        "hierarchy depth {} != configured depth {depth}",
        index.depth()
    );

    let t_emb = time_embedding_on_tape(tape, t, config, params);
    let mut v = embed_nodes(tape, x_t, t_emb, index.levels[0].node_count, params);
    let mut e = embed_edges(tape, &index.levels[0], params);

    let mut skips: Vec<Var> = Vec::with_capacity(depth.saturating_sub(1));
    for l in 1..depth {
        let (nv, _) = conv_block(tape, v, e, &index.levels[l - 1], &format!("enc{l}"), params);
        skips.push(nv);
        v = pool_mean(tape, nv, &index.pools[l - 1]);
        e = embed_edges(tape, &index.levels[l], params);
    }

    let (nv, _) = conv_block(tape, v, e, &index.levels[depth - 1], "mid", params);
    v = nv;

    for l in (1..depth).rev() {
        v = unpool(tape, v, skips[l - 1], &index.pools[l - 1], l, params);
        e = embed_edges(tape, &index.levels[l - 1], params);
        let (nv, _) = conv_block(tape, v, e, &index.levels[l - 1], &format!("dec{l}"), params);
        v = nv;
    }

    let head = tape.linear(v, params.get("out.w"), Some(params.get("out.b")));
    let eps = tape.slice_cols(head, 0, 1);
    let s = tape.slice_cols(head, 1, 2);
    (eps, s)
}

/// Convenience forward pass without gradient bookkeeping exposed.
pub fn dgn_forward(
    x_t: &NodeField,
    t: usize,
    index: &HierarchyIndex,
    config: &ScoreNetConfig,
    params: &ScoreNetParams,
) -> ScoreNetOutput {
    let n = index.fine_node_count();
    assert_eq!(x_t.len(), n, "state length {} != node count {n}", x_t.len());
    let mut tape = Tape::new();
    let mounted = MountedParams::mount(&mut tape, params);
    let x = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| x_t.values[i]));
    let (eps, s) = dgn_forward_on_tape(&mut tape, x, t, index, config, &mounted);
    ScoreNetOutput {
        eps: NodeField::new(tape.value(eps).column(0).to_vec()),
        s: NodeField::new(tape.value(s).column(0).to_vec()),
    }
}
