//! Triangular meshes on the unit disk, their graph views, and the
//! multi-scale hierarchy consumed by the score network.

mod delaunay;

pub use delaunay::orient2d;

use crate::error::{GraphDpsError, Result};
use crate::seeds;
use rand::Rng;

/// Planar triangle mesh with an explicit boundary loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    /// Vertex coordinates (unit-disk scale, dimensionless).
    pub vertices: Vec<[f64; 2]>,
    /// Vertex-index triples, positively oriented.
    pub triangles: Vec<[usize; 3]>,
    /// Ordered boundary vertex indices forming one closed cycle.
    pub boundary_loop: Vec<usize>,
}

/// One resolution level of a graph hierarchy: a symmetric directed edge list
/// with per-edge Euclidean lengths and node coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLevel {
    pub node_count: usize,
    /// Ordered pairs (i, j); both directions of every undirected edge present.
    pub edge_list: Vec<(usize, usize)>,
    /// Per-directed-edge Euclidean length, parallel to `edge_list`.
    pub edge_lengths: Vec<f64>,
    pub coords: Vec<[f64; 2]>,
}

/// Multi-resolution graph stack, fine to coarse, with child-to-parent maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphHierarchy {
    pub levels: Vec<GraphLevel>,
    /// `parent_of[l][i]` is the node at level l+1 that owns node i of level l.
    pub parent_of: Vec<Vec<usize>>,
}

impl TriMesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Structural checks: index bounds, positive triangle areas, boundary
    /// loop on the unit circle (for disk meshes `on_unit_circle = true`).
    pub fn validate(&self, on_unit_circle: bool) -> Result<()> {
        let nv = self.vertices.len();
        for t in &self.triangles {
            if t.iter().any(|&v| v >= nv) {
                return Err(GraphDpsError::MeshGeneration(format!(
                    "triangle {t:?} references vertex out of range"
                )));
            }
            let area = 0.5
                * orient2d(
                    self.vertices[t[0]],
                    self.vertices[t[1]],
                    self.vertices[t[2]],
                );
            if area <= 0.0 {
                return Err(GraphDpsError::MeshGeneration(format!(
                    "triangle {t:?} has non-positive area {area}"
                )));
            }
        }
        if on_unit_circle {
            for &b in &self.boundary_loop {
                let r = (self.vertices[b][0].powi(2) + self.vertices[b][1].powi(2)).sqrt();
                if (r - 1.0).abs() > 1e-9 {
                    return Err(GraphDpsError::MeshGeneration(format!(
                        "boundary vertex {b} at radius {r}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply a vertex permutation: `perm[old] = new`. Triangle and boundary
    /// indices are remapped; triangle orientation is preserved.
    pub fn relabel(&self, perm: &[usize]) -> TriMesh {
        let nv = self.vertices.len();
        assert_eq!(perm.len(), nv, "permutation length mismatch");
        let mut vertices = vec![[0.0; 2]; nv];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]])
            .collect();
        let boundary_loop = self.boundary_loop.iter().map(|&b| perm[b]).collect();
        TriMesh {
            vertices,
            triangles,
            boundary_loop,
        }
    }

    /// Mean edge length of the triangulation; the mesh-size measure used by
    /// refinement studies.
    pub fn mean_edge_length(&self) -> f64 {
        let level = mesh_edges(self);
        level.edge_lengths.iter().sum::<f64>() / level.edge_lengths.len() as f64
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Build an approximately uniform Delaunay mesh of the unit disk.
///
/// Boundary nodes form an equally spaced ring (with a deterministic radial
/// jitter of at most 2e-10 to break exact cocircularity); interior nodes are
/// rejection-sampled with a minimum-distance rule and relaxed by two Lloyd
/// passes. The actual vertex count lands within 15% of `target_vertex_count`.
pub fn build_disk_mesh(target_vertex_count: usize, seed: u64) -> Result<TriMesh> {
    if target_vertex_count < 16 {
        return Err(GraphDpsError::MeshGeneration(format!(
            "target vertex count {target_vertex_count} < 16"
        )));
    }
    let mut last_err = String::new();
    for attempt in 0..5 {
        match try_build_disk_mesh(target_vertex_count, seed, attempt) {
            Ok(mesh) => return Ok(mesh),
            Err(e) => last_err = e,
        }
    }
    Err(GraphDpsError::MeshGeneration(format!(
        "all retries failed: {last_err}"
    )))
}

fn try_build_disk_mesh(target: usize, seed: u64, attempt: u64) -> std::result::Result<TriMesh, String> {
    let mut rng = seeds::rng_indexed(seed, "mesh-interior", attempt);

    // Ring size chosen so boundary spacing matches the interior spacing of a
    // uniform fill: nb ~ 2*sqrt(pi*N).
    let nb = ((2.0 * (std::f64::consts::PI * target as f64).sqrt()).round() as usize).max(8);
    let n_interior = target.saturating_sub(nb);
    let h = 2.0 * std::f64::consts::PI / nb as f64;

    let mut points: Vec<[f64; 2]> = Vec::with_capacity(target);
    for k in 0..nb {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / nb as f64;
        // Deterministic jitter strictly inside the 1e-9 boundary tolerance.
        let rho = 1.0 - 1e-10 * (1.0 + (7.3 * k as f64).sin());
        points.push([rho * theta.cos(), rho * theta.sin()]);
    }

    // Dart-throwing fill of the interior.
    let margin = 0.8 * h;
    let r_max = 1.0 - margin;
    if n_interior > 0 {
        let area_per = std::f64::consts::PI * r_max * r_max / n_interior as f64;
        let mut d_min = 0.78 * area_per.sqrt();
        let mut placed = 0;
        while placed < n_interior {
            let mut hit = false;
            for _ in 0..300 {
                let u: f64 = rng.gen();
                let v: f64 = rng.gen();
                let r = r_max * u.sqrt();
                let t = 2.0 * std::f64::consts::PI * v;
                let p = [r * t.cos(), r * t.sin()];
                let ok = points.iter().all(|q| dist(p, *q) >= d_min)
                    && (1.0 - r) >= margin * 0.9;
                if ok {
                    points.push(p);
                    placed += 1;
                    hit = true;
                    break;
                }
            }
            if !hit {
                d_min *= 0.9;
                if d_min < 1e-4 {
                    break;
                }
            }
        }
    }

    let actual = points.len();
    let tol = (0.15 * target as f64).ceil() as usize;
    if actual + tol < target {
        return Err(format!("placed only {actual} of {target} vertices"));
    }

    let mut triangles = delaunay::triangulate(&points)?;

    // Two Lloyd passes on interior vertices: move each to the centroid of its
    // Voronoi cell (polygon of incident-triangle circumcenters).
    for _ in 0..2 {
        let new_points = lloyd_pass(&points, &triangles, nb, r_max);
        points = new_points;
        triangles = delaunay::triangulate(&points)?;
    }

    // Degeneracy check after smoothing.
    for t in &triangles {
        let area = 0.5 * orient2d(points[t[0]], points[t[1]], points[t[2]]);
        if area.abs() < 1e-12 {
            return Err(format!("degenerate triangle {t:?}"));
        }
    }

    let mesh = TriMesh {
        vertices: points,
        triangles,
        boundary_loop: (0..nb).collect(),
    };
    mesh.validate(true).map_err(|e| e.to_string())?;
    Ok(mesh)
}

fn lloyd_pass(
    points: &[[f64; 2]],
    triangles: &[[usize; 3]],
    nb: usize,
    r_max: f64,
) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ti, t) in triangles.iter().enumerate() {
        for &v in t {
            incident[v].push(ti);
        }
    }
    let mut out = points.to_vec();
    for v in nb..n {
        let mut cell: Vec<[f64; 2]> = Vec::new();
        for &ti in &incident[v] {
            let t = triangles[ti];
            if let Some(cc) = delaunay::circumcenter(points[t[0]], points[t[1]], points[t[2]]) {
                cell.push(cc);
            }
        }
        if cell.len() < 3 {
            continue;
        }
        // Order the circumcenters around the vertex, then take the polygon
        // centroid.
        cell.sort_by(|a, b| {
            let aa = (a[1] - points[v][1]).atan2(a[0] - points[v][0]);
            let bb = (b[1] - points[v][1]).atan2(b[0] - points[v][0]);
            aa.partial_cmp(&bb).unwrap()
        });
        let mut area2 = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..cell.len() {
            let p = cell[i];
            let q = cell[(i + 1) % cell.len()];
            let w = p[0] * q[1] - q[0] * p[1];
            area2 += w;
            cx += (p[0] + q[0]) * w;
            cy += (p[1] + q[1]) * w;
        }
        if area2.abs() < 1e-14 {
            continue;
        }
        let mut new_p = [cx / (3.0 * area2), cy / (3.0 * area2)];
        let r = (new_p[0] * new_p[0] + new_p[1] * new_p[1]).sqrt();
        if r > r_max {
            new_p = [new_p[0] * r_max / r, new_p[1] * r_max / r];
        }
        out[v] = new_p;
    }
    out
}

/// Undirected edge set of the triangulation as a [`GraphLevel`]; every edge
/// (i, j) appears as both (i, j) and (j, i).
pub fn mesh_edges(mesh: &TriMesh) -> GraphLevel {
    let mut undirected: Vec<(usize, usize)> = Vec::with_capacity(mesh.triangles.len() * 3);
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            undirected.push((a.min(b), a.max(b)));
        }
    }
    undirected.sort_unstable();
    undirected.dedup();

    let mut edge_list: Vec<(usize, usize)> = Vec::with_capacity(undirected.len() * 2);
    for &(a, b) in &undirected {
        edge_list.push((a, b));
        edge_list.push((b, a));
    }
    edge_list.sort_unstable();
    let edge_lengths = edge_list
        .iter()
        .map(|&(a, b)| dist(mesh.vertices[a], mesh.vertices[b]))
        .collect();
    GraphLevel {
        node_count: mesh.vertices.len(),
        edge_list,
        edge_lengths,
        coords: mesh.vertices.clone(),
    }
}

impl GraphLevel {
    /// Adjacency lists derived from `edge_list`.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edge_list {
            adj[i].push(j);
        }
        adj
    }

    /// Undirected edges as (i, j) with i < j.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.edge_list
            .iter()
            .copied()
            .filter(|&(i, j)| i < j)
            .collect()
    }

    /// Build a symmetric KNN graph level over the given coordinates.
    pub fn knn(coords: Vec<[f64; 2]>, k: usize) -> GraphLevel {
        let n = coords.len();
        let mut undirected: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            let mut by_dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist(coords[i], coords[j]), j))
                .collect();
            by_dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in by_dist.iter().take(k) {
                undirected.push((i.min(j), i.max(j)));
            }
        }
        undirected.sort_unstable();
        undirected.dedup();
        let mut edge_list: Vec<(usize, usize)> = Vec::with_capacity(undirected.len() * 2);
        for &(a, b) in &undirected {
            edge_list.push((a, b));
            edge_list.push((b, a));
        }
        edge_list.sort_unstable();
        let edge_lengths = edge_list
            .iter()
            .map(|&(a, b)| dist(coords[a], coords[b]))
            .collect();
        GraphLevel {
            node_count: n,
            edge_list,
            edge_lengths,
            coords,
        }
    }
}

/// Greedy independent-set decimation (Guillard-style): visit nodes in
/// ascending index order, keep a node not yet deleted, delete its unvisited
/// neighbors. Kept nodes form the coarse level (connected by a KNN graph on
/// their coordinates); the parent map sends each deleted node to its kept
/// deleting neighbor and each kept node to itself.
pub fn coarsen(level: &GraphLevel, knn_k: usize) -> Result<(GraphLevel, Vec<usize>)> {
    let n = level.node_count;
    if n < 2 {
        return Err(GraphDpsError::Coarsening {
            level: 0,
            reason: format!("level has {n} < 2 nodes"),
        });
    }
    let adj = level.neighbors();

    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Kept,
        Deleted,
    }
    let mut state = vec![State::Unvisited; n];
    let mut parent_node = vec![usize::MAX; n];
    for i in 0..n {
        if state[i] == State::Deleted {
            continue;
        }
        state[i] = State::Kept;
        parent_node[i] = i;
        for &j in &adj[i] {
            if j > i && state[j] == State::Unvisited {
                state[j] = State::Deleted;
                parent_node[j] = i;
            }
        }
    }

    let kept: Vec<usize> = (0..n).filter(|&i| state[i] == State::Kept).collect();
    if kept.len() < 2 {
        return Err(GraphDpsError::Coarsening {
            level: 0,
            reason: format!("coarse level would have {} < 2 nodes", kept.len()),
        });
    }
    let mut coarse_index = vec![usize::MAX; n];
    for (ci, &i) in kept.iter().enumerate() {
        coarse_index[i] = ci;
    }
    let parent_map: Vec<usize> = (0..n).map(|i| coarse_index[parent_node[i]]).collect();

    let coords: Vec<[f64; 2]> = kept.iter().map(|&i| level.coords[i]).collect();
    let coarse = GraphLevel::knn(coords, knn_k);
    Ok((coarse, parent_map))
}

/// Build an L-level hierarchy: level 1 is the mesh graph, each following
/// level comes from [`coarsen`].
pub fn build_hierarchy(mesh: &TriMesh, depth: usize, knn_k: usize) -> Result<GraphHierarchy> {
    if depth < 1 {
        return Err(GraphDpsError::Coarsening {
            level: 0,
            reason: "depth must be >= 1".to_string(),
        });
    }
    let mut levels = vec![mesh_edges(mesh)];
    let mut parent_of = Vec::new();
    for l in 1..depth {
        let (coarse, parents) = coarsen(levels.last().unwrap(), knn_k).map_err(|e| match e {
            GraphDpsError::Coarsening { reason, .. } => GraphDpsError::Coarsening {
                level: l + 1,
                reason,
            },
            other => other,
        })?;
        levels.push(coarse);
        parent_of.push(parents);
    }
    Ok(GraphHierarchy { levels, parent_of })
}

impl GraphHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn fine_node_count(&self) -> usize {
        self.levels[0].node_count
    }

    /// Relabel the finest level under a vertex permutation (`perm[old] = new`)
    /// while keeping coarser levels fixed. Used to check permutation
    /// equivariance of networks built on the hierarchy.
    pub fn relabel_level1(&self, perm: &[usize]) -> GraphHierarchy {
        let l0 = &self.levels[0];
        assert_eq!(perm.len(), l0.node_count);
        let mut coords = vec![[0.0; 2]; l0.node_count];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = l0.coords[old];
        }
        let mut pairs: Vec<((usize, usize), f64)> = l0
            .edge_list
            .iter()
            .zip(&l0.edge_lengths)
            .map(|(&(i, j), &len)| ((perm[i], perm[j]), len))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let level1 = GraphLevel {
            node_count: l0.node_count,
            edge_list: pairs.iter().map(|p| p.0).collect(),
            edge_lengths: pairs.iter().map(|p| p.1).collect(),
            coords,
        };
        let mut levels = self.levels.clone();
        levels[0] = level1;
        let mut parent_of = self.parent_of.clone();
        if let Some(first) = parent_of.first_mut() {
            let mut remapped = vec![0usize; first.len()];
            for (old, &new) in perm.iter().enumerate() {
                remapped[new] = first[old];
            }
            *first = remapped;
        }
        GraphHierarchy { levels, parent_of }
    }
}
