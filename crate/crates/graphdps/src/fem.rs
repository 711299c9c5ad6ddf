//! Complete-electrode-model EIT forward solver on a [`TriMesh`] with P1
//! elements, measurement protocols, and the adjoint Jacobian of measurements
//! with respect to nodal conductivity.
//!
//! The CEM unknowns are the nodal potential u plus one voltage per electrode.
//! The Galerkin system
//!
//! ```text
//! [ A(sigma) + M_z   -N ] [u]   [0]
//! [ -N^T              G ] [U] = [I]
//! ```
//!
//! is singular with nullspace span{(1, 1)}; the grounding constraint
//! sum_l U_l = 0 is enforced by the symmetric rank-one augmentation
//! S + c c^T with c the electrode-voltage indicator, which reproduces the
//! Lagrange-multiplier solution for conservative current patterns while
//! keeping the system positive definite for the sparse Cholesky solver.

use crate::error::{GraphDpsError, Result};
use crate::mesh::TriMesh;
use crate::seeds;
use crate::sparse::{reverse_cuthill_mckee, PermutedCholesky, SkylineCholesky, SymCooMatrix};
use crate::NodeField;
use rand::Rng;
use rand_distr::StandardNormal;

/// Default contact impedance (Ohm*m) applied uniformly to all electrodes.
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-2;
/// Default injection current amplitude (A).
pub const DEFAULT_CURRENT: f64 = 1e-3;
/// Positivity floor for conductivity fields (S/m).
pub const CONDUCTIVITY_FLOOR: f64 = 1e-3;

/// Boundary electrodes: equally spaced arcs on the boundary loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeConfig {
    pub count: usize,
    pub coverage: f64,
    /// Contact impedance per electrode (Ohm*m).
    pub contact_impedances: Vec<f64>,
    /// Disjoint ordered lists of boundary vertex indices, one per electrode.
    pub electrode_nodes: Vec<Vec<usize>>,
}

/// Injection patterns plus differential measurement pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentProtocol {
    /// Per-pattern electrode currents (A), each summing to zero.
    pub patterns: Vec<Vec<f64>>,
    /// (pattern index, electrode a, electrode b): measured value is U_a - U_b.
    pub measurement_pairs: Vec<(usize, usize, usize)>,
}

impl CurrentProtocol {
    pub fn num_measurements(&self) -> usize {
        self.measurement_pairs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    Gaussian,
    Laplace,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Laplace => "laplace",
        }
    }

    pub fn parse(s: &str) -> Option<NoiseKind> {
        match s {
            "none" => Some(NoiseKind::None),
            "gaussian" => Some(NoiseKind::Gaussian),
            "laplace" => Some(NoiseKind::Laplace),
            _ => None,
        }
    }
}

/// A voltage measurement vector with its noise annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub y: Vec<f64>,
    /// Noise standard deviation (V); zero for clean data.
    pub sigma_y: f64,
    pub noise_kind: NoiseKind,
}

/// Place `p` equally spaced electrode arcs of the given per-electrode
/// coverage fraction on the mesh boundary.
pub fn place_electrodes(mesh: &TriMesh, p: usize, coverage: f64) -> Result<ElectrodeConfig> {
    if p == 0 {
        return Err(GraphDpsError::Electrodes("need at least one electrode".into()));
    }
    if !(0.0..1.0).contains(&coverage) || coverage == 0.0 {
        return Err(GraphDpsError::Electrodes(format!(
            "coverage {coverage} outside (0,1)"
        )));
    }
    let nb = mesh.boundary_loop.len();
    if nb < 2 * p {
        return Err(GraphDpsError::Electrodes(format!(
            "boundary has {nb} nodes, need at least {}",
            2 * p
        )));
    }

    let two_pi = 2.0 * std::f64::consts::PI;
    let width = coverage * two_pi / p as f64;
    let mut electrode_nodes: Vec<Vec<usize>> = Vec::with_capacity(p);
    for l in 0..p {
        let center = two_pi * l as f64 / p as f64;
        // Half-open arc [-w/2, w/2) around the center, with a small shift so
        // nodes exactly on the trailing edge fall outside.
        let mut members: Vec<(f64, usize)> = Vec::new();
        for &b in &mesh.boundary_loop {
            let v = mesh.vertices[b];
            let theta = v[1].atan2(v[0]);
            let mut delta = theta - center;
            while delta > std::f64::consts::PI {
                delta -= two_pi;
            }
            while delta < -std::f64::consts::PI {
                delta += two_pi;
            }
            if delta >= -width / 2.0 - 1e-9 && delta < width / 2.0 - 1e-9 {
                members.push((delta, b));
            }
        }
        members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if members.len() < 2 {
            return Err(GraphDpsError::Electrodes(format!(
                "electrode {l} owns {} boundary nodes; boundary too coarse",
                members.len()
            )));
        }
        electrode_nodes.push(members.into_iter().map(|(_, b)| b).collect());
    }

    // Disjointness across arcs.
    let mut seen = std::collections::HashSet::new();
    for nodes in &electrode_nodes {
        for &n in nodes {
            if !seen.insert(n) {
                return Err(GraphDpsError::Electrodes(format!(
                    "electrode arcs overlap at boundary node {n}"
                )));
            }
        }
    }

    Ok(ElectrodeConfig {
        count: p,
        coverage,
        contact_impedances: vec![DEFAULT_CONTACT_IMPEDANCE; p],
        electrode_nodes,
    })
}

/// Named protocols from the experiment configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    OppositeAdjacent,
    AdjacentAdjacent,
}

impl ProtocolKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolKind::OppositeAdjacent => "opposite_adjacent",
            ProtocolKind::AdjacentAdjacent => "adjacent_adjacent",
        }
    }

    pub fn parse(s: &str) -> Option<ProtocolKind> {
        match s {
            "opposite_adjacent" => Some(ProtocolKind::OppositeAdjacent),
            "adjacent_adjacent" => Some(ProtocolKind::AdjacentAdjacent),
            _ => None,
        }
    }
}

/// Build a named current protocol for `p` electrodes with injection
/// amplitude `current`. Voltages are read on all adjacent electrode pairs
/// that do not contain a driven electrode.
pub fn protocol(kind: ProtocolKind, p: usize, current: f64) -> Result<CurrentProtocol> {
    if p < 4 {
        return Err(GraphDpsError::Protocol(format!("need p >= 4, got {p}")));
    }
    if kind == ProtocolKind::OppositeAdjacent && p % 2 != 0 {
        return Err(GraphDpsError::Protocol(format!(
            "opposite injection requires even p, got {p}"
        )));
    }
    let mut patterns = Vec::with_capacity(p);
    let mut measurement_pairs = Vec::new();
    for k in 0..p {
        let (src, snk) = match kind {
            ProtocolKind::OppositeAdjacent => (k, (k + p / 2) % p),
            ProtocolKind::AdjacentAdjacent => (k, (k + 1) % p),
        };
        let mut pattern = vec![0.0; p];
        pattern[src] += current;
        pattern[snk] -= current;
        for j in 0..p {
            let a = j;
            let b = (j + 1) % p;
            if a == src || a == snk || b == src || b == snk {
                continue;
            }
            measurement_pairs.push((k, a, b));
        }
        patterns.push(pattern);
    }
    Ok(CurrentProtocol {
        patterns,
        measurement_pairs,
    })
}

/// Per-triangle geometry: area and the constant P1 basis gradients.
#[derive(Debug, Clone)]
struct TriGeom {
    area: f64,
    grads: [[f64; 2]; 3],
}

fn triangle_geometry(mesh: &TriMesh) -> Result<Vec<TriGeom>> {
    let mut out = Vec::with_capacity(mesh.triangles.len());
    for t in &mesh.triangles {
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        if two_a <= 0.0 {
            return Err(GraphDpsError::FemSolve(format!(
                "triangle {t:?} not positively oriented"
            )));
        }
        let mut grads = [[0.0; 2]; 3];
        for i in 0..3 {
            let j = (i + 1) % 3;
            let k = (i + 2) % 3;
            grads[i] = [
                (p[j][1] - p[k][1]) / two_a,
                (p[k][0] - p[j][0]) / two_a,
            ];
        }
        out.push(TriGeom {
            area: 0.5 * two_a,
            grads,
        });
    }
    Ok(out)
}

/// Boundary segments (node a, node b, length) per electrode, taken from the
/// boundary loop.
fn electrode_segments(mesh: &TriMesh, electrodes: &ElectrodeConfig) -> Vec<Vec<(usize, usize, f64)>> {
    let nb = mesh.boundary_loop.len();
    let mut owner = std::collections::HashMap::new();
    for (l, nodes) in electrodes.electrode_nodes.iter().enumerate() {
        for &n in nodes {
            owner.insert(n, l);
        }
    }
    let mut segments = vec![Vec::new(); electrodes.count];
    for k in 0..nb {
        let a = mesh.boundary_loop[k];
        let b = mesh.boundary_loop[(k + 1) % nb];
        if let (Some(&la), Some(&lb)) = (owner.get(&a), owner.get(&b)) {
            if la == lb {
                let pa = mesh.vertices[a];
                let pb = mesh.vertices[b];
                let h = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
                segments[la].push((a, b, h));
            }
        }
    }
    segments
}

/// Precomputed CEM solver context for a fixed mesh / electrode / protocol
/// configuration. Immutable after construction; assembly and solves for a
/// given conductivity go through [`CemSolver::assemble`].
#[derive(Debug)]
pub struct CemSolver {
    pub mesh: TriMesh,
    pub electrodes: ElectrodeConfig,
    pub protocol: CurrentProtocol,
    geom: Vec<TriGeom>,
    segments: Vec<Vec<(usize, usize, f64)>>,
    perm: Vec<usize>,
}

/// Factorized CEM system for one conductivity field.
pub struct CemFactorized<'a> {
    solver: &'a CemSolver,
    matrix: SymCooMatrix,
    chol: PermutedCholesky,
}

impl CemSolver {
    pub fn new(mesh: TriMesh, electrodes: ElectrodeConfig, protocol: CurrentProtocol) -> Result<Self> {
        if electrodes.count == 0 || protocol.patterns.iter().any(|p| p.len() != electrodes.count) {
            return Err(GraphDpsError::Protocol(
                "pattern length does not match electrode count".into(),
            ));
        }
        let geom = triangle_geometry(&mesh)?;
        let segments = electrode_segments(&mesh, &electrodes);
        for (l, segs) in segments.iter().enumerate() {
            if segs.is_empty() {
                return Err(GraphDpsError::Electrodes(format!(
                    "electrode {l} has no boundary segments"
                )));
            }
        }

        // RCM over the full (n + p) sparsity pattern.
        let n = mesh.num_vertices();
        let p = electrodes.count;
        let mut adj = vec![Vec::new(); n + p];
        for t in &mesh.triangles {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        adj[t[i]].push(t[j]);
                    }
                }
            }
        }
        for (l, nodes) in electrodes.electrode_nodes.iter().enumerate() {
            for &node in nodes {
                adj[node].push(n + l);
                adj[n + l].push(node);
            }
        }
        // Grounding augmentation couples all electrode rows.
        for l in 0..p {
            for k in 0..p {
                if l != k {
                    adj[n + l].push(n + k);
                }
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(n + p, &adj);

        Ok(Self {
            mesh,
            electrodes,
            protocol,
            geom,
            segments,
            perm,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn num_measurements(&self) -> usize {
        self.protocol.num_measurements()
    }

    /// Assemble and factor the grounded CEM system for `sigma`.
    pub fn assemble(&self, sigma: &NodeField) -> Result<CemFactorized<'_>> {
        let n = self.mesh.num_vertices();
        let p = self.electrodes.count;
        if sigma.len() != n {
            return Err(GraphDpsError::Shape(format!(
                "sigma has {} values for {} vertices",
                sigma.len(),
                n
            )));
        }
        if sigma.values.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(GraphDpsError::FemSolve(
                "conductivity must be strictly positive and finite".into(),
            ));
        }

        let mut m = SymCooMatrix::new(n + p);
        // Stiffness with P1 conductivity: element value is the nodal mean.
        for (t, g) in self.mesh.triangles.iter().zip(&self.geom) {
            let s_bar = (sigma.values[t[0]] + sigma.values[t[1]] + sigma.values[t[2]]) / 3.0;
            for i in 0..3 {
                for j in 0..=i {
                    let k = s_bar
                        * g.area
                        * (g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1]);
                    m.add(t[i], t[j], k);
                }
            }
        }
        // Electrode boundary terms.
        for (l, segs) in self.segments.iter().enumerate() {
            let inv_z = 1.0 / self.electrodes.contact_impedances[l];
            for &(a, b, h) in segs {
                m.add(a, a, inv_z * h / 3.0);
                m.add(b, b, inv_z * h / 3.0);
                m.add(a, b, inv_z * h / 6.0);
                m.add(a, n + l, -inv_z * h / 2.0);
                m.add(b, n + l, -inv_z * h / 2.0);
                m.add(n + l, n + l, inv_z * h);
            }
        }
        // Grounding rank-one term c c^T over the electrode block.
        for l in 0..p {
            for k in 0..=l {
                m.add(n + l, n + k, 1.0);
            }
        }

        let chol = SkylineCholesky::factor(&m, Some(self.perm.clone()))
            .map_err(|e| GraphDpsError::FemSolve(format!("CEM factorization failed: {e}")))?;
        Ok(CemFactorized {
            solver: self,
            matrix: m,
            chol,
        })
    }
}

impl CemFactorized<'_> {
    /// Direct solve plus one step of iterative refinement; high-contrast
    /// conductivity fields (floor 1e-3 against order-one inclusions) push a
    /// single factorized solve just past the residual contract.
    fn solve_refined(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.chol.solve(rhs);
        let ax = self.matrix.mul_vec(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        if r.iter().any(|&v| v != 0.0) {
            let dx = self.chol.solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        x
    }

    /// Solve one current pattern; returns (interior potential, electrode
    /// voltages).
    pub fn solve_pattern(&self, pattern: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.solver.mesh.num_vertices();
        let p = self.solver.electrodes.count;
        if pattern.len() != p {
            return Err(GraphDpsError::Shape(format!(
                "pattern length {} != electrode count {p}",
                pattern.len()
            )));
        }
        let total: f64 = pattern.iter().sum();
        if total.abs() > 1e-12 * pattern.iter().map(|v| v.abs()).sum::<f64>().max(1.0) {
            return Err(GraphDpsError::Protocol(format!(
                "pattern does not conserve charge (sum {total:e})"
            )));
        }
        let mut rhs = vec![0.0; n + p];
        rhs[n..].copy_from_slice(pattern);
        let x = self.solve_refined(&rhs);

        // Backward-relative residual guard: ||b - Sx|| / (||S|| ||x|| + ||b||).
        // This equals the plain relative residual for well-scaled systems and
        // stays meaningful for high-contrast conductivity fields, where the
        // residual computation itself is limited by eps * ||S|| ||x||.
        let r = self.matrix.mul_vec(&x);
        let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rhs_norm > 0.0 {
            let res: f64 = r
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let x_norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = self.matrix.inf_norm() * x_norm + rhs_norm;
            if res / denom > 1e-10 {
                return Err(GraphDpsError::FemSolve(format!(
                    "solver residual {:e} exceeds 1e-10",
                    res / denom
                )));
            }
        }
        Ok((x[..n].to_vec(), x[n..].to_vec()))
    }

    /// Differential voltages for all measurement pairs of the protocol.
    pub fn measure_all(&self) -> Result<Vec<f64>> {
        let proto = &self.solver.protocol;
        let mut voltages = Vec::with_capacity(proto.patterns.len());
        for pat in &proto.patterns {
            let (_, u_el) = self.solve_pattern(pat)?;
            voltages.push(u_el);
        }
        Ok(proto
            .measurement_pairs
            .iter()
            .map(|&(k, a, b)| voltages[k][a] - voltages[k][b])
            .collect())
    }
}

/// Solve one CEM pattern for the given conductivity (assembles and factors
/// the system on the spot; use [`CemSolver::assemble`] for repeated solves).
pub fn solve_cem(
    solver: &CemSolver,
    sigma: &NodeField,
    pattern: &[f64],
) -> Result<(NodeField, Vec<f64>)> {
    let fact = solver.assemble(sigma)?;
    let (u, u_el) = fact.solve_pattern(pattern)?;
    Ok((NodeField::new(u), u_el))
}

/// Nonlinear parameter-to-observable map: all protocol measurements for one
/// conductivity field. The returned set carries no noise.
pub fn forward(solver: &CemSolver, sigma: &NodeField) -> Result<MeasurementSet> {
    let fact = solver.assemble(sigma)?;
    Ok(MeasurementSet {
        y: fact.measure_all()?,
        sigma_y: 0.0,
        noise_kind: NoiseKind::None,
    })
}

/// Add measurement noise at `level * max|y|`: Gaussian with that standard
/// deviation, or Laplace with scale sigma_y / sqrt(2) so both share the same
/// variance.
pub fn add_noise(
    y_clean: &MeasurementSet,
    kind: NoiseKind,
    level: f64,
    seed: u64,
) -> MeasurementSet {
    assert!(level > 0.0, "noise level must be positive");
    let max_abs = y_clean
        .y
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let sigma_y = level * max_abs;
    let mut rng = seeds::rng(seed, "measurement-noise");
    let y = y_clean
        .y
        .iter()
        .map(|&v| {
            let eta = match kind {
                NoiseKind::None => 0.0,
                NoiseKind::Gaussian => {
                    let z: f64 = rng.sample(StandardNormal);
                    sigma_y * z
                }
                NoiseKind::Laplace => {
                    let b = sigma_y / std::f64::consts::SQRT_2;
                    let u: f64 = rng.gen::<f64>() - 0.5;
                    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
                }
            };
            v + eta
        })
        .collect();
    MeasurementSet {
        y,
        sigma_y,
        noise_kind: kind,
    }
}

/// Gradient of `sum_k weights[k] * y_k(sigma)` with respect to the nodal
/// conductivity, computed with one forward and one adjoint solve per pattern
/// (shared factorization).
pub fn adjoint_jacobian_vjp(
    solver: &CemSolver,
    sigma: &NodeField,
    residual_weights: &[f64],
) -> Result<NodeField> {
    let fact = solver.assemble(sigma)?;
    adjoint_vjp_from_factorized(&fact, residual_weights)
}

/// Adjoint VJP against an already-factorized system (avoids re-assembly when
/// the forward solve was just performed for the same conductivity).
pub fn adjoint_vjp_from_factorized(
    fact: &CemFactorized<'_>,
    residual_weights: &[f64],
) -> Result<NodeField> {
    let solver = fact.solver;
    let n = solver.mesh.num_vertices();
    let p = solver.electrodes.count;
    let proto = &solver.protocol;
    if residual_weights.len() != proto.num_measurements() {
        return Err(GraphDpsError::Shape(format!(
            "got {} weights for {} measurements",
            residual_weights.len(),
            proto.num_measurements()
        )));
    }

    // Group measurement functionals by pattern.
    let mut functionals: Vec<Vec<f64>> = vec![vec![0.0; p]; proto.patterns.len()];
    let mut active = vec![false; proto.patterns.len()];
    for (&(k, a, b), &w) in proto.measurement_pairs.iter().zip(residual_weights) {
        if w != 0.0 {
            functionals[k][a] += w;
            functionals[k][b] -= w;
            active[k] = true;
        }
    }

    let mut grad = vec![0.0; n];
    for (k, pat) in proto.patterns.iter().enumerate() {
        if !active[k] {
            continue;
        }
        let mut rhs_fwd = vec![0.0; n + p];
        rhs_fwd[n..].copy_from_slice(pat);
        let w_fwd = fact.solve_refined(&rhs_fwd);

        let mut rhs_adj = vec![0.0; n + p];
        rhs_adj[n..].copy_from_slice(&functionals[k]);
        let w_adj = fact.solve_refined(&rhs_adj);

        // d(w^T y)/d sigma_j = -psi^T (dS/dsigma_j) w; only the stiffness
        // block depends on sigma, linearly through the nodal P1 expansion.
        for (t, g) in solver.mesh.triangles.iter().zip(&solver.geom) {
            let mut gu = [0.0; 2];
            let mut gp = [0.0; 2];
            for i in 0..3 {
                gu[0] += w_fwd[t[i]] * g.grads[i][0];
                gu[1] += w_fwd[t[i]] * g.grads[i][1];
                gp[0] += w_adj[t[i]] * g.grads[i][0];
                gp[1] += w_adj[t[i]] * g.grads[i][1];
            }
            let dot = gu[0] * gp[0] + gu[1] * gp[1];
            let contrib = -g.area / 3.0 * dot;
            for &v in t {
                grad[v] += contrib;
            }
        }
    }
    Ok(NodeField::new(grad))
}

/// Continuum Neumann validation mode: solve div(sigma grad u) = 0 with
/// direct flux data g on the boundary (no electrodes), grounded at vertex 0
/// via the rank-one trick. Returns the nodal solution with u[0] = 0.
pub fn solve_neumann(mesh: &TriMesh, sigma: &NodeField, boundary_flux: &[f64]) -> Result<NodeField> {
    let n = mesh.num_vertices();
    if sigma.len() != n {
        return Err(GraphDpsError::Shape("sigma length mismatch".into()));
    }
    if boundary_flux.len() != mesh.boundary_loop.len() {
        return Err(GraphDpsError::Shape(
            "boundary flux must have one value per boundary node".into(),
        ));
    }
    let geom = triangle_geometry(mesh)?;
    let mut m = SymCooMatrix::new(n);
    for (t, g) in mesh.triangles.iter().zip(&geom) {
        let s_bar = (sigma.values[t[0]] + sigma.values[t[1]] + sigma.values[t[2]]) / 3.0;
        for i in 0..3 {
            for j in 0..=i {
                let k = s_bar
                    * g.area
                    * (g.grads[i][0] * g.grads[j][0] + g.grads[i][1] * g.grads[j][1]);
                m.add(t[i], t[j], k);
            }
        }
    }
    // Ground the constant nullspace: with mean-zero flux data, the rank-one
    // augmented solve returns the exact solution pinned to u[0] = 0.
    m.add(0, 0, 1.0);

    let mut rhs = vec![0.0; n];
    let nb = mesh.boundary_loop.len();
    for k in 0..nb {
        let a = mesh.boundary_loop[k];
        let b = mesh.boundary_loop[(k + 1) % nb];
        let ga = boundary_flux[k];
        let gb = boundary_flux[(k + 1) % nb];
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let h = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        rhs[a] += h * (2.0 * ga + gb) / 6.0;
        rhs[b] += h * (ga + 2.0 * gb) / 6.0;
    }

    let mut adj = vec![Vec::new(); n];
    for t in &mesh.triangles {
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    adj[t[i]].push(t[j]);
                }
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let perm = reverse_cuthill_mckee(n, &adj);
    let chol = SkylineCholesky::factor(&m, Some(perm))?;
    Ok(NodeField::new(chol.solve(&rhs)))
}

/// L2 norm of a P1 field over the mesh (consistent mass quadrature).
pub fn l2_norm(mesh: &TriMesh, field: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in &mesh.triangles {
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let area = 0.5
            * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
        let (e0, e1, e2) = (field[t[0]], field[t[1]], field[t[2]]);
        total += area / 6.0 * (e0 * e0 + e1 * e1 + e2 * e2 + e0 * e1 + e1 * e2 + e2 * e0);
    }
    total.max(0.0).sqrt()
}

/// Area-weighted mean of a P1 field.
pub fn mesh_mean(mesh: &TriMesh, field: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in &mesh.triangles {
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let area = 0.5
            * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
        num += area * (field[t[0]] + field[t[1]] + field[t[2]]) / 3.0;
        den += area;
    }
    num / den
}

/// Continuum check: L2 error of the FEM solution against the harmonic
/// solution u = r cos(theta) for flux g = cos(theta) on the unit disk with
/// sigma = 1, after aligning the free constants.
pub fn continuum_check_l2_error(mesh: &TriMesh) -> Result<f64> {
    let n = mesh.num_vertices();
    let sigma = NodeField::constant(n, 1.0);
    let flux: Vec<f64> = mesh
        .boundary_loop
        .iter()
        .map(|&b| {
            let v = mesh.vertices[b];
            let theta = v[1].atan2(v[0]);
            theta.cos()
        })
        .collect();
    let u = solve_neumann(mesh, &sigma, &flux)?;
    // u = r cos(theta) = x.
    let exact: Vec<f64> = mesh.vertices.iter().map(|v| v[0]).collect();
    let mut err: Vec<f64> = u
        .values
        .iter()
        .zip(&exact)
        .map(|(uh, ue)| uh - ue)
        .collect();
    let mean = mesh_mean(mesh, &err);
    for e in err.iter_mut() {
        *e -= mean;
    }
    Ok(l2_norm(mesh, &err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_disk_mesh;

    fn desk_solver(nv: usize, p: usize, seed: u64) -> CemSolver {
        let mesh = build_disk_mesh(nv, seed).unwrap();
        let electrodes = place_electrodes(&mesh, p, 0.5).unwrap();
        let proto = protocol(ProtocolKind::OppositeAdjacent, p, DEFAULT_CURRENT).unwrap();
        CemSolver::new(mesh, electrodes, proto).unwrap()
    }

    #[test]
    fn electrode_arcs_equal_size_on_uniform_ring() {
        let mesh = build_disk_mesh(170, 8).unwrap();
        assert!(mesh.boundary_loop.len() >= 32);
        let p = 4;
        let cfg = place_electrodes(&mesh, p, 0.5).unwrap();
        assert_eq!(cfg.electrode_nodes.len(), p);
        let nb = mesh.boundary_loop.len();
        let expect = (nb as f64 * 0.5 / p as f64).round() as usize;
        for nodes in &cfg.electrode_nodes {
            let s = nodes.len();
            assert!(
                s + 1 >= expect && s <= expect + 1,
                "arc size {s} vs expected {expect}"
            );
        }
    }

    #[test]
    fn electrode_arcs_exact_count_on_exact_ring() {
        // Hand-built ring of 32 nodes: p = 4 at coverage 0.5 gives 4 each.
        let nb = 32;
        let mut vertices = Vec::new();
        for k in 0..nb {
            let t = 2.0 * std::f64::consts::PI * k as f64 / nb as f64;
            vertices.push([t.cos(), t.sin()]);
        }
        vertices.push([0.0, 0.0]);
        let mut triangles = Vec::new();
        for k in 0..nb {
            triangles.push([k, (k + 1) % nb, nb]);
        }
        let mesh = TriMesh {
            vertices,
            triangles,
            boundary_loop: (0..nb).collect(),
        };
        let cfg = place_electrodes(&mesh, 4, 0.5).unwrap();
        for nodes in &cfg.electrode_nodes {
            assert_eq!(nodes.len(), 4);
        }
    }

    #[test]
    fn thirty_two_electrodes_on_paper_scale_mesh() {
        let mesh = build_disk_mesh(1600, 4).unwrap();
        let cfg = place_electrodes(&mesh, 32, 0.5).unwrap();
        assert_eq!(cfg.count, 32);
        for nodes in &cfg.electrode_nodes {
            assert!(nodes.len() >= 2);
        }
    }

    #[test]
    fn adjacent_protocol_208_measurements() {
        let proto = protocol(ProtocolKind::AdjacentAdjacent, 16, DEFAULT_CURRENT).unwrap();
        assert_eq!(proto.patterns.len(), 16);
        assert_eq!(proto.num_measurements(), 208);
    }

    #[test]
    fn opposite_protocol_measurement_counts() {
        // Excluding the four adjacent pairs touching a driven electrode
        // leaves p - 4 measurements per pattern (p >= 6); p = 4 degenerates
        // to an empty protocol, which stays constructible for the
        // sigma-independent-gradient case.
        let proto = protocol(ProtocolKind::OppositeAdjacent, 16, DEFAULT_CURRENT).unwrap();
        assert_eq!(proto.num_measurements(), 16 * 12);
        let empty = protocol(ProtocolKind::OppositeAdjacent, 4, DEFAULT_CURRENT).unwrap();
        assert_eq!(empty.num_measurements(), 0);
    }

    #[test]
    fn empty_protocol_gradient_is_zero() {
        let mesh = build_disk_mesh(60, 3).unwrap();
        let electrodes = place_electrodes(&mesh, 4, 0.5).unwrap();
        let proto = protocol(ProtocolKind::OppositeAdjacent, 4, DEFAULT_CURRENT).unwrap();
        let solver = CemSolver::new(mesh, electrodes, proto).unwrap();
        let sigma = NodeField::constant(solver.num_nodes(), 1.0);
        let g = adjoint_jacobian_vjp(&solver, &sigma, &[]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patterns_conserve_charge() {
        for kind in [ProtocolKind::OppositeAdjacent, ProtocolKind::AdjacentAdjacent] {
            let proto = protocol(kind, 16, DEFAULT_CURRENT).unwrap();
            for pat in &proto.patterns {
                assert!(pat.iter().sum::<f64>().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn opposite_pattern_drives_opposite_pair() {
        let proto = protocol(ProtocolKind::OppositeAdjacent, 4, 1.0).unwrap();
        assert_eq!(proto.patterns[0], vec![1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn odd_p_rejected_for_opposite() {
        assert!(protocol(ProtocolKind::OppositeAdjacent, 7, 1.0).is_err());
    }

    #[test]
    fn zero_pattern_gives_zero_solution() {
        let solver = desk_solver(120, 8, 3);
        let sigma = NodeField::constant(solver.num_nodes(), 1.0);
        let (u, u_el) = solve_cem(&solver, &sigma, &vec![0.0; 8]).unwrap();
        assert!(u.values.iter().all(|&v| v.abs() < 1e-12));
        assert!(u_el.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn joint_scaling_inverts_voltages() {
        let mesh = build_disk_mesh(120, 3).unwrap();
        let mut electrodes = place_electrodes(&mesh, 8, 0.5).unwrap();
        let proto = protocol(ProtocolKind::OppositeAdjacent, 8, DEFAULT_CURRENT).unwrap();
        let solver = CemSolver::new(mesh.clone(), electrodes.clone(), proto.clone()).unwrap();
        let sigma = NodeField::constant(solver.num_nodes(), 1.0);
        let y1 = forward(&solver, &sigma).unwrap();

        let c = 2.5;
        for z in electrodes.contact_impedances.iter_mut() {
            *z /= c;
        }
        let solver2 = CemSolver::new(mesh, electrodes, proto).unwrap();
        let sigma2 = NodeField::constant(solver2.num_nodes(), c);
        let y2 = forward(&solver2, &sigma2).unwrap();
        for (a, b) in y1.y.iter().zip(&y2.y) {
            assert!((a / c - b).abs() < 1e-12 * a.abs().max(1e-12), "{a} {b}");
        }
    }

    #[test]
    fn electrode_currents_reproduce_pattern() {
        let solver = desk_solver(200, 8, 5);
        let sigma = NodeField::constant(solver.num_nodes(), 1.3);
        let fact = solver.assemble(&sigma).unwrap();
        let pat = solver.protocol.patterns[2].clone();
        let (u, u_el) = fact.solve_pattern(&pat).unwrap();
        // Recover I_l = (1/z_l) * (U_l |e_l| - int_e_l u ds).
        for (l, segs) in solver.segments.iter().enumerate() {
            let inv_z = 1.0 / solver.electrodes.contact_impedances[l];
            let mut current = 0.0;
            for &(a, b, h) in segs {
                current += inv_z * (u_el[l] * h - h * (u[a] + u[b]) / 2.0);
            }
            let scale = pat.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            assert!(
                (current - pat[l]).abs() <= 1e-8 * scale,
                "electrode {l}: {current} vs {}",
                pat[l]
            );
        }
    }

    #[test]
    fn grounded_voltages_sum_to_zero() {
        let solver = desk_solver(150, 8, 7);
        let sigma = NodeField::constant(solver.num_nodes(), 0.8);
        let fact = solver.assemble(&sigma).unwrap();
        let (_, u_el) = fact.solve_pattern(&solver.protocol.patterns[0].clone()).unwrap();
        assert!(u_el.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn reciprocity_on_small_mesh() {
        let mesh = build_disk_mesh(150, 9).unwrap();
        let electrodes = place_electrodes(&mesh, 8, 0.5).unwrap();
        let proto = protocol(ProtocolKind::AdjacentAdjacent, 8, 1.0).unwrap();
        let solver = CemSolver::new(mesh, electrodes, proto).unwrap();
        let mut sigma = NodeField::constant(solver.num_nodes(), 1.0);
        // Mild inhomogeneity so the test is not trivially symmetric.
        for (i, v) in sigma.values.iter_mut().enumerate() {
            *v += 0.3 * ((i as f64) * 0.37).sin().abs();
        }
        let fact = solver.assemble(&sigma).unwrap();
        let drive = |a: usize, b: usize| {
            let mut pat = vec![0.0; 8];
            pat[a] = 1.0;
            pat[b] = -1.0;
            fact.solve_pattern(&pat).unwrap().1
        };
        let u_ab = drive(0, 1);
        let u_cd = drive(4, 5);
        let m1 = u_ab[4] - u_ab[5];
        let m2 = u_cd[0] - u_cd[1];
        assert!(
            (m1 - m2).abs() <= 1e-8 * m1.abs().max(1e-300),
            "reciprocity violated: {m1} vs {m2}"
        );
    }

    #[test]
    fn central_inclusion_lowers_driven_pair_voltage() {
        let solver = desk_solver(250, 8, 11);
        let n = solver.num_nodes();
        let homog = NodeField::constant(n, 1.0);
        let mut incl = NodeField::constant(n, 1.0);
        for (i, v) in solver.mesh.vertices.iter().enumerate() {
            if (v[0] * v[0] + v[1] * v[1]).sqrt() < 0.35 {
                incl.values[i] = 2.0;
            }
        }
        let mut pat = vec![0.0; 8];
        pat[0] = DEFAULT_CURRENT;
        pat[4] = -DEFAULT_CURRENT;
        let f1 = solver.assemble(&homog).unwrap();
        let f2 = solver.assemble(&incl).unwrap();
        let (_, u1) = f1.solve_pattern(&pat).unwrap();
        let (_, u2) = f2.solve_pattern(&pat).unwrap();
        let v1 = (u1[0] - u1[4]).abs();
        let v2 = (u2[0] - u2[4]).abs();
        assert!(v2 < v1, "inclusion {v2} vs homogeneous {v1}");
    }

    #[test]
    fn same_field_same_measurements() {
        // An "inclusion" of background conductivity changes nothing.
        let solver = desk_solver(150, 8, 13);
        let a = NodeField::constant(solver.num_nodes(), 1.0);
        let ya = forward(&solver, &a).unwrap();
        let yb = forward(&solver, &a.clone()).unwrap();
        assert_eq!(ya.y, yb.y);
        assert_eq!(ya.noise_kind, NoiseKind::None);
    }

    #[test]
    fn noise_levels_match_definition() {
        let clean = MeasurementSet {
            y: vec![0.5, -1.0, 0.25],
            sigma_y: 0.0,
            noise_kind: NoiseKind::None,
        };
        let noisy = add_noise(&clean, NoiseKind::Gaussian, 2e-3, 1);
        assert!((noisy.sigma_y - 2e-3).abs() < 1e-15);
        let noisy2 = add_noise(&clean, NoiseKind::Laplace, 1e-2, 1);
        assert!((noisy2.sigma_y - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn laplace_noise_std_matches_sigma() {
        let m = 100_000;
        let clean = MeasurementSet {
            y: vec![1.0; m],
            sigma_y: 0.0,
            noise_kind: NoiseKind::None,
        };
        let noisy = add_noise(&clean, NoiseKind::Laplace, 0.1, 42);
        let mean: f64 = noisy.y.iter().sum::<f64>() / m as f64;
        let var: f64 = noisy.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let std = var.sqrt();
        assert!(
            (std - noisy.sigma_y).abs() < 0.02 * noisy.sigma_y,
            "std {std} vs sigma {}",
            noisy.sigma_y
        );
    }

    #[test]
    fn deterministic_noise_per_seed() {
        let clean = MeasurementSet {
            y: vec![0.1, 0.2, 0.3],
            sigma_y: 0.0,
            noise_kind: NoiseKind::None,
        };
        let a = add_noise(&clean, NoiseKind::Gaussian, 1e-2, 7);
        let b = add_noise(&clean, NoiseKind::Gaussian, 1e-2, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let solver = desk_solver(120, 8, 17);
        let sigma = NodeField::constant(solver.num_nodes(), 1.0);
        let w = vec![0.0; solver.num_measurements()];
        let g = adjoint_jacobian_vjp(&solver, &sigma, &w).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        use rand::Rng;
        let mesh = build_disk_mesh(50, 19).unwrap();
        let electrodes = place_electrodes(&mesh, 4, 0.5).unwrap();
        let proto = protocol(ProtocolKind::AdjacentAdjacent, 4, DEFAULT_CURRENT).unwrap();
        assert!(proto.num_measurements() > 0);
        let solver = CemSolver::new(mesh, electrodes, proto).unwrap();
        let n = solver.num_nodes();
        let mut rng = seeds::rng(5, "fd-test");
        let sigma = NodeField::new((0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect());
        let w: Vec<f64> = (0..solver.num_measurements())
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let grad = adjoint_jacobian_vjp(&solver, &sigma, &w).unwrap();

        let objective = |s: &NodeField| -> f64 {
            let y = forward(&solver, s).unwrap().y;
            y.iter().zip(&w).map(|(yi, wi)| yi * wi).sum()
        };
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let gnorm = grad.norm() / (n as f64).sqrt();
        for j in (0..n).step_by(3) {
            let mut sp = sigma.clone();
            sp.values[j] += h;
            let mut sm = sigma.clone();
            sm.values[j] -= h;
            let fd = (objective(&sp) - objective(&sm)) / (2.0 * h);
            let denom = fd.abs().max(gnorm.abs()).max(1e-12);
            max_rel = max_rel.max((fd - grad.values[j]).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn vjp_linear_in_weights() {
        use rand::Rng;
        let solver = desk_solver(100, 8, 23);
        let n = solver.num_nodes();
        let sigma = NodeField::constant(n, 1.1);
        let mut rng = seeds::rng(9, "vjp-lin");
        let m = solver.num_measurements();
        let w1: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
        let w2: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let g1 = adjoint_jacobian_vjp(&solver, &sigma, &w1).unwrap();
        let g2 = adjoint_jacobian_vjp(&solver, &sigma, &w2).unwrap();
        let gc = adjoint_jacobian_vjp(&solver, &sigma, &combo).unwrap();
        for i in 0..n {
            let lin = 2.0 * g1.values[i] - 3.0 * g2.values[i];
            assert!((lin - gc.values[i]).abs() < 1e-10 * lin.abs().max(1e-10));
        }
    }

    #[test]
    fn continuum_mode_converges_at_second_order() {
        let e1 = {
            let mesh = build_disk_mesh(150, 31).unwrap();
            (mesh.mean_edge_length(), continuum_check_l2_error(&mesh).unwrap())
        };
        let e2 = {
            let mesh = build_disk_mesh(600, 31).unwrap();
            (mesh.mean_edge_length(), continuum_check_l2_error(&mesh).unwrap())
        };
        let rate = (e1.1 / e2.1).ln() / (e1.0 / e2.0).ln();
        assert!(rate >= 1.8, "convergence rate {rate}");
    }
}
