//! Conditional reconstruction by regularized diffusion posterior sampling.
//!
//! Each reverse step estimates the noise, forms the Tweedie denoised state
//! x0_hat, takes an unconditional DDIM/DDPM transition, and then nudges the
//! result by the gradient of
//!
//! ```text
//! || y - F(x0_hat(x_t)) ||^2 + lambda_t * R(x0_hat(x_t))
//! ```
//!
//! with an adaptive step size eta / (||y - y0|| + eps) and a positivity
//! projection max(., eps). With eta = 0 the loop reduces exactly (bitwise)
//! to the unconditional sampler.
//!
//! The measurement noise level enters only through the adaptive
//! regularization weight lambda_t; the fidelity term stays unweighted, so
//! noiseless runs absorb the 1/(2 sigma^2) factor into eta.

use crate::autodiff::{CustomVjp, Tape};
use crate::diffusion::{
    ddim_step, ddpm_step, initial_state, tweedie_x0, NoiseSchedule, SamplerKind,
    StepCoefficients,
};
use crate::error::{GraphDpsError, Result};
use crate::fem::{adjoint_jacobian_vjp, forward, CemSolver, MeasurementSet, NoiseKind};
use crate::mesh::GraphLevel;
use crate::score::{dgn_forward, dgn_forward_on_tape, HierarchyIndex, MountedParams, ScoreNetConfig, ScoreNetParams};
use crate::NodeField;
use ndarray::Array2;
use std::sync::Arc;

/// Default smoothing for the graph total-variation penalty.
pub const DEFAULT_TV_DELTA: f64 = 1e-6;
/// Default positivity floor / step-size guard.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-3;

/// Explicit regularizer choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerKind {
    None,
    /// ||x||^2.
    Tik,
    /// ||D x||^2 over undirected mesh edges.
    GTik,
    /// Anisotropic graph TV: one-ring absolute differences, every undirected
    /// edge counted twice, smoothed through sqrt(u^2 + delta^2).
    Tv,
}

impl RegularizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Tik => "tik",
            RegularizerKind::GTik => "gtik",
            RegularizerKind::Tv => "tv",
        }
    }

    pub fn parse(s: &str) -> Option<RegularizerKind> {
        match s {
            "none" => Some(RegularizerKind::None),
            "tik" => Some(RegularizerKind::Tik),
            "gtik" => Some(RegularizerKind::GTik),
            "tv" => Some(RegularizerKind::Tv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub tv_delta: f64,
}

impl Regularizer {
    pub fn new(kind: RegularizerKind) -> Self {
        Self {
            kind,
            tv_delta: DEFAULT_TV_DELTA,
        }
    }

    pub fn none() -> Self {
        Self::new(RegularizerKind::None)
    }
}

/// Level-1 edge indices in tape-ready form.
#[derive(Debug, Clone)]
pub struct RegGraph {
    node_count: usize,
    dir_src: Arc<Vec<usize>>,
    dir_dst: Arc<Vec<usize>>,
    und_src: Arc<Vec<usize>>,
    und_dst: Arc<Vec<usize>>,
}

impl RegGraph {
    pub fn from_level(level: &GraphLevel) -> Self {
        let dir_src = level.edge_list.iter().map(|&(i, _)| i).collect();
        let dir_dst = level.edge_list.iter().map(|&(_, j)| j).collect();
        let und: Vec<(usize, usize)> = level.undirected_edges();
        Self {
            node_count: level.node_count,
            dir_src: Arc::new(dir_src),
            dir_dst: Arc::new(dir_dst),
            und_src: Arc::new(und.iter().map(|&(i, _)| i).collect()),
            und_dst: Arc::new(und.iter().map(|&(_, j)| j).collect()),
        }
    }
}

/// Record R(x) on the tape; returns None for the no-regularizer case.
fn record_regularizer(
    tape: &mut Tape,
    x: crate::autodiff::Var,
    graph: &RegGraph,
    reg: &Regularizer,
) -> Option<crate::autodiff::Var> {
    debug_assert_eq!(tape.value(x).dim().0, graph.node_count);
    match reg.kind {
        RegularizerKind::None => None,
        RegularizerKind::Tik => {
            let sq = tape.square(x);
            Some(tape.sum(sq))
        }
        RegularizerKind::GTik => {
            let xi = tape.gather_rows(x, graph.und_src.clone());
            let xj = tape.gather_rows(x, graph.und_dst.clone());
            let d = tape.sub(xj, xi);
            let sq = tape.square(d);
            Some(tape.sum(sq))
        }
        RegularizerKind::Tv => {
            let xi = tape.gather_rows(x, graph.dir_src.clone());
            let xj = tape.gather_rows(x, graph.dir_dst.clone());
            let d = tape.sub(xj, xi);
            let a = tape.abs_smooth(d, reg.tv_delta);
            Some(tape.sum(a))
        }
    }
}

/// Regularizer value and gradient at `x`, by tape.
pub fn reg_value_and_grad(
    x: &NodeField,
    level: &GraphLevel,
    reg: &Regularizer,
) -> Result<(f64, NodeField)> {
    if x.len() != level.node_count {
        return Err(GraphDpsError::Shape(format!(
            "field has {} values for {} nodes",
            x.len(),
            level.node_count
        )));
    }
    let graph = RegGraph::from_level(level);
    let mut tape = Tape::new();
    let xv = tape.leaf(Array2::from_shape_fn((x.len(), 1), |(i, _)| x.values[i]));
    match record_regularizer(&mut tape, xv, &graph, reg) {
        None => Ok((0.0, NodeField::constant(x.len(), 0.0))),
        Some(r) => {
            let value = tape.value(r)[(0, 0)];
            let grads = tape.backward(r)?;
            Ok((value, NodeField::new(grads.wrt(xv).column(0).to_vec())))
        }
    }
}

/// lambda policy: a fixed weight or the clamped theoretical schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSetting {
    Fixed(f64),
    Adaptive {
        scale: f64,
        lambda_min: f64,
        lambda_max: f64,
    },
}

/// How the guidance gradient treats the map x_t -> x0_hat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Differentiate through the score network (backpropagation through
    /// eps_theta and the forward operator).
    FullBackprop,
    /// Replace d x0_hat / d x_t by 1/sqrt(abar_t) (cheap diagonal
    /// approximation).
    TweedieJacobianApprox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Base step size in [0, 1]; 0 disables guidance entirely.
    pub eta: f64,
    /// Positive constant shared by the step-size guard and the projection.
    pub eps_floor: f64,
    pub lambda: LambdaSetting,
    pub grad_mode: GradMode,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 {
            return Err(GraphDpsError::Sampling {
                step: 0,
                reason: format!("eta {} must be >= 0", self.eta),
            });
        }
        if self.eps_floor <= 0.0 {
            return Err(GraphDpsError::Sampling {
                step: 0,
                reason: "eps_floor must be positive".into(),
            });
        }
        if let LambdaSetting::Adaptive {
            lambda_min,
            lambda_max,
            ..
        } = self.lambda
        {
            if lambda_min > lambda_max {
                return Err(GraphDpsError::Sampling {
                    step: 0,
                    reason: format!("lambda_min {lambda_min} > lambda_max {lambda_max}"),
                });
            }
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            eps_floor: DEFAULT_EPS_FLOOR,
            lambda: LambdaSetting::Fixed(0.0),
            grad_mode: GradMode::FullBackprop,
        }
    }
}

/// Adaptive step size eta_t = eta / (||y - y0|| + eps).
pub fn adaptive_eta(eta: f64, residual_norm: f64, eps_floor: f64) -> f64 {
    eta / (residual_norm + eps_floor)
}

/// Clamped theoretical regularization weight
/// lambda_t = clip(scale * sigma_y^2 * sqrt(abar_t) / (1 - abar_t), min, max).
pub fn adaptive_lambda(
    t: usize,
    schedule: &NoiseSchedule,
    sigma_y: f64,
    lambda_min: f64,
    lambda_max: f64,
    scale: f64,
) -> f64 {
    let abar = schedule.alpha_bar_at(t);
    let theory = scale * sigma_y * sigma_y * abar.sqrt() / (1.0 - abar);
    theory.clamp(lambda_min, lambda_max)
}

/// Guidance correction of the conditional posterior mean:
/// Delta_t = (1 - abar_t)/sqrt(abar_t) * combined_score.
pub fn delta_t(t: usize, schedule: &NoiseSchedule, combined_score: &NodeField) -> NodeField {
    let abar = schedule.alpha_bar_at(t);
    let c = (1.0 - abar) / abar.sqrt();
    NodeField::new(combined_score.values.iter().map(|&s| c * s).collect())
}

/// Schedule-implied step size A_t * (1 - abar_t) / sqrt(abar_t) of the
/// compact conditional-step form.
pub fn theoretical_eta(t: usize, schedule: &NoiseSchedule, coefficients: &StepCoefficients) -> f64 {
    let abar = schedule.alpha_bar_at(t);
    coefficients.a * (1.0 - abar) / abar.sqrt()
}

/// Positivity projection max(x, floor).
pub fn project_floor(x: &NodeField, floor: f64) -> NodeField {
    NodeField::new(x.values.iter().map(|&v| v.max(floor)).collect())
}

/// Forward-operator boundary for the tape: clamps its input at the
/// conductivity floor (zero gradient on clamped entries) and delegates the
/// backward pass to the adjoint Jacobian.
pub struct FemGuidanceOp {
    pub solver: Arc<CemSolver>,
    pub floor: f64,
}

impl FemGuidanceOp {
    fn clamp(&self, input: &Array2<f64>) -> NodeField {
        NodeField::new(input.column(0).iter().map(|&v| v.max(self.floor)).collect())
    }
}

impl CustomVjp for FemGuidanceOp {
    fn name(&self) -> &str {
        "cem_forward"
    }

    fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        let sigma = self.clamp(input);
        let y = forward(&self.solver, &sigma)?;
        Ok(Array2::from_shape_fn((y.y.len(), 1), |(i, _)| y.y[i]))
    }

    fn backward(&self, input: &Array2<f64>, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        let sigma = self.clamp(input);
        let weights: Vec<f64> = upstream.column(0).to_vec();
        let grad = adjoint_jacobian_vjp(&self.solver, &sigma, &weights)?;
        Ok(Array2::from_shape_fn((grad.len(), 1), |(i, _)| {
            if input[(i, 0)] > self.floor {
                grad.values[i]
            } else {
                0.0
            }
        }))
    }
}

/// Output of one guidance evaluation.
pub struct GuidanceEval {
    /// Gradient of the guided objective with respect to x_t.
    pub grad: NodeField,
    /// Euclidean residual ||y - F(x0_hat)||.
    pub residual_norm: f64,
    /// Noise prediction at (x_t, t).
    pub eps_pred: NodeField,
}

/// Gradient of ||y - F(x0_hat(x_t))||^2 + lambda_t R(x0_hat(x_t)) with
/// respect to x_t.
#[allow(clippy::too_many_arguments)]
pub fn guidance_gradient(
    x_t: &NodeField,
    t: usize,
    params: &ScoreNetParams,
    net_config: &ScoreNetConfig,
    index: &HierarchyIndex,
    schedule: &NoiseSchedule,
    solver: &Arc<CemSolver>,
    reg_graph: &RegGraph,
    y: &MeasurementSet,
    reg: &Regularizer,
    lambda_t: f64,
    grad_mode: GradMode,
    eps_floor: f64,
) -> Result<GuidanceEval> {
    let n = x_t.len();
    let abar = schedule.alpha_bar_at(t);
    let inv_sa = 1.0 / abar.sqrt();
    let noise_coeff = (1.0 - abar).sqrt() * inv_sa;
    let fem_op = Arc::new(FemGuidanceOp {
        solver: solver.clone(),
        floor: eps_floor,
    });

    match grad_mode {
        GradMode::FullBackprop => {
            let mut tape = Tape::new();
            let mounted = MountedParams::mount(&mut tape, params);
            let x_var = tape.leaf(Array2::from_shape_fn((n, 1), |(i, _)| x_t.values[i]));
            let (eps_var, _) =
                dgn_forward_on_tape(&mut tape, x_var, t, index, net_config, &mounted);
            // Tweedie on tape: x0 = x_t / sqrt(abar) - noise_coeff * eps.
            let xs = tape.scale(x_var, inv_sa);
            let es = tape.scale(eps_var, noise_coeff);
            let x0_var = tape.sub(xs, es);

            let y0_var = tape.custom(x0_var, fem_op)?;
            let y_const = tape.constant(Array2::from_shape_fn((y.y.len(), 1), |(i, _)| y.y[i]));
            let diff = tape.sub(y_const, y0_var);
            let sq = tape.square(diff);
            let fid = tape.sum(sq);

            let loss = match record_regularizer(&mut tape, x0_var, reg_graph, reg) {
                Some(r) if lambda_t != 0.0 => {
                    let r_scaled = tape.scale(r, lambda_t);
                    tape.add(fid, r_scaled)
                }
                _ => fid,
            };
            let residual_norm = tape.value(fid)[(0, 0)].max(0.0).sqrt();
            let eps_pred = NodeField::new(tape.value(eps_var).column(0).to_vec());
            let grads = tape.backward(loss)?;
            Ok(GuidanceEval {
                grad: NodeField::new(grads.wrt(x_var).column(0).to_vec()),
                residual_norm,
                eps_pred,
            })
        }
        GradMode::TweedieJacobianApprox => {
            let out = dgn_forward(x_t, t, index, net_config, params);
            let x0_hat = tweedie_x0(x_t, t, &out.eps, schedule)?;

            let mut tape = Tape::new();
            let x0_var = tape.leaf(Array2::from_shape_fn((n, 1), |(i, _)| x0_hat.values[i]));
            let y0_var = tape.custom(x0_var, fem_op)?;
            let y_const = tape.constant(Array2::from_shape_fn((y.y.len(), 1), |(i, _)| y.y[i]));
            let diff = tape.sub(y_const, y0_var);
            let sq = tape.square(diff);
            let fid = tape.sum(sq);
            let loss = match record_regularizer(&mut tape, x0_var, reg_graph, reg) {
                Some(r) if lambda_t != 0.0 => {
                    let r_scaled = tape.scale(r, lambda_t);
                    tape.add(fid, r_scaled)
                }
                _ => fid,
            };
            let residual_norm = tape.value(fid)[(0, 0)].max(0.0).sqrt();
            let grads = tape.backward(loss)?;
            let g0 = grads.wrt(x0_var);
            Ok(GuidanceEval {
                grad: NodeField::new(g0.column(0).iter().map(|&g| g * inv_sa).collect()),
                residual_norm,
                eps_pred: out.eps,
            })
        }
    }
}

/// Per-step record for the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStat {
    pub t: usize,
    pub residual: f64,
    pub lambda_t: f64,
    pub eta_t: f64,
}

/// Summary snapshot of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconSummary {
    pub sampler: SamplerKind,
    pub regularizer: RegularizerKind,
    pub steps: usize,
    pub final_residual: f64,
}

#[derive(Debug, Clone)]
pub struct ReconResult {
    pub x0_star: NodeField,
    pub history: Vec<StepStat>,
    pub summary: ReconSummary,
}

/// Shared context for conditional reconstruction.
pub struct ReconContext<'a> {
    pub params: &'a ScoreNetParams,
    pub net_config: &'a ScoreNetConfig,
    pub index: &'a HierarchyIndex,
    pub schedule: &'a NoiseSchedule,
    pub solver: Arc<CemSolver>,
    pub reg_graph: RegGraph,
}

impl<'a> ReconContext<'a> {
    pub fn new(
        params: &'a ScoreNetParams,
        net_config: &'a ScoreNetConfig,
        index: &'a HierarchyIndex,
        schedule: &'a NoiseSchedule,
        solver: Arc<CemSolver>,
        level1: &GraphLevel,
    ) -> Self {
        Self {
            params,
            net_config,
            index,
            schedule,
            solver,
            reg_graph: RegGraph::from_level(level1),
        }
    }
}

/// Full reverse loop with guidance (Algorithm: score estimate, Tweedie,
/// unconditional transition, forward solve, adaptive step, gradient step,
/// positivity projection).
pub fn reconstruct(
    ctx: &ReconContext<'_>,
    y: &MeasurementSet,
    reg: &Regularizer,
    guidance: &GuidanceConfig,
    sampler: SamplerKind,
    seed: u64,
) -> Result<ReconResult> {
    guidance.validate()?;
    if y.y.len() != ctx.solver.num_measurements() {
        return Err(GraphDpsError::Shape(format!(
            "measurement vector has {} entries, protocol expects {}",
            y.y.len(),
            ctx.solver.num_measurements()
        )));
    }
    let schedule = ctx.schedule;
    let n = ctx.index.fine_node_count();
    let guidance_off = guidance.eta == 0.0;

    let mut x = initial_state(n, seed);
    let mut history = Vec::with_capacity(schedule.steps);
    let mut final_residual = f64::NAN;

    for t in (1..=schedule.steps).rev() {
        if guidance_off {
            // Pure unconditional sampling: identical code path and seeds as
            // the unconditional sampler, no projection.
            let out = dgn_forward(&x, t, ctx.index, ctx.net_config, ctx.params);
            x = match sampler {
                SamplerKind::Ddim => ddim_step(&x, t, &out.eps, schedule)?,
                SamplerKind::Ddpm => ddpm_step(&x, t, &out.eps, schedule, seed)?,
            };
            history.push(StepStat {
                t,
                residual: f64::NAN,
                lambda_t: 0.0,
                eta_t: 0.0,
            });
            continue;
        }

        let lambda_t = match guidance.lambda {
            LambdaSetting::Fixed(l) => l,
            LambdaSetting::Adaptive {
                scale,
                lambda_min,
                lambda_max,
            } => adaptive_lambda(t, schedule, y.sigma_y, lambda_min, lambda_max, scale),
        };

        let eval = guidance_gradient(
            &x,
            t,
            ctx.params,
            ctx.net_config,
            ctx.index,
            schedule,
            &ctx.solver,
            &ctx.reg_graph,
            y,
            reg,
            lambda_t,
            guidance.grad_mode,
            guidance.eps_floor,
        )
        .map_err(|e| GraphDpsError::Sampling {
            step: t,
            reason: e.to_string(),
        })?;

        let transitioned = match sampler {
            SamplerKind::Ddim => ddim_step(&x, t, &eval.eps_pred, schedule)?,
            SamplerKind::Ddpm => ddpm_step(&x, t, &eval.eps_pred, schedule, seed)?,
        };
        let eta_t = adaptive_eta(guidance.eta, eval.residual_norm, guidance.eps_floor);
        let stepped = NodeField::new(
            transitioned
                .values
                .iter()
                .zip(&eval.grad.values)
                .map(|(&v, &g)| v - eta_t * g)
                .collect(),
        );
        x = project_floor(&stepped, guidance.eps_floor);
        final_residual = eval.residual_norm;
        history.push(StepStat {
            t,
            residual: eval.residual_norm,
            lambda_t,
            eta_t,
        });
    }

    Ok(ReconResult {
        x0_star: x,
        history,
        summary: ReconSummary {
            sampler,
            regularizer: reg.kind,
            steps: schedule.steps,
            final_residual,
        },
    })
}

/// DDIM-driven regularized posterior sampling.
pub fn ddim_rdps(
    ctx: &ReconContext<'_>,
    y: &MeasurementSet,
    reg: &Regularizer,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ReconResult> {
    reconstruct(ctx, y, reg, guidance, SamplerKind::Ddim, seed)
}

/// DDPM-driven variant with stochastic transitions.
pub fn ddpm_rdps(
    ctx: &ReconContext<'_>,
    y: &MeasurementSet,
    reg: &Regularizer,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ReconResult> {
    reconstruct(ctx, y, reg, guidance, SamplerKind::Ddpm, seed)
}

/// Noise annotation string used in logs and benches.
pub fn noise_label(y: &MeasurementSet) -> String {
    match y.noise_kind {
        NoiseKind::None => "none".to_string(),
        kind => format!("{}:{:.3e}", kind.as_str(), y.sigma_y),
    }
}
