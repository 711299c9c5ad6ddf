//! Run orchestration: the command implementations behind the CLI, plus the
//! numerical validation suite.
//!
//! Every command is deterministic given the run configuration: meshes,
//! phantoms, noise, initialization, and sampling draw from named sub-streams
//! of the base seed. Artifacts land under `output.dir` and carry the config
//! hash.

use crate::config::RunConfig;
use crate::diffusion::{
    make_schedule, sample_unconditional, tweedie_x0, NoiseSchedule, ScheduleKind,
    StepCoefficients,
};
use crate::error::{GraphDpsError, Result};
use crate::fem::{
    add_noise, adjoint_jacobian_vjp, continuum_check_l2_error, forward, place_electrodes,
    protocol, CemSolver, NoiseKind, ProtocolKind,
};
use crate::io;
use crate::mesh::{build_disk_mesh, build_hierarchy, GraphHierarchy, TriMesh};
use crate::metrics::{graph_ssim, rel_err, rmse, EvalRow, MetricsConfig};
use crate::phantom::{rasterize, sample_phantom};
use crate::sampler::{delta_t, reconstruct, ReconContext, ReconResult};
use crate::score::{init_params, HierarchyIndex, ScoreNetParams};
use crate::seeds;
use crate::training::{train, AdamState, TrainLogRow};
use crate::NodeField;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Artifact locations of a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            root: PathBuf::from(&config.output_dir),
        }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("run.config")
    }

    pub fn fine_mesh(&self) -> PathBuf {
        self.root.join("fine.mesh")
    }

    pub fn coarse_mesh(&self) -> PathBuf {
        self.root.join("coarse.mesh")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn epoch_checkpoint_dir(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("checkpoint_epoch_{epoch}"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn sample_field(&self) -> PathBuf {
        self.root.join("sample.field")
    }

    pub fn bench_csv(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
}

/// Deterministic in-memory assembly of the run's geometry and solver stack.
pub struct Workspace {
    pub config: RunConfig,
    pub fine_mesh: TriMesh,
    pub coarse_mesh: TriMesh,
    pub hierarchy: GraphHierarchy,
    pub index: HierarchyIndex,
    pub fine_solver: Arc<CemSolver>,
    pub coarse_solver: Arc<CemSolver>,
    pub schedule: NoiseSchedule,
}

impl Workspace {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let fine_mesh = build_disk_mesh(config.mesh_fine_target, config.mesh_fine_seed)?;
        let coarse_mesh = build_disk_mesh(config.mesh_coarse_target, config.mesh_coarse_seed)?;
        let hierarchy = build_hierarchy(&coarse_mesh, config.net_depth, config.net_knn_k)?;
        let index = HierarchyIndex::new(&hierarchy);

        let make_solver = |mesh: &TriMesh| -> Result<Arc<CemSolver>> {
            let mut electrodes =
                place_electrodes(mesh, config.electrode_count, config.electrode_coverage)?;
            for z in electrodes.contact_impedances.iter_mut() {
                *z = config.contact_impedance;
            }
            let proto = protocol(
                config.protocol,
                config.electrode_count,
                config.injection_current,
            )?;
            Ok(Arc::new(CemSolver::new(mesh.clone(), electrodes, proto)?))
        };
        let fine_solver = make_solver(&fine_mesh)?;
        let coarse_solver = make_solver(&coarse_mesh)?;
        let schedule = make_schedule(
            config.schedule_steps,
            ScheduleKind::Linear,
            config.beta_start,
            config.beta_end,
        )?;
        Ok(Self {
            config: config.clone(),
            fine_mesh,
            coarse_mesh,
            hierarchy,
            index,
            fine_solver,
            coarse_solver,
            schedule,
        })
    }

}

fn write_resolved_config(config: &RunConfig, paths: &RunPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root)?;
    let body = format!("{}config_hash={}\n", config.to_text(), config.hash());
    let tmp = paths.resolved_config().with_extension("tmp");
    std::fs::write(&tmp, &body)?;
    std::fs::rename(tmp, paths.resolved_config())?;
    Ok(())
}

/// Build and save both meshes.
pub fn cmd_mesh(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let hash = config.hash();
    io::save_mesh(&paths.fine_mesh(), &ws.fine_mesh, &hash)?;
    io::save_mesh(&paths.coarse_mesh(), &ws.coarse_mesh, &hash)?;
    Ok(())
}

/// Per-sample seed: hash of the base seed and the sample index, shared by
/// serial and parallel builds.
pub fn sample_seed(base_seed: u64, idx: usize) -> u64 {
    seeds::derive_indexed(base_seed, "phantom-sample", idx as u64)
}

/// Generate the dataset: per sample, rasterize the phantom on both meshes,
/// simulate clean measurements on the fine mesh, store the coarse field and
/// the measurement vector.
pub fn cmd_gen(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let spec = config.dataset_spec();
    spec.validate()?;
    let dir = paths.dataset_dir();
    std::fs::create_dir_all(&dir)?;
    let hash = config.hash();

    let results: Vec<Result<()>> = (0..spec.count)
        .into_par_iter()
        .map(|idx| {
            let seed = sample_seed(config.base_seed, idx);
            let phantom = sample_phantom(&spec, seed)?;
            let coarse_field = rasterize(&phantom, &ws.coarse_mesh);
            let fine_field = rasterize(&phantom, &ws.fine_mesh);
            let y = forward(&ws.fine_solver, &fine_field)?;
            io::save_field(&dir.join(format!("sample_{idx}.field")), &coarse_field, &hash)?;
            io::save_measurements(&dir.join(format!("sample_{idx}.meas")), &y, &hash)?;
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    let manifest = vec![
        ("config_hash".to_string(), hash),
        ("dataset.count".to_string(), spec.count.to_string()),
        ("dataset.family".to_string(), spec.family.as_str().to_string()),
        (
            "dataset.cond_range".to_string(),
            format!("{} {}", spec.conductivity_range.0, spec.conductivity_range.1),
        ),
        ("base_seed".to_string(), config.base_seed.to_string()),
        (
            "fields.normalization".to_string(),
            "raw conductivity, background 1.0".to_string(),
        ),
        ("mesh.fine_seed".to_string(), config.mesh_fine_seed.to_string()),
        ("mesh.coarse_seed".to_string(), config.mesh_coarse_seed.to_string()),
    ];
    io::save_manifest(&dir, &manifest)
}

/// Coarse-mesh training fields exactly as the dataset generator produces
/// them, without touching disk.
pub fn training_fields(config: &RunConfig, ws: &Workspace) -> Result<Vec<NodeField>> {
    let spec = config.dataset_spec();
    spec.validate()?;
    (0..spec.count)
        .map(|idx| {
            let phantom = sample_phantom(&spec, sample_seed(config.base_seed, idx))?;
            Ok(rasterize(&phantom, &ws.coarse_mesh))
        })
        .collect()
}

/// Fresh initialization plus the full training loop over in-memory fields;
/// the `epoch_hook` sees every epoch. Shared by `cmd_train` and the
/// acceptance suite.
pub fn train_in_memory(
    config: &RunConfig,
    ws: &Workspace,
    fields: &[NodeField],
    mut epoch_hook: impl FnMut(usize, &ScoreNetParams, &TrainLogRow) -> Result<()>,
) -> Result<(ScoreNetParams, Vec<TrainLogRow>)> {
    for f in fields {
        if f.len() != ws.index.fine_node_count() {
            return Err(GraphDpsError::Training(format!(
                "dataset field length {} does not match coarse mesh ({} nodes)",
                f.len(),
                ws.index.fine_node_count()
            )));
        }
    }
    let net_config = config.net_config();
    net_config.validate()?;
    let mut params = init_params(&net_config, seeds::derive(config.base_seed, "init"));
    let mut state = AdamState::new(&params);
    let train_config = config.train_config();
    let log = train(
        fields,
        &mut params,
        &mut state,
        &net_config,
        &ws.index,
        &ws.schedule,
        &train_config,
        0,
        &mut epoch_hook,
    )?;
    Ok((params, log))
}

/// Train the score network on the generated dataset; writes the final
/// checkpoint, interval checkpoints, and the training log.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<TrainLogRow>> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let (dataset, _) = io::open_dataset(&paths.dataset_dir())?;
    let fields = dataset.load_fields()?;
    let config_text = config.to_text();
    let interval = config.checkpoint_interval;

    let (params, log) = train_in_memory(config, &ws, &fields, |epoch, params, _row| {
        if interval > 0 && (epoch + 1) % interval == 0 {
            io::save_checkpoint(&paths.epoch_checkpoint_dir(epoch + 1), params, &config_text)?;
        }
        Ok(())
    })?;

    io::save_checkpoint(&paths.checkpoint_dir(), &params, &config_text)?;
    let rows: Vec<String> = log.iter().map(|r| r.to_csv()).collect();
    io::save_csv(&paths.train_log(), TrainLogRow::CSV_HEADER, &rows, &config.hash())?;
    Ok(log)
}

fn load_params(config: &RunConfig, paths: &RunPaths) -> Result<ScoreNetParams> {
    let (params, text) = io::load_checkpoint(&paths.checkpoint_dir())?;
    let stored = io::net_config_from_text(&text)?;
    let expected = config.net_config();
    if stored != expected {
        return Err(GraphDpsError::Shape(format!(
            "checkpoint network {stored:?} does not match configuration {expected:?}"
        )));
    }
    Ok(params)
}

/// Unconditional sample from the trained prior; writes `sample.field`.
pub fn cmd_sample(config: &RunConfig) -> Result<NodeField> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let params = load_params(config, &paths)?;
    let field = sample_unconditional(
        &params,
        &config.net_config(),
        &ws.index,
        &ws.schedule,
        config.sampler,
        seeds::derive(config.base_seed, "sampling"),
    )?;
    io::save_field(&paths.sample_field(), &field, &config.hash())?;
    Ok(field)
}

/// Conditional reconstruction from a measurement file; writes the field and
/// the per-step run log next to `out_stem`.
pub fn cmd_reconstruct(
    config: &RunConfig,
    meas_path: &Path,
    out_stem: &str,
) -> Result<ReconResult> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let params = load_params(config, &paths)?;
    let y = io::load_measurements(meas_path)?;
    let net_config = config.net_config();
    let ctx = ReconContext::new(
        &params,
        &net_config,
        &ws.index,
        &ws.schedule,
        ws.coarse_solver.clone(),
        &ws.hierarchy.levels[0],
    );
    let result = reconstruct(
        &ctx,
        &y,
        &config.regularizer(),
        &config.guidance_config(),
        config.sampler,
        seeds::derive(config.base_seed, "sampling"),
    )?;

    let hash = config.hash();
    io::save_field(&paths.root.join(format!("{out_stem}.field")), &result.x0_star, &hash)?;
    let rows: Vec<String> = result
        .history
        .iter()
        .map(|s| format!("{},{:.12e},{:.12e},{:.12e}", s.t, s.residual, s.lambda_t, s.eta_t))
        .collect();
    io::save_csv(
        &paths.root.join(format!("{out_stem}_log.csv")),
        "t,residual,lambda_t,eta_t",
        &rows,
        &hash,
    )?;
    Ok(result)
}

/// One bench case: held-out phantom index reconstructed with the configured
/// sampler/regularizer/noise; returns the metrics row.
fn bench_one(
    ws: &Workspace,
    ctx: &ReconContext<'_>,
    config: &RunConfig,
    idx: usize,
) -> Result<EvalRow> {
    let spec = config.dataset_spec();
    let seed = seeds::derive_indexed(config.base_seed, "bench-phantom", idx as u64);
    let phantom = sample_phantom(&spec, seed)?;
    let gt_coarse = rasterize(&phantom, &ws.coarse_mesh);
    let gt_fine = rasterize(&phantom, &ws.fine_mesh);
    let clean = forward(&ws.fine_solver, &gt_fine)?;
    let y = match config.noise_kind {
        NoiseKind::None => clean,
        kind => add_noise(
            &clean,
            kind,
            config.noise_level,
            seeds::derive_indexed(config.base_seed, "bench-noise", idx as u64),
        ),
    };
    let result = reconstruct(
        ctx,
        &y,
        &config.regularizer(),
        &config.guidance_config(),
        config.sampler,
        seeds::derive_indexed(config.base_seed, "bench-chain", idx as u64),
    )?;
    let level1 = &ws.hierarchy.levels[0];
    Ok(EvalRow {
        sample_id: idx,
        rmse: rmse(&gt_coarse, &result.x0_star)?,
        rel_err: rel_err(&gt_coarse, &result.x0_star)?,
        ssim: graph_ssim(&gt_coarse, &result.x0_star, level1, &MetricsConfig::default())?,
        sampler: config.sampler.as_str().to_string(),
        regularizer: config.regularizer.as_str().to_string(),
        noise: crate::sampler::noise_label(&y),
    })
}

/// Batch reconstruction over held-out phantoms; writes `bench.csv` with one
/// row per sample and returns the rows.
pub fn cmd_bench(config: &RunConfig) -> Result<Vec<EvalRow>> {
    let paths = RunPaths::new(config);
    write_resolved_config(config, &paths)?;
    let ws = Workspace::build(config)?;
    let params = load_params(config, &paths)?;
    let net_config = config.net_config();
    let ctx = ReconContext::new(
        &params,
        &net_config,
        &ws.index,
        &ws.schedule,
        ws.coarse_solver.clone(),
        &ws.hierarchy.levels[0],
    );

    let rows: Vec<Result<EvalRow>> = (0..config.bench_samples)
        .into_par_iter()
        .map(|idx| bench_one(&ws, &ctx, config, idx))
        .collect();
    let rows: Result<Vec<EvalRow>> = rows.into_iter().collect();
    let rows = rows?;
    let lines: Vec<String> = rows.iter().map(|r| r.to_csv()).collect();
    io::save_csv(&paths.bench_csv(), EvalRow::CSV_HEADER, &lines, &config.hash())?;
    Ok(rows)
}

/// One entry of the validation suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Schedule, coefficient-table, and Tweedie identities at T = 1000.
pub fn check_schedule_identities() -> CheckResult {
    let schedule = match make_schedule(
        1000,
        ScheduleKind::Linear,
        crate::diffusion::DEFAULT_BETA_START,
        crate::diffusion::DEFAULT_BETA_END,
    ) {
        Ok(s) => s,
        Err(e) => {
            return CheckResult {
                name: "schedule_identities",
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let mut worst: f64 = 0.0;
    for t in 1..=schedule.steps {
        let abar_t = schedule.alpha_bar_at(t);
        let abar_prev = schedule.alpha_bar_at(t - 1);
        worst = worst.max((abar_t / abar_prev - schedule.alpha_at(t)).abs());
        let bt = (1.0 - abar_prev) / (1.0 - abar_t) * schedule.beta_at(t);
        worst = worst.max((bt - schedule.beta_tilde_at(t)).abs());

        // Closed-form table against independently written expressions.
        let ddim = StepCoefficients::ddim(&schedule, t);
        let b_ref = ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt();
        let a_ref = abar_prev.sqrt() - b_ref * abar_t.sqrt();
        worst = worst.max((ddim.a - a_ref).abs()).max((ddim.b - b_ref).abs());

        let ddpm = StepCoefficients::ddpm(&schedule, t);
        let a2 = abar_prev.sqrt() * schedule.beta_at(t) / (1.0 - abar_t);
        let b2 = schedule.alpha_at(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar_t);
        worst = worst.max((ddpm.a - a2).abs()).max((ddpm.b - b2).abs());
        worst = worst.max((ddpm.noise_std.powi(2) - schedule.beta_tilde_at(t)).abs());
    }
    CheckResult {
        name: "schedule_identities",
        passed: worst <= 1e-12,
        detail: format!("worst identity deviation {worst:.3e} (tolerance 1e-12)"),
    }
}

/// Tweedie round trip with the true noise on random fields.
pub fn check_tweedie_exactness() -> CheckResult {
    use rand::Rng;
    let schedule = make_schedule(200, ScheduleKind::Linear, 1e-4, 0.1).unwrap();
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = seeds::rng_indexed(4242, "tweedie-check", trial);
        let n = 32;
        let x0 = NodeField::new((0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
        let t = rng.gen_range(1..=schedule.steps);
        let (x_t, eps) = crate::diffusion::forward_corrupt(&x0, t, &schedule, trial);
        match tweedie_x0(&x_t, t, &eps, &schedule) {
            Ok(rec) => {
                for (a, b) in rec.values.iter().zip(&x0.values) {
                    worst = worst.max((a - b).abs());
                }
            }
            Err(e) => {
                return CheckResult {
                    name: "tweedie_exactness",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    CheckResult {
        name: "tweedie_exactness",
        passed: worst <= 1e-10,
        detail: format!("worst reconstruction error {worst:.3e} (tolerance 1e-10)"),
    }
}

/// P1 continuum convergence against u = r cos(theta) across three
/// refinements.
pub fn check_fem_convergence() -> CheckResult {
    let mut pts = Vec::new();
    for &target in &[150usize, 600, 2400] {
        let mesh = match build_disk_mesh(target, 31) {
            Ok(m) => m,
            Err(e) => {
                return CheckResult {
                    name: "fem_continuum_convergence",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        };
        let h = mesh.mean_edge_length();
        match continuum_check_l2_error(&mesh) {
            Ok(e) => pts.push((h, e)),
            Err(e) => {
                return CheckResult {
                    name: "fem_continuum_convergence",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    let r1 = (pts[0].1 / pts[1].1).ln() / (pts[0].0 / pts[1].0).ln();
    let r2 = (pts[1].1 / pts[2].1).ln() / (pts[1].0 / pts[2].0).ln();
    CheckResult {
        name: "fem_continuum_convergence",
        passed: r1 >= 1.8 && r2 >= 1.8,
        detail: format!("L2 rates {r1:.3}, {r2:.3} (threshold 1.8)"),
    }
}

/// CEM reciprocity on a ~300-node mesh with 16 electrodes.
pub fn check_cem_reciprocity() -> CheckResult {
    use rand::Rng;
    let fail = |detail: String| CheckResult {
        name: "cem_reciprocity",
        passed: false,
        detail,
    };
    let mesh = match build_disk_mesh(320, 8) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let electrodes = match place_electrodes(&mesh, 16, 0.6) {
        Ok(e) => e,
        Err(e) => return fail(e.to_string()),
    };
    let proto = protocol(ProtocolKind::AdjacentAdjacent, 16, 1.0).unwrap();
    let solver = match CemSolver::new(mesh, electrodes, proto) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let n = solver.num_nodes();
    let mut rng = seeds::rng(5, "reciprocity");
    let sigma = NodeField::new((0..n).map(|_| 0.7 + 0.8 * rng.gen::<f64>()).collect());
    let fact = match solver.assemble(&sigma) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    let drive = |a: usize, b: usize| -> Result<Vec<f64>> {
        let mut pat = vec![0.0; 16];
        pat[a] = 1.0;
        pat[b] = -1.0;
        Ok(fact.solve_pattern(&pat)?.1)
    };
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let a = (2 * k) % 16;
        let b = (a + 1) % 16;
        let c = (a + 7) % 16;
        let d = (c + 1) % 16;
        let (u_ab, u_cd) = match (drive(a, b), drive(c, d)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return fail("CEM solve failed".to_string()),
        };
        let m1 = u_ab[c] - u_ab[d];
        let m2 = u_cd[a] - u_cd[b];
        worst = worst.max((m1 - m2).abs() / m1.abs().max(1e-300));
    }
    CheckResult {
        name: "cem_reciprocity",
        passed: worst <= 1e-8,
        detail: format!("worst relative asymmetry {worst:.3e} (tolerance 1e-8)"),
    }
}

/// Adjoint VJP against central finite differences over 20 random weights.
pub fn check_adjoint_fd() -> CheckResult {
    use rand::Rng;
    let fail = |detail: String| CheckResult {
        name: "adjoint_vjp_fd",
        passed: false,
        detail,
    };
    let mesh = match build_disk_mesh(55, 19) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string()),
    };
    let electrodes = match place_electrodes(&mesh, 4, 0.5) {
        Ok(e) => e,
        Err(e) => return fail(e.to_string()),
    };
    let proto = protocol(ProtocolKind::AdjacentAdjacent, 4, 1e-3).unwrap();
    assert!(proto.num_measurements() > 0);
    let solver = match CemSolver::new(mesh, electrodes, proto) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let n = solver.num_nodes();
    let m = solver.num_measurements();
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = seeds::rng_indexed(7, "adjoint-check", trial);
        let sigma = NodeField::new((0..n).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect());
        let w: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
        let grad = match adjoint_jacobian_vjp(&solver, &sigma, &w) {
            Ok(g) => g,
            Err(e) => return fail(e.to_string()),
        };
        let objective = |s: &NodeField| -> f64 {
            let y = forward(&solver, s).unwrap().y;
            y.iter().zip(&w).map(|(yi, wi)| yi * wi).sum()
        };
        let h = 1e-5;
        let gscale = grad.values.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        for j in (0..n).step_by(7) {
            let mut sp = sigma.clone();
            sp.values[j] += h;
            let mut sm = sigma.clone();
            sm.values[j] -= h;
            let fd = (objective(&sp) - objective(&sm)) / (2.0 * h);
            let rel = (fd - grad.values[j]).abs() / gscale.max(fd.abs()).max(1e-15);
            worst = worst.max(rel);
        }
    }
    CheckResult {
        name: "adjoint_vjp_fd",
        passed: worst <= 1e-4,
        detail: format!("worst relative error {worst:.3e} (tolerance 1e-4)"),
    }
}

/// Gaussian-toy oracle for the regularized conditional posterior mean over
/// 50 random (abar, s^2, lambda) triples.
pub fn check_gaussian_toy_posterior() -> CheckResult {
    use rand::Rng;
    let mut worst: f64 = 0.0;
    for trial in 0..50u64 {
        let mut rng = seeds::rng_indexed(99, "gaussian-toy", trial);
        let abar: f64 = rng.gen_range(0.02..0.98);
        let s2: f64 = rng.gen_range(0.01..2.0);
        let lambda: f64 = rng.gen_range(0.0..2.0);
        let x_t: f64 = rng.gen_range(-2.0..2.0);
        let y: f64 = rng.gen_range(-2.0..2.0);

        // Analytic scores of prior, likelihood, and reference factor.
        let prior_score = -x_t;
        let like_score = abar.sqrt() * (y - abar.sqrt() * x_t) / (1.0 - abar + s2);
        let reg_score = -2.0 * lambda * x_t;

        // Implemented route: Tweedie estimator plus the guidance correction.
        let schedule = NoiseSchedule::from_betas(vec![1.0 - abar]).unwrap();
        let eps_repr = -(1.0f64 - abar).sqrt() * prior_score;
        let x0 = tweedie_x0(
            &NodeField::new(vec![x_t]),
            1,
            &NodeField::new(vec![eps_repr]),
            &schedule,
        )
        .unwrap();
        let delta = delta_t(1, &schedule, &NodeField::new(vec![like_score + reg_score]));
        let implemented = x0.values[0] + delta.values[0];

        // Oracle route: complete the square over the product of the three
        // Gaussian factors, then apply the score identity.
        let precision = 1.0 + abar / (1.0 - abar + s2) + 2.0 * lambda;
        let mean = (abar.sqrt() * y / (1.0 - abar + s2)) / precision;
        let total_score = -precision * (x_t - mean);
        let oracle = (x_t + (1.0 - abar) * total_score) / abar.sqrt();

        worst = worst.max((implemented - oracle).abs());
    }
    CheckResult {
        name: "gaussian_toy_posterior",
        passed: worst <= 1e-10,
        detail: format!("worst deviation {worst:.3e} (tolerance 1e-10)"),
    }
}

/// Run the full oracle/property suite.
pub fn cmd_validate() -> Vec<CheckResult> {
    vec![
        check_schedule_identities(),
        check_tweedie_exactness(),
        check_fem_convergence(),
        check_cem_reciprocity(),
        check_adjoint_fd(),
        check_gaussian_toy_posterior(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.output_dir = dir.display().to_string();
        config.mesh_fine_target = 150;
        config.mesh_fine_seed = 11;
        config.mesh_coarse_target = 90;
        config.mesh_coarse_seed = 22;
        config.electrode_count = 8;
        config.electrode_coverage = 0.5;
        config.dataset_count = 4;
        config.schedule_steps = 6;
        config.beta_end = 0.3;
        config.net_hidden_dim = 6;
        config.net_depth = 2;
        config.net_time_embed_dim = 8;
        config.net_knn_k = 4;
        config.epochs = 2;
        config.batch_size = 2;
        config.bench_samples = 2;
        config.guidance_eta = 0.2;
        config.lambda_fixed = 0.05;
        config
    }

    #[test]
    fn mesh_gen_train_sample_reconstruct_bench_flow() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());

        cmd_mesh(&config).unwrap();
        assert!(RunPaths::new(&config).fine_mesh().exists());

        cmd_gen(&config).unwrap();
        let (ds, manifest) = io::open_dataset(&RunPaths::new(&config).dataset_dir()).unwrap();
        assert_eq!(ds.count, 4);
        assert!(manifest.iter().any(|(k, _)| k == "config_hash"));

        cmd_train(&config).unwrap();
        assert!(RunPaths::new(&config).checkpoint_dir().join("params.index").exists());

        let sample = cmd_sample(&config).unwrap();
        assert!(sample.values.iter().all(|v| v.is_finite()));

        // Reconstruct from the first dataset measurement.
        let meas = ds.meas_path(0);
        let recon = cmd_reconstruct(&config, &meas, "recon_0").unwrap();
        assert!(recon.x0_star.values.iter().all(|v| v.is_finite()));
        assert!(RunPaths::new(&config).root.join("recon_0.field").exists());
        assert!(RunPaths::new(&config).root.join("recon_0_log.csv").exists());

        let rows = cmd_bench(&config).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(RunPaths::new(&config).bench_csv().exists());
    }

    #[test]
    fn reconstruct_with_guidance_off_matches_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        cmd_gen(&config).unwrap();
        cmd_train(&config).unwrap();
        let sample = cmd_sample(&config).unwrap();

        config.guidance_eta = 0.0;
        config.lambda_fixed = 0.0;
        let (ds, _) = io::open_dataset(&RunPaths::new(&config).dataset_dir()).unwrap();
        let recon = cmd_reconstruct(&config, &ds.meas_path(0), "recon_off").unwrap();
        assert_eq!(recon.x0_star.values, sample.values);
    }

    #[test]
    fn rerunning_gen_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        cmd_gen(&config).unwrap();
        let path = RunPaths::new(&config).dataset_dir().join("sample_0.field");
        let first = std::fs::read(&path).unwrap();
        cmd_gen(&config).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn validation_suite_passes() {
        for check in cmd_validate() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
