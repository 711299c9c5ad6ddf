//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! Criteria 10-12 share one desk-scale context: a model trained on 200
//! circle phantoms (coarse mesh ~320 vertices, 16 electrodes, 300 epochs,
//! T = 200) plus 20 held-out phantoms, with reconstructions cached across
//! settings. Set GRAPHDPS_ACCEPT_CACHE=<dir> to reuse the trained
//! checkpoint between invocations during development; without it the suite
//! trains from scratch.

use graphdps::config::RunConfig;
use graphdps::diffusion::{sample_unconditional, SamplerKind};
use graphdps::fem::{add_noise, forward, MeasurementSet, NoiseKind};
use graphdps::mesh::{build_disk_mesh, build_hierarchy, mesh_edges, GraphLevel};
use graphdps::metrics::{graph_ssim, rel_err, rmse, MetricsConfig};
use graphdps::phantom::{rasterize, sample_phantom};
use graphdps::pipeline::{
    check_adjoint_fd, check_cem_reciprocity, check_fem_convergence, check_gaussian_toy_posterior,
    check_schedule_identities, check_tweedie_exactness, train_in_memory, training_fields,
    Workspace,
};
use graphdps::sampler::{
    ddim_rdps, ddpm_rdps, reconstruct, reg_value_and_grad, GradMode, GuidanceConfig,
    LambdaSetting, ReconContext, Regularizer, RegularizerKind,
};
use graphdps::score::{
    dgn_forward, dgn_forward_on_tape, init_params, HierarchyIndex, MountedParams, ScoreNetConfig,
    ScoreNetParams,
};
use graphdps::{seeds, NodeField};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

fn report(criterion: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion}: {status} - {detail}");
    assert!(passed, "{criterion} failed: {detail}");
}

#[test]
fn c01_schedule_and_coefficient_identities() {
    let started = Instant::now();
    let check = check_schedule_identities();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C1 schedule/coefficient identities",
        check.passed && elapsed < 1.0,
        &format!("{} in {elapsed:.3}s (limit 1s)", check.detail),
    );
}

#[test]
fn c02_tweedie_exactness() {
    let started = Instant::now();
    let check = check_tweedie_exactness();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C2 Tweedie exactness",
        check.passed && elapsed < 1.0,
        &format!("{} in {elapsed:.3}s (limit 1s)", check.detail),
    );
}

#[test]
fn c03_fem_continuum_convergence() {
    let started = Instant::now();
    let check = check_fem_convergence();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C3 FEM continuum convergence",
        check.passed && elapsed < 30.0,
        &format!("{} in {elapsed:.1}s (limit 30s)", check.detail),
    );
}

#[test]
fn c04_cem_reciprocity() {
    let started = Instant::now();
    let check = check_cem_reciprocity();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C4 CEM reciprocity",
        check.passed && elapsed < 10.0,
        &format!("{} in {elapsed:.1}s (limit 10s)", check.detail),
    );
}

#[test]
fn c05_adjoint_vjp_finite_differences() {
    let started = Instant::now();
    let check = check_adjoint_fd();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C5 adjoint VJP vs finite differences",
        check.passed && elapsed < 60.0,
        &format!("{} in {elapsed:.1}s (limit 60s)", check.detail),
    );
}

#[test]
fn c06_autodiff_oracle() {
    use graphdps::autodiff::Tape;
    use ndarray::Array2;
    use rand::Rng;
    let started = Instant::now();

    // Finite-difference harness over a generic tape program.
    fn fd_check(
        build: &dyn Fn(&mut Tape, graphdps::autodiff::Var) -> graphdps::autodiff::Var,
        x0: &Array2<f64>,
    ) -> f64 {
        let f = |x: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = build(&mut tape, xv);
            let sq = tape.square(y);
            let loss = tape.sum(sq);
            tape.value(loss)[(0, 0)]
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let y = build(&mut tape, xv);
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let analytic = tape.backward(loss).unwrap().wrt(xv);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..x0.dim().0 {
            for j in 0..x0.dim().1 {
                let mut xp = x0.clone();
                xp[(i, j)] += h;
                let mut xm = x0.clone();
                xm[(i, j)] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                worst = worst.max((fd - analytic[(i, j)]).abs() / scale.max(fd.abs()));
            }
        }
        worst
    }

    let mut rng = seeds::rng(606, "accept-autodiff");
    let x0 = Array2::from_shape_fn((5, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let w = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let idx = std::sync::Arc::new(vec![0usize, 2, 4, 1, 2]);
    let weights = std::sync::Arc::new(vec![0.4, -1.1, 0.8, 1.6, 0.2]);

    let mut worst: f64 = 0.0;
    type B = Box<dyn Fn(&mut Tape, graphdps::autodiff::Var) -> graphdps::autodiff::Var>;
    let cases: Vec<B> = vec![
        Box::new(|t, x| {
            let d = t.scale(x, 1.5);
            t.add(x, d)
        }),
        Box::new(|t, x| {
            let s = t.selu(x);
            t.sub(x, s)
        }),
        Box::new(|t, x| {
            let s = t.square(x);
            t.mul(x, s)
        }),
        Box::new({
            let w = w.clone();
            move |t, x| {
                let wv = t.constant(w.clone());
                t.matmul(x, wv)
            }
        }),
        Box::new(|t, x| {
            let s = t.square(x);
            let c = t.concat_cols(&[x, s]);
            t.slice_cols(c, 1, 4)
        }),
        Box::new({
            let idx = idx.clone();
            let weights = weights.clone();
            move |t, x| {
                let g = t.gather_rows(x, idx.clone());
                let r = t.row_scale(g, weights.clone());
                t.scatter_add_rows(r, idx.clone(), 5)
            }
        }),
        Box::new(|t, x| t.layer_norm(x)),
        Box::new(|t, x| t.abs_smooth(x, 1e-3)),
        Box::new(|t, x| {
            let m = t.mean(x);
            t.square(m)
        }),
        Box::new(|t, x| {
            let s = t.sum(x);
            t.square(s)
        }),
    ];
    for case in &cases {
        worst = worst.max(fd_check(case.as_ref(), &x0));
    }

    // Full DGN loss gradient on a <= 30-node graph, every named parameter.
    let config = ScoreNetConfig {
        hidden_dim: 4,
        depth: 2,
        time_embed_dim: 4,
        knn_k: 3,
    };
    let mesh = build_disk_mesh(22, 66).unwrap();
    let hierarchy = build_hierarchy(&mesh, config.depth, config.knn_k).unwrap();
    let index = HierarchyIndex::new(&hierarchy);
    let mut params = init_params(&config, 66);
    let n = index.fine_node_count();
    let x_state = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() - 0.5);
    let target = Array2::from_shape_fn((n, 1), |_| rng.gen::<f64>() - 0.5);

    let loss_of = |params: &ScoreNetParams| -> f64 {
        let mut tape = Tape::new();
        let mounted = MountedParams::mount(&mut tape, params);
        let x = tape.constant(x_state.clone());
        let (eps, _) = dgn_forward_on_tape(&mut tape, x, 3, &index, &config, &mounted);
        let tv = tape.constant(target.clone());
        let d = tape.sub(eps, tv);
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        tape.value(loss)[(0, 0)]
    };
    let mut tape = Tape::new();
    let mounted = MountedParams::mount(&mut tape, &params);
    let x = tape.constant(x_state.clone());
    let (eps, _) = dgn_forward_on_tape(&mut tape, x, 3, &index, &config, &mounted);
    let tv = tape.constant(target.clone());
    let d = tape.sub(eps, tv);
    let sq = tape.square(d);
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();

    let h = 1e-6;
    for name in params.names().to_vec() {
        let analytic = grads.wrt(mounted.get(&name));
        let dim = analytic.dim();
        let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let probes = [(0, 0), (dim.0 - 1, dim.1 - 1), (dim.0 / 2, dim.1 / 2)];
        for &(i, j) in &probes {
            let orig = params.get(&name)[(i, j)];
            params.get_mut(&name)[(i, j)] = orig + h;
            let fp = loss_of(&params);
            params.get_mut(&name)[(i, j)] = orig - h;
            let fm = loss_of(&params);
            params.get_mut(&name)[(i, j)] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - analytic[(i, j)]).abs() / scale.max(fd.abs()));
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    report(
        "C6 autodiff oracle",
        worst <= 1e-4 && elapsed < 60.0,
        &format!("worst relative error {worst:.3e} in {elapsed:.1}s (tolerance 1e-4, limit 60s)"),
    );
}

#[test]
fn c07_network_permutation_equivariance() {
    use rand::Rng;
    let config = ScoreNetConfig {
        hidden_dim: 8,
        depth: 2,
        time_embed_dim: 8,
        knn_k: 4,
    };
    let mesh = build_disk_mesh(40, 77).unwrap();
    let hierarchy = build_hierarchy(&mesh, config.depth, config.knn_k).unwrap();
    let params = init_params(&config, 77);
    let n = hierarchy.fine_node_count();
    let index = HierarchyIndex::new(&hierarchy);

    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut rng = seeds::rng_indexed(707, "accept-perm", trial);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let out = dgn_forward(&NodeField::new(x.clone()), 4, &index, &config, &params);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let relabeled = hierarchy.relabel_level1(&perm);
        let index_p = HierarchyIndex::new(&relabeled);
        let mut x_p = vec![0.0; n];
        for (old, &new) in perm.iter().enumerate() {
            x_p[new] = x[old];
        }
        let out_p = dgn_forward(&NodeField::new(x_p), 4, &index_p, &config, &params);
        for (old, &new) in perm.iter().enumerate() {
            worst = worst.max((out.eps.values[old] - out_p.eps.values[new]).abs());
        }
    }
    report(
        "C7 permutation equivariance",
        worst <= 1e-10,
        &format!("worst deviation {worst:.3e} over 10 trials (tolerance 1e-10)"),
    );
}

#[test]
fn c08_gaussian_toy_proposition() {
    let check = check_gaussian_toy_posterior();
    report("C8 Gaussian-toy regularized posterior mean", check.passed, &check.detail);
}

#[test]
fn c09_reduction_law_bitwise() {
    let config = ScoreNetConfig {
        hidden_dim: 8,
        depth: 2,
        time_embed_dim: 8,
        knn_k: 4,
    };
    let mesh = build_disk_mesh(60, 909).unwrap();
    let hierarchy = build_hierarchy(&mesh, config.depth, config.knn_k).unwrap();
    let index = HierarchyIndex::new(&hierarchy);
    let params = init_params(&config, 909);
    let schedule =
        graphdps::diffusion::make_schedule(25, graphdps::diffusion::ScheduleKind::Linear, 1e-3, 0.2)
            .unwrap();
    let electrodes = graphdps::fem::place_electrodes(&mesh, 4, 0.5).unwrap();
    let proto =
        graphdps::fem::protocol(graphdps::fem::ProtocolKind::AdjacentAdjacent, 4, 1.0).unwrap();
    let solver = std::sync::Arc::new(
        graphdps::fem::CemSolver::new(mesh.clone(), electrodes, proto).unwrap(),
    );
    let y = forward(&solver, &NodeField::constant(hierarchy.fine_node_count(), 1.0)).unwrap();

    let ctx = ReconContext::new(
        &params,
        &config,
        &index,
        &schedule,
        solver,
        &hierarchy.levels[0],
    );
    let guidance = GuidanceConfig {
        eta: 0.0,
        eps_floor: 1e-3,
        lambda: LambdaSetting::Fixed(0.0),
        grad_mode: GradMode::FullBackprop,
    };
    let mut exact = true;
    let recon = ddim_rdps(&ctx, &y, &Regularizer::none(), &guidance, 4711).unwrap();
    let uncond =
        sample_unconditional(&params, &config, &index, &schedule, SamplerKind::Ddim, 4711).unwrap();
    exact &= recon.x0_star.values == uncond.values;
    report(
        "C9 reduction law (eta=0, lambda=0)",
        exact,
        "DDIM-RDPS output is bitwise equal to the unconditional DDIM sample",
    );
}

// ---------------------------------------------------------------------------
// Desk-scale shared context for criteria 10-12.
// ---------------------------------------------------------------------------

struct TestCase {
    gt_coarse: NodeField,
    y_clean: MeasurementSet,
}

struct DeskSetup {
    config: RunConfig,
    ws: Workspace,
    params: ScoreNetParams,
    cases: Vec<TestCase>,
    level1: GraphLevel,
    cache: Mutex<HashMap<(String, usize), (f64, f64, f64)>>,
}

fn desk_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.base_seed = 7;
    config.injection_current = 1.0;
    config.epochs = 300;
    config.output_dir = String::new();
    config
}

fn desk() -> &'static DeskSetup {
    static DESK: OnceLock<DeskSetup> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = desk_config();
        let ws = Workspace::build(&config).expect("desk workspace");
        eprintln!(
            "[desk] coarse mesh {} vertices, fine mesh {} vertices, m = {}",
            ws.coarse_mesh.num_vertices(),
            ws.fine_mesh.num_vertices(),
            ws.coarse_solver.num_measurements()
        );

        let params = desk_params(&config, &ws);

        // 20 held-out phantoms, clean fine-mesh measurements.
        let spec = config.dataset_spec();
        let cases: Vec<TestCase> = (0..20)
            .map(|idx| {
                let seed = seeds::derive_indexed(config.base_seed, "bench-phantom", idx as u64);
                let phantom = sample_phantom(&spec, seed).expect("held-out phantom");
                let gt_coarse = rasterize(&phantom, &ws.coarse_mesh);
                let gt_fine = rasterize(&phantom, &ws.fine_mesh);
                let y_clean = forward(&ws.fine_solver, &gt_fine).expect("forward solve");
                TestCase { gt_coarse, y_clean }
            })
            .collect();

        let level1 = mesh_edges(&ws.coarse_mesh);
        DeskSetup {
            config,
            ws,
            params,
            cases,
            level1,
            cache: Mutex::new(HashMap::new()),
        }
    })
}

fn desk_params(config: &RunConfig, ws: &Workspace) -> ScoreNetParams {
    let train_fresh = |ws: &Workspace| -> ScoreNetParams {
        eprintln!("[desk] training 300 epochs on 200 phantoms (takes a while)...");
        let fields = training_fields(config, ws).expect("training fields");
        let started = Instant::now();
        let (params, log) = train_in_memory(config, ws, &fields, |epoch, _, row| {
            if epoch % 25 == 0 {
                eprintln!(
                    "[desk] epoch {epoch}: mean loss {:.3} ({:.0}s)",
                    row.mean_loss, row.wall_seconds
                );
            }
            Ok(())
        })
        .expect("training");
        eprintln!(
            "[desk] trained in {:.0}s, final mean loss {:.3}",
            started.elapsed().as_secs_f64(),
            log.last().map(|r| r.mean_loss).unwrap_or(f64::NAN)
        );
        params
    };

    match std::env::var("GRAPHDPS_ACCEPT_CACHE") {
        Ok(dir) => {
            let dir = std::path::PathBuf::from(dir);
            if let Ok((params, text)) = graphdps::io::load_checkpoint(&dir) {
                if text == config.to_text() {
                    eprintln!("[desk] reusing cached checkpoint at {}", dir.display());
                    return params;
                }
            }
            let params = train_fresh(ws);
            let _ = graphdps::io::save_checkpoint(&dir, &params, &config.to_text());
            params
        }
        Err(_) => train_fresh(ws),
    }
}

/// Reconstruction settings used by the desk criteria.
#[derive(Clone)]
struct Setting {
    key: String,
    reg: Regularizer,
    lambda: LambdaSetting,
    noise: Option<(NoiseKind, f64, (f64, f64))>,
}

impl Setting {
    fn noiseless(kind: RegularizerKind, lambda: f64) -> Self {
        Setting {
            key: format!("clean-{}", kind.as_str()),
            reg: Regularizer::new(kind),
            lambda: LambdaSetting::Fixed(lambda),
            noise: None,
        }
    }

    fn noisy(kind: NoiseKind, level: f64, clamp: (f64, f64)) -> Self {
        Setting {
            key: format!("{}-{level:e}", kind.as_str()),
            reg: Regularizer::new(RegularizerKind::Tv),
            lambda: LambdaSetting::Adaptive {
                scale: 1.0,
                lambda_min: clamp.0,
                lambda_max: clamp.1,
            },
            noise: Some((kind, level, clamp)),
        }
    }
}

/// Base guidance step size for all desk reconstructions.
const DESK_ETA: f64 = 1.0;
/// Fixed TV weight for noiseless desk reconstructions.
const DESK_LAMBDA_TV: f64 = 0.05;

/// Memoized metrics (rmse, rel_err, ssim) of one reconstruction.
fn desk_metrics(setup: &DeskSetup, setting: &Setting, idx: usize) -> (f64, f64, f64) {
    let key = (setting.key.clone(), idx);
    if let Some(hit) = setup.cache.lock().unwrap().get(&key) {
        return *hit;
    }
    let case = &setup.cases[idx];
    let y = match setting.noise {
        None => case.y_clean.clone(),
        Some((kind, level, _)) => add_noise(
            &case.y_clean,
            kind,
            level,
            seeds::derive_indexed(setup.config.base_seed, "accept-noise", idx as u64),
        ),
    };
    let guidance = GuidanceConfig {
        eta: DESK_ETA,
        eps_floor: 1e-3,
        lambda: setting.lambda,
        grad_mode: GradMode::FullBackprop,
    };
    let net_config = setup.config.net_config();
    let ctx = ReconContext::new(
        &setup.params,
        &net_config,
        &setup.ws.index,
        &setup.ws.schedule,
        setup.ws.coarse_solver.clone(),
        &setup.level1,
    );
    let chain_seed = seeds::derive_indexed(setup.config.base_seed, "bench-chain", idx as u64);
    let result = reconstruct(&ctx, &y, &setting.reg, &guidance, SamplerKind::Ddim, chain_seed)
        .expect("reconstruction");
    let out = (
        rmse(&case.gt_coarse, &result.x0_star).unwrap(),
        rel_err(&case.gt_coarse, &result.x0_star).unwrap(),
        graph_ssim(
            &case.gt_coarse,
            &result.x0_star,
            &setup.level1,
            &MetricsConfig::default(),
        )
        .unwrap(),
    );
    setup.cache.lock().unwrap().insert(key, out);
    out
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c10_desk_scale_end_to_end() {
    let setup = desk();
    let setting = Setting::noiseless(RegularizerKind::Tv, DESK_LAMBDA_TV);
    let metrics: Vec<(f64, f64, f64)> =
        (0..10).map(|i| desk_metrics(setup, &setting, i)).collect();
    let mean_rel = mean(metrics.iter().map(|m| m.1));
    let mean_ssim = mean(metrics.iter().map(|m| m.2));
    report(
        "C10 desk-scale end-to-end (TV-RDPS)",
        mean_rel <= 0.25 && mean_ssim >= 0.6,
        &format!(
            "mean RelErr {:.2}% (bound 25%), mean SSIM {mean_ssim:.4} (bound 0.6) over 10 held-out phantoms",
            100.0 * mean_rel
        ),
    );
}

#[test]
fn c11_regularizer_table_direction() {
    let setup = desk();
    let settings = [
        Setting::noiseless(RegularizerKind::None, 0.0),
        Setting::noiseless(RegularizerKind::Tik, DESK_LAMBDA_TV),
        Setting::noiseless(RegularizerKind::GTik, DESK_LAMBDA_TV),
        Setting::noiseless(RegularizerKind::Tv, DESK_LAMBDA_TV),
    ];
    let mut means = Vec::new();
    for setting in &settings {
        let m = mean((0..10).map(|i| desk_metrics(setup, setting, i).0));
        println!(
            "  regularizer {:>4}: mean RMSE {m:.5}",
            setting.reg.kind.as_str()
        );
        means.push(m);
    }
    let (no_reg, tv) = (means[0], means[3]);
    report(
        "C11 regularizer ordering (TV vs No-Reg)",
        tv <= no_reg,
        &format!(
            "mean RMSE: No-Reg {no_reg:.5}, Tik {:.5}, GTik {:.5}, TV {tv:.5} (gate: TV <= No-Reg)",
            means[1], means[2]
        ),
    );
}

#[test]
fn c12_noise_robustness_direction() {
    let setup = desk();
    let clean = Setting::noiseless(RegularizerKind::Tv, DESK_LAMBDA_TV);
    let mean_clean = mean((0..20).map(|i| desk_metrics(setup, &clean, i).0));
    let mut ordered = true;
    let mut detail = format!("noiseless {mean_clean:.5}");
    for kind in [NoiseKind::Gaussian, NoiseKind::Laplace] {
        let s1 = Setting::noisy(kind, 2e-3, (0.15, 0.5));
        let s2 = Setting::noisy(kind, 1e-2, (0.2, 0.8));
        let m1 = mean((0..20).map(|i| desk_metrics(setup, &s1, i).0));
        let m2 = mean((0..20).map(|i| desk_metrics(setup, &s2, i).0));
        ordered &= m2 >= m1 && m1 >= mean_clean;
        detail.push_str(&format!(
            "; {} sigma1 {m1:.5}, sigma2 {m2:.5}",
            kind.as_str()
        ));
    }
    report(
        "C12 noise ordering (sigma2 >= sigma1 >= noiseless, AWGN & AWLN)",
        ordered,
        &format!("mean RMSE over 20 samples: {detail}"),
    );
}

#[test]
fn c13_regularizer_identities() {
    use rand::Rng;
    let mesh = build_disk_mesh(80, 131).unwrap();
    let level = mesh_edges(&mesh);
    let mut rng = seeds::rng(131, "accept-reg");
    let x = NodeField::new((0..level.node_count).map(|_| rng.gen::<f64>() * 2.0).collect());
    let c: f64 = rng.gen::<f64>() * 8.0 - 4.0;
    let shifted = NodeField::new(x.values.iter().map(|v| v + c).collect());

    let mut worst: f64 = 0.0;
    for kind in [RegularizerKind::Tv, RegularizerKind::GTik] {
        let reg = Regularizer::new(kind);
        let (v1, _) = reg_value_and_grad(&x, &level, &reg).unwrap();
        let (v2, _) = reg_value_and_grad(&shifted, &level, &reg).unwrap();
        worst = worst.max((v1 - v2).abs() / v1.abs().max(1.0));
    }

    // Two-node double-count identity: tv((0, d)) = 2|d| up to the smoothing
    // delta.
    let two = GraphLevel {
        node_count: 2,
        edge_list: vec![(0, 1), (1, 0)],
        edge_lengths: vec![1.0, 1.0],
        coords: vec![[0.0, 0.0], [1.0, 0.0]],
    };
    let d = 0.75;
    let (tv, _) = reg_value_and_grad(
        &NodeField::new(vec![0.0, d]),
        &two,
        &Regularizer::new(RegularizerKind::Tv),
    )
    .unwrap();
    let double_count_err = (tv - 2.0 * d).abs();

    report(
        "C13 TV/GTik translation invariance and double-count identity",
        worst <= 1e-10 && double_count_err <= 1e-9,
        &format!(
            "translation deviation {worst:.3e} (tolerance 1e-10), two-node tv error {double_count_err:.3e}"
        ),
    );
}

// DDPM-vs-DDIM directional check from the spec's per-op examples (desk-scale
// reproduction of the sampler comparison; reported, not gated, because the
// paper's gap is within noise at this scale).
#[test]
fn c10b_ddpm_vs_ddim_reported() {
    let setup = desk();
    let net_config = setup.config.net_config();
    let ctx = ReconContext::new(
        &setup.params,
        &net_config,
        &setup.ws.index,
        &setup.ws.schedule,
        setup.ws.coarse_solver.clone(),
        &setup.level1,
    );
    let guidance = GuidanceConfig {
        eta: DESK_ETA,
        eps_floor: 1e-3,
        lambda: LambdaSetting::Fixed(0.0),
        grad_mode: GradMode::FullBackprop,
    };
    let mut ddim_mean = 0.0;
    let mut ddpm_mean = 0.0;
    let k = 10;
    for idx in 0..k {
        let case = &setup.cases[idx];
        let seed = seeds::derive_indexed(setup.config.base_seed, "bench-chain", idx as u64);
        let reg = Regularizer::none();
        let a = ddim_rdps(&ctx, &case.y_clean, &reg, &guidance, seed).unwrap();
        let b = ddpm_rdps(&ctx, &case.y_clean, &reg, &guidance, seed).unwrap();
        ddim_mean += rmse(&case.gt_coarse, &a.x0_star).unwrap() / k as f64;
        ddpm_mean += rmse(&case.gt_coarse, &b.x0_star).unwrap() / k as f64;
    }
    println!(
        "ACCEPTANCE C10b (report only): DDIM-DPS mean RMSE {ddim_mean:.5} vs DDPM-DPS {ddpm_mean:.5} on 10 desk phantoms"
    );
}
