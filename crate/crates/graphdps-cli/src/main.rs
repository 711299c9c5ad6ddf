//! Command-line front end: mesh/dataset generation, training, sampling,
//! reconstruction, benchmarking, and the numerical validation suite.

use clap::{Args, Parser, Subcommand};
use graphdps::config::RunConfig;
use graphdps::mesh::TriMesh;
use graphdps::pipeline;
use graphdps::NodeField;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "graphdps",
    about = "Regularized diffusion posterior sampling on FEM meshes (EIT)",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set guidance.eta=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the fine (simulation) and coarse (inversion) meshes.
    Mesh(ConfigArgs),
    /// Generate the phantom dataset with fine-mesh measurements.
    Gen(ConfigArgs),
    /// Train the score network on the generated dataset.
    Train(ConfigArgs),
    /// Draw an unconditional sample from the trained prior.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write a PNG raster of the sampled field.
        #[arg(long)]
        png: bool,
    },
    /// Reconstruct conductivity from a measurement file.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Measurement file to invert.
        #[arg(long)]
        meas: PathBuf,
        /// Output stem inside the run directory.
        #[arg(long, default_value = "recon")]
        out: String,
        /// Also write a PNG raster of the reconstruction.
        #[arg(long)]
        png: bool,
    },
    /// Batch reconstruction over held-out phantoms with a metrics table.
    Bench(ConfigArgs),
    /// Run the numerical oracle/property suite.
    Validate,
}

fn resolve_config(args: &ConfigArgs) -> graphdps::error::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (i, assignment) in args.set.iter().enumerate() {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(graphdps::GraphDpsError::Config {
                line: i + 1,
                message: format!("override {assignment:?} is not KEY=VALUE"),
            });
        };
        config.set(key.trim(), value.trim(), 0)?;
    }
    config.validate()?;
    Ok(config)
}

/// Nearest-vertex raster of a node field over the unit disk.
fn render_png(mesh: &TriMesh, field: &NodeField, path: &std::path::Path) -> std::io::Result<()> {
    let size = 256u32;
    let lo = field.min();
    let hi = field.max();
    let span = (hi - lo).max(1e-12);
    let mut img = image::GrayImage::new(size, size);
    for py in 0..size {
        for px in 0..size {
            let x = 2.0 * (px as f64 + 0.5) / size as f64 - 1.0;
            let y = 1.0 - 2.0 * (py as f64 + 0.5) / size as f64;
            if x * x + y * y > 1.0 {
                continue;
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, v) in mesh.vertices.iter().enumerate() {
                let d = (v[0] - x).powi(2) + (v[1] - y).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            let g = ((field.values[best] - lo) / span * 255.0).clamp(0.0, 255.0) as u8;
            img.put_pixel(px, py, image::Luma([g]));
        }
    }
    img.save(path)
        .map_err(|e| std::io::Error::other(e.to_string()))
}

fn run() -> Result<(), String> {
    if let Ok(threads) = std::env::var("GRAPHDPS_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| format!("GRAPHDPS_THREADS={threads:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }

    let cli = Cli::parse();
    match cli.command {
        Command::Mesh(args) => {
            let config = resolve_config(&args).map_err(|e| e.to_string())?;
            pipeline::cmd_mesh(&config).map_err(|e| e.to_string())?;
            let paths = pipeline::RunPaths::new(&config);
            println!("meshes written to {}", paths.root.display());
        }
        Command::Gen(args) => {
            let config = resolve_config(&args).map_err(|e| e.to_string())?;
            pipeline::cmd_gen(&config).map_err(|e| e.to_string())?;
            println!(
                "dataset of {} samples written to {}",
                config.dataset_count,
                pipeline::RunPaths::new(&config).dataset_dir().display()
            );
        }
        Command::Train(args) => {
            let config = resolve_config(&args).map_err(|e| e.to_string())?;
            let log = pipeline::cmd_train(&config).map_err(|e| e.to_string())?;
            if let Some(last) = log.last() {
                println!(
                    "trained {} epochs; final mean loss {:.6}",
                    log.len(),
                    last.mean_loss
                );
            }
        }
        Command::Sample { config, png } => {
            let config = resolve_config(&config).map_err(|e| e.to_string())?;
            let field = pipeline::cmd_sample(&config).map_err(|e| e.to_string())?;
            let paths = pipeline::RunPaths::new(&config);
            println!("sample written to {}", paths.sample_field().display());
            if png {
                let ws = pipeline::Workspace::build(&config).map_err(|e| e.to_string())?;
                let png_path = paths.root.join("sample.png");
                render_png(&ws.coarse_mesh, &field, &png_path).map_err(|e| e.to_string())?;
                println!("raster written to {}", png_path.display());
            }
        }
        Command::Reconstruct {
            config,
            meas,
            out,
            png,
        } => {
            let config = resolve_config(&config).map_err(|e| e.to_string())?;
            let result =
                pipeline::cmd_reconstruct(&config, &meas, &out).map_err(|e| e.to_string())?;
            let paths = pipeline::RunPaths::new(&config);
            println!(
                "reconstruction written to {} (final residual {:.3e})",
                paths.root.join(format!("{out}.field")).display(),
                result.summary.final_residual
            );
            if png {
                let ws = pipeline::Workspace::build(&config).map_err(|e| e.to_string())?;
                let png_path = paths.root.join(format!("{out}.png"));
                render_png(&ws.coarse_mesh, &result.x0_star, &png_path)
                    .map_err(|e| e.to_string())?;
                println!("raster written to {}", png_path.display());
            }
        }
        Command::Bench(args) => {
            let config = resolve_config(&args).map_err(|e| e.to_string())?;
            let rows = pipeline::cmd_bench(&config).map_err(|e| e.to_string())?;
            let mean_rmse: f64 = rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64;
            let mean_ssim: f64 = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
            println!(
                "bench over {} samples: mean RMSE {:.5}, mean SSIM {:.4}; table at {}",
                rows.len(),
                mean_rmse,
                mean_ssim,
                pipeline::RunPaths::new(&config).bench_csv().display()
            );
        }
        Command::Validate => {
            let checks = pipeline::cmd_validate();
            let mut all_ok = true;
            for check in &checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                println!("{status} {}: {}", check.name, check.detail);
                all_ok &= check.passed;
            }
            if !all_ok {
                return Err("validation suite failed".to_string());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("GRAPHDPS_ERROR: {message}");
            ExitCode::FAILURE
        }
    }
}
