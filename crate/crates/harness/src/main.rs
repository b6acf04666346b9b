//! `ghofl` — run one-shot federated experiments from a config file, sweep
//! over skew and client count, and inspect the binary artifacts.

use clap::{Parser, Subcommand};
use ghofl_core::datamodel::{write_embeddings_csv, write_embeddings_packed};
use ghofl_core::diagnostics::gaussianity;
use ghofl_core::heads_io::{read_head_blob, AnyHead};
use ghofl_core::wire::bundle_from_frame;
use ghofl_harness::config::SyntheticRecipe;
use ghofl_harness::{runner, ExperimentConfig, HarnessError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ghofl", version, about = "One-shot federated learning from sufficient statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a config end to end and write a run report.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Cross-product sweep over Dirichlet alpha and client count.
    Sweep {
        config: PathBuf,
        /// Axes, e.g. `--axis alpha=0.05,0.5 --axis clients=5,50`.
        #[arg(long = "axis", value_name = "NAME=V1,V2,...")]
        axes: Vec<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a summary of a stored head blob.
    Inspect {
        /// A `.ghh` head blob.
        blob: PathBuf,
    },
    /// Gaussianity diagnostics of a serialized bundle.
    Diagnose {
        /// A `.ghb` bundle frame (needs the diagnostic moment sums).
        bundle: PathBuf,
        /// Write `<prefix>.csv` and `<prefix>.json` instead of stdout only.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic embedding file from a recipe.
    GenSynthetic {
        /// Recipe (TOML, the `[data.synthetic]` schema as a standalone file).
        recipe: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// "packed" (GHE1) or "csv".
        #[arg(long, default_value = "packed")]
        format: String,
        /// "train" or "test" split of the recipe.
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn parse_axis(axes: &[String]) -> Result<(Vec<f64>, Vec<usize>), HarnessError> {
    let mut alphas = Vec::new();
    let mut clients = Vec::new();
    for axis in axes {
        let (name, values) = axis
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("bad axis '{axis}'")))?;
        match name {
            "alpha" => {
                for v in values.split(',') {
                    alphas.push(v.trim().parse::<f64>().map_err(|_| {
                        HarnessError::Config(format!("bad alpha value '{v}'"))
                    })?);
                }
            }
            "clients" => {
                for v in values.split(',') {
                    clients.push(v.trim().parse::<usize>().map_err(|_| {
                        HarnessError::Config(format!("bad client count '{v}'"))
                    })?);
                }
            }
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown sweep axis '{other}' (alpha, clients)"
                )))
            }
        }
    }
    if alphas.is_empty() {
        alphas.push(0.5);
    }
    if clients.is_empty() {
        clients.push(10);
    }
    Ok((alphas, clients))
}

fn main_inner() -> Result<(), HarnessError> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output } => {
            let mut config = ExperimentConfig::load(config)?;
            if let Some(out) = output {
                config.output_dir = out.display().to_string();
            }
            let report = runner::run(&config)?;
            println!("report written to {}/report.json", config.output_dir);
            for cell in &report.cells {
                for head in &cell.heads {
                    println!(
                        "{:<40} {:<12} acc={:.4} ({:.1} ms, {} params)",
                        cell.partition, head.name, head.accuracy, head.fit_ms, head.parameter_count
                    );
                }
            }
            if let Some(inv) = &report.invariance {
                println!("max parameter delta across cells: {:.3e}", inv.max_param_rel_delta);
                for h in &inv.heads {
                    println!(
                        "{:<12} predictions identical: {} (max acc delta {:.2e})",
                        h.name, h.predictions_identical, h.max_accuracy_delta
                    );
                }
            }
        }
        Command::Sweep { config, axes, output } => {
            let config = ExperimentConfig::load(config)?;
            let (alphas, clients) = parse_axis(&axes)?;
            let out = output.unwrap_or_else(|| PathBuf::from(&config.output_dir));
            let reports = runner::sweep(&config, &alphas, &clients, &out)?;
            println!(
                "{} runs written to {}/sweep.csv and sweep.json",
                reports.len(),
                out.display()
            );
        }
        Command::Inspect { blob } => {
            let bytes = std::fs::read(&blob)?;
            let blob = read_head_blob(&bytes).map_err(|e| HarnessError::Stage {
                stage: "inspect",
                source: e,
            })?;
            println!("head: {}", blob.head.kind_name());
            println!("parameters: {}", blob.head.parameter_count());
            match &blob.head {
                AnyHead::Gaussian(h) => {
                    println!("classes: {} (dim {})", h.class_count(), h.dim());
                    println!("retained labels: {:?}", h.params().class_labels);
                    if !h.params().dropped_classes.is_empty() {
                        println!("dropped labels: {:?}", h.params().dropped_classes);
                    }
                }
                AnyHead::FisherMix(h) => {
                    println!("classes: {} (dim {})", h.class_count(), h.dim());
                    println!("scale: {}  margin: {}", h.scale, h.margin);
                }
                AnyHead::ProtoHyper(h) => {
                    println!("classes: {} (dim {})", h.class_count(), h.dim());
                    println!(
                        "residual rank: {}  blend: {}  T: {}  kd: {}",
                        h.cfg.residual_rank, h.cfg.teacher_blend, h.cfg.temperature, h.cfg.kd_weight
                    );
                }
            }
            if let Some(p) = blob.projection {
                println!("sketch: seed={} d={} k={}", p.seed, p.d, p.k);
            }
            if let Some(b) = &blob.basis {
                println!(
                    "fisher basis: {} -> {} (energy {:.4}, {} padded)",
                    b.input_dim(),
                    b.k_f,
                    b.captured_energy(),
                    b.padded
                );
            }
        }
        Command::Diagnose { bundle, output } => {
            let bytes = std::fs::read(&bundle)?;
            let bundle = bundle_from_frame(&bytes).map_err(|e| HarnessError::Stage {
                stage: "diagnose",
                source: e,
            })?;
            let report = gaussianity(&bundle).map_err(|e| HarnessError::Stage {
                stage: "diagnose",
                source: e,
            })?;
            println!("{}", report.to_json_summary());
            if let Some(prefix) = output {
                let csv_path = prefix.with_extension("csv");
                let json_path = prefix.with_extension("json");
                std::fs::write(&csv_path, report.to_csv())?;
                std::fs::write(&json_path, report.to_json_summary())?;
                println!("wrote {} and {}", csv_path.display(), json_path.display());
            }
        }
        Command::GenSynthetic {
            recipe,
            output,
            format,
            split,
        } => {
            let text = std::fs::read_to_string(&recipe)?;
            let recipe: SyntheticRecipe =
                toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
            let (train, test) = ghofl_harness::synthetic::generate(&recipe)?;
            let set = match split.as_str() {
                "test" => test,
                _ => train,
            };
            match format.as_str() {
                "csv" => write_embeddings_csv(&set, &output),
                _ => write_embeddings_packed(&set, &output),
            }
            .map_err(|e| HarnessError::Stage {
                stage: "gen-synthetic",
                source: e,
            })?;
            println!(
                "wrote {} samples (dim {}, {} classes) to {}",
                set.len(),
                set.dim(),
                set.class_count(),
                output.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
