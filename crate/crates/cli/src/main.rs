mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::{EvalArgs, Numerical, ReconstructArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "localsdf", version, about = "Composed local SDFs with graph-generated latent codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value` with a dotted key, e.g. `train.weights.sim=0`.
    /// Dedicated flags are applied after these and win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sample cache directory. Falls back to $LOCALSDF_CACHE_DIR, then
    /// `paths.cache_dir`, then ./localsdf-cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize meshes and cache surface and perturbed samples.
    Preprocess {
        /// Mesh files (OBJ/PLY) or `fixture:<name>[@level]`.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        surface_samples: Option<usize>,
        #[arg(long)]
        perturbed_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the network and one code per shape.
    Train {
        /// Shape ids of preprocessed meshes.
        #[arg(required = true)]
        shapes: Vec<String>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// sdf4, sdf8, lgcl-cheb or lgcl-vc.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        batches_per_epoch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a code for an unseen shape against a frozen network.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: String,
        /// Output checkpoint holding the network and the new code.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the zero level-set of a shape's field as a mesh.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: String,
        /// Output mesh (.obj or .ply), in input coordinates.
        #[arg(long)]
        out: PathBuf,
        /// Grid nodes per axis.
        #[arg(long)]
        resolution: Option<usize>,
        /// Bounding-box inflation per side, as a fraction of its extent.
        #[arg(long)]
        margin: Option<f64>,
        /// Normalized-frame bounds `x0,y0,z0,x1,y1,z1`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bounds: Option<Vec<f64>>,
        /// Ground-truth mesh; adds a per-vertex `error` channel (PLY only).
        #[arg(long)]
        gt: Option<String>,
        /// Exit with code 2 when the extracted surface is empty.
        #[arg(long)]
        fail_on_empty: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a reconstruction with its ground truth.
    Eval {
        /// Ground-truth mesh file or `fixture:<name>[@level]`.
        #[arg(long)]
        gt: String,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long, default_value = "model")]
        method: String,
        /// Shape id for the report row (defaults to the ground-truth name).
        #[arg(long)]
        shape: Option<String>,
        /// Checkpoint whose parameter counts go into the row.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV file the row is appended to.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate evaluation rows per method.
    Report {
        #[arg(required = true)]
        rows: Vec<PathBuf>,
        /// Summary CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in fixture shapes as OBJ files.
    Fixtures {
        #[arg(default_value = "fixtures")]
        dir: PathBuf,
    },
}

/// Config sections each subcommand reads.
const SECTIONS: [(&str, &[&str]); 5] = [
    ("preprocess", &["sampling", "paths"]),
    ("train", &["model", "train", "paths"]),
    ("infer", &["train", "infer", "paths"]),
    ("reconstruct", &["grid", "paths"]),
    ("eval", &["sampling", "metrics"]),
];

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in SECTIONS {
        let listing = config::keys(sections).join("\n  ");
        cmd = cmd.mut_subcommand(name, |c| c.after_help(format!("Config keys read:\n  {listing}")));
    }
    cmd
}

fn opt<T: ToString>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={}", v.to_string()))
}

fn load(common: &Common, flags: impl IntoIterator<Item = Option<String>>) -> Result<RunConfig> {
    load_adjusted(common, flags, |_| {})
}

fn load_adjusted(
    common: &Common,
    flags: impl IntoIterator<Item = Option<String>>,
    adjust: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend(flags.into_iter().flatten());
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    adjust(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            inputs,
            surface_samples,
            perturbed_samples,
            seed,
            common,
        } => {
            let cfg = load(
                &common,
                [
                    opt("sampling.surface_samples", surface_samples),
                    opt("sampling.perturbed_samples", perturbed_samples),
                    opt("sampling.seed", seed),
                ],
            )?;
            commands::preprocess(&inputs, &cfg, &cfg.cache_dir(common.cache_dir.as_deref()))
        }
        Command::Train {
            shapes,
            out,
            resume,
            arch,
            epochs,
            batch_size,
            batches_per_epoch,
            seed,
            common,
        } => {
            // a short --epochs run moves the decay epoch with it
            let cfg = load_adjusted(
                &common,
                [
                    opt("model.architecture", arch.as_deref().map(quoted)),
                    opt("train.epochs", epochs),
                    opt("train.batch_size", batch_size),
                    opt("train.batches_per_epoch", batches_per_epoch),
                    opt("train.seed", seed),
                ],
                |c| {
                    if epochs.is_some() {
                        c.train.decay_epoch = c.train.decay_epoch.min(c.train.epochs);
                    }
                },
            )?;
            commands::train(&shapes, &cfg, &cfg.cache_dir(common.cache_dir.as_deref()), &out, resume)
        }
        Command::Infer {
            checkpoint,
            shape,
            out,
            epochs,
            common,
        } => {
            let cfg = load(&common, [opt("infer.epochs", epochs)])?;
            commands::infer(&shape, &cfg, &cfg.cache_dir(common.cache_dir.as_deref()), &checkpoint, &out)
        }
        Command::Reconstruct {
            checkpoint,
            shape,
            out,
            resolution,
            margin,
            bounds,
            gt,
            fail_on_empty,
            common,
        } => {
            if bounds.as_ref().is_some_and(|b| b.len() != 6) {
                anyhow::bail!("--bounds takes six numbers x0,y0,z0,x1,y1,z1");
            }
            let bounds = bounds.map(|b| format!("[[{},{},{}],[{},{},{}]]", b[0], b[1], b[2], b[3], b[4], b[5]));
            let cfg = load(
                &common,
                [
                    opt("grid.resolution", resolution),
                    opt("grid.margin", margin),
                    opt("grid.bounds", bounds),
                ],
            )?;
            let args = ReconstructArgs {
                id: &shape,
                checkpoint: &checkpoint,
                out: &out,
                gt: gt.as_deref(),
                fail_on_empty,
            };
            commands::reconstruct(&args, &cfg, &cfg.cache_dir(common.cache_dir.as_deref()))
        }
        Command::Eval {
            gt,
            recon,
            method,
            shape,
            checkpoint,
            out,
            csv,
            samples,
            common,
        } => {
            let cfg = load(&common, [opt("metrics.surface_samples", samples)])?;
            let args = EvalArgs {
                gt: &gt,
                recon: &recon,
                method: &method,
                shape: shape.as_deref(),
                checkpoint: checkpoint.as_deref(),
                json: out.as_deref(),
                csv: csv.as_deref(),
            };
            commands::eval(&args, &cfg)
        }
        Command::Report { rows, out } => commands::report(&rows, out.as_deref()),
        Command::Fixtures { dir } => commands::write_fixtures(Path::new(&dir)),
    }
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Numerical>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
