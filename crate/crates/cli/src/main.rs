//! `lsa`: corpus statistics, synthetic data, training, evaluation and sweeps
//! for local sentiment aggregation models.
//!
//! Every command writes its files plus a `manifest.json` into one output
//! directory. `--out` picks the directory; relative paths are resolved
//! against `LSA_OUTPUT_ROOT` when it is set. Without `--out` the directory is
//! `$LSA_OUTPUT_ROOT/<command>` (or `lsa-runs/<command>`).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod error;
mod invocation;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsa_core::corpus::SynthSpec;
use lsa_core::lsa::Variant;
use lsa_core::training::{parse_grid, Slice, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::invocation::Invocation;
use crate::manifest::{code_version, now, sha256_file, sha256_hex, FileHash, RunManifest, MANIFEST_VERSION};

const OUTPUT_ROOT_ENV: &str = "LSA_OUTPUT_ROOT";
const DEFAULT_ROOT: &str = "lsa-runs";

#[derive(Parser)]
#[command(name = "lsa", version, about = "Local sentiment aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Histogram of aspects by sentiment-cluster size.
    AnalyzeClusters {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        /// TOML generator spec; defaults to the built-in coherency corpus.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        parse_path: Option<PathBuf>,
        /// all, implicit, explicit, mono or cluster:1..5
        #[arg(long, default_value = "all")]
        slice: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with static window weights (eta_l, 1 - eta_l) over a grid.
    SweepEta {
        #[command(flatten)]
        train: TrainFlags,
        /// start:stop:step, both ends included.
        #[arg(long, default_value = "0:1:0.1")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per seed and report median and IQR.
    SweepSeeds {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the eta trajectory stored in a checkpoint as CSV.
    ExportTrajectory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Training options. Values from `--config` are overridden by flags.
#[derive(Args)]
struct TrainFlags {
    /// TOML file with TrainConfig fields; relative paths inside it are
    /// resolved against the file's directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eta_lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    eta_l2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dwa: bool,
    #[arg(long)]
    la_only: bool,
    #[arg(long)]
    ra_only: bool,
    #[arg(long)]
    backbone_only: bool,
    /// Frozen window weights as `eta_l,eta_r`.
    #[arg(long, value_delimiter = ',')]
    static_eta: Option<Vec<f64>>,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    val_path: Option<PathBuf>,
    #[arg(long)]
    test_path: Option<PathBuf>,
    #[arg(long)]
    parse_path: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

impl TrainFlags {
    fn resolve(self) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let mut c = TrainConfig::from_toml_str(&read_text(path)?)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
                for p in [&mut c.train_path, &mut c.val_path, &mut c.test_path, &mut c.parse_path]
                    .into_iter()
                    .flatten()
                {
                    *p = base.join(&*p);
                }
                c
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$field = v;
                }
            )*};
        }
        set!(variant, k, alpha, max_len, batch_size, lr, eta_lr, l2, eta_l2, epochs, seed);
        set!(d_model, layers, heads, ff_dim, val_fraction);
        c.no_dwa |= self.no_dwa;
        c.la_only |= self.la_only;
        c.ra_only |= self.ra_only;
        c.backbone_only |= self.backbone_only;
        c.freeze_encoder |= self.freeze_encoder;
        if let Some(e) = self.static_eta {
            let [l, r] = e[..] else {
                return Err(CliError::usage("--static-eta takes two values, eta_l,eta_r"));
            };
            c.static_eta = Some([l, r]);
        }
        for (slot, flag) in [
            (&mut c.train_path, self.train_path),
            (&mut c.val_path, self.val_path),
            (&mut c.test_path, self.test_path),
            (&mut c.parse_path, self.parse_path),
        ] {
            if flag.is_some() {
                *slot = flag;
            }
        }
        for p in [&mut c.train_path, &mut c.val_path, &mut c.test_path, &mut c.parse_path]
            .into_iter()
            .flatten()
        {
            *p = absolute(p)?;
        }
        c.validate().map_err(|e| CliError::usage(e.to_string()))?;
        if c.train_path.is_none() {
            return Err(CliError::usage("a training set is required (--train-path or train_path in --config)"));
        }
        Ok(c)
    }
}

fn output_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    match (out, root) {
        (Some(out), Some(root)) if out.is_relative() => root.join(out),
        (Some(out), _) => out,
        (None, Some(root)) => root.join(command),
        (None, None) => Path::new(DEFAULT_ROOT).join(command),
    }
}

fn hash_inputs(paths: &[PathBuf]) -> CliResult<Vec<FileHash>> {
    paths.iter().map(|p| FileHash::of(p)).collect()
}

/// Executes `inv` into `out` and records a manifest there.
fn run(inv: &Invocation, out: &Path) -> CliResult<RunManifest> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let started_at = now();
    let inputs = hash_inputs(&inv.inputs())?;
    let execution = inv.execute(out)?;
    let outputs = execution
        .outputs
        .iter()
        .map(|name| {
            Ok(FileHash {
                path: name.clone(),
                sha256: sha256_file(&out.join(name))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        code_version: code_version(),
        invocation: inv.clone(),
        seed: inv.seed(),
        config_sha256: inv.config().map(|c| sha256_hex(c.to_toml_string().as_bytes())),
        inputs,
        outputs,
        started_at,
        finished_at: now(),
    };
    manifest.save(out)?;
    println!("{}", execution.report);
    println!("{} written to {}", inv.name(), out.display());
    Ok(manifest)
}

fn replay(manifest_path: &Path, out: &Path) -> CliResult<()> {
    let recorded = RunManifest::load(manifest_path)?;
    for input in &recorded.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::data(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let fresh = run(&recorded.invocation, out)?;
    let mut differing = Vec::new();
    for old in &recorded.outputs {
        let status = match fresh.outputs.iter().find(|f| f.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => "identical",
            Some(_) => "DIFFERS",
            None => "MISSING",
        };
        println!("  {:<24} {status}", old.path.display());
        if status != "identical" {
            differing.push(old.path.display().to_string());
        }
    }
    if differing.is_empty() {
        println!("replay reproduced all {} outputs", recorded.outputs.len());
        Ok(())
    } else {
        Err(CliError::data(format!("replay differs in {}", differing.join(", "))))
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    let (inv, out) = match command {
        Command::AnalyzeClusters { dataset, out } => (
            Invocation::AnalyzeClusters {
                dataset: absolute(&dataset)?,
            },
            out,
        ),
        Command::Synth { spec, seed, out } => {
            let spec = match spec {
                Some(path) => SynthSpec::from_toml_str(&read_text(&path)?)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?,
                None => SynthSpec::default(),
            };
            (Invocation::Synth { spec, seed }, out)
        }
        Command::Train { train, out } => (Invocation::Train { config: train.resolve()? }, out),
        Command::Eval {
            checkpoint,
            data,
            parse_path,
            slice,
            out,
        } => {
            slice.parse::<Slice>().map_err(CliError::usage)?;
            (
                Invocation::Eval {
                    checkpoint: absolute(&checkpoint)?,
                    data: absolute(&data)?,
                    parse_path: parse_path.as_deref().map(absolute).transpose()?,
                    slice,
                },
                out,
            )
        }
        Command::SweepEta { train, grid, out } => {
            let grid = parse_grid(&grid).map_err(|e| CliError::usage(e.to_string()))?;
            (
                Invocation::SweepEta {
                    config: train.resolve()?,
                    grid,
                },
                out,
            )
        }
        Command::SweepSeeds { train, seeds, out } => {
            if seeds.len() < 2 {
                return Err(CliError::usage("a seed sweep needs at least two seeds"));
            }
            (
                Invocation::SweepSeeds {
                    config: train.resolve()?,
                    seeds,
                },
                out,
            )
        }
        Command::ExportTrajectory { checkpoint, out } => (
            Invocation::ExportTrajectory {
                checkpoint: absolute(&checkpoint)?,
            },
            out,
        ),
        Command::Replay { manifest, out } => {
            return replay(&manifest, &output_dir(out, "replay"));
        }
    };
    let dir = output_dir(out, inv.name());
    run(&inv, &dir).map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
