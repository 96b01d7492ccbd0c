use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lsa_autodiff::Checkpoint;
use lsa_core::corpus::{cluster_histogram, generate_synthetic_corpus, load_dataset, SynthSpec};
use lsa_core::distance::load_parses;
use lsa_core::lsa::LsaModel;
use lsa_core::training::{
    eta_sweep_csv, evaluate, seed_sweep, static_eta_sweep, train, EtaTrajectory, Slice, TrainConfig, TrainData,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A fully resolved command: absolute input paths and merged configuration.
/// Executing it twice with the same inputs writes the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    AnalyzeClusters {
        dataset: PathBuf,
    },
    Synth {
        spec: SynthSpec,
        seed: u64,
    },
    Train {
        config: TrainConfig,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        parse_path: Option<PathBuf>,
        slice: String,
    },
    SweepEta {
        config: TrainConfig,
        grid: Vec<f64>,
    },
    SweepSeeds {
        config: TrainConfig,
        seeds: Vec<u64>,
    },
    ExportTrajectory {
        checkpoint: PathBuf,
    },
}

/// Files written by one execution, relative to the output directory, and a
/// human-readable report for stdout.
#[derive(Debug, Default)]
pub struct Execution {
    pub outputs: Vec<PathBuf>,
    pub report: String,
}

impl Execution {
    fn write(&mut self, dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(PathBuf::from(name));
        Ok(())
    }
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::AnalyzeClusters { .. } => "analyze-clusters",
            Invocation::Synth { .. } => "synth",
            Invocation::Train { .. } => "train",
            Invocation::Eval { .. } => "eval",
            Invocation::SweepEta { .. } => "sweep-eta",
            Invocation::SweepSeeds { .. } => "sweep-seeds",
            Invocation::ExportTrajectory { .. } => "export-trajectory",
        }
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        match self {
            Invocation::Train { config }
            | Invocation::SweepEta { config, .. }
            | Invocation::SweepSeeds { config, .. } => Some(config),
            _ => None,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Synth { seed, .. } => Some(*seed),
            _ => self.config().map(|c| c.seed),
        }
    }

    /// Files the command reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Invocation::AnalyzeClusters { dataset } => vec![dataset.clone()],
            Invocation::Synth { .. } => Vec::new(),
            Invocation::Eval {
                checkpoint,
                data,
                parse_path,
                ..
            } => [Some(checkpoint), Some(data), parse_path.as_ref()]
                .into_iter()
                .flatten()
                .cloned()
                .collect(),
            Invocation::ExportTrajectory { checkpoint } => vec![checkpoint.clone()],
            _ => {
                let c = self.config().expect("training command");
                [&c.train_path, &c.val_path, &c.test_path, &c.parse_path]
                    .into_iter()
                    .flatten()
                    .cloned()
                    .collect()
            }
        }
    }

    pub fn execute(&self, out: &Path) -> CliResult<Execution> {
        let mut ex = Execution::default();
        match self {
            Invocation::AnalyzeClusters { dataset } => {
                let ds = load_dataset(dataset)?;
                let hist = cluster_histogram(&ds);
                let csv = hist.to_csv();
                ex.report = format!("{} aspects in {} examples\n{csv}", hist.sum, ds.len());
                ex.write(out, "clusters.csv", csv)?;
            }
            Invocation::Synth { spec, seed } => {
                let corpus = generate_synthetic_corpus(spec, *seed)?;
                ex.write(out, "train.json", corpus.train.to_json_string())?;
                if let Some(val) = &corpus.val {
                    ex.write(out, "val.json", val.to_json_string())?;
                }
                ex.write(out, "test.json", corpus.test.to_json_string())?;
                ex.write(out, "spec.toml", toml::to_string(spec).expect("spec serializes"))?;
                ex.report = format!(
                    "train {} examples / {} aspects, test {} examples / {} aspects",
                    corpus.train.len(),
                    corpus.train.num_aspects(),
                    corpus.test.len(),
                    corpus.test.num_aspects()
                );
            }
            Invocation::Train { config } => {
                let data = TrainData::load(config)?;
                let outcome = train(config, &data)?;
                ex.write(out, "config.toml", config.to_toml_string())?;
                ex.write(out, "metrics.csv", outcome.metrics_csv())?;
                ex.write(out, "loss.csv", outcome.loss_csv())?;
                ex.write(out, "eta_trajectory.csv", outcome.trajectory.to_csv())?;
                ex.write(out, "model.ckpt", outcome.checkpoint(config).to_bytes())?;
                let best = outcome.best();
                let fmt_acc = |m: &Option<lsa_core::training::Metrics>| {
                    m.as_ref()
                        .map_or("-".to_string(), |m| format!("acc {:.4} macro-F1 {:.4}", m.accuracy, m.macro_f1))
                };
                let mut r = String::new();
                writeln!(r, "best epoch {} of {}", outcome.best_epoch, config.epochs).unwrap();
                writeln!(r, "validation: {}", fmt_acc(&best.val)).unwrap();
                writeln!(r, "test: {}", fmt_acc(&best.test)).unwrap();
                write!(r, "final eta ({:.6}, {:.6})", outcome.final_eta.0, outcome.final_eta.1).unwrap();
                if outcome.fallback_count > 0 {
                    write!(r, "\n{} examples fell back to positional distances", outcome.fallback_count).unwrap();
                }
                ex.report = r;
            }
            Invocation::Eval {
                checkpoint,
                data,
                parse_path,
                slice,
            } => {
                let slice: Slice = slice.parse().map_err(CliError::usage)?;
                let ckpt = Checkpoint::load(checkpoint)?;
                let model = LsaModel::from_checkpoint(&ckpt)?;
                let ds = load_dataset(data)?;
                let parses = parse_path.as_ref().map(load_parses).transpose()?;
                let m = evaluate(&model, &ds, parses.as_ref(), slice)?;
                let mut csv = String::from("slice,n,acc,macro_f1\n");
                writeln!(csv, "{slice},{},{:.6},{:.6}", m.n_examples, m.accuracy, m.macro_f1).unwrap();
                ex.write(out, "eval.csv", csv)?;
                ex.report = format!(
                    "slice {slice}: {} aspects, acc {:.4}, macro-F1 {:.4}",
                    m.n_examples, m.accuracy, m.macro_f1
                );
            }
            Invocation::SweepEta { config, grid } => {
                let data = TrainData::load(config)?;
                let rows = static_eta_sweep(config, &data, grid)?;
                let csv = eta_sweep_csv(&rows);
                ex.report = csv.trim_end().to_string();
                ex.write(out, "eta_sweep.csv", csv)?;
            }
            Invocation::SweepSeeds { config, seeds } => {
                let data = TrainData::load(config)?;
                let sweep = seed_sweep(config, &data, seeds)?;
                ex.report = format!(
                    "{} seeds: acc median {:.4} (IQR {:.4}), macro-F1 median {:.4} (IQR {:.4})",
                    sweep.runs.len(),
                    sweep.accuracy.median,
                    sweep.accuracy.iqr,
                    sweep.macro_f1.median,
                    sweep.macro_f1.iqr
                );
                ex.write(out, "seed_sweep.csv", sweep.to_csv())?;
            }
            Invocation::ExportTrajectory { checkpoint } => {
                let ckpt = Checkpoint::load(checkpoint)?;
                let trajectory: EtaTrajectory = serde_json::from_value(ckpt.meta["trajectory"].clone())
                    .map_err(|e| CliError::data(format!("{}: no eta trajectory: {e}", checkpoint.display())))?;
                let last = trajectory.last().unwrap_or((0, f64::NAN, f64::NAN));
                ex.report = format!(
                    "{} steps, final eta ({:.6}, {:.6})",
                    trajectory.records.len().saturating_sub(1),
                    last.1,
                    last.2
                );
                ex.write(out, "eta_trajectory.csv", trajectory.to_csv())?;
            }
        }
        Ok(ex)
    }
}
