//! Loss, training loop, evaluation and the seed and static-weight sweeps.

mod config;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lsa_autodiff::{AdamW, ParamGroup, ParamSet, Tape, LOG_CLAMP};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, Dataset, Example};
use crate::distance::{load_parses, DependencyTree};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::lsa::{LsaModel, PreparedExample, GROUP_ETA, GROUP_MODEL};

pub use config::TrainConfig;
pub use metrics::{confusion_matrix, quantile, Metrics, Slice, Spread};

/// Summed cross-entropy plus both squared-norm penalties.
pub fn total_loss(probs: &[[f64; 3]], gold: &[usize], params: &ParamSet, l2: f64, eta_l2: f64) -> f64 {
    let ce: f64 = probs
        .iter()
        .zip(gold)
        .map(|(p, &g)| -p[g].max(LOG_CLAMP).ln())
        .sum();
    ce + l2 * params.sum_squares_in_groups(&[GROUP_MODEL]) + eta_l2 * params.sum_squares_in_groups(&[GROUP_ETA])
}

/// Window weights after every optimizer step; row 0 is the initial state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EtaTrajectory {
    pub records: Vec<(usize, f64, f64)>,
}

impl EtaTrajectory {
    pub fn push(&mut self, step: usize, eta: (f64, f64)) {
        self.records.push((step, eta.0, eta.1));
    }

    pub fn last(&self) -> Option<(usize, f64, f64)> {
        self.records.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,eta_l,eta_r\n");
        for (step, l, r) in &self.records {
            writeln!(out, "{step},{l:?},{r:?}").expect("string write");
        }
        out
    }
}

/// Datasets of one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
    pub parses: Option<BTreeMap<String, DependencyTree>>,
}

impl TrainData {
    /// Loads the files named in `config`.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let train_path = config
            .train_path
            .as_ref()
            .ok_or_else(|| Error::Config("train_path is required".into()))?;
        Ok(TrainData {
            train: load_dataset(train_path)?,
            val: config.val_path.as_ref().map(load_dataset).transpose()?,
            test: config.test_path.as_ref().map(load_dataset).transpose()?,
            parses: config.parse_path.as_ref().map(load_parses).transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss per aspect over the epoch; `None` for epoch 0.
    pub train_loss: Option<f64>,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model from the epoch with the best validation accuracy.
    pub model: LsaModel,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub trajectory: EtaTrajectory,
    /// Examples whose tree distances fell back to positional ones.
    pub fallback_count: usize,
    pub final_eta: (f64, f64),
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Test metrics at the selected epoch, else validation metrics.
    pub fn headline(&self) -> Option<&Metrics> {
        let best = self.best();
        best.test.as_ref().or(best.val.as_ref())
    }

    /// `epoch,split,acc,macro_f1` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,acc,macro_f1\n");
        for rec in &self.epochs {
            for (split, m) in [("train", &rec.train), ("val", &rec.val), ("test", &rec.test)] {
                if let Some(m) = m {
                    writeln!(out, "{},{split},{:.6},{:.6}", rec.epoch, m.accuracy, m.macro_f1).expect("string write");
                }
            }
        }
        out
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for rec in &self.epochs {
            if let Some(l) = rec.train_loss {
                writeln!(out, "{},{l:?}", rec.epoch).expect("string write");
            }
        }
        out
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> lsa_autodiff::Checkpoint {
        let mut extra = serde_json::Map::new();
        extra.insert("train_config".into(), serde_json::to_value(config).expect("config serializes"));
        extra.insert("best_epoch".into(), self.best_epoch.into());
        extra.insert("trajectory".into(), serde_json::to_value(&self.trajectory).expect("trajectory serializes"));
        self.model.checkpoint(extra)
    }
}

/// Splits off a seeded share of examples for validation.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    idx.shuffle(&mut rng);
    let n_val = (fraction * dataset.len() as f64).round() as usize;
    let mut val_idx = idx[..n_val].to_vec();
    let mut train_idx = idx[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ids: &[usize]| Dataset {
        examples: ids.iter().map(|&i| dataset.examples[i].clone()).collect(),
    };
    (pick(&train_idx), pick(&val_idx))
}

pub fn build_vocabulary(dataset: &Dataset) -> Vocabulary {
    Vocabulary::build(dataset.examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str)))
}

fn parse_for<'a>(
    parses: Option<&'a BTreeMap<String, DependencyTree>>,
    example: &Example,
) -> Option<&'a DependencyTree> {
    parses.and_then(|p| example.parse_ref.as_ref().and_then(|r| p.get(r)))
}

/// Prepares every example; returns the number of tree-distance fallbacks.
pub fn prepare_dataset(
    model: &LsaModel,
    dataset: &Dataset,
    parses: Option<&BTreeMap<String, DependencyTree>>,
) -> Result<(Vec<PreparedExample>, usize)> {
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(dataset.len());
    for (i, ex) in dataset.examples.iter().enumerate() {
        let prepared = model.prepare(ex, parse_for(parses, ex)).map_err(|e| match e {
            Error::TooLong { len, max } => Error::InvalidExample {
                example: i,
                message: format!("{len} positions exceed max_len {max}"),
            },
            other => other,
        })?;
        fallbacks += usize::from(prepared.used_fallback);
        out.push(prepared);
    }
    Ok((out, fallbacks))
}

/// Predicted and gold class of every aspect, in pair order.
pub fn predict_dataset(
    model: &LsaModel,
    dataset: &Dataset,
    prepared: &[PreparedExample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut gold = Vec::with_capacity(dataset.num_aspects());
    let mut pred = Vec::with_capacity(dataset.num_aspects());
    for (ex, prep) in dataset.examples.iter().zip(prepared) {
        if ex.aspects.is_empty() {
            continue;
        }
        for (probs, a) in model.predict(ex, prep)?.iter().zip(&prep.aspects) {
            gold.push(a.gold);
            pred.push(argmax(probs));
        }
    }
    Ok((gold, pred))
}

pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn metrics_on(gold: &[usize], pred: &[usize], mask: &[bool], slice: Slice) -> Result<Metrics> {
    let (g, p): (Vec<usize>, Vec<usize>) = gold
        .iter()
        .zip(pred)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((&g, &p), _)| (g, p))
        .unzip();
    if g.is_empty() {
        return Err(Error::EmptySlice(slice.to_string()));
    }
    Metrics::from_predictions(&g, &p)
}

/// Scores `model` on a slice of `dataset`.
pub fn evaluate(
    model: &LsaModel,
    dataset: &Dataset,
    parses: Option<&BTreeMap<String, DependencyTree>>,
    slice: Slice,
) -> Result<Metrics> {
    let (prepared, _) = prepare_dataset(model, dataset, parses)?;
    let (gold, pred) = predict_dataset(model, dataset, &prepared)?;
    metrics_on(&gold, &pred, &slice.mask(dataset), slice)
}

struct Split<'a> {
    data: &'a Dataset,
    prepared: Vec<PreparedExample>,
}

impl Split<'_> {
    fn score(&self, model: &LsaModel) -> Result<Option<Metrics>> {
        if self.data.num_aspects() == 0 {
            return Ok(None);
        }
        let (gold, pred) = predict_dataset(model, self.data, &self.prepared)?;
        Metrics::from_predictions(&gold, &pred).map(Some)
    }
}

fn prepare_split<'a>(
    model: &LsaModel,
    dataset: Option<&'a Dataset>,
    parses: Option<&BTreeMap<String, DependencyTree>>,
    fallbacks: &mut usize,
) -> Result<Option<Split<'a>>> {
    dataset
        .map(|data| {
            let (prepared, fb) = prepare_dataset(model, data, parses)?;
            *fallbacks += fb;
            Ok(Split { data, prepared })
        })
        .transpose()
}

/// Trains one model. Batches are groups of `batch_size` examples; the loss of
/// a batch is the summed cross-entropy of all their aspects.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, val_set) = match (&data.val, config.val_fraction > 0.0) {
        (Some(v), _) => (data.train.clone(), Some(v.clone())),
        (None, true) => {
            let (t, v) = holdout_split(&data.train, config.val_fraction, config.seed);
            (t, Some(v))
        }
        (None, false) => (data.train.clone(), None),
    };
    let vocab = build_vocabulary(&train_set);
    let mut model = LsaModel::new(config.model_config(vocab.len()), vocab, config.seed)?;
    if config.freeze_encoder {
        model.set_encoder_trainable(false);
    }
    let parses = data.parses.as_ref();
    let (train_prepared, mut fallback_count) = prepare_dataset(&model, &train_set, parses)?;
    let val = prepare_split(&model, val_set.as_ref(), parses, &mut fallback_count)?;
    let test = prepare_split(&model, data.test.as_ref(), parses, &mut fallback_count)?;
    if fallback_count > 0 {
        warn!("{fallback_count} examples without a usable parse fell back to positional distances");
    }

    let mut optimizer = AdamW::new(vec![
        ParamGroup {
            name: "model".into(),
            lr: config.lr,
            weight_decay: config.l2,
        },
        ParamGroup {
            name: "eta".into(),
            lr: config.eta_lr,
            weight_decay: config.eta_l2,
        },
    ]);
    let mut trajectory = EtaTrajectory::default();
    trajectory.push(0, model.eta());

    let score = |model: &LsaModel, split: &Option<Split>| -> Result<Option<Metrics>> {
        split.as_ref().map_or(Ok(None), |s| s.score(model))
    };
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        train: None,
        val: score(&model, &val)?,
        test: score(&model, &test)?,
    }];
    let mut best = (0, epochs[0].val.as_ref().map(|m| m.accuracy));
    let mut best_model = model.clone();

    let usable: Vec<usize> = (0..train_set.len())
        .filter(|&i| !train_set.examples[i].aspects.is_empty())
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let (mut gold_all, mut pred_all) = (Vec::new(), Vec::new());
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let mut terms = Vec::new();
            let mut batch_probs = Vec::new();
            let mut batch_gold = Vec::new();
            for &i in batch {
                let ex = &train_set.examples[i];
                let prep = &train_prepared[i];
                let targets: Vec<usize> = (0..ex.aspects.len()).collect();
                let outputs = model.forward(&mut tape, &p, ex, prep, &targets)?;
                for (out, a) in outputs.iter().zip(&prep.aspects) {
                    terms.push(tape.cross_entropy(out.probs, a.gold)?);
                    let d = tape.value(out.probs).data();
                    batch_probs.push([d[0], d[1], d[2]]);
                    batch_gold.push(a.gold);
                }
            }
            let stacked = tape.concat(&terms, 0)?;
            let loss = tape.sum(stacked)?;
            let reported = total_loss(&batch_probs, &batch_gold, &model.params, config.l2, config.eta_l2);
            if !tape.value(loss).data()[0].is_finite() || !reported.is_finite() {
                return Err(Error::NonFinite { step });
            }
            loss_sum += reported;
            tape.backward(loss)?;
            model.params.collect_grads(&tape, &p);
            optimizer.step(&mut model.params)?;
            model.params.clear_grads();
            trajectory.push(step, model.eta());
            pred_all.extend(batch_probs.iter().map(|p| argmax(p)));
            gold_all.extend(batch_gold);
        }
        let record = EpochRecord {
            epoch,
            train_loss: (!gold_all.is_empty()).then(|| loss_sum / gold_all.len() as f64),
            train: (!gold_all.is_empty())
                .then(|| Metrics::from_predictions(&gold_all, &pred_all))
                .transpose()?,
            val: score(&model, &val)?,
            test: score(&model, &test)?,
        };
        info!(
            "epoch {epoch}: loss {:.4} val acc {} test acc {}",
            record.train_loss.unwrap_or(f64::NAN),
            record.val.as_ref().map_or("-".into(), |m| format!("{:.4}", m.accuracy)),
            record.test.as_ref().map_or("-".into(), |m| format!("{:.4}", m.accuracy)),
        );
        let acc = record.val.as_ref().map(|m| m.accuracy);
        let improved = match (acc, best.1) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = (epoch, acc);
            best_model = model.clone();
        }
        epochs.push(record);
    }
    let final_eta = model.eta();
    Ok(TrainOutcome {
        model: best_model,
        best_epoch: best.0,
        epochs,
        trajectory,
        fallback_count,
        final_eta,
    })
}

/// One row of a seed sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
    pub final_eta: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub runs: Vec<SeedRun>,
    pub accuracy: Spread,
    pub macro_f1: Spread,
}

impl SeedSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,best_epoch,acc,macro_f1,eta_l,eta_r\n");
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:?},{:?}",
                r.seed, r.best_epoch, r.metrics.accuracy, r.metrics.macro_f1, r.final_eta.0, r.final_eta.1
            )
            .expect("string write");
        }
        writeln!(out, "median,,{:.6},{:.6},,", self.accuracy.median, self.macro_f1.median).expect("string write");
        writeln!(out, "iqr,,{:.6},{:.6},,", self.accuracy.iqr, self.macro_f1.iqr).expect("string write");
        out
    }
}

fn headline(outcome: &TrainOutcome) -> Result<Metrics> {
    outcome
        .headline()
        .cloned()
        .ok_or_else(|| Error::Config("no validation or test split to score".into()))
}

/// Trains once per seed and summarises test (or validation) scores.
pub fn seed_sweep(config: &TrainConfig, data: &TrainData, seeds: &[u64]) -> Result<SeedSweep> {
    if seeds.len() < 2 {
        return Err(Error::Config("a seed sweep needs at least two seeds".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        let outcome = train(&cfg, data)?;
        runs.push(SeedRun {
            seed,
            best_epoch: outcome.best_epoch,
            metrics: headline(&outcome)?,
            final_eta: outcome.final_eta,
        });
    }
    let acc: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy).collect();
    let f1: Vec<f64> = runs.iter().map(|r| r.metrics.macro_f1).collect();
    Ok(SeedSweep {
        accuracy: Spread::of(&acc),
        macro_f1: Spread::of(&f1),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSweepRow {
    pub eta_l: f64,
    pub eta_r: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn eta_sweep_csv(rows: &[EtaSweepRow]) -> String {
    let mut out = String::from("eta_l,eta_r,acc,macro_f1\n");
    for r in rows {
        writeln!(out, "{:?},{:?},{:.6},{:.6}", r.eta_l, r.eta_r, r.accuracy, r.macro_f1).expect("string write");
    }
    out
}

/// `start:stop:step` inclusive of both ends, each point rounded to 1e-12.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid `{spec}` is not start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Trains with fixed window weights `(x, 1 - x)` for each grid point.
pub fn static_eta_sweep(config: &TrainConfig, data: &TrainData, grid: &[f64]) -> Result<Vec<EtaSweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("eta grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &eta_l in grid {
        let eta_r = 1.0 - eta_l;
        let cfg = TrainConfig {
            no_dwa: true,
            static_eta: Some([eta_l, eta_r]),
            ..config.clone()
        };
        let metrics = headline(&train(&cfg, data)?)?;
        rows.push(EtaSweepRow {
            eta_l,
            eta_r,
            accuracy: metrics.accuracy,
            macro_f1: metrics.macro_f1,
        });
    }
    Ok(rows)
}
