use serde::{Deserialize, Serialize};

use crate::corpus::{cluster_size_of_aspects, ClusterHistogram, Dataset, Polarity};
use crate::error::{Error, Result};

const C: usize = Polarity::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: [f64; C],
    pub recall: [f64; C],
    pub f1: [f64; C],
    pub n_examples: usize,
}

/// `confusion[gold][pred]`.
pub fn confusion_matrix(gold: &[usize], pred: &[usize]) -> [[usize; C]; C] {
    let mut m = [[0; C]; C];
    for (&g, &p) in gold.iter().zip(pred) {
        m[g][p] += 1;
    }
    m
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Accuracy and per-class scores; classes without support or without
    /// predictions score 0.
    pub fn from_predictions(gold: &[usize], pred: &[usize]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Config(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::EmptySlice("predictions".into()));
        }
        if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= C) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad,
                len: C,
            });
        }
        let m = confusion_matrix(gold, pred);
        let correct: usize = (0..C).map(|c| m[c][c]).sum();
        let mut precision = [0.0; C];
        let mut recall = [0.0; C];
        let mut f1 = [0.0; C];
        for c in 0..C {
            let predicted: usize = (0..C).map(|g| m[g][c]).sum();
            let support: usize = m[c].iter().sum();
            precision[c] = ratio(m[c][c], predicted);
            recall[c] = ratio(m[c][c], support);
            let denom = precision[c] + recall[c];
            f1[c] = if denom == 0.0 {
                0.0
            } else {
                2.0 * precision[c] * recall[c] / denom
            };
        }
        Ok(Metrics {
            accuracy: ratio(correct, gold.len()),
            macro_f1: f1.iter().sum::<f64>() / C as f64,
            precision,
            recall,
            f1,
            n_examples: gold.len(),
        })
    }
}

/// Subset of aspects to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slice {
    All,
    Implicit,
    Explicit,
    /// Aspects that are alone in their example.
    MonoAspect,
    /// Aspects in a sentiment cluster of the given size bucket (1..=5, the
    /// last bucket meaning five or more).
    ClusterSize(usize),
}

impl std::str::FromStr for Slice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Slice::All),
            "implicit" => Ok(Slice::Implicit),
            "explicit" => Ok(Slice::Explicit),
            "mono" | "mono-aspect" => Ok(Slice::MonoAspect),
            other => match other.strip_prefix("cluster:").map(str::parse::<usize>) {
                Some(Ok(b)) if (1..=5).contains(&b) => Ok(Slice::ClusterSize(b)),
                _ => Err(format!(
                    "unknown slice `{other}` (all, implicit, explicit, mono, cluster:1..5)"
                )),
            },
        }
    }
}

impl std::fmt::Display for Slice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Slice::All => f.write_str("all"),
            Slice::Implicit => f.write_str("implicit"),
            Slice::Explicit => f.write_str("explicit"),
            Slice::MonoAspect => f.write_str("mono"),
            Slice::ClusterSize(b) => write!(f, "cluster:{b}"),
        }
    }
}

impl Slice {
    /// Membership flag for every aspect of `dataset`, in pair order.
    pub fn mask(self, dataset: &Dataset) -> Vec<bool> {
        let mut out = Vec::with_capacity(dataset.num_aspects());
        for ex in &dataset.examples {
            let sizes = cluster_size_of_aspects(ex);
            for (a, size) in ex.aspects.iter().zip(sizes) {
                out.push(match self {
                    Slice::All => true,
                    Slice::Implicit => a.implicit == Some(true),
                    Slice::Explicit => a.implicit != Some(true),
                    Slice::MonoAspect => ex.aspects.len() == 1,
                    Slice::ClusterSize(b) => ClusterHistogram::bucket(size) + 1 == b,
                });
            }
        }
        out
    }
}

/// Median and interquartile range (linear-interpolation quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Spread {
            median: quantile(&v, 0.5),
            iqr: quantile(&v, 0.75) - quantile(&v, 0.25),
        }
    }
}
