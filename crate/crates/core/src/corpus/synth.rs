//! Controlled synthetic corpora with a tunable polarity coherence between
//! neighbouring aspects.
//!
//! Each sentence is a sequence of clauses. An aspect clause is the aspect
//! term, a slot token and a run of filler words. The slot holds a sentiment
//! cue of the aspect's polarity for explicit aspects and a filler for
//! implicit ones. With `balance_cues`, distractor clauses (an unannotated
//! noun followed by a cue) are inserted at uniformly random positions until
//! every polarity has the same cue count in the sentence. The clause order is
//! then a uniform shuffle, so neither the cue counts nor the position of a
//! cue relative to an implicit aspect reveal its label.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AspectAnnotation, Dataset, Example, Polarity};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of distinct words, split between cues, nouns and fillers.
    pub vocab_size: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    #[serde(default)]
    pub val_examples: usize,
    /// Relative weight of sentences with 1, 2, 3, ... aspects.
    pub aspects_per_example: Vec<f64>,
    /// Probability that an aspect copies the polarity of its left neighbour.
    pub rho: f64,
    /// Fraction of aspects with no cue in their own clause.
    pub implicit_fraction: f64,
    #[serde(default = "default_min_gap")]
    pub min_gap: usize,
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
    /// Fraction of aspect terms that are two words long.
    #[serde(default)]
    pub multiword_fraction: f64,
    #[serde(default = "default_true")]
    pub balance_cues: bool,
}

fn default_min_gap() -> usize {
    3
}

fn default_max_gap() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 50,
            train_examples: 2000,
            test_examples: 500,
            val_examples: 0,
            aspects_per_example: vec![0.2, 0.8],
            rho: 1.0,
            implicit_fraction: 0.4,
            min_gap: default_min_gap(),
            max_gap: default_max_gap(),
            multiword_fraction: 0.0,
            balance_cues: true,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Synth(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Synth(m));
        if self.vocab_size < 16 {
            return fail(format!("vocab_size {} is below the minimum of 16", self.vocab_size));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho {} outside [0, 1]", self.rho));
        }
        if !(0.0..1.0).contains(&self.implicit_fraction) {
            return fail(format!("implicit_fraction {} outside [0, 1)", self.implicit_fraction));
        }
        if self.implicit_fraction > 0.0 && self.rho == 0.0 {
            return fail("implicit aspects need rho > 0, otherwise their labels cannot be inferred".into());
        }
        if !(0.0..=1.0).contains(&self.multiword_fraction) {
            return fail(format!("multiword_fraction {} outside [0, 1]", self.multiword_fraction));
        }
        if self.min_gap < 3 || self.max_gap < self.min_gap {
            return fail(format!(
                "gap range {}..={} must start at 3 or more so implicit aspects have no cue within 3 tokens",
                self.min_gap, self.max_gap
            ));
        }
        if self.aspects_per_example.is_empty()
            || self.aspects_per_example.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.aspects_per_example.iter().sum::<f64>() <= 0.0
        {
            return fail("aspects_per_example needs non-negative weights with a positive sum".into());
        }
        Ok(())
    }
}

/// Word lists used by the generator.
#[derive(Debug, Clone)]
pub struct SynthLexicon {
    pub cues: [Vec<String>; 3],
    pub nouns: Vec<String>,
    pub fillers: Vec<String>,
}

impl SynthLexicon {
    pub fn new(vocab_size: usize) -> Self {
        let per_class = (vocab_size / 10).max(1);
        let nouns = ((vocab_size - 3 * per_class) / 2).max(2);
        let fillers = vocab_size - 3 * per_class - nouns;
        let words = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        SynthLexicon {
            cues: [words("pos", per_class), words("neg", per_class), words("neu", per_class)],
            nouns: words("n", nouns),
            fillers: words("w", fillers),
        }
    }

    pub fn cue_polarity(&self, word: &str) -> Option<Polarity> {
        Polarity::ALL
            .into_iter()
            .find(|p| self.cues[p.index()].iter().any(|c| c == word))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl SyntheticCorpus {
    /// Writes `train.json`, `test.json` and, when present, `val.json`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(dir.join("train.json"))?;
        self.test.save(dir.join("test.json"))?;
        if let Some(val) = &self.val {
            val.save(dir.join("val.json"))?;
        }
        Ok(())
    }
}

pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let lexicon = SynthLexicon::new(spec.vocab_size);
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        generate_split(spec, &lexicon, n, &mut rng)
    };
    let train = split(0, spec.train_examples)?;
    let test = split(1, spec.test_examples)?;
    let val = match spec.val_examples {
        0 => None,
        n => Some(split(2, n)?),
    };
    Ok(SyntheticCorpus { train, val, test })
}

struct Skeleton {
    polarities: Vec<Polarity>,
    implicit: Vec<bool>,
}

enum Clause {
    Aspect(usize),
    Distractor(Polarity),
}

fn random_polarity(rng: &mut ChaCha8Rng) -> Polarity {
    Polarity::ALL[rng.random_range(0..3)]
}

fn generate_split(spec: &SynthSpec, lex: &SynthLexicon, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let counts = WeightedIndex::new(&spec.aspects_per_example).map_err(|e| Error::Synth(e.to_string()))?;
    let mut skeletons: Vec<Skeleton> = (0..n)
        .map(|_| {
            let m = counts.sample(rng) + 1;
            let mut polarities = vec![random_polarity(rng)];
            for _ in 1..m {
                let prev = *polarities.last().expect("non-empty");
                let p = if rng.random_bool(spec.rho) { prev } else { random_polarity(rng) };
                polarities.push(p);
            }
            Skeleton {
                implicit: vec![false; m],
                polarities,
            }
        })
        .collect();

    choose_implicit(spec, &mut skeletons, rng)?;
    let examples = skeletons.iter().map(|s| realize(spec, lex, s, rng)).collect();
    Dataset::new(examples)
}

/// Marks a shuffled selection of aspects implicit so that no two implicit
/// aspects are neighbours; every implicit aspect thus has an explicit one
/// next to it.
fn choose_implicit(spec: &SynthSpec, skeletons: &mut [Skeleton], rng: &mut ChaCha8Rng) -> Result<()> {
    let total: usize = skeletons.iter().map(|s| s.polarities.len()).sum();
    let target = (spec.implicit_fraction * total as f64).round() as usize;
    if target == 0 {
        return Ok(());
    }
    let mut candidates: Vec<(usize, usize)> = skeletons
        .iter()
        .enumerate()
        .filter(|(_, s)| s.polarities.len() >= 2)
        .flat_map(|(e, s)| (0..s.polarities.len()).map(move |a| (e, a)))
        .collect();
    candidates.shuffle(rng);
    let mut chosen = 0;
    for (e, a) in candidates {
        if chosen == target {
            break;
        }
        let flags = &mut skeletons[e].implicit;
        let left_free = a == 0 || !flags[a - 1];
        let right_free = a + 1 == flags.len() || !flags[a + 1];
        if left_free && right_free {
            flags[a] = true;
            chosen += 1;
        }
    }
    if chosen < target {
        return Err(Error::Synth(format!(
            "implicit_fraction {} not reachable: only {chosen} of {total} aspects could be made implicit",
            spec.implicit_fraction
        )));
    }
    Ok(())
}

fn pick<'a>(words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    &words[rng.random_range(0..words.len())]
}

fn realize(spec: &SynthSpec, lex: &SynthLexicon, s: &Skeleton, rng: &mut ChaCha8Rng) -> Example {
    let mut units: Vec<Clause> = (0..s.polarities.len()).map(Clause::Aspect).collect();
    if spec.balance_cues {
        let mut cue_counts = [0usize; 3];
        for (p, &implicit) in s.polarities.iter().zip(&s.implicit) {
            if !implicit {
                cue_counts[p.index()] += 1;
            }
        }
        let top = (*cue_counts.iter().max().expect("three classes")).max(1);
        for p in Polarity::ALL {
            for _ in cue_counts[p.index()]..top {
                let at = rng.random_range(0..=units.len());
                units.insert(at, Clause::Distractor(p));
            }
        }
    }

    let mut tokens: Vec<String> = Vec::new();
    let mut aspects = Vec::new();
    for clause in units {
        match clause {
            Clause::Aspect(a) => {
                let start = tokens.len();
                let len = if rng.random_bool(spec.multiword_fraction) { 2 } else { 1 };
                for _ in 0..len {
                    tokens.push(pick(&lex.nouns, rng).to_string());
                }
                aspects.push(AspectAnnotation {
                    span: (start, start + len),
                    term: tokens[start..].to_vec(),
                    polarity: s.polarities[a],
                    implicit: Some(s.implicit[a]),
                });
                let slot = if s.implicit[a] {
                    pick(&lex.fillers, rng)
                } else {
                    pick(&lex.cues[s.polarities[a].index()], rng)
                };
                tokens.push(slot.to_string());
            }
            Clause::Distractor(p) => {
                tokens.push(pick(&lex.nouns, rng).to_string());
                tokens.push(pick(&lex.cues[p.index()], rng).to_string());
            }
        }
        let gap = rng.random_range(spec.min_gap..=spec.max_gap);
        for _ in 0..gap {
            tokens.push(pick(&lex.fillers, rng).to_string());
        }
    }
    tokens.push(".".to_string());
    Example {
        text: tokens.join(" "),
        tokens,
        aspects,
        parse_ref: None,
    }
}
