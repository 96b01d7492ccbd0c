//! ABSA examples, dataset I/O, aspect adjacency and sentiment clusters.

mod semeval;
pub mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use semeval::parse_semeval_xml;
pub use synth::{generate_synthetic_corpus, SynthSpec, SyntheticCorpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(format!("unknown polarity `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AspectAnnotation {
    /// Half-open token range `[start, end)`.
    #[serde(with = "span_pair", rename = "span")]
    pub span: (usize, usize),
    pub term: Vec<String>,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit: Option<bool>,
}

impl AspectAnnotation {
    pub fn start(&self) -> usize {
        self.span.0
    }

    pub fn end(&self) -> usize {
        self.span.1
    }

    pub fn len(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.span.0..self.span.1
    }
}

mod span_pair {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(span: &(usize, usize), s: S) -> Result<S::Ok, S::Error> {
        [span.0, span.1].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(usize, usize), D::Error> {
        let [a, b] = <[usize; 2]>::deserialize(d)?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub text: String,
    pub tokens: Vec<String>,
    pub aspects: Vec<AspectAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_ref: Option<String>,
}

impl Example {
    /// Sorts aspects by span and checks bounds, term text and overlap.
    /// `index` is only used for error messages.
    pub fn validate(&mut self, index: usize) -> Result<()> {
        let invalid = |message: String| Error::InvalidExample {
            example: index,
            message,
        };
        if self.tokens.is_empty() {
            return Err(invalid("example has no tokens".into()));
        }
        self.aspects.sort_by_key(|a| a.span);
        for (j, a) in self.aspects.iter().enumerate() {
            let (start, end) = a.span;
            if start >= end || end > self.tokens.len() {
                return Err(invalid(format!(
                    "aspect {j} span [{start}, {end}) invalid for {} tokens",
                    self.tokens.len()
                )));
            }
            let found = &self.tokens[start..end];
            if found != a.term.as_slice() {
                return Err(Error::SpanMismatch {
                    example: index,
                    aspect: j,
                    expected: a.term.clone(),
                    found: found.to_vec(),
                });
            }
        }
        for (j, pair) in self.aspects.windows(2).enumerate() {
            if pair[1].start() < pair[0].end() {
                return Err(invalid(format!(
                    "aspects {j} and {} overlap: [{}, {}) and [{}, {})",
                    j + 1,
                    pair[0].start(),
                    pair[0].end(),
                    pair[1].start(),
                    pair[1].end()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    AbsaJson,
    SemevalXml,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "absa-json" => Ok(DatasetFormat::AbsaJson),
            "semeval-xml" => Ok(DatasetFormat::SemevalXml),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

impl DatasetFormat {
    /// Guesses from the extension: `.xml` is SemEval, anything else absa-json.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("xml") => DatasetFormat::SemevalXml,
            _ => DatasetFormat::AbsaJson,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u32,
    examples: Vec<Example>,
}

/// Identifies one classification pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRef {
    pub example: usize,
    pub aspect: usize,
}

impl Dataset {
    pub const VERSION: u32 = 1;

    pub fn new(mut examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter_mut().enumerate() {
            ex.validate(i)?;
        }
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_aspects(&self) -> usize {
        self.examples.iter().map(|e| e.aspects.len()).sum()
    }

    /// Every (example, aspect) classification pair in order.
    pub fn pairs(&self) -> Vec<PairRef> {
        self.examples
            .iter()
            .enumerate()
            .flat_map(|(example, e)| (0..e.aspects.len()).map(move |aspect| PairRef { example, aspect }))
            .collect()
    }

    pub fn aspect(&self, pair: PairRef) -> &AspectAnnotation {
        &self.examples[pair.example].aspects[pair.aspect]
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s).map_err(|e| Error::Schema {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.version != Self::VERSION {
            return Err(Error::Schema {
                line: 1,
                column: 1,
                message: format!("unsupported version {}", file.version),
            });
        }
        Self::new(file.examples)
    }

    /// Canonical serialization: pretty-printed with a trailing newline.
    pub fn to_json_string(&self) -> String {
        let file = DatasetFile {
            version: Self::VERSION,
            examples: self.examples.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("dataset serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match format {
            DatasetFormat::AbsaJson => Self::from_json_str(&text),
            DatasetFormat::SemevalXml => parse_semeval_xml(&text),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Loads `path`, picking the format from its extension.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    Dataset::load(path, DatasetFormat::from_path(path))
}

/// Indices of the `k` aspects on each side of `target`. Left neighbours are
/// ordered nearest last, right neighbours nearest first.
pub fn adjacent_aspects(example: &Example, target: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = example.aspects.len();
    if target >= n {
        return Err(Error::IndexOutOfRange {
            what: "aspect",
            index: target,
            len: n,
        });
    }
    if k == 0 {
        return Err(Error::Config("window size k must be at least 1".into()));
    }
    let left = (target.saturating_sub(k)..target).collect();
    let right = (target + 1..n.min(target + 1 + k)).collect();
    Ok((left, right))
}

/// Aspect counts per cluster size bucket. Bucket `i` holds clusters of size
/// `i + 1`, the last bucket holds every cluster of size five or more.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterHistogram {
    pub counts: [u64; 5],
    pub sum: u64,
}

impl ClusterHistogram {
    pub const LABELS: [&'static str; 5] = ["1", "2", "3", "4", ">=5"];

    pub fn bucket(size: usize) -> usize {
        size.clamp(1, 5) - 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,count\n");
        for (label, count) in Self::LABELS.iter().zip(self.counts) {
            out.push_str(&format!("{label},{count}\n"));
        }
        out
    }
}

/// Sizes of the maximal same-polarity runs in one example.
pub fn cluster_sizes(example: &Example) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    let mut prev = None;
    for a in &example.aspects {
        if prev == Some(a.polarity) {
            *sizes.last_mut().expect("run started") += 1;
        } else {
            sizes.push(1);
        }
        prev = Some(a.polarity);
    }
    sizes
}

pub fn cluster_histogram(dataset: &Dataset) -> ClusterHistogram {
    let mut h = ClusterHistogram::default();
    for ex in &dataset.examples {
        for size in cluster_sizes(ex) {
            h.counts[ClusterHistogram::bucket(size)] += size as u64;
            h.sum += size as u64;
        }
    }
    h
}

/// Size of the cluster containing each aspect of `example`.
pub fn cluster_size_of_aspects(example: &Example) -> Vec<usize> {
    cluster_sizes(example)
        .into_iter()
        .flat_map(|s| std::iter::repeat_n(s, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aspect(start: usize, end: usize, tokens: &[&str], p: Polarity) -> AspectAnnotation {
        AspectAnnotation {
            span: (start, end),
            term: tokens[start..end].iter().map(|s| s.to_string()).collect(),
            polarity: p,
            implicit: None,
        }
    }

    fn example(tokens: &[&str], spans: &[(usize, usize, Polarity)]) -> Example {
        Example {
            text: tokens.join(" "),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            aspects: spans.iter().map(|&(s, e, p)| aspect(s, e, tokens, p)).collect(),
            parse_ref: None,
        }
    }

    use Polarity::*;

    #[test]
    fn validate_sorts_aspects() {
        let toks = ["food", "good", "service", "bad"];
        let mut ex = example(&toks, &[(2, 3, Negative), (0, 1, Positive)]);
        ex.validate(0).unwrap();
        assert_eq!(ex.aspects[0].span, (0, 1));
        assert_eq!(ex.aspects[1].span, (2, 3));
    }

    #[test]
    fn validate_rejects_bad_spans() {
        let toks = ["a", "b", "c"];
        let mut ex = example(&toks, &[(0, 2, Positive), (1, 3, Negative)]);
        assert!(matches!(ex.validate(0), Err(Error::InvalidExample { .. })));

        let mut ex = example(&toks, &[(0, 1, Positive)]);
        ex.aspects[0].term = vec!["z".into()];
        assert!(matches!(ex.validate(4), Err(Error::SpanMismatch { example: 4, aspect: 0, .. })));

        let mut ex = example(&toks, &[]);
        ex.aspects.push(AspectAnnotation {
            span: (2, 5),
            term: vec![],
            polarity: Neutral,
            implicit: None,
        });
        assert!(ex.validate(0).is_err());
    }

    #[test]
    fn adjacency_examples() {
        let toks = ["a", "b", "c", "d"];
        let ex = example(&toks, &[(0, 1, Positive), (1, 2, Positive), (2, 3, Negative), (3, 4, Neutral)]);
        assert_eq!(adjacent_aspects(&ex, 1, 1).unwrap(), (vec![0], vec![2]));
        assert_eq!(adjacent_aspects(&ex, 0, 1).unwrap(), (vec![], vec![1]));
        assert_eq!(adjacent_aspects(&ex, 3, 2).unwrap(), (vec![1, 2], vec![]));
        assert!(adjacent_aspects(&ex, 4, 1).is_err());
        let single = example(&toks, &[(1, 2, Positive)]);
        assert_eq!(adjacent_aspects(&single, 0, 1).unwrap(), (vec![], vec![]));
    }

    #[test]
    fn cluster_examples() {
        let toks = ["a", "b", "c"];
        let ds = Dataset::new(vec![example(&toks, &[(0, 1, Positive), (1, 2, Positive), (2, 3, Negative)])]).unwrap();
        let h = cluster_histogram(&ds);
        assert_eq!(h.counts, [1, 2, 0, 0, 0]);
        assert_eq!(h.sum, 3);

        let ds = Dataset::new(vec![example(&toks, &[(0, 1, Positive), (1, 2, Negative), (2, 3, Positive)])]).unwrap();
        assert_eq!(cluster_histogram(&ds).counts, [3, 0, 0, 0, 0]);
        assert_eq!(cluster_histogram(&Dataset::default()), ClusterHistogram::default());
    }

    #[test]
    fn large_clusters_share_last_bucket() {
        let toks = ["a"; 7];
        let spans: Vec<_> = (0..7).map(|i| (i, i + 1, Neutral)).collect();
        let ds = Dataset::new(vec![example(&toks, &spans)]).unwrap();
        assert_eq!(cluster_histogram(&ds).counts, [0, 0, 0, 0, 7]);
        assert_eq!(cluster_size_of_aspects(&ds.examples[0]), vec![7; 7]);
    }

    #[test]
    fn json_round_trip_is_canonical() {
        let toks = ["the", "food", "was", "great"];
        let mut ex = example(&toks, &[(1, 2, Positive)]);
        ex.aspects[0].implicit = Some(false);
        ex.parse_ref = Some("s1".into());
        let ds = Dataset::new(vec![ex, example(&toks, &[])]).unwrap();
        let s = ds.to_json_string();
        let back = Dataset::from_json_str(&s).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_json_string(), s);
    }

    #[test]
    fn schema_errors_report_position() {
        let err = Dataset::from_json_str("{\"version\":1,\n\"examples\":[{\"text\":3}]}").unwrap_err();
        match err {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Dataset::from_json_str(r#"{"version":2,"examples":[]}"#),
            Err(Error::Schema { .. })
        ));
        assert!(Dataset::from_json_str(r#"{"version":1,"examples":[],"extra":0}"#).is_err());
    }

    #[test]
    fn polarity_strings() {
        for p in Polarity::ALL {
            assert_eq!(p.as_str().parse::<Polarity>().unwrap(), p);
            assert_eq!(Polarity::from_index(p.index()), Some(p));
        }
        assert!("conflict".parse::<Polarity>().is_err());
    }
}
