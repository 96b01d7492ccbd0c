//! Token to aspect distances: positional (mean absolute offset) and
//! syntactic (mean dependency-tree path length).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean absolute offset between `token` and each aspect position.
pub fn relative_token_distance(token: usize, aspect: &[usize]) -> Result<f64> {
    if aspect.is_empty() {
        return Err(Error::EmptyAspect);
    }
    let total: usize = aspect.iter().map(|&p| p.abs_diff(token)).sum();
    Ok(total as f64 / aspect.len() as f64)
}

/// A dependency tree over words `0..len`; `heads[i]` is `None` for the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyTree {
    heads: Vec<Option<usize>>,
    depth: Vec<usize>,
    forms: Option<Vec<String>>,
}

impl DependencyTree {
    pub fn new(heads: Vec<Option<usize>>) -> Result<Self> {
        let n = heads.len();
        if n == 0 {
            return Err(Error::Tree("tree has no words".into()));
        }
        if let Some((i, h)) = heads
            .iter()
            .enumerate()
            .find_map(|(i, h)| h.filter(|&h| h >= n).map(|h| (i, h)))
        {
            return Err(Error::Tree(format!("word {i} has head {h} outside the sentence")));
        }
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            let base = loop {
                if depth[cur] != usize::MAX {
                    break depth[cur];
                }
                if path.contains(&cur) {
                    return Err(Error::Tree(format!("cycle through word {cur}")));
                }
                path.push(cur);
                match heads[cur] {
                    Some(h) => cur = h,
                    None => {
                        depth[cur] = 0;
                        path.pop();
                        break 0;
                    }
                }
            };
            for (offset, &w) in path.iter().rev().enumerate() {
                depth[w] = base + offset + 1;
            }
        }
        let roots = heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(Error::Tree(format!("expected exactly one root, found {roots}")));
        }
        Ok(DependencyTree {
            heads,
            depth,
            forms: None,
        })
    }

    /// Builds from CoNLL-style 1-based heads where 0 marks the root.
    pub fn from_conll_heads(heads: &[usize]) -> Result<Self> {
        Self::new(heads.iter().map(|&h| h.checked_sub(1)).collect())
    }

    pub fn with_forms(mut self, forms: Vec<String>) -> Self {
        assert_eq!(forms.len(), self.heads.len(), "one form per word");
        self.forms = Some(forms);
        self
    }

    pub fn word_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, word: usize) -> Option<usize> {
        self.heads[word]
    }

    pub fn heads(&self) -> &[Option<usize>] {
        &self.heads
    }

    pub fn forms(&self) -> Option<&[String]> {
        self.forms.as_deref()
    }

    pub fn root(&self) -> usize {
        self.heads.iter().position(Option::is_none).expect("validated root")
    }
}

/// Number of edges on the path between two words.
pub fn tree_shortest_distance(tree: &DependencyTree, i: usize, j: usize) -> Result<usize> {
    let n = tree.word_count();
    for w in [i, j] {
        if w >= n {
            return Err(Error::IndexOutOfRange {
                what: "word",
                index: w,
                len: n,
            });
        }
    }
    let (mut a, mut b) = (i, j);
    let mut steps = 0;
    while tree.depth[a] > tree.depth[b] {
        a = tree.heads[a].expect("non-root has a head");
        steps += 1;
    }
    while tree.depth[b] > tree.depth[a] {
        b = tree.heads[b].expect("non-root has a head");
        steps += 1;
    }
    while a != b {
        a = tree.heads[a].expect("non-root has a head");
        b = tree.heads[b].expect("non-root has a head");
        steps += 2;
    }
    Ok(steps)
}

/// Maps model tokens onto source words. Monotone, every token maps to one word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlignment {
    word_of: Vec<usize>,
}

impl TokenAlignment {
    pub fn new(word_of: Vec<usize>) -> Result<Self> {
        if let Some(i) = word_of.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Tree(format!("alignment decreases at token {}", i + 1)));
        }
        Ok(TokenAlignment { word_of })
    }

    pub fn identity(n: usize) -> Self {
        TokenAlignment {
            word_of: (0..n).collect(),
        }
    }

    /// Aligns tokens to words by walking both character streams with
    /// whitespace removed. Returns `None` when the streams disagree.
    pub fn from_strings<T: AsRef<str>, W: AsRef<str>>(tokens: &[T], words: &[W]) -> Option<Self> {
        let mut word_of = Vec::with_capacity(tokens.len());
        let mut w = 0;
        let mut rest: Vec<char> = Vec::new();
        let fetch = |w: &mut usize, rest: &mut Vec<char>| -> bool {
            while rest.is_empty() {
                if *w >= words.len() {
                    return false;
                }
                *rest = words[*w].as_ref().chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect();
                *w += 1;
            }
            true
        };
        for tok in tokens {
            let chars: Vec<char> = tok.as_ref().chars().filter(|c| !c.is_whitespace()).flat_map(char::to_lowercase).collect();
            if chars.is_empty() || !fetch(&mut w, &mut rest) {
                return None;
            }
            if !rest.starts_with(&chars) {
                return None;
            }
            word_of.push(w - 1);
            rest.drain(..chars.len());
        }
        if !rest.is_empty() || w != words.len() {
            return None;
        }
        Some(TokenAlignment { word_of })
    }

    pub fn len(&self) -> usize {
        self.word_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_of.is_empty()
    }

    pub fn word(&self, token: usize) -> Result<usize> {
        self.word_of.get(token).copied().ok_or(Error::Alignment { token })
    }
}

/// Mean tree distance from `token`'s word to the words of the aspect tokens.
pub fn syntactic_distance(
    tree: &DependencyTree,
    alignment: &TokenAlignment,
    token: usize,
    aspect: &[usize],
) -> Result<f64> {
    if aspect.is_empty() {
        return Err(Error::EmptyAspect);
    }
    let w = alignment.word(token)?;
    let mut total = 0;
    for &a in aspect {
        total += tree_shortest_distance(tree, w, alignment.word(a)?)?;
    }
    Ok(total as f64 / aspect.len() as f64)
}

/// Parses the CoNLL-U subset used here: `# sent_id = ...` comments and the
/// ID, FORM and HEAD columns. Multiword ranges and empty nodes are skipped.
pub fn parse_conllu(text: &str) -> Result<BTreeMap<String, DependencyTree>> {
    let mut out = BTreeMap::new();
    let mut id: Option<(usize, String)> = None;
    let mut forms: Vec<String> = Vec::new();
    let mut heads: Vec<usize> = Vec::new();
    let mut first_line = 0;

    let mut finish = |id: &mut Option<(usize, String)>,
                      forms: &mut Vec<String>,
                      heads: &mut Vec<usize>,
                      first_line: usize|
     -> Result<()> {
        if forms.is_empty() && id.is_none() {
            return Ok(());
        }
        let (line, sent_id) = id.take().ok_or_else(|| Error::Conllu {
            line: first_line,
            message: "sentence without `# sent_id`".into(),
        })?;
        if forms.is_empty() {
            return Err(Error::Conllu {
                line,
                message: format!("sentence `{sent_id}` has no words"),
            });
        }
        let tree = DependencyTree::from_conll_heads(heads)
            .map_err(|e| Error::Conllu {
                line,
                message: format!("sentence `{sent_id}`: {e}"),
            })?
            .with_forms(std::mem::take(forms));
        heads.clear();
        if out.insert(sent_id.clone(), tree).is_some() {
            return Err(Error::Conllu {
                line,
                message: format!("duplicate sent_id `{sent_id}`"),
            });
        }
        Ok(())
    };

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut id, &mut forms, &mut heads, first_line)?;
            continue;
        }
        if forms.is_empty() && id.is_none() {
            first_line = line_no;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(value) = comment.trim().strip_prefix("sent_id") {
                let value = value.trim_start().trim_start_matches('=').trim();
                id = Some((line_no, value.to_string()));
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err(Error::Conllu {
                line: line_no,
                message: format!("expected at least 7 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let bad = |what: &str| Error::Conllu {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let word_id: usize = cols[0].parse().map_err(|_| bad("ID"))?;
        if word_id != forms.len() + 1 {
            return Err(Error::Conllu {
                line: line_no,
                message: format!("expected word id {}, found {word_id}", forms.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| bad("HEAD"))?;
        forms.push(cols[1].to_string());
        heads.push(head);
    }
    finish(&mut id, &mut forms, &mut heads, first_line)?;
    Ok(out)
}

pub fn load_parses(path: impl AsRef<Path>) -> Result<BTreeMap<String, DependencyTree>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conllu(&text)
}
