use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// A token with the half-open character range it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// Same as [`tokenize`] but keeps character offsets into `text`.
pub fn tokenize_with_offsets(text: &str) -> Vec<SpannedToken> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, end: usize, out: &mut Vec<SpannedToken>| {
        if !current.is_empty() {
            out.push(SpannedToken {
                text: std::mem::take(current),
                start,
                end,
            });
        }
    };
    let mut count = 0;
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        if c.is_whitespace() {
            flush(&mut current, start, i, &mut out);
        } else if c.is_alphanumeric() || c == '_' {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        } else {
            flush(&mut current, start, i, &mut out);
            out.push(SpannedToken {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        }
    }
    flush(&mut current, start, count, &mut out);
    out
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Token to id map. Ids are dense from 0 and the four reserved tokens are
/// fixed: `[PAD]`=0, `[UNK]`=1, `[CLS]`=2, `[SEP]`=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;

    /// Reserved tokens followed by the distinct input tokens in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = tokens.into_iter().collect();
        let mut all: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        all.extend(
            distinct
                .into_iter()
                .filter(|t| ![PAD, UNK, CLS, SEP].contains(t))
                .map(str::to_string),
        );
        Self::try_from(all).expect("reserved prefix is present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 4 || tokens[..4] != [PAD, UNK, CLS, SEP] {
            return Err("vocabulary must start with [PAD], [UNK], [CLS], [SEP]".into());
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry `{t}`"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
