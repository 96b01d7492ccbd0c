use roxmltree::{Document, Node};

use super::{AspectAnnotation, Dataset, Example, Polarity};
use crate::encoder::tokenizer::{tokenize, tokenize_with_offsets};
use crate::error::{Error, Result};

/// Reads SemEval-2014 style `<sentences>` XML. Character offsets are mapped
/// onto tokens; aspects labelled `conflict` are dropped.
pub fn parse_semeval_xml(text: &str) -> Result<Dataset> {
    let doc = Document::parse(text).map_err(|e| Error::Xml(e.to_string()))?;
    let mut examples = Vec::new();
    for (index, sentence) in doc.descendants().filter(|n| n.has_tag_name("sentence")).enumerate() {
        examples.push(parse_sentence(index, sentence)?);
    }
    Dataset::new(examples)
}

fn parse_sentence(index: usize, sentence: Node) -> Result<Example> {
    let text = sentence
        .children()
        .find(|n| n.has_tag_name("text"))
        .and_then(|n| n.text())
        .ok_or_else(|| Error::Xml(format!("sentence {index} has no <text>")))?
        .to_string();
    let spanned = tokenize_with_offsets(&text);
    let tokens: Vec<String> = spanned.iter().map(|t| t.text.clone()).collect();

    let mut aspects = Vec::new();
    for term in sentence.descendants().filter(|n| n.has_tag_name("aspectTerm")) {
        let attr = |name: &str| {
            term.attribute(name)
                .ok_or_else(|| Error::Xml(format!("sentence {index}: aspectTerm without `{name}`")))
        };
        let polarity = attr("polarity")?;
        if polarity == "conflict" {
            continue;
        }
        let polarity: Polarity = polarity
            .parse()
            .map_err(|e: String| Error::Xml(format!("sentence {index}: {e}")))?;
        let offset = |name: &str| -> Result<usize> {
            attr(name)?
                .parse()
                .map_err(|_| Error::Xml(format!("sentence {index}: bad `{name}` offset")))
        };
        let (from, to) = (offset("from")?, offset("to")?);
        let covered: Vec<usize> = spanned
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < to && t.end > from)
            .map(|(i, _)| i)
            .collect();
        let expected = tokenize(attr("term")?);
        let (start, end) = match (covered.first(), covered.last()) {
            (Some(&s), Some(&e)) => (s, e + 1),
            _ => {
                return Err(Error::SpanMismatch {
                    example: index,
                    aspect: aspects.len(),
                    expected,
                    found: vec![],
                })
            }
        };
        if tokens[start..end] != expected[..] {
            return Err(Error::SpanMismatch {
                example: index,
                aspect: aspects.len(),
                expected,
                found: tokens[start..end].to_vec(),
            });
        }
        aspects.push(AspectAnnotation {
            span: (start, end),
            term: expected,
            polarity,
            implicit: None,
        });
    }
    Ok(Example {
        text,
        tokens,
        aspects,
        parse_ref: sentence.attribute("id").map(str::to_string),
    })
}
