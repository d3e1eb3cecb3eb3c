use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use retention_core::tasks::{LabeledExample, FIRST_TOKEN_ID, OOV_ID, PAD_ID};
use retention_core::Error;

use crate::error::Result;

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Text(TextLine),
    Tokens(TokenLine),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextLine {
    text: String,
    label: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenLine {
    tokens: Vec<usize>,
    label: usize,
    relevance: Vec<u8>,
}

/// Word ids assigned in order of first occurrence, after the reserved pad
/// and OOV ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Vocab {
    pub words: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.words.len() + FIRST_TOKEN_ID
    }

    fn id_or_insert(&mut self, word: &str) -> usize {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len() + FIRST_TOKEN_ID;
        self.words.push(word.to_owned());
        self.ids.insert(word.to_owned(), id);
        id
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(OOV_ID)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub examples: Vec<LabeledExample>,
    /// Line numbers of empty texts replaced by a single pad token.
    pub empty_lines: Vec<usize>,
}

/// Tokenizes a JSONL stream. With `grow` set, unseen words extend `vocab`;
/// otherwise they map to the OOV id.
pub fn ingest<R: BufRead>(input: R, vocab: &mut Vocab, num_classes: usize, grow: bool) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: n,
            msg: format!("expected {{\"text\", \"label\"}} or {{\"tokens\", \"label\", \"relevance\"}}: {e}"),
        })?;
        let example = match parsed {
            Line::Text(t) => {
                let mut tokens: Vec<usize> = t
                    .text
                    .split_whitespace()
                    .map(|w| if grow { vocab.id_or_insert(w) } else { vocab.id(w) })
                    .collect();
                if tokens.is_empty() {
                    log::warn!("line {n}: empty text replaced by a single pad token");
                    out.empty_lines.push(n);
                    tokens.push(PAD_ID);
                }
                let relevance = vec![0; tokens.len()];
                LabeledExample {
                    tokens,
                    label: t.label,
                    relevance,
                }
            }
            Line::Tokens(t) => {
                if t.relevance.len() != t.tokens.len() {
                    return Err(Error::Line {
                        line: n,
                        msg: format!("{} tokens but {} relevance flags", t.tokens.len(), t.relevance.len()),
                    }
                    .into());
                }
                LabeledExample {
                    tokens: t.tokens,
                    label: t.label,
                    relevance: t.relevance,
                }
            }
        };
        if example.label >= num_classes {
            return Err(Error::Line {
                line: n,
                msg: format!("label {} out of range for {num_classes} classes", example.label),
            }
            .into());
        }
        out.examples.push(example);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str, vocab: &mut Vocab, grow: bool) -> Result<Ingested> {
        ingest(text.as_bytes(), vocab, 2, grow)
    }

    #[test]
    fn ids_follow_first_occurrence() {
        let mut vocab = Vocab::default();
        let out = run(
            "{\"text\": \"b a b\", \"label\": 1}\n{\"text\": \"c a\", \"label\": 0}\n",
            &mut vocab,
            true,
        )
        .unwrap();
        assert_eq!(out.examples[0].tokens, vec![2, 3, 2]);
        assert_eq!(out.examples[1].tokens, vec![4, 3]);
        assert_eq!(vocab.words, vec!["b", "a", "c"]);
        assert_eq!(vocab.size(), 5);
    }

    #[test]
    fn unseen_words_map_to_oov() {
        let mut vocab = Vocab::default();
        run("{\"text\": \"x y\", \"label\": 0}", &mut vocab, true).unwrap();
        let out = run("{\"text\": \"y z\", \"label\": 0}", &mut vocab, false).unwrap();
        assert_eq!(out.examples[0].tokens, vec![3, OOV_ID]);
        assert_eq!(vocab.words.len(), 2);
    }

    #[test]
    fn empty_text_becomes_pad() {
        let mut vocab = Vocab::default();
        let out = run(
            "{\"text\": \"a\", \"label\": 0}\n{\"text\": \"   \", \"label\": 1}",
            &mut vocab,
            true,
        )
        .unwrap();
        assert_eq!(out.examples[1].tokens, vec![PAD_ID]);
        assert_eq!(out.empty_lines, vec![2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut vocab = Vocab::default();
        let err = run("{\"text\": \"a\", \"label\": 0}\nnot json", &mut vocab, true).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let err = run("{\"text\": \"a\", \"label\": 5}", &mut vocab, true).unwrap_err();
        assert!(
            err.to_string().contains("line 1") && err.to_string().contains("label 5"),
            "{err}"
        );
        let err = run(
            "{\"tokens\": [2, 3], \"label\": 0, \"relevance\": [0]}",
            &mut vocab,
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn synthetic_lines_pass_through() {
        let mut vocab = Vocab::default();
        let out = run(
            "{\"tokens\": [5, 7], \"label\": 1, \"relevance\": [0, 1]}",
            &mut vocab,
            true,
        )
        .unwrap();
        assert_eq!(out.examples[0].tokens, vec![5, 7]);
        assert_eq!(out.examples[0].relevance, vec![0, 1]);
    }
}
