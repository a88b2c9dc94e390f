//! Caption vocabulary and text embedding lookup.

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const NULL: usize = 1;

const SHIPPED: &str = include_str!("../../assets/vocab.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    nouns: Vec<bool>,
}

impl Vocabulary {
    /// Parses `id<TAB>token<TAB>flags` lines; ids must be dense from 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut nouns = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Vocabulary(format!("line {}: {what}: {line:?}", lineno + 1));
            let mut cols = line.split('\t');
            let (Some(id), Some(tok), Some(flags), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad("expected three tab-separated columns"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            let noun = match flags {
                "N" => true,
                "-" => false,
                _ => return Err(bad("flags must be '-' or 'N'")),
            };
            if tokens.iter().any(|t| t == tok) {
                return Err(bad("duplicate token"));
            }
            tokens.push(tok.to_string());
            nouns.push(noun);
        }
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[NULL] != "<null>" {
            return Err(Error::Vocabulary("ids 0 and 1 must be <pad> and <null>".into()));
        }
        Ok(Self { tokens, nouns })
    }

    pub fn shipped() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| Vocabulary::parse(SHIPPED).expect("shipped vocabulary is valid"))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_noun(&self, id: usize) -> bool {
        self.nouns.get(id).copied().unwrap_or(false)
    }

    pub fn noun_flags(&self) -> &[bool] {
        &self.nouns
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Whitespace-separated caption to ids padded with PAD to `text_len`.
    pub fn encode(&self, caption: &str, text_len: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text_len);
        for word in caption.split_whitespace() {
            let id = self.id(word).ok_or_else(|| {
                let known: Vec<&str> = self.words().skip(2).collect();
                Error::Vocabulary(format!(
                    "unknown word {word:?}; vocabulary: {}",
                    known.join(" ")
                ))
            })?;
            ids.push(id);
        }
        if ids.len() > text_len {
            return Err(Error::Vocabulary(format!(
                "caption has {} words, text_len is {text_len}",
                ids.len()
            )));
        }
        ids.resize(text_len, PAD);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode); padding is dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            words.push(self.token(id).ok_or_else(|| {
                Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len()))
            })?);
        }
        Ok(words.join(" "))
    }
}

/// The unconditional prompt used for classifier-free guidance.
pub fn null_prompt(text_len: usize) -> Vec<usize> {
    vec![NULL; text_len]
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(bad) => Err(Error::Vocabulary(format!("id {bad} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

fn row_index(ids: &[usize], d: usize) -> Arc<[usize]> {
    ids.iter().flat_map(|&id| id * d..(id + 1) * d).collect()
}

/// Row lookup: `[ids.len() × d]`.
pub fn embed_text(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    let [vocab, d] = *table.shape() else {
        return Err(Error::Dimension(format!("text table must be 2-D, got {:?}", table.shape())));
    };
    check_ids(ids, vocab)?;
    let data = ids.iter().flat_map(|&id| table.row(id).iter().copied()).collect();
    Tensor::new([ids.len(), d], data)
}

pub fn embed_text_var(tape: &mut Tape, ids: &[usize], table: Var) -> Result<Var> {
    let &[vocab, d] = tape.shape(table) else {
        return Err(Error::Dimension("text table must be 2-D".into()));
    };
    check_ids(ids, vocab)?;
    tape.gather(table, row_index(ids, d), vec![ids.len(), d])
}

/// Mean of the table rows of every flagged noun occurrence in `ids`, or
/// `None` when the prompt names no noun.
pub fn extract_instance_embedding(ids: &[usize], flags: &[bool], table: &Tensor) -> Result<Option<Tensor>> {
    let nouns: Vec<usize> = ids.iter().copied().filter(|&i| flags.get(i).copied().unwrap_or(false)).collect();
    if nouns.is_empty() {
        return Ok(None);
    }
    let rows = embed_text(&nouns, table)?;
    let d = rows.last_dim();
    let n = nouns.len() as f64;
    let mut mean = vec![0.0; d];
    for r in 0..nouns.len() {
        for (m, v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(Some(Tensor::new([d], mean)?))
}

/// Tape version of [`extract_instance_embedding`]; yields `[1 × d]`.
pub fn instance_embedding_var(tape: &mut Tape, ids: &[usize], flags: &[bool], table: Var) -> Result<Option<Var>> {
    let nouns: Vec<usize> = ids.iter().copied().filter(|&i| flags.get(i).copied().unwrap_or(false)).collect();
    if nouns.is_empty() {
        return Ok(None);
    }
    let rows = embed_text_var(tape, &nouns, table)?;
    Ok(Some(tape.mean_rows(rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn shipped_vocabulary_layout() {
        let v = Vocabulary::shipped();
        assert_eq!(v.len(), 22);
        assert_eq!(v.id("square"), Some(8));
        assert!(v.is_noun(9) && !v.is_noun(2));
        assert_eq!(v.noun_flags().iter().filter(|&&f| f).count(), 3);
    }

    #[test]
    fn caption_round_trip_and_padding() {
        let v = Vocabulary::shipped();
        let ids = v.encode("red square left", 6).unwrap();
        assert_eq!(ids, [2, 8, 11, PAD, PAD, PAD]);
        assert_eq!(v.decode(&ids).unwrap(), "red square left");
        let err = v.encode("red kettle", 6).unwrap_err().to_string();
        assert!(err.contains("kettle") && err.contains("triangle"), "{err}");
    }

    #[test]
    fn embedding_examples() {
        let table = Tensor::randn([22, 4], 1.0, &mut Rng::new(3));
        let e = embed_text(&[0], &table).unwrap();
        assert_eq!(e.data(), table.row(0));

        let pad = embed_text(&[PAD; 5], &table).unwrap();
        for r in 0..5 {
            assert_eq!(pad.row(r), table.row(PAD));
        }

        let ids = Vocabulary::shipped().encode("red square left", 6).unwrap();
        let e = embed_text(&ids, &table).unwrap();
        assert_eq!(e.row(0), table.row(2));
        assert_eq!(e.row(1), table.row(8));
        assert_eq!(e.row(2), table.row(11));
        assert_eq!(e.row(3), table.row(PAD));

        assert!(matches!(embed_text(&[22], &table), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn instance_embedding_examples() {
        let v = Vocabulary::shipped();
        let flags = v.noun_flags();
        let table = Tensor::randn([22, 4], 1.0, &mut Rng::new(4));
        let one = extract_instance_embedding(&[2, 9, 11], flags, &table).unwrap().unwrap();
        assert_eq!(one.data(), table.row(9));
        assert!(extract_instance_embedding(&[2, 11, 0], flags, &table).unwrap().is_none());
        let two = extract_instance_embedding(&[8, 2, 10], flags, &table).unwrap().unwrap();
        for j in 0..4 {
            assert!((two.data()[j] - (table.row(8)[j] + table.row(10)[j]) / 2.0).abs() < 1e-15);
        }
    }
}
