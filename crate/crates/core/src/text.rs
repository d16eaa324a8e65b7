//! Word-level tokenizer with a frozen vocabulary.
//!
//! Text is lowercased and split on every character that is not
//! alphanumeric, `-` or `'`. Words missing from the vocabulary map to
//! `<unk>`. Sequences have a fixed length `S` with the CLS token in the
//! last slot:
//!
//! ```text
//! [w_0, ..., w_{k-1}, <pad>, ..., <pad>, <cls>]     k <= S - 2
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<cls>", "<unk>"];
const HEADER: &str =
    "# sydes vocabulary: token id = line number after this header (from 0); reserved 0=<pad> 1=<cls> 2=<unk>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("sequence length must be at least 2, got {0}")]
    Length(usize),
    #[error("vocabulary io: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Reserved tokens followed by every distinct word of `texts`, sorted,
    /// so the ids do not depend on corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self, TextError> {
        let tokens: Vec<String> = contents.lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(TextError::Format("reserved tokens missing or out of place".into()));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(TextError::Format("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<u32>,
    /// Index of the last real token, `None` for empty text.
    pub last_real: Option<usize>,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        self.ids[pos] == PAD
    }

    /// Ids of the real tokens.
    pub fn content(&self) -> &[u32] {
        match self.last_real {
            Some(k) => &self.ids[..=k],
            None => &[],
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, len: usize) -> Result<TextSequence, TextError> {
    if len < 2 {
        return Err(TextError::Length(len));
    }
    let mut ids: Vec<u32> = split_words(text).iter().take(len - 2).map(|w| vocab.id(w)).collect();
    let last_real = ids.len().checked_sub(1);
    ids.resize(len - 1, PAD);
    ids.push(CLS);
    Ok(TextSequence { ids, last_real })
}

pub fn detokenize(seq: &TextSequence, vocab: &Vocab) -> Vec<String> {
    seq.content().iter().map(|&id| vocab.token(id).unwrap_or("<unk>").to_owned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_pads_and_cls() {
        let v = Vocab::build(["a b"]);
        let s = tokenize("", &v, 4).unwrap();
        assert_eq!(s.ids, vec![PAD, PAD, PAD, CLS]);
        assert_eq!(s.last_real, None);
    }

    #[test]
    fn truncation_keeps_s_minus_two() {
        let v = Vocab::build(["a"]);
        let a = v.id("a");
        let s = tokenize("a a a a a", &v, 4).unwrap();
        assert_eq!(s.ids, vec![a, a, PAD, CLS]);
        assert_eq!(s.last_real, Some(1));
    }

    #[test]
    fn lowercases_and_splits_punctuation() {
        let v = Vocab::build(["Hello, world! social-contact"]);
        let s = tokenize("HELLO world?? unknownword", &v, 8).unwrap();
        assert_eq!(detokenize(&s, &v), vec!["hello", "world", "<unk>"]);
        assert_ne!(v.id("social-contact"), UNK);
    }

    #[test]
    fn short_length_rejected() {
        let v = Vocab::build([""]);
        assert!(matches!(tokenize("x", &v, 1), Err(TextError::Length(1))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(["the family at the beach", "a quiet lake"]);
        let back = Vocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.token(PAD), Some("<pad>"));
        assert!(Vocab::parse("# x\nfoo\n").is_err());
    }

    #[test]
    fn vocab_is_order_independent() {
        assert_eq!(Vocab::build(["b a", "c"]), Vocab::build(["c", "a b"]));
    }

    proptest! {
        #[test]
        fn cls_once_at_end(text in "[a-z ,.!]{0,80}", len in 2usize..20) {
            let v = Vocab::build([text.as_str()]);
            let s = tokenize(&text, &v, len).unwrap();
            prop_assert_eq!(s.ids.len(), len);
            prop_assert_eq!(s.ids[len - 1], CLS);
            prop_assert_eq!(s.ids.iter().filter(|&&i| i == CLS).count(), 1);
            // no padding before a real token
            if let Some(k) = s.last_real {
                prop_assert!(s.ids[..=k].iter().all(|&i| i != PAD));
            }
            prop_assert!(s.ids[s.last_real.map_or(0, |k| k + 1)..len - 1].iter().all(|&i| i == PAD));
        }

        #[test]
        fn known_tokens_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 0..10)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str()]);
            let s = tokenize(&text, &v, 16).unwrap();
            let again = tokenize(&detokenize(&s, &v).join(" "), &v, 16).unwrap();
            prop_assert_eq!(again.ids, s.ids);
        }
    }
}
