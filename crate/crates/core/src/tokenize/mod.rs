//! WordPiece and word-level tokenization with BERT-style special tokens.
//!
//! Text is lowercased, split on whitespace, and every punctuation character is
//! split off as its own word. Whitespace-delimited special-token literals such
//! as `[MASK]` pass through untouched.

mod vocab;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use vocab::{TokenizerMode, Vocabulary, CLS, MASK, MAX_PIECE_CHARS, PAD, SEP, SPECIAL_TOKENS, UNK};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const DEFAULT_MAX_CHARS_PER_WORD: usize = 100;
pub const MIN_SEQ_LEN: usize = 8;

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits into words, isolating punctuation characters.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        if SPECIAL_TOKENS.contains(&raw) {
            out.push(raw.to_string());
            continue;
        }
        let mut cur = String::new();
        for c in raw.to_lowercase().chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Greedy longest-match-first segmentation of one word. `None` when some
/// position has no matching piece.
fn wordpiece_word(word: &str, vocab: &Vocabulary, max_chars: usize) -> Option<Vec<String>> {
    if vocab.contains(word) {
        return Some(vec![word.to_string()]);
    }
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > max_chars {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let cand = if start == 0 { sub } else { format!("##{sub}") };
            if vocab.contains(&cand) {
                found = Some(cand);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary, max_chars_per_word: usize) -> Vec<String> {
    let mut out = Vec::new();
    for word in pre_tokenize(text) {
        if SPECIAL_TOKENS.contains(&word.as_str()) {
            out.push(word);
            continue;
        }
        match wordpiece_word(&word, vocab, max_chars_per_word) {
            Some(pieces) => out.extend(pieces),
            None => out.push(UNK.to_string()),
        }
    }
    out
}

pub fn word_tokenize(text: &str, vocab: &Vocabulary) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .map(|w| if vocab.contains(&w) { w } else { UNK.to_string() })
        .collect()
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]` as ids with segment markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Encoding {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn first_sep(&self, sep: u32) -> Option<usize> {
        self.token_ids.iter().position(|&t| t == sep)
    }

    pub fn is_pair(&self) -> bool {
        self.segment_ids.last() == Some(&1)
    }

    /// Tokens of the first sentence, without specials.
    pub fn first_segment(&self, vocab: &Vocabulary) -> &[u32] {
        let end = self.first_sep(vocab.sep_id()).unwrap_or(self.len());
        &self.token_ids[1.min(end)..end]
    }

    /// Tokens of the second sentence, without specials.
    pub fn second_segment(&self, vocab: &Vocabulary) -> Option<&[u32]> {
        if !self.is_pair() {
            return None;
        }
        let start = self.first_sep(vocab.sep_id())? + 1;
        Some(&self.token_ids[start..self.len() - 1])
    }

    /// Checks the layout invariants against `vocab` and `max_seq_len`.
    pub fn validate(&self, vocab: &Vocabulary, max_seq_len: usize) -> Result<()> {
        let n = self.len();
        if n != self.segment_ids.len() {
            bail!(Tokenize, "token and segment sequences differ in length");
        }
        if n > max_seq_len {
            bail!(Tokenize, "encoding of length {n} exceeds max_seq_len {max_seq_len}");
        }
        if self.token_ids.first() != Some(&vocab.cls_id()) {
            bail!(Tokenize, "encoding does not start with [CLS]");
        }
        if self.token_ids.last() != Some(&vocab.sep_id()) {
            bail!(Tokenize, "encoding does not end with [SEP]");
        }
        let seps = self.token_ids.iter().filter(|&&t| t == vocab.sep_id()).count();
        let expected = if self.is_pair() { 2 } else { 1 };
        if seps != expected {
            bail!(Tokenize, "expected {expected} [SEP] tokens, found {seps}");
        }
        Ok(())
    }
}

/// Vocabulary plus the settings needed to encode examples.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Arc<Vocabulary>,
    mode: TokenizerMode,
    max_seq_len: usize,
    max_chars_per_word: usize,
}

impl Tokenizer {
    pub fn new(vocab: Arc<Vocabulary>, mode: TokenizerMode, max_seq_len: usize) -> Result<Self> {
        if max_seq_len < MIN_SEQ_LEN {
            bail!(Tokenize, "max_seq_len must be at least {MIN_SEQ_LEN}, got {max_seq_len}");
        }
        Ok(Self {
            vocab,
            mode,
            max_seq_len,
            max_chars_per_word: DEFAULT_MAX_CHARS_PER_WORD,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        match self.mode {
            TokenizerMode::WordPiece => wordpiece_tokenize(text, &self.vocab, self.max_chars_per_word),
            TokenizerMode::Word => word_tokenize(text, &self.vocab),
        }
    }

    fn ids(&self, text: &str) -> Vec<u32> {
        self.tokenize(text)
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(self.vocab.unk_id()))
            .collect()
    }

    /// Encodes one sentence or a pair. Pairs that do not fit lose trailing
    /// tokens from whichever segment is currently longer (the second on ties).
    pub fn encode(&self, s1: &str, s2: Option<&str>) -> Result<Encoding> {
        let mut a = self.ids(s1);
        if a.is_empty() {
            bail!(Tokenize, "first sentence is empty after tokenization");
        }
        let vocab = &self.vocab;
        let mut token_ids = vec![vocab.cls_id()];
        let mut segment_ids = vec![0u8];
        match s2 {
            None => {
                a.truncate(self.max_seq_len - 2);
                token_ids.extend(&a);
                token_ids.push(vocab.sep_id());
                segment_ids.resize(token_ids.len(), 0);
            }
            Some(s2) => {
                let mut b = self.ids(s2);
                if b.is_empty() {
                    bail!(Tokenize, "second sentence is empty after tokenization");
                }
                while a.len() + b.len() + 3 > self.max_seq_len {
                    if a.len() > b.len() {
                        a.pop();
                    } else {
                        b.pop();
                    }
                }
                token_ids.extend(&a);
                token_ids.push(vocab.sep_id());
                segment_ids.resize(token_ids.len(), 0);
                token_ids.extend(&b);
                token_ids.push(vocab.sep_id());
                segment_ids.resize(token_ids.len(), 1);
            }
        }
        Ok(Encoding {
            token_ids,
            segment_ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.extend(words.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(t).unwrap()
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["un", "##aff", "##able", "##a", "##ff", "u"]);
        assert_eq!(wordpiece_tokenize("unaffable", &v, 100), ["un", "##aff", "##able"]);
    }

    #[test]
    fn verbatim_word_and_unknown_fallback() {
        let v = vocab(&["hello", "h"]);
        assert_eq!(wordpiece_tokenize("hello", &v, 100), ["hello"]);
        assert_eq!(wordpiece_tokenize("zebra", &v, 100), [UNK]);
        // A matching prefix that cannot be continued still falls back to [UNK].
        assert_eq!(wordpiece_tokenize("hz", &v, 100), [UNK]);
        assert_eq!(wordpiece_tokenize("hello", &vocab(&["h", "##e", "##l", "##o"]), 3), [UNK]);
    }

    #[test]
    fn word_level_marks_oov() {
        let v = vocab(&["a", "b"]);
        assert_eq!(word_tokenize("a b", &v), ["a", "b"]);
        assert_eq!(word_tokenize("a zzz", &v), ["a", UNK]);
    }

    #[test]
    fn pre_tokenize_splits_punctuation_and_keeps_mask() {
        assert_eq!(
            pre_tokenize("Hello, World! [MASK] it's"),
            ["hello", ",", "world", "!", "[MASK]", "it", "'", "s"]
        );
    }

    #[test]
    fn single_and_pair_layouts() {
        let v = Arc::new(vocab(&["hi", "a", "b"]));
        let tok = Tokenizer::new(v.clone(), TokenizerMode::Word, 16).unwrap();
        let e = tok.encode("hi", None).unwrap();
        assert_eq!(e.token_ids, [2, 5, 3]);
        assert_eq!(e.segment_ids, [0, 0, 0]);
        let e = tok.encode("a", Some("b")).unwrap();
        assert_eq!(e.token_ids, [2, 6, 3, 7, 3]);
        assert_eq!(e.segment_ids, [0, 0, 0, 1, 1]);
        assert_eq!(e.first_segment(&v), &[6]);
        assert_eq!(e.second_segment(&v).unwrap(), &[7]);
    }

    #[test]
    fn longest_first_truncation() {
        let v = Arc::new(vocab(&["a", "b"]));
        let tok = Tokenizer::new(v.clone(), TokenizerMode::Word, 12).unwrap();
        let long = vec!["b"; 20].join(" ");
        let e = tok.encode("a a", Some(&long)).unwrap();
        assert_eq!(e.len(), 12);
        assert_eq!(e.first_segment(&v).len(), 2);
        assert_eq!(e.second_segment(&v).unwrap().len(), 7);
        e.validate(&v, 12).unwrap();
    }

    #[test]
    fn empty_first_sentence_is_an_error() {
        let v = Arc::new(vocab(&["a"]));
        let tok = Tokenizer::new(v, TokenizerMode::Word, 8).unwrap();
        assert!(tok.encode("   ", None).is_err());
        assert!(Tokenizer::new(Arc::new(vocab(&[])), TokenizerMode::Word, 7).is_err());
    }
}
