use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pre_tokenize;
use crate::error::{bail, Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in the id order they occupy at the top of every vocabulary.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Longest substring (in characters) considered when building a WordPiece
/// vocabulary.
pub const MAX_PIECE_CHARS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    WordPiece,
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wordpiece" => Ok(TokenizerMode::WordPiece),
            "word" => Ok(TokenizerMode::Word),
            other => Err(Error::Tokenize(format!(
                "unknown tokenizer mode {other:?} (expected wordpiece or word)"
            ))),
        }
    }
}

/// Dense token ↔ id mapping. Ids 0–4 are always the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                bail!(
                    Tokenize,
                    "vocabulary line {i} must be {special}, found {:?}",
                    tokens.get(i)
                );
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                bail!(Tokenize, "vocabulary line {i}: invalid token {t:?}");
            }
            if index.insert(t.clone(), i as u32).is_some() {
                bail!(Tokenize, "vocabulary line {i}: duplicate token {t:?}");
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn cls_id(&self) -> u32 {
        2
    }

    pub fn sep_id(&self) -> u32 {
        3
    }

    pub fn mask_id(&self) -> u32 {
        4
    }

    /// Builds a vocabulary of at most `size` entries from raw sentences.
    ///
    /// Word mode keeps the most frequent words. WordPiece mode keeps every
    /// character seen (word-initial and `##` continuation forms), then whole
    /// words by frequency, then the most frequent substrings up to
    /// [`MAX_PIECE_CHARS`] characters. Ties break lexicographically, so the
    /// result depends only on the corpus.
    pub fn build<I, S>(corpus: I, size: usize, mode: TokenizerMode) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if size <= SPECIAL_TOKENS.len() {
            bail!(
                Tokenize,
                "vocabulary size {size} leaves no room beyond the {} special tokens",
                SPECIAL_TOKENS.len()
            );
        }
        let mut words: BTreeMap<String, u64> = BTreeMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for w in pre_tokenize(line.as_ref()) {
                if !SPECIAL_TOKENS.contains(&w.as_str()) {
                    *words.entry(w).or_default() += 1;
                }
            }
        }
        if lines == 0 || words.is_empty() {
            bail!(Tokenize, "cannot build a vocabulary from an empty corpus");
        }
        let budget = size - SPECIAL_TOKENS.len();
        let picked: Vec<String> = match mode {
            TokenizerMode::Word => by_frequency(words).into_iter().take(budget).collect(),
            TokenizerMode::WordPiece => {
                let mut singles: BTreeMap<String, u64> = BTreeMap::new();
                let mut pieces: BTreeMap<String, u64> = BTreeMap::new();
                for (word, &freq) in &words {
                    let chars: Vec<char> = word.chars().collect();
                    for start in 0..chars.len() {
                        let max_end = chars.len().min(start + MAX_PIECE_CHARS);
                        for end in start + 1..=max_end {
                            let sub: String = chars[start..end].iter().collect();
                            let piece = if start == 0 { sub } else { format!("##{sub}") };
                            let bucket = if end - start == 1 { &mut singles } else { &mut pieces };
                            *bucket.entry(piece).or_default() += freq;
                        }
                    }
                }
                let mut out = by_frequency(singles);
                out.truncate(budget);
                let whole: BTreeMap<String, u64> = words
                    .iter()
                    .filter(|(w, _)| w.chars().count() > 1)
                    .map(|(w, &f)| (w.clone(), f))
                    .collect();
                for w in by_frequency(whole) {
                    if out.len() == budget {
                        break;
                    }
                    pieces.remove(&w);
                    out.push(w);
                }
                let rest = budget - out.len();
                out.extend(by_frequency(pieces).into_iter().take(rest));
                out
            }
        };
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for t in picked {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        }
        Self::from_tokens(tokens)
    }
}

fn by_frequency(counts: BTreeMap<String, u64>) -> Vec<String> {
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(s, _)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_mode_orders_by_frequency() {
        let v = Vocabulary::build(["a a b"], 7, TokenizerMode::Word).unwrap();
        assert_eq!(&v.tokens()[5..], &["a".to_string(), "b".to_string()]);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn size_must_exceed_specials() {
        assert!(Vocabulary::build(["a"], 5, TokenizerMode::Word).is_err());
        assert!(Vocabulary::build(Vec::<String>::new(), 10, TokenizerMode::Word).is_err());
    }

    #[test]
    fn specials_required_in_order() {
        assert!(Vocabulary::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\n").is_ok());
        assert!(Vocabulary::parse("[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n").is_err());
        assert!(Vocabulary::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\nx\n").is_err());
    }

    #[test]
    fn wordpiece_vocab_contains_every_character() {
        let corpus = ["the quick brown fox", "jumps over the lazy dog!"];
        let v = Vocabulary::build(corpus, 200, TokenizerMode::WordPiece).unwrap();
        for c in "tqbfjold!".chars() {
            assert!(v.contains(&c.to_string()), "missing {c}");
        }
        for c in "heuickrownxmpsvazyg".chars() {
            assert!(v.contains(&format!("##{c}")), "missing ##{c}");
        }
        // Every word stays encodable without [UNK].
        for w in ["quick", "lazy", "jumps"] {
            assert!(!super::super::wordpiece_tokenize(w, &v, 100).contains(&UNK.to_string()));
        }
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["x y z"], 8, TokenizerMode::Word).unwrap();
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
    }
}
