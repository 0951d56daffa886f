use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

/// Whitespace tokenization with optional lowercasing.
pub fn normalize_words(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
        .collect()
}

pub fn normalize_text(text: &str, lowercase: bool) -> String {
    normalize_words(text, lowercase).join(" ")
}

impl Vocab {
    /// Vocabulary over `tokens` in the given order, lowercasing on.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        Self::with_options(tokens, true)
    }

    pub fn with_options(tokens: impl IntoIterator<Item = String>, lowercase: bool) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let mut v = Self { tokens: all, index: HashMap::new(), lowercase };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        normalize_words(text, self.lowercase)
            .iter()
            .map(|w| self.id(w))
            .collect()
    }

    /// Token ids of `text` followed by EOS.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode_words(text);
        ids.push(EOS);
        ids
    }

    /// Join tokens up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-special token per line; line `k` (1-based) holds id `k + 3`.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut out = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)
    }

    pub fn load(path: &Path, lowercase: bool) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::with_options(text.lines().map(str::to_string), lowercase))
    }
}

/// Tokens with frequency `>= min_freq`, ordered by frequency (descending)
/// then lexicographically.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, min_freq: usize, lowercase: bool) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in normalize_words(line, lowercase) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::with_options(entries.into_iter().map(|(t, _)| t), lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = build_vocab(["a a b"], 1, true);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v = build_vocab(["c b a", "b"], 1, true);
        assert_eq!((v.id("b"), v.id("a"), v.id("c")), (4, 5, 6));
    }

    #[test]
    fn min_freq_drops_rare_tokens() {
        let v = build_vocab(["a a b"], 2, true);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn deterministic_assignment() {
        let corpus = ["the cat sat", "on the mat", "Cat"];
        assert_eq!(build_vocab(corpus, 1, true), build_vocab(corpus, 1, true));
    }

    #[test]
    fn encode_decode_inverts_normalization() {
        let text = "The  Boy wants to GO";
        let v = build_vocab([text], 1, true);
        let ids = v.encode_target(text);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), normalize_text(text, true));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["x y y z z z"], 1, true);
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "z\ny\nx\n");
        assert_eq!(Vocab::load(&path, true).unwrap(), v);
    }
}
