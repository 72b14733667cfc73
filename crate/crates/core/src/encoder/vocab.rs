//! Word-level vocabulary with reserved special ids and a hashed fallback
//! bucket range for out-of-vocabulary tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::fnv1a;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const N_RESERVED: usize = 5;

pub const SPECIAL_TOKENS: [&str; N_RESERVED] = ["<pad>", "<bos>", "<sep>", "<eos>", "<unk>"];

/// Id space layout: `[0..5)` specials, `[5, 5+words)` explicit words,
/// `[5+words, 5+words+buckets)` hash buckets for unseen words. With zero
/// buckets, unseen words map to `UNK_ID`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    n_buckets: usize,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        // The index is derived state; words and bucket count define identity.
        self.words == other.words && self.n_buckets == other.n_buckets
    }
}

impl Vocabulary {
    pub fn new(words: Vec<String>, n_buckets: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), (N_RESERVED + i) as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary { words, index, n_buckets })
    }

    /// Build from corpus texts: words ordered by descending frequency,
    /// ties broken lexicographically, truncated to `max_words`.
    pub fn build_from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_words: usize,
        n_buckets: usize,
    ) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                *counts.entry(word.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_words);
        let words = entries.into_iter().map(|(w, _)| w).collect();
        Vocabulary::new(words, n_buckets).expect("frequency-built words are valid")
    }

    /// Total id space (embedding table rows).
    pub fn total_size(&self) -> usize {
        N_RESERVED + self.words.len() + self.n_buckets
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercased lookup with hashed fallback.
    pub fn lookup(&self, word: &str) -> u32 {
        let lower = word.to_lowercase();
        if let Some(&id) = self.index.get(&lower) {
            return id;
        }
        if self.n_buckets > 0 {
            let bucket = fnv1a(lower.as_bytes()) % self.n_buckets as u64;
            (N_RESERVED + self.words.len()) as u32 + bucket as u32
        } else {
            UNK_ID
        }
    }

    /// Whitespace-split, lowercase, look up. Deterministic; `""` yields `[]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Newline-delimited vocabulary file: line index equals token id.
    /// Lines 0..5 are the special tokens; hash buckets appear as trailing
    /// `<bucketNNNN>` placeholder lines so the id/line correspondence holds
    /// across the whole id space.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in SPECIAL_TOKENS {
            out.push_str(s);
            out.push('\n');
        }
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        for b in 0..self.n_buckets {
            out.push_str(&format!("<bucket{b:04}>\n"));
        }
        fs::write(path, out).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < N_RESERVED {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lines.len(),
                message: "vocabulary file shorter than the reserved id range".into(),
            });
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *s {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected special token {s:?}, found {:?}", lines[i]),
                });
            }
        }
        let mut words = Vec::new();
        let mut n_buckets = 0usize;
        for (i, line) in lines.iter().enumerate().skip(N_RESERVED) {
            if line.starts_with("<bucket") && line.ends_with('>') {
                n_buckets += 1;
            } else if n_buckets > 0 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "word line after bucket placeholder lines".into(),
                });
            } else {
                words.push(line.to_string());
            }
        }
        Vocabulary::new(words, n_buckets)
    }

    /// Rebuild the lookup index after deserialization.
    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (N_RESERVED + i) as u32))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn demo_vocab() -> Vocabulary {
        Vocabulary::new(vec!["the".into(), "fox".into(), "jumps".into()], 4).unwrap()
    }

    #[test]
    fn empty_text_gives_empty_ids() {
        assert!(demo_vocab().tokenize("").is_empty());
    }

    #[test]
    fn tokenize_is_deterministic() {
        let v = demo_vocab();
        let a = v.tokenize("The fox JUMPS over");
        let b = v.tokenize("The fox JUMPS over");
        assert_eq!(a, b);
        assert_eq!(a[0], 5); // "the" is the first explicit word
    }

    #[test]
    fn unknown_without_buckets_is_unk() {
        let v = Vocabulary::new(vec!["the".into()], 0).unwrap();
        assert_eq!(v.lookup("zzzz"), UNK_ID);
    }

    #[test]
    fn unknown_with_buckets_hashes_into_range() {
        let v = demo_vocab();
        let id = v.lookup("zzzz");
        let lo = (N_RESERVED + v.n_words()) as u32;
        assert!(id >= lo && id < v.total_size() as u32);
        assert_eq!(id, v.lookup("zzzz"));
    }

    #[test]
    fn distinct_words_get_distinct_sequences_over_fixture() {
        // 1000-word fixture built into the vocabulary explicitly; any two
        // distinct token strings must map to different id sequences. The
        // hashed fallback bucket collision count on a disjoint word set is
        // logged for reference.
        let words: Vec<String> = (0..1000).map(|i| format!("word{i:04}")).collect();
        let v = Vocabulary::new(words.clone(), 64).unwrap();
        let ids: Vec<Vec<u32>> = words.iter().map(|w| v.tokenize(w)).collect();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                assert_ne!(ids[i], ids[j], "{} vs {}", words[i], words[j]);
            }
        }
        let mut bucket_hits = std::collections::HashMap::new();
        for i in 0..1000 {
            let unseen = format!("unseen{i:04}");
            *bucket_hits.entry(v.lookup(&unseen)).or_insert(0usize) += 1;
        }
        let collisions: usize = bucket_hits.values().map(|&c| c.saturating_sub(1)).sum();
        println!("hashed fallback collisions over 1000 unseen words into 64 buckets: {collisions}");
        assert!(bucket_hits.keys().all(|&id| id >= 1005 && id < 1069));
    }

    #[test]
    fn vocab_file_round_trips() {
        let v = demo_vocab();
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.lookup("fox"), v.lookup("fox"));
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "<pad>");
        assert_eq!(text.lines().count(), v.total_size());
    }
}
