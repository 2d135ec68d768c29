//! Static state encoding: an L1-normalized opcode histogram over a fixed
//! vocabulary, concatenated with a one-hot encoding of the action history.
//!
//! The encoder is deliberately simple and sits behind [`StateEncoder`] so a
//! richer representation can be plugged in without touching the agent.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use crate::state::ActionHistory;

/// The reserved bucket name for opcodes outside the vocabulary.
pub const OTHER_BUCKET: &str = "other";

/// A fixed opcode vocabulary. Always contains an `other` bucket; if the
/// given word list lacks one it is appended.
#[derive(Clone, Debug)]
pub struct OpcodeVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    other: usize,
}

impl OpcodeVocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for word in words {
            let word = word.into();
            if !index.contains_key(&word) {
                index.insert(word.clone(), list.len());
                list.push(word);
            }
        }
        let other = match index.get(OTHER_BUCKET) {
            Some(&i) => i,
            None => {
                index.insert(OTHER_BUCKET.to_string(), list.len());
                list.push(OTHER_BUCKET.to_string());
                list.len() - 1
            }
        };
        Self { words: list, index, other }
    }

    /// One word per line, `#` lines and blanks skipped.
    pub fn from_file(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string),
        ))
    }

    /// Vocabulary for synthetic token IRs: the decimal strings `0..n`.
    pub fn for_token_alphabet(n: u32) -> Self {
        Self::new((0..n).map(|t| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Maps (IR body, action history) to the fixed-length feature vector fed
/// to the Q-network.
pub trait StateEncoder: Send + Sync {
    /// Output length; constant for the lifetime of the encoder.
    fn dim(&self) -> usize;

    fn encode(&self, ir_body: &str, history: &ActionHistory) -> Vec<f64>;
}

/// The default encoder.
///
/// Layout: `|vocab|` histogram buckets followed by `mu_max` history slots,
/// each a one-hot over `n_actions + 1` symbols (the extra symbol is the
/// no-op padding for unused slots). Tokens are words of the IR text split
/// on anything outside `[A-Za-z0-9_.-]`; a token in the vocabulary counts
/// toward its bucket, an unknown letter-initial token counts toward
/// `other`, and everything else (operands, literals, punctuation) is
/// skipped. When a level-L history holds more than `mu_max` entries, the
/// most recent `mu_max` are encoded.
#[derive(Clone, Debug)]
pub struct HistogramEncoder {
    vocab: OpcodeVocab,
    n_actions: usize,
    mu_max: usize,
}

impl HistogramEncoder {
    pub fn new(vocab: OpcodeVocab, n_actions: usize, mu_max: usize) -> Self {
        Self { vocab, n_actions, mu_max }
    }

    pub fn vocab(&self) -> &OpcodeVocab {
        &self.vocab
    }

    fn slot_width(&self) -> usize {
        self.n_actions + 1
    }

    fn histogram(&self, ir_body: &str, out: &mut [f64]) {
        let mut total = 0usize;
        for token in ir_body.split(|c: char| !(c.is_ascii_alphanumeric() || "_.-".contains(c))) {
            if token.is_empty() {
                continue;
            }
            let bucket = match self.vocab.index.get(token) {
                Some(&i) => i,
                None if token.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) => {
                    self.vocab.other
                }
                None => continue,
            };
            out[bucket] += 1.0;
            total += 1;
        }
        if total > 0 {
            let norm = 1.0 / total as f64;
            for v in out.iter_mut() {
                *v *= norm;
            }
        }
    }
}

impl StateEncoder for HistogramEncoder {
    fn dim(&self) -> usize {
        self.vocab.len() + self.mu_max * self.slot_width()
    }

    fn encode(&self, ir_body: &str, history: &ActionHistory) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.histogram(ir_body, &mut out[..self.vocab.len()]);

        let width = self.slot_width();
        let padding = self.n_actions;
        let entries = history.entries();
        let start = entries.len().saturating_sub(self.mu_max);
        let recent = &entries[start..];
        for slot in 0..self.mu_max {
            let symbol = match recent.get(slot) {
                Some(&a) => (a as usize).min(padding),
                None => padding,
            };
            out[self.vocab.len() + slot * width + symbol] = 1.0;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::ActionId;

    fn history_of(entries: &[ActionId]) -> ActionHistory {
        let mut h = ActionHistory::empty();
        for &a in entries {
            h = h.push(a, true, None);
        }
        h
    }

    fn encoder() -> HistogramEncoder {
        HistogramEncoder::new(OpcodeVocab::new(["add", "mul", "br", "other"]), 8, 16)
    }

    #[test]
    fn histogram_normalizes_and_pads_history() {
        let enc = encoder();
        let v = enc.encode("add add mul mul", &ActionHistory::empty());
        assert_eq!(&v[..4], &[0.5, 0.5, 0.0, 0.0]);
        // All 16 slots are padding one-hots at symbol index 8.
        for slot in 0..16 {
            let block = &v[4 + slot * 9..4 + (slot + 1) * 9];
            assert_eq!(block[8], 1.0);
            assert_eq!(block.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn single_entry_occupies_first_slot() {
        let enc = encoder();
        let v = enc.encode("add", &history_of(&[0]));
        let first = &v[4..13];
        assert_eq!(first[0], 1.0);
        for slot in 1..16 {
            assert_eq!(v[4 + slot * 9 + 8], 1.0, "slot {slot} must be padding");
        }
    }

    #[test]
    fn histories_differ_only_in_history_block() {
        let enc = encoder();
        let a = enc.encode("add mul", &history_of(&[2]));
        let b = enc.encode("add mul", &history_of(&[5]));
        assert_eq!(&a[..4], &b[..4]);
        assert_ne!(&a[4..], &b[4..]);
    }

    #[test]
    fn unknown_opcode_lands_in_other() {
        let enc = encoder();
        let v = enc.encode("add frobnicate", &ActionHistory::empty());
        assert_eq!(&v[..4], &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn empty_ir_gives_zero_histogram() {
        let enc = encoder();
        let v = enc.encode("", &ActionHistory::empty());
        assert_eq!(&v[..4], &[0.0; 4]);
    }

    #[test]
    fn histogram_sums_to_one_for_nonempty_ir() {
        let enc = encoder();
        for body in ["add", "add mul br", "x y z", "add add add mul"] {
            let v = enc.encode(body, &ActionHistory::empty());
            assert!((v[..4].iter().sum::<f64>() - 1.0).abs() < 1e-9, "body {body:?}");
        }
    }

    #[test]
    fn dim_is_constant_and_correct() {
        let enc = encoder();
        assert_eq!(enc.dim(), 4 + 16 * 9);
        assert_eq!(enc.encode("add", &history_of(&[1, 2, 3])).len(), enc.dim());
    }

    #[test]
    fn overlong_history_keeps_most_recent_entries() {
        let enc = HistogramEncoder::new(OpcodeVocab::new(["add"]), 4, 2);
        let v = enc.encode("add", &history_of(&[0, 1, 2]));
        // vocab is ["add", "other"], so slots start at 2; width 5.
        let slot0 = &v[2..7];
        let slot1 = &v[7..12];
        assert_eq!(slot0[1], 1.0, "oldest surviving entry is action 1");
        assert_eq!(slot1[2], 1.0, "latest entry is action 2");
    }

    #[test]
    fn token_alphabet_vocab_counts_numeric_tokens() {
        let enc = HistogramEncoder::new(OpcodeVocab::for_token_alphabet(4), 2, 2);
        let v = enc.encode("3,1,3,0", &ActionHistory::empty());
        assert_eq!(&v[..5], &[0.25, 0.25, 0.0, 0.5, 0.0]);
    }
}
