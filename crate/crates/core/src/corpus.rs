//! Character-level corpus handling: byte vocabulary, a deterministic
//! synthetic text generator, train/eval splits and window sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Sorted set of the distinct bytes of a corpus; token id = position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    symbols: Vec<u8>,
}

impl CharVocab {
    pub fn from_text(text: &[u8]) -> Result<Self> {
        let mut seen = [false; 256];
        text.iter().for_each(|&b| seen[b as usize] = true);
        let symbols: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<u8>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(invalid("vocabulary is empty"));
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("vocabulary symbols must be strictly increasing"));
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn id(&self, b: u8) -> Option<u32> {
        self.symbols.binary_search(&b).ok().map(|i| i as u32)
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<u32>> {
        text.iter()
            .map(|&b| self.id(b).ok_or_else(|| invalid(format!("byte {b:#04x} is not in the vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&i| {
                self.symbols
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| invalid(format!("token {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}

/// Entropy in nats of the empirical token distribution.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let max = *tokens.iter().max().unwrap() as usize;
    let mut counts = vec![0u64; max + 1];
    tokens.iter().for_each(|&t| counts[t as usize] += 1);
    let n = tokens.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Splits off the trailing `eval_fraction` of the stream.
pub fn split(tokens: &[u32], eval_fraction: f64) -> (&[u32], &[u32]) {
    let n_eval = ((tokens.len() as f64) * eval_fraction).round() as usize;
    tokens.split_at(tokens.len() - n_eval.min(tokens.len()))
}

/// Uniformly random `seq_len + 1` windows from a token stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

/// `inputs[b*seq + i]` predicts `targets[b*seq + i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self, tokens: &[u32], batch: usize, seq: usize) -> Result<Batch> {
        if tokens.len() < seq + 1 {
            return Err(invalid(format!("corpus of {} tokens is shorter than a {}-token window", tokens.len(), seq + 1)));
        }
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let start = self.rng.gen_range(0..=tokens.len() - seq - 1);
            inputs.extend_from_slice(&tokens[start..start + seq]);
            targets.extend_from_slice(&tokens[start + 1..start + seq + 1]);
        }
        Ok(Batch { inputs, targets, batch, seq })
    }
}

/// Consecutive non-overlapping windows, up to `limit` of them (0 = all).
pub fn eval_windows(tokens: &[u32], seq: usize, limit: usize) -> Vec<Batch> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq < tokens.len() && (limit == 0 || out.len() < limit) {
        out.push(Batch {
            inputs: tokens[start..start + seq].to_vec(),
            targets: tokens[start + 1..start + seq + 1].to_vec(),
            batch: 1,
            seq,
        });
        start += seq;
    }
    out
}

const NAMES: &[&str] = &[
    "Ada", "Bram", "Cleo", "Dmitri", "Esme", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lior",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "narrow", "ancient", "restless", "careful", "golden", "hollow", "patient", "crooked",
    "silver", "distant", "gentle", "stubborn", "tiny", "heavy",
];
const NOUNS: &[&str] = &[
    "river", "lantern", "garden", "engine", "harbor", "window", "letter", "mountain", "kettle", "bridge",
    "forest", "market", "ladder", "compass", "orchard", "tower", "violin", "station", "meadow", "archive",
];
const VERBS: &[(&str, &str)] = &[
    ("carries", "carried"),
    ("watches", "watched"),
    ("repairs", "repaired"),
    ("follows", "followed"),
    ("paints", "painted"),
    ("measures", "measured"),
    ("finds", "found"),
    ("builds", "built"),
    ("opens", "opened"),
    ("counts", "counted"),
];
const PLACES: &[&str] = &["near the", "behind the", "across the", "under the", "beside the", "inside the"];
const TIMES: &[&str] = &["at dawn", "before noon", "every evening", "in winter", "after the rain", "at night"];
const CONNECTIVES: &[&str] = &["and then", "but later", "so", "because", "while"];

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().unwrap()
}

fn noun_phrase<R: Rng>(rng: &mut R) -> String {
    if rng.gen_bool(0.6) {
        format!("the {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    } else {
        format!("the {}", pick(rng, NOUNS))
    }
}

fn clause<R: Rng>(rng: &mut R, past: bool) -> String {
    let subject = if rng.gen_bool(0.5) { pick(rng, NAMES).to_string() } else { noun_phrase(rng) };
    let (present, past_form) = *VERBS.choose(rng).unwrap();
    let verb = if past { past_form } else { present };
    let mut s = format!("{subject} {verb} {}", noun_phrase(rng));
    if rng.gen_bool(0.4) {
        s.push_str(&format!(" {} {}", pick(rng, PLACES), pick(rng, NOUNS)));
    }
    if rng.gen_bool(0.3) {
        s.push_str(&format!(" {}", pick(rng, TIMES)));
    }
    s
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let past = rng.gen_bool(0.5);
    let mut s = clause(rng, past);
    if rng.gen_bool(0.35) {
        s.push_str(&format!(", {} {}", pick(rng, CONNECTIVES), clause(rng, past)));
    }
    if rng.gen_bool(0.15) {
        s.push_str(&format!(" {} times", rng.gen_range(2..40)));
    }
    let mut chars = s.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    let end = if rng.gen_bool(0.1) { '?' } else { '.' };
    format!("{first}{}{end}", chars.as_str())
}

/// Deterministic English-like text of exactly `bytes` bytes, grouped in
/// paragraphs of a few sentences.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let n = rng.gen_range(2..6);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng));
        }
        out.push('\n');
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_roundtrip() {
        let text = b"hello, world";
        let v = CharVocab::from_text(text).unwrap();
        assert_eq!(v.len(), 9);
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
        assert!(v.encode(b"z").is_err());
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn entropy_of_uniform_and_constant() {
        assert_eq!(unigram_entropy(&[3, 3, 3]), 0.0);
        let e = unigram_entropy(&[0, 1, 2, 3]);
        assert!((e - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = synthetic_corpus(10_000, 7);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_corpus(10_000, 7));
        assert_ne!(a, synthetic_corpus(10_000, 8));
        assert!(a.is_ascii());
    }

    #[test]
    fn sampler_windows_are_shifted_copies() {
        let tokens: Vec<u32> = (0..100).collect();
        let mut s = BatchSampler::new(1);
        let b = s.sample(&tokens, 4, 10).unwrap();
        for w in 0..4 {
            for i in 0..10 {
                assert_eq!(b.targets[w * 10 + i], b.inputs[w * 10 + i] + 1);
            }
        }
        assert!(s.sample(&tokens[..5], 1, 10).is_err());
    }

    #[test]
    fn split_and_windows() {
        let tokens: Vec<u32> = (0..100).collect();
        let (tr, ev) = split(&tokens, 0.1);
        assert_eq!((tr.len(), ev.len()), (90, 10));
        assert_eq!(eval_windows(&tokens, 10, 0).len(), 9);
        assert_eq!(eval_windows(&tokens, 10, 3).len(), 3);
    }
}
