//! Text corpora: loading, train/held-out splits, window sampling, and a
//! seeded synthetic generator for self-contained experiments.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpt::TokenBatch;
use crate::tokenizer::tokenize;

/// Fraction of the corpus tail held out for evaluation.
pub const HELDOUT_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        let ids = tokenize(text);
        let cut = ids.len() - (ids.len() as f64 * HELDOUT_FRACTION).round() as usize;
        Self {
            heldout: ids[cut..].to_vec(),
            train: ids[..cut].to_vec(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_text(&text))
    }
}

/// Calibration and fine-tuning samples drawn from disjoint windows.
#[derive(Clone, Debug)]
pub struct SampleSplit {
    pub calibration: Vec<Vec<usize>>,
    pub finetune: Vec<Vec<usize>>,
}

/// Cuts `tokens` into non-overlapping windows of `seq_len`, shuffles them
/// with `seed`, and hands out the first `calib` and the next `finetune`.
pub fn disjoint_samples(tokens: &[usize], seq_len: usize, calib: usize, finetune: usize, seed: u64) -> Result<SampleSplit> {
    if seq_len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    let available = tokens.len() / seq_len;
    if calib + finetune > available {
        return Err(Error::config(format!(
            "corpus holds {available} windows of {seq_len} tokens, {} requested",
            calib + finetune
        )));
    }
    let mut starts: Vec<usize> = (0..available).map(|w| w * seq_len).collect();
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let window = |s: &usize| tokens[*s..*s + seq_len].to_vec();
    Ok(SampleSplit {
        calibration: starts[..calib].iter().map(window).collect(),
        finetune: starts[calib..calib + finetune].iter().map(window).collect(),
    })
}

/// Groups equal-length samples into batches of `batch_size`; a short
/// remainder is dropped so that every batch has the same shape.
pub fn batches(samples: &[Vec<usize>], batch_size: usize) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    samples.chunks_exact(batch_size).map(TokenBatch::from_rows).collect()
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the robot", "a small bird", "the teacher", "our neighbour",
    "the farmer", "a young girl",
];
const VERBS: &[&str] = &[
    "sees", "finds", "likes", "carries", "paints", "follows", "builds", "remembers", "opens", "watches",
];
const OBJECTS: &[&str] = &[
    "the red ball", "a green box", "the long road", "an old book", "the quiet river", "a bright lamp",
    "the wooden door", "a blue kite", "the tall tree", "a warm coat",
];
const PLACES: &[&str] = &[
    "in the park", "at home", "near the lake", "by the window", "under the bridge", "on the hill",
];
const TIMES: &[&str] = &["today", "every morning", "at night", "after lunch", "in winter"];

/// Deterministic English-like text with a small grammar and vocabulary.
/// Roughly `approx_bytes` long.
pub fn synthetic_text(approx_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(approx_bytes + 64);
    while out.len() < approx_bytes {
        let subject = SUBJECTS.choose(&mut rng).unwrap();
        let verb = VERBS.choose(&mut rng).unwrap();
        let object = OBJECTS.choose(&mut rng).unwrap();
        out.push_str(subject);
        out.push(' ');
        out.push_str(verb);
        out.push(' ');
        out.push_str(object);
        if rng.random_bool(0.5) {
            out.push(' ');
            out.push_str(PLACES.choose(&mut rng).unwrap());
        }
        if rng.random_bool(0.3) {
            out.push(' ');
            out.push_str(TIMES.choose(&mut rng).unwrap());
        }
        out.push_str(". ");
        if rng.random_bool(0.1) {
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_tail_for_heldout() {
        let c = Corpus::from_text(&"a".repeat(100));
        assert_eq!(c.train.len(), 90);
        assert_eq!(c.heldout.len(), 10);
    }

    #[test]
    fn samples_are_disjoint_and_seeded() {
        let tokens: Vec<usize> = (0..1000).map(|i| i % 256).collect();
        let a = disjoint_samples(&tokens, 10, 5, 20, 3).unwrap();
        let b = disjoint_samples(&tokens, 10, 5, 20, 3).unwrap();
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.finetune.len(), 20);
        for c in &a.calibration {
            assert!(!a.finetune.contains(c));
        }
        assert!(disjoint_samples(&tokens, 10, 50, 51, 3).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        assert_eq!(synthetic_text(500, 1), synthetic_text(500, 1));
        assert_ne!(synthetic_text(500, 1), synthetic_text(500, 2));
        assert!(synthetic_text(500, 1).len() >= 500);
    }
}
