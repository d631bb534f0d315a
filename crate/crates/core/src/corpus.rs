//! Token supply: the byte-level tokenizer, a seeded synthetic corpus and
//! fixed-length chunking.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};

/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Where a chunk came from: a 64-bit source id and its token offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkOrigin {
    pub source: u64,
    pub offset: usize,
}

/// A window of exactly `T` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenChunk {
    pub tokens: Vec<u32>,
    pub origin: ChunkOrigin,
}

impl TokenChunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Input(format!("token id {t} is not a byte")))
        })
        .collect()
}

/// Consecutive non-overlapping windows of `seq_len`; the tail is dropped.
pub fn chunk_tokens(tokens: &[u32], seq_len: usize, source: u64) -> Result<Vec<TokenChunk>> {
    if seq_len == 0 {
        bail!(Argument, "chunk length must be at least 1");
    }
    Ok(tokens
        .chunks_exact(seq_len)
        .enumerate()
        .map(|(i, w)| TokenChunk {
            tokens: w.to_vec(),
            origin: ChunkOrigin {
                source,
                offset: i * seq_len,
            },
        })
        .collect())
}

pub fn read_corpus_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Stable 64-bit id for a corpus label (first 8 bytes of its SHA-256).
pub fn source_id(corpus_id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(corpus_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

const LEXICON: [&str; 64] = [
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be",
    "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have",
    "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has",
    "there", "been", "if", "more", "when", "will", "would", "who", "so", "no", "model",
    "expert", "token", "router", "layer", "secret", "private", "signal", "trace", "password",
    "network", "system", "value", "key", "attack",
];

/// Successor candidates per (previous, current) word state.
const SUCCESSORS: usize = 6;
/// Fixes the chain's transition structure; corpus seeds only drive sampling,
/// so corpora with different seeds share one language.
const LANGUAGE_SEED: u64 = 0x6d6f_655f_6c61_6e67;

const RARE_SYMBOLS: &[u8] = b"@#$%&*()[]{}<>/\\|~^+=_;:!?'\"\xe9\xf1\xfc\xb0\xa7\xb5\xe4";
const SECRET_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

struct Language {
    successors: Vec<[usize; SUCCESSORS]>,
    successor_pick: WeightedIndex<f64>,
    rare_pick: WeightedIndex<f64>,
}

impl Language {
    fn new() -> Self {
        let n = LEXICON.len();
        let popularity =
            WeightedIndex::new((0..n).map(|r| 1.0 / (r as f64 + 1.0))).expect("positive weights");
        let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SEED);
        let successors = (0..n * n)
            .map(|_| std::array::from_fn(|_| popularity.sample(&mut rng)))
            .collect();
        let successor_pick =
            WeightedIndex::new((0..SUCCESSORS).map(|j| 1.0 / (j as f64 + 1.0).powf(1.3)))
                .expect("positive weights");
        let rare_pick =
            WeightedIndex::new((0..RARE_SYMBOLS.len()).map(|j| 1.0 / (j as f64 + 1.0).powf(1.5)))
                .expect("positive weights");
        Self {
            successors,
            successor_pick,
            rare_pick,
        }
    }
}

/// Seeded synthetic text of exactly `length` bytes.
///
/// An order-2 Markov chain over a fixed 64-word lexicon with sentence
/// punctuation, sprinkled with numbers, random alphanumeric "secrets" and
/// rare symbols. The byte-frequency profile is heavy tailed: spaces and
/// common letters occur tens of thousands of times per 512K bytes while
/// the rarest symbols occur a handful of times.
pub fn synth_corpus(seed: u64, length: usize) -> Result<Vec<u8>> {
    if length == 0 {
        bail!(Argument, "corpus length must be positive");
    }
    let lang = Language::new();
    let n = LEXICON.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(length + 32);
    let (mut prev, mut cur) = (rng.random_range(0..n), rng.random_range(0..n));
    let mut capitalize = true;
    while out.len() < length {
        let noise: f64 = rng.random();
        if noise < 0.012 {
            let digits = rng.random_range(1..=4);
            for i in 0..digits {
                let lo = if i == 0 { b'1' } else { b'0' };
                out.push(rng.random_range(lo..=b'9'));
            }
            out.push(b' ');
        } else if noise < 0.016 {
            let len = rng.random_range(6..=10);
            for _ in 0..len {
                out.push(SECRET_ALPHABET[rng.random_range(0..SECRET_ALPHABET.len())]);
            }
            out.push(b' ');
        } else if noise < 0.0175 {
            out.push(RARE_SYMBOLS[lang.rare_pick.sample(&mut rng)]);
            out.push(b' ');
        }

        let cands = &lang.successors[prev * n + cur];
        let next = cands[lang.successor_pick.sample(&mut rng)];
        let word = LEXICON[next].as_bytes();
        if capitalize {
            out.push(word[0].to_ascii_uppercase());
            out.extend_from_slice(&word[1..]);
        } else {
            out.extend_from_slice(word);
        }
        let punct: f64 = rng.random();
        capitalize = false;
        if punct < 0.08 {
            out.extend_from_slice(b". ");
            capitalize = true;
        } else if punct < 0.11 {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
        prev = cur;
        cur = next;
    }
    out.truncate(length);
    Ok(out)
}

/// Occurrence count per token id (length `vocab`).
pub fn token_counts<'a>(tokens: impl IntoIterator<Item = &'a u32>, vocab: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab];
    for &t in tokens {
        if let Some(c) = counts.get_mut(t as usize) {
            *c += 1;
        }
    }
    counts
}
