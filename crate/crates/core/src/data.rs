//! Synthetic corpora, byte-level tokenisation and sequence packing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OrthrusError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Deterministic { pattern: Vec<u32>, seed: u64 },
    Markov { transition: Vec<Vec<f64>>, seed: u64 },
    Bytes { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub generator: Generator,
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// All documents back to back.
    pub fn concatenated(&self) -> Vec<u32> {
        self.documents.concat()
    }
}

/// Split `stream` into documents of random length in `[min_len, max_len]`.
fn split_documents(stream: Vec<u32>, rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut docs = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let len = rng.random_range(min_len..=max_len).min(stream.len() - start);
        docs.push(stream[start..start + len].to_vec());
        start += len;
    }
    docs
}

const MIN_DOC: usize = 64;
const MAX_DOC: usize = 512;

/// Repetitions of `pattern`, cut into documents of random length. The cycle
/// phase carries across document boundaries.
pub fn gen_deterministic_corpus(
    pattern: &[u32],
    total_tokens: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus> {
    if pattern.is_empty() {
        return Err(OrthrusError::Config("pattern must not be empty".into()));
    }
    if let Some(&t) = pattern.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(OrthrusError::Config(format!(
            "pattern token {t} outside vocabulary of {vocab_size}"
        )));
    }
    let stream: Vec<u32> = pattern.iter().copied().cycle().take(total_tokens).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Corpus {
        documents: split_documents(stream, &mut rng, MIN_DOC, MAX_DOC),
        vocab_size,
        generator: Generator::Deterministic {
            pattern: pattern.to_vec(),
            seed,
        },
    })
}

pub fn validate_transition(t: &[Vec<f64>]) -> Result<()> {
    if t.is_empty() {
        return Err(OrthrusError::InvalidTransition("empty matrix".into()));
    }
    for (i, row) in t.iter().enumerate() {
        if row.len() != t.len() {
            return Err(OrthrusError::InvalidTransition(format!(
                "row {i} has {} entries, expected {}",
                row.len(),
                t.len()
            )));
        }
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(OrthrusError::InvalidTransition(format!(
                "row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(OrthrusError::InvalidTransition(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Order-1 Markov chain sample. The chain starts from a uniformly drawn state
/// and runs continuously across document boundaries.
pub fn gen_markov_corpus(
    transition: &[Vec<f64>],
    total_tokens: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus> {
    validate_transition(transition)?;
    let states = transition.len();
    if states > vocab_size {
        return Err(OrthrusError::Config(format!(
            "{states} Markov states do not fit a vocabulary of {vocab_size}"
        )));
    }
    let rows: Vec<WeightedIndex<f64>> = transition
        .iter()
        .map(|r| WeightedIndex::new(r).expect("validated row"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = Vec::with_capacity(total_tokens);
    if total_tokens > 0 {
        let mut s = rng.random_range(0..states);
        stream.push(s as u32);
        while stream.len() < total_tokens {
            s = rows[s].sample(&mut rng);
            stream.push(s as u32);
        }
    }
    Ok(Corpus {
        documents: split_documents(stream, &mut rng, MIN_DOC, MAX_DOC),
        vocab_size,
        generator: Generator::Markov {
            transition: transition.to_vec(),
            seed,
        },
    })
}

/// Each state moves to its successor (mod `states`) with probability
/// `dominant`; the rest is spread evenly over the other states.
pub fn cycle_dominant_transition(states: usize, dominant: f64) -> Vec<Vec<f64>> {
    let rest = if states > 1 {
        (1.0 - dominant) / (states - 1) as f64
    } else {
        0.0
    };
    (0..states)
        .map(|i| {
            (0..states)
                .map(|j| {
                    if states == 1 {
                        1.0
                    } else if j == (i + 1) % states {
                        dominant
                    } else {
                        rest
                    }
                })
                .collect()
        })
        .collect()
}

/// Stationary distribution by power iteration.
pub fn stationary_distribution(t: &[Vec<f64>]) -> Vec<f64> {
    let n = t.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (i, row) in t.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        // lazy averaging keeps periodic chains from oscillating
        pi = next.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();
        if delta < 1e-14 {
            break;
        }
    }
    pi
}

/// Per-token conditional entropy (nats) of the chain at stationarity.
pub fn conditional_entropy(t: &[Vec<f64>]) -> f64 {
    let pi = stationary_distribution(t);
    t.iter()
        .zip(&pi)
        .map(|(row, &w)| {
            w * row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum()
}

/// Byte-level corpus: one document per blank-line separated block.
pub fn byte_tokenize(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes).replace("\r\n", "\n");
    let documents = text
        .split("\n\n")
        .filter(|block| !block.trim().is_empty())
        .map(|block| block.as_bytes().iter().map(|&b| b as u32).collect())
        .collect();
    Ok(Corpus {
        documents,
        vocab_size: 256,
        generator: Generator::Bytes {
            source: path.display().to_string(),
        },
    })
}

pub fn byte_detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Printable rendering. A 256-symbol vocabulary is treated as bytes; smaller
/// vocabularies map ids to `a`, `b`, `c`, … in order.
pub fn detokenize(tokens: &[u32], vocab_size: usize) -> String {
    if vocab_size == 256 {
        return String::from_utf8_lossy(&byte_detokenize(tokens)).into_owned();
    }
    tokens
        .iter()
        .map(|&t| match ALPHABET.get(t as usize) {
            Some(&c) => (c as char).to_string(),
            None => format!("<{t}>"),
        })
        .collect()
}

/// Inverse of [`detokenize`] for text made of alphabet characters.
pub fn tokenize_text(text: &str, vocab_size: usize) -> Result<Vec<u32>> {
    if vocab_size == 256 {
        return Ok(text.bytes().map(u32::from).collect());
    }
    text.chars()
        .map(|c| {
            ALPHABET
                .iter()
                .position(|&a| a as char == c)
                .filter(|&i| i < vocab_size)
                .map(|i| i as u32)
                .ok_or_else(|| {
                    OrthrusError::Config(format!("character {c:?} is not in the {vocab_size}-symbol vocabulary"))
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    /// Offsets of separator tokens inside `tokens`.
    pub separators: Vec<usize>,
}

impl PackedSequence {
    /// Whether an anchor fits for block size `k` (`L >= K + 1`).
    pub fn admits_block(&self, k: usize) -> bool {
        self.tokens.len() > k
    }
}

/// Greedy packing: documents in seed-shuffled order, each followed by
/// `separator`, cut into sequences of exactly `seq_len`; the trailing partial
/// sequence is dropped.
pub fn pack_sequences(
    corpus: &Corpus,
    seq_len: usize,
    separator: u32,
    seed: u64,
) -> Result<Vec<PackedSequence>> {
    if seq_len < 2 {
        return Err(OrthrusError::Config("packed length must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..corpus.documents.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut stream = Vec::with_capacity(corpus.total_tokens() + order.len());
    for i in order {
        stream.extend_from_slice(&corpus.documents[i]);
        stream.push(separator);
    }
    Ok(stream
        .chunks_exact(seq_len)
        .map(|c| PackedSequence {
            tokens: c.to_vec(),
            separators: c
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == separator)
                .map(|(i, _)| i)
                .collect(),
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    vocab_size: usize,
    document_lengths: Vec<usize>,
    generator: Generator,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write token ids as little-endian `u32` plus a `<path>.json` descriptor.
pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut bytes = Vec::with_capacity(corpus.total_tokens() * 4);
    for t in corpus.documents.iter().flatten() {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = Sidecar {
        vocab_size: corpus.vocab_size,
        document_lengths: corpus.documents.iter().map(Vec::len).collect(),
        generator: corpus.generator.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(OrthrusError::Format("token file length is not a multiple of 4".into()));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let ids: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if sidecar.document_lengths.iter().sum::<usize>() != ids.len() {
        return Err(OrthrusError::Format("document lengths do not match token count".into()));
    }
    let mut documents = Vec::with_capacity(sidecar.document_lengths.len());
    let mut start = 0;
    for len in sidecar.document_lengths {
        documents.push(ids[start..start + len].to_vec());
        start += len;
    }
    Ok(Corpus {
        documents,
        vocab_size: sidecar.vocab_size,
        generator: sidecar.generator,
    })
}
