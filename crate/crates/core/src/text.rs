//! Character vocabulary and sampling shared by the generators.

use rand::Rng as _;
use thiserror::Error;

use crate::seed::Rng;

/// Every symbol a serialized MFCC row can contain.
pub const SYMBOLS: [char; 14] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '.', '-', ',', '\n',
];

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TextError {
    #[error("character {ch:?} at position {position} is not in the vocabulary")]
    OutOfVocabulary { ch: char, position: usize },
    #[error("corpus of {len} symbols is too short (need more than {needed})")]
    TooShort { len: usize, needed: usize },
    #[error("temperature must be finite and >= 0 (0 selects greedy decoding), got {0}")]
    BadTemperature(f64),
    #[error("symbol index {0} out of range")]
    BadIndex(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CharVocab;

impl CharVocab {
    pub fn len(&self) -> usize {
        SYMBOLS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, ch: char) -> Option<usize> {
        match ch {
            '0'..='9' => Some(ch as usize - '0' as usize),
            '.' => Some(10),
            '-' => Some(11),
            ',' => Some(12),
            '\n' => Some(13),
            _ => None,
        }
    }

    pub fn symbol(&self, index: usize) -> Result<char, TextError> {
        SYMBOLS.get(index).copied().ok_or(TextError::BadIndex(index))
    }

    pub fn newline(&self) -> usize {
        13
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TextError> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.index(ch)
                    .ok_or(TextError::OutOfVocabulary { ch, position })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|l| l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn check_temperature(temperature: f64) -> Result<(), TextError> {
    if temperature.is_finite() && temperature >= 0.0 {
        Ok(())
    } else {
        Err(TextError::BadTemperature(temperature))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Upper bound on discarded warm-up characters. Samplers generate and drop
/// text up to and including the first newline, so output starts on a fresh
/// line from a state the model reached by itself.
pub const WARMUP_LIMIT: usize = 1024;

/// Draws the next symbol. Temperature 0 is greedy argmax.
pub fn sample_index(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<usize, TextError> {
    check_temperature(temperature)?;
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let probs = softmax_with_temperature(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Mean next-symbol cross-entropy, in nats, of a uniform guess.
pub fn uniform_entropy() -> f64 {
    (SYMBOLS.len() as f64).ln()
}
