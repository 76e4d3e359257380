//! Deterministic stand-in for the transformer forward pass.
//!
//! Logits are a pure function of `(seed, prefix)`: the prefix is folded into
//! a [`PrefixHash`], mixed with the seed into a context word, and every
//! vocabulary entry draws a uniform base logit from the SplitMix64 stream
//! seeded with that word. One entry, picked from the same context word,
//! receives an extra `concentration * logit_range` so the top-1 probability
//! can be tuned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{mix64, unit_f64, PrefixHash, GOLDEN_GAMMA, PEAK_SALT};
use crate::Token;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub vocab_size: usize,
    /// Peakedness knob; the peak entry gets `concentration * logit_range` added.
    pub concentration: f64,
    /// Base logits are uniform in `[-logit_range, +logit_range]`.
    pub logit_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 256,
            concentration: 2.0,
            logit_range: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if !(self.concentration >= 0.0 && self.concentration.is_finite()) {
            return Err(Error::Config(format!(
                "concentration must be finite and >= 0, got {}",
                self.concentration
            )));
        }
        if !(self.logit_range >= 0.0 && self.logit_range.is_finite()) {
            return Err(Error::Config(format!(
                "logit_range must be finite and >= 0, got {}",
                self.logit_range
            )));
        }
        Ok(())
    }
}

/// Next-token scores over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsVector(pub Vec<f32>);

impl LogitsVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Logits for the prefix whose rolling hash is `prefix`.
pub fn logits_for_hash(config: &ModelConfig, prefix: PrefixHash) -> LogitsVector {
    let ctx = mix64(config.seed ^ prefix.value());
    let peak = (mix64(ctx ^ PEAK_SALT) % config.vocab_size as u64) as usize;
    let range = config.logit_range;
    let boost = config.concentration * range;
    let mut state = ctx;
    let values = (0..config.vocab_size)
        .map(|v| {
            state = state.wrapping_add(GOLDEN_GAMMA);
            let base = range * (2.0 * unit_f64(mix64(state)) - 1.0);
            let z = if v == peak { base + boost } else { base };
            z as f32
        })
        .collect();
    LogitsVector(values)
}

/// Next-token logits after `prefix`.
pub fn model_logits(config: &ModelConfig, prefix: &[Token]) -> Result<LogitsVector> {
    if prefix.is_empty() {
        return Err(Error::invalid("model_logits requires a non-empty prefix"));
    }
    Ok(logits_for_hash(config, PrefixHash::of(prefix)))
}

/// Forward-pass meter for one engine instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_passes: u64,
    pub prefill_tokens: u64,
    pub decode_passes: u64,
    /// Prefill passes caused by decoding on a partially evicted sequence.
    pub reprefill_passes: u64,
    pub reprefill_tokens: u64,
}

impl CostReport {
    pub fn forward_passes(&self) -> u64 {
        self.prefill_passes + self.decode_passes
    }

    /// Component-wise difference `self - earlier`.
    pub fn since(&self, earlier: &CostReport) -> CostReport {
        CostReport {
            prefill_passes: self.prefill_passes - earlier.prefill_passes,
            prefill_tokens: self.prefill_tokens - earlier.prefill_tokens,
            decode_passes: self.decode_passes - earlier.decode_passes,
            reprefill_passes: self.reprefill_passes - earlier.reprefill_passes,
            reprefill_tokens: self.reprefill_tokens - earlier.reprefill_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = ModelConfig::default();
        let a = model_logits(&cfg, &[1, 2, 3]).unwrap();
        let b = model_logits(&cfg, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert!(a.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_prefix_rejected() {
        let err = model_logits(&ModelConfig::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn seed_changes_logits() {
        let a = model_logits(&ModelConfig::default(), &[5]).unwrap();
        let b = model_logits(
            &ModelConfig {
                seed: 1,
                ..ModelConfig::default()
            },
            &[5],
        )
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn base_values_within_range_and_peak_boosted() {
        let cfg = ModelConfig {
            concentration: 3.0,
            ..ModelConfig::default()
        };
        for t in 0..50u32 {
            let z = model_logits(&cfg, &[t, t + 1]).unwrap();
            let above = z.0.iter().filter(|&&v| v > 5.0).count();
            assert_eq!(above, 1, "exactly the peak exceeds the base range");
            let peak = z.argmax();
            assert!(z.0[peak] >= 10.0 - 1e-4);
            for (i, &v) in z.0.iter().enumerate() {
                if i != peak {
                    assert!((-5.0..=5.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn last_token_matters() {
        let cfg = ModelConfig::default();
        let mut differing = 0;
        for t in 0..1000u32 {
            let a = model_logits(&cfg, &[7, 7, t]).unwrap();
            let b = model_logits(&cfg, &[7, 7, t + 1]).unwrap();
            if a != b {
                differing += 1;
            }
        }
        assert!(differing >= 990);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            vocab_size: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            concentration: -1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
