//! Temperature / top-k / top-p sampling and the per-step uncertainty
//! statistics used to pick hotspot positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::RngStream;
use crate::model::LogitsVector;
use crate::Token;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: 1.0,
            max_tokens: 500,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::invalid("top_k must be positive when set"));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be >= 1"));
        }
        Ok(())
    }

    /// Truncated, renormalized sampling distribution for `z`.
    pub fn distribution(&self, z: &LogitsVector) -> ProbVector {
        truncate(&softmax(z, self.temperature), self.top_k, self.top_p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HotspotParams {
    /// Time-decay factor of the score.
    pub lambda: f64,
    /// Normalized-score cutoff; positions strictly above it are hotspots.
    pub threshold: f64,
    pub max_hotspots: Option<usize>,
}

impl Default for HotspotParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            threshold: 0.6,
            max_hotspots: None,
        }
    }
}

impl HotspotParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "hotspot threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "hotspot lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Probabilities over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        Self(p)
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    fn renormalized(mut self) -> Self {
        let total = self.mass();
        if total > 0.0 {
            for v in &mut self.0 {
                *v /= total;
            }
        }
        self
    }

    /// Indices by descending probability, lower id first on ties.
    fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }
}

/// `temperature > 0`: max-subtracted softmax of `z / temperature`.
/// `temperature == 0`: one-hot at the argmax (lowest index on ties).
pub fn softmax(z: &LogitsVector, temperature: f64) -> ProbVector {
    if temperature <= 0.0 {
        return ProbVector::one_hot(z.len(), z.argmax());
    }
    let max = z.0.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> =
        z.0.iter()
            .map(|&v| ((v as f64 - max) / temperature).exp())
            .collect();
    ProbVector(exps).renormalized()
}

/// Top-k, then nucleus top-p, then renormalization.
///
/// The nucleus cut is repeated on its own renormalized output until the kept
/// set stops shrinking, which makes the whole operation idempotent.
pub fn truncate(p: &ProbVector, top_k: Option<usize>, top_p: f64) -> ProbVector {
    let k_active = matches!(top_k, Some(k) if k < p.len());
    if !k_active && top_p >= 1.0 {
        return p.clone();
    }
    let ranked = p.ranked();
    let mut keep = ranked.len();
    if let Some(k) = top_k {
        keep = keep.min(k.max(1));
    }
    // Zero-probability tail never counts as kept.
    while keep > 1 && p.0[ranked[keep - 1]] <= 0.0 {
        keep -= 1;
    }
    if top_p < 1.0 {
        loop {
            let mass: f64 = ranked[..keep].iter().map(|&i| p.0[i]).sum();
            let mut cum = 0.0;
            let mut cut = keep;
            for (n, &i) in ranked[..keep].iter().enumerate() {
                cum += p.0[i] / mass;
                if cum >= top_p {
                    cut = n + 1;
                    break;
                }
            }
            if cut == keep {
                break;
            }
            keep = cut;
        }
    }
    let mut out = vec![0.0; p.len()];
    for &i in &ranked[..keep] {
        out[i] = p.0[i];
    }
    ProbVector(out).renormalized()
}

/// Inverse-CDF draw consuming exactly one value from `rng`.
pub fn sample(p: &ProbVector, rng: &mut RngStream) -> Result<Token> {
    let u = rng.next_f64();
    let total = p.mass();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Internal(
            "sampling from a distribution with zero mass".into(),
        ));
    }
    let target = u * total;
    let mut cum = 0.0;
    let mut last = None;
    for (i, &v) in p.0.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        cum += v;
        last = Some(i);
        if cum > target {
            return Ok(i as Token);
        }
    }
    // Rounding can leave `target` at the very end of the CDF.
    Ok(last.expect("positive mass implies a positive entry") as Token)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.0.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn max_prob(p: &ProbVector) -> f64 {
    p.0.iter().fold(0.0, |m: f64, &v| m.max(v))
}

/// `H_t * (1 - p_t^max) / (1 + lambda * t)`.
pub fn hotspot_score(p: &ProbVector, t: usize, params: &HotspotParams) -> f64 {
    let s = entropy(p) * (1.0 - max_prob(p)) / (1.0 + params.lambda * t as f64);
    // One-hot inputs give -0.0 * ...; report a clean zero.
    s.max(0.0)
}

/// Min-max normalized scores; a constant sequence maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    if raw.is_empty() || hi <= lo {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&s| (s - lo) / (hi - lo)).collect()
}

/// Positions whose normalized score exceeds the threshold, capped at
/// `max_hotspots` (highest score first, earlier position on ties), returned
/// in ascending position order.
pub fn select_hotspots(raw: &[f64], params: &HotspotParams) -> Vec<usize> {
    let norm = normalize_scores(raw);
    let mut picked: Vec<usize> = (0..norm.len())
        .filter(|&i| norm[i] > params.threshold)
        .collect();
    if let Some(cap) = params.max_hotspots {
        if picked.len() > cap {
            picked.sort_by(|&a, &b| norm[b].total_cmp(&norm[a]).then(a.cmp(&b)));
            picked.truncate(cap);
            picked.sort_unstable();
        }
    }
    picked
}

/// Raw hotspot scores for a cached logits sequence.
pub fn hotspot_scores(
    logits_seq: &[LogitsVector],
    cfg: &SamplingConfig,
    params: &HotspotParams,
) -> Vec<f64> {
    logits_seq
        .iter()
        .enumerate()
        .map(|(t, z)| hotspot_score(&softmax(z, cfg.temperature), t, params))
        .collect()
}

pub fn identify_hotspots(
    logits_seq: &[LogitsVector],
    cfg: &SamplingConfig,
    params: &HotspotParams,
) -> Vec<usize> {
    select_hotspots(&hotspot_scores(logits_seq, cfg, params), params)
}
