//! Square-and-multiply key recovery with Prime+iProbe on the multiply set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{ActivitySample, AttackConfig, PrimeProbeSampler};
use crate::error::{Error, Result};
use crate::recover::{aggregate_traces, decode_rsa_trace, score_key, DecodedKey, LeakageScore, RsaDecodeParams};
use crate::sched::run_observed;
use crate::uarch::{CoreState, LatencyProfile, ProbeKind, Thread, SETS};
use crate::victims::{ExponentSecret, SquareMultiplyCosts, SquareMultiplyVictim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsaConfig {
    pub strategy: ProbeKind,
    pub mul_set: usize,
    pub wait_iterations: u64,
    pub key_bits: usize,
    /// Traces per key for aggregation.
    pub traces: usize,
    pub costs: SquareMultiplyCosts,
    pub decode: RsaDecodeParams,
}

impl Default for RsaConfig {
    fn default() -> Self {
        RsaConfig {
            strategy: ProbeKind::Store,
            mul_set: 5,
            wait_iterations: 700,
            key_bits: 256,
            traces: 10,
            costs: SquareMultiplyCosts::default(),
            decode: RsaDecodeParams::default(),
        }
    }
}

impl RsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mul_set >= SETS {
            return Err(Error::Config(format!("mul_set {} out of range 0..{SETS}", self.mul_set)));
        }
        if self.key_bits < 8 {
            return Err(Error::Config("key_bits must be >= 8".into()));
        }
        if self.traces == 0 {
            return Err(Error::Config("traces must be >= 1".into()));
        }
        if self.wait_iterations == 0 {
            return Err(Error::Config("wait_iterations must be >= 1".into()));
        }
        self.decode.validate()
    }
}

/// Monitors one exponentiation of `secret` and returns the attacker's
/// samples.
pub fn capture_rsa_trace(profile: &Arc<LatencyProfile>, cfg: &RsaConfig, secret: &ExponentSecret, seed: u64) -> Result<Vec<ActivitySample>> {
    cfg.validate()?;
    let attack = AttackConfig::prime_probe(profile, cfg.strategy, cfg.mul_set, cfg.wait_iterations)?;
    let mut core = CoreState::new(profile.clone(), seed);
    let mut sampler = PrimeProbeSampler::new(Thread::T0, attack, None);
    let mut victim = SquareMultiplyVictim::new(Thread::T1, secret.clone(), cfg.mul_set, cfg.costs)?;
    core.advance_cycles(Thread::T1, super::VICTIM_LEAD_CYCLES);
    run_observed(&mut core, &mut sampler, &mut victim)?;
    Ok(sampler.into_samples())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RsaKeyResult {
    pub key_seed: u64,
    /// Recovery of each single trace, in capture order.
    pub single: Vec<LeakageScore>,
    pub aggregated: LeakageScore,
    /// Aggregated key as a `0`/`1`/`X` string.
    pub aggregated_key: String,
}

impl RsaKeyResult {
    pub fn mean_single_percent(&self) -> f64 {
        self.single.iter().map(|s| s.recovered_percent()).sum::<f64>() / self.single.len() as f64
    }
}

fn decode(profile: &LatencyProfile, cfg: &RsaConfig, samples: &[ActivitySample]) -> DecodedKey {
    let params = RsaDecodeParams {
        expected_bits: cfg.decode.expected_bits.or(Some(cfg.key_bits)),
        sibling_stall: profile.sibling_stall,
        ..cfg.decode
    };
    decode_rsa_trace(samples, &params)
}

/// Generates a key from `key_seed`, captures `cfg.traces` traces of it and
/// scores each trace and their aggregate.
pub fn attack_rsa_key(profile: &Arc<LatencyProfile>, cfg: &RsaConfig, key_seed: u64) -> Result<RsaKeyResult> {
    let secret = ExponentSecret::generate(cfg.key_bits, key_seed)?;
    let mut keys = Vec::with_capacity(cfg.traces);
    for t in 0..cfg.traces {
        let samples = capture_rsa_trace(profile, cfg, &secret, key_seed.wrapping_mul(1000).wrapping_add(t as u64))?;
        keys.push(decode(profile, cfg, &samples));
    }
    let single = keys.iter().map(|k| score_key(k, &secret)).collect();
    let aggregated_key = aggregate_traces(&keys, cfg.key_bits);
    Ok(RsaKeyResult {
        key_seed,
        single,
        aggregated: score_key(&aggregated_key, &secret),
        aggregated_key: aggregated_key.to_string(),
    })
}
