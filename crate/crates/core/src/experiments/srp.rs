//! SRP server-key recovery: Prime+iProbe on the sliding-window loop line.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{ActivitySample, AttackConfig, PrimeProbeSampler};
use crate::error::{Error, Result};
use crate::recover::{decode_srp_trace, loop_gaps, score_key, LeakageScore};
use crate::sched::run_observed;
use crate::uarch::{CoreState, LatencyProfile, ProbeKind, Thread, SETS};
use crate::victims::{modpow, srp_victim, SrpParams, WindowCosts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrpConfig {
    pub strategy: ProbeKind,
    pub loop_set: usize,
    pub wait_iterations: u64,
    pub group_bits: u32,
    pub keys: usize,
}

impl Default for SrpConfig {
    fn default() -> Self {
        SrpConfig {
            strategy: ProbeKind::Store,
            loop_set: 9,
            wait_iterations: 700,
            group_bits: 1024,
            keys: 100,
        }
    }
}

impl SrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loop_set >= SETS {
            return Err(Error::Config(format!("loop_set {} out of range 0..{SETS}", self.loop_set)));
        }
        if self.group_bits < 8 {
            return Err(Error::Config("group_bits must be >= 8".into()));
        }
        if self.wait_iterations == 0 {
            return Err(Error::Config("wait_iterations must be >= 1".into()));
        }
        if self.keys == 0 {
            return Err(Error::Config("keys must be >= 1".into()));
        }
        Ok(())
    }
}

/// Samples of one monitored server-key computation and its result.
pub fn capture_srp_trace(profile: &Arc<LatencyProfile>, cfg: &SrpConfig, params: &SrpParams, seed: u64) -> Result<(Vec<ActivitySample>, u64)> {
    cfg.validate()?;
    let attack = AttackConfig::prime_probe(profile, cfg.strategy, cfg.loop_set, cfg.wait_iterations)?;
    let mut core = CoreState::new(profile.clone(), seed);
    let mut sampler = PrimeProbeSampler::new(Thread::T0, attack, None);
    let mut victim = srp_victim(Thread::T1, params, cfg.loop_set)?;
    core.advance_cycles(Thread::T1, super::VICTIM_LEAD_CYCLES);
    run_observed(&mut core, &mut sampler, &mut victim)?;
    let result = victim.into_trace().result.expect("srp victim computes a result");
    Ok((sampler.into_samples(), result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SrpKeyResult {
    pub key_seed: u64,
    pub group_bits: u32,
    pub decoded: String,
    pub score: LeakageScore,
    pub leakage_percent: f64,
    pub unknown_fraction: f64,
    /// The monitored computation returned the reference premaster secret.
    pub result_ok: bool,
}

pub fn attack_srp_key(profile: &Arc<LatencyProfile>, cfg: &SrpConfig, key_seed: u64) -> Result<SrpKeyResult> {
    let params = SrpParams::generate(cfg.group_bits, key_seed)?;
    let (samples, result) = capture_srp_trace(profile, cfg, &params, key_seed)?;
    let gaps = loop_gaps(&samples, profile.sibling_stall);
    let key = decode_srp_trace(&gaps, &WindowCosts::for_group(cfg.group_bits));
    let score = score_key(&key, &params.server_secret);
    // the modulus is prime, so the exponent reduces mod N - 1
    let e = exponent_mod(&params, params.modulus - 1);
    let reference = modpow(params.base(), e, params.modulus);
    Ok(SrpKeyResult {
        key_seed,
        group_bits: cfg.group_bits,
        decoded: key.to_string(),
        leakage_percent: score.leakage_percent(),
        unknown_fraction: key.unknown_fraction(),
        score,
        result_ok: result == reference,
    })
}

fn exponent_mod(params: &SrpParams, m: u64) -> u64 {
    params
        .server_secret
        .bits()
        .iter()
        .fold(0u64, |acc, &b| ((2 * acc as u128 + b as u128) % m as u128) as u64)
}
