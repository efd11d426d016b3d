//! Bounds-check-bypass that encodes a byte in which oracle code line the
//! victim speculatively calls, recovered with Flush+iReload.
//!
//! Byte `b` maps to oracle line `b`: set `b mod 64`, one 4 KiB page per 64
//! values. The attacker mistrains the bounds check, resets the oracle page,
//! triggers an out-of-bounds call and scans all 256 lines with the chosen
//! probe instruction.

use serde::{Deserialize, Serialize};

use crate::attacks::Classifier;
use crate::error::{Error, Result};
use crate::layout;
use crate::uarch::{CoreState, LatencyProfile, LineAddr, ProbeKind, ResidencyLevel, Support, Thread, TimingSample, SETS};

/// Two-bit saturating counter of the bounds-check branch. Values 2 and 3
/// predict "in bounds".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pht {
    counter: u8,
}

impl Pht {
    pub fn counter(self) -> u8 {
        self.counter
    }

    pub fn predicts_in_bounds(self) -> bool {
        self.counter >= 2
    }

    pub fn update(&mut self, in_bounds: bool) {
        self.counter = if in_bounds {
            (self.counter + 1).min(3)
        } else {
            self.counter.saturating_sub(1)
        };
    }
}

pub fn oracle_line(byte: u8) -> LineAddr {
    LineAddr::new(byte as usize % SETS, layout::ORACLE_TAG + byte as u64 / SETS as u64)
}

/// Cycles of one victim call outside the cache accesses.
const CALL_OVERHEAD: u64 = 30;
/// Instructions the gadget needs inside the speculation window: the
/// out-of-bounds load and the indirect call.
const GADGET_LEN: u32 = 2;

/// `if (index < len) call(oracle + data[index] * 64)`, where `data` is the
/// public array followed by the secret.
#[derive(Debug, Clone)]
pub struct SpectreVictim {
    thread: Thread,
    array_len: usize,
    memory: Vec<u8>,
    speculative_window: u32,
    pht: Pht,
}

impl SpectreVictim {
    pub fn new(thread: Thread, public: Vec<u8>, secret: &[u8], speculative_window: u32) -> Result<Self> {
        if public.is_empty() {
            return Err(Error::Config("public array must not be empty".into()));
        }
        let array_len = public.len();
        let mut memory = public;
        memory.extend_from_slice(secret);
        Ok(SpectreVictim {
            thread,
            array_len,
            memory,
            speculative_window,
            pht: Pht::default(),
        })
    }

    pub fn array_len(&self) -> usize {
        self.array_len
    }

    pub fn secret_len(&self) -> usize {
        self.memory.len() - self.array_len
    }

    pub fn secret(&self) -> &[u8] {
        &self.memory[self.array_len..]
    }

    pub fn pht(&self) -> Pht {
        self.pht
    }

    /// One call. Returns the byte it architecturally used, if in bounds.
    pub fn call(&mut self, core: &mut CoreState, index: usize) -> Option<u8> {
        let in_bounds = index < self.array_len;
        let predicted = self.pht.predicts_in_bounds();
        let result = if in_bounds {
            let byte = self.memory[index];
            core.execute_line(self.thread, oracle_line(byte));
            Some(byte)
        } else {
            if predicted && self.speculative_window >= GADGET_LEN {
                if let Some(&byte) = self.memory.get(index) {
                    core.execute_line(self.thread, oracle_line(byte));
                }
            }
            None
        };
        core.record_branch(self.thread, predicted != in_bounds);
        self.pht.update(in_bounds);
        core.advance_cycles(self.thread, CALL_OVERHEAD);
        result
    }
}

/// Calls the victim `rounds` times with in-bounds indices.
pub fn mistrain(victim: &mut SpectreVictim, core: &mut CoreState, rounds: usize) -> Result<()> {
    if rounds == 0 {
        return Err(Error::Config("mistraining needs at least one round".into()));
    }
    for i in 0..rounds {
        victim.call(core, i % victim.array_len);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LeakOutcome {
    Byte(u8),
    NoSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeakAttempt {
    pub outcome: LeakOutcome,
    /// One sample per oracle line, in byte order; empty when the strategy
    /// cannot leak on this processor.
    pub scan: Vec<TimingSample>,
}

/// Level the oracle lines are reset to, and the matching classifier. SMC
/// probes compare against a line warm in the L1d; plain timing probes
/// compare against memory.
fn scan_setup(profile: &LatencyProfile, kind: ProbeKind) -> (ResidencyLevel, Classifier) {
    let against = if profile.triggers_smc(kind) {
        ResidencyLevel::L1d
    } else {
        ResidencyLevel::Dram
    };
    (against, Classifier::between(profile, kind, against))
}

/// Resets the oracle page, calls the victim at `index` and scans.
/// The byte is reported only if exactly one oracle line reads as resident.
pub fn leak_index(
    victim: &mut SpectreVictim,
    core: &mut CoreState,
    attacker: Thread,
    strategy: ProbeKind,
    index: usize,
    mistrain_rounds: usize,
) -> Result<LeakAttempt> {
    match core.profile().support(strategy) {
        Support::Unsupported => {
            return Err(Error::Unsupported {
                profile: core.profile().name.clone(),
                kind: strategy,
            })
        }
        Support::None => {
            return Ok(LeakAttempt {
                outcome: LeakOutcome::NoSignal,
                scan: Vec::new(),
            })
        }
        Support::Smc | Support::Timing => {}
    }
    if mistrain_rounds > 0 {
        mistrain(victim, core, mistrain_rounds)?;
    }
    let (level, classifier) = scan_setup(core.profile(), strategy);
    for b in 0..=255u8 {
        let line = oracle_line(b);
        core.probe_access(attacker, ProbeKind::Flush, line)?;
        if level == ResidencyLevel::L1d {
            core.probe_access(attacker, ProbeKind::Load, line)?;
        }
    }
    victim.call(core, index);
    let mut scan = Vec::with_capacity(256);
    let mut hits = Vec::new();
    for b in 0..=255u8 {
        let s = core.probe_access(attacker, strategy, oracle_line(b))?;
        if classifier.is_resident(s.cycles) {
            hits.push(b);
        }
        scan.push(s);
    }
    let outcome = match hits.as_slice() {
        [b] => LeakOutcome::Byte(*b),
        _ => LeakOutcome::NoSignal,
    };
    Ok(LeakAttempt { outcome, scan })
}

/// Leaks secret byte `offset` (index `array_len + offset`).
pub fn leak_byte(
    victim: &mut SpectreVictim,
    core: &mut CoreState,
    attacker: Thread,
    strategy: ProbeKind,
    offset: usize,
    mistrain_rounds: usize,
) -> Result<LeakAttempt> {
    let index = victim.array_len() + offset;
    leak_index(victim, core, attacker, strategy, index, mistrain_rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakConfig {
    pub strategy: ProbeKind,
    pub mistrain_rounds: usize,
    pub attempts_per_byte: usize,
    pub speculative_window: u32,
    pub cycles_per_second: f64,
}

impl Default for LeakConfig {
    fn default() -> Self {
        LeakConfig {
            strategy: ProbeKind::Flush,
            mistrain_rounds: 6,
            attempts_per_byte: 3,
            speculative_window: 64,
            cycles_per_second: 3.0e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakReport {
    pub bytes: Vec<Option<u8>>,
    pub correct: usize,
    pub attacker_cycles: u64,
    pub bytes_per_second: f64,
}

impl LeakReport {
    pub fn success_percent(&self) -> f64 {
        if self.bytes.is_empty() {
            return 0.0;
        }
        100.0 * self.correct as f64 / self.bytes.len() as f64
    }
}

/// Leaks every secret byte, taking the most frequent answer over
/// `attempts_per_byte` attempts (smallest byte on ties).
pub fn leak_secret(victim: &mut SpectreVictim, core: &mut CoreState, attacker: Thread, cfg: &LeakConfig) -> Result<LeakReport> {
    if cfg.attempts_per_byte == 0 {
        return Err(Error::Config("attempts_per_byte must be >= 1".into()));
    }
    let start = core.clock(attacker);
    let mut bytes = Vec::with_capacity(victim.secret_len());
    for offset in 0..victim.secret_len() {
        let mut counts = [0usize; 256];
        for _ in 0..cfg.attempts_per_byte {
            if let LeakOutcome::Byte(b) = leak_byte(victim, core, attacker, cfg.strategy, offset, cfg.mistrain_rounds)?.outcome {
                counts[b as usize] += 1;
            }
        }
        let best = (0..256).max_by_key(|b| (counts[*b], std::cmp::Reverse(*b))).unwrap();
        bytes.push((counts[best] > 0).then_some(best as u8));
    }
    let correct = bytes
        .iter()
        .zip(victim.secret())
        .filter(|(got, want)| **got == Some(**want))
        .count();
    let attacker_cycles = core.clock(attacker) - start;
    let seconds = attacker_cycles as f64 / cfg.cycles_per_second;
    Ok(LeakReport {
        bytes_per_second: if seconds > 0.0 { correct as f64 / seconds } else { 0.0 },
        bytes,
        correct,
        attacker_cycles,
    })
}

/// Behavior of `strategy` on this processor as observed by running the
/// attack: leaks with SMC conflicts, leaks without, no leak, or
/// unavailable. `bytes` are the secret values tried; all must leak.
pub fn observe_support(core: &mut CoreState, strategy: ProbeKind, bytes: &[u8]) -> Result<Support> {
    let mut any_smc = false;
    for &b in bytes {
        let mut victim = SpectreVictim::new(Thread::T1, vec![0, 1, 2, 3], &[b], 64)?;
        let attempt = match leak_byte(&mut victim, core, Thread::T0, strategy, 0, LeakConfig::default().mistrain_rounds) {
            Ok(a) => a,
            Err(Error::Unsupported { .. }) => return Ok(Support::Unsupported),
            Err(e) => return Err(e),
        };
        if attempt.outcome != LeakOutcome::Byte(b) {
            return Ok(Support::None);
        }
        any_smc |= attempt.scan[b as usize].smc_fired;
    }
    Ok(if any_smc { Support::Smc } else { Support::Timing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn core(name: &str) -> CoreState {
        CoreState::new(Arc::new(LatencyProfile::builtin(name).unwrap()), 11)
    }

    #[test]
    fn pht_saturates() {
        let mut p = Pht::default();
        assert!(!p.predicts_in_bounds());
        for _ in 0..5 {
            p.update(true);
        }
        assert_eq!(p.counter(), 3);
        p.update(false);
        assert!(p.predicts_in_bounds());
        for _ in 0..5 {
            p.update(false);
        }
        assert_eq!(p.counter(), 0);
    }

    #[test]
    fn oracle_lines_are_distinct() {
        let lines: std::collections::HashSet<_> = (0..=255u8).map(oracle_line).collect();
        assert_eq!(lines.len(), 256);
        assert_eq!(oracle_line(65).set_index(), 1);
    }

    #[test]
    fn leaks_with_flush_on_cascade_lake() {
        let mut c = core("intel-cascade-lake");
        let mut v = SpectreVictim::new(Thread::T1, vec![1, 2, 3, 4], b"Hi!", 64).unwrap();
        let r = leak_secret(&mut v, &mut c, Thread::T0, &LeakConfig::default()).unwrap();
        assert_eq!(r.bytes, vec![Some(b'H'), Some(b'i'), Some(b'!')]);
        assert_eq!(r.success_percent(), 100.0);
    }

    #[test]
    fn no_mistraining_leaks_nothing() {
        let mut c = core("intel-cascade-lake");
        let mut v = SpectreVictim::new(Thread::T1, vec![1, 2, 3, 4], b"key", 64).unwrap();
        let cfg = LeakConfig {
            mistrain_rounds: 0,
            ..LeakConfig::default()
        };
        let r = leak_secret(&mut v, &mut c, Thread::T0, &cfg).unwrap();
        assert_eq!(r.correct, 0);
    }

    #[test]
    fn short_speculation_window_leaks_nothing() {
        let mut c = core("intel-cascade-lake");
        let mut v = SpectreVictim::new(Thread::T1, vec![1, 2, 3, 4], b"k", 1).unwrap();
        let a = leak_byte(&mut v, &mut c, Thread::T0, ProbeKind::Flush, 0, 6).unwrap();
        assert_eq!(a.outcome, LeakOutcome::NoSignal);
    }

    #[test]
    fn mispredictions_are_counted() {
        let mut c = core("intel-cascade-lake");
        let mut v = SpectreVictim::new(Thread::T1, vec![1, 2, 3, 4], b"k", 64).unwrap();
        mistrain(&mut v, &mut c, 6).unwrap();
        let before = c.snapshot_counters(Thread::T1);
        v.call(&mut c, 4);
        let after = c.snapshot_counters(Thread::T1);
        assert_eq!(after.branch_retired - before.branch_retired, 1);
        assert_eq!(after.branch_mispredicts - before.branch_mispredicts, 1);
        assert!(mistrain(&mut v, &mut c, 0).is_err());
    }

    #[test]
    fn unavailable_strategy_is_reported() {
        let mut c = core("intel-ivy-bridge");
        assert_eq!(observe_support(&mut c, ProbeKind::FlushOpt, &[7]).unwrap(), Support::Unsupported);
    }
}
