//! Prime+iProbe and Flush+iReload on the simulated core.
//!
//! Both primitives time an SMC-triggering instruction against code lines.
//! A line still resident in the L1i makes the instruction slow (machine
//! clear); a line that was evicted or flushed makes it fast. The plain-load
//! Prime+Probe baseline is supported for comparison and inverts the
//! direction: resident lines are the fast ones.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout;
use crate::sched::{Observer, Program};
use crate::uarch::{
    CoreState, LatencyProfile, LineAddr, ProbeKind, ResidencyLevel, Support, Thread, TimingSample, SETS, WAYS,
};

/// Eight attacker-owned lines that together fill one L1i set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionSet {
    set: usize,
    lines: [LineAddr; WAYS],
}

impl EvictionSet {
    pub fn set_index(&self) -> usize {
        self.set
    }

    pub fn lines(&self) -> &[LineAddr; WAYS] {
        &self.lines
    }
}

pub fn build_eviction_set(set: usize) -> Result<EvictionSet> {
    if set >= SETS {
        return Err(Error::Config(format!("set index {set} out of range 0..{SETS}")));
    }
    let lines = std::array::from_fn(|i| LineAddr::new(set, layout::ATTACKER_TAG + i as u64));
    Ok(EvictionSet { set, lines })
}

/// Decides from one latency whether the probed line was L1i-resident.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classifier {
    pub threshold: f64,
    /// Resident lines are the slow ones (SMC hit) rather than the fast ones.
    pub slow_means_resident: bool,
}

impl Classifier {
    /// Midpoint between the resident latency and the latency at `against`.
    pub fn between(profile: &LatencyProfile, kind: ProbeKind, against: ResidencyLevel) -> Classifier {
        let smc = profile.triggers_smc(kind);
        let hit = profile.base_cycles(kind, ResidencyLevel::L1i, smc) as f64;
        let miss = profile.base_cycles(kind, against, false) as f64;
        Classifier {
            threshold: (hit + miss) / 2.0,
            slow_means_resident: hit > miss,
        }
    }

    /// For probes of attacker lines that may have been evicted to L1d or L2.
    pub fn for_prime_probe(profile: &LatencyProfile, kind: ProbeKind) -> Classifier {
        let lat = profile.kind_latency(kind);
        let against = if lat.l1d >= lat.l2 { ResidencyLevel::L1d } else { ResidencyLevel::L2 };
        Self::between(profile, kind, against)
    }

    /// For reloads of a shared line the attacker reset before waiting.
    pub fn for_flush_reload(profile: &LatencyProfile, kind: ProbeKind) -> Classifier {
        let against = if kind == ProbeKind::Clwb { ResidencyLevel::L2 } else { ResidencyLevel::Dram };
        Self::between(profile, kind, against)
    }

    pub fn is_resident(&self, cycles: u64) -> bool {
        self.margin(cycles) > 0.0
    }

    /// Signed distance from the threshold, positive on the resident side.
    pub fn margin(&self, cycles: u64) -> f64 {
        let d = cycles as f64 - self.threshold;
        if self.slow_means_resident {
            d
        } else {
            -d
        }
    }
}

/// Parameters of one monitoring attack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackConfig {
    pub strategy: ProbeKind,
    pub target_set: usize,
    pub wait_iterations: u64,
    pub classifier: Classifier,
}

impl AttackConfig {
    /// Prime+iProbe with an SMC-triggering strategy, or the plain-load
    /// baseline.
    pub fn prime_probe(profile: &LatencyProfile, strategy: ProbeKind, target_set: usize, wait_iterations: u64) -> Result<Self> {
        check_set(target_set)?;
        check_available(profile, strategy)?;
        if strategy != ProbeKind::Load && !profile.triggers_smc(strategy) {
            return Err(Error::NotApplicable {
                profile: profile.name.clone(),
                kind: strategy,
            });
        }
        Ok(AttackConfig {
            strategy,
            target_set,
            wait_iterations,
            classifier: Classifier::for_prime_probe(profile, strategy),
        })
    }

    /// Flush+iReload on a shared read-only line. Store and lock need write
    /// permission and are rejected.
    pub fn flush_reload(profile: &LatencyProfile, strategy: ProbeKind, target_set: usize, wait_iterations: u64) -> Result<Self> {
        check_set(target_set)?;
        check_available(profile, strategy)?;
        if strategy.writes_line() {
            return Err(Error::Permission { kind: strategy });
        }
        if strategy != ProbeKind::Load && !profile.triggers_smc(strategy) {
            return Err(Error::NotApplicable {
                profile: profile.name.clone(),
                kind: strategy,
            });
        }
        Ok(AttackConfig {
            strategy,
            target_set,
            wait_iterations,
            classifier: Classifier::for_flush_reload(profile, strategy),
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Config(format!("hit threshold {threshold} must be > 0")));
        }
        self.classifier.threshold = threshold;
        Ok(self)
    }
}

fn check_set(set: usize) -> Result<()> {
    if set >= SETS {
        return Err(Error::Config(format!("target set {set} out of range 0..{SETS}")));
    }
    Ok(())
}

fn check_available(profile: &LatencyProfile, kind: ProbeKind) -> Result<()> {
    if profile.support(kind) == Support::Unsupported {
        return Err(Error::Unsupported {
            profile: profile.name.clone(),
            kind,
        });
    }
    Ok(())
}

/// Outcome of one probe pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub samples: Vec<TimingSample>,
    pub resident: Vec<bool>,
    /// Victim activity detected: some attacker line was evicted (Prime+iProbe)
    /// or the shared line was fetched (Flush+iReload).
    pub activity: bool,
}

impl ProbeResult {
    /// Latency of the probe that looks least like a resident line.
    pub fn signal_cycles(&self, classifier: &Classifier) -> u64 {
        self.samples
            .iter()
            .map(|s| s.cycles)
            .min_by(|a, b| classifier.margin(*a).total_cmp(&classifier.margin(*b)))
            .unwrap_or(0)
    }

    /// Probes whose latency looked like an SMC hit.
    pub fn slow_hits(&self, classifier: &Classifier) -> u32 {
        if !classifier.slow_means_resident {
            return 0;
        }
        self.resident.iter().filter(|r| **r).count() as u32
    }
}

/// Executes every line of the eviction set; returns cycles spent.
pub fn prime(core: &mut CoreState, thread: Thread, ev: &EvictionSet) -> u64 {
    ev.lines.iter().map(|l| core.execute_line(thread, *l).cycles).sum()
}

/// Times the strategy instruction against each line of the eviction set.
pub fn probe(core: &mut CoreState, thread: Thread, ev: &EvictionSet, cfg: &AttackConfig) -> Result<ProbeResult> {
    let mut samples = Vec::with_capacity(WAYS);
    for line in ev.lines {
        samples.push(core.probe_access(thread, cfg.strategy, line)?);
    }
    let resident: Vec<bool> = samples.iter().map(|s| cfg.classifier.is_resident(s.cycles)).collect();
    let activity = resident.iter().any(|r| !r);
    Ok(ProbeResult {
        samples,
        resident,
        activity,
    })
}

/// Prime, wait, probe.
pub fn prime_probe(core: &mut CoreState, thread: Thread, ev: &EvictionSet, cfg: &AttackConfig) -> Result<ProbeResult> {
    prime(core, thread, ev);
    core.advance(thread, cfg.wait_iterations);
    probe(core, thread, ev, cfg)
}

/// Reloads the shared line with the strategy instruction and leaves it
/// flushed for the next round.
pub fn flush_reload_probe(core: &mut CoreState, thread: Thread, line: LineAddr, cfg: &AttackConfig) -> Result<ProbeResult> {
    let s = core.probe_access(thread, cfg.strategy, line)?;
    if !cfg.strategy.removes_line_on_smc() {
        core.probe_access(thread, ProbeKind::Flush, line)?;
    }
    let resident = cfg.classifier.is_resident(s.cycles);
    Ok(ProbeResult {
        samples: vec![s],
        resident: vec![resident],
        activity: resident,
    })
}

/// One observation of a monitoring loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActivitySample {
    pub index: usize,
    /// Attacker clock when the probe started.
    pub clock: u64,
    pub cycles: u64,
    pub activity: bool,
    /// Probes in this sample that caused an SMC stall on the sibling.
    pub slow_hits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Init,
    Wait,
    Probe,
}

/// Prime+iProbe loop as a schedulable program. Each probe is fused with the
/// following prime so no victim step falls between them.
#[derive(Debug, Clone)]
pub struct PrimeProbeSampler {
    thread: Thread,
    ev: EvictionSet,
    cfg: AttackConfig,
    phase: Phase,
    max_samples: Option<usize>,
    samples: Vec<ActivitySample>,
}

impl PrimeProbeSampler {
    pub fn new(thread: Thread, cfg: AttackConfig, max_samples: Option<usize>) -> Self {
        let ev = build_eviction_set(cfg.target_set).expect("validated set index");
        PrimeProbeSampler {
            thread,
            ev,
            cfg,
            phase: Phase::Init,
            max_samples,
            samples: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[ActivitySample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ActivitySample> {
        self.samples
    }
}

impl Program for PrimeProbeSampler {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        self.max_samples.is_some_and(|m| self.samples.len() >= m)
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        match self.phase {
            Phase::Init => {
                prime(core, self.thread, &self.ev);
                self.phase = Phase::Wait;
            }
            Phase::Wait => {
                core.advance(self.thread, self.cfg.wait_iterations.max(1));
                self.phase = Phase::Probe;
            }
            Phase::Probe => {
                let clock = core.clock(self.thread);
                let r = probe(core, self.thread, &self.ev, &self.cfg)?;
                prime(core, self.thread, &self.ev);
                self.samples.push(ActivitySample {
                    index: self.samples.len(),
                    clock,
                    cycles: r.signal_cycles(&self.cfg.classifier),
                    activity: r.activity,
                    slow_hits: r.slow_hits(&self.cfg.classifier),
                });
                self.phase = Phase::Wait;
            }
        }
        Ok(())
    }
}

impl Observer for PrimeProbeSampler {
    fn last_observation(&self) -> Option<u64> {
        self.samples.last().map(|s| s.clock)
    }
}

/// Flush+iReload loop on one shared line.
#[derive(Debug, Clone)]
pub struct FlushReloadSampler {
    thread: Thread,
    line: LineAddr,
    cfg: AttackConfig,
    phase: Phase,
    max_samples: Option<usize>,
    samples: Vec<ActivitySample>,
}

impl FlushReloadSampler {
    pub fn new(thread: Thread, line: LineAddr, cfg: AttackConfig, max_samples: Option<usize>) -> Self {
        FlushReloadSampler {
            thread,
            line,
            cfg,
            phase: Phase::Init,
            max_samples,
            samples: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[ActivitySample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<ActivitySample> {
        self.samples
    }
}

impl Program for FlushReloadSampler {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        self.max_samples.is_some_and(|m| self.samples.len() >= m)
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        match self.phase {
            Phase::Init => {
                core.probe_access(self.thread, ProbeKind::Flush, self.line)?;
                self.phase = Phase::Wait;
            }
            Phase::Wait => {
                core.advance(self.thread, self.cfg.wait_iterations.max(1));
                self.phase = Phase::Probe;
            }
            Phase::Probe => {
                let clock = core.clock(self.thread);
                let r = flush_reload_probe(core, self.thread, self.line, &self.cfg)?;
                self.samples.push(ActivitySample {
                    index: self.samples.len(),
                    clock,
                    cycles: r.samples[0].cycles,
                    activity: r.activity,
                    slow_hits: r.slow_hits(&self.cfg.classifier),
                });
                self.phase = Phase::Wait;
            }
        }
        Ok(())
    }
}

impl Observer for FlushReloadSampler {
    fn last_observation(&self) -> Option<u64> {
        self.samples.last().map(|s| s.clock)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn quiet_core(name: &str) -> CoreState {
        let p = LatencyProfile::builtin(name).unwrap().noiseless();
        CoreState::new(Arc::new(p), 3)
    }

    #[test]
    fn eviction_set_fills_target_set_only() {
        let ev = build_eviction_set(17).unwrap();
        assert!(ev.lines().iter().all(|l| l.set_index() == 17));
        let other = build_eviction_set(18).unwrap();
        assert!(ev.lines().iter().all(|l| !other.lines().contains(l)));
        assert!(build_eviction_set(64).is_err());
    }

    #[test]
    fn probe_without_victim_sees_no_activity() {
        let mut core = quiet_core("intel-cascade-lake");
        let ev = build_eviction_set(3).unwrap();
        for kind in [ProbeKind::Flush, ProbeKind::Store, ProbeKind::LockInc, ProbeKind::Clwb, ProbeKind::Load] {
            let cfg = AttackConfig::prime_probe(core.profile(), kind, 3, 100).unwrap();
            let r = prime_probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
            assert!(!r.activity, "{kind}");
        }
    }

    #[test]
    fn probe_detects_single_victim_line() {
        let mut core = quiet_core("intel-cascade-lake");
        let ev = build_eviction_set(3).unwrap();
        let cfg = AttackConfig::prime_probe(core.profile(), ProbeKind::Store, 3, 100).unwrap();
        prime(&mut core, Thread::T0, &ev);
        core.execute_line(Thread::T1, LineAddr::new(3, layout::VICTIM_TAG));
        let r = probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
        assert!(r.activity);
        assert_eq!(r.resident.iter().filter(|x| !**x).count(), 1);
        // a victim line in another set goes unnoticed
        prime(&mut core, Thread::T0, &ev);
        core.execute_line(Thread::T1, LineAddr::new(4, layout::VICTIM_TAG));
        assert!(!probe(&mut core, Thread::T0, &ev, &cfg).unwrap().activity);
    }

    #[test]
    fn flush_reload_rejects_write_strategies() {
        let core = quiet_core("intel-cascade-lake");
        for kind in [ProbeKind::Store, ProbeKind::LockInc] {
            let err = AttackConfig::flush_reload(core.profile(), kind, 0, 10).unwrap_err();
            assert!(matches!(err, Error::Permission { .. }));
        }
    }

    #[test]
    fn prime_probe_rejects_non_smc_strategy() {
        let core = quiet_core("intel-tiger-lake");
        assert!(AttackConfig::prime_probe(core.profile(), ProbeKind::Prefetch, 0, 10).is_err());
        assert!(AttackConfig::prime_probe(core.profile(), ProbeKind::Load, 0, 10).is_ok());
    }

    #[test]
    fn flush_reload_sees_victim_fetch() {
        for kind in [ProbeKind::Flush, ProbeKind::FlushOpt, ProbeKind::Clwb, ProbeKind::Prefetch] {
            let mut core = quiet_core("intel-cascade-lake");
            let line = LineAddr::new(9, layout::SHARED_TAG);
            let cfg = AttackConfig::flush_reload(core.profile(), kind, 9, 10).unwrap();
            core.probe_access(Thread::T0, ProbeKind::Flush, line).unwrap();
            assert!(!flush_reload_probe(&mut core, Thread::T0, line, &cfg).unwrap().activity, "{kind}");
            core.execute_line(Thread::T1, line);
            assert!(flush_reload_probe(&mut core, Thread::T0, line, &cfg).unwrap().activity, "{kind}");
            assert!(!flush_reload_probe(&mut core, Thread::T0, line, &cfg).unwrap().activity, "{kind}");
        }
    }

    #[test]
    fn threshold_must_be_positive() {
        let core = quiet_core("intel-cascade-lake");
        let cfg = AttackConfig::prime_probe(core.profile(), ProbeKind::Flush, 0, 10).unwrap();
        assert!(cfg.clone().with_threshold(0.0).is_err());
        assert!(cfg.with_threshold(200.0).is_ok());
    }
}
