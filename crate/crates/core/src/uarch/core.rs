use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::Serialize;

use super::{LatencyProfile, LineAddr, ProbeKind, ResidencyLevel, Support, Thread, SETS, WAYS};
use crate::error::{Error, Result};

/// Hardware performance counters of one thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub machine_clears_count: u64,
    pub machine_clears_smc: u64,
    pub l1i_misses: u64,
    pub llc_misses: u64,
    pub branch_retired: u64,
    pub branch_mispredicts: u64,
    pub stalls_total: u64,
}

impl CounterSnapshot {
    pub const NAMES: [&'static str; 7] = [
        "machine_clears_count",
        "machine_clears_smc",
        "l1i_misses",
        "llc_misses",
        "branch_retired",
        "branch_mispredicts",
        "stalls_total",
    ];

    pub fn values(&self) -> [u64; 7] {
        [
            self.machine_clears_count,
            self.machine_clears_smc,
            self.l1i_misses,
            self.llc_misses,
            self.branch_retired,
            self.branch_mispredicts,
            self.stalls_total,
        ]
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }

    pub fn saturating_sub(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            machine_clears_count: self.machine_clears_count.saturating_sub(earlier.machine_clears_count),
            machine_clears_smc: self.machine_clears_smc.saturating_sub(earlier.machine_clears_smc),
            l1i_misses: self.l1i_misses.saturating_sub(earlier.l1i_misses),
            llc_misses: self.llc_misses.saturating_sub(earlier.llc_misses),
            branch_retired: self.branch_retired.saturating_sub(earlier.branch_retired),
            branch_mispredicts: self.branch_mispredicts.saturating_sub(earlier.branch_mispredicts),
            stalls_total: self.stalls_total.saturating_sub(earlier.stalls_total),
        }
    }

    pub fn add(&self, other: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            machine_clears_count: self.machine_clears_count + other.machine_clears_count,
            machine_clears_smc: self.machine_clears_smc + other.machine_clears_smc,
            l1i_misses: self.l1i_misses + other.l1i_misses,
            llc_misses: self.llc_misses + other.llc_misses,
            branch_retired: self.branch_retired + other.branch_retired,
            branch_mispredicts: self.branch_mispredicts + other.branch_mispredicts,
            stalls_total: self.stalls_total + other.stalls_total,
        }
    }
}

/// One timed instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TimingSample {
    /// Measured latency: noisy, at least 1, quantized to the timer.
    pub cycles: u64,
    pub kind: ProbeKind,
    /// Where the line was when the instruction issued.
    pub level_observed: ResidencyLevel,
    pub smc_fired: bool,
    /// Issuing thread's clock when the instruction issued.
    pub clock_at_sample: u64,
}

/// Mutable state of the simulated core.
///
/// Every source of randomness is a ChaCha stream seeded at construction, so
/// a `(profile, seed, operation sequence)` triple always replays the same
/// timings.
#[derive(Debug, Clone)]
pub struct CoreState {
    profile: Arc<LatencyProfile>,
    /// Per set, resident tags ordered from LRU to MRU.
    l1i: Vec<Vec<u64>>,
    /// Nearest non-L1i level holding each line; absent means DRAM.
    deeper: HashMap<LineAddr, ResidencyLevel>,
    clocks: [u64; 2],
    counters: [CounterSnapshot; 2],
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    op_noise: Option<Normal<f64>>,
    preempt: Option<Exp<f64>>,
}

impl CoreState {
    pub fn new(profile: Arc<LatencyProfile>, seed: u64) -> Self {
        let noise = (profile.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, profile.noise_sigma).expect("validated sigma"));
        let op_noise = (profile.op_jitter > 0.0)
            .then(|| Normal::new(1.0, profile.op_jitter).expect("validated jitter"));
        let preempt = (profile.interrupt_rate > 0.0 && profile.interrupt_cycles > 0)
            .then(|| Exp::new(1.0 / profile.interrupt_cycles as f64).expect("positive mean"));
        CoreState {
            profile,
            l1i: (0..SETS).map(|_| Vec::with_capacity(WAYS)).collect(),
            deeper: HashMap::new(),
            clocks: [0; 2],
            counters: [CounterSnapshot::default(); 2],
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            op_noise,
            preempt,
        }
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn profile_arc(&self) -> &Arc<LatencyProfile> {
        &self.profile
    }

    pub fn clock(&self, thread: Thread) -> u64 {
        self.clocks[thread.index()]
    }

    /// Random stream shared by workloads running on this core.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Resident tags of a set, LRU first.
    pub fn l1i_set(&self, set: usize) -> &[u64] {
        &self.l1i[set]
    }

    pub fn is_l1i_resident(&self, line: LineAddr) -> bool {
        self.l1i[line.set_index()].contains(&line.tag)
    }

    /// Level beneath the L1i that holds the line.
    pub fn deeper_level(&self, line: LineAddr) -> ResidencyLevel {
        self.deeper.get(&line).copied().unwrap_or(ResidencyLevel::Dram)
    }

    /// Nearest level holding the line.
    pub fn level_of(&self, line: LineAddr) -> ResidencyLevel {
        if self.is_l1i_resident(line) {
            ResidencyLevel::L1i
        } else {
            self.deeper_level(line)
        }
    }

    /// Places a line at `level` without timing or counter effects. `L1i`
    /// inserts it as MRU of its set; deeper levels drop any L1i copy.
    pub fn prepare_line(&mut self, line: LineAddr, level: ResidencyLevel) {
        match level {
            ResidencyLevel::L1i => {
                self.insert_mru(line);
                self.set_deeper(line, ResidencyLevel::L2);
            }
            deeper => {
                self.remove_l1i(line);
                self.set_deeper(line, deeper);
            }
        }
    }

    /// Fetches a line into the L1i as code.
    pub fn execute_line(&mut self, thread: Thread, line: LineAddr) -> TimingSample {
        let level = self.level_of(line);
        let start = self.clock(thread);
        let cycles = self.measure(self.profile.base_cycles(ProbeKind::Execute, level, false));
        let c = &mut self.counters[thread.index()];
        if level != ResidencyLevel::L1i {
            c.l1i_misses += 1;
            c.stalls_total += cycles;
            if level == ResidencyLevel::Dram {
                c.llc_misses += 1;
            }
            let deeper = self.deeper_level(line).min(ResidencyLevel::L2);
            self.set_deeper(line, deeper);
        }
        self.insert_mru(line);
        self.clocks[thread.index()] += cycles;
        TimingSample {
            cycles,
            kind: ProbeKind::Execute,
            level_observed: level,
            smc_fired: false,
            clock_at_sample: start,
        }
    }

    /// Issues one timed probe instruction against `line`.
    ///
    /// An SMC machine clear fires iff the profile marks `kind` as
    /// SMC-triggering and the line is L1i-resident.
    pub fn probe_access(&mut self, thread: Thread, kind: ProbeKind, line: LineAddr) -> Result<TimingSample> {
        if self.profile.support(kind) == Support::Unsupported {
            return Err(Error::Unsupported {
                profile: self.profile.name.clone(),
                kind,
            });
        }
        if kind == ProbeKind::Execute {
            return Ok(self.execute_line(thread, line));
        }
        let level = self.level_of(line);
        let smc = level == ResidencyLevel::L1i && self.profile.triggers_smc(kind);
        let start = self.clock(thread);
        let cycles = self.measure(self.profile.base_cycles(kind, level, smc));
        self.clocks[thread.index()] += cycles;

        let deeper = self.deeper_level(line);
        match kind {
            ProbeKind::Flush | ProbeKind::FlushOpt => {
                self.remove_l1i(line);
                self.set_deeper(line, ResidencyLevel::Dram);
            }
            ProbeKind::Clwb => {
                if smc {
                    self.remove_l1i(line);
                }
            }
            ProbeKind::Store | ProbeKind::LockInc => {
                if smc {
                    self.touch(line);
                }
                self.set_deeper(line, ResidencyLevel::L1d);
            }
            ProbeKind::Load | ProbeKind::Prefetch | ProbeKind::PrefetchNta => {
                self.set_deeper(line, deeper.min(ResidencyLevel::L1d));
            }
            ProbeKind::Execute => unreachable!(),
        }

        let fetches = !matches!(kind, ProbeKind::Flush | ProbeKind::FlushOpt | ProbeKind::Clwb);
        if fetches && level == ResidencyLevel::Dram {
            self.counters[thread.index()].llc_misses += 1;
        }
        if smc {
            let c = &mut self.counters[thread.index()];
            c.machine_clears_count += 1;
            c.machine_clears_smc += 1;
            c.stalls_total += cycles;
            let stall = self.profile.sibling_stall;
            let sib = thread.sibling().index();
            self.clocks[sib] += stall;
            self.counters[sib].stalls_total += stall;
        }
        Ok(TimingSample {
            cycles,
            kind,
            level_observed: level,
            smc_fired: smc,
            clock_at_sample: start,
        })
    }

    /// Runs an empty loop; returns the cycles spent, including any
    /// preemption that lands inside it. Every iteration retires one branch;
    /// the exit mispredicts.
    pub fn advance(&mut self, thread: Thread, iterations: u64) -> u64 {
        if iterations > 0 {
            self.record_branches(thread, iterations, 1);
        }
        let mut cycles = iterations * self.profile.cycles_per_loop_iteration;
        if let Some(preempt) = self.preempt {
            let p = 1.0 - (-self.profile.interrupt_rate * cycles as f64 / 1e6).exp();
            if self.rng.random::<f64>() < p {
                cycles += preempt.sample(&mut self.rng).round() as u64;
            }
        }
        self.clocks[thread.index()] += cycles;
        cycles
    }

    pub fn advance_cycles(&mut self, thread: Thread, cycles: u64) {
        self.clocks[thread.index()] += cycles;
    }

    /// A duration of nominally `cycles` scaled by the profile's operation
    /// jitter, at least 1.
    pub fn jitter(&mut self, cycles: u64) -> u64 {
        match self.op_noise {
            Some(n) => (cycles as f64 * n.sample(&mut self.rng)).round().max(1.0) as u64,
            None => cycles,
        }
    }

    /// Records one retired conditional branch.
    pub fn record_branch(&mut self, thread: Thread, mispredicted: bool) {
        self.record_branches(thread, 1, u64::from(mispredicted));
    }

    pub fn record_branches(&mut self, thread: Thread, retired: u64, mispredicted: u64) {
        debug_assert!(mispredicted <= retired);
        let c = &mut self.counters[thread.index()];
        c.branch_retired += retired;
        c.branch_mispredicts += mispredicted;
    }

    /// Records a machine clear unrelated to SMC (memory ordering, FP assist).
    pub fn record_machine_clear(&mut self, thread: Thread) {
        self.counters[thread.index()].machine_clears_count += 1;
    }

    pub fn snapshot_counters(&self, thread: Thread) -> CounterSnapshot {
        self.counters[thread.index()]
    }

    fn measure(&mut self, base: u32) -> u64 {
        let mut x = base as f64;
        if let Some(n) = self.noise {
            x += n.sample(&mut self.rng);
        }
        let x = x.max(1.0);
        let g = self.profile.timer_granularity as f64;
        ((x / g).round().max(1.0) * g) as u64
    }

    fn set_deeper(&mut self, line: LineAddr, level: ResidencyLevel) {
        if level == ResidencyLevel::Dram {
            self.deeper.remove(&line);
        } else {
            self.deeper.insert(line, level);
        }
    }

    fn insert_mru(&mut self, line: LineAddr) {
        let set = &mut self.l1i[line.set_index()];
        let mut evicted = None;
        if let Some(pos) = set.iter().position(|t| *t == line.tag) {
            set.remove(pos);
        } else if set.len() == WAYS {
            evicted = Some(set.remove(0));
        }
        set.push(line.tag);
        if let Some(tag) = evicted {
            let evicted = LineAddr { set: line.set, tag };
            let deeper = self.deeper_level(evicted).min(ResidencyLevel::L2);
            self.set_deeper(evicted, deeper);
        }
    }

    fn touch(&mut self, line: LineAddr) {
        let set = &mut self.l1i[line.set_index()];
        if let Some(pos) = set.iter().position(|t| *t == line.tag) {
            let tag = set.remove(pos);
            set.push(tag);
        }
    }

    fn remove_l1i(&mut self, line: LineAddr) {
        let set = &mut self.l1i[line.set_index()];
        if let Some(pos) = set.iter().position(|t| *t == line.tag) {
            set.remove(pos);
        }
    }
}
