//! Cross-thread covert channel over one L1i set or one shared code line.
//!
//! The sender encodes a `1` by executing its line `loads_per_one` times and
//! a `0` by spinning for `dummy_iterations`. The receiver samples with
//! Prime+iProbe or Flush+iReload and decodes the lengths of activity and
//! quiet runs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attacks::{ActivitySample, AttackConfig, FlushReloadSampler, PrimeProbeSampler};
use crate::error::{Error, Result};
use crate::layout;
use crate::recover::levenshtein;
use crate::sched::{run_observed, Observer, Program};
use crate::uarch::{CoreState, LatencyProfile, LineAddr, ProbeKind, Thread};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    PrimeProbe,
    FlushReload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovertConfig {
    pub channel: Channel,
    pub strategy: ProbeKind,
    pub target_set: usize,
    /// Empty-loop iterations that encode a `0`.
    pub dummy_iterations: u64,
    /// Line executions that encode a `1`.
    pub loads_per_one: u32,
    /// Empty-loop iterations after each execution within a `1`.
    pub load_spacing: u64,
    /// Receiver wait between prime (or flush) and probe.
    pub wait_iterations: u64,
    /// Fewest consecutive active samples that count as a `1`.
    pub run_threshold: usize,
    pub cycles_per_second: f64,
}

impl Default for CovertConfig {
    fn default() -> Self {
        CovertConfig {
            channel: Channel::PrimeProbe,
            strategy: ProbeKind::LockInc,
            target_set: 12,
            dummy_iterations: 10_000,
            loads_per_one: 10,
            load_spacing: 1_000,
            wait_iterations: 1_000,
            run_threshold: 2,
            cycles_per_second: 3.0e9,
        }
    }
}

impl CovertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dummy_iterations == 0 {
            return Err(Error::Config("dummy_iterations must be > 0".into()));
        }
        if self.loads_per_one == 0 {
            return Err(Error::Config("loads_per_one must be >= 1".into()));
        }
        if self.run_threshold == 0 {
            return Err(Error::Config("run_threshold must be >= 1".into()));
        }
        if !(self.cycles_per_second > 0.0) {
            return Err(Error::Config("cycles_per_second must be > 0".into()));
        }
        Ok(())
    }

    pub fn attack_config(&self, profile: &LatencyProfile) -> Result<AttackConfig> {
        match self.channel {
            Channel::PrimeProbe => AttackConfig::prime_probe(profile, self.strategy, self.target_set, self.wait_iterations),
            Channel::FlushReload => AttackConfig::flush_reload(profile, self.strategy, self.target_set, self.wait_iterations),
        }
    }

    /// Line the sender executes: private in the target set for
    /// Prime+iProbe, shared for Flush+iReload.
    pub fn sender_line(&self) -> LineAddr {
        let tag = match self.channel {
            Channel::PrimeProbe => layout::SENDER_TAG,
            Channel::FlushReload => layout::SHARED_TAG,
        };
        LineAddr::new(self.target_set, tag)
    }
}

/// Sender program.
#[derive(Debug, Clone)]
pub struct Sender {
    thread: Thread,
    bits: Vec<bool>,
    line: LineAddr,
    cfg: CovertConfig,
    pos: usize,
    load: u32,
}

impl Sender {
    pub fn new(thread: Thread, bits: &[bool], cfg: &CovertConfig) -> Self {
        Sender {
            thread,
            bits: bits.to_vec(),
            line: cfg.sender_line(),
            cfg: cfg.clone(),
            pos: 0,
            load: 0,
        }
    }
}

impl Program for Sender {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        self.pos == self.bits.len()
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        if self.bits[self.pos] {
            core.execute_line(self.thread, self.line);
            core.advance(self.thread, self.cfg.load_spacing.max(1));
            self.load += 1;
            if self.load == self.cfg.loads_per_one {
                self.load = 0;
                self.pos += 1;
            }
        } else {
            core.advance(self.thread, self.cfg.dummy_iterations);
            self.pos += 1;
        }
        Ok(())
    }
}

/// Runs the sender alone; returns its cycle count.
pub fn send_bits(core: &mut CoreState, thread: Thread, bits: &[bool], cfg: &CovertConfig) -> Result<u64> {
    cfg.validate()?;
    let start = core.clock(thread);
    let mut sender = Sender::new(thread, bits, cfg);
    crate::sched::run_solo(core, &mut sender)?;
    Ok(core.clock(thread) - start)
}

fn receiver(profile: &LatencyProfile, thread: Thread, cfg: &CovertConfig, max_samples: Option<usize>) -> Result<Box<dyn ObserverSamples>> {
    let attack = cfg.attack_config(profile)?;
    Ok(match cfg.channel {
        Channel::PrimeProbe => Box::new(PrimeProbeSampler::new(thread, attack, max_samples)),
        Channel::FlushReload => Box::new(FlushReloadSampler::new(thread, cfg.sender_line(), attack, max_samples)),
    })
}

trait ObserverSamples: Observer {
    fn take(self: Box<Self>) -> Vec<ActivitySample>;
}

impl ObserverSamples for PrimeProbeSampler {
    fn take(self: Box<Self>) -> Vec<ActivitySample> {
        self.into_samples()
    }
}

impl ObserverSamples for FlushReloadSampler {
    fn take(self: Box<Self>) -> Vec<ActivitySample> {
        self.into_samples()
    }
}

/// Runs the receiver alone for `samples` observations.
pub fn receive_stream(core: &mut CoreState, thread: Thread, cfg: &CovertConfig, samples: usize) -> Result<Vec<ActivitySample>> {
    cfg.validate()?;
    let mut rx = receiver(&core.profile().clone(), thread, cfg, Some(samples))?;
    crate::sched::run_solo(core, rx.as_mut())?;
    Ok(rx.take())
}

/// Linear model of run duration per transmitted bit. Durations are victim
/// progress: receiver clock minus the stalls its SMC probes put on the
/// sender, so quiet and active samples weigh what the sender experienced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Progress cycles per `1` and the constant excess of a `1` run.
    pub one_cycles: f64,
    pub one_offset: f64,
    pub zero_cycles: f64,
    pub zero_offset: f64,
    pub sibling_stall: u64,
    /// Samples per bit on the calibration run.
    pub samples_per_one: f64,
    pub samples_per_zero: f64,
    /// Interior quiet runs shorter than this are missed detections.
    pub min_quiet_run: usize,
    /// Activity runs shorter than this are spurious.
    pub min_active_run: usize,
}

/// Maximal runs of equal activity, as `(active, length)`.
pub fn activity_runs(activity: impl IntoIterator<Item = bool>) -> Vec<(bool, usize)> {
    let mut runs: Vec<(bool, usize)> = Vec::new();
    for a in activity {
        match runs.last_mut() {
            Some((v, n)) if *v == a => *n += 1,
            _ => runs.push((a, 1)),
        }
    }
    runs
}

/// Flips short runs into their neighbors: interior quiet gaps shorter than
/// `min_quiet` first, then activity blips shorter than `min_active`.
pub fn smooth(runs: Vec<(bool, usize)>, min_quiet: usize, min_active: usize) -> Vec<(bool, usize)> {
    let pass = |runs: Vec<(bool, usize)>, target: bool, threshold: usize| {
        let last = runs.len().saturating_sub(1);
        let flipped = runs.into_iter().enumerate().map(|(i, (v, n))| {
            let interior = i > 0 && i < last;
            if v == target && n < threshold && (interior || v) {
                (!v, n)
            } else {
                (v, n)
            }
        });
        let mut merged: Vec<(bool, usize)> = Vec::new();
        for (v, n) in flipped {
            match merged.last_mut() {
                Some((pv, pn)) if *pv == v => *pn += n,
                _ => merged.push((v, n)),
            }
        }
        merged
    };
    let runs = pass(runs, false, min_quiet);
    pass(runs, true, min_active)
}

/// Victim progress at every sample start, plus one median step past the
/// last sample.
fn progress_marks(samples: &[ActivitySample], sibling_stall: u64) -> Vec<f64> {
    let mut marks = Vec::with_capacity(samples.len() + 1);
    let mut steps = Vec::with_capacity(samples.len());
    marks.push(0.0);
    for w in samples.windows(2) {
        let step = (w[1].clock - w[0].clock) as f64 - (w[0].slow_hits as u64 * sibling_stall) as f64;
        steps.push(step);
        marks.push(marks.last().unwrap() + step);
    }
    if !samples.is_empty() {
        steps.sort_by(f64::total_cmp);
        let median = steps.get(steps.len() / 2).copied().unwrap_or(0.0);
        marks.push(marks.last().unwrap() + median);
    }
    marks
}

/// Smoothed runs with their victim-progress durations.
fn timed_runs(samples: &[ActivitySample], sibling_stall: u64, min_quiet: usize, min_active: usize) -> Vec<(bool, usize, f64)> {
    let marks = progress_marks(samples, sibling_stall);
    let runs = smooth(activity_runs(samples.iter().map(|s| s.activity)), min_quiet, min_active);
    let mut start = 0;
    runs.into_iter()
        .map(|(active, len)| {
            let d = marks[start + len] - marks[start];
            start += len;
            (active, len, d)
        })
        .collect()
}

pub fn decode_bits(samples: &[ActivitySample], params: &DecodeParams) -> Vec<bool> {
    let mut bits = Vec::new();
    for (active, _, d) in timed_runs(samples, params.sibling_stall, params.min_quiet_run, params.min_active_run) {
        if active {
            let n = ((d - params.one_offset) / params.one_cycles).round().max(1.0) as usize;
            bits.extend(std::iter::repeat_n(true, n));
        } else {
            let n = ((d - params.zero_offset) / params.zero_cycles).round().max(0.0) as usize;
            bits.extend(std::iter::repeat_n(false, n));
        }
    }
    bits
}

/// Longest run in the calibration pattern. The pattern holds every pair
/// of a `1` run and a `0` run up to this length, so each fit sees all
/// sampling phases.
const CALIBRATION_MAX_RUN: usize = 12;

/// Least-squares line through `(x, y)` points.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Measures runs of a known pattern on a noise-free copy of the processor
/// and fits the decoder to them.
pub fn calibrate(profile: &LatencyProfile, cfg: &CovertConfig) -> Result<DecodeParams> {
    let mut expected = Vec::new();
    for ones in 1..=CALIBRATION_MAX_RUN {
        for zeros in 1..=CALIBRATION_MAX_RUN {
            expected.push((true, ones));
            expected.push((false, zeros));
        }
    }
    let mut pattern: Vec<bool> = expected.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect();
    pattern.push(true);
    let quiet = Arc::new(profile.noiseless());
    let (samples, _) = transmit(&quiet, cfg, &pattern, 0)?;
    // smoothing scales with the sampling density of this channel
    let half = |per_bit: f64| ((per_bit / 2.0).floor() as usize).max(1);
    let rough = half(samples.len() as f64 / pattern.len() as f64);
    let (min_quiet, min_active) = (rough, rough.max(cfg.run_threshold));
    let runs = timed_runs(&samples, profile.sibling_stall, min_quiet, min_active);
    let body: Vec<_> = runs.iter().skip_while(|r| !r.0).take(expected.len()).copied().collect();
    if body.len() < expected.len() || body.iter().zip(&expected).any(|(r, e)| r.0 != e.0) {
        return Err(Error::Data(format!(
            "calibration pattern of {} runs produced {}; the channel does not resolve single bits",
            expected.len() + 1,
            runs.len()
        )));
    }
    let points = |active: bool, len: bool| -> Vec<(f64, f64)> {
        body.iter()
            .zip(&expected)
            .filter(|(r, _)| r.0 == active)
            .map(|(r, e)| (e.1 as f64, if len { r.1 as f64 } else { r.2 }))
            .collect()
    };
    let (one_cycles, one_offset) = fit_line(&points(true, false));
    let (zero_cycles, zero_offset) = fit_line(&points(false, false));
    let samples_per_one = fit_line(&points(true, true)).0;
    let samples_per_zero = fit_line(&points(false, true)).0;
    if one_cycles <= 0.0 || zero_cycles <= 0.0 || samples_per_one <= 0.0 || samples_per_zero <= 0.0 {
        return Err(Error::Data("calibration runs do not grow with bit count".into()));
    }
    Ok(DecodeParams {
        one_cycles,
        one_offset,
        zero_cycles,
        zero_offset,
        sibling_stall: profile.sibling_stall,
        samples_per_one,
        samples_per_zero,
        min_quiet_run: min_quiet,
        min_active_run: min_active,
    })
}

/// Runs sender and receiver together; returns the receiver's samples and
/// the sender's cycle count.
pub fn transmit(profile: &Arc<LatencyProfile>, cfg: &CovertConfig, bits: &[bool], seed: u64) -> Result<(Vec<ActivitySample>, u64)> {
    cfg.validate()?;
    let mut core = CoreState::new(profile.clone(), seed);
    let mut rx = receiver(profile, Thread::T0, cfg, None)?;
    let mut tx = Sender::new(Thread::T1, bits, cfg);
    run_observed(&mut core, rx.as_mut(), &mut tx)?;
    Ok((rx.take(), core.clock(Thread::T1)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelReport {
    pub bits_sent: usize,
    pub bits_decoded: usize,
    pub sender_cycles: u64,
    pub bit_rate_kbps: f64,
    /// Edit distance between sent and decoded bits over the longer length.
    pub error_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ChannelRun {
    pub samples: Vec<ActivitySample>,
    pub decoded: Vec<bool>,
    pub report: ChannelReport,
}

pub fn bit_error_rate(sent: &[bool], decoded: &[bool]) -> f64 {
    let longest = sent.len().max(decoded.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(sent, decoded) as f64 / longest as f64
}

/// Transmits `bits` and decodes them with `params`.
pub fn run_channel(profile: &Arc<LatencyProfile>, cfg: &CovertConfig, params: &DecodeParams, bits: &[bool], seed: u64) -> Result<ChannelRun> {
    let (samples, sender_cycles) = transmit(profile, cfg, bits, seed)?;
    let decoded = decode_bits(&samples, params);
    let seconds = sender_cycles as f64 / cfg.cycles_per_second;
    let report = ChannelReport {
        bits_sent: bits.len(),
        bits_decoded: decoded.len(),
        sender_cycles,
        bit_rate_kbps: if seconds > 0.0 { bits.len() as f64 / seconds / 1000.0 } else { 0.0 },
        error_rate: bit_error_rate(bits, &decoded),
    };
    Ok(ChannelRun {
        samples,
        decoded,
        report,
    })
}
