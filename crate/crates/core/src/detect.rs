//! Attack detection from per-window hardware counters.
//!
//! A synthetic corpus is produced by running benign and attacking programs
//! on the monitored hardware thread (T0) next to a benign sibling, and
//! snapshotting T0's counters at every window boundary. Detectors are
//! trained on an 80/20 seeded split with attacks as the positive class.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, FlushReloadSampler, PrimeProbeSampler};
use crate::error::{Error, Result};
use crate::layout;
use crate::recover::KnnModel;
use crate::sched::{run_pair_until, Program};
use crate::uarch::{CoreState, CounterSnapshot, LatencyProfile, LineAddr, ProbeKind, Thread, SETS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    BenignQuiet,
    BenignJitLike,
    AttackPnP,
    AttackFR,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 4] = [
        WorkloadKind::BenignQuiet,
        WorkloadKind::BenignJitLike,
        WorkloadKind::AttackPnP,
        WorkloadKind::AttackFR,
    ];

    pub fn label(self) -> WindowLabel {
        match self {
            WorkloadKind::BenignQuiet | WorkloadKind::BenignJitLike => WindowLabel::Benign,
            WorkloadKind::AttackPnP => WindowLabel::PrimeIProbe,
            WorkloadKind::AttackFR => WindowLabel::FlushIReload,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::BenignQuiet => "benign-quiet",
            WorkloadKind::BenignJitLike => "benign-jit-like",
            WorkloadKind::AttackPnP => "attack-pnp",
            WorkloadKind::AttackFR => "attack-fr",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown workload `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowLabel {
    Benign,
    PrimeIProbe,
    FlushIReload,
}

impl WindowLabel {
    pub fn is_attack(self) -> bool {
        self != WindowLabel::Benign
    }
}

/// Counter deltas of the monitored thread over one window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterWindow {
    pub run: usize,
    pub window_index: usize,
    pub workload: WorkloadKind,
    pub label: WindowLabel,
    pub values: CounterSnapshot,
}

impl CounterWindow {
    pub fn get(&self, counter: &str) -> Result<f64> {
        self.values
            .get(counter)
            .map(|v| v as f64)
            .ok_or_else(|| Error::Config(format!("unknown counter `{counter}`")))
    }
}

/// Counters that count cache misses; prior detectors relied on these.
pub const CACHE_MISS_COUNTERS: [&str; 2] = ["l1i_misses", "llc_misses"];

/// A benign program: walks a code footprint with some locality, retires
/// branches, touches data, and (JIT-like) occasionally patches code it has
/// just run.
#[derive(Debug, Clone)]
pub struct BenignProgram {
    thread: Thread,
    rng: ChaCha8Rng,
    footprint: Vec<LineAddr>,
    hot: usize,
    locality: f64,
    compute_mean: u64,
    /// Retired branches per compute cycle.
    branch_density: f64,
    mispredict_rate: f64,
    data_miss_rate: f64,
    /// Probability per step of a code patch, and the most lines one patch
    /// rewrites.
    patch: Option<(f64, usize)>,
    /// Line the program is most often in, if any; a Flush+iReload victim.
    shared: Option<(LineAddr, f64)>,
    recent: Vec<LineAddr>,
    next_data: u64,
}

impl BenignProgram {
    /// A random benchmark-like program. `tag_base` keeps programs on the
    /// two threads in disjoint address ranges.
    pub fn random(thread: Thread, tag_base: u64, jit: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines = rng.random_range(32..2048usize);
        let footprint = (0..lines)
            .map(|i| LineAddr::new(i % SETS, tag_base + (i / SETS) as u64))
            .collect::<Vec<_>>();
        let hot = rng.random_range(4..=lines.min(256));
        BenignProgram {
            thread,
            footprint,
            hot,
            locality: rng.random_range(0.6..0.999),
            compute_mean: rng.random_range(150..1500),
            branch_density: rng.random_range(0.05..0.8),
            // log-uniform: well-predicted loops to branchy interpreters
            mispredict_rate: rng.random_range(0.0002f64.ln()..0.05f64.ln()).exp(),
            data_miss_rate: rng.random_range(0.0..0.3),
            patch: jit.then(|| (rng.random_range(0.0005..0.003), rng.random_range(1..=16))),
            shared: None,
            recent: Vec::new(),
            next_data: 0,
            rng,
        }
    }

    /// Makes the program run `line` with probability `rate` per step.
    pub fn with_shared_line(mut self, line: LineAddr, rate: f64) -> Self {
        self.shared = Some((line, rate));
        self
    }
}

impl Program for BenignProgram {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        false
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        let t = self.thread;
        let line = match self.shared {
            Some((l, rate)) if self.rng.random_bool(rate) => l,
            _ if self.rng.random_bool(self.locality) => self.footprint[self.rng.random_range(0..self.hot)],
            _ => self.footprint[self.rng.random_range(0..self.footprint.len())],
        };
        core.execute_line(t, line);
        self.recent.push(line);
        if self.recent.len() > 16 {
            self.recent.remove(0);
        }
        if self.rng.random_bool(self.data_miss_rate) {
            // streaming data: always a fresh line
            self.next_data += 1;
            let data = LineAddr::new((self.next_data % SETS as u64) as usize, layout::WORKLOAD_TAG << 8 | self.next_data);
            core.probe_access(t, ProbeKind::Load, data)?;
        }
        if let Some((rate, max_lines)) = self.patch {
            if self.rng.random_bool(rate) {
                let n = self.rng.random_range(1..=max_lines).min(self.recent.len());
                for i in 0..n {
                    let l = self.recent[self.recent.len() - 1 - i];
                    core.probe_access(t, ProbeKind::Store, l)?;
                }
            }
        }
        let compute = self.rng.random_range(self.compute_mean / 2..=self.compute_mean * 3 / 2);
        let retired = (compute as f64 * self.branch_density).round() as u64;
        let missed = Binomial::new(retired, self.mispredict_rate).expect("rate in [0, 1]").sample(&mut self.rng);
        core.record_branches(t, retired, missed);
        core.advance_cycles(t, compute);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub window_cycles: u64,
    pub windows_per_run: usize,
    pub quiet_runs: usize,
    pub jit_runs: usize,
    pub pnp_runs: usize,
    pub fr_runs: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            window_cycles: 3_000_000,
            windows_per_run: 20,
            quiet_runs: 16,
            jit_runs: 4,
            pnp_runs: 6,
            fr_runs: 6,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_cycles == 0 || self.windows_per_run == 0 {
            return Err(Error::Config("window_cycles and windows_per_run must be >= 1".into()));
        }
        Ok(())
    }

    fn runs(&self) -> Vec<WorkloadKind> {
        let mut out = Vec::new();
        for (kind, n) in [
            (WorkloadKind::BenignQuiet, self.quiet_runs),
            (WorkloadKind::BenignJitLike, self.jit_runs),
            (WorkloadKind::AttackPnP, self.pnp_runs),
            (WorkloadKind::AttackFR, self.fr_runs),
        ] {
            out.extend(std::iter::repeat_n(kind, n));
        }
        out
    }
}

fn smc_kinds(profile: &LatencyProfile, allowed: &[ProbeKind]) -> Vec<ProbeKind> {
    allowed.iter().copied().filter(|k| profile.triggers_smc(*k)).collect()
}

/// Runs one workload of `kind` on the monitored thread for `windows`
/// windows of `window_cycles` each.
pub fn generate_workload(
    profile: &Arc<LatencyProfile>,
    kind: WorkloadKind,
    windows: usize,
    window_cycles: u64,
    run: usize,
    seed: u64,
) -> Result<Vec<CounterWindow>> {
    if windows == 0 {
        return Err(Error::Config("a workload needs at least one window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut core = CoreState::new(profile.clone(), rng.random());
    let sibling_tag = layout::WORKLOAD_TAG + 0x100;
    let mut sibling = BenignProgram::random(Thread::T1, sibling_tag, false, rng.random());
    let target_set = rng.random_range(0..SETS);
    let wait = rng.random_range(300..3000u64);
    let mut monitored: Box<dyn Program> = match kind {
        WorkloadKind::BenignQuiet | WorkloadKind::BenignJitLike => Box::new(BenignProgram::random(
            Thread::T0,
            layout::WORKLOAD_TAG,
            kind == WorkloadKind::BenignJitLike,
            rng.random(),
        )),
        WorkloadKind::AttackPnP => {
            let kinds = smc_kinds(profile, &[ProbeKind::Store, ProbeKind::LockInc, ProbeKind::Flush, ProbeKind::FlushOpt, ProbeKind::Clwb, ProbeKind::Prefetch]);
            let strategy = *kinds.get(rng.random_range(0..kinds.len().max(1))).ok_or_else(|| Error::NotApplicable {
                profile: profile.name.clone(),
                kind: ProbeKind::Store,
            })?;
            let cfg = AttackConfig::prime_probe(profile, strategy, target_set, wait)?;
            Box::new(PrimeProbeSampler::new(Thread::T0, cfg, None))
        }
        WorkloadKind::AttackFR => {
            let kinds = smc_kinds(profile, &[ProbeKind::Flush, ProbeKind::FlushOpt, ProbeKind::Clwb, ProbeKind::Prefetch]);
            let strategy = *kinds.get(rng.random_range(0..kinds.len().max(1))).ok_or_else(|| Error::NotApplicable {
                profile: profile.name.clone(),
                kind: ProbeKind::Flush,
            })?;
            let shared = LineAddr::new(target_set, layout::SHARED_TAG);
            sibling = sibling.with_shared_line(shared, rng.random_range(0.05..0.5));
            let cfg = AttackConfig::flush_reload(profile, strategy, target_set, wait)?;
            Box::new(FlushReloadSampler::new(Thread::T0, shared, cfg, None))
        }
    };
    let mut out = Vec::with_capacity(windows);
    let mut last = core.snapshot_counters(Thread::T0);
    for w in 0..windows {
        let deadline = (w as u64 + 1) * window_cycles;
        run_pair_until(&mut core, monitored.as_mut(), &mut sibling, deadline)?;
        let now = core.snapshot_counters(Thread::T0);
        out.push(CounterWindow {
            run,
            window_index: w,
            workload: kind,
            label: kind.label(),
            values: now.saturating_sub(&last),
        });
        last = now;
    }
    Ok(out)
}

/// The full labeled corpus; runs are simulated in parallel and emitted in
/// run order.
pub fn generate_corpus(profile: &Arc<LatencyProfile>, cfg: &CorpusConfig, seed: u64) -> Result<Vec<CounterWindow>> {
    cfg.validate()?;
    let runs = cfg.runs();
    let per_run: Vec<Vec<CounterWindow>> = runs
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| generate_workload(profile, kind, cfg.windows_per_run, cfg.window_cycles, i, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect::<Result<_>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    /// `counter >= threshold` on the first selected counter.
    Threshold,
    /// Best single split over the selected counters, either direction.
    Stump,
    /// k-nearest neighbors over the standardized selected counters.
    Knn,
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(DetectorKind::Threshold),
            "stump" => Ok(DetectorKind::Stump),
            "knn" => Ok(DetectorKind::Knn),
            other => Err(Error::Config(format!("unknown detector `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Split { counter: String, threshold: f64, above: bool },
    Knn { model: KnnModel, mean: Vec<f64>, scale: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub counters: Vec<String>,
    params: Params,
}

impl DetectorModel {
    /// Whether the window looks like an attack.
    pub fn predict(&self, w: &CounterWindow) -> Result<bool> {
        match &self.params {
            Params::Split { counter, threshold, above } => {
                let v = w.get(counter)?;
                Ok(if *above { v >= *threshold } else { v <= *threshold })
            }
            Params::Knn { model, mean, scale } => {
                let x = self
                    .counters
                    .iter()
                    .zip(mean.iter().zip(scale))
                    .map(|(c, (m, s))| Ok((w.get(c)? - m) / s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(model.classify(&x)? == 1)
            }
        }
    }

    /// Split parameters `(counter, threshold, attack_if_above)`, for the
    /// split-based detectors.
    pub fn split(&self) -> Option<(&str, f64, bool)> {
        match &self.params {
            Params::Split { counter, threshold, above } => Some((counter, *threshold, *above)),
            Params::Knn { .. } => None,
        }
    }
}

/// Confusion matrix and derived binary metrics (attack = positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    /// Undefined ratios (empty denominators) are 0.
    pub fn from_confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            fpr: ratio(fp, fp + tn),
        }
    }
}

/// Best split of one counter on `data` by F1, ties to the smaller
/// threshold. `above = None` tries both directions.
fn best_split(data: &[&CounterWindow], counter: &str, above: Option<bool>) -> Result<(f64, bool, f64)> {
    let mut values = data.iter().map(|w| w.get(counter)).collect::<Result<Vec<_>>>()?;
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut cands: Vec<f64> = values.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    cands.push(values[0] - 0.5);
    cands.push(values[values.len() - 1] + 0.5);
    let dirs: &[bool] = match above {
        Some(true) => &[true],
        Some(false) => &[false],
        None => &[true, false],
    };
    let mut best: Option<(f64, bool, f64)> = None;
    for &dir in dirs {
        for &t in &cands {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for w in data {
                let v = w.get(counter)?;
                let pred = if dir { v >= t } else { v <= t };
                match (pred, w.label.is_attack()) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            let f1 = Metrics::from_confusion(tp, fp, fn_, tn).f1;
            if best.is_none_or(|(bf, _, bt)| f1 > bf || (f1 == bf && t < bt)) {
                best = Some((f1, dir, t));
            }
        }
    }
    let (f1, dir, t) = best.expect("non-empty candidates");
    Ok((t, dir, f1))
}

/// Seeded 80/20 split of `windows` into (train, holdout).
pub fn split_80_20(windows: &[CounterWindow], seed: u64) -> (Vec<CounterWindow>, Vec<CounterWindow>) {
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = windows.len() * 4 / 5;
    let pick = |ix: &[usize]| ix.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

/// Fits a detector on a seeded 80% of `windows`; returns it with the
/// remaining 20%.
pub fn train_detector(windows: &[CounterWindow], counters: &[&str], kind: DetectorKind, seed: u64) -> Result<(DetectorModel, Vec<CounterWindow>)> {
    if counters.is_empty() {
        return Err(Error::Config("detector needs at least one counter".into()));
    }
    for c in counters {
        if !CounterSnapshot::NAMES.contains(c) {
            return Err(Error::Config(format!("unknown counter `{c}`")));
        }
    }
    let (train, holdout) = split_80_20(windows, seed);
    let has = |attack: bool| train.iter().any(|w| w.label.is_attack() == attack);
    if !(has(true) && has(false)) {
        return Err(Error::Data("training split needs both benign and attack windows".into()));
    }
    let model = fit(&train, counters, kind)?;
    Ok((model, holdout))
}

/// Fits a detector on all of `train`.
pub fn fit(train: &[CounterWindow], counters: &[&str], kind: DetectorKind) -> Result<DetectorModel> {
    let refs: Vec<&CounterWindow> = train.iter().collect();
    let names: Vec<String> = counters.iter().map(|c| c.to_string()).collect();
    let params = match kind {
        DetectorKind::Threshold => {
            let (threshold, above, _) = best_split(&refs, counters[0], Some(true))?;
            Params::Split {
                counter: names[0].clone(),
                threshold,
                above,
            }
        }
        DetectorKind::Stump => {
            let mut best: Option<(f64, String, f64, bool)> = None;
            for c in counters {
                let (t, dir, f1) = best_split(&refs, c, None)?;
                if best.as_ref().is_none_or(|b| f1 > b.0) {
                    best = Some((f1, c.to_string(), t, dir));
                }
            }
            let (_, counter, threshold, above) = best.expect("non-empty counters");
            Params::Split { counter, threshold, above }
        }
        DetectorKind::Knn => {
            let rows = train
                .iter()
                .map(|w| counters.iter().map(|c| w.get(c)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..counters.len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let scale: Vec<f64> = (0..counters.len())
                .map(|j| {
                    let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                    if var > 0.0 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            let data = rows
                .iter()
                .zip(train)
                .map(|(r, w)| {
                    let x = r.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect();
                    (x, usize::from(w.label.is_attack()))
                })
                .collect::<Vec<_>>();
            let k = 3.min(if data.len() % 2 == 1 { data.len() } else { data.len() - 1 });
            Params::Knn {
                model: KnnModel::train(data, k)?,
                mean,
                scale,
            }
        }
    };
    Ok(DetectorModel {
        kind,
        counters: names,
        params,
    })
}

pub fn evaluate(model: &DetectorModel, holdout: &[CounterWindow]) -> Result<Metrics> {
    if holdout.is_empty() {
        return Err(Error::Data("holdout is empty".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for w in holdout {
        match (model.predict(w)?, w.label.is_attack()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_confusion(tp, fp, fn_, tn))
}

/// Holdout metrics of one (counter, detector) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterScore {
    pub counter: String,
    pub detector: DetectorKind,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Scores every counter alone with `kind`, best F1 first (ties keep the
/// counter order).
pub fn rank_counters(windows: &[CounterWindow], kind: DetectorKind, seed: u64) -> Result<Vec<CounterScore>> {
    let mut out = CounterSnapshot::NAMES
        .iter()
        .map(|c| {
            let (model, holdout) = train_detector(windows, &[c], kind, seed)?;
            Ok(CounterScore {
                counter: c.to_string(),
                detector: kind,
                metrics: evaluate(&model, &holdout)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.metrics.f1.total_cmp(&a.metrics.f1));
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRow {
    run: usize,
    window_index: usize,
    workload: WorkloadKind,
    label: WindowLabel,
    machine_clears_count: u64,
    machine_clears_smc: u64,
    l1i_misses: u64,
    llc_misses: u64,
    branch_retired: u64,
    branch_mispredicts: u64,
    stalls_total: u64,
}

pub fn write_corpus_csv<W: Write>(out: W, windows: &[CounterWindow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for x in windows {
        let v = x.values;
        w.serialize(CorpusRow {
            run: x.run,
            window_index: x.window_index,
            workload: x.workload,
            label: x.label,
            machine_clears_count: v.machine_clears_count,
            machine_clears_smc: v.machine_clears_smc,
            l1i_misses: v.l1i_misses,
            llc_misses: v.llc_misses,
            branch_retired: v.branch_retired,
            branch_mispredicts: v.branch_mispredicts,
            stalls_total: v.stalls_total,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_csv<R: Read>(input: R) -> Result<Vec<CounterWindow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<CorpusRow>()
        .map(|row| {
            let row = row?;
            if row.workload.label() != row.label {
                return Err(Error::Data(format!("label {:?} does not match workload {}", row.label, row.workload)));
            }
            Ok(CounterWindow {
                run: row.run,
                window_index: row.window_index,
                workload: row.workload,
                label: row.label,
                values: CounterSnapshot {
                    machine_clears_count: row.machine_clears_count,
                    machine_clears_smc: row.machine_clears_smc,
                    l1i_misses: row.l1i_misses,
                    llc_misses: row.llc_misses,
                    branch_retired: row.branch_retired,
                    branch_mispredicts: row.branch_mispredicts,
                    stalls_total: row.stalls_total,
                },
            })
        })
        .collect()
}

/// Seed of the shipped corpus.
pub const SHIPPED_CORPUS_SEED: u64 = 2024;
/// Profile of the shipped corpus.
pub const SHIPPED_CORPUS_PROFILE: &str = "intel-cascade-lake";

/// The corpus shipped with the crate, generated by
/// `generate_corpus(SHIPPED_CORPUS_PROFILE, CorpusConfig::default(), SHIPPED_CORPUS_SEED)`.
pub fn shipped_corpus() -> Result<Vec<CounterWindow>> {
    read_corpus_csv(include_str!("../data/corpus.csv").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(label: WindowLabel, smc: u64, l1i: u64) -> CounterWindow {
        let workload = match label {
            WindowLabel::Benign => WorkloadKind::BenignQuiet,
            WindowLabel::PrimeIProbe => WorkloadKind::AttackPnP,
            WindowLabel::FlushIReload => WorkloadKind::AttackFR,
        };
        CounterWindow {
            run: 0,
            window_index: 0,
            workload,
            label,
            values: CounterSnapshot {
                machine_clears_smc: smc,
                l1i_misses: l1i,
                ..CounterSnapshot::default()
            },
        }
    }

    #[test]
    fn hand_computed_confusion() {
        let m = Metrics::from_confusion(9, 1, 1, 9);
        assert_eq!(m.precision, 0.9);
        assert_eq!(m.recall, 0.9);
        assert!((m.f1 - 0.9).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.9);
        assert_eq!(m.fpr, 0.1);
    }

    #[test]
    fn empty_denominators_are_zero() {
        let m = Metrics::from_confusion(0, 0, 0, 5);
        assert_eq!((m.precision, m.recall, m.f1, m.fpr), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 1.0);
    }

    fn separated() -> Vec<CounterWindow> {
        let mut v = Vec::new();
        for i in 0..50 {
            v.push(win(WindowLabel::Benign, 0, 1000 + i));
            v.push(win(WindowLabel::PrimeIProbe, 5000 + i, 1000 + 2 * i));
        }
        v
    }

    #[test]
    fn separated_data_is_perfect() {
        let data = separated();
        for kind in [DetectorKind::Threshold, DetectorKind::Stump, DetectorKind::Knn] {
            let (model, holdout) = train_detector(&data, &["machine_clears_smc"], kind, 1).unwrap();
            let m = evaluate(&model, &holdout).unwrap();
            assert_eq!((m.f1, m.fpr), (1.0, 0.0), "{kind:?}");
        }
    }

    #[test]
    fn stump_learns_direction() {
        let mut data = Vec::new();
        for i in 0..20 {
            data.push(win(WindowLabel::Benign, 0, 500 + i));
            data.push(win(WindowLabel::FlushIReload, 0, 10 + i));
        }
        let model = fit(&data, &["l1i_misses"], DetectorKind::Stump).unwrap();
        let (_, t, above) = model.split().unwrap();
        assert!(!above && t > 29.0 && t < 500.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = (0..10).map(|i| win(WindowLabel::Benign, 0, i)).collect();
        assert!(matches!(
            train_detector(&data, &["machine_clears_smc"], DetectorKind::Threshold, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn unknown_counter_is_rejected() {
        assert!(train_detector(&separated(), &["cycles"], DetectorKind::Stump, 0).is_err());
    }

    #[test]
    fn split_is_seeded_80_20() {
        let data = separated();
        let (a, b) = split_80_20(&data, 3);
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(split_80_20(&data, 3), (a, b));
    }

    #[test]
    fn quiet_workload_never_fires_smc() {
        let p = Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap());
        let w = generate_workload(&p, WorkloadKind::BenignQuiet, 3, 500_000, 0, 9).unwrap();
        assert!(w.iter().all(|w| w.values.machine_clears_smc == 0));
    }

    #[test]
    fn prime_probe_fires_eight_per_quiet_probe() {
        let p = Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap());
        let w = generate_workload(&p, WorkloadKind::AttackPnP, 2, 500_000, 0, 4).unwrap();
        for x in &w {
            let v = x.values;
            assert!(v.machine_clears_smc > 100);
            assert!(v.machine_clears_count >= v.machine_clears_smc);
        }
    }

    #[test]
    fn corpus_csv_round_trip() {
        let p = Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap());
        let cfg = CorpusConfig {
            window_cycles: 200_000,
            windows_per_run: 2,
            quiet_runs: 1,
            jit_runs: 1,
            pnp_runs: 1,
            fr_runs: 1,
        };
        let c = generate_corpus(&p, &cfg, 5).unwrap();
        assert_eq!(c.len(), 8);
        let mut buf = Vec::new();
        write_corpus_csv(&mut buf, &c).unwrap();
        assert_eq!(read_corpus_csv(buf.as_slice()).unwrap(), c);
        assert_eq!(generate_corpus(&p, &cfg, 5).unwrap(), c);
    }
}
