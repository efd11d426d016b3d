//! One function per subcommand. Each writes its CSV files into the run's
//! output directory, then prints a one-line summary.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use smcsim::covert::{calibrate, run_channel, Channel};
use smcsim::detect::{generate_corpus, rank_counters, shipped_corpus, write_corpus_csv, DetectorKind};
use smcsim::experiments::{attack_rsa_key, attack_srp_key, fingerprint_experiment, summarize_histogram, timing_histogram, FingerprintConfig, SrpConfig};
use smcsim::ispectre::{leak_secret, observe_support, SpectreVictim};
use smcsim::uarch::{CoreState, ProbeKind, Support, SupportTable, Thread};
use smcsim::Error;

use crate::config::{CovertSection, DetectSection, HistogramSection, IspectreSection, RsaSection};
use crate::Run;

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> anyhow::Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Seed of the `i`-th independent trial of a run.
fn trial_seed(run: &Run, i: usize) -> u64 {
    run.seed.wrapping_add(i as u64)
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

fn channel_name(c: Channel) -> &'static str {
    match c {
        Channel::PrimeProbe => "prime-probe",
        Channel::FlushReload => "flush-reload",
    }
}

fn support_name(s: Support) -> &'static str {
    match s {
        Support::Smc => "smc",
        Support::Timing => "timing",
        Support::None => "none",
        Support::Unsupported => "unsupported",
    }
}

fn detector_name(d: DetectorKind) -> &'static str {
    match d {
        DetectorKind::Threshold => "threshold",
        DetectorKind::Stump => "stump",
        DetectorKind::Knn => "knn",
    }
}

#[derive(Serialize)]
struct HistogramCsv {
    kind: &'static str,
    level: String,
    sample: usize,
    cycles: u64,
    smc_fired: bool,
}

#[derive(Serialize)]
struct HistogramSummaryCsv {
    kind: &'static str,
    level: String,
    samples: usize,
    min: u64,
    max: u64,
    mean: f64,
    variance: f64,
    smc_fraction: f64,
}

pub fn histogram(run: &Run, sec: &HistogramSection) -> anyhow::Result<()> {
    let kinds: Vec<ProbeKind> = if sec.kinds.is_empty() {
        ProbeKind::ALL.into_iter().filter(|k| run.profile.support(*k) != Support::Unsupported).collect()
    } else {
        sec.kinds.clone()
    };
    let rows = timing_histogram(&run.profile, &kinds, sec.samples, run.seed)?;
    let cells = summarize_histogram(&rows);
    let csv_rows: Vec<HistogramCsv> = rows
        .iter()
        .map(|r| HistogramCsv {
            kind: r.kind.name(),
            level: r.level.to_string(),
            sample: r.sample,
            cycles: r.cycles,
            smc_fired: r.smc_fired,
        })
        .collect();
    let summary: Vec<HistogramSummaryCsv> = cells
        .iter()
        .map(|c| HistogramSummaryCsv {
            kind: c.kind.name(),
            level: c.level.to_string(),
            samples: c.samples,
            min: c.min,
            max: c.max,
            mean: c.mean,
            variance: c.variance,
            smc_fraction: c.smc_fraction,
        })
        .collect();
    write_csv(&run.out, "histogram.csv", &csv_rows)?;
    write_csv(&run.out, "summary.csv", &summary)?;
    println!("histogram: {} kinds x {} levels x {} samples on {}", kinds.len(), cells.len() / kinds.len().max(1), sec.samples, run.profile.name);
    Ok(())
}

#[derive(Serialize)]
struct CovertSampleCsv {
    trial: usize,
    index: usize,
    clock: u64,
    cycles: u64,
    activity: bool,
    slow_hits: u32,
}

#[derive(Serialize)]
struct CovertBitCsv {
    trial: usize,
    position: usize,
    sent: Option<u8>,
    decoded: Option<u8>,
}

#[derive(Serialize)]
struct CovertSummaryCsv {
    trial: usize,
    seed: u64,
    channel: &'static str,
    strategy: &'static str,
    bits_sent: usize,
    bits_decoded: usize,
    sender_cycles: u64,
    bit_rate_kbps: f64,
    error_rate: f64,
}

pub fn covert(run: &Run, sec: &CovertSection) -> anyhow::Result<()> {
    if sec.bits == 0 || sec.trials == 0 {
        return Err(config_error("covert bits and trials must be >= 1"));
    }
    let cfg = &sec.config;
    let params = calibrate(&run.profile, cfg)?;
    let trials = (0..sec.trials)
        .into_par_iter()
        .map(|t| {
            let seed = trial_seed(run, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..sec.bits).map(|_| rng.random()).collect();
            run_channel(&run.profile, cfg, &params, &bits, seed).map(|r| (seed, bits, r))
        })
        .collect::<smcsim::Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let mut bits = Vec::new();
    let mut summary = Vec::new();
    for (t, (seed, sent, r)) in trials.iter().enumerate() {
        samples.extend(r.samples.iter().map(|s| CovertSampleCsv {
            trial: t,
            index: s.index,
            clock: s.clock,
            cycles: s.cycles,
            activity: s.activity,
            slow_hits: s.slow_hits,
        }));
        bits.extend((0..sent.len().max(r.decoded.len())).map(|i| CovertBitCsv {
            trial: t,
            position: i,
            sent: sent.get(i).map(|b| u8::from(*b)),
            decoded: r.decoded.get(i).map(|b| u8::from(*b)),
        }));
        summary.push(CovertSummaryCsv {
            trial: t,
            seed: *seed,
            channel: channel_name(cfg.channel),
            strategy: cfg.strategy.name(),
            bits_sent: r.report.bits_sent,
            bits_decoded: r.report.bits_decoded,
            sender_cycles: r.report.sender_cycles,
            bit_rate_kbps: r.report.bit_rate_kbps,
            error_rate: r.report.error_rate,
        });
    }
    write_csv(&run.out, "samples.csv", &samples)?;
    write_csv(&run.out, "bits.csv", &bits)?;
    write_csv(&run.out, "summary.csv", &summary)?;
    println!(
        "covert {}/{}: {} trials, mean error {:.4}, mean rate {:.1} kbps",
        channel_name(cfg.channel),
        cfg.strategy,
        summary.len(),
        mean(summary.iter().map(|s| s.error_rate)),
        mean(summary.iter().map(|s| s.bit_rate_kbps)),
    );
    Ok(())
}

#[derive(Serialize)]
struct RsaTraceCsv {
    key_seed: u64,
    trace: usize,
    truth_bits: usize,
    correct: usize,
    unknown: usize,
    recovered_percent: f64,
}

#[derive(Serialize)]
struct RsaKeyCsv {
    key_seed: u64,
    mean_single_percent: f64,
    truth_bits: usize,
    correct: usize,
    unknown: usize,
    recovered_percent: f64,
    aggregated_key: String,
}

#[derive(Serialize)]
struct RsaSummaryCsv {
    strategy: &'static str,
    keys: usize,
    traces: usize,
    key_bits: usize,
    mean_single_percent: f64,
    mean_aggregated_percent: f64,
    exact_keys: usize,
}

pub fn rsa(run: &Run, sec: &RsaSection) -> anyhow::Result<()> {
    if sec.keys == 0 {
        return Err(config_error("rsa keys must be >= 1"));
    }
    let results = (0..sec.keys)
        .into_par_iter()
        .map(|k| attack_rsa_key(&run.profile, &sec.config, trial_seed(run, k)))
        .collect::<smcsim::Result<Vec<_>>>()?;
    let traces: Vec<RsaTraceCsv> = results
        .iter()
        .flat_map(|r| {
            r.single.iter().enumerate().map(|(t, s)| RsaTraceCsv {
                key_seed: r.key_seed,
                trace: t,
                truth_bits: s.truth_bits,
                correct: s.correct,
                unknown: s.unknown,
                recovered_percent: s.recovered_percent(),
            })
        })
        .collect();
    let keys: Vec<RsaKeyCsv> = results
        .iter()
        .map(|r| RsaKeyCsv {
            key_seed: r.key_seed,
            mean_single_percent: r.mean_single_percent(),
            truth_bits: r.aggregated.truth_bits,
            correct: r.aggregated.correct,
            unknown: r.aggregated.unknown,
            recovered_percent: r.aggregated.recovered_percent(),
            aggregated_key: r.aggregated_key.clone(),
        })
        .collect();
    let summary = RsaSummaryCsv {
        strategy: sec.config.strategy.name(),
        keys: keys.len(),
        traces: sec.config.traces,
        key_bits: sec.config.key_bits,
        mean_single_percent: mean(keys.iter().map(|k| k.mean_single_percent)),
        mean_aggregated_percent: mean(keys.iter().map(|k| k.recovered_percent)),
        exact_keys: keys.iter().filter(|k| k.correct == k.truth_bits).count(),
    };
    write_csv(&run.out, "traces.csv", &traces)?;
    write_csv(&run.out, "keys.csv", &keys)?;
    write_csv(&run.out, "summary.csv", &[&summary])?;
    println!(
        "rsa: {} keys, single trace {:.1}%, {} traces aggregated {:.1}%, {} exact",
        summary.keys, summary.mean_single_percent, summary.traces, summary.mean_aggregated_percent, summary.exact_keys
    );
    Ok(())
}

#[derive(Serialize)]
struct SrpKeyCsv {
    key_seed: u64,
    group_bits: u32,
    truth_bits: usize,
    correct: usize,
    unknown: usize,
    leakage_percent: f64,
    unknown_fraction: f64,
    result_ok: bool,
    decoded: String,
}

#[derive(Serialize)]
struct SrpSummaryCsv {
    strategy: &'static str,
    group_bits: u32,
    keys: usize,
    mean_leakage_percent: f64,
    mean_unknown_fraction: f64,
    results_ok: usize,
}

pub fn srp(run: &Run, cfg: &SrpConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    let results = (0..cfg.keys)
        .into_par_iter()
        .map(|k| attack_srp_key(&run.profile, cfg, trial_seed(run, k)))
        .collect::<smcsim::Result<Vec<_>>>()?;
    let keys: Vec<SrpKeyCsv> = results
        .into_iter()
        .map(|r| SrpKeyCsv {
            key_seed: r.key_seed,
            group_bits: r.group_bits,
            truth_bits: r.score.truth_bits,
            correct: r.score.correct,
            unknown: r.score.unknown,
            leakage_percent: r.leakage_percent,
            unknown_fraction: r.unknown_fraction,
            result_ok: r.result_ok,
            decoded: r.decoded,
        })
        .collect();
    let summary = SrpSummaryCsv {
        strategy: cfg.strategy.name(),
        group_bits: cfg.group_bits,
        keys: keys.len(),
        mean_leakage_percent: mean(keys.iter().map(|k| k.leakage_percent)),
        mean_unknown_fraction: mean(keys.iter().map(|k| k.unknown_fraction)),
        results_ok: keys.iter().filter(|k| k.result_ok).count(),
    };
    write_csv(&run.out, "keys.csv", &keys)?;
    write_csv(&run.out, "summary.csv", &[&summary])?;
    println!(
        "srp {}-bit group: {} keys, leakage {:.1}%, unknown {:.1}%",
        summary.group_bits,
        summary.keys,
        summary.mean_leakage_percent,
        100.0 * summary.mean_unknown_fraction
    );
    Ok(())
}

#[derive(Serialize)]
struct LeakedByteCsv {
    offset: usize,
    secret: u8,
    leaked: Option<u8>,
    correct: bool,
}

#[derive(Serialize)]
struct SupportCsv {
    processor: String,
    kind: &'static str,
    table: Option<&'static str>,
    observed: &'static str,
}

#[derive(Serialize)]
struct LeakSummaryCsv {
    strategy: &'static str,
    secret_len: usize,
    correct: usize,
    success_percent: f64,
    attacker_cycles: u64,
    bytes_per_second: f64,
}

pub fn ispectre(run: &Run, sec: &IspectreSection) -> anyhow::Result<()> {
    if sec.secret_len == 0 || sec.array_len == 0 {
        return Err(config_error("ispectre secret_len and array_len must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let secret: Vec<u8> = (0..sec.secret_len).map(|_| rng.random()).collect();
    let public: Vec<u8> = (0..sec.array_len).map(|i| i as u8).collect();
    let mut victim = SpectreVictim::new(Thread::T1, public, &secret, sec.config.speculative_window)?;
    let mut core = CoreState::new(run.profile.clone(), run.seed);
    let report = leak_secret(&mut victim, &mut core, Thread::T0, &sec.config)?;

    let all_bytes: Vec<u8> = (0..=255).collect();
    let table = SupportTable::builtin();
    let support = ProbeKind::ALL
        .par_iter()
        .map(|&kind| {
            let mut core = CoreState::new(run.profile.clone(), run.seed);
            Ok(SupportCsv {
                processor: run.profile.name.clone(),
                kind: kind.name(),
                table: table.get(&run.profile.name, kind).map(support_name),
                observed: support_name(observe_support(&mut core, kind, &all_bytes)?),
            })
        })
        .collect::<smcsim::Result<Vec<_>>>()?;

    let bytes: Vec<LeakedByteCsv> = secret
        .iter()
        .zip(&report.bytes)
        .enumerate()
        .map(|(offset, (&s, &leaked))| LeakedByteCsv {
            offset,
            secret: s,
            leaked,
            correct: leaked == Some(s),
        })
        .collect();
    let summary = LeakSummaryCsv {
        strategy: sec.config.strategy.name(),
        secret_len: sec.secret_len,
        correct: report.correct,
        success_percent: report.success_percent(),
        attacker_cycles: report.attacker_cycles,
        bytes_per_second: report.bytes_per_second,
    };
    write_csv(&run.out, "bytes.csv", &bytes)?;
    write_csv(&run.out, "support.csv", &support)?;
    write_csv(&run.out, "summary.csv", &[&summary])?;
    println!(
        "ispectre {}: {}/{} bytes ({:.1}%), {:.0} bytes/s",
        summary.strategy, summary.correct, summary.secret_len, summary.success_percent, summary.bytes_per_second
    );
    Ok(())
}

#[derive(Serialize)]
struct RankingCsv {
    detector: &'static str,
    rank: usize,
    counter: String,
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    fpr: f64,
}

pub fn detect(run: &Run, sec: &DetectSection) -> anyhow::Result<()> {
    if sec.detectors.is_empty() {
        return Err(config_error("detect needs at least one detector"));
    }
    let windows = if sec.regenerate {
        generate_corpus(&run.profile, &sec.corpus, run.seed)?
    } else {
        shipped_corpus()?
    };
    let mut ranking = Vec::new();
    for &kind in &sec.detectors {
        for (rank, s) in rank_counters(&windows, kind, run.seed)?.into_iter().enumerate() {
            let m = s.metrics;
            ranking.push(RankingCsv {
                detector: detector_name(kind),
                rank: rank + 1,
                counter: s.counter,
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
                tn: m.tn,
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                fpr: m.fpr,
            });
        }
    }
    let path = run.out.join("corpus.csv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_corpus_csv(BufWriter::new(file), &windows)?;
    write_csv(&run.out, "ranking.csv", &ranking)?;
    for best in ranking.iter().filter(|r| r.rank == 1) {
        println!("detect {}: best counter {} (f1 {:.3}) over {} windows", best.detector, best.counter, best.f1, windows.len());
    }
    Ok(())
}

pub fn fingerprint(run: &Run, cfg: &FingerprintConfig) -> anyhow::Result<()> {
    let report = fingerprint_experiment(&run.profile, cfg, run.seed)?;
    write_csv(&run.out, "summary.csv", &[&report])?;
    println!(
        "fingerprint: library accuracy {:.3}, multiply-set accuracy {:.3} over {} tests",
        report.library_accuracy, report.mul_set_accuracy, report.tests
    );
    Ok(())
}
