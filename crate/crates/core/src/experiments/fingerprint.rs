//! Library fingerprinting and multiplication-set detection from per-set
//! Prime+iProbe activity.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{ActivitySample, AttackConfig, PrimeProbeSampler};
use crate::error::{Error, Result};
use crate::recover::{detect_multiplication_set, fingerprint_library, set_features, ActivityVector, KnnModel, MUL_SET_LABEL};
use crate::sched::run_pair;
use crate::uarch::{CoreState, LatencyProfile, ProbeKind, Thread, SETS};
use crate::victims::{library_catalog, ExponentSecret, LibraryBuild, SquareMultiplyCosts, SquareMultiplyVictim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerprintConfig {
    pub strategy: ProbeKind,
    pub wait_iterations: u64,
    pub samples_per_set: usize,
    pub key_bits: usize,
    pub train_per_library: usize,
    pub test_per_library: usize,
    pub k: usize,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            strategy: ProbeKind::Store,
            wait_iterations: 700,
            samples_per_set: 200,
            key_bits: 256,
            train_per_library: 3,
            test_per_library: 2,
            k: 3,
        }
    }
}

impl FingerprintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_set < 2 {
            return Err(Error::Config("samples_per_set must be >= 2".into()));
        }
        if self.train_per_library == 0 || self.test_per_library == 0 {
            return Err(Error::Config("train and test measurements per library must be >= 1".into()));
        }
        if self.key_bits < 8 {
            return Err(Error::Config("key_bits must be >= 8".into()));
        }
        Ok(())
    }
}

/// Monitors every set, one at a time, while `lib` exponentiates a fresh
/// key. Returns one trace per set.
pub fn monitor_sets(profile: &Arc<LatencyProfile>, cfg: &FingerprintConfig, lib: &LibraryBuild, seed: u64) -> Result<Vec<Vec<ActivitySample>>> {
    cfg.validate()?;
    let secret = ExponentSecret::generate(cfg.key_bits, seed)?;
    (0..SETS)
        .map(|set| {
            let attack = AttackConfig::prime_probe(profile, cfg.strategy, set, cfg.wait_iterations)?;
            let mut core = CoreState::new(profile.clone(), seed.wrapping_mul(SETS as u64).wrapping_add(set as u64));
            let mut sampler = PrimeProbeSampler::new(Thread::T0, attack, Some(cfg.samples_per_set));
            let mut victim = SquareMultiplyVictim::for_library(Thread::T1, secret.clone(), lib, SquareMultiplyCosts::default())?;
            core.advance_cycles(Thread::T1, super::VICTIM_LEAD_CYCLES);
            run_pair(&mut core, &mut sampler, &mut victim)?;
            Ok(sampler.into_samples())
        })
        .collect()
}

struct Measurement {
    library: usize,
    per_set: Vec<Vec<ActivitySample>>,
}

fn measure_all(profile: &Arc<LatencyProfile>, cfg: &FingerprintConfig, libs: &[LibraryBuild], per_library: usize, seed: u64) -> Result<Vec<Measurement>> {
    let jobs: Vec<(usize, usize)> = (0..libs.len()).flat_map(|l| (0..per_library).map(move |m| (l, m))).collect();
    jobs.par_iter()
        .map(|&(l, m)| {
            let s = seed ^ ((l as u64) << 32 | m as u64);
            Ok(Measurement {
                library: l,
                per_set: monitor_sets(profile, cfg, &libs[l], s)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FingerprintReport {
    pub libraries: usize,
    pub library_accuracy: f64,
    pub mul_set_accuracy: f64,
    /// Test measurements with no positive set.
    pub mul_set_not_found: usize,
    pub tests: usize,
}

/// Trains the library classifier on activity vectors and the set
/// classifier on per-set features, then scores both on fresh measurements.
pub fn fingerprint_experiment(profile: &Arc<LatencyProfile>, cfg: &FingerprintConfig, seed: u64) -> Result<FingerprintReport> {
    cfg.validate()?;
    let libs = library_catalog();
    let train = measure_all(profile, cfg, &libs, cfg.train_per_library, seed)?;
    let test = measure_all(profile, cfg, &libs, cfg.test_per_library, !seed)?;

    let mut lib_data = Vec::new();
    let mut set_data = Vec::new();
    for m in &train {
        lib_data.push((ActivityVector::from_traces(&m.per_set)?.features(), m.library));
        for (set, trace) in m.per_set.iter().enumerate() {
            let label = usize::from(set == libs[m.library].mul_set) * MUL_SET_LABEL;
            set_data.push((set_features(trace), label));
        }
    }
    let lib_model = KnnModel::train(lib_data, cfg.k)?;
    let set_model = KnnModel::train(set_data, cfg.k)?;

    let (mut lib_ok, mut set_ok, mut not_found) = (0, 0, 0);
    for m in &test {
        if fingerprint_library(&lib_model, &ActivityVector::from_traces(&m.per_set)?)? == m.library {
            lib_ok += 1;
        }
        match detect_multiplication_set(&m.per_set, &set_model)? {
            Some(s) if s == libs[m.library].mul_set => set_ok += 1,
            Some(_) => {}
            None => not_found += 1,
        }
    }
    let n = test.len();
    Ok(FingerprintReport {
        libraries: libs.len(),
        library_accuracy: lib_ok as f64 / n as f64,
        mul_set_accuracy: set_ok as f64 / n as f64,
        mul_set_not_found: not_found,
        tests: n,
    })
}
