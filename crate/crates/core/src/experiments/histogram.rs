use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout;
use crate::uarch::{CoreState, LatencyProfile, LineAddr, ProbeKind, ResidencyLevel, Support, Thread};

/// One timed probe of a line placed at a known level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HistogramRow {
    pub kind: ProbeKind,
    pub level: ResidencyLevel,
    pub sample: usize,
    pub cycles: u64,
    pub smc_fired: bool,
}

/// Summary of one (kind, level) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramCell {
    pub kind: ProbeKind,
    pub level: ResidencyLevel,
    pub samples: usize,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub variance: f64,
    pub smc_fraction: f64,
}

/// Times `samples` probes of every kind against a line prepared at every
/// residency level. Each cell runs on its own core seeded from `seed` and
/// the cell's position, so rows are reproducible and independent of
/// scheduling. Rows are ordered by kind, then level, then sample.
pub fn timing_histogram(profile: &Arc<LatencyProfile>, kinds: &[ProbeKind], samples: usize, seed: u64) -> Result<Vec<HistogramRow>> {
    if samples == 0 {
        return Err(Error::Config("histogram needs at least one sample per cell".into()));
    }
    if let Some(&kind) = kinds.iter().find(|&&k| profile.support(k) == Support::Unsupported) {
        return Err(Error::Unsupported {
            profile: profile.name.clone(),
            kind,
        });
    }
    let cells: Vec<(usize, ProbeKind, ResidencyLevel)> = kinds
        .iter()
        .flat_map(|&k| ResidencyLevel::ALL.into_iter().map(move |l| (k, l)))
        .enumerate()
        .map(|(i, (k, l))| (i, k, l))
        .collect();
    let per_cell: Vec<Result<Vec<HistogramRow>>> = cells
        .into_par_iter()
        .map(|(i, kind, level)| {
            let mut core = CoreState::new(Arc::clone(profile), seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64));
            let line = LineAddr::new(0, layout::ATTACKER_TAG);
            (0..samples)
                .map(|sample| {
                    core.prepare_line(line, level);
                    let s = core.probe_access(Thread::T0, kind, line)?;
                    Ok(HistogramRow {
                        kind,
                        level,
                        sample,
                        cycles: s.cycles,
                        smc_fired: s.smc_fired,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(kinds.len() * ResidencyLevel::ALL.len() * samples);
    for cell in per_cell {
        rows.extend(cell?);
    }
    Ok(rows)
}

/// Per-cell statistics of [`timing_histogram`] rows, in row order.
pub fn summarize_histogram(rows: &[HistogramRow]) -> Vec<HistogramCell> {
    rows.chunk_by(|a, b| a.kind == b.kind && a.level == b.level)
        .map(|cell| {
            let n = cell.len() as f64;
            let mean = cell.iter().map(|r| r.cycles as f64).sum::<f64>() / n;
            let variance = cell.iter().map(|r| (r.cycles as f64 - mean).powi(2)).sum::<f64>() / n;
            HistogramCell {
                kind: cell[0].kind,
                level: cell[0].level,
                samples: cell.len(),
                min: cell.iter().map(|r| r.cycles).min().unwrap_or(0),
                max: cell.iter().map(|r| r.cycles).max().unwrap_or(0),
                mean,
                variance,
                smc_fraction: cell.iter().filter(|r| r.smc_fired).count() as f64 / n,
            }
        })
        .collect()
}
