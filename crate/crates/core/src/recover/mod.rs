//! Turning attack traces back into secrets.

mod align;
mod fingerprint;
mod key;
mod knn;
mod rsa;
mod srp;

pub use align::{align_by, edit_distance_by, levenshtein, AlignedPair};
pub use fingerprint::{detect_multiplication_set, fingerprint_library, set_features, ActivityVector, MUL_SET_LABEL};
pub use key::{aggregate_traces, leakage_rate, score_key, DecodedKey, LeakageScore, Symbol};
pub use knn::KnnModel;
pub use rsa::{activity_starts, decode_rsa_trace, sample_period, zeros_for_gap, RsaDecodeParams};
pub use srp::{decode_srp_trace, loop_gaps, srp_patterns, SrpPattern};

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attacks::ActivitySample;
use crate::error::Result;

/// One row of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_index: usize,
    pub clock: u64,
    pub cycles: u64,
    pub activity: u8,
    pub slow_hits: u32,
    /// Clock distance to the previous sample.
    pub gap_cycles: u64,
}

pub fn write_trace_csv<W: Write>(out: W, samples: &[ActivitySample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut prev = None;
    for s in samples {
        w.serialize(TraceRow {
            sample_index: s.index,
            clock: s.clock,
            cycles: s.cycles,
            activity: s.activity as u8,
            slow_hits: s.slow_hits,
            gap_cycles: prev.map_or(0, |p| s.clock - p),
        })?;
        prev = Some(s.clock);
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<ActivitySample>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<TraceRow>()
        .map(|row| {
            let row = row?;
            Ok(ActivitySample {
                index: row.sample_index,
                clock: row.clock,
                cycles: row.cycles,
                activity: row.activity != 0,
                slow_hits: row.slow_hits,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trip() {
        let samples: Vec<_> = (0..5)
            .map(|i| ActivitySample {
                index: i,
                clock: 100 * i as u64 + 7,
                cycles: 300 - i as u64,
                activity: i % 2 == 0,
                slow_hits: i as u32,
            })
            .collect();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_index,clock,cycles,activity,slow_hits,gap_cycles"));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), samples);
    }
}
