use serde::Serialize;

use super::key::DecodedKey;
use crate::attacks::ActivitySample;
use crate::victims::{WindowCosts, WindowStep};

/// The seven loop-pass shapes of a width-6 sliding window, with their
/// nominal durations. Inner window bits are unknowable and print as `X`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SrpPattern {
    pub pattern: String,
    pub cycles: u64,
}

pub fn srp_patterns(costs: &WindowCosts) -> Vec<SrpPattern> {
    let mut out = vec![SrpPattern {
        pattern: "0".into(),
        cycles: costs.step_cycles(WindowStep::Zero),
    }];
    for len in 1..=6 {
        let pattern = if len == 1 {
            "1".to_string()
        } else {
            format!("1{}1", "X".repeat(len - 2))
        };
        out.push(SrpPattern {
            pattern,
            cycles: costs.step_cycles(WindowStep::Window { len, value: 1 }),
        });
    }
    out
}

/// Victim cycles between consecutive loop-line activations. Every active
/// sample is one activation: loop passes can be closer than two samples,
/// and the next prime always evicts the victim line. The attacker's own
/// SMC stalls on the victim are subtracted.
pub fn loop_gaps(samples: &[ActivitySample], sibling_stall: u64) -> Vec<f64> {
    let starts: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].activity).collect();
    starts
        .windows(2)
        .map(|w| {
            let dt = samples[w[1]].clock - samples[w[0]].clock;
            let stalls: u64 = samples[w[0]..w[1]].iter().map(|s| s.slow_hits as u64).sum();
            dt as f64 - (stalls * sibling_stall) as f64
        })
        .collect()
}

/// Maps each gap to the pattern of nearest duration. Gaps beyond 1.5 times
/// the longest pattern are outliers and decode to a run of `X` sized by the
/// square cost.
pub fn decode_srp_trace(gaps: &[f64], costs: &WindowCosts) -> DecodedKey {
    let patterns = srp_patterns(costs);
    let longest = patterns.iter().map(|p| p.cycles).max().unwrap() as f64;
    let mut key = DecodedKey::default();
    for &g in gaps {
        if g > 1.5 * longest {
            let n = (g / costs.square.max(1) as f64).round().max(1.0) as usize;
            key.push_str(&"X".repeat(n));
            continue;
        }
        let best = patterns
            .iter()
            .min_by(|a, b| (a.cycles as f64 - g).abs().total_cmp(&(b.cycles as f64 - g).abs()))
            .unwrap();
        key.push_str(&best.pattern);
    }
    key
}
