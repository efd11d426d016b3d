use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::align::align_by;
use crate::error::{Error, Result};
use crate::victims::ExponentSecret;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Symbol {
    Zero,
    One,
    Unknown,
}

impl Symbol {
    pub fn from_bit(bit: bool) -> Symbol {
        if bit {
            Symbol::One
        } else {
            Symbol::Zero
        }
    }

    pub fn char(self) -> char {
        match self {
            Symbol::Zero => '0',
            Symbol::One => '1',
            Symbol::Unknown => 'X',
        }
    }

    /// Equality where `Unknown` matches anything.
    pub fn compatible(self, other: Symbol) -> bool {
        self == other || self == Symbol::Unknown || other == Symbol::Unknown
    }
}

/// A recovered exponent, most significant bit first; `X` marks bits the
/// channel cannot reveal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct DecodedKey {
    pub symbols: Vec<Symbol>,
}

impl DecodedKey {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn unknown_count(&self) -> usize {
        self.symbols.iter().filter(|s| **s == Symbol::Unknown).count()
    }

    pub fn unknown_fraction(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.unknown_count() as f64 / self.symbols.len() as f64
    }

    pub fn push_str(&mut self, pattern: &str) {
        self.symbols.extend(pattern.chars().map(|c| match c {
            '0' => Symbol::Zero,
            '1' => Symbol::One,
            _ => Symbol::Unknown,
        }));
    }

    /// Truncates or pads with `pad` to `len` symbols.
    pub fn resize(&mut self, len: usize, pad: Symbol) {
        self.symbols.resize(len, pad);
    }
}

impl From<&ExponentSecret> for DecodedKey {
    fn from(secret: &ExponentSecret) -> Self {
        DecodedKey {
            symbols: secret.bits().iter().map(|b| Symbol::from_bit(*b)).collect(),
        }
    }
}

impl fmt::Display for DecodedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.symbols.iter().try_for_each(|s| write!(f, "{}", s.char()))
    }
}

impl FromStr for DecodedKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(bad) = s.chars().find(|c| !matches!(c, '0' | '1' | 'X')) {
            return Err(Error::Config(format!("invalid key symbol `{bad}`")));
        }
        let mut key = DecodedKey::default();
        key.push_str(s);
        Ok(key)
    }
}

/// How much of a secret a decoded key reveals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakageScore {
    pub truth_bits: usize,
    /// Truth bits aligned to an identical known symbol.
    pub correct: usize,
    /// Truth bits aligned to `X`.
    pub unknown: usize,
}

impl LeakageScore {
    /// Correct bits over all bits the key claims to know (percent).
    pub fn leakage_percent(&self) -> f64 {
        let known = self.truth_bits - self.unknown;
        if known == 0 {
            return 0.0;
        }
        100.0 * self.correct as f64 / known as f64
    }

    /// Correct bits over the whole secret (percent).
    pub fn recovered_percent(&self) -> f64 {
        if self.truth_bits == 0 {
            return 0.0;
        }
        100.0 * self.correct as f64 / self.truth_bits as f64
    }
}

/// Aligns `decoded` to `truth` (with `X` matching either bit) and counts
/// the outcome for every truth bit.
pub fn score_key(decoded: &DecodedKey, truth: &ExponentSecret) -> LeakageScore {
    let truth_syms = DecodedKey::from(truth).symbols;
    let pairs = align_by(&truth_syms, &decoded.symbols, |t, d| t.compatible(*d));
    let mut score = LeakageScore {
        truth_bits: truth_syms.len(),
        correct: 0,
        unknown: 0,
    };
    for (t, d) in pairs {
        if let (Some(t), Some(d)) = (t, d) {
            let sym = decoded.symbols[d];
            if sym == Symbol::Unknown {
                score.unknown += 1;
            } else if sym == truth_syms[t] {
                score.correct += 1;
            }
        }
    }
    score
}

/// Leakage rate in percent: correctly recovered bits over the bits that are
/// not `X`.
pub fn leakage_rate(decoded: &DecodedKey, truth: &ExponentSecret) -> f64 {
    score_key(decoded, truth).leakage_percent()
}

fn majority(zeros: usize, ones: usize) -> Symbol {
    match zeros.cmp(&ones) {
        std::cmp::Ordering::Greater => Symbol::Zero,
        std::cmp::Ordering::Less => Symbol::One,
        std::cmp::Ordering::Equal => Symbol::Unknown,
    }
}

fn tally(votes: &mut [usize; 2], sym: Symbol) {
    match sym {
        Symbol::Zero => votes[0] += 1,
        Symbol::One => votes[1] += 1,
        Symbol::Unknown => {}
    }
}

/// Star consensus around `reference`. Each reference position takes the
/// majority of the symbols aligned to it. Symbols a strict majority of
/// traces insert before a reference position (or at the end) are inserted
/// too, with the median run length and a per-offset vote.
fn vote(reference: &[Symbol], traces: &[DecodedKey]) -> Vec<Symbol> {
    let mut votes = vec![[0usize; 2]; reference.len()];
    // Per slot (before position i; the last slot is the tail): the
    // inserted runs, one per trace that inserted there.
    let mut inserts: Vec<Vec<Vec<Symbol>>> = vec![Vec::new(); reference.len() + 1];
    for t in traces {
        let mut run: Vec<Symbol> = Vec::new();
        for (r, d) in align_by(reference, &t.symbols, |a, b| a.compatible(*b)) {
            match (r, d) {
                (None, Some(d)) => run.push(t.symbols[d]),
                (Some(r), d) => {
                    if !run.is_empty() {
                        inserts[r].push(std::mem::take(&mut run));
                    }
                    if let Some(d) = d {
                        tally(&mut votes[r], t.symbols[d]);
                    }
                }
                (None, None) => {}
            }
        }
        if !run.is_empty() {
            inserts[reference.len()].push(run);
        }
    }
    let mut out = Vec::with_capacity(reference.len());
    for (slot, runs) in inserts.iter_mut().enumerate() {
        if 2 * runs.len() > traces.len() {
            runs.sort_by_key(|r| r.len());
            let len = runs[runs.len() / 2].len();
            for off in 0..len {
                let mut v = [0usize; 2];
                for r in runs.iter().filter(|r| r.len() > off) {
                    tally(&mut v, r[off]);
                }
                out.push(majority(v[0], v[1]));
            }
        }
        if let Some([z, o]) = votes.get(slot) {
            out.push(majority(*z, *o));
        }
    }
    out
}

/// Combines several decodings of the same secret: each trace is aligned to
/// a reference and every reference position takes the majority bit. The
/// first reference is the longest trace; a second round aligns against the
/// first consensus. Ties stay `X`.
pub fn aggregate_traces(traces: &[DecodedKey], ground_length: usize) -> DecodedKey {
    let Some(longest) = traces.iter().max_by_key(|t| t.len()) else {
        return DecodedKey {
            symbols: vec![Symbol::Unknown; ground_length],
        };
    };
    let first = vote(&longest.symbols, traces);
    let mut symbols = vote(&first, traces);
    symbols.resize(ground_length, Symbol::Unknown);
    DecodedKey { symbols }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> DecodedKey {
        s.parse().unwrap()
    }

    fn secret(s: &str) -> ExponentSecret {
        s.parse().unwrap()
    }

    #[test]
    fn perfect_key_leaks_everything() {
        let t = secret("1011001");
        assert_eq!(leakage_rate(&key("1011001"), &t), 100.0);
        assert_eq!(score_key(&key("1011001"), &t).recovered_percent(), 100.0);
    }

    #[test]
    fn unknown_bits_leave_denominator() {
        let t = secret("110011");
        let s = score_key(&key("1XX011"), &t);
        assert_eq!(s.unknown, 2);
        assert_eq!(s.correct, 4);
        assert_eq!(s.leakage_percent(), 100.0);
        assert!((s.recovered_percent() - 66.666).abs() < 0.01);
    }

    #[test]
    fn all_unknown_scores_zero() {
        assert_eq!(leakage_rate(&key("XXXX"), &secret("1010")), 0.0);
    }

    #[test]
    fn dropped_bit_costs_one() {
        let s = score_key(&key("10110"), &secret("101100"));
        assert_eq!(s.correct, 5);
    }

    #[test]
    fn aggregation_outvotes_single_errors() {
        let traces = vec![key("10110011"), key("10100011"), key("10110111"), key("1011011")];
        let agg = aggregate_traces(&traces, 8);
        assert_eq!(agg.to_string(), "10110011");
    }

    #[test]
    fn aggregation_of_nothing_is_unknown() {
        assert_eq!(aggregate_traces(&[], 3).to_string(), "XXX");
    }

    #[test]
    fn key_parsing_rejects_junk() {
        assert!("10a".parse::<DecodedKey>().is_err());
        assert_eq!(key("1X0").unknown_count(), 1);
    }
}
