//! End-to-end case studies: victim, attack and recovery wired together.

/// The attacker is already sampling when a monitored victim starts.
const VICTIM_LEAD_CYCLES: u64 = 20_000;

mod fingerprint;
mod histogram;
mod rsa;
mod srp;

pub use fingerprint::{fingerprint_experiment, monitor_sets, FingerprintConfig, FingerprintReport};
pub use histogram::{summarize_histogram, timing_histogram, HistogramCell, HistogramRow};
pub use rsa::{attack_rsa_key, capture_rsa_trace, RsaConfig, RsaKeyResult};
pub use srp::{attack_srp_key, capture_srp_trace, SrpConfig, SrpKeyResult};
