//! Model of one physical core with two SMT threads sharing a 64-set, 8-way
//! L1 instruction cache.
//!
//! The model tracks L1i residency exactly (true LRU per set) and every other
//! level as a single "deepest known" tag per line. Probe instructions are
//! timed through a [`LatencyProfile`]; an instruction that invalidates an
//! L1i-resident line fires a self-modifying-code machine clear, which stalls
//! the sibling thread.

mod core;
mod profile;

pub use self::core::{CoreState, CounterSnapshot, TimingSample};
pub use self::profile::{KindLatency, LatencyProfile, Support, SupportTable};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of L1i sets.
pub const SETS: usize = 64;
/// Associativity of every L1i set.
pub const WAYS: usize = 8;
/// Cache line size in bytes.
pub const LINE_BYTES: u64 = 64;

/// Returns the L1i set an address maps to (bits 6..11).
pub const fn set_index(byte_address: u64) -> usize {
    ((byte_address >> 6) & (SETS as u64 - 1)) as usize
}

/// The nine x86 instructions used to test L1i residency, in the order of the
/// measurement harness options 1 through 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Load,
    Flush,
    FlushOpt,
    Store,
    LockInc,
    Prefetch,
    #[serde(rename = "prefetch-nta")]
    PrefetchNta,
    Execute,
    Clwb,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 9] = [
        ProbeKind::Load,
        ProbeKind::Flush,
        ProbeKind::FlushOpt,
        ProbeKind::Store,
        ProbeKind::LockInc,
        ProbeKind::Prefetch,
        ProbeKind::PrefetchNta,
        ProbeKind::Execute,
        ProbeKind::Clwb,
    ];

    /// Option number in the measurement harness (1-based).
    pub fn option_number(self) -> u8 {
        ProbeKind::ALL.iter().position(|k| *k == self).unwrap() as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Load => "load",
            ProbeKind::Flush => "flush",
            ProbeKind::FlushOpt => "flush-opt",
            ProbeKind::Store => "store",
            ProbeKind::LockInc => "lock-inc",
            ProbeKind::Prefetch => "prefetch",
            ProbeKind::PrefetchNta => "prefetch-nta",
            ProbeKind::Execute => "execute",
            ProbeKind::Clwb => "clwb",
        }
    }

    /// Whether an SMC conflict raised by this instruction drops the line from
    /// the L1i (the flush family). Store and lock re-fetch the line, prefetch
    /// leaves it in place.
    pub fn removes_line_on_smc(self) -> bool {
        matches!(self, ProbeKind::Flush | ProbeKind::FlushOpt | ProbeKind::Clwb)
    }

    /// Whether the instruction writes to the line. Writing needs write
    /// permission, which a shared read-only code page does not grant.
    pub fn writes_line(self) -> bool {
        matches!(self, ProbeKind::Store | ProbeKind::LockInc)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match norm.as_str() {
            "load" | "mov" => ProbeKind::Load,
            "flush" | "clflush" => ProbeKind::Flush,
            "flush-opt" | "flushopt" | "clflushopt" => ProbeKind::FlushOpt,
            "store" => ProbeKind::Store,
            "lock-inc" | "lock" | "lockinc" => ProbeKind::LockInc,
            "prefetch" => ProbeKind::Prefetch,
            "prefetch-nta" | "prefetchnta" => ProbeKind::PrefetchNta,
            "execute" | "call" => ProbeKind::Execute,
            "clwb" => ProbeKind::Clwb,
            _ => return Err(Error::Config(format!("unknown probe kind `{s}`"))),
        };
        Ok(kind)
    }
}

/// Where a line currently lives, nearest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResidencyLevel {
    L1i,
    L1d,
    L2,
    #[serde(rename = "LLC")]
    Llc,
    #[serde(rename = "DRAM")]
    Dram,
}

impl ResidencyLevel {
    pub const ALL: [ResidencyLevel; 5] = [
        ResidencyLevel::L1i,
        ResidencyLevel::L1d,
        ResidencyLevel::L2,
        ResidencyLevel::Llc,
        ResidencyLevel::Dram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResidencyLevel::L1i => "L1i",
            ResidencyLevel::L1d => "L1d",
            ResidencyLevel::L2 => "L2",
            ResidencyLevel::Llc => "LLC",
            ResidencyLevel::Dram => "DRAM",
        }
    }
}

impl fmt::Display for ResidencyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResidencyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ResidencyLevel::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown residency level `{s}`")))
    }
}

/// A cache line, identified by its L1i set and a tag unique within the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineAddr {
    pub set: u8,
    pub tag: u64,
}

impl LineAddr {
    /// # Panics
    /// If `set` is not a valid set index.
    pub fn new(set: usize, tag: u64) -> Self {
        assert!(set < SETS, "set index {set} out of range");
        LineAddr { set: set as u8, tag }
    }

    pub fn from_byte_addr(addr: u64) -> Self {
        LineAddr {
            set: set_index(addr) as u8,
            tag: addr >> 12,
        }
    }

    pub fn byte_addr(self) -> u64 {
        (self.tag << 12) | ((self.set as u64) << 6)
    }

    pub fn set_index(self) -> usize {
        self.set as usize
    }
}

impl fmt::Display for LineAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.byte_addr())
    }
}

/// One of the two hardware threads of the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Thread {
    /// Thread 0: attacker, receiver, or monitored workload.
    T0,
    /// Thread 1: victim or sender.
    T1,
}

impl Thread {
    pub fn index(self) -> usize {
        match self {
            Thread::T0 => 0,
            Thread::T1 => 1,
        }
    }

    pub fn sibling(self) -> Thread {
        match self {
            Thread::T0 => Thread::T1,
            Thread::T1 => Thread::T0,
        }
    }
}
