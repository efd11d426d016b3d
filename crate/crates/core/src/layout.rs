//! Tag ranges of the simulated address space. Lines of different owners
//! never alias because their tags differ even when they share a set.

pub const ATTACKER_TAG: u64 = 0x100;
pub const SENDER_TAG: u64 = 0x200;
pub const VICTIM_TAG: u64 = 0x300;
pub const SHARED_TAG: u64 = 0x400;
pub const ORACLE_TAG: u64 = 0x500;
pub const WORKLOAD_TAG: u64 = 0x1000;
