//! Modular-exponentiation victims whose control flow depends on a secret
//! exponent.
//!
//! Each victim runs on one hardware thread as a [`Program`]. Every
//! operation executes a code line (so the attacker can see it in the L1i)
//! and then occupies the thread for the operation's configured cost.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout;
use crate::sched::{run_solo, Program};
use crate::uarch::{CoreState, LineAddr, Thread, SETS};

/// Secret exponent, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExponentSecret {
    bits: Vec<bool>,
}

impl ExponentSecret {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Config("exponent must have at least one bit".into()));
        }
        Ok(ExponentSecret { bits })
    }

    /// A random exponent of exactly `bit_length` bits (top bit set).
    pub fn generate(bit_length: usize, seed: u64) -> Result<Self> {
        if bit_length < 8 {
            return Err(Error::Config(format!("bit length {bit_length} must be >= 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits: Vec<bool> = (0..bit_length).map(|_| rng.random()).collect();
        bits[0] = true;
        Ok(ExponentSecret { bits })
    }

    pub fn from_u64(value: u64) -> Result<Self> {
        if value == 0 {
            return Err(Error::Config("exponent must be nonzero".into()));
        }
        let len = 64 - value.leading_zeros() as usize;
        Ok(ExponentSecret {
            bits: (0..len).rev().map(|i| value >> i & 1 == 1).collect(),
        })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl fmt::Display for ExponentSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ExponentSecret {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("invalid exponent digit `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ExponentSecret::new(bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExpOp {
    Square,
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpEvent {
    pub op: ExpOp,
    /// Victim clock when the operation started.
    pub clock: u64,
    /// Odd window value a sliding-window multiply uses.
    pub window_value: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentiationTrace {
    pub events: Vec<ExpEvent>,
    pub ground_truth: ExponentSecret,
    /// Modular result, when the victim computes one.
    pub result: Option<u64>,
}

pub fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

/// Right-to-left binary exponentiation; a reference independent of the
/// sliding-window code.
pub fn modpow(base: u64, exponent: u64, modulus: u64) -> u64 {
    assert!(modulus > 0, "modulus must be positive");
    let mut result = 1 % modulus;
    let mut b = base % modulus;
    let mut e = exponent;
    while e > 0 {
        if e & 1 == 1 {
            result = mul_mod(result, b, modulus);
        }
        b = mul_mod(b, b, modulus);
        e >>= 1;
    }
    result
}

/// Cycles per square and per multiply of the square-and-multiply victim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareMultiplyCosts {
    pub square: u64,
    pub multiply: u64,
}

impl Default for SquareMultiplyCosts {
    fn default() -> Self {
        SquareMultiplyCosts {
            square: 2984,
            multiply: 746,
        }
    }
}

/// Left-to-right square-and-multiply: a square per bit, then a multiply
/// for every set bit.
pub fn square_multiply_schedule(secret: &ExponentSecret) -> Vec<ExpOp> {
    let mut ops = Vec::with_capacity(secret.len() * 2);
    for &bit in secret.bits() {
        ops.push(ExpOp::Square);
        if bit {
            ops.push(ExpOp::Multiply);
        }
    }
    ops
}

/// Code line of the multiply routine; the square routine lives half the
/// cache away.
pub fn square_multiply_lines(mul_set: usize) -> (LineAddr, LineAddr) {
    let square = LineAddr::new((mul_set + SETS / 2) % SETS, layout::VICTIM_TAG);
    let multiply = LineAddr::new(mul_set, layout::VICTIM_TAG);
    (square, multiply)
}

/// Square-and-multiply exponentiation as a schedulable program.
#[derive(Debug, Clone)]
pub struct SquareMultiplyVictim {
    thread: Thread,
    secret: ExponentSecret,
    costs: SquareMultiplyCosts,
    square_line: LineAddr,
    multiply_line: LineAddr,
    /// Support routines run at the start of every operation.
    helpers: Vec<LineAddr>,
    ops: Vec<ExpOp>,
    events: Vec<ExpEvent>,
}

impl SquareMultiplyVictim {
    pub fn new(thread: Thread, secret: ExponentSecret, mul_set: usize, costs: SquareMultiplyCosts) -> Result<Self> {
        if mul_set >= SETS {
            return Err(Error::Config(format!("multiply set {mul_set} out of range")));
        }
        if costs.square == 0 || costs.multiply == 0 {
            return Err(Error::Config("operation costs must be > 0".into()));
        }
        let (square_line, multiply_line) = square_multiply_lines(mul_set);
        let ops = square_multiply_schedule(&secret);
        Ok(SquareMultiplyVictim {
            thread,
            secret,
            costs,
            square_line,
            multiply_line,
            helpers: Vec::new(),
            ops,
            events: Vec::new(),
        })
    }

    /// Victim of a specific library build: its own square line and helper
    /// routines.
    pub fn for_library(thread: Thread, secret: ExponentSecret, lib: &LibraryBuild, costs: SquareMultiplyCosts) -> Result<Self> {
        let mut v = SquareMultiplyVictim::new(thread, secret, lib.mul_set, costs)?;
        v.square_line = LineAddr::new(lib.square_set, layout::VICTIM_TAG);
        v.helpers = lib.helper_sets.iter().map(|&s| LineAddr::new(s, layout::VICTIM_TAG + 1)).collect();
        Ok(v)
    }

    pub fn into_trace(self) -> ExponentiationTrace {
        ExponentiationTrace {
            events: self.events,
            ground_truth: self.secret,
            result: None,
        }
    }
}

impl Program for SquareMultiplyVictim {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        self.events.len() == self.ops.len()
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        let op = self.ops[self.events.len()];
        let (line, cost) = match op {
            ExpOp::Square => (self.square_line, self.costs.square),
            ExpOp::Multiply => (self.multiply_line, self.costs.multiply),
        };
        let start = core.clock(self.thread);
        core.execute_line(self.thread, line);
        for &h in &self.helpers {
            core.execute_line(self.thread, h);
        }
        finish_op(core, self.thread, start, cost);
        self.events.push(ExpEvent {
            op,
            clock: start,
            window_value: None,
        });
        Ok(())
    }
}

/// Occupies `thread` until `start + jitter(cost)`.
fn finish_op(core: &mut CoreState, thread: Thread, start: u64, cost: u64) {
    let target = start + core.jitter(cost);
    let now = core.clock(thread);
    if target > now {
        core.advance_cycles(thread, target - now);
    }
}

/// Runs the square-and-multiply victim alone with default costs.
pub fn run_square_multiply(core: &mut CoreState, thread: Thread, secret: &ExponentSecret, mul_set: usize) -> Result<ExponentiationTrace> {
    let mut victim = SquareMultiplyVictim::new(thread, secret.clone(), mul_set, SquareMultiplyCosts::default())?;
    run_solo(core, &mut victim)?;
    Ok(victim.into_trace())
}

/// Code layout of one build of a cryptographic library: the cache sets of
/// its square, multiply and helper routines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LibraryBuild {
    pub id: usize,
    pub name: String,
    pub square_set: usize,
    pub mul_set: usize,
    pub helper_sets: Vec<usize>,
}

/// Builds of the two fingerprinted library families.
pub const LIBRARY_FAMILIES: [(&str, usize); 2] = [("libgcrypt", 14), ("openssl", 20)];

/// Deterministic catalog of distinct library builds. Every build places
/// its routines in distinct sets, and no two builds share a layout.
pub fn library_catalog() -> Vec<LibraryBuild> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4c49_4253);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (family, count) in LIBRARY_FAMILIES {
        for v in 0..count {
            loop {
                let mut sets = rand::seq::index::sample(&mut rng, SETS, 5).into_vec();
                let (square_set, mul_set) = (sets[0], sets[1]);
                sets.drain(..2);
                sets.sort_unstable();
                if seen.insert((square_set, mul_set, sets.clone())) {
                    out.push(LibraryBuild {
                        id: out.len(),
                        name: format!("{family}-{v:02}"),
                        square_set,
                        mul_set,
                        helper_sets: sets,
                    });
                    break;
                }
            }
        }
    }
    out
}

/// One pass of the sliding-window loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WindowStep {
    /// A zero bit: one square.
    Zero,
    /// A window of `len` bits, both ends set: `len` squares and one
    /// multiply by the precomputed power `value`.
    Window { len: usize, value: u64 },
}

impl WindowStep {
    pub fn bit_len(self) -> usize {
        match self {
            WindowStep::Zero => 1,
            WindowStep::Window { len, .. } => len,
        }
    }
}

/// Splits an exponent into sliding-window steps, scanning from the top bit.
pub fn sliding_window_schedule(secret: &ExponentSecret, window_max: usize) -> Result<Vec<WindowStep>> {
    if !(1..=6).contains(&window_max) {
        return Err(Error::Config(format!("window size {window_max} must be in 1..=6")));
    }
    let bits = secret.bits();
    let mut steps = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if !bits[i] {
            steps.push(WindowStep::Zero);
            i += 1;
            continue;
        }
        let mut len = 1;
        for j in 1..window_max {
            if i + j >= bits.len() {
                break;
            }
            if bits[i + j] {
                len = j + 1;
            }
        }
        let value = bits[i..i + len].iter().fold(0u64, |acc, b| acc << 1 | *b as u64);
        steps.push(WindowStep::Window { len, value });
        i += len;
    }
    Ok(steps)
}

/// Sliding-window modular exponentiation over the given schedule.
pub fn sliding_window_modpow(base: u64, secret: &ExponentSecret, modulus: u64, window_max: usize) -> Result<u64> {
    if modulus == 0 {
        return Err(Error::Config("modulus must be positive".into()));
    }
    let table = odd_powers(base, modulus, window_max);
    let mut r = 1 % modulus;
    for step in sliding_window_schedule(secret, window_max)? {
        match step {
            WindowStep::Zero => r = mul_mod(r, r, modulus),
            WindowStep::Window { len, value } => {
                for _ in 0..len {
                    r = mul_mod(r, r, modulus);
                }
                r = mul_mod(r, table[(value >> 1) as usize], modulus);
            }
        }
    }
    Ok(r)
}

/// `base^1, base^3, ..., base^(2^w - 1)` modulo `modulus`.
fn odd_powers(base: u64, modulus: u64, window_max: usize) -> Vec<u64> {
    let b = base % modulus;
    let b2 = mul_mod(b, b, modulus);
    let mut table = vec![b];
    for _ in 1..(1usize << (window_max - 1)) {
        let last = *table.last().unwrap();
        table.push(mul_mod(last, b2, modulus));
    }
    table
}

/// Cycles per operation of the sliding-window victim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowCosts {
    pub square: u64,
    pub multiply: u64,
    /// Scanning cost per window bit beyond the first.
    pub per_window_bit: u64,
}

impl Default for WindowCosts {
    fn default() -> Self {
        WindowCosts {
            square: 2000,
            multiply: 6000,
            per_window_bit: 2000,
        }
    }
}

impl WindowCosts {
    /// Costs for a group of `group_bits` bits, proportional to the 1024-bit
    /// defaults.
    pub fn for_group(group_bits: u32) -> Self {
        let d = WindowCosts::default();
        let s = |c: u64| c * group_bits as u64 / 1024;
        WindowCosts {
            square: s(d.square),
            multiply: s(d.multiply),
            per_window_bit: s(d.per_window_bit),
        }
    }

    /// Nominal duration of one loop pass.
    pub fn step_cycles(&self, step: WindowStep) -> u64 {
        match step {
            WindowStep::Zero => self.square,
            WindowStep::Window { len, .. } => {
                len as u64 * self.square + self.multiply + (len as u64 - 1) * self.per_window_bit
            }
        }
    }
}

/// Code lines of the sliding-window victim. The loop line runs once per
/// pass and once more when the loop exits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLines {
    pub loop_line: LineAddr,
    pub square_line: LineAddr,
    pub multiply_line: LineAddr,
}

impl WindowLines {
    pub fn new(loop_set: usize) -> Result<Self> {
        if loop_set >= SETS {
            return Err(Error::Config(format!("loop set {loop_set} out of range")));
        }
        Ok(WindowLines {
            loop_line: LineAddr::new(loop_set, layout::VICTIM_TAG),
            square_line: LineAddr::new((loop_set + 21) % SETS, layout::VICTIM_TAG),
            multiply_line: LineAddr::new((loop_set + 42) % SETS, layout::VICTIM_TAG),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingOp {
    op: ExpOp,
    opens_step: bool,
    scan_bits: usize,
    window_value: Option<u64>,
}

/// Sliding-window exponentiation as a schedulable program.
#[derive(Debug, Clone)]
pub struct SlidingWindowVictim {
    thread: Thread,
    secret: ExponentSecret,
    costs: WindowCosts,
    lines: WindowLines,
    ops: Vec<PendingOp>,
    next: usize,
    exited: bool,
    events: Vec<ExpEvent>,
    result: Option<u64>,
}

impl SlidingWindowVictim {
    pub fn new(
        thread: Thread,
        secret: ExponentSecret,
        window_max: usize,
        lines: WindowLines,
        costs: WindowCosts,
        arithmetic: Option<(u64, u64)>,
    ) -> Result<Self> {
        if costs.square == 0 || costs.multiply == 0 {
            return Err(Error::Config("operation costs must be > 0".into()));
        }
        let mut ops = Vec::new();
        for step in sliding_window_schedule(&secret, window_max)? {
            match step {
                WindowStep::Zero => ops.push(PendingOp {
                    op: ExpOp::Square,
                    opens_step: true,
                    scan_bits: 0,
                    window_value: None,
                }),
                WindowStep::Window { len, value } => {
                    for k in 0..len {
                        ops.push(PendingOp {
                            op: ExpOp::Square,
                            opens_step: k == 0,
                            scan_bits: if k == 0 { len - 1 } else { 0 },
                            window_value: None,
                        });
                    }
                    ops.push(PendingOp {
                        op: ExpOp::Multiply,
                        opens_step: false,
                        scan_bits: 0,
                        window_value: Some(value),
                    });
                }
            }
        }
        let result = match arithmetic {
            Some((base, modulus)) => Some(sliding_window_modpow(base, &secret, modulus, window_max)?),
            None => None,
        };
        Ok(SlidingWindowVictim {
            thread,
            secret,
            costs,
            lines,
            ops,
            next: 0,
            exited: false,
            events: Vec::new(),
            result,
        })
    }

    pub fn into_trace(self) -> ExponentiationTrace {
        ExponentiationTrace {
            events: self.events,
            ground_truth: self.secret,
            result: self.result,
        }
    }
}

impl Program for SlidingWindowVictim {
    fn thread(&self) -> Thread {
        self.thread
    }

    fn is_done(&self) -> bool {
        self.exited
    }

    fn step(&mut self, core: &mut CoreState) -> Result<()> {
        let t = self.thread;
        let Some(op) = self.ops.get(self.next).copied() else {
            core.execute_line(t, self.lines.loop_line);
            self.exited = true;
            return Ok(());
        };
        let start = core.clock(t);
        let mut cost = 0;
        if op.opens_step {
            core.execute_line(t, self.lines.loop_line);
            cost += op.scan_bits as u64 * self.costs.per_window_bit;
        }
        let line = match op.op {
            ExpOp::Square => {
                cost += self.costs.square;
                self.lines.square_line
            }
            ExpOp::Multiply => {
                cost += self.costs.multiply;
                self.lines.multiply_line
            }
        };
        core.execute_line(t, line);
        finish_op(core, t, start, cost);
        self.events.push(ExpEvent {
            op: op.op,
            clock: start,
            window_value: op.window_value,
        });
        self.next += 1;
        Ok(())
    }
}

/// Runs the sliding-window victim alone and returns its trace, including
/// the modular result `base^secret mod modulus`.
pub fn run_sliding_window(
    core: &mut CoreState,
    thread: Thread,
    secret: &ExponentSecret,
    window_max: usize,
    loop_set: usize,
    base: u64,
    modulus: u64,
) -> Result<ExponentiationTrace> {
    let mut victim = SlidingWindowVictim::new(
        thread,
        secret.clone(),
        window_max,
        WindowLines::new(loop_set)?,
        WindowCosts::default(),
        Some((base, modulus)),
    )?;
    run_solo(core, &mut victim)?;
    Ok(victim.into_trace())
}

/// Parameters of the server-side SRP premaster computation
/// `S = (A * v^u)^b mod N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrpParams {
    pub modulus: u64,
    pub client_public: u64,
    pub verifier: u64,
    pub scramble: u64,
    pub server_secret: ExponentSecret,
    /// Group size; sets the exponent length and the operation costs.
    pub group_bits: u32,
}

/// Largest prime below 2^61.
pub const SRP_MODULUS: u64 = (1 << 61) - 1;

pub const SRP_GROUP_SIZES: [u32; 4] = [1024, 2048, 4096, 6144];

impl SrpParams {
    pub fn generate(group_bits: u32, seed: u64) -> Result<Self> {
        if group_bits < 8 {
            return Err(Error::Config(format!("group size {group_bits} too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5352_5000);
        let n = SRP_MODULUS;
        Ok(SrpParams {
            modulus: n,
            client_public: rng.random_range(2..n),
            verifier: rng.random_range(2..n),
            scramble: rng.random_range(1..n),
            server_secret: ExponentSecret::generate(group_bits as usize, seed)?,
            group_bits,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.modulus;
        if n < 3 {
            return Err(Error::Config("SRP modulus must be > 2".into()));
        }
        if !(1 < self.client_public && self.client_public < n) {
            return Err(Error::Config("client public value must lie in (1, N)".into()));
        }
        if !(1 < self.verifier && self.verifier < n) {
            return Err(Error::Config("verifier must lie in (1, N)".into()));
        }
        Ok(())
    }

    /// `A * v^u mod N`, the base of the secret exponentiation.
    pub fn base(&self) -> u64 {
        mul_mod(self.client_public, modpow(self.verifier, self.scramble, self.modulus), self.modulus)
    }
}

/// Window size of the SRP server exponentiation.
pub const SRP_WINDOW: usize = 6;

/// The SRP victim program: sliding-window exponentiation of `A * v^u` by
/// the server secret, with costs scaled to the group size.
pub fn srp_victim(thread: Thread, params: &SrpParams, loop_set: usize) -> Result<SlidingWindowVictim> {
    params.validate()?;
    SlidingWindowVictim::new(
        thread,
        params.server_secret.clone(),
        SRP_WINDOW,
        WindowLines::new(loop_set)?,
        WindowCosts::for_group(params.group_bits),
        Some((params.base(), params.modulus)),
    )
}

/// Computes the premaster secret on `thread`; returns it with the trace.
pub fn srp_server_key(core: &mut CoreState, thread: Thread, params: &SrpParams, loop_set: usize) -> Result<(u64, ExponentiationTrace)> {
    let mut victim = srp_victim(thread, params, loop_set)?;
    run_solo(core, &mut victim)?;
    let trace = victim.into_trace();
    Ok((trace.result.expect("srp victim computes a result"), trace))
}
