//! Deterministic interleaving of the two hardware threads.
//!
//! Programs advance in atomic steps. The driver always steps the program
//! whose thread clock is lowest, so cross-thread effects (evictions, SMC
//! stalls) land in clock order up to one step of skew.

use crate::error::Result;
use crate::uarch::{CoreState, Thread};

pub trait Program {
    fn thread(&self) -> Thread;
    fn is_done(&self) -> bool;
    /// Executes one atomic step. Must advance the program's thread clock.
    fn step(&mut self, core: &mut CoreState) -> Result<()>;
}

/// A program that samples indefinitely.
pub trait Observer: Program {
    /// Clock at which the most recent observation started.
    fn last_observation(&self) -> Option<u64>;
}

fn earlier(core: &CoreState, a: Thread, b: Thread) -> bool {
    let (ca, cb) = (core.clock(a), core.clock(b));
    ca < cb || (ca == cb && a.index() <= b.index())
}

/// Runs one program to completion with the sibling thread idle.
pub fn run_solo(core: &mut CoreState, program: &mut dyn Program) -> Result<()> {
    while !program.is_done() {
        program.step(core)?;
    }
    Ok(())
}

/// Runs two programs on different threads until both finish.
pub fn run_pair(core: &mut CoreState, a: &mut dyn Program, b: &mut dyn Program) -> Result<()> {
    assert_ne!(a.thread(), b.thread(), "programs must run on different threads");
    loop {
        match (a.is_done(), b.is_done()) {
            (true, true) => return Ok(()),
            (false, true) => a.step(core)?,
            (true, false) => b.step(core)?,
            (false, false) => {
                if earlier(core, a.thread(), b.thread()) {
                    a.step(core)?
                } else {
                    b.step(core)?
                }
            }
        }
    }
}

/// Steps two programs in clock order until both thread clocks reach
/// `deadline` or the lagging program finishes.
pub fn run_pair_until(core: &mut CoreState, a: &mut dyn Program, b: &mut dyn Program, deadline: u64) -> Result<()> {
    assert_ne!(a.thread(), b.thread(), "programs must run on different threads");
    loop {
        let next: &mut dyn Program = if earlier(core, a.thread(), b.thread()) { &mut *a } else { &mut *b };
        if core.clock(next.thread()) >= deadline || next.is_done() {
            return Ok(());
        }
        next.step(core)?;
    }
}

/// Runs `target` to completion while `observer` samples alongside it, then
/// lets the observer finish one observation that starts after the target's
/// last step.
pub fn run_observed(core: &mut CoreState, observer: &mut dyn Observer, target: &mut dyn Program) -> Result<()> {
    assert_ne!(observer.thread(), target.thread(), "programs must run on different threads");
    while !target.is_done() {
        if earlier(core, observer.thread(), target.thread()) {
            observer.step(core)?;
        } else {
            target.step(core)?;
        }
    }
    let end = core.clock(target.thread());
    while observer.last_observation().is_none_or(|c| c < end) && !observer.is_done() {
        observer.step(core)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uarch::LatencyProfile;
    use std::sync::Arc;

    struct Ticker {
        thread: Thread,
        period: u64,
        left: usize,
        log: Vec<(usize, u64)>,
    }

    impl Program for Ticker {
        fn thread(&self) -> Thread {
            self.thread
        }
        fn is_done(&self) -> bool {
            self.left == 0
        }
        fn step(&mut self, core: &mut CoreState) -> Result<()> {
            self.log.push((self.thread.index(), core.clock(self.thread)));
            core.advance_cycles(self.thread, self.period);
            self.left -= 1;
            Ok(())
        }
    }

    #[test]
    fn steps_in_clock_order() {
        let p = Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap());
        let mut core = CoreState::new(p, 0);
        let mut a = Ticker { thread: Thread::T0, period: 3, left: 5, log: vec![] };
        let mut b = Ticker { thread: Thread::T1, period: 5, left: 3, log: vec![] };
        run_pair(&mut core, &mut a, &mut b).unwrap();
        assert_eq!(core.clock(Thread::T0), 15);
        assert_eq!(core.clock(Thread::T1), 15);
        assert_eq!(a.log.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 3, 6, 9, 12]);
        assert_eq!(b.log.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 5, 10]);
    }

    #[test]
    fn runs_to_deadline() {
        let p = Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap());
        let mut core = CoreState::new(p, 0);
        let mut a = Ticker { thread: Thread::T0, period: 3, left: 100, log: vec![] };
        let mut b = Ticker { thread: Thread::T1, period: 5, left: 100, log: vec![] };
        run_pair_until(&mut core, &mut a, &mut b, 20).unwrap();
        assert_eq!(core.clock(Thread::T0), 21);
        assert_eq!(core.clock(Thread::T1), 20);
    }
}
