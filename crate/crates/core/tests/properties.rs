use std::sync::Arc;

use proptest::prelude::*;

use smcsim::attacks::{build_eviction_set, prime, probe, AttackConfig, Classifier};
use smcsim::recover::{aggregate_traces, score_key, DecodedKey, KnnModel};
use smcsim::uarch::{CoreState, LatencyProfile, LineAddr, ProbeKind, Thread};
use smcsim::victims::{run_sliding_window, sliding_window_schedule, ExpOp, ExponentSecret, WindowCosts, WindowStep};

fn cascade() -> Arc<LatencyProfile> {
    Arc::new(LatencyProfile::builtin("intel-cascade-lake").unwrap().noiseless())
}

const SMC_KINDS: [ProbeKind; 6] = [
    ProbeKind::Flush,
    ProbeKind::FlushOpt,
    ProbeKind::Store,
    ProbeKind::LockInc,
    ProbeKind::Prefetch,
    ProbeKind::Clwb,
];

#[test]
fn quiet_probe_sees_nothing_and_one_victim_line_evicts_one_way() {
    let p = cascade();
    for kind in SMC_KINDS {
        for set in [0, 17, 63] {
            let cfg = AttackConfig::prime_probe(&p, kind, set, 100).unwrap();
            let ev = build_eviction_set(set).unwrap();
            let mut core = CoreState::new(p.clone(), 0);
            prime(&mut core, Thread::T0, &ev);
            let r = probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
            assert!(!r.activity, "{kind} set {set}");

            let mut core = CoreState::new(p.clone(), 0);
            prime(&mut core, Thread::T0, &ev);
            core.execute_line(Thread::T1, LineAddr::new(set, 0xdead));
            let r = probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
            assert!(r.activity, "{kind} set {set}");
            assert_eq!(r.resident.iter().filter(|x| !**x).count(), 1, "{kind} set {set}");
        }
    }
}

#[test]
fn store_probes_keep_lines_and_flush_probes_drop_them() {
    let p = cascade();
    let ev = build_eviction_set(3).unwrap();
    for (kind, refires) in [(ProbeKind::Store, true), (ProbeKind::LockInc, true), (ProbeKind::Flush, false), (ProbeKind::FlushOpt, false)] {
        let cfg = AttackConfig::prime_probe(&p, kind, 3, 0).unwrap();
        let mut core = CoreState::new(p.clone(), 0);
        prime(&mut core, Thread::T0, &ev);
        let first = probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
        assert!(first.samples.iter().all(|s| s.smc_fired), "{kind}");
        let second = probe(&mut core, Thread::T0, &ev, &cfg).unwrap();
        assert!(second.samples.iter().all(|s| s.smc_fired == refires), "{kind}");
    }
}

#[test]
fn sliding_window_events_follow_the_schedule() {
    let p = cascade();
    let costs = WindowCosts::default();
    for seed in 0..50 {
        let secret = ExponentSecret::generate(64 + seed as usize, seed).unwrap();
        let mut core = CoreState::new(p.clone(), seed);
        let trace = run_sliding_window(&mut core, Thread::T1, &secret, 6, 9, 3, 1_000_003).unwrap();
        let mults: Vec<usize> = trace.events.iter().enumerate().filter(|(_, e)| e.op == ExpOp::Multiply).map(|(i, _)| i).collect();
        for w in mults.windows(2) {
            assert!(w[1] - w[0] >= 2, "multiplies at {} and {} without a square between", w[0], w[1]);
        }
        for e in &trace.events {
            if let Some(v) = e.window_value {
                assert_eq!(v % 2, 1);
            }
        }
        // expected op costs, in event order
        let mut expected = Vec::new();
        for step in sliding_window_schedule(&secret, 6).unwrap() {
            match step {
                WindowStep::Zero => expected.push(costs.square),
                WindowStep::Window { len, .. } => {
                    expected.push(costs.square + (len as u64 - 1) * costs.per_window_bit);
                    expected.extend(std::iter::repeat_n(costs.square, len - 1));
                    expected.push(costs.multiply);
                }
            }
        }
        let deltas: Vec<u64> = trace.events.windows(2).map(|w| w[1].clock - w[0].clock).collect();
        assert_eq!(deltas, expected[..expected.len() - 1]);
    }
}

/// Exhaustive nearest-neighbor vote, independent of the model.
fn brute_force_knn(points: &[(Vec<f64>, usize)], k: usize, q: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..points.len()).collect();
    let d = |i: usize| points[i].0.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    let mut counts = std::collections::BTreeMap::new();
    for &i in &order[..k] {
        *counts.entry(points[i].1).or_insert(0usize) += 1;
    }
    let best = *counts.values().max().unwrap();
    *counts.iter().find(|(_, n)| **n == best).unwrap().0
}

fn planted_key(truth: &[bool], flips: &[usize]) -> DecodedKey {
    let s: String = truth
        .iter()
        .enumerate()
        .map(|(i, &b)| if b ^ flips.contains(&i) { '1' } else { '0' })
        .collect();
    s.parse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn knn_agrees_with_exhaustive_scan(
        points in prop::collection::vec((prop::collection::vec(-5i32..5, 3), 0usize..4), 1..40),
        query in prop::collection::vec(-5i32..5, 3),
        k_index in 0usize..3,
    ) {
        let points: Vec<(Vec<f64>, usize)> = points.into_iter().map(|(v, l)| (v.into_iter().map(f64::from).collect(), l)).collect();
        let k = [1, 3, 5][k_index];
        prop_assume!(k <= points.len());
        let q: Vec<f64> = query.into_iter().map(f64::from).collect();
        let model = KnnModel::train(points.clone(), k).unwrap();
        prop_assert_eq!(model.classify(&q).unwrap(), brute_force_knn(&points, k, &q));
    }

    #[test]
    fn raising_the_threshold_never_hides_an_eviction(
        cycles in prop::collection::vec(1u64..1000, 8),
        low in 1.0f64..500.0,
        raise in 0.0f64..500.0,
    ) {
        let detect = |t: f64| {
            let c = Classifier { threshold: t, slow_means_resident: true };
            cycles.iter().any(|&x| !c.is_resident(x))
        };
        prop_assert!(!detect(low) || detect(low + raise));
    }

    #[test]
    fn aggregation_is_no_worse_than_the_best_trace(
        truth in prop::collection::vec(any::<bool>(), 20..120),
        traces in 3usize..8,
        seed in any::<u64>(),
    ) {
        // each position is corrupted in at most one trace, and errors are at
        // least 12 apart; denser errors in low-entropy keys can be explained
        // more cheaply by shifts than by substitutions
        let n = truth.len();
        let mut keys = Vec::new();
        for t in 0..traces {
            let flips: Vec<usize> = (0..n).filter(|i| (seed.rotate_left(*i as u32) ^ *i as u64) % traces as u64 == t as u64 && i % 12 == 0).collect();
            keys.push(planted_key(&truth, &flips));
        }
        let secret = ExponentSecret::new(truth.clone()).unwrap();
        let best = keys.iter().map(|k| score_key(k, &secret).correct).max().unwrap();
        let agg = aggregate_traces(&keys, n);
        prop_assert!(score_key(&agg, &secret).correct >= best);
    }
}
