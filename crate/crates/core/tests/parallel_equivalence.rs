//! Recurrent / bilinear / scan three-way agreement on parallel-eligible
//! configurations, threading determinism, and the non-associativity
//! demonstrations for the configurations that cannot be parallelized.

use ttt_core::fastweight::{
    recurrent_forward, ChunkSequence, FastWeightConfig, FastWeightState, UpdateSchedule,
};
use ttt_core::numerics::{Mat, Rng};
use ttt_core::parallel::{
    demonstrate_non_associativity, parallel_forward_bilinear, parallel_forward_scan,
    ParallelPlan, StaticKernel, Strategy, Threading,
};

fn max_gap(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

/// Static-kernel schedule policy: per-chunk rates without momentum, a
/// constant rate with momentum (the sum form pulls η out of the momentum
/// accumulator, exact only when it does not vary).
fn eligible_schedule(rng: &mut Rng, n: usize, momentum: bool) -> UpdateSchedule {
    if momentum {
        UpdateSchedule {
            etas: vec![rng.uniform(0.05, 0.6); n],
            alphas: (0..n).map(|_| rng.uniform(0.0, 0.95)).collect(),
        }
    } else {
        UpdateSchedule {
            etas: (0..n).map(|_| rng.uniform(0.05, 0.6)).collect(),
            alphas: vec![0.0; n],
        }
    }
}

#[test]
fn three_way_agreement() {
    for seed in 0..30 {
        let mut rng = Rng::new(seed);
        let d_k = rng.uniform_usize(2, 8);
        let d_h = rng.uniform_usize(2, 8);
        let d_v = rng.uniform_usize(2, 8);
        let l = rng.uniform_usize(1, 8);
        let n = rng.uniform_usize(1, 16);
        let momentum = seed % 2 == 0;
        let cfg = FastWeightConfig {
            use_momentum: momentum,
            ..FastWeightConfig::plain(d_k, d_h, d_v, l)
        };
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, n, l, d_k, d_v, 1.0);
        let schedule = eligible_schedule(&mut rng, n, momentum);

        let (recurrent, _) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        let plan = ParallelPlan::new(&schedule, n, l);
        let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
        let bilinear = parallel_forward_bilinear(&chunks, &state.w1, kernel, &plan).unwrap();
        let scan = parallel_forward_scan(
            &chunks,
            &state.w1,
            kernel,
            &plan.clone().with_strategy(Strategy::Scan),
            false,
        )
        .unwrap();

        assert!(max_gap(&recurrent, &bilinear) < 1e-8, "seed {seed} r/b: {}", max_gap(&recurrent, &bilinear));
        assert!(max_gap(&recurrent, &scan) < 1e-8, "seed {seed} r/s: {}", max_gap(&recurrent, &scan));
        assert!(max_gap(&bilinear, &scan) < 1e-12, "seed {seed} b/s: {}", max_gap(&bilinear, &scan));
    }
}

#[test]
fn single_chunk_bilinear_matches_recurrent() {
    let mut rng = Rng::new(100);
    let cfg = FastWeightConfig::plain(4, 6, 5, 3);
    let state = FastWeightState::init(&cfg, &mut rng).unwrap();
    let chunks = ChunkSequence::random(&mut rng, 1, 3, 4, 5, 1.0);
    let schedule = UpdateSchedule::constant(1, 0.7, 0.0);
    let (recurrent, _) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
    let plan = ParallelPlan::new(&schedule, 1, 3);
    let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
    let bilinear = parallel_forward_bilinear(&chunks, &state.w1, kernel, &plan).unwrap();
    assert!(max_gap(&recurrent, &bilinear) < 1e-12);
}

#[test]
fn zero_rate_reads_initial_state() {
    let mut rng = Rng::new(101);
    let cfg = FastWeightConfig::plain(3, 5, 4, 2);
    let state = FastWeightState::init(&cfg, &mut rng).unwrap();
    let chunks = ChunkSequence::random(&mut rng, 4, 2, 3, 4, 1.0);
    let schedule = UpdateSchedule::constant(4, 0.0, 0.5);
    let plan = ParallelPlan::new(&schedule, 4, 2);
    let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
    let outs = parallel_forward_bilinear(&chunks, &state.w1, kernel, &plan).unwrap();
    for (t, out) in outs.iter().enumerate() {
        let expected = kernel.apply(&chunks.chunks[t].q).unwrap().matmul(&state.w1);
        assert!(out.max_abs_diff(&expected) == 0.0, "chunk {t}");
    }
}

#[test]
fn scan_alpha_zero_is_plain_accumulation() {
    let mut rng = Rng::new(102);
    let cfg = FastWeightConfig::plain(3, 5, 4, 2);
    let state = FastWeightState::init(&cfg, &mut rng).unwrap();
    let n = 5;
    let chunks = ChunkSequence::random(&mut rng, n, 2, 3, 4, 1.0);
    let schedule = UpdateSchedule {
        etas: (0..n).map(|_| rng.uniform(0.1, 0.8)).collect(),
        alphas: vec![0.0; n],
    };
    let plan = ParallelPlan::new(&schedule, n, 2).with_strategy(Strategy::Scan);
    let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
    let scan = parallel_forward_scan(&chunks, &state.w1, kernel, &plan, false).unwrap();

    // Plain causal accumulation, written out directly.
    let mut acc = state.w1.clone();
    for (t, chunk) in chunks.chunks.iter().enumerate() {
        let phi_k = kernel.apply(&chunk.k).unwrap();
        acc = acc.add(&phi_k.matmul_at_b(&chunk.v.scale(schedule.etas[t])));
        let expected = kernel.apply(&chunk.q).unwrap().matmul(&acc);
        assert!(scan[t].max_abs_diff(&expected) < 1e-13, "chunk {t}");
    }
}

#[test]
fn scan_per_term_orth_matches_recurrent_muon() {
    // Momentum off, unit rate: per-term orthogonalization in the scan is
    // the same operator the recurrent optimizer applies step by step.
    for seed in 0..15 {
        let mut rng = Rng::new(200 + seed);
        let d_k = rng.uniform_usize(2, 6);
        let d_h = rng.uniform_usize(2, 6);
        let d_v = rng.uniform_usize(2, 6);
        let l = rng.uniform_usize(1, 4);
        let n = rng.uniform_usize(1, 10);
        let cfg = FastWeightConfig {
            use_muon: true,
            ..FastWeightConfig::plain(d_k, d_h, d_v, l)
        };
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, n, l, d_k, d_v, 1.0);
        let schedule = UpdateSchedule::constant(n, 1.0, 0.0);
        let (recurrent, _) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        let plan = ParallelPlan::new(&schedule, n, l).with_strategy(Strategy::Scan);
        let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
        let scan = parallel_forward_scan(&chunks, &state.w1, kernel, &plan, true).unwrap();
        assert!(
            max_gap(&recurrent, &scan) < 1e-10,
            "seed {seed}: {}",
            max_gap(&recurrent, &scan)
        );
    }
}

#[test]
fn threaded_bilinear_is_bit_identical() {
    let mut rng = Rng::new(300);
    let cfg = FastWeightConfig {
        use_momentum: true,
        ..FastWeightConfig::plain(5, 7, 4, 4)
    };
    let state = FastWeightState::init(&cfg, &mut rng).unwrap();
    let n = 9;
    let chunks = ChunkSequence::random(&mut rng, n, 4, 5, 4, 1.0);
    let schedule = UpdateSchedule {
        etas: vec![0.3; n],
        alphas: (0..n).map(|_| rng.uniform(0.0, 0.9)).collect(),
    };
    let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
    let serial = parallel_forward_bilinear(
        &chunks,
        &state.w1,
        kernel,
        &ParallelPlan::new(&schedule, n, 4),
    )
    .unwrap();
    let threaded = parallel_forward_bilinear(
        &chunks,
        &state.w1,
        kernel,
        &ParallelPlan::new(&schedule, n, 4).with_threading(Threading::Threaded),
    )
    .unwrap();
    assert_eq!(max_gap(&serial, &threaded), 0.0);
}

#[test]
fn threaded_scan_matches_deterministic() {
    let mut rng = Rng::new(301);
    let cfg = FastWeightConfig {
        use_momentum: true,
        ..FastWeightConfig::plain(4, 6, 5, 2)
    };
    let state = FastWeightState::init(&cfg, &mut rng).unwrap();
    let n = 13;
    let chunks = ChunkSequence::random(&mut rng, n, 2, 4, 5, 1.0);
    let schedule = UpdateSchedule {
        etas: vec![0.2; n],
        alphas: (0..n).map(|_| rng.uniform(0.0, 0.9)).collect(),
    };
    let kernel = StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 };
    let serial = parallel_forward_scan(
        &chunks,
        &state.w1,
        kernel,
        &ParallelPlan::new(&schedule, n, 2).with_strategy(Strategy::Scan),
        false,
    )
    .unwrap();
    let threaded = parallel_forward_scan(
        &chunks,
        &state.w1,
        kernel,
        &ParallelPlan::new(&schedule, n, 2)
            .with_strategy(Strategy::Scan)
            .with_threading(Threading::Threaded),
        false,
    )
    .unwrap();
    assert!(max_gap(&serial, &threaded) < 1e-12);
}

#[test]
fn weight_norm_breaks_the_sum_form() {
    let mut hits = 0;
    let total = 40;
    for seed in 0..total {
        let cfg = FastWeightConfig {
            use_weight_norm: true,
            ..FastWeightConfig::plain(4, 6, 5, 2)
        };
        let report = demonstrate_non_associativity(&cfg, seed).unwrap();
        if report.max_abs_gap > 1e-3 {
            hits += 1;
        }
    }
    assert!(hits * 100 >= total * 95, "only {hits}/{total} seeds show the gap");
}

#[test]
fn dynamic_kernel_breaks_the_sum_form() {
    let mut hits = 0;
    let total = 40;
    for seed in 0..total {
        let cfg = FastWeightConfig {
            update_gate_weights: true,
            ..FastWeightConfig::plain(4, 6, 5, 2)
        };
        let report = demonstrate_non_associativity(&cfg, seed).unwrap();
        if report.max_abs_gap > 1e-3 {
            hits += 1;
        }
    }
    assert!(hits * 100 >= total * 95, "only {hits}/{total} seeds show the gap");
}

#[test]
fn control_config_stays_exact() {
    for seed in 0..20 {
        let cfg = FastWeightConfig::plain(4, 6, 5, 2);
        let report = demonstrate_non_associativity(&cfg, seed).unwrap();
        assert!(report.max_abs_gap < 1e-10, "seed {seed}: {}", report.max_abs_gap);
    }
}

#[test]
fn empty_sequence_is_empty() {
    let schedule = UpdateSchedule::constant(0, 1.0, 0.0);
    let plan = ParallelPlan::new(&schedule, 0, 2);
    let chunks = ChunkSequence { chunks: vec![] };
    let w1 = Mat::zeros(3, 2);
    let w0 = Mat::zeros(2, 3);
    let w2 = Mat::zeros(2, 3);
    let kernel = StaticKernel::SwiGlu { w0: &w0, w2: &w2 };
    assert!(parallel_forward_bilinear(&chunks, &w1, kernel, &plan).unwrap().is_empty());
    assert!(parallel_forward_scan(&chunks, &w1, kernel, &plan, false).unwrap().is_empty());
}
