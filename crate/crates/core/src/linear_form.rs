//! Closed-form linear-attention reconstructions of recurrent runs.
//!
//! A recorded trajectory is rebuilt as `O_t = q̂_t · (S₀ + Σ_{i≤t} k̂_iᵀ v̂_i)`
//! with `q̂_t = Φ_{t+1}(Q_t)`, `k̂_i = Φ_i(K_i)` and an effective value `v̂_i`
//! that folds in learning rate, gradient sign and (optionally) momentum
//! weights. Reconstruction reads kernel snapshots from the trajectory, so
//! dynamic-kernel runs need no second forward pass. Weight-normalized runs
//! have no sum form at all — see the `parallel` module's non-associativity
//! demonstration.

use crate::error::{Error, Result};
use crate::fastweight::{ChunkSequence, Trajectory, UpdateSchedule};
use crate::numerics::{ns_orthogonalize, Mat};

/// Cumulative momentum coefficient `β_i^j = Π_{s=i+1..j} α_s`, with the
/// empty product `β_i^i = 1`.
pub fn cumulative_beta(alphas: &[f64], i: usize, j: usize) -> Result<f64> {
    if i > j {
        return Err(Error::IndexOrder { i, j });
    }
    assert!(j < alphas.len(), "beta index {j} out of range {}", alphas.len());
    Ok(alphas[i + 1..=j].iter().product())
}

/// Momentum weight `Σ_{j=i..t} β_i^j`: how strongly the gradient from step
/// `i` persists in the weights after step `t`.
pub fn momentum_weight(alphas: &[f64], i: usize, t: usize) -> Result<f64> {
    if i > t {
        return Err(Error::IndexOrder { i, j: t });
    }
    assert!(t < alphas.len(), "weight index {t} out of range {}", alphas.len());
    // Running product keeps this O(t - i) and matches the two-term
    // recurrence u_i^t = u_i^{t-1} + β_i^t used by the parallel scan.
    let mut beta = 1.0;
    let mut acc = 1.0;
    for s in i + 1..=t {
        beta *= alphas[s];
        acc += beta;
    }
    Ok(acc)
}

/// One effective key/value pair extracted from a trajectory step.
#[derive(Debug, Clone)]
pub struct EffectiveTerm {
    /// `Φ_i(K_i)`, the recorded effective key block.
    pub k_hat: Mat,
    /// Effective value: learning-rate and momentum-weighted gradient term.
    pub v_hat: Mat,
    pub step_index: usize,
}

/// Linear-attention state: initial state plus ordered effective terms.
#[derive(Debug, Clone)]
pub struct LinearState {
    /// `S₀ = W1_0`.
    pub s0: Mat,
    pub terms: Vec<EffectiveTerm>,
    /// Orthogonalize each outer product before accumulating (the Muon form).
    pub per_term_orth: bool,
}

/// Extract the effective terms for evaluating the output at step `t`.
///
/// `v̂_i = η_i · Σ_{j=i..t} β_i^j · grad_sign · V_i` (the momentum sum
/// collapses to 1 when momentum is off). The Frobenius loss makes the
/// learning-rate-free gradient equal `grad_sign · (−V_i)`, which is the
/// recorded `grad_term`.
pub fn effective_terms_from_trajectory(
    traj: &Trajectory,
    schedule: &UpdateSchedule,
    t: usize,
) -> Result<LinearState> {
    if t >= traj.len() {
        return Err(Error::IndexOrder { i: t, j: traj.len() });
    }
    schedule.len_checked(traj.len())?;
    let mut terms = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let weight = if traj.config.use_momentum {
            momentum_weight(&schedule.alphas, i, t)?
        } else {
            1.0
        };
        let step = &traj.steps[i];
        terms.push(EffectiveTerm {
            k_hat: step.phi_keys.clone(),
            v_hat: step.grad_term.scale(-schedule.etas[i] * weight),
            step_index: i,
        });
    }
    Ok(LinearState {
        s0: traj.w1_0.clone(),
        terms,
        per_term_orth: traj.config.use_muon,
    })
}

/// Evaluate the linear-attention operator:
/// `q̂ · (S₀ + Σ_i T_i)` with `T_i = k̂_iᵀ·v̂_i`, orthogonalized per term
/// when requested. An exactly zero outer product contributes nothing
/// (mirroring the zero-buffer rule in the recurrent optimizer).
pub fn linear_eval(state: &LinearState, q_hat: &Mat) -> Result<Mat> {
    if q_hat.cols() != state.s0.rows() {
        return Err(Error::shape(
            "linear_eval",
            format!("q̂ width {} vs state rows {}", q_hat.cols(), state.s0.rows()),
        ));
    }
    let mut acc = state.s0.clone();
    for term in &state.terms {
        if term.k_hat.rows() != term.v_hat.rows()
            || term.k_hat.cols() != acc.rows()
            || term.v_hat.cols() != acc.cols()
        {
            return Err(Error::shape(
                "linear_eval",
                format!("term {} has inconsistent shapes", term.step_index),
            ));
        }
        let outer = term.k_hat.matmul_at_b(&term.v_hat);
        let contribution = if state.per_term_orth {
            match ns_orthogonalize(&outer) {
                Ok(m) => Some(m),
                Err(Error::ZeroGradient) => None,
                Err(e) => return Err(e),
            }
        } else {
            Some(outer)
        };
        if let Some(c) = contribution {
            acc = acc.add(&c);
        }
    }
    Ok(q_hat.matmul(&acc))
}

/// Which closed form a trajectory is rebuilt with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RebuildMode {
    /// Single gradient step, all features off.
    Theorem1,
    /// Sequential unrolling, momentum/orthogonalization/weight norm off.
    Theorem2,
    /// Momentum-weighted effective values; orthogonalization and weight
    /// norm off.
    Theorem3,
    /// Per-term orthogonalized accumulation. Exact against the recurrent
    /// optimizer only with momentum off (the summation exchange does not
    /// commute with a nonlinear map applied to the accumulator).
    Lact,
}

impl RebuildMode {
    pub fn name(self) -> &'static str {
        match self {
            RebuildMode::Theorem1 => "theorem1",
            RebuildMode::Theorem2 => "theorem2",
            RebuildMode::Theorem3 => "theorem3",
            RebuildMode::Lact => "lact",
        }
    }
}

fn mode_error(mode: RebuildMode, reason: &str) -> Error {
    Error::IncompatibleMode {
        mode: mode.name(),
        reason: reason.into(),
    }
}

/// Rebuild every output of a recurrent run from trajectory snapshots alone:
/// no weight matrix later than `W1_0` is consulted.
pub fn rebuild_outputs(
    traj: &Trajectory,
    schedule: &UpdateSchedule,
    mode: RebuildMode,
) -> Result<Vec<Mat>> {
    let cfg = &traj.config;
    if cfg.use_weight_norm {
        return Err(mode_error(mode, "weight normalization has no sum form"));
    }
    match mode {
        RebuildMode::Theorem1 => {
            if traj.len() > 1 {
                return Err(mode_error(mode, "single-step form on multi-step trajectory"));
            }
            if cfg.use_momentum || cfg.use_muon {
                return Err(mode_error(mode, "momentum/orthogonalization must be off"));
            }
        }
        RebuildMode::Theorem2 => {
            if cfg.use_momentum || cfg.use_muon {
                return Err(mode_error(mode, "momentum/orthogonalization must be off"));
            }
        }
        RebuildMode::Theorem3 => {
            if cfg.use_muon {
                return Err(mode_error(mode, "orthogonalization must be off"));
            }
        }
        RebuildMode::Lact => {
            if cfg.use_muon && cfg.use_momentum {
                return Err(mode_error(
                    mode,
                    "per-term orthogonalization is exact only with momentum off",
                ));
            }
        }
    }

    let mut outputs = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let state = effective_terms_from_trajectory(traj, schedule, t)?;
        outputs.push(linear_eval(&state, &traj.steps[t].phi_query)?);
    }
    Ok(outputs)
}

/// Standard causal linear attention at chunk granularity, diagonal
/// included: `O_t = Q_t · (W + Σ_{i≤t} K_iᵀ·V_i)`.
pub fn variant6_attention(chunks: &ChunkSequence, w: &Mat) -> Result<Vec<Mat>> {
    let mut state = w.clone();
    let mut outputs = Vec::with_capacity(chunks.len());
    for chunk in &chunks.chunks {
        if chunk.q.cols() != state.rows() || chunk.k.cols() != state.rows() {
            return Err(Error::shape(
                "variant6_attention",
                format!(
                    "key width {} / query width {} vs state rows {}",
                    chunk.k.cols(),
                    chunk.q.cols(),
                    state.rows()
                ),
            ));
        }
        if chunk.v.cols() != state.cols() {
            return Err(Error::shape(
                "variant6_attention",
                format!("value width {} vs state cols {}", chunk.v.cols(), state.cols()),
            ));
        }
        state = state.add(&chunk.k.matmul_at_b(&chunk.v));
        outputs.push(chunk.q.matmul(&state));
    }
    Ok(outputs)
}

/// Per-step comparison between a recurrent run and its reconstruction,
/// serializable for harness reports.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReconstructionReport {
    pub mode: String,
    pub steps: usize,
    pub max_abs_diff: f64,
    pub per_step_abs: Vec<f64>,
}

/// Convenience wrapper: rebuild and diff against recorded outputs.
pub fn reconstruction_report(
    traj: &Trajectory,
    schedule: &UpdateSchedule,
    mode: RebuildMode,
) -> Result<ReconstructionReport> {
    let rebuilt = rebuild_outputs(traj, schedule, mode)?;
    let per_step_abs: Vec<f64> = rebuilt
        .iter()
        .zip(traj.steps.iter())
        .map(|(r, s)| r.max_abs_diff(&s.output))
        .collect();
    Ok(ReconstructionReport {
        mode: mode.name().to_string(),
        steps: traj.len(),
        max_abs_diff: per_step_abs.iter().fold(0.0, |m, &x| m.max(x)),
        per_step_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fastweight::{
        recurrent_forward, ChunkSequence, FastWeightConfig, FastWeightState,
    };
    use crate::numerics::Rng;

    #[test]
    fn beta_empty_product_is_one() {
        let alphas = [0.3, 0.7, 0.9];
        assert_eq!(cumulative_beta(&alphas, 2, 2).unwrap(), 1.0);
    }

    #[test]
    fn beta_spec_product() {
        let alphas = [0.9, 0.5, 0.25];
        assert!((cumulative_beta(&alphas, 0, 2).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn beta_telescopes() {
        let mut rng = Rng::new(20);
        let alphas: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let left = cumulative_beta(&alphas, 0, 3).unwrap();
        let right = cumulative_beta(&alphas, 0, 1).unwrap() * cumulative_beta(&alphas, 1, 3).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn beta_rejects_bad_order() {
        assert!(matches!(
            cumulative_beta(&[0.5, 0.5], 1, 0),
            Err(Error::IndexOrder { .. })
        ));
    }

    #[test]
    fn momentum_weight_values() {
        let zeros = [0.0; 4];
        for i in 0..4 {
            for t in i..4 {
                assert_eq!(momentum_weight(&zeros, i, t).unwrap(), 1.0);
            }
        }
        let halves = [0.5; 4];
        assert!((momentum_weight(&halves, 0, 2).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(momentum_weight(&halves, 3, 3).unwrap(), 1.0);
    }

    #[test]
    fn momentum_weight_recurrence() {
        let mut rng = Rng::new(21);
        let alphas: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 1.0)).collect();
        for i in 0..8 {
            for t in i + 1..8 {
                let direct = momentum_weight(&alphas, i, t).unwrap();
                let stepped = momentum_weight(&alphas, i, t - 1).unwrap()
                    + cumulative_beta(&alphas, i, t).unwrap();
                assert!((direct - stepped).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_eval_empty_terms() {
        let mut rng = Rng::new(22);
        let s0 = rng.normal_mat(4, 3, 1.0);
        let q = rng.normal_mat(2, 4, 1.0);
        let state = LinearState { s0: s0.clone(), terms: vec![], per_term_orth: false };
        let out = linear_eval(&state, &q).unwrap();
        assert!(out.max_abs_diff(&q.matmul(&s0)) == 0.0);
    }

    #[test]
    fn linear_eval_rank_one() {
        // One term, S0 = 0, L = 1: o = (q̂·k̂ᵀ)·v̂.
        let mut rng = Rng::new(23);
        let k_hat = rng.normal_mat(1, 3, 1.0);
        let v_hat = rng.normal_mat(1, 2, 1.0);
        let q_hat = rng.normal_mat(1, 3, 1.0);
        let state = LinearState {
            s0: Mat::zeros(3, 2),
            terms: vec![EffectiveTerm { k_hat: k_hat.clone(), v_hat: v_hat.clone(), step_index: 0 }],
            per_term_orth: false,
        };
        let out = linear_eval(&state, &q_hat).unwrap();
        let weight = q_hat.frobenius_dot(&k_hat);
        assert!(out.max_abs_diff(&v_hat.scale(weight)) < 1e-13);
    }

    #[test]
    fn linear_eval_matches_direct_accumulation() {
        let mut rng = Rng::new(6);
        let s0 = rng.normal_mat(4, 3, 1.0);
        let terms: Vec<EffectiveTerm> = (0..3)
            .map(|i| EffectiveTerm {
                k_hat: rng.normal_mat(2, 4, 1.0),
                v_hat: rng.normal_mat(2, 3, 1.0),
                step_index: i,
            })
            .collect();
        let q = rng.normal_mat(2, 4, 1.0);
        let state = LinearState { s0: s0.clone(), terms: terms.clone(), per_term_orth: false };
        let fast = linear_eval(&state, &q).unwrap();
        let mut acc = s0;
        for t in &terms {
            acc = acc.add(&t.k_hat.transpose().matmul(&t.v_hat));
        }
        assert!(fast.max_abs_diff(&q.matmul(&acc)) < 1e-13);
    }

    #[test]
    fn effective_values_reduce_to_values() {
        // Momentum off, eta = 1, descent: v̂_i = V_i.
        let mut rng = Rng::new(24);
        let cfg = FastWeightConfig::plain(3, 4, 2, 2);
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, 3, 2, 3, 2, 1.0);
        let schedule = UpdateSchedule::constant(3, 1.0, 0.0);
        let (_, traj) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        let ls = effective_terms_from_trajectory(&traj, &schedule, 2).unwrap();
        for (i, term) in ls.terms.iter().enumerate() {
            assert!(term.v_hat.max_abs_diff(&chunks.chunks[i].v) < 1e-15);
        }
    }

    #[test]
    fn effective_values_flip_with_gradient_sign() {
        let mut rng = Rng::new(25);
        let mut cfg = FastWeightConfig::plain(3, 4, 2, 2);
        cfg.grad_sign = -1;
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, 2, 2, 3, 2, 1.0);
        let schedule = UpdateSchedule::constant(2, 0.5, 0.0);
        let (_, traj) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        let ls = effective_terms_from_trajectory(&traj, &schedule, 1).unwrap();
        for (i, term) in ls.terms.iter().enumerate() {
            assert!(term.v_hat.max_abs_diff(&chunks.chunks[i].v.scale(-0.5)) < 1e-15);
        }
    }

    #[test]
    fn effective_values_fold_momentum_weights() {
        let mut rng = Rng::new(26);
        let mut cfg = FastWeightConfig::plain(3, 4, 2, 2);
        cfg.use_momentum = true;
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, 3, 2, 3, 2, 1.0);
        let eta = 0.7;
        let schedule = UpdateSchedule::constant(3, eta, 0.5);
        let (_, traj) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        let ls = effective_terms_from_trajectory(&traj, &schedule, 2).unwrap();
        assert!(ls.terms[0]
            .v_hat
            .max_abs_diff(&chunks.chunks[0].v.scale(1.75 * eta))
            < 1e-14);
    }

    #[test]
    fn variant6_hand_example() {
        let chunks = ChunkSequence {
            chunks: vec![crate::fastweight::Chunk {
                q: Mat::from_rows(&[&[1.0, 0.0]]),
                k: Mat::from_rows(&[&[0.0, 1.0]]),
                v: Mat::from_rows(&[&[2.0, 3.0]]),
            }],
        };
        let out = variant6_attention(&chunks, &Mat::identity(2)).unwrap();
        assert_eq!(out[0].row(0), &[1.0, 0.0]);
    }

    #[test]
    fn variant6_zero_keys_read_initial_state() {
        let mut rng = Rng::new(27);
        let w = rng.normal_mat(3, 2, 1.0);
        let mut chunks = ChunkSequence::random(&mut rng, 3, 2, 3, 2, 1.0);
        for c in &mut chunks.chunks {
            c.k = Mat::zeros(2, 3);
        }
        let outs = variant6_attention(&chunks, &w).unwrap();
        for (t, o) in outs.iter().enumerate() {
            assert!(o.max_abs_diff(&chunks.chunks[t].q.matmul(&w)) == 0.0);
        }
    }

    #[test]
    fn variant6_single_token_rank_one() {
        // q = k: o = qW + ||k||² v.
        let mut rng = Rng::new(28);
        let w = rng.normal_mat(3, 2, 1.0);
        let k = rng.normal_mat(1, 3, 1.0);
        let v = rng.normal_mat(1, 2, 1.0);
        let chunks = ChunkSequence {
            chunks: vec![crate::fastweight::Chunk { q: k.clone(), k: k.clone(), v: v.clone() }],
        };
        let out = variant6_attention(&chunks, &w).unwrap();
        let norm2 = k.frobenius_dot(&k);
        let expected = k.matmul(&w).add(&v.scale(norm2));
        assert!(out[0].max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn rebuild_rejects_incompatible_modes() {
        let mut rng = Rng::new(29);
        let mut cfg = FastWeightConfig::plain(3, 4, 2, 2);
        cfg.use_momentum = true;
        let state = FastWeightState::init(&cfg, &mut rng).unwrap();
        let chunks = ChunkSequence::random(&mut rng, 2, 2, 3, 2, 1.0);
        let schedule = UpdateSchedule::constant(2, 1.0, 0.5);
        let (_, traj) = recurrent_forward(&chunks, &state, &schedule, &cfg).unwrap();
        assert!(matches!(
            rebuild_outputs(&traj, &schedule, RebuildMode::Theorem2),
            Err(Error::IncompatibleMode { .. })
        ));
        assert!(rebuild_outputs(&traj, &schedule, RebuildMode::Theorem3).is_ok());
    }
}
