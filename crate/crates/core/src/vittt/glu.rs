//! Simplified GLU fast-weight component: `f(x) = silu(x·W0) ⊙ (x·W1)` with
//! both square weight matrices updated in the inner loop. The gate
//! `φ(x) = silu(x·W0)` plays the kernel role; the linear branch accumulates
//! key-value outer products exactly like the final layer of the main model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{silu, silu_prime, Mat, Rng};

/// Both GLU fast weights; square `d×d` matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GluState {
    pub w0: Mat,
    pub w1: Mat,
}

impl GluState {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        GluState {
            w0: rng.normal_mat(d, d, std),
            w1: rng.normal_mat(d, d, std),
        }
    }

    pub fn dim(&self) -> usize {
        self.w0.rows()
    }

    fn check(&self) -> Result<()> {
        let d = self.w0.rows();
        if self.w0.cols() != d || self.w1.rows() != d || self.w1.cols() != d {
            return Err(Error::shape("GluState", "weights must be square and equal"));
        }
        Ok(())
    }
}

fn check_width(op: &'static str, x: &Mat, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::shape(op, format!("input width {} != {}", x.cols(), d)));
    }
    Ok(())
}

/// Gate features `φ(x) = silu(x·W0)`.
pub fn glu_phi(x: &Mat, state: &GluState) -> Result<Mat> {
    check_width("glu_phi", x, state.dim())?;
    Ok(x.matmul(&state.w0).map(silu))
}

/// `f(x) = silu(x·W0) ⊙ (x·W1)`.
pub fn glu_forward(x: &Mat, state: &GluState) -> Result<Mat> {
    state.check()?;
    check_width("glu_forward", x, state.dim())?;
    Ok(glu_phi(x, state)?.hadamard(&x.matmul(&state.w1)))
}

#[derive(Debug, Clone)]
pub struct GluGrads {
    pub d_w0: Mat,
    pub d_w1: Mat,
}

/// Analytic gradients of the binding loss `−⟨f(k), v⟩`:
///
/// ```text
/// dW1 = −kᵀ·(v ⊙ φ(k))
/// dW0 = −kᵀ·((v ⊙ (k·W1)) ⊙ silu'(k·W0))
/// ```
pub fn glu_grads(state: &GluState, k: &Mat, v: &Mat) -> Result<GluGrads> {
    state.check()?;
    check_width("glu_grads", k, state.dim())?;
    if !k.same_shape(v) {
        return Err(Error::shape(
            "glu_grads",
            format!("k {}x{} vs v {}x{}", k.rows(), k.cols(), v.rows(), v.cols()),
        ));
    }
    let gate = glu_phi(k, state)?;
    let d_w1 = k.matmul_at_b(&v.hadamard(&gate)).scale(-1.0);
    let pre_gate = k.matmul(&state.w0);
    let lin = k.matmul(&state.w1);
    let d_w0 = k
        .matmul_at_b(&v.hadamard(&lin).hadamard(&pre_gate.map(silu_prime)))
        .scale(-1.0);
    Ok(GluGrads { d_w0, d_w1 })
}

/// Result of one gradient step: the closed-form output, the evaluation of
/// the updated network, and their gap (asserted tiny by the caller's
/// suites; the operation itself only measures).
#[derive(Debug, Clone)]
pub struct GluStepOutput {
    /// Closed form `φ_{t+1}(q) ⊙ (q·(W1_t + η·kᵀ(v ⊙ φ_t(k))))`, built from
    /// pre-update snapshots of the linear branch.
    pub output: Mat,
    /// `f_{t+1}(q)` evaluated through the updated weights.
    pub updated_eval: Mat,
    pub max_abs_gap: f64,
}

/// Descent step on both weights followed by evaluation at `q`. Returns the
/// closed-form output; the state is advanced in place.
pub fn glu_step_and_eval(
    state: &mut GluState,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    eta: f64,
) -> Result<GluStepOutput> {
    if eta < 0.0 {
        return Err(Error::InvalidConfig(format!("negative learning rate {eta}")));
    }
    check_width("glu_step_and_eval", q, state.dim())?;
    let gate_k = glu_phi(k, state)?;
    let w1_before = state.w1.clone();
    let grads = glu_grads(state, k, v)?;
    state.w0.add_assign_scaled(&grads.d_w0, -eta);
    state.w1.add_assign_scaled(&grads.d_w1, -eta);

    let updated_eval = glu_forward(q, state)?;
    // Closed form: the updated gate multiplies the pre-update linear branch
    // plus the rank-(tokens) key-value correction.
    let mut linear_state = w1_before;
    linear_state.add_assign_scaled(&k.matmul_at_b(&v.hadamard(&gate_k)), eta);
    let output = glu_phi(q, state)?.hadamard(&q.matmul(&linear_state));
    let max_abs_gap = output.max_abs_diff(&updated_eval);
    Ok(GluStepOutput { output, updated_eval, max_abs_gap })
}

/// Snapshots of a multi-step GLU run: enough to rebuild every output from
/// the initial linear weight plus per-step correction terms.
#[derive(Debug, Clone)]
pub struct GluTrajectory {
    pub w1_0: Mat,
    /// Per step: gate features `φ_t(k_t)` recorded before the update.
    pub gate_keys: Vec<Mat>,
    /// Per step: gate features `φ_{t+1}(q_t)` recorded after the update.
    pub gate_queries: Vec<Mat>,
    pub keys: Vec<Mat>,
    pub values: Vec<Mat>,
    pub outputs: Vec<Mat>,
}

/// Run `T` sequential steps (one token row per step is the usual case),
/// recording gate snapshots for the linear reconstruction.
pub fn glu_recurrent(
    state0: &GluState,
    tokens: &[(Mat, Mat, Mat)],
    eta: f64,
) -> Result<(GluState, GluTrajectory)> {
    let mut state = state0.clone();
    let mut traj = GluTrajectory {
        w1_0: state0.w1.clone(),
        gate_keys: Vec::with_capacity(tokens.len()),
        gate_queries: Vec::with_capacity(tokens.len()),
        keys: Vec::with_capacity(tokens.len()),
        values: Vec::with_capacity(tokens.len()),
        outputs: Vec::with_capacity(tokens.len()),
    };
    for (q, k, v) in tokens {
        traj.gate_keys.push(glu_phi(k, &state)?);
        let step = glu_step_and_eval(&mut state, q, k, v, eta)?;
        traj.gate_queries.push(glu_phi(q, &state)?);
        traj.keys.push(k.clone());
        traj.values.push(v.clone());
        traj.outputs.push(step.updated_eval);
    }
    Ok((state, traj))
}

/// Term-by-term reconstruction of a recorded run:
/// `o_t = φ_{t+1}(q_t) ⊙ (q_t·(W1_0 + η Σ_{i≤t} k_iᵀ(v_i ⊙ φ_i(k_i))))`.
pub fn glu_rebuild(traj: &GluTrajectory, queries: &[Mat], eta: f64) -> Result<Vec<Mat>> {
    if queries.len() != traj.keys.len() {
        return Err(Error::shape(
            "glu_rebuild",
            format!("{} queries for {} steps", queries.len(), traj.keys.len()),
        ));
    }
    let mut linear_state = traj.w1_0.clone();
    let mut outputs = Vec::with_capacity(queries.len());
    for t in 0..queries.len() {
        let gated_v = traj.values[t].hadamard(&traj.gate_keys[t]);
        linear_state.add_assign_scaled(&traj.keys[t].matmul_at_b(&gated_v), eta);
        outputs.push(traj.gate_queries[t].hadamard(&queries[t].matmul(&linear_state)));
    }
    Ok(outputs)
}
