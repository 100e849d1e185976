//! Sequential (recurrent) fast-weight inner loop.
//!
//! The layer keeps three fast weights `W0, W2 : d_k×d_h` and `W1 : d_h×d_v`.
//! Per chunk of `L` tokens it runs one gradient step on the binding loss
//! `L(f(K), V) = −⟨f(K), V⟩` where `f(X) = φ(X)·W1` and
//! `φ(X) = silu(X·W0) ⊙ (X·W2)`, then evaluates the chunk's queries against
//! the updated weights ("update-then-apply"). Everything a closed-form
//! reconstruction needs — kernel snapshots, effective gradients, weight
//! states — is recorded in a [`Trajectory`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ns_orthogonalize, row_l2_normalize, silu, silu_prime, Mat, Rng};

/// Initialization mode for the final-layer weight `W1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum W1Init {
    /// All-zero start; recovers pure key-value accumulation.
    Zero,
    /// Gaussian entries with the given standard deviation.
    Gaussian(f64),
}

/// Kernel function below the final linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `φ(X) = silu(X·W0) ⊙ (X·W2)`.
    SwiGlu,
    /// `φ(X) = X`; requires `d_h == d_k` and static gates. This is the
    /// single-linear-layer reduction used by the later variants.
    Identity,
}

impl Default for KernelKind {
    fn default() -> Self {
        KernelKind::SwiGlu
    }
}

/// Configuration of the fast-weight layer. Serializes to the documented
/// JSON schema with exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastWeightConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub d_h: usize,
    pub chunk_len: usize,
    /// When true, the gate weights `W0`/`W2` are updated in the inner loop
    /// (a dynamic kernel); otherwise only `W1` moves.
    pub update_gate_weights: bool,
    pub use_weight_norm: bool,
    pub use_muon: bool,
    pub use_momentum: bool,
    /// `+1` runs gradient descent on the binding loss, `-1` gradient ascent.
    pub grad_sign: i8,
    /// Evaluate chunk queries at the keys instead (the Q→K substitution).
    pub replace_q_with_k: bool,
    pub w1_init: W1Init,
    #[serde(default)]
    pub kernel: KernelKind,
}

impl FastWeightConfig {
    /// Baseline configuration: dynamic SwiGLU kernel with every update
    /// feature off. Tests and suites toggle from here.
    pub fn plain(d_k: usize, d_h: usize, d_v: usize, chunk_len: usize) -> Self {
        FastWeightConfig {
            d_k,
            d_v,
            d_h,
            chunk_len,
            update_gate_weights: false,
            use_weight_norm: false,
            use_muon: false,
            use_momentum: false,
            grad_sign: 1,
            replace_q_with_k: false,
            w1_init: W1Init::Gaussian(1.0),
            kernel: KernelKind::SwiGlu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_v == 0 || self.d_h == 0 || self.chunk_len == 0 {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.grad_sign != 1 && self.grad_sign != -1 {
            return Err(Error::InvalidConfig(format!(
                "grad_sign must be +1 or -1, got {}",
                self.grad_sign
            )));
        }
        if self.kernel == KernelKind::Identity {
            if self.d_h != self.d_k {
                return Err(Error::InvalidConfig(
                    "identity kernel requires d_h == d_k".into(),
                ));
            }
            if self.update_gate_weights {
                return Err(Error::InvalidConfig(
                    "identity kernel has no gate weights to update".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Inner-loop parameters plus momentum accumulators. Momentum buffers are
/// zero before the first chunk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FastWeightState {
    pub w0: Mat,
    pub w2: Mat,
    pub w1: Mat,
    pub mom_w0: Mat,
    pub mom_w2: Mat,
    pub mom_w1: Mat,
}

impl FastWeightState {
    /// Seeded initialization: `W0, W2 ~ N(0, 1/√d_k)`, `W1` per
    /// `config.w1_init` (Gaussian scale divided by `√d_h`).
    pub fn init(config: &FastWeightConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let gate_std = 1.0 / (config.d_k as f64).sqrt();
        let w0 = rng.normal_mat(config.d_k, config.d_h, gate_std);
        let w2 = rng.normal_mat(config.d_k, config.d_h, gate_std);
        let w1 = match config.w1_init {
            W1Init::Zero => Mat::zeros(config.d_h, config.d_v),
            W1Init::Gaussian(scale) => {
                rng.normal_mat(config.d_h, config.d_v, scale / (config.d_h as f64).sqrt())
            }
        };
        Ok(FastWeightState {
            mom_w0: Mat::zeros(config.d_k, config.d_h),
            mom_w2: Mat::zeros(config.d_k, config.d_h),
            mom_w1: Mat::zeros(config.d_h, config.d_v),
            w0,
            w2,
            w1,
        })
    }
}

/// Per-chunk learning rates and momentum factors. `alphas[0]` is accepted
/// but has no effect: the momentum buffer is zero before the first chunk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateSchedule {
    pub etas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl UpdateSchedule {
    pub fn constant(n: usize, eta: f64, alpha: f64) -> Self {
        UpdateSchedule {
            etas: vec![eta; n],
            alphas: vec![alpha; n],
        }
    }

    pub fn len_checked(&self, chunks: usize) -> Result<()> {
        if self.etas.len() != chunks || self.alphas.len() != chunks {
            return Err(Error::ScheduleLengthMismatch {
                expected: chunks,
                got: self.etas.len().min(self.alphas.len()),
            });
        }
        Ok(())
    }
}

/// One chunk of `L` tokens: queries, keys and values as row matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chunk {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

/// Chunked input sequence; all chunks share `L` and widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkSequence {
    pub chunks: Vec<Chunk>,
}

impl ChunkSequence {
    /// Split flat `(NL)×d` matrices into chunks of `chunk_len` rows. A
    /// sequence length not divisible by `chunk_len` is an error, not padded:
    /// padding would change the operator.
    pub fn from_flat(q: &Mat, k: &Mat, v: &Mat, chunk_len: usize) -> Result<Self> {
        let len = q.rows();
        if k.rows() != len || v.rows() != len {
            return Err(Error::shape(
                "ChunkSequence::from_flat",
                format!("row counts {} / {} / {}", q.rows(), k.rows(), v.rows()),
            ));
        }
        if chunk_len == 0 || len % chunk_len != 0 {
            return Err(Error::ChunkBoundary { len, chunk_len });
        }
        let chunks = (0..len / chunk_len)
            .map(|t| Chunk {
                q: q.row_block(t * chunk_len, chunk_len),
                k: k.row_block(t * chunk_len, chunk_len),
                v: v.row_block(t * chunk_len, chunk_len),
            })
            .collect();
        Ok(ChunkSequence { chunks })
    }

    /// Seeded Gaussian sequence, the standard input for suites.
    pub fn random(rng: &mut Rng, n: usize, l: usize, d_k: usize, d_v: usize, scale: f64) -> Self {
        let chunks = (0..n)
            .map(|_| Chunk {
                q: rng.normal_mat(l, d_k, scale),
                k: rng.normal_mat(l, d_k, scale),
                v: rng.normal_mat(l, d_v, scale),
            })
            .collect();
        ChunkSequence { chunks }
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Everything recorded at step `t` of a recurrent run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Gate snapshots before the update, present only for dynamic kernels.
    pub w0_before: Option<Mat>,
    pub w2_before: Option<Mat>,
    pub w1_before: Mat,
    pub w1_after: Mat,
    /// `Φ_t(K_t)`, the effective key block (kernel before the update).
    pub phi_keys: Mat,
    /// `Φ_{t+1}(X_t)`, the effective query block (kernel after the update;
    /// `X_t` is `K_t` under the Q→K substitution, else `Q_t`).
    pub phi_query: Mat,
    /// `G_t = grad_sign · ∂L/∂f = grad_sign · (−V_t)`, the learning-rate-free
    /// instantaneous gradient of the binding loss.
    pub grad_term: Mat,
    pub output: Mat,
}

/// Full record of a recurrent run, sufficient to rebuild every output in
/// closed form without re-running the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: FastWeightConfig,
    /// `W1` before the first chunk (the linear-attention initial state).
    pub w1_0: Mat,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("trajectory json: {e}")))
    }
}

fn check_input_shape(op: &'static str, x: &Mat, d_in: usize) -> Result<()> {
    if x.cols() != d_in {
        return Err(Error::shape(op, format!("input width {} != {}", x.cols(), d_in)));
    }
    Ok(())
}

/// `φ(X) = silu(X·W0) ⊙ (X·W2)` for an `n×d_k` input block.
pub fn swiglu_phi(x: &Mat, w0: &Mat, w2: &Mat) -> Result<Mat> {
    check_input_shape("swiglu_phi", x, w0.rows())?;
    if w0.rows() != w2.rows() || w0.cols() != w2.cols() {
        return Err(Error::shape(
            "swiglu_phi",
            format!(
                "W0 {}x{} vs W2 {}x{}",
                w0.rows(),
                w0.cols(),
                w2.rows(),
                w2.cols()
            ),
        ));
    }
    let gate = x.matmul(w0).map(silu);
    let lin = x.matmul(w2);
    Ok(gate.hadamard(&lin))
}

/// Kernel feature map for the configured kernel kind.
pub fn phi(x: &Mat, state: &FastWeightState, config: &FastWeightConfig) -> Result<Mat> {
    match config.kernel {
        KernelKind::SwiGlu => swiglu_phi(x, &state.w0, &state.w2),
        KernelKind::Identity => {
            check_input_shape("phi(identity)", x, config.d_k)?;
            Ok(x.clone())
        }
    }
}

/// Full forward map `f(X) = φ(X)·W1`.
pub fn swiglu_forward(x: &Mat, state: &FastWeightState, config: &FastWeightConfig) -> Result<Mat> {
    let features = phi(x, state, config)?;
    if features.cols() != state.w1.rows() {
        return Err(Error::shape(
            "swiglu_forward",
            format!("φ width {} vs W1 rows {}", features.cols(), state.w1.rows()),
        ));
    }
    Ok(features.matmul(&state.w1))
}

/// Binding loss `−⟨F, V⟩` (negative Frobenius inner product).
pub fn kv_binding_loss(f: &Mat, v: &Mat) -> Result<f64> {
    if !f.same_shape(v) {
        return Err(Error::shape(
            "kv_binding_loss",
            format!(
                "{}x{} vs {}x{}",
                f.rows(),
                f.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(-f.frobenius_dot(v))
}

/// Raw analytic gradients of the binding loss for one chunk, not yet
/// multiplied by `grad_sign` (that happens inside [`apply_update`]).
#[derive(Debug, Clone)]
pub struct ChunkGrads {
    pub d_w0: Mat,
    pub d_w1: Mat,
    pub d_w2: Mat,
}

/// Analytic gradients at the current state. With upstream `U = −V`:
///
/// ```text
/// dW1 = φ(K)ᵀ·U
/// dW0 = Kᵀ·((U·W1ᵀ) ⊙ (K·W2) ⊙ silu'(K·W0))
/// dW2 = Kᵀ·((U·W1ᵀ) ⊙ silu(K·W0))
/// ```
///
/// Gate gradients are zero for static kernels.
pub fn grads_chunk(
    state: &FastWeightState,
    k: &Mat,
    v: &Mat,
    config: &FastWeightConfig,
) -> Result<ChunkGrads> {
    check_input_shape("grads_chunk", k, config.d_k)?;
    if v.rows() != k.rows() || v.cols() != config.d_v {
        return Err(Error::shape(
            "grads_chunk",
            format!("V {}x{} for L={} d_v={}", v.rows(), v.cols(), k.rows(), config.d_v),
        ));
    }
    let upstream = v.scale(-1.0);
    let features = phi(k, state, config)?;
    let d_w1 = features.matmul_at_b(&upstream);

    let dynamic = config.update_gate_weights && config.kernel == KernelKind::SwiGlu;
    let (d_w0, d_w2) = if dynamic {
        let hidden_grad = upstream.matmul_a_bt(&state.w1); // U·W1ᵀ, L×d_h
        let pre_gate = k.matmul(&state.w0); // K·W0
        let lin = k.matmul(&state.w2); // K·W2
        let d_w0 = k.matmul_at_b(&hidden_grad.hadamard(&lin).hadamard(&pre_gate.map(silu_prime)));
        let d_w2 = k.matmul_at_b(&hidden_grad.hadamard(&pre_gate.map(silu)));
        (d_w0, d_w2)
    } else {
        (
            Mat::zeros(state.w0.rows(), state.w0.cols()),
            Mat::zeros(state.w2.rows(), state.w2.cols()),
        )
    };
    Ok(ChunkGrads { d_w0, d_w1, d_w2 })
}

/// One optimizer step on every dynamic weight:
///
/// ```text
/// mom ← grad_sign·dW + (α if momentum else 0)·mom
/// step ← M(mom) if muon else mom
/// W ← W − η·step;   W ← row_l2_normalize(W) if weight norm
/// ```
///
/// An exactly zero buffer under Muon is treated as a zero step rather than
/// an error. Static weights and their buffers are untouched.
pub fn apply_update(
    state: &mut FastWeightState,
    grads: &ChunkGrads,
    eta: f64,
    alpha: f64,
    config: &FastWeightConfig,
) -> Result<()> {
    if eta < 0.0 {
        return Err(Error::InvalidConfig(format!("negative learning rate {eta}")));
    }
    let sign = config.grad_sign as f64;
    let keep = if config.use_momentum { alpha } else { 0.0 };

    let step_weight = |w: &mut Mat, mom: &mut Mat, grad: &Mat| -> Result<()> {
        let mut buf = grad.scale(sign);
        buf.add_assign_scaled(mom, keep);
        *mom = buf;
        let step = if config.use_muon {
            match ns_orthogonalize(mom) {
                Ok(m) => Some(m),
                Err(Error::ZeroGradient) => None,
                Err(e) => return Err(e),
            }
        } else {
            Some(mom.clone())
        };
        if let Some(step) = step {
            w.add_assign_scaled(&step, -eta);
        }
        if config.use_weight_norm {
            *w = row_l2_normalize(w);
        }
        Ok(())
    };

    step_weight(&mut state.w1, &mut state.mom_w1, &grads.d_w1)?;
    if config.update_gate_weights && config.kernel == KernelKind::SwiGlu {
        step_weight(&mut state.w0, &mut state.mom_w0, &grads.d_w0)?;
        step_weight(&mut state.w2, &mut state.mom_w2, &grads.d_w2)?;
    }
    Ok(())
}

/// Run the inner loop over all chunks. For each chunk `t`: record
/// `Φ_t(K_t)`, take the gradient step, then emit
/// `O_t = Φ_{t+1}(X_t)·W1_{t+1}` — queries read the post-update weights.
pub fn recurrent_forward(
    chunks: &ChunkSequence,
    state0: &FastWeightState,
    schedule: &UpdateSchedule,
    config: &FastWeightConfig,
) -> Result<(Vec<Mat>, Trajectory)> {
    config.validate()?;
    schedule.len_checked(chunks.len())?;

    let mut state = state0.clone();
    let mut outputs = Vec::with_capacity(chunks.len());
    let mut steps = Vec::with_capacity(chunks.len());
    let dynamic = config.update_gate_weights && config.kernel == KernelKind::SwiGlu;

    for (t, chunk) in chunks.chunks.iter().enumerate() {
        let phi_keys = phi(&chunk.k, &state, config)?;
        let w0_before = dynamic.then(|| state.w0.clone());
        let w2_before = dynamic.then(|| state.w2.clone());
        let w1_before = state.w1.clone();

        let grads = grads_chunk(&state, &chunk.k, &chunk.v, config)?;
        apply_update(&mut state, &grads, schedule.etas[t], schedule.alphas[t], config)?;

        let x = if config.replace_q_with_k { &chunk.k } else { &chunk.q };
        let phi_query = phi(x, &state, config)?;
        let output = phi_query.matmul(&state.w1);

        steps.push(TrajectoryStep {
            w0_before,
            w2_before,
            w1_before,
            w1_after: state.w1.clone(),
            phi_keys,
            phi_query,
            grad_term: chunk.v.scale(-(config.grad_sign as f64)),
            output: output.clone(),
        });
        outputs.push(output);
    }

    Ok((
        outputs,
        Trajectory {
            config: config.clone(),
            w1_0: state0.w1.clone(),
            steps,
        },
    ))
}

/// Output-only variant of [`recurrent_forward`] for benchmarking; skips all
/// trajectory recording.
pub fn recurrent_outputs(
    chunks: &ChunkSequence,
    state0: &FastWeightState,
    schedule: &UpdateSchedule,
    config: &FastWeightConfig,
) -> Result<Vec<Mat>> {
    config.validate()?;
    schedule.len_checked(chunks.len())?;
    let mut state = state0.clone();
    let mut outputs = Vec::with_capacity(chunks.len());
    for (t, chunk) in chunks.chunks.iter().enumerate() {
        let grads = grads_chunk(&state, &chunk.k, &chunk.v, config)?;
        apply_update(&mut state, &grads, schedule.etas[t], schedule.alphas[t], config)?;
        let x = if config.replace_q_with_k { &chunk.k } else { &chunk.q };
        outputs.push(phi(x, &state, config)?.matmul(&state.w1));
    }
    Ok(outputs)
}
