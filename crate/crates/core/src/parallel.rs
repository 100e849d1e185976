//! Chunk-parallel execution for static-kernel, unnormalized configurations.
//!
//! Two equivalent routes compute all chunk outputs at once:
//!
//! - the bilinear form `O = Φ(Q)·W1_0 + ((Φ(Q)Φ(K)ᵀ) ⊙ 𝒞^{↑L})·Ṽ`, which
//!   materializes the full `(NL)×(NL)` score matrix (fine at desk scale),
//! - an associative prefix scan over per-chunk state contributions, which
//!   carries momentum through the scan element instead of a mask.
//!
//! The momentum mask 𝒞 holds the *summed* coefficient
//! `𝒞_{t,i} = Σ_{j=i..t} β_i^j`; that is the value that matches the
//! sequential recurrence (with α ≡ 0 it is the all-ones causal triangle,
//! i.e. plain accumulation). Dynamic kernels and weight normalization break
//! the sum form; [`demonstrate_non_associativity`] measures exactly that.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastweight::{
    recurrent_forward, ChunkSequence, FastWeightConfig, FastWeightState, KernelKind,
    Trajectory, UpdateSchedule,
};
use crate::numerics::{ns_orthogonalize, Mat, Rng};

// Re-export so callers build kernels without reaching into fastweight.
pub use crate::fastweight::swiglu_phi;

/// Execution strategy tag, carried into benchmark records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bilinear,
    Scan,
}

/// Work partitioning. `Deterministic` is the single-partition mode; results
/// of `Threaded` runs match it bit-for-bit for the bilinear path (row
/// partitioning never reorders a reduction) and to 1e-12 for the scan path
/// (segment boundaries reassociate the prefix combine).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threading {
    Deterministic,
    Threaded,
}

/// Chunk count, chunk length, schedule and execution choices for one
/// parallel run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub num_chunks: usize,
    pub chunk_len: usize,
    pub etas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub strategy: Strategy,
    pub threading: Threading,
}

impl ParallelPlan {
    pub fn new(schedule: &UpdateSchedule, num_chunks: usize, chunk_len: usize) -> Self {
        ParallelPlan {
            num_chunks,
            chunk_len,
            etas: schedule.etas.clone(),
            alphas: schedule.alphas.clone(),
            strategy: Strategy::Bilinear,
            threading: Threading::Deterministic,
        }
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_threading(mut self, threading: Threading) -> Self {
        self.threading = threading;
        self
    }

    fn validate(&self, chunks: &ChunkSequence) -> Result<()> {
        if chunks.len() != self.num_chunks {
            return Err(Error::UnsupportedConfig(format!(
                "plan covers {} chunks, input has {}",
                self.num_chunks,
                chunks.len()
            )));
        }
        if self.etas.len() != self.num_chunks || self.alphas.len() != self.num_chunks {
            return Err(Error::UnsupportedConfig(format!(
                "plan schedule lengths {}/{} for {} chunks",
                self.etas.len(),
                self.alphas.len(),
                self.num_chunks
            )));
        }
        if chunks.chunks.iter().any(|c| c.q.rows() != self.chunk_len) {
            return Err(Error::UnsupportedConfig(
                "chunk length differs from plan".into(),
            ));
        }
        Ok(())
    }
}

/// The fixed kernel function shared by all chunks of a parallel run.
#[derive(Debug, Clone, Copy)]
pub enum StaticKernel<'a> {
    SwiGlu { w0: &'a Mat, w2: &'a Mat },
    Identity,
}

impl StaticKernel<'_> {
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        match self {
            StaticKernel::SwiGlu { w0, w2 } => swiglu_phi(x, w0, w2),
            StaticKernel::Identity => Ok(x.clone()),
        }
    }

    /// Borrow the static kernel out of a fast-weight state.
    pub fn from_state<'a>(
        state: &'a FastWeightState,
        config: &FastWeightConfig,
    ) -> StaticKernel<'a> {
        match config.kernel {
            KernelKind::SwiGlu => StaticKernel::SwiGlu { w0: &state.w0, w2: &state.w2 },
            KernelKind::Identity => StaticKernel::Identity,
        }
    }
}

/// Reject configurations whose recurrence has no parallel form (dynamic
/// kernel, weight normalization) or that the requested strategy cannot
/// express (orthogonalization in the bilinear path; orthogonalization with
/// momentum in the scan path).
pub fn check_parallel_eligibility(
    config: &FastWeightConfig,
    strategy: Strategy,
    per_term_orth: bool,
) -> Result<()> {
    if config.update_gate_weights {
        return Err(Error::UnsupportedConfig(
            "dynamic kernel makes the state recurrence non-associative".into(),
        ));
    }
    if config.use_weight_norm {
        return Err(Error::UnsupportedConfig(
            "weight normalization makes the state recurrence non-associative".into(),
        ));
    }
    match strategy {
        Strategy::Bilinear => {
            if config.use_muon {
                return Err(Error::UnsupportedConfig(
                    "the bilinear form has no per-term orthogonalization".into(),
                ));
            }
        }
        Strategy::Scan => {
            if config.use_muon && !per_term_orth {
                return Err(Error::UnsupportedConfig(
                    "orthogonalized configs need the per-term scan form".into(),
                ));
            }
            if config.use_muon && config.use_momentum {
                return Err(Error::UnsupportedConfig(
                    "per-term orthogonalization is exact only with momentum off".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Momentum-weight mask 𝒞: entry `(t,i) = Σ_{j=i..t} β_i^j` for `t ≥ i`,
/// zero above the diagonal.
pub fn build_momentum_mask(alphas: &[f64], n: usize) -> Mat {
    assert!(n >= 1 && alphas.len() >= n, "mask needs n alphas");
    let mut mask = Mat::zeros(n, n);
    for i in 0..n {
        let mut beta = 1.0;
        let mut acc = 1.0;
        mask.set_entry(i, i, 1.0);
        for t in i + 1..n {
            beta *= alphas[t];
            acc += beta;
            mask.set_entry(t, i, acc);
        }
    }
    mask
}

/// Kronecker product with the `L×L` all-ones block: every entry of `c`
/// replicated into an `L×L` block.
pub fn expand_mask(c: &Mat, l: usize) -> Mat {
    assert!(l >= 1, "expand_mask needs L >= 1");
    Mat::from_fn(c.rows() * l, c.cols() * l, |r, col| c.entry(r / l, col / l))
}

fn matmul_maybe_par(a: &Mat, b: &Mat, threaded: bool) -> Mat {
    if !threaded || a.rows() < 2 {
        return a.matmul(b);
    }
    let rows_per = a.rows().div_ceil(rayon::current_num_threads().max(1));
    let blocks: Vec<Mat> = (0..a.rows().div_ceil(rows_per))
        .into_par_iter()
        .map(|bi| {
            let start = bi * rows_per;
            let count = rows_per.min(a.rows() - start);
            a.row_block(start, count).matmul(b)
        })
        .collect();
    Mat::vstack(&blocks.iter().collect::<Vec<_>>())
}

fn matmul_a_bt_maybe_par(a: &Mat, b: &Mat, threaded: bool) -> Mat {
    if !threaded || a.rows() < 2 {
        return a.matmul_a_bt(b);
    }
    let rows_per = a.rows().div_ceil(rayon::current_num_threads().max(1));
    let blocks: Vec<Mat> = (0..a.rows().div_ceil(rows_per))
        .into_par_iter()
        .map(|bi| {
            let start = bi * rows_per;
            let count = rows_per.min(a.rows() - start);
            a.row_block(start, count).matmul_a_bt(b)
        })
        .collect();
    Mat::vstack(&blocks.iter().collect::<Vec<_>>())
}

fn concat_inputs(chunks: &ChunkSequence) -> (Mat, Mat, Mat) {
    let qs: Vec<&Mat> = chunks.chunks.iter().map(|c| &c.q).collect();
    let ks: Vec<&Mat> = chunks.chunks.iter().map(|c| &c.k).collect();
    let vs: Vec<&Mat> = chunks.chunks.iter().map(|c| &c.v).collect();
    (Mat::vstack(&qs), Mat::vstack(&ks), Mat::vstack(&vs))
}

fn split_outputs(full: &Mat, n: usize, l: usize) -> Vec<Mat> {
    (0..n).map(|t| full.row_block(t * l, l)).collect()
}

/// Masked bilinear form:
/// `O = Φ(Q)·W1_0 + ((Φ(Q)·Φ(K)ᵀ) ⊙ 𝒞^{↑L})·Ṽ` with `Ṽ` the values scaled
/// row-wise by their chunk's learning rate. The caller guarantees a static
/// kernel with no weight normalization or orthogonalization; the plan is
/// checked against the inputs.
pub fn parallel_forward_bilinear(
    chunks: &ChunkSequence,
    w1_0: &Mat,
    kernel: StaticKernel,
    plan: &ParallelPlan,
) -> Result<Vec<Mat>> {
    plan.validate(chunks)?;
    if chunks.is_empty() {
        return Ok(vec![]);
    }
    let threaded = plan.threading == Threading::Threaded;
    let (q, k, v) = concat_inputs(chunks);
    let phi_q = kernel.apply(&q)?;
    let phi_k = kernel.apply(&k)?;
    if phi_q.cols() != w1_0.rows() || v.cols() != w1_0.cols() {
        return Err(Error::shape(
            "parallel_forward_bilinear",
            format!(
                "φ width {} / value width {} vs state {}x{}",
                phi_q.cols(),
                v.cols(),
                w1_0.rows(),
                w1_0.cols()
            ),
        ));
    }

    let l = plan.chunk_len;
    let vtilde = Mat::from_fn(v.rows(), v.cols(), |r, c| v.entry(r, c) * plan.etas[r / l]);
    let mask = expand_mask(&build_momentum_mask(&plan.alphas, plan.num_chunks), l);

    let scores = matmul_a_bt_maybe_par(&phi_q, &phi_k, threaded);
    let masked = scores.hadamard(&mask);
    let mut out = matmul_maybe_par(&phi_q, w1_0, threaded);
    out = out.add(&matmul_maybe_par(&masked, &vtilde, threaded));
    Ok(split_outputs(&out, plan.num_chunks, l))
}

/// Carrier for the momentum-and-sum prefix scan. Composing elements of the
/// recurrence `P_t = α_t·P_{t-1} + X_t`, `S_t = S_{t-1} + P_t` over a
/// segment requires, besides the running pair `(P, S)`, the segment's
/// momentum product `a` and the weight `w` its internal momentum prefixes
/// assign to an incoming `P`.
#[derive(Debug, Clone)]
pub struct ScanElement {
    pub p: Mat,
    pub s: Mat,
    pub a: f64,
    pub w: f64,
}

impl ScanElement {
    /// Monoid identity: `(P=0, S=0, a=1, w=0)`.
    pub fn identity(d_h: usize, d_v: usize) -> Self {
        ScanElement {
            p: Mat::zeros(d_h, d_v),
            s: Mat::zeros(d_h, d_v),
            a: 1.0,
            w: 0.0,
        }
    }

    /// Single step with contribution `x` and momentum factor `alpha`.
    pub fn from_step(x: Mat, alpha: f64) -> Self {
        ScanElement {
            s: x.clone(),
            p: x,
            a: alpha,
            w: alpha,
        }
    }
}

/// Associative composition of two scan segments:
///
/// ```text
/// a = a_l·a_r
/// P = a_r·P_l + P_r
/// S = S_l + S_r + w_r·P_l
/// w = w_l + a_l·w_r
/// ```
pub fn scan_combine(left: &ScanElement, right: &ScanElement) -> Result<ScanElement> {
    if !left.p.same_shape(&right.p) || !left.s.same_shape(&right.s) {
        return Err(Error::shape(
            "scan_combine",
            format!(
                "{}x{} against {}x{}",
                left.p.rows(),
                left.p.cols(),
                right.p.rows(),
                right.p.cols()
            ),
        ));
    }
    let mut p = right.p.clone();
    p.add_assign_scaled(&left.p, right.a);
    let mut s = left.s.add(&right.s);
    s.add_assign_scaled(&left.p, right.w);
    Ok(ScanElement {
        p,
        s,
        a: left.a * right.a,
        w: left.w + left.a * right.w,
    })
}

/// Inclusive prefix scan; sequential fold in deterministic mode, segmented
/// three-phase scan when threaded.
fn inclusive_scan(elements: Vec<ScanElement>, threaded: bool) -> Result<Vec<ScanElement>> {
    if elements.is_empty() {
        return Ok(vec![]);
    }
    if !threaded || elements.len() < 4 {
        let mut out: Vec<ScanElement> = Vec::with_capacity(elements.len());
        return sequential_scan(elements, &mut out).map(|_| out);
    }
    let segments = rayon::current_num_threads().clamp(1, elements.len());
    let seg_len = elements.len().div_ceil(segments);
    let chunks: Vec<Vec<ScanElement>> = elements
        .chunks(seg_len)
        .map(|c| c.to_vec())
        .collect();
    // Phase 1: local inclusive scans.
    let local: Vec<Vec<ScanElement>> = chunks
        .into_par_iter()
        .map(|seg| {
            let mut out = Vec::with_capacity(seg.len());
            sequential_scan(seg, &mut out).map(|_| out)
        })
        .collect::<Result<_>>()?;
    // Phase 2: exclusive scan of segment totals.
    let mut prefix: Vec<Option<ScanElement>> = Vec::with_capacity(local.len());
    let mut running: Option<ScanElement> = None;
    for seg in &local {
        prefix.push(running.clone());
        let total = seg.last().expect("non-empty segment");
        running = Some(match &running {
            None => total.clone(),
            Some(r) => scan_combine(r, total)?,
        });
    }
    // Phase 3: fold the carried prefix into each local result.
    let out: Vec<Vec<ScanElement>> = local
        .into_par_iter()
        .zip(prefix)
        .map(|(seg, carried)| match carried {
            None => Ok(seg),
            Some(carry) => seg
                .iter()
                .map(|e| scan_combine(&carry, e))
                .collect::<Result<Vec<_>>>(),
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn sequential_scan(elements: Vec<ScanElement>, out: &mut Vec<ScanElement>) -> Result<()> {
    let mut acc: Option<ScanElement> = None;
    for e in elements {
        let next = match &acc {
            None => e,
            Some(a) => scan_combine(a, &e)?,
        };
        out.push(next.clone());
        acc = Some(next);
    }
    Ok(())
}

/// Prefix-scan form: per chunk `i` the contribution
/// `X_i = T(Φ(K_i)ᵀ·(η_i·V_i))` enters the momentum recurrence, where `T`
/// is Newton–Schulz orthogonalization when `per_term_orth` is set and the
/// identity otherwise; outputs are `O_t = Φ(Q_t)·(W1_0 + S_t)`. Equals the
/// bilinear path (≤1e-12) when `per_term_orth` is false.
pub fn parallel_forward_scan(
    chunks: &ChunkSequence,
    w1_0: &Mat,
    kernel: StaticKernel,
    plan: &ParallelPlan,
    per_term_orth: bool,
) -> Result<Vec<Mat>> {
    plan.validate(chunks)?;
    if chunks.is_empty() {
        return Ok(vec![]);
    }
    let threaded = plan.threading == Threading::Threaded;

    let make_element = |(i, chunk): (usize, &crate::fastweight::Chunk)| -> Result<(Mat, ScanElement)> {
        let phi_k = kernel.apply(&chunk.k)?;
        if phi_k.cols() != w1_0.rows() || chunk.v.cols() != w1_0.cols() {
            return Err(Error::shape(
                "parallel_forward_scan",
                format!("chunk {i} widths vs state {}x{}", w1_0.rows(), w1_0.cols()),
            ));
        }
        let mut x = phi_k.matmul_at_b(&chunk.v.scale(plan.etas[i]));
        if per_term_orth {
            x = match ns_orthogonalize(&x) {
                Ok(m) => m,
                Err(Error::ZeroGradient) => Mat::zeros(x.rows(), x.cols()),
                Err(e) => return Err(e),
            };
        }
        let phi_q = kernel.apply(&chunk.q)?;
        Ok((phi_q, ScanElement::from_step(x, plan.alphas[i])))
    };

    let parts: Vec<(Mat, ScanElement)> = if threaded {
        chunks
            .chunks
            .par_iter()
            .enumerate()
            .map(make_element)
            .collect::<Result<_>>()?
    } else {
        chunks
            .chunks
            .iter()
            .enumerate()
            .map(make_element)
            .collect::<Result<_>>()?
    };
    let (phi_qs, elements): (Vec<Mat>, Vec<ScanElement>) = parts.into_iter().unzip();

    let prefixes = inclusive_scan(elements, threaded)?;
    let emit = |(phi_q, prefix): (&Mat, &ScanElement)| phi_q.matmul(&w1_0.add(&prefix.s));
    let outputs: Vec<Mat> = if threaded {
        phi_qs.par_iter().zip(prefixes.par_iter()).map(emit).collect()
    } else {
        phi_qs.iter().zip(prefixes.iter()).map(emit).collect()
    };
    Ok(outputs)
}

/// Outcome of running a non-reducible configuration both ways.
#[derive(Debug, Clone)]
pub struct NonAssocReport {
    pub recurrent: Vec<Mat>,
    pub sum_form: Vec<Mat>,
    pub max_abs_gap: f64,
}

/// Default shape for the non-associativity demonstration.
pub const NONASSOC_CHUNKS: usize = 4;
const NONASSOC_ETA: f64 = 0.1;

/// Run the recurrent path under `config` and the (invalid under weight
/// normalization or a dynamic kernel) static sum-form reconstruction on the
/// same inputs, and report their gap. With both toggles off this is a
/// control run and the gap collapses to rounding noise.
pub fn demonstrate_non_associativity(
    config: &FastWeightConfig,
    seed: u64,
) -> Result<NonAssocReport> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let state = FastWeightState::init(config, &mut rng)?;
    let n = NONASSOC_CHUNKS;
    let chunks = ChunkSequence::random(&mut rng, n, config.chunk_len, config.d_k, config.d_v, 1.0);
    let schedule = UpdateSchedule::constant(n, NONASSOC_ETA, 0.0);

    let (recurrent, _) = recurrent_forward(&chunks, &state, &schedule, config)?;

    // Sum form: pretend the kernel stayed at its initial weights and no
    // normalization happened.
    let plan = ParallelPlan::new(&schedule, n, config.chunk_len);
    let kernel = StaticKernel::from_state(&state, config);
    let sum_form = parallel_forward_bilinear(&chunks, &state.w1, kernel, &plan)?;

    let max_abs_gap = recurrent
        .iter()
        .zip(sum_form.iter())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    Ok(NonAssocReport { recurrent, sum_form, max_abs_gap })
}

/// Convenience: recurrent trajectory for a parallel-eligible config, used
/// by suites comparing all three routes.
pub fn recurrent_reference(
    chunks: &ChunkSequence,
    state: &FastWeightState,
    schedule: &UpdateSchedule,
    config: &FastWeightConfig,
) -> Result<(Vec<Mat>, Trajectory)> {
    recurrent_forward(chunks, state, schedule, config)
}
