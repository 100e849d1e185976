//! Depthwise 3×3 convolution fast-weight component. Zero padding, stride 1,
//! same-size output, so the weight-gradient cross-correlation's
//! out-of-bounds terms vanish naturally. One gradient step turns the
//! updated convolution into the initial convolution plus a spatially local
//! attention term whose weights are 3×3 neighborhood overlaps.

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

const OFFSETS: [isize; 3] = [-1, 0, 1];

/// `C×H×W` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        SpatialMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn random(rng: &mut Rng, channels: usize, height: usize, width: usize, std: f64) -> Self {
        let mut m = SpatialMap::zeros(channels, height, width);
        for x in &mut m.data {
            *x = rng.standard_normal() * std;
        }
        m
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    /// Zero-padded read at possibly out-of-range coordinates.
    pub fn at_padded(&self, c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.height as isize || j >= self.width as isize {
            0.0
        } else {
            self.get(c, i as usize, j as usize)
        }
    }

    pub fn max_abs_diff(&self, other: &SpatialMap) -> f64 {
        assert_eq!(self.dims(), other.dims(), "spatial dims");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-channel stack of 3×3 kernels, offset order `(δy, δx)` row-major over
/// `{-1, 0, 1}²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvState {
    channels: usize,
    weights: Vec<f64>,
}

impl ConvState {
    pub fn zeros(channels: usize) -> Self {
        ConvState {
            channels,
            weights: vec![0.0; channels * 9],
        }
    }

    /// Centered delta kernels: convolution becomes the identity map.
    pub fn delta(channels: usize) -> Self {
        let mut s = ConvState::zeros(channels);
        for c in 0..channels {
            s.set(c, 0, 0, 1.0);
        }
        s
    }

    pub fn random(rng: &mut Rng, channels: usize, std: f64) -> Self {
        let mut s = ConvState::zeros(channels);
        for w in &mut s.weights {
            *w = rng.standard_normal() * std;
        }
        s
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, c: usize, dy: isize, dx: isize) -> f64 {
        self.weights[c * 9 + ((dy + 1) * 3 + (dx + 1)) as usize]
    }

    pub fn set(&mut self, c: usize, dy: isize, dx: isize, v: f64) {
        self.weights[c * 9 + ((dy + 1) * 3 + (dx + 1)) as usize] = v;
    }

    pub fn add_scaled(&mut self, other: &ConvState, s: f64) {
        assert_eq!(self.channels, other.channels, "channel counts");
        for (a, &b) in self.weights.iter_mut().zip(other.weights.iter()) {
            *a += s * b;
        }
    }

    pub fn max_abs_diff(&self, other: &ConvState) -> f64 {
        self.weights
            .iter()
            .zip(other.weights.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }
}

fn check_dims(op: &'static str, x: &SpatialMap, state: &ConvState) -> Result<()> {
    if x.dims().0 != state.channels() {
        return Err(Error::shape(
            op,
            format!("{} channels vs {} kernels", x.dims().0, state.channels()),
        ));
    }
    Ok(())
}

/// Per-channel 3×3 convolution with zero padding:
/// `out[c,i,j] = Σ_{δ} w[c,δ]·x[c,i+δy,j+δx]`.
pub fn dwconv_forward(x: &SpatialMap, state: &ConvState) -> Result<SpatialMap> {
    check_dims("dwconv_forward", x, state)?;
    let (c_n, h, w) = x.dims();
    let mut out = SpatialMap::zeros(c_n, h, w);
    for c in 0..c_n {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for &dy in &OFFSETS {
                    for &dx in &OFFSETS {
                        acc += state.get(c, dy, dx)
                            * x.at_padded(c, i as isize + dy, j as isize + dx);
                    }
                }
                out.set(c, i, j, acc);
            }
        }
    }
    Ok(out)
}

/// Kernel gradient of the binding loss `−⟨Conv(K), V⟩`:
/// `grad[c,δ] = −Σ_{i,j} K[c,i+δy,j+δx]·V[c,i,j]`, zero outside bounds.
pub fn dwconv_grad(k: &SpatialMap, v: &SpatialMap) -> Result<ConvState> {
    if k.dims() != v.dims() {
        return Err(Error::shape(
            "dwconv_grad",
            format!("{:?} vs {:?}", k.dims(), v.dims()),
        ));
    }
    let (c_n, h, w) = k.dims();
    let mut grad = ConvState::zeros(c_n);
    for c in 0..c_n {
        for &dy in &OFFSETS {
            for &dx in &OFFSETS {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += k.at_padded(c, i as isize + dy, j as isize + dx) * v.get(c, i, j);
                    }
                }
                grad.set(c, dy, dx, -acc);
            }
        }
    }
    Ok(grad)
}

/// Neighborhood-overlap attention weight between query position `(i,j)` and
/// key position `(i',j')` for one channel:
/// `Σ_{δ} Q[c,i+δ]·K[c,i'+δ]`. Returned as an `HW×HW` table.
pub fn spatial_attention_weights(q: &SpatialMap, k: &SpatialMap, c: usize) -> Result<Mat> {
    if q.dims() != k.dims() {
        return Err(Error::shape(
            "spatial_attention_weights",
            format!("{:?} vs {:?}", q.dims(), k.dims()),
        ));
    }
    let (_, h, w) = q.dims();
    Ok(Mat::from_fn(h * w, h * w, |p, p2| {
        let (i, j) = (p / w, p % w);
        let (i2, j2) = (p2 / w, p2 % w);
        let mut acc = 0.0;
        for &dy in &OFFSETS {
            for &dx in &OFFSETS {
                acc += q.at_padded(c, i as isize + dy, j as isize + dx)
                    * k.at_padded(c, i2 as isize + dy, j2 as isize + dx);
            }
        }
        acc
    }))
}

/// Result of one convolutional gradient step.
#[derive(Debug, Clone)]
pub struct ConvStepOutput {
    /// Spatial-attention form: initial-kernel convolution plus
    /// overlap-weighted value mixing.
    pub output: SpatialMap,
    /// Convolution of the queries with the updated kernel.
    pub updated_eval: SpatialMap,
    pub max_abs_gap: f64,
}

/// Descent step on the kernel followed by evaluation at `Q`; the state is
/// advanced in place and the spatial-attention form is returned.
pub fn dwconv_step_and_eval(
    state: &mut ConvState,
    q: &SpatialMap,
    k: &SpatialMap,
    v: &SpatialMap,
    eta: f64,
) -> Result<ConvStepOutput> {
    if eta < 0.0 {
        return Err(Error::InvalidConfig(format!("negative learning rate {eta}")));
    }
    check_dims("dwconv_step_and_eval", q, state)?;
    if q.dims() != k.dims() || k.dims() != v.dims() {
        return Err(Error::shape(
            "dwconv_step_and_eval",
            format!("Q {:?} K {:?} V {:?}", q.dims(), k.dims(), v.dims()),
        ));
    }
    let before = dwconv_forward(q, state)?;
    let grad = dwconv_grad(k, v)?;
    state.add_scaled(&grad, -eta);
    let updated_eval = dwconv_forward(q, state)?;

    let (c_n, h, w) = q.dims();
    let mut output = before;
    for c in 0..c_n {
        for i in 0..h {
            for j in 0..w {
                let mut mixed = 0.0;
                for i2 in 0..h {
                    for j2 in 0..w {
                        let mut weight = 0.0;
                        for &dy in &OFFSETS {
                            for &dx in &OFFSETS {
                                weight += q.at_padded(c, i as isize + dy, j as isize + dx)
                                    * k.at_padded(c, i2 as isize + dy, j2 as isize + dx);
                            }
                        }
                        mixed += weight * v.get(c, i2, j2);
                    }
                }
                output.set(c, i, j, output.get(c, i, j) + eta * mixed);
            }
        }
    }
    let max_abs_gap = output.max_abs_diff(&updated_eval);
    Ok(ConvStepOutput { output, updated_eval, max_abs_gap })
}

/// Multi-step run recording what the additive reconstruction needs.
pub struct ConvTrajectory {
    pub w_0: ConvState,
    pub keys: Vec<SpatialMap>,
    pub values: Vec<SpatialMap>,
    pub outputs: Vec<SpatialMap>,
}

pub fn dwconv_recurrent(
    state0: &ConvState,
    steps: &[(SpatialMap, SpatialMap, SpatialMap)],
    eta: f64,
) -> Result<(ConvState, ConvTrajectory)> {
    let mut state = state0.clone();
    let mut traj = ConvTrajectory {
        w_0: state0.clone(),
        keys: Vec::with_capacity(steps.len()),
        values: Vec::with_capacity(steps.len()),
        outputs: Vec::with_capacity(steps.len()),
    };
    for (q, k, v) in steps {
        let out = dwconv_step_and_eval(&mut state, q, k, v, eta)?;
        traj.keys.push(k.clone());
        traj.values.push(v.clone());
        traj.outputs.push(out.updated_eval);
    }
    Ok((state, traj))
}

/// Rebuild every output from the initial kernel plus per-step attention
/// terms; the kernel update is additive, so the sum over history is exact.
pub fn dwconv_rebuild(
    traj: &ConvTrajectory,
    queries: &[SpatialMap],
    eta: f64,
) -> Result<Vec<SpatialMap>> {
    if queries.len() != traj.keys.len() {
        return Err(Error::shape(
            "dwconv_rebuild",
            format!("{} queries for {} steps", queries.len(), traj.keys.len()),
        ));
    }
    let mut outputs = Vec::with_capacity(queries.len());
    for t in 0..queries.len() {
        let q = &queries[t];
        let (c_n, h, w) = q.dims();
        let mut out = dwconv_forward(q, &traj.w_0)?;
        for i_step in 0..=t {
            let k = &traj.keys[i_step];
            let v = &traj.values[i_step];
            for c in 0..c_n {
                for i in 0..h {
                    for j in 0..w {
                        let mut mixed = 0.0;
                        for i2 in 0..h {
                            for j2 in 0..w {
                                let mut weight = 0.0;
                                for &dy in &OFFSETS {
                                    for &dx in &OFFSETS {
                                        weight += q.at_padded(c, i as isize + dy, j as isize + dx)
                                            * k.at_padded(c, i2 as isize + dy, j2 as isize + dx);
                                    }
                                }
                                mixed += weight * v.get(c, i2, j2);
                            }
                        }
                        out.set(c, i, j, out.get(c, i, j) + eta * mixed);
                    }
                }
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}
