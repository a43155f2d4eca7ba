//! Linear time-invariant state space memory layer.
//!
//! The layer runs the recurrence
//!
//! ```text
//! y_t     = C s_t + D h_t
//! s_{t+1} = A s_t + B h_t,        s_0 = 0
//! ```
//!
//! so the output at step `t` sees `h_t` only through the feedthrough `D`
//! and earlier inputs through the state. Unrolled, `y_t = Σ_k G_k h_{t-k}`
//! with kernel `G_0 = D`, `G_k = C A^{k-1} B`, whose z-transform is
//! `D + z C (I - zA)^{-1} B`. [`impulse_response`], [`resolvent_apply`] and
//! [`transfer_function`] compute that closed form and are used to check
//! [`scan`].

pub(crate) mod recurrence;

use crate::error::{Error, Result};
use crate::linalg;
use crate::numerics::{matmul_raw, matvec_raw, Tensor};
use crate::rng::SplitMix64;

pub const PARAM_STD: f64 = 0.02;

/// Spectral radius at which [`enforce_stability`] intervenes.
pub const STABILITY_LIMIT: f64 = 0.999;
/// Target radius after rescaling.
pub const STABILITY_TARGET: f64 = 0.99;
/// Tail tolerance for the truncated resolvent series.
pub const SERIES_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// State transition `[n × n]`.
    pub a: Tensor,
    /// Input map `[n × d]`.
    pub b: Tensor,
    /// Readout `[d × n]`.
    pub c: Tensor,
    /// Feedthrough `[d × d]`.
    pub d: Tensor,
    /// Visual conditioning projection `[d × d_v]`.
    pub w_v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub s: Vec<f64>,
}

impl SsmState {
    pub fn zero(n: usize) -> Self {
        Self { s: vec![0.0; n] }
    }
}

impl SsmParams {
    pub fn from_parts(a: Tensor, b: Tensor, c: Tensor, d: Tensor, w_v: Tensor) -> Result<Self> {
        let p = Self { a, b, c, d, w_v };
        recurrence::check_dims(p.a.shape(), p.b.shape(), p.c.shape(), p.d.shape(), &[1, p.width()])?;
        if p.w_v.shape().len() != 2 || p.w_v.rows() != p.width() {
            return Err(Error::dim("ssm W_v", p.w_v.shape(), &[p.width(), p.w_v.cols()]));
        }
        Ok(p)
    }

    pub fn zeros(n: usize, d: usize, d_v: usize) -> Self {
        Self {
            a: Tensor::zeros(&[n, n]),
            b: Tensor::zeros(&[n, d]),
            c: Tensor::zeros(&[d, n]),
            d: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d_v]),
        }
    }

    pub fn state_size(&self) -> usize {
        self.a.rows()
    }

    pub fn width(&self) -> usize {
        self.d.rows()
    }

    pub fn visual_width(&self) -> usize {
        self.w_v.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [("A", &self.a), ("B", &self.b), ("C", &self.c), ("D", &self.d), ("W_v", &self.w_v)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("A", &mut self.a),
            ("B", &mut self.b),
            ("C", &mut self.c),
            ("D", &mut self.d),
            ("W_v", &mut self.w_v),
        ]
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a)
    }
}

/// `A = scale · Q` with `Q` random orthogonal, so `ρ(A) = scale`; the other
/// matrices are Gaussian with std [`PARAM_STD`].
pub fn init_stable(seed: u64, n: usize, d: usize, d_v: usize, scale: f64) -> Result<SsmParams> {
    if n == 0 || d == 0 || d_v == 0 {
        return Err(Error::contract("ssm sizes must be at least 1"));
    }
    if !(scale > 0.0 && scale < 1.0) {
        return Err(Error::contract(format!("init scale {scale} outside (0, 1)")));
    }
    let mut rng = SplitMix64::new(seed);
    let a = linalg::random_orthogonal(n, &mut rng).scaled(scale);
    let b = Tensor::randn(&[n, d], PARAM_STD, &mut rng);
    let c = Tensor::randn(&[d, n], PARAM_STD, &mut rng);
    let dd = Tensor::randn(&[d, d], PARAM_STD, &mut rng);
    let w_v = Tensor::randn(&[d, d_v], PARAM_STD, &mut rng);
    Ok(SsmParams { a, b, c, d: dd, w_v })
}

fn check_input(params: &SsmParams, h: &Tensor) -> Result<(usize, usize)> {
    let d = params.width();
    if h.shape().len() != 2 || h.cols() != d {
        return Err(Error::dim("ssm input", h.shape(), &[h.rows(), d]));
    }
    Ok((h.rows(), d))
}

/// Step recurrence from `s_0 = 0`. Returns `Y [T×d]`.
pub fn scan(params: &SsmParams, h: &Tensor) -> Result<Tensor> {
    check_input(params, h)?;
    let dims = recurrence::check_dims(
        params.a.shape(),
        params.b.shape(),
        params.c.shape(),
        params.d.shape(),
        h.shape(),
    )?;
    let (y, _) = recurrence::forward(
        params.a.data(),
        params.b.data(),
        params.c.data(),
        params.d.data(),
        h.data(),
        dims,
    );
    Ok(Tensor::from_parts(vec![dims.steps, dims.width], y))
}

/// Single recurrence step: returns `y_t` and advances `state` to `s_{t+1}`.
pub fn step(params: &SsmParams, state: &mut SsmState, h_t: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = (params.state_size(), params.width());
    if h_t.len() != d || state.s.len() != n {
        return Err(Error::dim("ssm step", &[h_t.len(), state.s.len()], &[d, n]));
    }
    let cs = matvec_raw(params.c.data(), &state.s, d, n);
    let dh = matvec_raw(params.d.data(), h_t, d, d);
    let y = cs.iter().zip(&dh).map(|(a, b)| a + b).collect();
    let as_ = matvec_raw(params.a.data(), &state.s, n, n);
    let bh = matvec_raw(params.b.data(), h_t, n, d);
    state.s = as_.iter().zip(&bh).map(|(a, b)| a + b).collect();
    Ok(y)
}

/// Convolution kernel `[G_0, …, G_{K-1}]` with `G_0 = D`, `G_k = C A^{k-1} B`.
pub fn impulse_response(params: &SsmParams, k: usize) -> Vec<Tensor> {
    let (n, d) = (params.state_size(), params.width());
    let mut kernel = Vec::with_capacity(k);
    if k == 0 {
        return kernel;
    }
    kernel.push(params.d.clone());
    // power = A^{j} B, starting at j = 0
    let mut power = params.b.data().to_vec();
    for _ in 1..k {
        let g = matmul_raw(params.c.data(), &power, d, n, d);
        kernel.push(Tensor::from_parts(vec![d, d], g));
        power = matmul_raw(params.a.data(), &power, n, n, d);
    }
    kernel
}

/// Causal convolution `y_t = Σ_{k ≤ t} G_k h_{t-k}`.
pub fn convolve(kernel: &[Tensor], h: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (h.rows(), h.cols());
    if kernel.iter().any(|g| g.shape() != [d, d]) {
        return Err(Error::contract("kernel taps must be d x d"));
    }
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        for (k, g) in kernel.iter().enumerate().take(t + 1) {
            let contrib = matvec_raw(g.data(), h.row(t - k), d, d);
            out[t * d..(t + 1) * d].iter_mut().zip(&contrib).for_each(|(o, c)| *o += c);
        }
    }
    Ok(Tensor::from_parts(vec![t_len, d], out))
}

/// Number of state-path terms `A^0 … A^{K-1}` kept by [`resolvent_apply`]:
/// the smallest `K` with `ρ^K < 1e-12`, and never fewer than `n` so a
/// nilpotent `A` is represented exactly.
pub fn truncation_order(rho: f64, n: usize) -> usize {
    let k = if rho <= 0.0 {
        1
    } else {
        (SERIES_TOLERANCE.ln() / rho.ln()).ceil() as usize + 1
    };
    k.max(n)
}

/// Output through the truncated Neumann series of `(I - zA)^{-1}`:
/// `y_t = D h_t + C Σ_{k<K} A^k B h_{t-1-k}`. Terms beyond the sequence
/// length contribute nothing, so `K` is capped at `T`.
pub fn resolvent_apply(params: &SsmParams, h: &Tensor) -> Result<Tensor> {
    let (t_len, d) = check_input(params, h)?;
    let rho = params.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Stability { rho });
    }
    let n = params.state_size();
    let order = truncation_order(rho, n).min(t_len);

    // bh[j] = B h_j, powers[k] = A^k
    let bh: Vec<Vec<f64>> = (0..t_len).map(|j| matvec_raw(params.b.data(), h.row(j), n, d)).collect();
    let mut powers: Vec<Vec<f64>> = Vec::with_capacity(order);
    let mut p = Tensor::eye(n).into_data();
    for _ in 0..order {
        powers.push(p.clone());
        p = matmul_raw(params.a.data(), &p, n, n, n);
    }

    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let mut acc = vec![0.0; n];
        for (k, ak) in powers.iter().enumerate().take(t) {
            let v = matvec_raw(ak, &bh[t - 1 - k], n, n);
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        let cs = matvec_raw(params.c.data(), &acc, d, n);
        let dh = matvec_raw(params.d.data(), h.row(t), d, d);
        for j in 0..d {
            out[t * d + j] = cs[j] + dh[j];
        }
    }
    Ok(Tensor::from_parts(vec![t_len, d], out))
}

/// Transfer matrix `D + z C (I - zA)^{-1} B` at a real point `z`.
pub fn transfer_function(params: &SsmParams, z: f64) -> Result<Tensor> {
    let (n, d) = (params.state_size(), params.width());
    let a = nalgebra::DMatrix::from_row_slice(n, n, params.a.data());
    let b = nalgebra::DMatrix::from_row_slice(n, d, params.b.data());
    let c = nalgebra::DMatrix::from_row_slice(d, n, params.c.data());
    let dd = nalgebra::DMatrix::from_row_slice(d, d, params.d.data());
    let resolvent = (nalgebra::DMatrix::identity(n, n) - a * z)
        .try_inverse()
        .ok_or_else(|| Error::contract(format!("I - zA singular at z = {z}")))?;
    let g = dd + c * resolvent * b * z;
    // nalgebra is column-major
    let data = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| g[(i, j)]).collect();
    Tensor::new(&[d, d], data)
}

/// `h'_t = h_t + W_v V` for every row.
pub fn condition_on_visual(params: &SsmParams, h: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (_, d) = check_input(params, h)?;
    if v.numel() != params.visual_width() {
        return Err(Error::dim("condition_on_visual", v.shape(), &[params.visual_width()]));
    }
    let bias = matvec_raw(params.w_v.data(), v.data(), d, params.visual_width());
    let data = h
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bias[i % d])
        .collect();
    Ok(Tensor::from_parts(h.shape().to_vec(), data))
}

/// Rescales `A` by `0.99 / ρ̂` when the power-iteration estimate reaches
/// [`STABILITY_LIMIT`]. Returns the estimate that triggered a rescale.
pub fn enforce_stability(params: &mut SsmParams) -> Option<f64> {
    let rho = params.spectral_radius();
    if rho >= STABILITY_LIMIT {
        let s = STABILITY_TARGET / rho;
        params.a.data_mut().iter_mut().for_each(|x| *x *= s);
        Some(rho)
    } else {
        None
    }
}

/// Bound on `‖y_t‖₂` for inputs with `‖h_t‖∞ ≤ 1` when `‖A^k‖₂ ≤ ρ^k`:
/// `√d (‖D‖₂ + ‖C‖₂ ‖B‖₂ / (1 − ρ))`.
pub fn output_bound(params: &SsmParams, rho: f64) -> f64 {
    let d = params.width() as f64;
    let sn = linalg::spectral_norm;
    d.sqrt() * (sn(&params.d) + sn(&params.c) * sn(&params.b) / (1.0 - rho))
}
