//! Raw forward and adjoint kernels of the linear recurrence, shared by the
//! tape op and the tape-free [`super::scan`].

use crate::error::{Error, Result};
use crate::numerics::{matvec_raw, matvec_t_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub state: usize,
    pub width: usize,
    pub steps: usize,
}

pub fn check_dims(a: &[usize], b: &[usize], c: &[usize], d: &[usize], h: &[usize]) -> Result<ScanDims> {
    if a.len() != 2 || a[0] != a[1] {
        return Err(Error::dim("ssm_scan A", a, &[a[0], a[0]]));
    }
    let n = a[0];
    if h.len() != 2 {
        return Err(Error::contract("ssm_scan input must be 2-D [T x d]"));
    }
    let (steps, width) = (h[0], h[1]);
    if b != [n, width] {
        return Err(Error::dim("ssm_scan B", b, &[n, width]));
    }
    if c != [width, n] {
        return Err(Error::dim("ssm_scan C", c, &[width, n]));
    }
    if d != [width, width] {
        return Err(Error::dim("ssm_scan D", d, &[width, width]));
    }
    Ok(ScanDims {
        state: n,
        width,
        steps,
    })
}

/// Returns `(Y [T×d], states [T×n])` where `states` row `t` holds `s_t`.
pub fn forward(a: &[f64], b: &[f64], c: &[f64], d: &[f64], h: &[f64], dims: ScanDims) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { state: n, width, steps } = dims;
    let mut y = Vec::with_capacity(steps * width);
    let mut states = Vec::with_capacity(steps * n);
    let mut s = vec![0.0; n];
    for t in 0..steps {
        let ht = &h[t * width..(t + 1) * width];
        states.extend_from_slice(&s);
        let cs = matvec_raw(c, &s, width, n);
        let dh = matvec_raw(d, ht, width, width);
        y.extend(cs.iter().zip(&dh).map(|(p, q)| p + q));
        let as_ = matvec_raw(a, &s, n, n);
        let bh = matvec_raw(b, ht, n, width);
        s = as_.iter().zip(&bh).map(|(p, q)| p + q).collect();
    }
    (y, states)
}

pub struct ScanGrads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub h: Vec<f64>,
}

fn outer_into(dst: &mut [f64], u: &[f64], v: &[f64]) {
    let c = v.len();
    for (i, ui) in u.iter().enumerate() {
        if *ui == 0.0 {
            continue;
        }
        for (j, vj) in v.iter().enumerate() {
            dst[i * c + j] += ui * vj;
        }
    }
}

/// Backpropagation through time. With adjoint `λ_t = ∂L/∂s_t`:
/// `λ_T = 0`, `λ_t = Cᵀ g_t + Aᵀ λ_{t+1}`.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    h: &[f64],
    states: &[f64],
    gy: &[f64],
    dims: ScanDims,
) -> ScanGrads {
    let ScanDims { state: n, width, steps } = dims;
    let mut g = ScanGrads {
        a: vec![0.0; n * n],
        b: vec![0.0; n * width],
        c: vec![0.0; width * n],
        d: vec![0.0; width * width],
        h: vec![0.0; steps * width],
    };
    let mut lam_next = vec![0.0; n];
    for t in (0..steps).rev() {
        let ht = &h[t * width..(t + 1) * width];
        let st = &states[t * n..(t + 1) * n];
        let gt = &gy[t * width..(t + 1) * width];

        outer_into(&mut g.a, &lam_next, st);
        outer_into(&mut g.b, &lam_next, ht);
        outer_into(&mut g.c, gt, st);
        outer_into(&mut g.d, gt, ht);

        let dh = matvec_t_raw(d, gt, width, width);
        let bl = matvec_t_raw(b, &lam_next, n, width);
        for (j, slot) in g.h[t * width..(t + 1) * width].iter_mut().enumerate() {
            *slot = dh[j] + bl[j];
        }

        let ct = matvec_t_raw(c, gt, width, n);
        let at = matvec_t_raw(a, &lam_next, n, n);
        lam_next = ct.iter().zip(&at).map(|(p, q)| p + q).collect();
    }
    g
}
