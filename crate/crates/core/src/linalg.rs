//! Small dense helpers that sit outside the autodiff tape.

use crate::numerics::{matvec_raw, Tensor};
use crate::rng::SplitMix64;

/// Rows of a `rows × cols` matrix with orthonormal rows (modified
/// Gram-Schmidt over Gaussian draws). Requires `rows <= cols`.
pub fn orthonormal_rows(rows: usize, cols: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    assert!(rows <= cols, "cannot fit {rows} orthonormal rows in {cols} dims");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = rng.normal_vec(cols, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Degenerate draws are astronomically unlikely; redraw if one happens.
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

/// Random `rows × cols` partial isometry: orthonormal rows when
/// `rows <= cols`, orthonormal columns otherwise.
pub fn random_isometry(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    if rows <= cols {
        return Tensor::from_parts(vec![rows, cols], orthonormal_rows(rows, cols, rng).concat());
    }
    let q = orthonormal_rows(cols, rows, rng);
    let data = (0..rows).flat_map(|i| q.iter().map(move |col| col[i])).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

pub fn random_orthogonal(n: usize, rng: &mut SplitMix64) -> Tensor {
    let rows = orthonormal_rows(n, n, rng);
    Tensor::from_parts(vec![n, n], rows.concat())
}

pub const POWER_ITERATIONS: usize = 50;

/// Spectral radius estimate of a square matrix from power iteration.
///
/// Runs [`POWER_ITERATIONS`] normalised steps from a fixed start vector and
/// returns the geometric-mean growth rate over the second half, which stays
/// well defined when the dominant eigenvalues form a complex pair.
pub fn spectral_radius(a: &Tensor) -> f64 {
    let n = a.rows();
    debug_assert_eq!(a.shape(), &[n, n]);
    let mut rng = SplitMix64::new(0x0005_EED0_FA11);
    let mut x = rng.normal_vec(n, 1.0);
    normalize(&mut x);
    let burn_in = POWER_ITERATIONS / 2;
    let mut log_growth = 0.0;
    for it in 0..POWER_ITERATIONS {
        let mut y = matvec_raw(a.data(), &x, n, n);
        let norm = normalize(&mut y);
        if norm == 0.0 {
            return 0.0;
        }
        if it >= burn_in {
            log_growth += norm.ln();
        }
        x = y;
    }
    (log_growth / (POWER_ITERATIONS - burn_in) as f64).exp()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Exact spectral radius from the eigenvalues.
pub fn spectral_radius_exact(a: &Tensor) -> f64 {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.data());
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    let m = nalgebra::DMatrix::from_row_slice(r, c, a.data());
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}
