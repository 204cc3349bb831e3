//! Raw `f64` kernels and a plain matrix type.
//!
//! Both the autodiff forward ops and the no-grad inference path call these
//! functions, so the two paths perform bit-identical arithmetic whenever they
//! see the same inputs.  Every reduction runs in a fixed ascending order; the
//! cache-consistency guarantee (incremental decoding equals the full forward
//! bit for bit) rests on that.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ── plain matrices ─────────────────────────────────────────────────────────

/// Row-major `f64` matrix used by the no-grad inference paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Append the rows of `other`; column counts must agree.
    pub fn push_rows(&mut self, other: &Mat) -> Result<()> {
        if self.rows > 0 && self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot append {} columns to {} columns",
                other.cols, self.cols
            )));
        }
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }
}

// ── matrix products ────────────────────────────────────────────────────────

/// `c[m,n] = a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += a_ik * b_row[j];
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`: rows of `b` are the right-hand columns.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[m,n] = a[k,m]^T * b[k,n]` — used by matmul gradients.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let a_ki = a_row[i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_ki * b_row[j];
            }
        }
    }
    c
}

// ── row-wise nonlinearities ────────────────────────────────────────────────

/// In-place temperature softmax over one row; max-subtracted for stability.
/// `-inf` entries come out as exact zeros, so masked columns never perturb
/// the unmasked sums.
pub fn softmax_row(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        denom += *x;
    }
    for x in row.iter_mut() {
        *x /= denom;
    }
}

/// Layer norm of `x` into `out` with elementwise gain and bias.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv_std * gain[i] + bias[i];
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)` — smooth, so finite-difference checks
/// behave everywhere.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of SiLU: `s(x) * (1 + x * (1 - s(x)))`.
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

// ── vector helpers ─────────────────────────────────────────────────────────

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; errors on a zero vector, where it is undefined.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of length {} vs length {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Scale `v` to unit L2 norm; errors on a zero vector.
pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::Numeric("cannot L2-normalize a zero vector".into()));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Standard normal sample via Box–Muller, driven by a seeded stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, -1.0, 1.0, 0.5]; // 2x3, used as 3x2 transposed
        let via_nt = matmul_nt(&a, &b, 2, 3, 2);
        let bt = [1.0, -1.0, 0.0, 1.0, 2.0, 0.5]; // 3x2
        let direct = matmul(&a, &bt, 2, 3, 2);
        assert_eq!(via_nt, direct);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let via_tn = matmul_tn(&a, &b, 3, 2, 2);
        let at = [1.0, 3.0, 5.0, 2.0, 4.0, 6.0]; // 2x3
        let direct = matmul(&at, &b, 2, 3, 2);
        assert_eq!(via_tn, direct);
    }

    #[test]
    fn softmax_row_sums_to_one_and_zeroes_masked_entries() {
        let mut row = [1.0, 2.0, f64::NEG_INFINITY, 0.5];
        softmax_row(&mut row, 1.0);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn layer_norm_row_zero_mean_unit_var() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let gain = [1.0; 4];
        let bias = [0.0; 4];
        let mut out = [0.0; 4];
        layer_norm_row(&x, &gain, &bias, &mut out);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cosine_of_known_pair() {
        // cos((1,1),(1,0)) = sqrt(2)/2
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_an_error() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn gaussian_moments_are_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..20_000).map(|_| gaussian(&mut rng)).collect();
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
