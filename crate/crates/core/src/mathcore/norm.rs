use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::trace::{self, ELEMENTWISE_REDUCTION_FLOPS};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;

/// Per-dimension gain plus the variance floor of a normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub scale: Vec<f64>,
    pub eps: f64,
}

impl NormParams {
    /// Unit gain, default epsilon.
    pub fn unit(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn with_eps(dim: usize, eps: f64) -> Self {
        Self {
            scale: vec![1.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            scale: vec![0.0; self.scale.len()],
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Rms,
    Layer,
}

fn check(x: &[f64], p: &NormParams) -> Result<()> {
    if x.len() != p.scale.len() {
        return shape_err(format!(
            "norm input length {} vs scale length {}",
            x.len(),
            p.scale.len()
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite norm input".into()));
    }
    Ok(())
}

/// Returns `(mean, 1/denominator)` for one row. A zero denominator (only
/// possible with `eps = 0`) yields an inverse of zero, so the row maps to 0.
fn row_stats(kind: NormKind, x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = match kind {
        NormKind::Rms => 0.0,
        NormKind::Layer => x.iter().sum::<f64>() / n,
    };
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv)
}

pub fn rms_norm(x: &[f64], p: &NormParams) -> Result<Vec<f64>> {
    norm_vector(NormKind::Rms, x, p)
}

pub fn layer_norm(x: &[f64], p: &NormParams) -> Result<Vec<f64>> {
    norm_vector(NormKind::Layer, x, p)
}

pub fn norm_vector(kind: NormKind, x: &[f64], p: &NormParams) -> Result<Vec<f64>> {
    check(x, p)?;
    trace::record(ELEMENTWISE_REDUCTION_FLOPS * x.len() as u64);
    let (mean, inv) = row_stats(kind, x, p.eps);
    Ok(x
        .iter()
        .zip(&p.scale)
        .map(|(v, s)| s * (v - mean) * inv)
        .collect())
}

/// Saved statistics of a row-wise normalization.
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Centered, unscaled output `(x - mean) / denom` per row.
    normalized: Matrix,
    inv: Vec<f64>,
}

/// Normalizes every row of `x` independently.
pub fn norm_rows_forward(kind: NormKind, x: &Matrix, p: &NormParams) -> Result<(Matrix, NormCache)> {
    if x.cols() != p.dim() {
        return shape_err(format!("norm rows width {} vs scale {}", x.cols(), p.dim()));
    }
    x.ensure_finite("norm input")?;
    trace::record(ELEMENTWISE_REDUCTION_FLOPS * (x.rows() * x.cols()) as u64);
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (mean, i) = row_stats(kind, x.row(r), p.eps);
        inv.push(i);
        let xr = x.row(r);
        let nr = normalized.row_mut(r);
        for c in 0..xr.len() {
            nr[c] = (xr[c] - mean) * i;
        }
        let or = out.row_mut(r);
        for c in 0..or.len() {
            or[c] = p.scale[c] * normalized.row(r)[c];
        }
    }
    Ok((out, NormCache { normalized, inv }))
}

/// Backward of [`norm_rows_forward`]; accumulates the gain gradient into
/// `dscale` and returns the input gradient.
pub fn norm_rows_backward(
    kind: NormKind,
    p: &NormParams,
    cache: &NormCache,
    dy: &Matrix,
    dscale: &mut [f64],
) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let dyr = dy.row(r);
        let inv = cache.inv[r];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            dscale[c] += dyr[c] * xhat[c];
            let g = dyr[c] * p.scale[c];
            sum_g += g;
            sum_gx += g * xhat[c];
        }
        let mean_g = match kind {
            NormKind::Rms => 0.0,
            NormKind::Layer => sum_g / n,
        };
        let mean_gx = sum_gx / n;
        let out = dx.row_mut(r);
        for c in 0..cols {
            let g = dyr[c] * p.scale[c];
            out[c] = inv * (g - mean_g - xhat[c] * mean_gx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rms_zero_vector_is_fixed_point() {
        let p = NormParams::with_eps(2, 1e-6);
        assert_eq!(rms_norm(&[0.0, 0.0], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rms_three_four() {
        let p = NormParams::with_eps(2, 0.0);
        let y = rms_norm(&[3.0, 4.0], &p).unwrap();
        let rms = 12.5f64.sqrt();
        assert!(close(&y, &[3.0 / rms, 4.0 / rms], 1e-12));
        assert!(close(&y, &[0.84853, 1.13137], 1e-5));
    }

    #[test]
    fn rms_constant_vector_normalizes_to_ones() {
        let p = NormParams::with_eps(5, 0.0);
        let y = rms_norm(&[2.5; 5], &p).unwrap();
        assert!(close(&y, &[1.0; 5], 1e-12));
    }

    #[test]
    fn layer_norm_cases() {
        let guarded = NormParams::unit(2);
        assert_eq!(layer_norm(&[1.0, 1.0], &guarded).unwrap(), vec![0.0, 0.0]);
        let p = NormParams::with_eps(2, 0.0);
        assert!(close(&layer_norm(&[-1.0, 1.0], &p).unwrap(), &[-1.0, 1.0], 1e-12));
        assert!(close(&layer_norm(&[2.0, 4.0], &p).unwrap(), &[-1.0, 1.0], 1e-12));
    }

    #[test]
    fn norm_errors() {
        let p = NormParams::unit(3);
        assert!(matches!(rms_norm(&[1.0, 2.0], &p), Err(Error::Shape(_))));
        assert!(matches!(
            layer_norm(&[1.0, f64::NAN, 2.0], &p),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn rows_forward_matches_vector_form() {
        let p = NormParams {
            scale: vec![0.5, 2.0, -1.0],
            eps: 1e-6,
        };
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 3.0, 0.0]]).unwrap();
        for kind in [NormKind::Rms, NormKind::Layer] {
            let (y, _) = norm_rows_forward(kind, &x, &p).unwrap();
            for r in 0..2 {
                let v = norm_vector(kind, x.row(r), &p).unwrap();
                assert!(close(y.row(r), &v, 1e-15));
            }
        }
    }
}
