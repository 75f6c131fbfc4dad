//! Differentiable operators over matrices and finite-difference checking.

use rand::Rng;

use super::ffn::{ffn_backward, ffn_forward, FfnParams};
use super::init::seeded_rng;
use super::matrix::Matrix;
use super::norm::{norm_rows_backward, norm_rows_forward, NormKind, NormParams};
use super::softmax::{softmax_backward, softmax_unchecked};
use super::trace::ELEMENTWISE_REDUCTION_FLOPS;
use crate::error::{shape_err, Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so components whose true
/// gradient is numerically zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// A function on matrices with a hand-written reverse pass.
pub trait DifferentiableOp {
    fn name(&self) -> String;

    fn forward(&self, x: &Matrix) -> Result<Matrix>;

    /// Input cotangent for output cotangent `dy`, evaluated at `x`.
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix>;

    fn output_shape(&self, input: (usize, usize)) -> (usize, usize);

    /// Analytic FLOPs of one forward pass on an input of this shape.
    fn flops(&self, input: (usize, usize)) -> u64;

    fn then<B: DifferentiableOp>(self, next: B) -> Compose<Self, B>
    where
        Self: Sized,
    {
        Compose {
            first: self,
            second: next,
        }
    }
}

/// `second(first(x))`.
pub struct Compose<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: DifferentiableOp, B: DifferentiableOp> DifferentiableOp for Compose<A, B> {
    fn name(&self) -> String {
        format!("{} -> {}", self.first.name(), self.second.name())
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.second.forward(&self.first.forward(x)?)
    }

    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let mid = self.first.forward(x)?;
        let dmid = self.second.backward(&mid, dy)?;
        self.first.backward(x, &dmid)
    }

    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        self.second.output_shape(self.first.output_shape(input))
    }

    fn flops(&self, input: (usize, usize)) -> u64 {
        self.first.flops(input) + self.second.flops(self.first.output_shape(input))
    }
}

pub struct Identity;

impl DifferentiableOp for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
    fn backward(&self, _x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        Ok(dy.clone())
    }
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        input
    }
    fn flops(&self, _input: (usize, usize)) -> u64 {
        0
    }
}

/// Row-wise `y = W·x` with `W` stored `out × in`.
pub struct Linear {
    pub weight: Matrix,
}

impl DifferentiableOp for Linear {
    fn name(&self) -> String {
        format!("linear {}->{}", self.weight.cols(), self.weight.rows())
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_nt(&self.weight)
    }
    fn backward(&self, _x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        dy.matmul(&self.weight)
    }
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        (input.0, self.weight.rows())
    }
    fn flops(&self, input: (usize, usize)) -> u64 {
        2 * (input.0 * self.weight.rows() * self.weight.cols()) as u64
    }
}

/// Row-wise normalization.
pub struct Norm {
    pub kind: NormKind,
    pub params: NormParams,
}

impl DifferentiableOp for Norm {
    fn name(&self) -> String {
        format!("{:?} norm", self.kind)
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(norm_rows_forward(self.kind, x, &self.params)?.0)
    }
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let (_, cache) = norm_rows_forward(self.kind, x, &self.params)?;
        let mut dscale = vec![0.0; self.params.dim()];
        Ok(norm_rows_backward(self.kind, &self.params, &cache, dy, &mut dscale))
    }
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        input
    }
    fn flops(&self, input: (usize, usize)) -> u64 {
        ELEMENTWISE_REDUCTION_FLOPS * (input.0 * input.1) as u64
    }
}

/// Row-wise SwiGLU FFN body.
pub struct SwiGlu {
    pub params: FfnParams,
}

impl DifferentiableOp for SwiGlu {
    fn name(&self) -> String {
        "swiglu ffn".into()
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(ffn_forward(x, &self.params)?.0)
    }
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let (_, cache) = ffn_forward(x, &self.params)?;
        let mut scratch = self.params.zeros_like();
        ffn_backward(&self.params, &cache, dy, &mut scratch)
    }
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        (input.0, self.params.output_dim())
    }
    fn flops(&self, input: (usize, usize)) -> u64 {
        let p = &self.params;
        2 * input.0 as u64
            * (2 * p.input_dim() * p.hidden_dim() + p.hidden_dim() * p.output_dim()) as u64
    }
}

/// Row-wise softmax.
pub struct Softmax;

impl DifferentiableOp for Softmax {
    fn name(&self) -> String {
        "softmax".into()
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() == 0 {
            return shape_err("softmax of an empty row");
        }
        x.ensure_finite("softmax input")?;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&softmax_unchecked(x.row(r)));
        }
        Ok(out)
    }
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let y = self.forward(x)?;
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            dx.row_mut(r)
                .copy_from_slice(&softmax_backward(y.row(r), dy.row(r)));
        }
        Ok(dx)
    }
    fn output_shape(&self, input: (usize, usize)) -> (usize, usize) {
        input
    }
    fn flops(&self, input: (usize, usize)) -> u64 {
        ELEMENTWISE_REDUCTION_FLOPS * (input.0 * input.1) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn new(tolerance: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            tolerance,
        }
    }

    fn observe(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

fn perturbed(x: f64) -> (f64, f64, f64) {
    let plus = x + FD_STEP;
    let minus = x - FD_STEP;
    (plus, minus, plus - minus)
}

/// Compares `op.backward` against central finite differences of the scalar
/// `<c, op(x)>` for a fixed random cotangent `c`.
///
/// The difference quotient is formed per output coordinate and divided by
/// the realized step `(x+h) - (x-h)`, so linear maps check exactly.
pub fn grad_check(op: &dyn DifferentiableOp, input: &Matrix, tolerance: f64) -> Result<GradCheckReport> {
    let y = op.forward(input)?;
    y.ensure_finite(&format!("{} output", op.name()))?;
    let mut rng = seeded_rng(0x9e37_79b9);
    let cot_data = (0..y.rows() * y.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cotangent = Matrix::new(y.rows(), y.cols(), cot_data)?;
    let analytic = op.backward(input, &cotangent)?;
    analytic.ensure_finite("analytic gradient")?;
    let mut report = GradCheckReport::new(tolerance);
    let mut x = input.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        let (plus, minus, step) = perturbed(orig);
        x.data_mut()[i] = plus;
        let yp = op.forward(&x)?;
        x.data_mut()[i] = minus;
        let ym = op.forward(&x)?;
        x.data_mut()[i] = orig;
        let numeric: f64 = cotangent
            .data()
            .iter()
            .zip(yp.data().iter().zip(ym.data()))
            .map(|(c, (a, b))| c * ((a - b) / step))
            .sum();
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite difference at {i}")));
        }
        report.observe(analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Checks an analytic gradient of a scalar function at `point`, probing the
/// coordinates listed in `coords` (all of them when `None`).
pub fn grad_check_scalar(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != point.len() {
        return shape_err(format!(
            "gradient length {} vs point length {}",
            analytic.len(),
            point.len()
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport::new(tolerance);
    let mut x = point.to_vec();
    for &i in coords {
        let orig = x[i];
        let (plus, minus, step) = perturbed(orig);
        x[i] = plus;
        let fp = f(&x)?;
        x[i] = minus;
        let fm = f(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / step;
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!("non-finite difference at {i}")));
        }
        report.observe(analytic[i], numeric);
    }
    Ok(report)
}
