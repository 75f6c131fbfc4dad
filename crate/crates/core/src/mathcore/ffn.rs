use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::xavier_uniform;
use super::matrix::{gemm, Matrix};
use crate::error::{shape_err, Result};

pub const DEFAULT_EXPANSION_RATIO: usize = 2;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn swish(z: f64) -> f64 {
    z * sigmoid(z)
}

pub fn swish_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Bias-free SwiGLU feed-forward weights: `down · (swish(gate·x) ⊙ up·x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl FfnParams {
    pub fn new(gate: Matrix, up: Matrix, down: Matrix) -> Result<Self> {
        if gate.shape() != up.shape() || down.cols() != gate.rows() {
            return shape_err(format!(
                "ffn gate {:?}, up {:?}, down {:?}",
                gate.shape(),
                up.shape(),
                down.shape()
            ));
        }
        Ok(Self { gate, up, down })
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            gate: Matrix::zeros(hidden, input),
            up: Matrix::zeros(hidden, input),
            down: Matrix::zeros(output, hidden),
        }
    }

    pub fn random<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            gate: xavier_uniform(rng, hidden, input),
            up: xavier_uniform(rng, hidden, input),
            down: xavier_uniform(rng, output, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.gate.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gate.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.down.rows()
    }
}

/// Vector form of the SwiGLU FFN body (no norm, no residual).
pub fn swiglu_ffn(x: &[f64], p: &FfnParams) -> Result<Vec<f64>> {
    if x.len() != p.input_dim() {
        return shape_err(format!(
            "ffn input length {} vs {}",
            x.len(),
            p.input_dim()
        ));
    }
    let (y, _) = ffn_forward(&Matrix::row_vector(x), p)?;
    Ok(y.into_data())
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    input: Matrix,
    gate_pre: Matrix,
    up_pre: Matrix,
    act: Matrix,
}

/// Applies the FFN to every row of `x`.
pub fn ffn_forward(x: &Matrix, p: &FfnParams) -> Result<(Matrix, FfnCache)> {
    if x.cols() != p.input_dim() {
        return shape_err(format!("ffn input width {} vs {}", x.cols(), p.input_dim()));
    }
    let gate_pre = x.matmul_nt(&p.gate)?;
    let up_pre = x.matmul_nt(&p.up)?;
    let mut act = Matrix::zeros(gate_pre.rows(), gate_pre.cols());
    for ((a, g), u) in act
        .data_mut()
        .iter_mut()
        .zip(gate_pre.data())
        .zip(up_pre.data())
    {
        *a = swish(*g) * u;
    }
    let y = act.matmul_nt(&p.down)?;
    Ok((
        y,
        FfnCache {
            input: x.clone(),
            gate_pre,
            up_pre,
            act,
        },
    ))
}

/// Accumulates weight gradients into `grad` and returns the input gradient.
pub fn ffn_backward(p: &FfnParams, cache: &FfnCache, dy: &Matrix, grad: &mut FfnParams) -> Result<Matrix> {
    gemm(dy, true, &cache.act, false, &mut grad.down, true)?;
    let dact = dy.matmul(&p.down)?;
    let mut dgate = Matrix::zeros(dact.rows(), dact.cols());
    let mut dup = Matrix::zeros(dact.rows(), dact.cols());
    for i in 0..dact.data().len() {
        let g = cache.gate_pre.data()[i];
        let u = cache.up_pre.data()[i];
        let d = dact.data()[i];
        dgate.data_mut()[i] = d * u * swish_grad(g);
        dup.data_mut()[i] = d * swish(g);
    }
    gemm(&dgate, true, &cache.input, false, &mut grad.gate, true)?;
    gemm(&dup, true, &cache.input, false, &mut grad.up, true)?;
    let mut dx = dgate.matmul(&p.gate)?;
    gemm(&dup, false, &p.up, false, &mut dx, true)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::init::seeded_rng;

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = seeded_rng(1);
        let p = FfnParams::random(&mut rng, 4, 8, 4);
        assert_eq!(swiglu_ffn(&[0.0; 4], &p).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn scalar_case() {
        let p = FfnParams::new(
            Matrix::new(1, 1, vec![2.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
            Matrix::new(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap();
        let y = swiglu_ffn(&[1.0], &p).unwrap();
        let expected = 2.0 * sigmoid(2.0);
        assert!((y[0] - expected).abs() < 1e-15);
        assert!((y[0] - 1.76159).abs() < 1e-5);
    }

    #[test]
    fn linear_in_down() {
        let mut rng = seeded_rng(2);
        let p = FfnParams::random(&mut rng, 3, 6, 2);
        let mut doubled = p.clone();
        doubled.down.scale(2.0);
        let x = [0.3, -1.2, 0.7];
        let a = swiglu_ffn(&x, &p).unwrap();
        let b = swiglu_ffn(&x, &doubled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((2.0 * u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = FfnParams::zeros(3, 6, 3);
        assert!(swiglu_ffn(&[1.0, 2.0], &p).is_err());
        assert!(FfnParams::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3), Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
