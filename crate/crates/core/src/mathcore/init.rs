use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;

pub type ModelRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `fan_out × fan_in` weight.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Matrix::new(fan_out, fan_in, data).expect("sized by construction")
}

pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = xavier_uniform(&mut seeded_rng(7), 8, 4);
        let b = xavier_uniform(&mut seeded_rng(7), 8, 4);
        assert_eq!(a, b);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
