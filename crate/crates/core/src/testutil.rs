//! Shared helpers for the unit-test modules (compiled only under test).

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seqspace::{ModelParams, TailVector};

pub fn params(alpha: f64, beta: f64, l: u32) -> ModelParams {
    ModelParams::new(alpha, beta, l).unwrap()
}

/// Random valid tail on `0..=k_max`: sorted uniforms below the pinned 1.
pub fn random_tail(rng: &mut ChaCha8Rng, k_max: usize) -> TailVector {
    let mut vals: Vec<f64> = (0..k_max).map(|_| rng.random::<f64>()).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut values = vec![1.0];
    values.extend(vals);
    TailVector::new(values).unwrap()
}

/// Scaling-and-squaring matrix exponential (reference oracle, Taylor core).
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.abs().row_sum().max();
    let squarings = norm.log2().ceil().max(0.0) as usize + 1;
    let scaled = m / 2f64.powi(squarings as i32);
    let dim = m.nrows();
    let mut term = DMatrix::<f64>::identity(dim, dim);
    let mut result = DMatrix::<f64>::identity(dim, dim);
    for i in 1..60 {
        term = &term * &scaled / i as f64;
        result += &term;
        if term.abs().max() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}
