//! The linearization `K(v)` of the drift about a tail `v`, its explicit
//! operator-norm bound on `L2(w)`, and the bracket rates of the limit
//! martingale.
//!
//! `K(v)` acts tridiagonally on sequences vanishing at 0:
//! `(K(v)x)(k) = alpha L v(k-1)^(L-1) x(k-1) - (alpha L v(k)^(L-1) + beta) x(k) + beta x(k+1)`.
//! It is the adjoint of a sub-Markovian birth-death generator; truncation
//! uses an absorbing boundary (`x(k_max + 1) = 0`).

use nalgebra::DMatrix;

use crate::meanfield::drift;
use crate::seqspace::{ModelParams, TailVector, WeightSeq};

/// Tridiagonal matrix of the drift linearization, indexed like the tail it
/// was built at: arrays run `0..=k_max` with row 0 identically zero and
/// coordinate 0 structurally absent (inputs satisfy `x(0) = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct TriDiagOperator {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl TriDiagOperator {
    pub fn horizon(&self) -> usize {
        self.diag.len() - 1
    }

    /// Coefficient on `x(k-1)` in row `k` (nonnegative).
    pub fn sub(&self) -> &[f64] {
        &self.sub
    }

    /// Coefficient on `x(k)` in row `k` (at most `-beta`).
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Coefficient on `x(k+1)` in row `k` (constant `beta`).
    pub fn sup(&self) -> &[f64] {
        &self.sup
    }

    /// `K x` with zero extension beyond the horizon. `x(0)` is structurally
    /// zero and its stored value is ignored.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let k_max = self.horizon();
        assert_eq!(x.len(), k_max + 1, "dimension mismatch");
        debug_assert!(x[0] == 0.0, "coordinate 0 must vanish");
        out[0] = 0.0;
        for k in 1..=k_max {
            let below = if k >= 2 { x[k - 1] } else { 0.0 };
            let above = if k + 1 <= k_max { x[k + 1] } else { 0.0 };
            out[k] = self.sub[k] * below + self.diag[k] * x[k] + self.sup[k] * above;
        }
    }

    /// Dense truncation over active coordinates `1..=k_max` (row/column `i`
    /// of the output is coordinate `i + 1`).
    pub fn dense(&self) -> DMatrix<f64> {
        let m = self.horizon();
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                self.diag[i + 1]
            } else if i == j + 1 {
                self.sub[i + 1]
            } else if j == i + 1 {
                self.sup[i + 1]
            } else {
                0.0
            }
        })
    }

    /// Column sums of the dense truncation, indexed `0..=k_max` with entry
    /// 0 zero. All entries are <= 0: mass leaks only at `k = 1` (through
    /// the absent coordinate-0 row) and at the absorbing boundary.
    pub fn column_sums(&self) -> Vec<f64> {
        let k_max = self.horizon();
        let mut out = vec![0.0; k_max + 1];
        for j in 1..=k_max {
            let mut s = self.diag[j];
            if j >= 2 {
                s += self.sup[j - 1];
            }
            if j + 1 <= k_max {
                s += self.sub[j + 1];
            }
            out[j] = s;
        }
        out
    }
}

/// Build `K(v)`: `sub(k) = alpha L v(k-1)^(L-1)`,
/// `diag(k) = -(alpha L v(k)^(L-1) + beta)`, `sup(k) = beta`.
pub fn build_k(v: &TailVector, p: &ModelParams) -> TriDiagOperator {
    let k_max = v.horizon();
    let al = p.alpha() * p.choices() as f64;
    let lm1 = p.choices() as i32 - 1;
    let mut sub = vec![0.0; k_max + 1];
    let mut diag = vec![0.0; k_max + 1];
    let mut sup = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        sub[k] = al * v.value(k - 1).powi(lm1);
        diag[k] = -(al * v.value(k).powi(lm1) + p.beta());
        sup[k] = p.beta();
    }
    TriDiagOperator { sub, diag, sup }
}

/// Same coefficients from a raw state slice (used by the covariance and
/// propagator integrators, whose interpolated states are not `TailVector`s).
pub(crate) fn k_coefficients_raw(
    u: &[f64],
    p: &ModelParams,
    block: usize,
    sub: &mut [f64],
    diag: &mut [f64],
) {
    let al = p.alpha() * p.choices() as f64;
    let lm1 = p.choices() as i32 - 1;
    for k in 1..=block {
        sub[k] = al * u[k - 1].powi(lm1);
        diag[k] = -(al * u[k].powi(lm1) + p.beta());
    }
}

/// Uniform operator-norm bound for `K(v)` on `L2(w)` over all valid tails:
/// `sqrt(2 (alpha L + beta) (alpha L (d + 1) + beta (1/c + 1)))`.
pub fn operator_norm_bound(p: &ModelParams, w: &WeightSeq) -> f64 {
    let al = p.alpha() * p.choices() as f64;
    let b = p.beta();
    (2.0 * (al + b) * (al * (w.d() + 1.0) + b * (1.0 / w.c() + 1.0))).sqrt()
}

/// Bracket rate of the limit martingale: `Lambda(u)(k) = F_+(u)(k) + F_-(u)(k)`,
/// the integrand of `<M(k)>_t`. Nonnegative on valid tails.
pub fn bracket_rate(u: &TailVector, p: &ModelParams) -> Vec<f64> {
    let f = drift(u, p);
    f.plus()
        .iter()
        .zip(f.minus())
        .map(|(a, b)| a + b)
        .collect()
}

/// Bracket rates from a raw state slice, written into `lambda[1..=block]`.
pub(crate) fn bracket_rate_raw(u: &[f64], p: &ModelParams, block: usize, lambda: &mut [f64]) {
    let l = p.choices() as i32;
    let k_max = u.len() - 1;
    for k in 1..=block {
        let next = if k + 1 <= k_max { u[k + 1] } else { 0.0 };
        lambda[k] = p.alpha() * (u[k - 1].powi(l) - u[k].powi(l)) + p.beta() * (u[k] - next);
    }
}
