//! Deterministic identity suite behind the `verify` subcommand.
//!
//! Each entry evaluates an algebraic identity or an a priori bound that the
//! rest of the toolkit leans on, over exhaustive grids or seeded random
//! states, and reports the worst residual as a `Criterion` line. The
//! identities hold in exact arithmetic, so the thresholds are pure
//! floating-point allowances; the bounds are reported as excess ratios
//! against 1.

use rand::Rng;

use crate::error::Result;
use crate::linop::{build_k, operator_norm_bound};
use crate::meanfield::{
    binomial_remainder, correction_g, default_dt, drift, falling_factorial_ratio,
    finite_n_drift, integrate_ode, remainder_h, sampling_correction,
};
use crate::ou::propagator_apply;
use crate::rng::replica_rng;
use crate::seqspace::{weighted_l2_sq, EmpiricalTail, ModelParams, TailVector, WeightSeq};
use crate::stats::Criterion;

/// Random tail on `0..=k_max`: sorted uniforms under the pinned leading 1.
fn random_tail<R: Rng + ?Sized>(rng: &mut R, k_max: usize) -> TailVector {
    let mut v: Vec<f64> = (0..k_max).map(|_| rng.random::<f64>()).collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut values = vec![1.0];
    values.extend(v);
    TailVector::new(values).expect("sorted uniforms form a tail")
}

/// Random lattice state of an `n`-queue network with `k_max` levels.
fn random_lattice<R: Rng + ?Sized>(rng: &mut R, n: u64, k_max: usize) -> EmpiricalTail {
    let mut counts: Vec<u64> = (0..k_max).map(|_| rng.random_range(0..=n)).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let mut all = vec![n];
    all.extend(counts);
    EmpiricalTail::new(all, n).expect("sorted counts form a lattice tail")
}

/// Worst residual of `(Na)_L/(N)_L - a^L = A^N(a)` over lattice and
/// off-lattice points; the identity is polynomial in `a`, so any grid
/// exercises it.
pub fn sampling_identity_residual() -> f64 {
    let mut worst = 0.0f64;
    for &n in &[5u64, 8, 25, 100, 500] {
        for l in 1..=4u32 {
            if (l as u64) > n {
                continue;
            }
            for j in 0..=(2 * n) {
                let a = j as f64 / (2 * n) as f64;
                let lhs = falling_factorial_ratio(a, n as f64, l) - a.powi(l as i32);
                let rhs = sampling_correction(a, n, l);
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    worst
}

/// Worst ratio of `|A^N(a)|` against the explicit `O(a/N)` envelope
/// `(2^(L-1) - 1)(L - 1) a / (N - L + 1)`, for `L >= 2` and `N >= 2L`.
pub fn sampling_scaling_excess() -> f64 {
    let mut worst = 0.0f64;
    for &n in &[5u64, 8, 25, 100, 500] {
        for l in 2..=4u32 {
            if n < 2 * l as u64 {
                continue;
            }
            let envelope_scale = (((1u64 << (l - 1)) - 1) * (l as u64 - 1)) as f64
                / (n - l as u64 + 1) as f64;
            for j in 1..=n {
                let a = j as f64 / n as f64;
                let excess = sampling_correction(a, n, l).abs() / (envelope_scale * a);
                worst = worst.max(excess);
            }
        }
    }
    worst
}

/// Worst residual of `(a+h)^L = a^L + L a^(L-1) h + B(a, h)` on a grid
/// with `a` and `a + h` both in `[0, 1]`.
pub fn binomial_identity_residual() -> f64 {
    let mut worst = 0.0f64;
    for l in 1..=6u32 {
        for i in 0..=20 {
            let a = i as f64 / 20.0;
            for j in 0..=20 {
                let target = j as f64 / 20.0;
                let h = target - a;
                let lhs = target.powi(l as i32);
                let rhs = a.powi(l as i32)
                    + l as f64 * a.powi(l as i32 - 1) * h
                    + binomial_remainder(a, h, l);
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    worst
}

/// Worst ratio of `|B(a, h)|` against `(2^L - L - 1) h^2` for `L >= 2`.
pub fn binomial_bound_excess() -> f64 {
    let mut worst = 0.0f64;
    for l in 2..=6u32 {
        let envelope = ((1u64 << l) - 1 - l as u64) as f64;
        for i in 0..=20 {
            let a = i as f64 / 20.0;
            for j in 0..=20 {
                let h = j as f64 / 20.0 - a;
                if h == 0.0 {
                    continue;
                }
                worst = worst.max(binomial_remainder(a, h, l).abs() / (envelope * h * h));
            }
        }
    }
    worst
}

/// Worst residual of `F^N(r) = F(r) + G^N(r)` coordinatewise over random
/// lattice states (coordinates past the trimmed finite-N horizon vanish
/// identically and enter as exact zeros).
pub fn drift_decomposition_residual<R: Rng + ?Sized>(p: &ModelParams, rng: &mut R) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(p.choices() as u64..80);
        let k_max = rng.random_range(2usize..8);
        let r = random_lattice(rng, n, k_max);
        let v = r.to_tail_vector(k_max);
        let fin = finite_n_drift(&r, p).expect("population checked");
        let lim = drift(&v, p);
        let g = correction_g(&v, n, p);
        for k in 0..=k_max {
            let fin_plus = fin.plus().get(k).copied().unwrap_or(0.0);
            let fin_minus = fin.minus().get(k).copied().unwrap_or(0.0);
            worst = worst.max((fin_plus - lim.plus()[k] - g[k]).abs());
            worst = worst.max((fin_minus - lim.minus()[k]).abs());
        }
    }
    worst
}

/// Worst residual of `F(v + x) - F(v) = K(v) x + H(v, x)` over random
/// pairs of tails with `x` their difference.
pub fn linearization_residual<R: Rng + ?Sized>(p: &ModelParams, rng: &mut R) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k_max = rng.random_range(2usize..10);
        let v = random_tail(rng, k_max);
        let shifted = random_tail(rng, k_max);
        let x: Vec<f64> = (0..=k_max)
            .map(|k| shifted.value(k) - v.value(k))
            .collect();
        let lhs_parts = drift(&shifted, p).total();
        let base = drift(&v, p).total();
        let kx = build_k(&v, p).apply(&x);
        let h = remainder_h(&v, &x, p);
        for k in 1..=k_max {
            worst = worst.max((lhs_parts[k] - base[k] - kx[k] - h[k]).abs());
        }
    }
    worst
}

/// Worst ratio of `|K(v) x|_w / |x|_w` against the closed-form operator
/// norm bound over `trials` random pairs.
pub fn norm_bound_excess<R: Rng + ?Sized>(
    p: &ModelParams,
    w: &WeightSeq,
    trials: usize,
    rng: &mut R,
) -> f64 {
    let k_max = w.max_index();
    let bound = operator_norm_bound(p, w);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v = random_tail(rng, k_max);
        let mut x = vec![0.0];
        x.extend((0..k_max).map(|_| rng.random_range(-1.0..1.0)));
        let kx = build_k(&v, p).apply(&x);
        let num = weighted_l2_sq(&kx, w).expect("aligned by construction");
        let den = weighted_l2_sq(&x, w).expect("aligned by construction");
        if den > 0.0 {
            worst = worst.max((num / den).sqrt() / bound);
        }
    }
    worst
}

/// Worst composition defect `|Phi(s,t) z - Phi(r,t) Phi(s,r) z|_inf` of
/// the numerical propagator along a mean-field trajectory.
pub fn semigroup_residual(p: &ModelParams) -> Result<f64> {
    let k_max = 8;
    let ode = integrate_ode(&TailVector::empty_network(k_max), p, 2.0, default_dt(p))?;
    let (s, r, t) = (0.3, 1.1, 1.9);
    let m = 5;
    let mut worst = 0.0f64;
    for k in 1..=m {
        let mut z = vec![0.0; m + 1];
        z[k] = 1.0;
        let direct = propagator_apply(&z, &ode, p, s, t)?;
        let first = propagator_apply(&z, &ode, p, s, r)?;
        let composed = propagator_apply(&first, &ode, p, r, t)?;
        for i in 0..=m {
            worst = worst.max((direct[i] - composed[i]).abs());
        }
    }
    Ok(worst)
}

/// Run the whole suite. Deterministic per seed; each line passes iff its
/// statistic meets the pinned threshold.
pub fn run_identity_suite(seed: u64) -> Result<Vec<Criterion>> {
    let mut rng = replica_rng(seed, 0);
    let p = ModelParams::new(1.0, 2.0, 2)?;
    let p_three = ModelParams::new(1.3, 0.9, 3)?;
    let w = WeightSeq::geometric(0.5, 25)?;

    let mut report = vec![
        Criterion::at_most(
            "sampling-correction-identity",
            sampling_identity_residual(),
            1e-13,
        ),
        Criterion::at_most("sampling-correction-scaling", sampling_scaling_excess(), 1.0),
        Criterion::at_most(
            "binomial-remainder-identity",
            binomial_identity_residual(),
            1e-13,
        ),
        Criterion::at_most("binomial-remainder-bound", binomial_bound_excess(), 1.0),
    ];
    for (label, params) in [("l2", &p), ("l3", &p_three)] {
        report.push(Criterion::at_most(
            format!("finite-n-drift-decomposition-{label}"),
            drift_decomposition_residual(params, &mut rng),
            1e-13,
        ));
        report.push(Criterion::at_most(
            format!("linearization-decomposition-{label}"),
            linearization_residual(params, &mut rng),
            1e-13,
        ));
    }
    report.push(Criterion::at_most(
        "operator-norm-bound",
        norm_bound_excess(&p, &w, 10_000, &mut rng),
        1.0,
    ));
    report.push(Criterion::at_most(
        "propagator-semigroup",
        semigroup_residual(&p)?,
        1e-8,
    ));
    Ok(report)
}
