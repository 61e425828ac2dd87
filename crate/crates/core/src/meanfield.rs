//! The deterministic mean-field limit: drift fields, the finite-N drift with
//! its sampling correction, the globally stable fixed point, and a fixed-step
//! RK4 integrator for `du/dt = F(u)` on tail vectors.
//!
//! For a tail `v` the upward drift at level `k` is
//! `F_+(v)(k) = alpha (v(k-1)^L - v(k)^L)` (an arrival joins a queue of
//! length exactly `k-1` when all `L` sampled queues have length >= `k-1`
//! but not all have length >= `k`), and the downward drift is
//! `F_-(v)(k) = beta (v(k) - v(k+1))`. At finite `N` the `L` queues are
//! sampled without replacement and powers become falling-factorial ratios.

use crate::error::{Error, Result};
use crate::seqspace::{EmpiricalTail, ModelParams, TailVector};

/// Upward and downward drift components, indexed `0..=k_max` with entry 0
/// pinned to zero. Both components are nonnegative on valid tails.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    plus: Vec<f64>,
    minus: Vec<f64>,
}

impl DriftField {
    pub fn plus(&self) -> &[f64] {
        &self.plus
    }

    pub fn minus(&self) -> &[f64] {
        &self.minus
    }

    /// Net drift `plus - minus`.
    pub fn total(&self) -> Vec<f64> {
        self.plus
            .iter()
            .zip(&self.minus)
            .map(|(p, m)| p - m)
            .collect()
    }

    pub fn horizon(&self) -> usize {
        self.plus.len() - 1
    }
}

/// Mean-field drift `F = F_+ - F_-` at `v`, truncated with zero extension.
pub fn drift(v: &TailVector, p: &ModelParams) -> DriftField {
    let l = p.choices() as i32;
    let k_max = v.horizon();
    let mut plus = vec![0.0; k_max + 1];
    let mut minus = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        plus[k] = p.alpha() * (v.value(k - 1).powi(l) - v.value(k).powi(l));
        minus[k] = p.beta() * (v.value(k) - v.value(k + 1));
    }
    DriftField { plus, minus }
}

/// Net drift evaluated on a raw coordinate slice (the integrator's inner
/// loop; `values[0]` is treated as pinned and gets derivative 0).
fn drift_total_raw(values: &[f64], p: &ModelParams, out: &mut [f64]) {
    let l = p.choices() as i32;
    let k_max = values.len() - 1;
    out[0] = 0.0;
    for k in 1..=k_max {
        let next = if k + 1 <= k_max { values[k + 1] } else { 0.0 };
        out[k] = p.alpha() * (values[k - 1].powi(l) - values[k].powi(l))
            - p.beta() * (values[k] - next);
    }
}

/// Exponent `(L^k - 1)/(L - 1)` of the fixed point, continued as `k` at
/// `L = 1`.
pub fn fixed_point_exponent(l: u32, k: usize) -> f64 {
    if l == 1 {
        k as f64
    } else {
        let lf = l as f64;
        (lf.powi(k as i32) - 1.0) / (lf - 1.0)
    }
}

/// The globally stable point `u~(k) = rho^((L^k - 1)/(L - 1))` of the
/// mean-field dynamics, truncated to `k_max`. Requires `rho < 1`.
pub fn fixed_point(p: &ModelParams, k_max: usize) -> Result<TailVector> {
    if !p.is_stable() {
        return Err(Error::UnstableRegime { rho: p.rho() });
    }
    let values = (0..=k_max)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                p.rho().powf(fixed_point_exponent(p.choices(), k))
            }
        })
        .collect();
    TailVector::new(values)
}

/// Smallest horizon at which the fixed point has decayed below `1e-14`,
/// floored at `min_k` and capped at 400.
pub fn suggest_horizon(p: &ModelParams, min_k: usize) -> Result<usize> {
    if !p.is_stable() {
        return Err(Error::UnstableRegime { rho: p.rho() });
    }
    for k in 1..=400usize {
        if p.rho().powf(fixed_point_exponent(p.choices(), k)) < 1e-14 {
            return Ok(k.max(min_k));
        }
    }
    Ok(400.max(min_k))
}

/// Falling-factorial ratio `(N a)_L / (N)_L`, computed as a product of
/// factor ratios `(Na - i) / (N - i)` to avoid overflow at large `N`.
pub fn falling_factorial_ratio(a: f64, n: f64, l: u32) -> f64 {
    (0..l).map(|i| (n * a - i as f64) / (n - i as f64)).product()
}

/// Finite-N drift: arrivals sample `L` queues without replacement, so the
/// power `v^L` of the limit drift becomes the falling-factorial ratio.
/// The horizon is one level past the deepest occupied level; every deeper
/// coordinate vanishes identically, so zero extension is exact.
pub fn finite_n_drift(r: &EmpiricalTail, p: &ModelParams) -> Result<DriftField> {
    let n = r.n();
    if n < p.choices() as u64 {
        return Err(Error::PopulationTooSmall {
            n,
            l: p.choices(),
        });
    }
    let nf = n as f64;
    let l = p.choices();
    let k_max = r.max_level() + 1;
    let mut plus = vec![0.0; k_max + 1];
    let mut minus = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        let hi = falling_factorial_ratio(r.fraction(k - 1), nf, l);
        let lo = falling_factorial_ratio(r.fraction(k), nf, l);
        plus[k] = p.alpha() * (hi - lo);
        minus[k] = p.beta() * (r.fraction(k) - r.fraction(k + 1));
    }
    Ok(DriftField { plus, minus })
}

/// Without-replacement sampling correction
/// `A^N(a) = (Na)_L / (N)_L - a^L`, evaluated by the explicit subset
/// expansion `sum_j (a-1)^j a^(L-j) sum_{i_1<...<i_j} prod i_m/(N - i_m)`
/// over subsets of `{1, ..., L-1}`. Uniformly `O(a)/N` on `[0, 1]`.
pub fn sampling_correction(a: f64, n: u64, l: u32) -> f64 {
    assert!(n >= l as u64, "requires N >= L");
    assert!(l <= 25, "subset expansion is exponential in L");
    if l <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    let eps: Vec<f64> = (1..l).map(|i| i as f64 / (nf - i as f64)).collect();
    let mut total = 0.0;
    for mask in 1u32..(1 << (l - 1)) {
        let j = mask.count_ones();
        let mut prod = 1.0;
        for (idx, &e) in eps.iter().enumerate() {
            if mask & (1 << idx) != 0 {
                prod *= e;
            }
        }
        total += (a - 1.0).powi(j as i32) * a.powi((l - j) as i32) * prod;
    }
    total
}

/// Binomial linearization remainder
/// `B(a, h) = (a+h)^L - a^L - L a^(L-1) h`, evaluated by the binomial sum
/// `sum_{i=2}^{L} C(L, i) a^(L-i) h^i` (cancellation-free). Zero for
/// `L = 1`, exactly `h^2` for `L = 2`.
pub fn binomial_remainder(a: f64, h: f64, l: u32) -> f64 {
    if l <= 1 {
        return 0.0;
    }
    let mut coeff = l as f64 * (l as f64 - 1.0) / 2.0; // C(L, 2)
    let mut sum = 0.0;
    for i in 2..=l {
        sum += coeff * a.powi((l - i) as i32) * h.powi(i as i32);
        coeff = coeff * (l - i) as f64 / (i + 1) as f64;
    }
    sum
}

/// Sampling correction aggregated into a drift correction:
/// `G^N(v)(k) = alpha A^N(v(k-1)) - alpha A^N(v(k))`, so that the
/// finite-N drift decomposes as `F^N = F + G^N`.
pub fn correction_g(v: &TailVector, n: u64, p: &ModelParams) -> Vec<f64> {
    let k_max = v.horizon();
    let l = p.choices();
    let mut out = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        out[k] = p.alpha()
            * (sampling_correction(v.value(k - 1), n, l) - sampling_correction(v.value(k), n, l));
    }
    out
}

/// Second-order drift remainder
/// `H(v, x)(k) = alpha [B(v(k-1), x(k-1)) - B(v(k), x(k))]`, completing the
/// exact decomposition `F(v+x) - F(v) = K(v) x + H(v, x)`.
///
/// `x` is indexed `0..=k_max` alongside `v`.
pub fn remainder_h(v: &TailVector, x: &[f64], p: &ModelParams) -> Vec<f64> {
    assert_eq!(x.len(), v.horizon() + 1, "x must share the horizon of v");
    let k_max = v.horizon();
    let l = p.choices();
    let mut out = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        out[k] = p.alpha()
            * (binomial_remainder(v.value(k - 1), x[k - 1], l)
                - binomial_remainder(v.value(k), x[k], l));
    }
    out
}

/// Default integrator step `1e-3 min(1/alpha, 1/beta)` (finite rates only).
pub fn default_dt(p: &ModelParams) -> f64 {
    let mut scale = f64::INFINITY;
    if p.alpha() > 0.0 {
        scale = scale.min(1.0 / p.alpha());
    }
    if p.beta() > 0.0 {
        scale = scale.min(1.0 / p.beta());
    }
    1e-3 * scale
}

/// Fixed-grid trajectory of the mean-field ODE with dense output by linear
/// interpolation between knots. Every stored state is a valid tail.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    dt: f64,
    states: Vec<Vec<f64>>,
    params: ModelParams,
}

impl OdeSolution {
    /// Constant-in-time solution (exact when the state is the fixed point;
    /// also the wiring for equilibrium-start experiments where the
    /// linearization is frozen).
    pub fn constant(state: &TailVector, t_end: f64, dt: f64, p: &ModelParams) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::NonPositiveStep(dt));
        }
        let n_steps = (t_end / dt).ceil().max(1.0) as usize;
        let dt_eff = t_end / n_steps as f64;
        Ok(Self {
            dt: dt_eff,
            states: vec![state.values().to_vec(); n_steps + 1],
            params: *p,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Grid spacing actually used (the requested `dt` shrunk to divide the
    /// horizon evenly).
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn k_max(&self) -> usize {
        self.states[0].len() - 1
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.states.len() - 1)
    }

    pub fn state_at(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn final_state(&self) -> TailVector {
        TailVector::new(self.states.last().unwrap().clone()).expect("stored states are valid tails")
    }

    /// Dense output: linear interpolation between the two bracketing knots.
    pub fn sample(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.states[0].len()];
        self.sample_into(t, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t_end = self.final_time();
        if !(0.0..=t_end * (1.0 + 1e-12) + 1e-300).contains(&t) {
            return Err(Error::HorizonExceeded {
                requested: t,
                available: t_end,
            });
        }
        let pos = (t / self.dt).min((self.states.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.states.len() - 2);
        let frac = pos - i as f64;
        let (a, b) = (&self.states[i], &self.states[i + 1]);
        for (k, o) in out.iter_mut().enumerate() {
            *o = a[k] + frac * (b[k] - a[k]);
        }
        Ok(())
    }
}

/// Integrate `du/dt = F(u)` by classical RK4 at fixed step, clamping each
/// accepted state back onto the tail simplex (pin `v(0) = 1`, clip to
/// `[0, 1]`, monotone sweep). A step whose raw output leaves
/// `[-1e-6, 1 + 1e-6]` is rejected as a signal that `dt` is too large.
pub fn integrate_ode(u0: &TailVector, p: &ModelParams, t_end: f64, dt: f64) -> Result<OdeSolution> {
    if dt <= 0.0 {
        return Err(Error::NonPositiveStep(dt));
    }
    let n_steps = (t_end / dt).ceil().max(1.0) as usize;
    let dt_eff = t_end / n_steps as f64;
    let dim = u0.horizon() + 1;

    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(u0.values().to_vec());

    let mut u = u0.values().to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];

    for step in 0..n_steps {
        drift_total_raw(&u, p, &mut k1);
        for k in 0..dim {
            stage[k] = u[k] + 0.5 * dt_eff * k1[k];
        }
        drift_total_raw(&stage, p, &mut k2);
        for k in 0..dim {
            stage[k] = u[k] + 0.5 * dt_eff * k2[k];
        }
        drift_total_raw(&stage, p, &mut k3);
        for k in 0..dim {
            stage[k] = u[k] + dt_eff * k3[k];
        }
        drift_total_raw(&stage, p, &mut k4);
        for k in 0..dim {
            u[k] += dt_eff / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }

        for (k, &val) in u.iter().enumerate() {
            if !(-1e-6..=1.0 + 1e-6).contains(&val) {
                return Err(Error::StepRejected {
                    t: (step + 1) as f64 * dt_eff,
                    k,
                    value: val,
                });
            }
        }
        clamp_to_tail(&mut u);
        states.push(u.clone());
    }

    Ok(OdeSolution {
        dt: dt_eff,
        states,
        params: *p,
    })
}

/// Project a near-tail state back onto the tail simplex. Adjustments beyond
/// roundoff scale indicate an integrator fault, not a modeling choice.
fn clamp_to_tail(v: &mut [f64]) {
    v[0] = 1.0;
    let k_max = v.len() - 1;
    for k in 1..=k_max {
        let next = if k < k_max { v[k + 1] } else { 0.0 };
        v[k] = v[k].clamp(0.0, 1.0).max(next.clamp(0.0, 1.0)).min(v[k - 1]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::validate_tail;
    use crate::seqspace::{weighted_l1, WeightSeq};
    use crate::testutil::{matrix_exp, params, random_tail};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn drift_at_example_point() {
        let p = params(1.0, 2.0, 2);
        let v = TailVector::new(vec![1.0, 0.5, 0.125]).unwrap();
        let f = drift(&v, &p);
        assert!((f.plus()[1] - 0.75).abs() < 1e-15);
        assert!((f.minus()[1] - 0.75).abs() < 1e-15);
        assert!(f.total()[1].abs() < 1e-15);
    }

    #[test]
    fn drift_on_empty_network() {
        let p = params(1.5, 2.0, 3);
        let v = TailVector::empty_network(5);
        let f = drift(&v, &p);
        assert_eq!(f.plus()[1], 1.5);
        assert!(f.plus()[2..].iter().all(|&x| x == 0.0));
        assert!(f.minus().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn drift_vanishes_at_fixed_point() {
        for (a, b, l) in [(1.0, 2.0, 2), (0.7, 1.0, 3), (0.3, 1.0, 1), (2.0, 2.5, 4)] {
            let p = params(a, b, l);
            let k_max = suggest_horizon(&p, 10).unwrap();
            let u = fixed_point(&p, k_max).unwrap();
            let total = drift(&u, &p).total();
            let sup = total.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(sup <= 1e-12, "residual {sup} for ({a},{b},{l})");
        }
    }

    #[test]
    fn fixed_point_values() {
        let p = params(1.0, 2.0, 2);
        let u = fixed_point(&p, 3).unwrap();
        assert_eq!(u.value(0), 1.0);
        assert!((u.value(1) - 0.5).abs() < 1e-16);
        assert!((u.value(2) - 0.125).abs() < 1e-16);
        assert!((u.value(3) - 0.0078125).abs() < 1e-17);
    }

    #[test]
    fn fixed_point_l1_is_geometric() {
        let p = params(1.0, 2.0, 1);
        let u = fixed_point(&p, 8).unwrap();
        for k in 0..=8 {
            assert!((u.value(k) - 0.5f64.powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_point_unstable_errors() {
        let p = params(3.0, 2.0, 2);
        assert!(matches!(
            fixed_point(&p, 5),
            Err(Error::UnstableRegime { .. })
        ));
    }

    #[test]
    fn finite_n_drift_example() {
        // N = 4, r = (1, 0.5, 0): plus(1) = [(4)_2 - (2)_2] / (4)_2 = 5/6.
        let p = params(1.0, 2.0, 2);
        let r = EmpiricalTail::new(vec![4, 2, 0], 4).unwrap();
        let f = finite_n_drift(&r, &p).unwrap();
        assert!((f.plus()[1] - 5.0 / 6.0).abs() < 1e-15);
        assert!((f.plus()[2] - 1.0 / 6.0).abs() < 1e-15);
        assert!((f.minus()[1] - 2.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn finite_n_drift_equal_tails_cancel() {
        let p = params(1.0, 1.0, 3);
        let r = EmpiricalTail::new(vec![6, 6, 6, 2, 0], 6).unwrap();
        let f = finite_n_drift(&r, &p).unwrap();
        assert_eq!(f.plus()[1], 0.0);
        assert_eq!(f.plus()[2], 0.0);
        assert!(f.plus()[3] > 0.0);
    }

    #[test]
    fn finite_n_drift_requires_enough_queues() {
        let p = params(1.0, 1.0, 5);
        let r = EmpiricalTail::new(vec![3, 1], 3).unwrap();
        assert!(matches!(
            finite_n_drift(&r, &p),
            Err(Error::PopulationTooSmall { .. })
        ));
    }

    #[test]
    fn finite_n_drift_converges_at_rate_one_over_n() {
        // sup_k |F^N - F| on a fixed fractional tail, N in {10, 100, 1000}.
        let p = params(1.0, 2.0, 2);
        let fractions = [1.0, 0.6, 0.3, 0.1, 0.0];
        let mut errs = Vec::new();
        for n in [10u64, 100, 1000] {
            let counts: Vec<u64> = fractions
                .iter()
                .map(|f| (f * n as f64).round() as u64)
                .collect();
            let r = EmpiricalTail::new(counts, n).unwrap();
            let v = r.to_tail_vector(fractions.len() - 1);
            let exact = drift(&v, &p).total();
            let finite = finite_n_drift(&r, &p).unwrap().total();
            let err = exact
                .iter()
                .zip(&finite)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            errs.push((n as f64, err));
        }
        // N * err stays bounded by its smallest-N value (the rate is 1/N).
        let c = 10.0 * errs[0].1;
        for (n, err) in &errs {
            assert!(n * err <= c * 1.0000001, "N*err = {} exceeds C = {c}", n * err);
        }
    }

    #[test]
    fn sampling_correction_examples() {
        assert_eq!(sampling_correction(1.0, 7, 3), 0.0);
        assert_eq!(sampling_correction(0.0, 7, 3), 0.0);
        // L = 2 closed form a(a-1)/(N-1).
        let a = 0.4;
        let expected = a * (a - 1.0) / 4.0;
        assert!((sampling_correction(a, 5, 2) - expected).abs() < 1e-16);
        assert!((sampling_correction(a, 5, 2) + 0.06).abs() < 1e-15);
        assert_eq!(sampling_correction(0.7, 9, 1), 0.0);
    }

    #[test]
    fn sampling_correction_matches_falling_factorials() {
        for l in 1..=5u32 {
            for n in l as u64..=30 {
                for step in 0..=20 {
                    let a = step as f64 / 20.0;
                    let direct = falling_factorial_ratio(a, n as f64, l) - a.powi(l as i32);
                    let subset = sampling_correction(a, n, l);
                    assert!(
                        (direct - subset).abs() <= 1e-13,
                        "mismatch at L={l} N={n} a={a}: {direct} vs {subset}"
                    );
                }
            }
        }
    }

    #[test]
    fn binomial_remainder_examples() {
        assert!((binomial_remainder(0.3, 0.1, 2) - 0.01).abs() < 1e-17);
        assert_eq!(binomial_remainder(0.9, 0.3, 1), 0.0);
        assert!((binomial_remainder(0.5, 0.1, 3) - 0.016).abs() < 1e-15);
    }

    #[test]
    fn binomial_remainder_matches_direct_form() {
        for l in 2..=5u32 {
            for ia in 0..=10 {
                for ih in -10..=10i32 {
                    let a = ia as f64 / 10.0;
                    let h = ih as f64 / 10.0;
                    if !(0.0..=1.0).contains(&(a + h)) {
                        continue;
                    }
                    let direct = (a + h).powi(l as i32)
                        - a.powi(l as i32)
                        - l as f64 * a.powi(l as i32 - 1) * h;
                    let sum = binomial_remainder(a, h, l);
                    assert!(
                        (direct - sum).abs() <= 1e-13,
                        "L={l} a={a} h={h}: {direct} vs {sum}"
                    );
                }
            }
        }
    }

    #[test]
    fn binomial_remainder_bounds() {
        // 0 <= B(a, h) <= h^L + (2^L - L - 2) a h^2 for a, a+h in [0, 1].
        for l in 2..=5u32 {
            let slack = (2f64.powi(l as i32) - l as f64 - 2.0).max(0.0);
            for ia in 0..=20 {
                for ih in -20..=20i32 {
                    let a = ia as f64 / 20.0;
                    let h = ih as f64 / 20.0;
                    if !(0.0..=1.0).contains(&(a + h)) {
                        continue;
                    }
                    let b = binomial_remainder(a, h, l);
                    assert!(b >= -1e-15, "B({a},{h}) = {b} < 0 at L={l}");
                    let bound = h.powi(l as i32) + slack * a * h * h;
                    assert!(b <= bound + 1e-15, "B({a},{h}) = {b} > {bound} at L={l}");
                }
            }
        }
    }

    #[test]
    fn correction_g_closes_the_finite_n_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params(1.3, 0.9, 3);
        for _ in 0..100 {
            let n = rng.random_range(3u64..60);
            let k_max = rng.random_range(2usize..8);
            // exact multiples of 1/n so the empirical tail is representable
            let mut counts: Vec<u64> = (0..k_max).map(|_| rng.random_range(0..=n)).collect();
            counts.sort_unstable_by(|a, b| b.cmp(a));
            let mut all = vec![n];
            all.extend(counts);
            let r = EmpiricalTail::new(all, n).unwrap();
            let v = r.to_tail_vector(k_max);

            let fin = finite_n_drift(&r, &p).unwrap();
            let lim = drift(&v, &p);
            let g = correction_g(&v, n, &p);
            for k in 0..=k_max {
                // zero extension beyond the trimmed horizon is exact
                let fin_plus = fin.plus().get(k).copied().unwrap_or(0.0);
                let gap = fin_plus - lim.plus()[k];
                assert!(
                    (gap - g[k]).abs() <= 1e-14,
                    "k={k}: gap {gap} vs G {g}",
                    g = g[k]
                );
            }
        }
    }

    #[test]
    fn correction_g_vanishes_on_flat_stretches() {
        let p = params(1.0, 1.0, 2);
        let v = TailVector::new(vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let g = correction_g(&v, 12, &p);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn correction_g_scales_as_one_over_n() {
        let p = params(1.0, 2.0, 3);
        let v = TailVector::new(vec![1.0, 0.6, 0.3, 0.1]).unwrap();
        let sup = |n: u64| {
            correction_g(&v, n, &p)
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
        };
        let c = 10.0 * sup(10);
        for n in [10u64, 100, 1000] {
            assert!(n as f64 * sup(n) <= c * 1.0000001);
        }
    }

    #[test]
    fn remainder_h_zero_cases() {
        let p = params(1.0, 2.0, 2);
        let v = TailVector::new(vec![1.0, 0.5, 0.2]).unwrap();
        assert!(remainder_h(&v, &[0.0, 0.0, 0.0], &p).iter().all(|&x| x == 0.0));
        let p1 = params(1.0, 2.0, 1);
        assert!(remainder_h(&v, &[0.0, 0.3, -0.1], &p1)
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn drift_difference_decomposes_exactly() {
        // F(v + x) - F(v) = K(v) x + H(v, x) with x a difference of tails.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params(1.0, 2.0, 2);
        for _ in 0..100 {
            let k_max = 6;
            let v = random_tail(&mut rng, k_max);
            let w = random_tail(&mut rng, k_max);
            let x: Vec<f64> = w
                .values()
                .iter()
                .zip(v.values())
                .map(|(a, b)| a - b)
                .collect();
            let lhs: Vec<f64> = drift(&w, &p)
                .total()
                .iter()
                .zip(drift(&v, &p).total())
                .map(|(a, b)| a - b)
                .collect();
            let kx = crate::linop::build_k(&v, &p).apply(&x);
            let h = remainder_h(&v, &x, &p);
            for k in 0..=k_max {
                assert!(
                    (lhs[k] - kx[k] - h[k]).abs() <= 1e-14,
                    "k={k}: {} vs {}",
                    lhs[k],
                    kx[k] + h[k]
                );
            }
        }
    }

    #[test]
    fn ode_stays_at_equilibrium() {
        let p = params(1.0, 2.0, 2);
        let k_max = suggest_horizon(&p, 10).unwrap();
        let u_tilde = fixed_point(&p, k_max).unwrap();
        let sol = integrate_ode(&u_tilde, &p, 10.0, default_dt(&p)).unwrap();
        let mut sup = 0.0f64;
        for i in 0..sol.len() {
            for (k, &v) in sol.state_at(i).iter().enumerate() {
                sup = sup.max((v - u_tilde.value(k)).abs());
            }
        }
        assert!(sup <= 1e-10, "equilibrium drifted by {sup}");
    }

    #[test]
    fn ode_relaxes_from_empty_start() {
        let p = params(1.0, 2.0, 2);
        let k_max = suggest_horizon(&p, 10).unwrap();
        let u_tilde = fixed_point(&p, k_max).unwrap();
        let sol = integrate_ode(&TailVector::empty_network(k_max), &p, 40.0, default_dt(&p))
            .unwrap();
        let last = sol.final_state();
        let sup = (0..=k_max).fold(0.0f64, |m, k| {
            m.max((last.value(k) - u_tilde.value(k)).abs())
        });
        assert!(sup <= 1e-6, "final deviation {sup}");
    }

    #[test]
    fn ode_preserves_tail_validity() {
        let p = params(2.0, 1.0, 2); // unstable regime still integrates
        let sol = integrate_ode(&TailVector::empty_network(12), &p, 3.0, 1e-3).unwrap();
        for i in 0..sol.len() {
            assert!(validate_tail(sol.state_at(i)));
        }
    }

    #[test]
    fn ode_flow_property() {
        let p = params(1.0, 2.0, 2);
        let u0 = TailVector::empty_network(10);
        let dt = 1e-3;
        let full = integrate_ode(&u0, &p, 4.0, dt).unwrap();
        let first = integrate_ode(&u0, &p, 2.0, dt).unwrap();
        let second = integrate_ode(&first.final_state(), &p, 2.0, dt).unwrap();
        let a = full.final_state();
        let b = second.final_state();
        for k in 0..=10 {
            assert!((a.value(k) - b.value(k)).abs() <= 1e-9);
        }
    }

    #[test]
    fn ode_rejects_oversized_steps() {
        let p = params(50.0, 1.0, 2);
        let res = integrate_ode(&TailVector::empty_network(6), &p, 1.0, 0.5);
        assert!(matches!(res, Err(Error::StepRejected { .. })));
    }

    #[test]
    fn dense_output_matches_knots_and_interpolates() {
        let p = params(1.0, 2.0, 2);
        let sol = integrate_ode(&TailVector::empty_network(8), &p, 1.0, 1e-2).unwrap();
        let at_knot = sol.sample(sol.time(13)).unwrap();
        assert_eq!(at_knot, sol.state_at(13).to_vec());
        let mid = sol.sample(sol.time(13) + 0.5 * sol.dt()).unwrap();
        for k in 0..=8 {
            let expect = 0.5 * (sol.state_at(13)[k] + sol.state_at(14)[k]);
            assert!((mid[k] - expect).abs() < 1e-15);
        }
        assert!(sol.sample(2.0).is_err());
        assert!(sol.sample(-0.1).is_err());
    }

    #[test]
    fn l1_dynamics_match_linear_system_oracle() {
        // For L = 1 the truncated field is affine: du/dt = A u + b with A
        // tridiagonal. Solve with a matrix exponential (scaling and
        // squaring) as an independent reference.
        let p = params(1.0, 2.0, 1);
        let k_max = 20usize;
        let sol = integrate_ode(&TailVector::empty_network(k_max), &p, 5.0, 1e-3).unwrap();

        let (alpha, beta) = (p.alpha(), p.beta());
        let a = DMatrix::from_fn(k_max, k_max, |i, j| {
            if i == j {
                -(alpha + beta)
            } else if j + 1 == i {
                alpha
            } else if j == i + 1 {
                beta
            } else {
                0.0
            }
        });
        let b = DMatrix::from_fn(k_max, 1, |i, _| if i == 0 { alpha } else { 0.0 });
        // stationary point A y + b = 0
        let y_inf = a.clone().lu().solve(&(-&b)).unwrap();

        for i in 1..=10 {
            let t = 0.5 * i as f64;
            let propagator = matrix_exp(&(a.clone() * t));
            let y0 = DMatrix::zeros(k_max, 1) - &y_inf;
            let y = &propagator * y0 + &y_inf;
            let got = sol.sample(t).unwrap();
            for k in 1..=k_max {
                let reference = y[(k - 1, 0)];
                let err = (got[k] - reference).abs();
                let denom = reference.abs().max(1e-9);
                assert!(
                    err / denom <= 1e-6,
                    "t={t} k={k}: {got} vs {reference}",
                    got = got[k]
                );
            }
        }
    }

    #[test]
    fn lipschitz_bound_in_weighted_l1() {
        // ||F(u) - F(v)||_{l1(w)} <= [alpha L (d+1) + beta (1/c + 1)] ||u - v||.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = params(1.0, 2.0, 2);
        let k_max = 8;
        let w = WeightSeq::geometric(0.5, k_max).unwrap();
        let constant =
            p.alpha() * p.choices() as f64 * (w.d() + 1.0) + p.beta() * (1.0 / w.c() + 1.0);
        for _ in 0..1000 {
            let u = random_tail(&mut rng, k_max);
            let v = random_tail(&mut rng, k_max);
            let fu = drift(&u, &p).total();
            let fv = drift(&v, &p).total();
            let df: Vec<f64> = fu.iter().zip(&fv).map(|(a, b)| a - b).collect();
            let du: Vec<f64> = u
                .values()
                .iter()
                .zip(v.values())
                .map(|(a, b)| a - b)
                .collect();
            let lhs = weighted_l1(&df, &w).unwrap();
            let rhs = constant * weighted_l1(&du, &w).unwrap();
            assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
        }
    }

    #[test]
    fn suggested_horizon_is_small_for_strong_decay() {
        let p = params(1.0, 2.0, 2);
        let k = suggest_horizon(&p, 1).unwrap();
        assert_eq!(k, 6); // 0.5^(2^6 - 1) = 2^-63 < 1e-14 < 0.5^(2^5 - 1)
        assert_eq!(suggest_horizon(&p, 10).unwrap(), 10);
        let slow = params(1.0, 2.0, 1);
        assert_eq!(suggest_horizon(&slow, 1).unwrap(), 47);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn integrator_output_always_valid(seed in 0u64..1000, alpha in 0.2f64..2.0, beta in 0.2f64..2.0) {
            let p = params(alpha, beta, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u0 = random_tail(&mut rng, 8);
            let sol = integrate_ode(&u0, &p, 1.0, 1e-3).unwrap();
            for i in 0..sol.len() {
                prop_assert!(validate_tail(sol.state_at(i)));
            }
        }
    }
}
