//! Sequence-space types for tail vectors and weighted norms.
//!
//! A tail vector records, for each depth `k`, the fraction of queues holding
//! at least `k` customers: `v(0) = 1`, nonincreasing, decaying to zero. All
//! sequences live on a finite horizon `0..=k_max` with implicit zero
//! extension beyond it; coordinate arrays everywhere in this crate follow the
//! same indexing, with the entry at index 0 pinned (1 for tails, 0 for
//! fluctuations and drifts).

use crate::error::{Error, Result};

/// Predicate form of the tail-vector invariant: first entry 1, nonincreasing,
/// all entries in `[0, 1]`. Comparisons are exact; simulation states are
/// multiples of `1/N` and ODE states are clamped monotone after each step.
pub fn validate_tail(values: &[f64]) -> bool {
    if values.is_empty() || values[0] != 1.0 {
        return false;
    }
    values.windows(2).all(|w| w[0] >= w[1]) && *values.last().unwrap() >= 0.0
}

/// Truncated tail of a probability distribution on queue lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct TailVector {
    values: Vec<f64>,
}

impl TailVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySequence);
        }
        if !validate_tail(&values) {
            return Err(Error::InvalidTail(
                "requires v(0) = 1, nonincreasing entries in [0, 1]",
            ));
        }
        Ok(Self { values })
    }

    /// The all-empty network: `(1, 0, ..., 0)`.
    pub fn empty_network(k_max: usize) -> Self {
        let mut values = vec![0.0; k_max + 1];
        values[0] = 1.0;
        Self { values }
    }

    /// Truncation horizon `k_max`; entries beyond it are implicitly zero.
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    /// `v(k)`, with zero extension beyond the horizon.
    #[inline]
    pub fn value(&self, k: usize) -> f64 {
        self.values.get(k).copied().unwrap_or(0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Point masses `p{k} = v(k) - v(k+1)` for `k = 0..k_max`.
    ///
    /// Sums to 1 exactly when the tail decays to 0 inside the horizon.
    pub fn to_pmf(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|k| self.value(k) - self.value(k + 1))
            .collect()
    }

    /// Inverse of [`TailVector::to_pmf`]: `v(k) = sum_{j >= k} p{j}`.
    ///
    /// Summation runs from the deep end so that the reconstruction is exact
    /// on exactly-representable masses.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut values = vec![0.0; pmf.len()];
        let mut acc = 0.0;
        for k in (0..pmf.len()).rev() {
            acc += pmf[k];
            values[k] = acc;
        }
        Self::new(values)
    }
}

/// Aggregated state of an `N`-queue network: `counts[k]` queues hold at least
/// `k` customers, so `counts[0] = N` and the sequence is nonincreasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalTail {
    counts: Vec<u64>,
    n: u64,
}

impl EmpiricalTail {
    /// Trailing empty levels are trimmed so equal states compare equal
    /// regardless of how the counts were assembled.
    pub fn new(mut counts: Vec<u64>, n: u64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptySequence);
        }
        if n == 0 {
            return Err(Error::InvalidEmpirical("N must be positive"));
        }
        if counts[0] != n {
            return Err(Error::InvalidEmpirical("counts[0] must equal N"));
        }
        if counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidEmpirical("counts must be nonincreasing"));
        }
        while counts.len() > 1 && *counts.last().unwrap() == 0 {
            counts.pop();
        }
        Ok(Self { counts, n })
    }

    /// All queues empty.
    pub fn empty(n: u64) -> Self {
        Self {
            counts: vec![n],
            n,
        }
    }

    /// Aggregate per-queue occupancies into tail counts.
    pub fn from_lengths(lengths: &[u32]) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::EmptySequence);
        }
        let max = *lengths.iter().max().unwrap() as usize;
        let mut counts = vec![0u64; max + 1];
        for &len in lengths {
            for entry in counts.iter_mut().take(len as usize + 1) {
                *entry += 1;
            }
        }
        Self::new(counts, lengths.len() as u64)
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// `counts[k]`, zero beyond the stored range.
    #[inline]
    pub fn count(&self, k: usize) -> u64 {
        self.counts.get(k).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Deepest occupied level (0 when all queues are empty).
    pub fn max_level(&self) -> usize {
        (1..self.counts.len())
            .rev()
            .find(|&k| self.counts[k] > 0)
            .unwrap_or(0)
    }

    /// `R(k) = counts[k] / N`, exact in f64 for counts up to 2^53.
    #[inline]
    pub fn fraction(&self, k: usize) -> f64 {
        self.count(k) as f64 / self.n as f64
    }

    /// Normalize onto a fixed horizon as a tail vector.
    pub fn to_tail_vector(&self, k_max: usize) -> TailVector {
        let values = (0..=k_max).map(|k| self.fraction(k)).collect();
        TailVector { values }
    }
}

/// Strictly positive weights `w(k)`, `k >= 1`, with comparison constants
/// `c, d` satisfying `c w(k+1) <= w(k) <= d w(k+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSeq {
    w: Vec<f64>, // w[i] stores w(i + 1)
    c: f64,
    d: f64,
}

impl WeightSeq {
    pub fn new(w: Vec<f64>, c: f64, d: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::EmptySequence);
        }
        if w.iter().any(|&x| x <= 0.0) || c <= 0.0 || d <= 0.0 {
            return Err(Error::WeightComparison { k: 0 });
        }
        // Tolerate roundoff in the stored constants.
        let slack = 1.0 + 1e-12;
        for k in 0..w.len() - 1 {
            if c * w[k + 1] > w[k] * slack || w[k] > d * w[k + 1] * slack {
                return Err(Error::WeightComparison { k: k + 1 });
            }
        }
        Ok(Self { w, c, d })
    }

    /// Geometric weights `w(k) = theta^k` with the tightest constants
    /// `c = d = 1/theta`.
    pub fn geometric(theta: f64, k_max: usize) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::ThetaOutOfRange(theta));
        }
        let w = (1..=k_max.max(1)).map(|k| theta.powi(k as i32)).collect();
        Self::new(w, 1.0 / theta, 1.0 / theta)
    }

    /// `w(k)` for `k >= 1`.
    #[inline]
    pub fn weight(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        self.w[k - 1]
    }

    /// Largest index covered.
    pub fn max_index(&self) -> usize {
        self.w.len()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }
}

/// Squared weighted l2 norm `sum_{k>=1} x(k)^2 / w(k)`.
///
/// `x` is indexed from 0 (entry 0 is ignored and expected to be 0) and must
/// cover the same range as `w`.
pub fn weighted_l2_sq(x: &[f64], w: &WeightSeq) -> Result<f64> {
    check_range(x, w)?;
    Ok((1..x.len()).map(|k| x[k] * x[k] / w.weight(k)).sum())
}

/// Weighted l1 norm `sum_{k>=1} |x(k)| / w(k)`.
pub fn weighted_l1(x: &[f64], w: &WeightSeq) -> Result<f64> {
    check_range(x, w)?;
    Ok((1..x.len()).map(|k| x[k].abs() / w.weight(k)).sum())
}

fn check_range(x: &[f64], w: &WeightSeq) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    if x.len() - 1 != w.max_index() {
        return Err(Error::LengthMismatch {
            seq: x.len() - 1,
            weights: w.max_index(),
        });
    }
    Ok(())
}

/// Arrival rate `alpha` per queue, service rate `beta`, and the number of
/// queues `L` sampled per arrival. `rho = alpha / beta` is stored exactly as
/// the quotient.
///
/// Either rate may be zero (degenerate pure-service or pure-arrival
/// dynamics used by the test oracles), but not both.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    alpha: f64,
    beta: f64,
    choices: u32,
    rho: f64,
}

impl ModelParams {
    pub fn new(alpha: f64, beta: f64, choices: u32) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidParams("rates must be nonnegative and finite"));
        }
        if alpha == 0.0 && beta == 0.0 {
            return Err(Error::InvalidParams("alpha and beta cannot both be zero"));
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidParams("rates must be finite"));
        }
        if choices < 1 {
            return Err(Error::InvalidParams("L must be at least 1"));
        }
        Ok(Self {
            alpha,
            beta,
            choices,
            rho: alpha / beta,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// The choice count `L`.
    pub fn choices(&self) -> u32 {
        self.choices
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Stability of the network: `rho < 1`.
    pub fn is_stable(&self) -> bool {
        self.rho < 1.0
    }
}
