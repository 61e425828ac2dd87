//! Replication-level statistics: moment estimation, Kolmogorov-Smirnov
//! tests (one-sample against a fixed normal, two-sample), asymptotic
//! Kolmogorov tail probabilities, log-log convergence-rate fitting, and the
//! criterion records emitted by the verification commands.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::seqspace::ModelParams;

/// M x K matrix of per-replica outputs (replica i, coordinate j), with the
/// parameter set and base seed that produced it.
#[derive(Debug, Clone)]
pub struct ReplicaEnsemble {
    values: Vec<f64>, // row-major M x K
    ncols: usize,
    params: Option<ModelParams>,
    seed: Option<u64>,
}

impl ReplicaEnsemble {
    /// Rows must be nonempty, of equal length, with at least two replicas.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::TooFewSamples {
                got: rows.len(),
                need: 2,
            });
        }
        let ncols = rows[0].len();
        if ncols == 0 {
            return Err(Error::EmptySequence);
        }
        let mut values = Vec::with_capacity(rows.len() * ncols);
        for row in &rows {
            if row.len() != ncols {
                return Err(Error::LengthMismatch {
                    seq: row.len(),
                    weights: ncols,
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            values,
            ncols,
            params: None,
            seed: None,
        })
    }

    pub fn with_meta(mut self, params: ModelParams, seed: u64) -> Self {
        self.params = Some(params);
        self.seed = Some(seed);
        self
    }

    /// Replica count M.
    pub fn replicas(&self) -> usize {
        self.values.len() / self.ncols
    }

    /// Coordinate count K.
    pub fn coords(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.replicas()).map(|i| self.row(i)[j]).collect()
    }

    pub fn params(&self) -> Option<&ModelParams> {
        self.params.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Unbiased sample moments of an ensemble.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Standard error of each mean entry, `sqrt(cov_jj / M)`.
    pub std_errors: Vec<f64>,
}

pub fn ensemble_moments(e: &ReplicaEnsemble) -> Moments {
    let m = e.replicas();
    let k = e.coords();
    let mf = m as f64;
    let mut mean = vec![0.0; k];
    for i in 0..m {
        for (j, mu) in mean.iter_mut().enumerate() {
            *mu += e.row(i)[j];
        }
    }
    for mu in &mut mean {
        *mu /= mf;
    }
    let mut covariance: DMatrix<f64> = DMatrix::zeros(k, k);
    for i in 0..m {
        let row = e.row(i);
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in a..k {
                covariance[(a, b)] += da * (row[b] - mean[b]) / (mf - 1.0);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            covariance[(a, b)] = covariance[(b, a)];
        }
    }
    let std_errors = (0..k).map(|j| (covariance[(j, j)] / mf).sqrt()).collect();
    Moments {
        mean,
        covariance,
        std_errors,
    }
}

/// Kolmogorov-Smirnov outcome.
#[derive(Debug, Clone, Copy)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov distribution function `P(K <= lambda)`.
///
/// Small arguments use the theta-series
/// `sqrt(2 pi)/lambda sum exp(-(2k-1)^2 pi^2 / (8 lambda^2))`, large ones
/// the alternating series `1 - 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`;
/// both converge in a handful of terms on their side of the switch.
pub fn kolmogorov_cdf(lambda: f64) -> f64 {
    1.0 - kolmogorov_sf(lambda)
}

/// Upper tail `P(K > lambda)` of the asymptotic Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let t = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        // theta series: t^((2k-1)^2) = t, t^9, t^25, ...
        let sum = t * (1.0 + t.powi(8) * (1.0 + t.powi(16) * (1.0 + t.powi(24))));
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        for k in 1..=12 {
            let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
            if term < 1e-300 {
                break;
            }
            sum += if k % 2 == 1 { term } else { -term };
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    // Stephens' finite-sample adjustment of the asymptotic distribution.
    let root = n_eff.sqrt();
    kolmogorov_sf(d * (root + 0.12 + 0.11 / root))
}

/// One-sample Kolmogorov-Smirnov test of `data` against the normal law
/// `N(mu, sigma^2)` with both parameters fixed a priori.
pub fn ks_normality(data: &[f64], mu: f64, sigma: f64) -> Result<KsTest> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::DegenerateSigma);
    }
    if data.len() < 50 {
        return Err(Error::TooFewSamples {
            got: data.len(),
            need: 50,
        });
    }
    let mut standardized: Vec<f64> = data.iter().map(|x| (x - mu) / sigma).collect();
    standardized.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = standardized.len() as f64;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut d = 0.0f64;
    for (i, x) in standardized.iter().enumerate() {
        let cdf = statrs::distribution::ContinuousCDF::cdf(&normal, *x);
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    Ok(KsTest {
        statistic: d,
        p_value: ks_p_value(d, n),
    })
}

/// Two-sample Kolmogorov-Smirnov test. Ties are handled by advancing both
/// empirical distribution functions through each distinct value; for
/// heavily tied (integer) data the asymptotic p-value is conservative.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.len() < 10 || b.len() < 10 {
        return Err(Error::TooFewSamples {
            got: a.len().min(b.len()),
            need: 10,
        });
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    // Suffix beyond the shorter sample cannot increase D (one EDF is 1).
    let n_eff = na * nb / (na + nb);
    Ok(KsTest {
        statistic: d,
        p_value: ks_p_value(d, n_eff),
    })
}

/// Least-squares fit of `log(error)` against `log(N)`.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub ns: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (zero for a 2-parameter exact fit on
    /// 3 points only if residuals vanish).
    pub stderr: f64,
}

pub fn fit_rate(ns: &[f64], errors: &[f64]) -> Result<RateFit> {
    if ns.len() < 3 {
        return Err(Error::TooFewSamples {
            got: ns.len(),
            need: 3,
        });
    }
    if ns.len() != errors.len() {
        return Err(Error::LengthMismatch {
            seq: ns.len(),
            weights: errors.len(),
        });
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams("N values must be strictly increasing"));
    }
    if errors.iter().any(|&e| e <= 0.0) || ns.iter().any(|&n| n <= 0.0) {
        return Err(Error::InvalidParams("rate fit needs positive data"));
    }
    let x: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - xbar).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| (xi - xbar) * (yi - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ssr: f64 = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| (yi - intercept - slope * xi).powi(2))
        .sum();
    let stderr = if x.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        ns: ns.to_vec(),
        errors: errors.to_vec(),
        slope,
        intercept,
        stderr,
    })
}

/// `||emp - reference||_F / ||reference||_F`.
pub fn frobenius_rel_error(emp: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (emp - reference).norm() / reference.norm()
}

/// Median (average of the central pair for even length).
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// One pass/fail line of a verdict report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Criterion {
    pub criterion: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Criterion {
    /// Passes when `statistic <= threshold`.
    pub fn at_most(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self {
            criterion: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
        }
    }

    /// Passes when `statistic >= threshold`.
    pub fn at_least(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Self {
            criterion: name.into(),
            statistic,
            threshold,
            pass: statistic >= threshold,
        }
    }

    /// Passes when `statistic` is within `half_width` of `center`
    /// (recorded as the distance against the half-width).
    pub fn within(name: impl Into<String>, statistic: f64, center: f64, half_width: f64) -> Self {
        Self {
            criterion: name.into(),
            statistic: (statistic - center).abs(),
            threshold: half_width,
            pass: (statistic - center).abs() <= half_width,
        }
    }
}
