//! The Ornstein-Uhlenbeck fluctuation limit `dZ = K(u_t) Z dt + dM`:
//! Euler-Maruyama path simulation, the second-moment (Lyapunov) equation
//! `dSigma/dt = K Sigma + Sigma K' + diag(Lambda)`, and the
//! time-ordered-exponential propagator `e^{int_s^t K(u_r) dr}`.
//!
//! The fluctuation block `1..=m` may be shorter than the mean-field
//! horizon: coefficients `K(u_t)` and `Lambda(u_t)` are always evaluated
//! on the full ODE state, then compressed to the block with an absorbing
//! boundary (`z(m+1) = 0`).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linop::{bracket_rate_raw, k_coefficients_raw};
use crate::meanfield::OdeSolution;
use crate::rng::{replica_rng, run_replicas};
use crate::seqspace::{ModelParams, TailVector};

/// Fluctuation coordinates at a time point; `z(0) = 0` always.
#[derive(Debug, Clone, PartialEq)]
pub struct OuState {
    z: Vec<f64>,
    t: f64,
}

impl OuState {
    pub fn new(z: Vec<f64>, t: f64) -> Result<Self> {
        if z.len() < 2 {
            return Err(Error::InvalidState(
                "state must cover coordinates 0 and 1",
            ));
        }
        if z[0] != 0.0 {
            return Err(Error::InvalidState("coordinate 0 must vanish"));
        }
        if z.iter().any(|x| !x.is_finite()) || !t.is_finite() {
            return Err(Error::InvalidState("entries must be finite"));
        }
        Ok(Self { z, t })
    }

    /// Origin of the fluctuation space on `1..=k_max`.
    pub fn zero(k_max: usize, t: f64) -> Self {
        Self {
            z: vec![0.0; k_max + 1],
            t,
        }
    }

    /// Unit vector `e_k` on `1..=k_max`.
    pub fn unit(k_max: usize, k: usize, t: f64) -> Self {
        assert!((1..=k_max).contains(&k));
        let mut z = vec![0.0; k_max + 1];
        z[k] = 1.0;
        Self { z, t }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Coordinates `0..=k_max` (entry 0 is always 0).
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Number of active coordinates.
    pub fn dim(&self) -> usize {
        self.z.len() - 1
    }
}

/// Symmetric positive-semidefinite matrix over fluctuation coordinates
/// `1..=m` (entry `(j, k)` at matrix position `(j-1, k-1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    sigma: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Validates symmetry (to `1e-12` relative to the largest entry) and
    /// positive semidefiniteness (smallest eigenvalue above `-1e-10` on
    /// the same scale).
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::InvalidState("covariance matrix must be square"));
        }
        let scale = sigma.abs().max().max(1.0);
        let m = sigma.nrows();
        for i in 0..m {
            for j in (i + 1)..m {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let min_eig = min_eigenvalue_of(&sigma);
        if min_eig < -1e-10 * scale {
            return Err(Error::NotPositiveSemidefinite(min_eig));
        }
        Ok(Self { sigma })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            sigma: DMatrix::zeros(m.max(1), m.max(1)),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Entry for coordinates `j, k >= 1`.
    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.sigma[(j - 1, k - 1)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Top-left `m x m` block (coordinates `1..=m`).
    pub fn top_block(&self, m: usize) -> DMatrix<f64> {
        self.sigma.view((0, 0), (m, m)).into_owned()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue_of(&self.sigma)
    }

    pub fn frobenius(&self) -> f64 {
        self.sigma.norm()
    }
}

fn min_eigenvalue_of(sigma: &DMatrix<f64>) -> f64 {
    let sym = (sigma + sigma.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// `y += a x` elementwise (matrix shapes assumed equal).
fn mat_axpy(y: &mut DMatrix<f64>, a: f64, x: &DMatrix<f64>) {
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += a * xi;
    }
}

/// Knots of the covariance ODE on a uniform grid starting at `t = 0`.
#[derive(Debug, Clone)]
pub struct CovarianceTrajectory {
    dt: f64,
    mats: Vec<DMatrix<f64>>,
}

impl CovarianceTrajectory {
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.mats.len() - 1)
    }

    pub fn raw_at(&self, i: usize) -> &DMatrix<f64> {
        &self.mats[i]
    }

    /// Knot `i` as a validated covariance matrix.
    pub fn at(&self, i: usize) -> Result<CovarianceMatrix> {
        CovarianceMatrix::new(self.mats[i].clone())
    }

    pub fn final_cov(&self) -> Result<CovarianceMatrix> {
        self.at(self.mats.len() - 1)
    }
}

fn check_block(m: usize, ode: &OdeSolution) -> Result<()> {
    if m < 1 {
        return Err(Error::InvalidState(
            "fluctuation block must contain coordinate 1",
        ));
    }
    if m > ode.k_max() {
        return Err(Error::BlockExceedsHorizon {
            block: m,
            k_max: ode.k_max(),
        });
    }
    Ok(())
}

fn check_span(t0: f64, t_end: f64, ode: &OdeSolution) -> Result<()> {
    let horizon = ode.final_time();
    if t0 < 0.0 || t0 > horizon * (1.0 + 1e-12) {
        return Err(Error::HorizonExceeded {
            requested: t0,
            available: horizon,
        });
    }
    if t_end < t0 || t_end > horizon * (1.0 + 1e-12) {
        return Err(Error::HorizonExceeded {
            requested: t_end,
            available: horizon,
        });
    }
    Ok(())
}

/// Second-moment (Lyapunov) equation of the OU law,
/// `dSigma/dt = K(u_t) Sigma + Sigma K(u_t)' + diag(Lambda(u_t))`,
/// integrated by RK4 on the ODE grid from `Sigma_0 = sigma0`. Stages keep
/// exact symmetry; positive semidefiniteness is validated on access.
pub fn evolve_covariance(
    sigma0: &CovarianceMatrix,
    ode: &OdeSolution,
    p: &ModelParams,
    t_end: f64,
) -> Result<CovarianceTrajectory> {
    let m = sigma0.dim();
    check_block(m, ode)?;
    check_span(0.0, t_end, ode)?;

    let n_steps = ((t_end / ode.dt()) - 1e-9).ceil().max(0.0) as usize;
    if n_steps == 0 {
        return Ok(CovarianceTrajectory {
            dt: 0.0,
            mats: vec![sigma0.matrix().clone()],
        });
    }
    let h = t_end / n_steps as f64;

    let mut u = vec![0.0; ode.k_max() + 1];
    let mut sub = vec![0.0; m + 1];
    let mut diag = vec![0.0; m + 1];
    let mut lambda = vec![0.0; m + 1];
    let beta = p.beta();

    let mut scratch = DMatrix::<f64>::zeros(m, m);
    // (K Sigma + Sigma K' + diag(Lambda)) at time t, written into `out`.
    let rhs = |t: f64,
                   sig: &DMatrix<f64>,
                   out: &mut DMatrix<f64>,
                   u: &mut Vec<f64>,
                   sub: &mut Vec<f64>,
                   diag: &mut Vec<f64>,
                   lambda: &mut Vec<f64>,
                   scratch: &mut DMatrix<f64>|
     -> Result<()> {
        ode.sample_into(t, u)?;
        k_coefficients_raw(u, p, m, sub, diag);
        bracket_rate_raw(u, p, m, lambda);
        for j in 0..m {
            for i in 0..m {
                let below = if i >= 1 { sig[(i - 1, j)] } else { 0.0 };
                let above = if i + 1 < m { sig[(i + 1, j)] } else { 0.0 };
                scratch[(i, j)] = sub[i + 1] * below + diag[i + 1] * sig[(i, j)] + beta * above;
            }
        }
        for j in 0..m {
            for i in 0..m {
                out[(i, j)] = scratch[(i, j)] + scratch[(j, i)];
            }
            out[(j, j)] += lambda[j + 1];
        }
        Ok(())
    };

    let mut sigma = sigma0.matrix().clone();
    let mut mats = Vec::with_capacity(n_steps + 1);
    mats.push(sigma.clone());

    let mut k1 = DMatrix::<f64>::zeros(m, m);
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut stage = k1.clone();

    for step in 0..n_steps {
        let t = step as f64 * h;
        rhs(t, &sigma, &mut k1, &mut u, &mut sub, &mut diag, &mut lambda, &mut scratch)?;
        stage.copy_from(&sigma);
        mat_axpy(&mut stage, 0.5 * h, &k1);
        rhs(t + 0.5 * h, &stage, &mut k2, &mut u, &mut sub, &mut diag, &mut lambda, &mut scratch)?;
        stage.copy_from(&sigma);
        mat_axpy(&mut stage, 0.5 * h, &k2);
        rhs(t + 0.5 * h, &stage, &mut k3, &mut u, &mut sub, &mut diag, &mut lambda, &mut scratch)?;
        stage.copy_from(&sigma);
        mat_axpy(&mut stage, h, &k3);
        rhs(t + h, &stage, &mut k4, &mut u, &mut sub, &mut diag, &mut lambda, &mut scratch)?;

        mat_axpy(&mut k1, 2.0, &k2);
        mat_axpy(&mut k1, 2.0, &k3);
        mat_axpy(&mut k1, 1.0, &k4);
        mat_axpy(&mut sigma, h / 6.0, &k1);
        mats.push(sigma.clone());
    }

    Ok(CovarianceTrajectory { dt: h, mats })
}

/// One Euler-Maruyama step. Coefficient slices cover coordinates `1..=m`
/// at positions `0..m`; `amp` holds `sqrt(Lambda dt)`.
#[inline]
fn em_step<R: Rng + ?Sized>(
    z: &[f64],
    out: &mut [f64],
    sub: &[f64],
    diag: &[f64],
    amp: &[f64],
    beta: f64,
    dt: f64,
    rng: &mut R,
) {
    let m = z.len() - 1;
    out[0] = 0.0;
    for k in 1..=m {
        let below = if k >= 2 { z[k - 1] } else { 0.0 };
        let above = if k < m { z[k + 1] } else { 0.0 };
        let mut next = z[k] + dt * (sub[k - 1] * below + diag[k - 1] * z[k] + beta * above);
        let a = amp[k - 1];
        if a > 0.0 {
            let xi: f64 = rng.sample(StandardNormal);
            next += a * xi;
        }
        out[k] = next;
    }
}

/// Streaming Euler-Maruyama driver: coefficients recomputed per step,
/// `on_state(t, z)` invoked after each accepted step.
fn stream_ou<R: Rng + ?Sized>(
    z0: &OuState,
    ode: &OdeSolution,
    p: &ModelParams,
    dt: f64,
    rng: &mut R,
    mut on_state: impl FnMut(f64, &[f64]),
) -> Result<()> {
    let m = z0.dim();
    check_block(m, ode)?;
    if dt <= 0.0 {
        return Err(Error::NonPositiveStep(dt));
    }
    let t0 = z0.t();
    let t_end = ode.final_time();
    check_span(t0, t_end, ode)?;
    let n_steps = (((t_end - t0) / dt) - 1e-9).ceil().max(0.0) as usize;
    if n_steps == 0 {
        return Ok(());
    }
    let h = (t_end - t0) / n_steps as f64;

    let mut u = vec![0.0; ode.k_max() + 1];
    let mut sub = vec![0.0; m + 1];
    let mut diag = vec![0.0; m + 1];
    let mut lambda = vec![0.0; m + 1];
    let mut amp = vec![0.0; m];
    let beta = p.beta();

    let mut cur = z0.z().to_vec();
    let mut next = vec![0.0; m + 1];
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        ode.sample_into(t, &mut u)?;
        k_coefficients_raw(&u, p, m, &mut sub, &mut diag);
        bracket_rate_raw(&u, p, m, &mut lambda);
        for k in 1..=m {
            amp[k - 1] = (lambda[k].max(0.0) * h).sqrt();
        }
        em_step(&cur, &mut next, &sub[1..], &diag[1..], &amp, beta, h, rng);
        std::mem::swap(&mut cur, &mut next);
        on_state(t0 + (step + 1) as f64 * h, &cur);
    }
    Ok(())
}

/// Euler-Maruyama path of the OU fluctuation from `z0.t()` to the ODE
/// horizon, recorded at every step. Deterministic per seed (the generator
/// is stream 0 of the seed's replica family).
pub fn simulate_ou_path(
    z0: &OuState,
    ode: &OdeSolution,
    p: &ModelParams,
    dt: f64,
    seed: u64,
) -> Result<Vec<OuState>> {
    let mut rng = replica_rng(seed, 0);
    let mut traj = vec![z0.clone()];
    stream_ou(z0, ode, p, dt, &mut rng, |t, z| {
        traj.push(OuState { z: z.to_vec(), t });
    })?;
    Ok(traj)
}

/// Endpoint of a single path without storing the trajectory (usable at
/// very small `dt`).
pub fn simulate_ou_endpoint(
    z0: &OuState,
    ode: &OdeSolution,
    p: &ModelParams,
    dt: f64,
    seed: u64,
) -> Result<OuState> {
    let mut rng = replica_rng(seed, 0);
    let mut last = z0.clone();
    stream_ou(z0, ode, p, dt, &mut rng, |t, z| {
        last = OuState { z: z.to_vec(), t };
    })?;
    Ok(last)
}

/// Per-step Euler-Maruyama coefficients shared across an ensemble.
struct EmCoeffs {
    m: usize,
    n_steps: usize,
    h: f64,
    t_end: f64,
    sub: Vec<f64>,
    diag: Vec<f64>,
    amp: Vec<f64>,
}

fn precompute_em(ode: &OdeSolution, p: &ModelParams, t0: f64, dt: f64, m: usize) -> Result<EmCoeffs> {
    check_block(m, ode)?;
    if dt <= 0.0 {
        return Err(Error::NonPositiveStep(dt));
    }
    let t_end = ode.final_time();
    check_span(t0, t_end, ode)?;
    let n_steps = (((t_end - t0) / dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if n_steps == 0 {
        0.0
    } else {
        (t_end - t0) / n_steps as f64
    };

    let mut u = vec![0.0; ode.k_max() + 1];
    let mut sub_row = vec![0.0; m + 1];
    let mut diag_row = vec![0.0; m + 1];
    let mut lambda = vec![0.0; m + 1];
    let mut sub = Vec::with_capacity(n_steps * m);
    let mut diag = Vec::with_capacity(n_steps * m);
    let mut amp = Vec::with_capacity(n_steps * m);
    for step in 0..n_steps {
        let t = t0 + step as f64 * h;
        ode.sample_into(t, &mut u)?;
        k_coefficients_raw(&u, p, m, &mut sub_row, &mut diag_row);
        bracket_rate_raw(&u, p, m, &mut lambda);
        sub.extend_from_slice(&sub_row[1..]);
        diag.extend_from_slice(&diag_row[1..]);
        amp.extend((1..=m).map(|k| (lambda[k].max(0.0) * h).sqrt()));
    }
    Ok(EmCoeffs {
        m,
        n_steps,
        h,
        t_end,
        sub,
        diag,
        amp,
    })
}

/// Endpoints of `replicas` independent OU paths from a common `z0`,
/// stepping a shared precomputed coefficient table in parallel. Replica
/// `i` uses stream `i` of `base_seed`; output order is replica order.
pub fn simulate_ou_endpoints(
    z0: &OuState,
    ode: &OdeSolution,
    p: &ModelParams,
    dt: f64,
    base_seed: u64,
    replicas: usize,
) -> Result<Vec<OuState>> {
    let coeffs = precompute_em(ode, p, z0.t(), dt, z0.dim())?;
    let m = coeffs.m;
    let beta = p.beta();
    Ok(run_replicas(base_seed, replicas, |_, mut rng| {
        let mut cur = z0.z().to_vec();
        let mut next = vec![0.0; m + 1];
        for step in 0..coeffs.n_steps {
            let lo = step * m;
            let hi = lo + m;
            em_step(
                &cur,
                &mut next,
                &coeffs.sub[lo..hi],
                &coeffs.diag[lo..hi],
                &coeffs.amp[lo..hi],
                beta,
                coeffs.h,
                &mut rng,
            );
            std::mem::swap(&mut cur, &mut next);
        }
        OuState {
            z: cur,
            t: coeffs.t_end,
        }
    }))
}

/// Apply the time-ordered exponential `e^{int_s^t K(u_r) dr}` to `z0` by
/// integrating `dz/dr = K(u_r) z` with RK4 at the ODE grid resolution.
/// `z0` covers coordinates `0..=m` with `z0[0] = 0`.
pub fn propagator_apply(
    z0: &[f64],
    ode: &OdeSolution,
    p: &ModelParams,
    s: f64,
    t: f64,
) -> Result<Vec<f64>> {
    if z0.len() < 2 {
        return Err(Error::InvalidState(
            "state must cover coordinates 0 and 1",
        ));
    }
    debug_assert!(z0[0] == 0.0, "coordinate 0 must vanish");
    let m = z0.len() - 1;
    check_block(m, ode)?;
    check_span(s, t, ode)?;
    if s == t {
        return Ok(z0.to_vec());
    }
    let n_steps = (((t - s) / ode.dt()) - 1e-9).ceil().max(1.0) as usize;
    let h = (t - s) / n_steps as f64;

    let mut u = vec![0.0; ode.k_max() + 1];
    let mut sub = vec![0.0; m + 1];
    let mut diag = vec![0.0; m + 1];
    let beta = p.beta();

    let apply_k = |sub: &[f64], diag: &[f64], x: &[f64], out: &mut [f64]| {
        out[0] = 0.0;
        for k in 1..=m {
            let below = if k >= 2 { x[k - 1] } else { 0.0 };
            let above = if k < m { x[k + 1] } else { 0.0 };
            out[k] = sub[k] * below + diag[k] * x[k] + beta * above;
        }
    };

    let mut z = z0.to_vec();
    let mut k1 = vec![0.0; m + 1];
    let mut k2 = vec![0.0; m + 1];
    let mut k3 = vec![0.0; m + 1];
    let mut k4 = vec![0.0; m + 1];
    let mut stage = vec![0.0; m + 1];

    for step in 0..n_steps {
        let r = s + step as f64 * h;

        ode.sample_into(r, &mut u)?;
        k_coefficients_raw(&u, p, m, &mut sub, &mut diag);
        apply_k(&sub, &diag, &z, &mut k1);

        ode.sample_into(r + 0.5 * h, &mut u)?;
        k_coefficients_raw(&u, p, m, &mut sub, &mut diag);
        for k in 0..=m {
            stage[k] = z[k] + 0.5 * h * k1[k];
        }
        apply_k(&sub, &diag, &stage, &mut k2);
        for k in 0..=m {
            stage[k] = z[k] + 0.5 * h * k2[k];
        }
        apply_k(&sub, &diag, &stage, &mut k3);

        ode.sample_into(r + h, &mut u)?;
        k_coefficients_raw(&u, p, m, &mut sub, &mut diag);
        for k in 0..=m {
            stage[k] = z[k] + h * k3[k];
        }
        apply_k(&sub, &diag, &stage, &mut k4);

        for k in 0..=m {
            z[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
    }
    Ok(z)
}

/// Covariance of `sqrt(N) (R_0 - q)` when the `N` queues start i.i.d.
/// with common length tail `q`:
/// `Sigma_0(j, k) = q(max(j, k)) - q(j) q(k)` (indicator-tail covariance,
/// independent of `N`).
pub fn multinomial_tail_covariance(q: &TailVector) -> Result<CovarianceMatrix> {
    let m = q.horizon();
    if m < 1 {
        return Err(Error::InvalidTail("horizon must cover level 1"));
    }
    let sigma = DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = (i + 1, j + 1);
        q.value(a.max(b)) - q.value(a) * q.value(b)
    });
    CovarianceMatrix::new(sigma)
}
