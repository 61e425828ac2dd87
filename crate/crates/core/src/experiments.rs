//! Experiment drivers shared by the command-line runner and the
//! acceptance suite: fixed-point relaxation, the LLN error-rate study,
//! the CLT endpoint study, OU self-consistency, the martingale
//! decomposition check, and micro/aggregate equivalence.
//!
//! Every driver takes an explicit seed and is deterministic given it; the
//! pinned pass/fail thresholds live here so the CLI verdicts and the
//! acceptance tests cannot drift apart.

use nalgebra::DMatrix;
use rand::Rng;

use crate::ctmc::{
    fluctuation_path, initial_empirical, initial_tail, martingale_decompose,
    simulate_aggregate, simulate_micro, InitialCondition, MicroState,
};
use crate::error::{Error, Result};
use crate::meanfield::{
    default_dt, drift, fixed_point, integrate_ode, OdeSolution,
};
use crate::ou::{
    evolve_covariance, multinomial_tail_covariance, simulate_ou_endpoints,
    CovarianceMatrix, OuState,
};
use crate::rng::{replica_rng, run_replicas};
use crate::seqspace::{weighted_l2_sq, EmpiricalTail, ModelParams, TailVector, WeightSeq};
use crate::stats::{
    ensemble_moments, fit_rate, frobenius_rel_error, ks_normality, ks_two_sample, median,
    Criterion, KsTest, Moments, RateFit, ReplicaEnsemble,
};

/// Decorrelated per-subtask seed so runs over several `N` values or
/// several subcommands never share replica streams.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    replica_rng(seed, tag).random()
}

/// Uniform sampling grid `0, dt, 2 dt, ..., t_end` with the endpoint
/// pinned exactly.
pub fn uniform_grid(t_end: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveStep(dt));
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidParams("horizon must be positive"));
    }
    let n = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    grid.push(t_end);
    Ok(grid)
}

/// Mean-field relaxation toward the fixed point.
pub struct RelaxationResult {
    pub ode: OdeSolution,
    /// Absent when `rho >= 1` (the ODE still integrates).
    pub fixed_point: Option<TailVector>,
    /// `(t, |u_t - u~|_inf)` at thinned solution knots.
    pub sup_errors: Vec<(f64, f64)>,
}

pub fn run_relaxation(
    p: &ModelParams,
    k_max: usize,
    t_end: f64,
    dt: f64,
) -> Result<RelaxationResult> {
    let ode = integrate_ode(&TailVector::empty_network(k_max), p, t_end, dt)?;
    let fp = match fixed_point(p, k_max) {
        Ok(fp) => Some(fp),
        Err(Error::UnstableRegime { .. }) => None,
        Err(e) => return Err(e),
    };
    let mut sup_errors = Vec::new();
    if let Some(fp) = &fp {
        let stride = (ode.len() / 2000).max(1);
        for i in (0..ode.len()).step_by(stride).chain([ode.len() - 1]) {
            let state = ode.state_at(i);
            let sup = (0..=k_max)
                .map(|k| (state[k] - fp.value(k)).abs())
                .fold(0.0f64, f64::max);
            sup_errors.push((ode.time(i), sup));
        }
        sup_errors.dedup_by_key(|&mut (t, _)| t);
    }
    Ok(RelaxationResult {
        ode,
        fixed_point: fp,
        sup_errors,
    })
}

/// Verdict lines for the relaxation run: the fixed point annihilates the
/// drift to roundoff and the trajectory has converged to it.
pub fn relaxation_verdict(res: &RelaxationResult) -> Vec<Criterion> {
    let Some(fp) = &res.fixed_point else {
        return Vec::new();
    };
    let p = res.ode.params();
    let drift_sup = drift(fp, p)
        .total()
        .iter()
        .fold(0.0f64, |m, f| m.max(f.abs()));
    let final_sup = res.sup_errors.last().map_or(f64::INFINITY, |&(_, e)| e);
    vec![
        Criterion::at_most("fixed-point-drift-residual", drift_sup, 1e-12),
        Criterion::at_most("relaxation-sup-error", final_sup, 1e-6),
    ]
}

/// LLN error-rate study configuration.
pub struct LlnConfig {
    pub params: ModelParams,
    pub ns: Vec<u64>,
    pub t_end: f64,
    /// Sampling grid spacing for the sup over time.
    pub grid_dt: f64,
    pub replicas: usize,
    /// Geometric weight of the norm.
    pub theta: f64,
    pub k_max: usize,
    pub init: InitialCondition,
    pub seed: u64,
}

pub struct LlnPerN {
    pub n: u64,
    /// Per-replica sup over the grid of the weighted-l2 deviation.
    pub sup_errors: Vec<f64>,
    pub median: f64,
}

pub struct LlnResult {
    pub per_n: Vec<LlnPerN>,
    /// Absent when fewer than 3 population sizes were run.
    pub fit: Option<RateFit>,
    pub criteria: Vec<Criterion>,
}

pub fn run_lln(cfg: &LlnConfig) -> Result<LlnResult> {
    let p = &cfg.params;
    let w = WeightSeq::geometric(cfg.theta, cfg.k_max)?;
    let u0 = initial_tail(&cfg.init, p, cfg.k_max)?;
    let ode = integrate_ode(&u0, p, cfg.t_end, default_dt(p))?;
    let grid = uniform_grid(cfg.t_end, cfg.grid_dt)?;
    let mut u_grid = vec![vec![0.0; cfg.k_max + 1]; grid.len()];
    for (g, row) in grid.iter().zip(u_grid.iter_mut()) {
        ode.sample_into(*g, row)?;
    }

    let mut per_n = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let outcomes = run_replicas(subseed(cfg.seed, n), cfg.replicas, |_, mut rng| {
            let init = initial_empirical(&cfg.init, p, n, cfg.k_max, &mut rng)?;
            let (stream, _) = simulate_aggregate(&init, p, cfg.t_end, &mut rng)?;
            let states = stream.states_at(&grid)?;
            let mut x = vec![0.0; cfg.k_max + 1];
            let mut sup = 0.0f64;
            for (state, u) in states.iter().zip(&u_grid) {
                for k in 1..=cfg.k_max {
                    x[k] = state.fraction(k) - u[k];
                }
                sup = sup.max(weighted_l2_sq(&x, &w)?.sqrt());
            }
            Ok(sup)
        });
        let sup_errors: Vec<f64> = outcomes.into_iter().collect::<Result<_>>()?;
        let med = median(&sup_errors)?;
        per_n.push(LlnPerN {
            n,
            sup_errors,
            median: med,
        });
    }

    let mut criteria = Vec::new();
    let fit = if cfg.ns.len() >= 3 {
        let ns: Vec<f64> = cfg.ns.iter().map(|&n| n as f64).collect();
        let meds: Vec<f64> = per_n.iter().map(|e| e.median).collect();
        let fit = fit_rate(&ns, &meds)?;
        criteria.push(Criterion::within("lln-rate-slope", fit.slope, -0.5, 0.15));
        Some(fit)
    } else {
        None
    };
    Ok(LlnResult {
        per_n,
        fit,
        criteria,
    })
}

/// CLT endpoint study configuration.
pub struct CltConfig {
    pub params: ModelParams,
    pub n: u64,
    pub t_end: f64,
    pub replicas: usize,
    pub k_max: usize,
    /// Coordinates `1..=coords` entering the verdicts.
    pub coords: usize,
    pub init: InitialCondition,
    pub seed: u64,
}

pub struct CltResult {
    /// Endpoint fluctuation coordinates, replica by replica.
    pub ensemble: ReplicaEnsemble,
    pub moments: Moments,
    /// Limit covariance at `t_end` on the verdict block.
    pub sigma: DMatrix<f64>,
    pub ks: Vec<KsTest>,
    /// Frobenius error of the empirical block against the limit block.
    pub frobenius: f64,
    pub criteria: Vec<Criterion>,
}

/// Covariance of the initial fluctuation for a preset: zero for the exact
/// presets (empty; equilibrium up to `O(1/sqrt(N))` rounding), the
/// indicator-tail covariance for i.i.d. sampling.
pub fn initial_fluctuation_covariance(
    ic: &InitialCondition,
    p: &ModelParams,
    block: usize,
    k_max: usize,
) -> Result<CovarianceMatrix> {
    match ic {
        InitialCondition::Empty | InitialCondition::Equilibrium => {
            Ok(CovarianceMatrix::zeros(block))
        }
        InitialCondition::IidGeometric { .. } => {
            let q = initial_tail(ic, p, k_max)?;
            let full = multinomial_tail_covariance(&q)?;
            CovarianceMatrix::new(full.top_block(block))
        }
    }
}

pub fn run_clt(cfg: &CltConfig) -> Result<CltResult> {
    let p = &cfg.params;
    if cfg.coords == 0 {
        return Err(Error::InvalidParams("need at least one coordinate"));
    }
    // a few absorbing-boundary layers shield the verdict block from
    // truncation of the covariance flow
    let block = (cfg.coords + 5).min(cfg.k_max);
    if block < cfg.coords {
        return Err(Error::BlockExceedsHorizon {
            block: cfg.coords,
            k_max: cfg.k_max,
        });
    }
    let u0 = initial_tail(&cfg.init, p, cfg.k_max)?;
    let ode = integrate_ode(&u0, p, cfg.t_end, default_dt(p))?;
    let sigma0 = initial_fluctuation_covariance(&cfg.init, p, block, cfg.k_max)?;
    let sigma_final = evolve_covariance(&sigma0, &ode, p, cfg.t_end)?.final_cov()?;
    let sigma = sigma_final.top_block(cfg.coords);

    let root_n = (cfg.n as f64).sqrt();
    let mut u_end = vec![0.0; cfg.k_max + 1];
    ode.sample_into(cfg.t_end, &mut u_end)?;
    let rows = run_replicas(cfg.seed, cfg.replicas, |_, mut rng| {
        let init = initial_empirical(&cfg.init, p, cfg.n, cfg.k_max, &mut rng)?;
        let (_, end) = simulate_aggregate(&init, p, cfg.t_end, &mut rng)?;
        Ok((1..=cfg.coords)
            .map(|k| root_n * (end.fraction(k) - u_end[k]))
            .collect::<Vec<f64>>())
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let ensemble = ReplicaEnsemble::new(rows)?.with_meta(p.clone(), cfg.seed);
    let moments = ensemble_moments(&ensemble);

    let mut ks = Vec::with_capacity(cfg.coords);
    let mut criteria = Vec::new();
    let mut ks_passes = 0usize;
    for k in 1..=cfg.coords {
        let test = ks_normality(&ensemble.column(k - 1), 0.0, sigma[(k - 1, k - 1)].sqrt())?;
        if test.p_value > 0.01 {
            ks_passes += 1;
        }
        ks.push(test);
        let rel = (moments.covariance[(k - 1, k - 1)] - sigma[(k - 1, k - 1)]).abs()
            / sigma[(k - 1, k - 1)];
        criteria.push(Criterion::at_most(format!("clt-var-rel-err-k{k}"), rel, 0.20));
    }
    criteria.insert(
        0,
        Criterion::at_least(
            "clt-ks-pass-count",
            ks_passes as f64,
            ((2 * cfg.coords) as f64 / 3.0).ceil(),
        ),
    );
    let frobenius = frobenius_rel_error(&moments.covariance, &sigma);

    Ok(CltResult {
        ensemble,
        moments,
        sigma,
        ks,
        frobenius,
        criteria,
    })
}

/// OU self-consistency configuration: Monte-Carlo endpoints of the
/// limiting SDE against the Lyapunov covariance flow, both along the same
/// numerical mean field and on the same coordinate block.
pub struct OuConfig {
    pub params: ModelParams,
    pub t_end: f64,
    /// Euler-Maruyama step.
    pub dt: f64,
    pub replicas: usize,
    pub k_max: usize,
    /// Verdict block dimension (top `coords` x `coords`).
    pub coords: usize,
    /// Simulation block dimension, `>= coords`.
    pub block: usize,
    pub init: InitialCondition,
    pub seed: u64,
}

pub struct OuResult {
    pub sigma: DMatrix<f64>,
    pub empirical: DMatrix<f64>,
    pub frobenius: f64,
    pub criteria: Vec<Criterion>,
    pub endpoints: Vec<OuState>,
}

pub fn run_ou_consistency(cfg: &OuConfig) -> Result<OuResult> {
    let p = &cfg.params;
    if cfg.coords == 0 || cfg.block < cfg.coords {
        return Err(Error::InvalidParams(
            "verdict block must fit inside the simulation block",
        ));
    }
    let u0 = initial_tail(&cfg.init, p, cfg.k_max)?;
    let ode = integrate_ode(&u0, p, cfg.t_end, default_dt(p))?;
    let sigma0 = initial_fluctuation_covariance(&cfg.init, p, cfg.block, cfg.k_max)?;
    let sigma = evolve_covariance(&sigma0, &ode, p, cfg.t_end)?
        .final_cov()?
        .top_block(cfg.coords);

    // deterministic-preset start: Z_0 = 0 matches the zero covariance
    let z0 = OuState::zero(cfg.block, 0.0);
    let endpoints = simulate_ou_endpoints(&z0, &ode, p, cfg.dt, cfg.seed, cfg.replicas)?;
    let rows: Vec<Vec<f64>> = endpoints
        .iter()
        .map(|s| s.z()[1..=cfg.coords].to_vec())
        .collect();
    let ensemble = ReplicaEnsemble::new(rows)?.with_meta(p.clone(), cfg.seed);
    let empirical = ensemble_moments(&ensemble).covariance;
    let frobenius = frobenius_rel_error(&empirical, &sigma);
    let criteria = vec![Criterion::at_most("ou-covariance-frobenius", frobenius, 0.05)];

    Ok(OuResult {
        sigma,
        empirical,
        frobenius,
        criteria,
        endpoints,
    })
}

/// Martingale-structure study configuration.
pub struct MartingaleConfig {
    pub params: ModelParams,
    pub n: u64,
    pub t_end: f64,
    pub replicas: usize,
    pub k_max: usize,
    pub coords: usize,
    pub seed: u64,
}

pub struct MartingaleResult {
    /// Per-coordinate mean and standard error of `M^N(k)_T`.
    pub means: Vec<(f64, f64)>,
    /// Per-coordinate mean quadratic variation and mean bracket.
    pub qv_vs_bracket: Vec<(f64, f64)>,
    pub criteria: Vec<Criterion>,
}

pub fn run_martingale(cfg: &MartingaleConfig) -> Result<MartingaleResult> {
    let p = &cfg.params;
    let u0 = TailVector::empty_network(cfg.k_max);
    let ode = integrate_ode(&u0, p, cfg.t_end, default_dt(p))?;
    let grid = [0.0, cfg.t_end];
    let nf = cfg.n as f64;

    let rows = run_replicas(cfg.seed, cfg.replicas, |_, mut rng| {
        let (stream, _) =
            simulate_aggregate(&EmpiricalTail::empty(cfg.n), p, cfg.t_end, &mut rng)?;
        let path = fluctuation_path(&stream, &ode, &grid)?;
        let full = martingale_decompose(&path, &stream, &ode, p)?;
        let jumps = stream.jump_counts(cfg.k_max);
        let m_end = full.martingale().expect("decomposed").last().unwrap();
        let br_end = full.bracket().expect("decomposed").last().unwrap();
        let mut row = Vec::with_capacity(3 * cfg.coords);
        for k in 1..=cfg.coords {
            row.push(m_end[k]);
            row.push(jumps[k] as f64 / nf);
            row.push(br_end[k]);
        }
        Ok(row)
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let ensemble = ReplicaEnsemble::new(rows)?;
    let moments = ensemble_moments(&ensemble);

    let mut means = Vec::new();
    let mut qv_vs_bracket = Vec::new();
    let mut criteria = Vec::new();
    for k in 1..=cfg.coords {
        let base = 3 * (k - 1);
        let (mean, se) = (moments.mean[base], moments.std_errors[base]);
        means.push((mean, se));
        let (qv, br) = (moments.mean[base + 1], moments.mean[base + 2]);
        qv_vs_bracket.push((qv, br));
        criteria.push(Criterion::at_most(
            format!("martingale-mean-k{k}"),
            mean.abs(),
            3.0 * se,
        ));
        criteria.push(Criterion::at_most(
            format!("martingale-qv-rel-err-k{k}"),
            (qv - br).abs() / br,
            0.10,
        ));
    }
    Ok(MartingaleResult {
        means,
        qv_vs_bracket,
        criteria,
    })
}

/// Micro/aggregate equivalence configuration.
pub struct EquivalenceConfig {
    pub params: ModelParams,
    pub n: u64,
    pub t_end: f64,
    /// Runs per simulator.
    pub runs: usize,
    pub coords: usize,
    pub seed: u64,
}

pub struct EquivalenceResult {
    pub ks: Vec<KsTest>,
    pub criteria: Vec<Criterion>,
}

pub fn run_equivalence(cfg: &EquivalenceConfig) -> Result<EquivalenceResult> {
    let p = &cfg.params;
    let micro = run_replicas(subseed(cfg.seed, 1), cfg.runs, |_, mut rng| {
        let (_, end) = simulate_micro(&MicroState::empty(cfg.n), p, cfg.t_end, &mut rng)?;
        let e = end.empirical();
        Ok((1..=cfg.coords)
            .map(|k| e.count(k) as f64)
            .collect::<Vec<f64>>())
    });
    let micro: Vec<Vec<f64>> = micro.into_iter().collect::<Result<_>>()?;
    let agg = run_replicas(subseed(cfg.seed, 2), cfg.runs, |_, mut rng| {
        let (_, end) = simulate_aggregate(&EmpiricalTail::empty(cfg.n), p, cfg.t_end, &mut rng)?;
        Ok((1..=cfg.coords)
            .map(|k| end.count(k) as f64)
            .collect::<Vec<f64>>())
    });
    let agg: Vec<Vec<f64>> = agg.into_iter().collect::<Result<_>>()?;

    let mut ks = Vec::new();
    let mut criteria = Vec::new();
    for k in 1..=cfg.coords {
        let a: Vec<f64> = micro.iter().map(|r| r[k - 1]).collect();
        let b: Vec<f64> = agg.iter().map(|r| r[k - 1]).collect();
        let test = ks_two_sample(&a, &b)?;
        criteria.push(Criterion::at_least(
            format!("equivalence-ks-p-k{k}"),
            test.p_value,
            0.01,
        ));
        ks.push(test);
    }
    Ok(EquivalenceResult { ks, criteria })
}
