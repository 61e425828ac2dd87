//! Experiment runner: every pipeline stage as a subcommand over one
//! archivable config file. Verdicts print to stdout as JSON; exit code 0
//! means every criterion passed, 1 a verdict or runtime failure, 2 a
//! usage or config error.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jsq_core::experiments::{
    initial_fluctuation_covariance, relaxation_verdict, run_clt, run_lln,
    run_ou_consistency, run_relaxation, subseed, CltConfig, LlnConfig, OuConfig,
};
use jsq_core::export::{
    write_covariance_csv, write_criteria_json, write_ensemble_csv, write_lln_errors_csv,
    write_lln_medians_csv, write_matrix_csv, write_ou_path_csv, write_relaxation_csv,
    write_tail_csv, write_tail_json, Meta,
};
use jsq_core::meanfield::{default_dt, integrate_ode};
use jsq_core::ou::{evolve_covariance, simulate_ou_path, OuState};
use jsq_core::stats::Criterion;
use jsq_core::verify::run_identity_suite;

use config::ExperimentConfig;
use output::OutputDir;

#[derive(Parser)]
#[command(
    name = "jsq",
    version,
    about = "Simulation and verification toolkit for join-the-shortest-of-L-queues networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file (TOML); command-line flags override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed of the replica streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (config copy, CSV tables, verdict, sidecar log).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replica count override.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Worker thread count (default: all cores). Affects speed only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Tabulate the fixed point and the relaxation toward it.
    FixedPoint,
    /// Law-of-large-numbers error decay across population sizes.
    Lln,
    /// Central-limit endpoint statistics against the Lyapunov covariance.
    Clt,
    /// Ornstein-Uhlenbeck limit: covariance flow and sample path export.
    Ou,
    /// Deterministic identity suite.
    Verify,
}

enum AppError {
    Config(String),
    Run(String),
}

impl From<jsq_core::Error> for AppError {
    fn from(e: jsq_core::Error) -> Self {
        AppError::Run(e.to_string())
    }
}

type CmdResult = Result<Vec<Criterion>, AppError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("error: thread pool already initialized");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<bool, AppError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(AppError::Config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(replicas) = cli.replicas {
        cfg.replicas = Some(replicas);
    }
    cfg.validate().map_err(AppError::Config)?;

    let name = match cli.command {
        Command::FixedPoint => "fixed-point",
        Command::Lln => "lln",
        Command::Clt => "clt",
        Command::Ou => "ou",
        Command::Verify => "verify",
    };
    let out = match &cfg.out {
        Some(path) => Some(OutputDir::create(path, &cfg, name).map_err(AppError::Run)?),
        None => None,
    };
    let out = out.as_ref();

    let criteria = match cli.command {
        Command::FixedPoint => cmd_fixed_point(&cfg, out)?,
        Command::Lln => cmd_lln(&cfg, out)?,
        Command::Clt => cmd_clt(&cfg, out)?,
        Command::Ou => cmd_ou(&cfg, out)?,
        Command::Verify => cmd_verify(&cfg, out)?,
    };

    let mut stdout = std::io::stdout().lock();
    write_criteria_json(&mut stdout, &criteria).map_err(AppError::from)?;
    if let Some(dir) = out {
        dir.write_file("verdict.json", |w| write_criteria_json(w, &criteria))
            .map_err(AppError::Run)?;
    }
    let all_pass = criteria.iter().all(|c| c.pass);
    if let Some(dir) = out {
        dir.log(&format!(
            "done criteria={} pass={all_pass}",
            criteria.len()
        ))
        .map_err(AppError::Run)?;
    }
    Ok(all_pass)
}

fn cmd_fixed_point(cfg: &ExperimentConfig, out: Option<&OutputDir>) -> CmdResult {
    let p = cfg.params().map_err(AppError::Config)?;
    let t_end = cfg.t_end.unwrap_or(40.0);
    let res = run_relaxation(&p, cfg.k_max, t_end, default_dt(&p))?;
    let meta = Meta::new(&p, cfg.seed);

    let mut criteria = vec![Criterion {
        criterion: "stable-regime".into(),
        statistic: p.rho(),
        threshold: 1.0,
        pass: p.is_stable(),
    }];
    match &res.fixed_point {
        Some(fp) => {
            if let Some(dir) = out {
                dir.write_file("fixed_point.csv", |w| write_tail_csv(w, fp, &meta))
                    .map_err(AppError::Run)?;
                dir.write_file("fixed_point.json", |w| write_tail_json(w, fp, &meta))
                    .map_err(AppError::Run)?;
                dir.write_file("relaxation.csv", |w| {
                    write_relaxation_csv(w, &res.sup_errors, &meta)
                })
                .map_err(AppError::Run)?;
            }
            criteria.extend(relaxation_verdict(&res));
        }
        None => {
            eprintln!(
                "diagnostic: unstable regime rho = {} >= 1; no fixed point exists \
                 (the ODE remains integrable)",
                p.rho()
            );
        }
    }
    Ok(criteria)
}

fn cmd_lln(cfg: &ExperimentConfig, out: Option<&OutputDir>) -> CmdResult {
    let p = cfg.params().map_err(AppError::Config)?;
    let lln = LlnConfig {
        params: p.clone(),
        ns: cfg.ns.clone(),
        t_end: cfg.t_end.unwrap_or(5.0),
        grid_dt: cfg.grid_dt,
        replicas: cfg.replicas.unwrap_or(200),
        theta: cfg.theta,
        k_max: cfg.k_max,
        init: cfg.init,
        seed: cfg.seed,
    };
    let res = run_lln(&lln)?;
    if res.fit.is_none() {
        eprintln!("warning: single population size, rate fit skipped");
    }
    if let Some(dir) = out {
        let meta = Meta::new(&p, cfg.seed);
        dir.write_file("lln_medians.csv", |w| write_lln_medians_csv(w, &res, &meta))
            .map_err(AppError::Run)?;
        dir.write_file("lln_errors.csv", |w| write_lln_errors_csv(w, &res, &meta))
            .map_err(AppError::Run)?;
    }
    Ok(res.criteria)
}

fn cmd_clt(cfg: &ExperimentConfig, out: Option<&OutputDir>) -> CmdResult {
    let p = cfg.params().map_err(AppError::Config)?;
    let clt = CltConfig {
        params: p.clone(),
        n: cfg.n,
        t_end: cfg.t_end.unwrap_or(2.0),
        replicas: cfg.replicas.unwrap_or(400),
        k_max: cfg.k_max,
        coords: cfg.coords,
        init: cfg.init,
        seed: cfg.seed,
    };
    let res = run_clt(&clt)?;
    if let Some(dir) = out {
        let meta = Meta::new(&p, cfg.seed).with_n(cfg.n);
        dir.write_file("clt_ensemble.csv", |w| {
            write_ensemble_csv(w, &res.ensemble, &meta)
        })
        .map_err(AppError::Run)?;
        dir.write_file("clt_sigma_limit.csv", |w| write_matrix_csv(w, &res.sigma, &meta))
            .map_err(AppError::Run)?;
        dir.write_file("clt_sigma_empirical.csv", |w| {
            write_matrix_csv(w, &res.moments.covariance, &meta)
        })
        .map_err(AppError::Run)?;
        let summary = serde_json::json!({
            "ks": res.ks.iter().map(|t| {
                serde_json::json!({"statistic": t.statistic, "p_value": t.p_value})
            }).collect::<Vec<_>>(),
            "frobenius_rel_error": res.frobenius,
            "variance_empirical": (0..res.sigma.nrows())
                .map(|k| res.moments.covariance[(k, k)]).collect::<Vec<_>>(),
            "variance_limit": (0..res.sigma.nrows())
                .map(|k| res.sigma[(k, k)]).collect::<Vec<_>>(),
        });
        dir.write_file("clt_summary.json", |w| {
            serde_json::to_writer_pretty(&mut *w, &summary)?;
            use std::io::Write;
            writeln!(w)?;
            Ok(())
        })
        .map_err(AppError::Run)?;
    }
    Ok(res.criteria)
}

fn cmd_ou(cfg: &ExperimentConfig, out: Option<&OutputDir>) -> CmdResult {
    let p = cfg.params().map_err(AppError::Config)?;
    let t_end = cfg.t_end.unwrap_or(2.0);
    let block = (cfg.coords + 2).min(cfg.k_max);
    let ou = OuConfig {
        params: p.clone(),
        t_end,
        dt: cfg.ou_dt,
        replicas: cfg.replicas.unwrap_or(10_000),
        k_max: cfg.k_max,
        coords: cfg.coords,
        block,
        init: cfg.init,
        seed: cfg.seed,
    };
    let res = run_ou_consistency(&ou)?;
    if let Some(dir) = out {
        let meta = Meta::new(&p, cfg.seed);
        let u0 = jsq_core::ctmc::initial_tail(&cfg.init, &p, cfg.k_max)?;
        let ode = integrate_ode(&u0, &p, t_end, default_dt(&p))?;
        let sigma0 = initial_fluctuation_covariance(&cfg.init, &p, block, cfg.k_max)?;
        let traj = evolve_covariance(&sigma0, &ode, &p, t_end)?;
        dir.write_file("ou_covariance.csv", |w| write_covariance_csv(w, &traj, &meta))
            .map_err(AppError::Run)?;
        let path = simulate_ou_path(
            &OuState::zero(block, 0.0),
            &ode,
            &p,
            cfg.ou_dt,
            subseed(cfg.seed, u64::MAX),
        )?;
        dir.write_file("ou_path.csv", |w| write_ou_path_csv(w, &path, &meta))
            .map_err(AppError::Run)?;
        dir.write_file("ou_sigma_limit.csv", |w| write_matrix_csv(w, &res.sigma, &meta))
            .map_err(AppError::Run)?;
        dir.write_file("ou_sigma_empirical.csv", |w| {
            write_matrix_csv(w, &res.empirical, &meta)
        })
        .map_err(AppError::Run)?;
    }
    Ok(res.criteria)
}

fn cmd_verify(cfg: &ExperimentConfig, _out: Option<&OutputDir>) -> CmdResult {
    Ok(run_identity_suite(cfg.seed)?)
}
