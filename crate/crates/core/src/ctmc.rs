//! Finite-N stochastic simulation: the per-queue microscopic chain, the
//! equivalent aggregated CTMC on the 1/N tail lattice, fluctuation paths
//! `sqrt(N) (R^N - u)`, and the Dynkin martingale decomposition.
//!
//! Two simulators exist on purpose. `simulate_micro` encodes the verbal
//! model (sample `L` distinct queues, join a shortest, uniform tie-break,
//! per-queue service); `simulate_aggregate` encodes the tail-coordinate
//! generator (level `k` moves by `1/N` at rates `N F^N_+(r)(k)` and
//! `N F_-(r)(k)`). Their distributional agreement is itself a test of the
//! rate derivation, and the aggregate simulator is the `O(k_max)`-per-event
//! workhorse.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::meanfield::{fixed_point, OdeSolution};
use crate::seqspace::{EmpiricalTail, ModelParams, TailVector};

/// Per-queue occupancies at a time point.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    lengths: Vec<u32>,
    t: f64,
}

impl MicroState {
    pub fn new(lengths: Vec<u32>, t: f64) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self { lengths, t })
    }

    pub fn empty(n: u64) -> Self {
        Self {
            lengths: vec![0; n as usize],
            t: 0.0,
        }
    }

    pub fn n(&self) -> u64 {
        self.lengths.len() as u64
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    /// Aggregate into the tail representation.
    pub fn empirical(&self) -> EmpiricalTail {
        EmpiricalTail::from_lengths(&self.lengths).expect("nonempty by construction")
    }
}

/// One jump of the tail process: coordinate `k` moves by `sign/N` at time
/// `t` (arrival raises `counts[k]`, service lowers it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpRecord {
    pub t: f64,
    pub k: usize,
    pub sign: i8,
}

/// A realized trajectory: initial tail counts plus the ordered jump stream
/// over `[t0, t_end]`. The state is piecewise constant and right-continuous.
#[derive(Debug, Clone)]
pub struct JumpStream {
    init: EmpiricalTail,
    jumps: Vec<JumpRecord>,
    t0: f64,
    t_end: f64,
}

impl JumpStream {
    /// Assemble a trajectory from recorded pieces, e.g. reloaded from an
    /// export. Jump times must be nondecreasing within `[t0, t_end]` and
    /// the integer replay must stay on the tail lattice throughout.
    pub fn new(
        init: EmpiricalTail,
        jumps: Vec<JumpRecord>,
        t0: f64,
        t_end: f64,
    ) -> Result<Self> {
        if !(t_end >= t0) {
            return Err(Error::InvalidParams("t_end must not precede t0"));
        }
        let mut prev = t0;
        let mut counts = init.counts().to_vec();
        for j in &jumps {
            if !(j.t >= prev && j.t <= t_end) {
                return Err(Error::InvalidParams(
                    "jump times must be nondecreasing within the horizon",
                ));
            }
            if j.sign.abs() != 1 || j.k == 0 {
                return Err(Error::InvalidParams(
                    "jumps move one coordinate k >= 1 by +1 or -1",
                ));
            }
            let here = counts.get(j.k).copied().unwrap_or(0);
            if j.sign > 0 {
                let above = counts.get(j.k - 1).copied().unwrap_or(0);
                if j.k > counts.len() || above <= here {
                    return Err(Error::InvalidParams(
                        "arrival would break tail monotonicity",
                    ));
                }
            } else {
                let below = counts.get(j.k + 1).copied().unwrap_or(0);
                if here == 0 || here <= below {
                    return Err(Error::InvalidParams(
                        "departure would break tail monotonicity",
                    ));
                }
            }
            apply_jump(&mut counts, j);
            prev = j.t;
        }
        Ok(Self {
            init,
            jumps,
            t0,
            t_end,
        })
    }

    pub fn n(&self) -> u64 {
        self.init.n()
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn init(&self) -> &EmpiricalTail {
        &self.init
    }

    pub fn jumps(&self) -> &[JumpRecord] {
        &self.jumps
    }

    /// Number of jumps at each coordinate `1..=k_max` (entry 0 unused).
    pub fn jump_counts(&self, k_max: usize) -> Vec<u64> {
        let mut out = vec![0u64; k_max + 1];
        for j in &self.jumps {
            if j.k <= k_max {
                out[j.k] += 1;
            }
        }
        out
    }

    /// Visit the piecewise-constant intervals in order:
    /// `f(start, end, counts)` with integer tail counts (index 0 holds N).
    pub fn fold_intervals(&self, mut f: impl FnMut(f64, f64, &[u64])) {
        let mut counts = self.init.counts().to_vec();
        let mut t = self.t0;
        for jump in &self.jumps {
            f(t, jump.t, &counts);
            apply_jump(&mut counts, jump);
            t = jump.t;
        }
        f(t, self.t_end, &counts);
    }

    /// Final state, reproduced exactly by integer replay.
    pub fn final_state(&self) -> EmpiricalTail {
        let mut counts = self.init.counts().to_vec();
        for jump in &self.jumps {
            apply_jump(&mut counts, jump);
        }
        EmpiricalTail::new(counts, self.n()).expect("replay preserves lattice membership")
    }

    /// Right-continuous states at nondecreasing grid times within
    /// `[t0, t_end]` (a jump exactly at a grid time is included).
    pub fn states_at(&self, grid: &[f64]) -> Result<Vec<EmpiricalTail>> {
        check_grid(grid, self.t0, self.t_end)?;
        let mut counts = self.init.counts().to_vec();
        let mut out = Vec::with_capacity(grid.len());
        let mut ji = 0;
        for &g in grid {
            while ji < self.jumps.len() && self.jumps[ji].t <= g {
                apply_jump(&mut counts, &self.jumps[ji]);
                ji += 1;
            }
            out.push(EmpiricalTail::new(counts.clone(), self.n())?);
        }
        Ok(out)
    }
}

fn check_grid(grid: &[f64], t0: f64, t_end: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptySequence);
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParams("grid times must be nondecreasing"));
    }
    let slack = 1e-9 * (1.0 + t_end.abs());
    if grid[0] < t0 - slack || *grid.last().unwrap() > t_end + slack {
        return Err(Error::HorizonExceeded {
            requested: *grid.last().unwrap(),
            available: t_end,
        });
    }
    Ok(())
}

fn apply_jump(counts: &mut Vec<u64>, jump: &JumpRecord) {
    if jump.sign > 0 {
        if jump.k == counts.len() {
            counts.push(1);
        } else {
            counts[jump.k] += 1;
        }
    } else {
        counts[jump.k] -= 1;
    }
    debug_assert!(jump.k == 0 || counts[jump.k - 1] >= counts[jump.k]);
}

/// Exact event-driven simulation of the per-queue chain over a duration
/// `horizon` starting from `init`: arrivals at rate `N alpha` pick `L`
/// distinct queues uniformly and join a shortest (uniform tie-break);
/// services run one exponential clock of rate `beta * #nonempty` with a
/// uniform pick among nonempty queues (equal to independent per-queue
/// clocks by superposition).
pub fn simulate_micro<R: Rng + ?Sized>(
    init: &MicroState,
    p: &ModelParams,
    horizon: f64,
    rng: &mut R,
) -> Result<(JumpStream, MicroState)> {
    let n = init.n();
    let l = p.choices() as usize;
    if n < l as u64 {
        return Err(Error::PopulationTooSmall { n, l: p.choices() });
    }
    if horizon < 0.0 {
        return Err(Error::InvalidParams("horizon must be nonnegative"));
    }
    let t0 = init.t;
    let t_end = t0 + horizon;
    let arrival_rate = n as f64 * p.alpha();

    let mut lengths = init.lengths.clone();
    let mut occupied = lengths.iter().filter(|&&x| x > 0).count() as u64;
    let mut t = t0;
    let mut jumps = Vec::new();
    let mut chosen: Vec<usize> = Vec::with_capacity(l);
    let mut ties: Vec<usize> = Vec::with_capacity(l);

    loop {
        let total = arrival_rate + p.beta() * occupied as f64;
        if total <= 0.0 {
            break;
        }
        let wait: f64 = rng.sample(Exp1);
        t += wait / total;
        if t > t_end {
            break;
        }
        if rng.random::<f64>() * total < arrival_rate {
            // Arrival: L distinct queues by rejection (cheap for L << N).
            chosen.clear();
            if l == n as usize {
                chosen.extend(0..l);
            } else {
                while chosen.len() < l {
                    let idx = rng.random_range(0..n as usize);
                    if !chosen.contains(&idx) {
                        chosen.push(idx);
                    }
                }
            }
            let shortest = chosen.iter().map(|&i| lengths[i]).min().unwrap();
            ties.clear();
            ties.extend(chosen.iter().copied().filter(|&i| lengths[i] == shortest));
            let target = ties[rng.random_range(0..ties.len())];
            if lengths[target] == 0 {
                occupied += 1;
            }
            lengths[target] += 1;
            jumps.push(JumpRecord {
                t,
                k: lengths[target] as usize,
                sign: 1,
            });
        } else {
            // Service: uniform among nonempty queues by rejection.
            let target = loop {
                let idx = rng.random_range(0..n as usize);
                if lengths[idx] > 0 {
                    break idx;
                }
            };
            jumps.push(JumpRecord {
                t,
                k: lengths[target] as usize,
                sign: -1,
            });
            lengths[target] -= 1;
            if lengths[target] == 0 {
                occupied -= 1;
            }
        }
    }

    let stream = JumpStream {
        init: init.empirical(),
        jumps,
        t0,
        t_end,
    };
    Ok((stream, MicroState { lengths, t: t_end }))
}

/// `(c)_L / (N)_L` for integer tail counts; exactly zero when fewer than
/// `L` queues qualify.
fn falling_ratio_counts(c: u64, n: u64, l: u32) -> f64 {
    if c < l as u64 {
        return 0.0;
    }
    (0..l as u64).map(|i| (c - i) as f64 / (n - i) as f64).product()
}

/// Total jump rates of the aggregate chain at integer counts: `up[k]` is
/// `N F^N_+(r)(k)` and `down[k]` is `N F_-(r)(k)`, for `k` in
/// `1..=counts.len()` (one coordinate past the deepest stored level, where
/// an arrival can still create a new level). Entry 0 is unused.
pub fn aggregate_rates(counts: &[u64], n: u64, p: &ModelParams) -> (Vec<f64>, Vec<f64>) {
    let len = counts.len();
    let l = p.choices();
    let nf = n as f64;
    let mut up = vec![0.0; len + 1];
    let mut down = vec![0.0; len + 1];
    for k in 1..=len {
        let c_prev = counts[k - 1];
        let c_here = counts.get(k).copied().unwrap_or(0);
        let c_next = counts.get(k + 1).copied().unwrap_or(0);
        up[k] = p.alpha()
            * nf
            * (falling_ratio_counts(c_prev, n, l) - falling_ratio_counts(c_here, n, l));
        down[k] = p.beta() * (c_here - c_next) as f64;
    }
    (up, down)
}

/// Exact CTMC on the `1/N` tail lattice: next-event times from the total
/// exponential clock, coordinates picked categorically from
/// `aggregate_rates`.
pub fn simulate_aggregate<R: Rng + ?Sized>(
    init: &EmpiricalTail,
    p: &ModelParams,
    horizon: f64,
    rng: &mut R,
) -> Result<(JumpStream, EmpiricalTail)> {
    let n = init.n();
    if n < p.choices() as u64 {
        return Err(Error::PopulationTooSmall { n, l: p.choices() });
    }
    if horizon < 0.0 {
        return Err(Error::InvalidParams("horizon must be nonnegative"));
    }
    let t_end = horizon;
    let mut counts = init.counts().to_vec();
    let mut t = 0.0;
    let mut jumps = Vec::new();

    loop {
        let (up, down) = aggregate_rates(&counts, n, p);
        let total: f64 = up.iter().sum::<f64>() + down.iter().sum::<f64>();
        if total <= 0.0 {
            break;
        }
        let wait: f64 = rng.sample(Exp1);
        t += wait / total;
        if t > t_end {
            break;
        }
        // categorical pick over up then down
        let mut x = rng.random::<f64>() * total;
        let picked = 'scan: {
            for (k, &r) in up.iter().enumerate() {
                if r > 0.0 {
                    x -= r;
                    if x <= 0.0 {
                        break 'scan Some((k, 1i8));
                    }
                }
            }
            for (k, &r) in down.iter().enumerate() {
                if r > 0.0 {
                    x -= r;
                    if x <= 0.0 {
                        break 'scan Some((k, -1i8));
                    }
                }
            }
            // roundoff fell off the end: take the deepest active rate
            (1..down.len())
                .rev()
                .find(|&k| down[k] > 0.0)
                .map(|k| (k, -1i8))
                .or_else(|| (1..up.len()).rev().find(|&k| up[k] > 0.0).map(|k| (k, 1)))
        };
        let (k, sign) = picked.expect("positive total rate implies an active coordinate");
        let jump = JumpRecord { t, k, sign };
        apply_jump(&mut counts, &jump);
        jumps.push(jump);
    }

    let final_state = EmpiricalTail::new(counts, n)?;
    let stream = JumpStream {
        init: init.clone(),
        jumps,
        t0: 0.0,
        t_end,
    };
    Ok((stream, final_state))
}

/// Fluctuation coordinates of one run on a sampling grid, with the
/// martingale part and brackets filled in by `martingale_decompose`.
#[derive(Debug, Clone)]
pub struct FluctuationPath {
    grid: Vec<f64>,
    n: u64,
    z: Vec<Vec<f64>>,
    martingale: Option<Vec<Vec<f64>>>,
    bracket: Option<Vec<Vec<f64>>>,
}

impl FluctuationPath {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn k_max(&self) -> usize {
        self.z[0].len() - 1
    }

    /// `z[i][k] = sqrt(N) (R^N(k) - u(k))` at grid time `i`.
    pub fn z(&self) -> &[Vec<f64>] {
        &self.z
    }

    pub fn martingale(&self) -> Option<&[Vec<f64>]> {
        self.martingale.as_deref()
    }

    pub fn bracket(&self) -> Option<&[Vec<f64>]> {
        self.bracket.as_deref()
    }
}

/// Sample `sqrt(N) (R^N_t - u_t)` on a grid. The stream must start at
/// time 0 (the ODE's origin) and the grid must fit both horizons.
pub fn fluctuation_path(
    stream: &JumpStream,
    ode: &OdeSolution,
    grid: &[f64],
) -> Result<FluctuationPath> {
    if stream.t0() != 0.0 {
        return Err(Error::InvalidParams(
            "fluctuation paths require simulations started at time 0",
        ));
    }
    check_grid(grid, 0.0, stream.t_end().min(ode.final_time()))?;
    let k_max = ode.k_max();
    let n = stream.n();
    let root_n = (n as f64).sqrt();
    let states = stream.states_at(grid)?;
    let mut u = vec![0.0; k_max + 1];
    let mut z = Vec::with_capacity(grid.len());
    for (state, &g) in states.iter().zip(grid) {
        ode.sample_into(g, &mut u)?;
        z.push(
            (0..=k_max)
                .map(|k| root_n * (state.fraction(k) - u[k]))
                .collect(),
        );
    }
    Ok(FluctuationPath {
        grid: grid.to_vec(),
        n,
        z,
        martingale: None,
        bracket: None,
    })
}

/// Fill in the Dynkin decomposition on the path's grid:
/// `M^N(k)_t = Z_t(k) - Z_0(k) - int_0^t sqrt(N) (F^N(R_s) - F(u_s))(k) ds`
/// and the bracket `<M^N(k)>_t = int_0^t (F^N_+ + F_-)(R_s)(k) ds`.
///
/// Both integrals over the piecewise-constant `R` are exact interval sums.
/// The `u` part uses `int_0^t F(u_s) ds = u_t - u_0`, which is the defining
/// identity of the ODE solution and avoids requadrature of the dense
/// interpolant.
pub fn martingale_decompose(
    path: &FluctuationPath,
    stream: &JumpStream,
    ode: &OdeSolution,
    p: &ModelParams,
) -> Result<FluctuationPath> {
    let k_max = path.k_max();
    let grid = &path.grid;
    let n = stream.n();
    let root_n = (n as f64).sqrt();
    let l = p.choices();

    let mut u_0 = vec![0.0; ode.k_max() + 1];
    ode.sample_into(grid[0], &mut u_0)?;
    let mut u_g = vec![0.0; ode.k_max() + 1];

    // running exact integrals of F^N(R_s) and (F^N_+ + F_-)(R_s)
    let mut acc_fn = vec![0.0; k_max + 1];
    let mut acc_br = vec![0.0; k_max + 1];
    let mut f_plus = vec![0.0; k_max + 1];
    let mut f_minus = vec![0.0; k_max + 1];

    let mut martingale: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut bracket: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut gi = 0usize;
    let mut record_err = None;

    stream.fold_intervals(|a, b, counts| {
        if record_err.is_some() {
            return;
        }
        for k in 1..=k_max {
            let c_prev = counts.get(k - 1).copied().unwrap_or(0);
            let c_here = counts.get(k).copied().unwrap_or(0);
            let c_next = counts.get(k + 1).copied().unwrap_or(0);
            f_plus[k] = p.alpha()
                * (falling_ratio_counts(c_prev, n, l) - falling_ratio_counts(c_here, n, l));
            f_minus[k] = p.beta() * (c_here - c_next) as f64 / n as f64;
        }
        let mut cur = a;
        while gi < grid.len() && grid[gi] <= b {
            let g = grid[gi];
            let dt = (g - cur).max(0.0);
            for k in 1..=k_max {
                acc_fn[k] += (f_plus[k] - f_minus[k]) * dt;
                acc_br[k] += (f_plus[k] + f_minus[k]) * dt;
            }
            cur = g;
            if let Err(e) = ode.sample_into(g, &mut u_g) {
                record_err = Some(e);
                return;
            }
            let mut m_row = vec![0.0; k_max + 1];
            for k in 1..=k_max {
                let compensator = root_n * (acc_fn[k] - (u_g[k] - u_0[k]));
                m_row[k] = path.z[gi][k] - path.z[0][k] - compensator;
            }
            martingale.push(m_row);
            bracket.push(acc_br.clone());
            gi += 1;
        }
        let dt = (b - cur).max(0.0);
        for k in 1..=k_max {
            acc_fn[k] += (f_plus[k] - f_minus[k]) * dt;
            acc_br[k] += (f_plus[k] + f_minus[k]) * dt;
        }
    });
    if let Some(e) = record_err {
        return Err(e);
    }
    debug_assert_eq!(gi, grid.len(), "grid checked against the horizon");

    Ok(FluctuationPath {
        grid: grid.clone(),
        n,
        z: path.z.clone(),
        martingale: Some(martingale),
        bracket: Some(bracket),
    })
}

/// Initial-condition presets shared by the simulators and the limit
/// objects.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// All queues empty; `u_0` the empty tail, `Z_0 = 0`.
    Empty,
    /// Queue lengths i.i.d. from the truncated geometric pmf
    /// `P(X = j) ~ q^j`, `j = 0..=max_level`; `u_0` the pmf's tail and
    /// `Z_0` asymptotically Gaussian with the indicator-tail covariance.
    IidGeometric { q: f64, max_level: usize },
    /// The `1/N` discretization of the fixed point (stable regime only).
    Equilibrium,
}

/// Deterministic initial tail `u_0` of the mean-field limit for a preset.
pub fn initial_tail(ic: &InitialCondition, p: &ModelParams, k_max: usize) -> Result<TailVector> {
    match ic {
        InitialCondition::Empty => Ok(TailVector::empty_network(k_max)),
        InitialCondition::IidGeometric { q, max_level } => {
            geometric_tail(*q, *max_level, k_max)
        }
        InitialCondition::Equilibrium => fixed_point(p, k_max),
    }
}

/// Tail of the truncated geometric pmf `P(X = j) ~ q^j, j <= max_level`,
/// on the window `0..=k_max`.
pub fn geometric_tail(q: f64, max_level: usize, k_max: usize) -> Result<TailVector> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParams(
            "geometric weight q must lie in (0, 1]",
        ));
    }
    let mass: f64 = (0..=max_level).map(|j| q.powi(j as i32)).sum();
    let values: Vec<f64> = (0..=k_max)
        .map(|k| {
            if k == 0 {
                1.0
            } else if k > max_level {
                0.0
            } else {
                (k..=max_level).map(|j| q.powi(j as i32)).sum::<f64>() / mass
            }
        })
        .collect();
    TailVector::new(values)
}

/// Sample one queue length from the truncated geometric pmf.
fn sample_geometric<R: Rng + ?Sized>(q: f64, max_level: usize, rng: &mut R) -> u32 {
    let mass: f64 = (0..=max_level).map(|j| q.powi(j as i32)).sum();
    let mut x = rng.random::<f64>() * mass;
    for j in 0..=max_level {
        x -= q.powi(j as i32);
        if x <= 0.0 {
            return j as u32;
        }
    }
    max_level as u32
}

/// Realize a preset as per-queue lengths at time 0. Only the i.i.d.
/// preset consumes randomness.
pub fn initial_micro<R: Rng + ?Sized>(
    ic: &InitialCondition,
    p: &ModelParams,
    n: u64,
    k_max: usize,
    rng: &mut R,
) -> Result<MicroState> {
    match ic {
        InitialCondition::Empty => Ok(MicroState::empty(n)),
        InitialCondition::IidGeometric { q, max_level } => {
            if !(*q > 0.0 && *q <= 1.0) {
                return Err(Error::InvalidParams(
                    "geometric weight q must lie in (0, 1]",
                ));
            }
            let lengths = (0..n)
                .map(|_| sample_geometric(*q, *max_level, rng))
                .collect();
            MicroState::new(lengths, 0.0)
        }
        InitialCondition::Equilibrium => {
            let tail = fixed_point(p, k_max)?;
            let counts = discretize_tail(&tail, n);
            MicroState::new(lengths_from_counts(&counts), 0.0)
        }
    }
}

/// Realize a preset as an aggregate initial state.
pub fn initial_empirical<R: Rng + ?Sized>(
    ic: &InitialCondition,
    p: &ModelParams,
    n: u64,
    k_max: usize,
    rng: &mut R,
) -> Result<EmpiricalTail> {
    Ok(initial_micro(ic, p, n, k_max, rng)?.empirical())
}

/// Nearest lattice state: `counts[k] = round(N v(k))` with a monotone
/// repair sweep. The `O(1/N)` rounding enters `Z^N_0` at scale `N^{-1/2}`.
pub fn discretize_tail(v: &TailVector, n: u64) -> EmpiricalTail {
    let mut counts = Vec::with_capacity(v.horizon() + 1);
    counts.push(n);
    for k in 1..=v.horizon() {
        let raw = (n as f64 * v.value(k)).round() as u64;
        counts.push(raw.min(counts[k - 1]));
    }
    EmpiricalTail::new(counts, n).expect("rounded counts form a lattice tail")
}

/// Expand tail counts into sorted per-queue lengths (queue `i` holds
/// `#{k >= 1 : counts[k] > i}` customers).
pub fn lengths_from_counts(tail: &EmpiricalTail) -> Vec<u32> {
    let counts = tail.counts();
    (0..tail.n())
        .map(|i| (1..counts.len()).filter(|&k| counts[k] > i).count() as u32)
        .collect()
}
