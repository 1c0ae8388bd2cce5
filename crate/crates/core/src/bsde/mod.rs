//! Backward solver for the coupled pre-/post-burst BSDE system.
//!
//! Conditional expectations are least-squares regressions on a cloud of
//! simulated states. With states following `dX = α̃ dt + σ dW` for some
//! reference drift α̃ (zero gives the driftless weak-formulation state), one
//! backward step reads
//!
//! ```text
//! Z_i = E_i[(Y_{i+1} − Ŷ_{i+1}(m_i) − σ Ŷ'_{i+1}(m_i) ΔW_i) ΔW_i] / Δt + σ Ŷ'_{i+1}(m_i)
//! Y_i = E_i[Y_{i+1} + Δt (h(t_i, X_i, Z_i) − α̃_i Z_i / σ)]
//! ```
//!
//! The `−α̃ Z / σ` term is the change of measure back to the driftless
//! state, so every choice of α̃ targets the same solution `Y(t, x)`. With
//! `m_i = X_i + α̃_i Δt`, the two subtracted terms are control variates with
//! known conditional means (0 and the added-back `σŶ'`), so they only reduce
//! the variance of the Z estimate. For a linear `Ŷ_{i+1}` the estimate is
//! exact.
//!
//! The pre-burst equation is linear in its own Y through the exogenous
//! intensity, which is handled implicitly:
//!
//! ```text
//! Y⁰_i = E_i[Y⁰_{i+1} + Δt (h⁰ + k_i Y¹_i(t_i) − α̃ Z⁰/σ)] / (1 + Δt k_i)
//! ```
//!
//! Post-burst: for a burst at grid time η the terminal value is
//! `X_{τ*} β(τ*) γ(τ*) + c X_T²` with `τ* = η ∧ τ̄`. The first term is
//! already known on `[η, T]`, so `Y¹(η) = X_{τ*} β γ(τ*) + Ỹ(t, X_t)` where
//! Ỹ solves the η-free equation with terminal `c X_T²`. One backward pass
//! therefore yields the whole η-indexed family; [`solve_post_burst`] still
//! accepts an explicit η and produces the restriction to `[η, T]`.

pub mod regression;

use serde::{Deserialize, Serialize};

use crate::equilibrium::MeanFlows;
use crate::paths::StepMatrix;
use crate::scenario::{ModelParams, Scenario};
pub use regression::{condexp, CondExp, PolyFit, RegressionBasis};

/// Uniform time grid `t_i = i·Δt`, `i = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Self {
        TimeGrid { n_steps, dt: horizon / n_steps as f64, horizon }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        Self::new(s.model.horizon, s.numerics.n_steps)
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }

    /// Smallest grid index whose time is at or after `t`; `n_steps + 1`
    /// when `t` lies beyond the horizon.
    pub fn snap_up(&self, t: f64) -> usize {
        if !(t <= self.horizon) {
            return self.n_steps + 1;
        }
        let r = t / self.dt;
        let i = r.ceil();
        // Guard against t = i·dt landing a hair above an integer.
        let i = if i - r > 1.0 - 1e-9 { i - 1.0 } else { i };
        (i.max(0.0) as usize).min(self.n_steps)
    }
}

/// Deterministic model inputs evaluated on the grid.
#[derive(Debug, Clone)]
pub struct StepData {
    pub grid: TimeGrid,
    /// γ(t_i).
    pub gamma: Vec<f64>,
    /// Step-averaged trend `(γ(t_{i+1}) − γ(t_i)) / Δt` for `i < n`.
    pub trend: Vec<f64>,
    /// β(t_i)·γ(t_i).
    pub loss: Vec<f64>,
    /// k·t_i.
    pub intensity: Vec<f64>,
}

impl StepData {
    pub fn new(s: &Scenario) -> Self {
        let grid = TimeGrid::for_scenario(s);
        let gamma: Vec<f64> = (0..=grid.n_steps).map(|i| s.bubble_component(grid.t(i))).collect();
        let trend = gamma.windows(2).map(|w| (w[1] - w[0]) / grid.dt).collect();
        let loss = (0..=grid.n_steps).map(|i| s.burst_loss(grid.t(i))).collect();
        let intensity = (0..=grid.n_steps).map(|i| s.exo_intensity(grid.t(i))).collect();
        StepData { grid, gamma, trend, loss, intensity }
    }
}

/// `z|A'`: projection onto `[−2κσ·a_hi, −2κσ·a_lo]`.
#[inline]
pub fn project_z(z: f64, m: &ModelParams) -> f64 {
    let s = 2.0 * m.kappa * m.sigma;
    z.clamp(-s * m.a_hi, -s * m.a_lo)
}

/// Minimizer of `κa² + a·z/σ` over `A`: `−(z|A')/(2κσ)`.
#[inline]
pub fn optimal_control(z: f64, m: &ModelParams) -> f64 {
    (-project_z(z, m) / (2.0 * m.kappa * m.sigma)).clamp(m.a_lo, m.a_hi)
}

/// `min_a κa² + a·z/σ = (z|A')²/(4κσ²) − z·(z|A')/(2κσ²)`.
#[inline]
pub fn min_hamiltonian(z: f64, m: &ModelParams) -> f64 {
    let zp = project_z(z, m);
    let s2 = m.sigma * m.sigma;
    zp * zp / (4.0 * m.kappa * s2) - z * zp / (2.0 * m.kappa * s2)
}

/// Post-burst minimized driver h¹.
#[inline]
pub fn driver_post(x: f64, theta_bar: f64, z: f64, m: &ModelParams) -> f64 {
    min_hamiltonian(z, m) + m.phi * x * x - x * m.delta * theta_bar
}

/// Regression sample: states and reference drift per step, starting at
/// grid index `start` (the entry time).
#[derive(Debug, Clone)]
pub struct Cloud {
    pub start: usize,
    /// `n_steps + 1` columns.
    pub states: StepMatrix,
    /// `n_steps` columns.
    pub drift: StepMatrix,
}

impl Cloud {
    /// Driftless states `X_i = ι + σ (W_{t_i} − W_{t_start})`.
    pub fn driftless(iota: &[f64], dw: &StepMatrix, sigma: f64, start: usize) -> Self {
        let n_paths = iota.len();
        let n_steps = dw.n_cols;
        let mut states = StepMatrix::zeros(n_paths, n_steps + 1);
        states.col_mut(start).copy_from_slice(iota);
        for i in start..n_steps {
            let dwi = dw.col(i);
            let (prev, next) = states.cols_pair_mut(i);
            for p in 0..n_paths {
                next[p] = prev[p] + sigma * dwi[p];
            }
        }
        Cloud { start, states, drift: StepMatrix::zeros(n_paths, n_steps) }
    }

    /// States driven by the linear feedback `θ̄_i + ρ_i (X_i − μ̄_i)`.
    /// `ρ_i dt` is floored at −1 so the explicit step cannot overshoot the mean.
    pub fn feedback(iota: &[f64], dw: &StepMatrix, sigma: f64, start: usize, theta: &[f64], mu: &[f64], slope: &[f64], dt: f64) -> Self {
        let n_paths = iota.len();
        let n_steps = dw.n_cols;
        let mut states = StepMatrix::zeros(n_paths, n_steps + 1);
        let mut drift = StepMatrix::zeros(n_paths, n_steps);
        states.col_mut(start).copy_from_slice(iota);
        for i in start..n_steps {
            let rho = slope[i].max(-1.0 / dt);
            let dwi = dw.col(i);
            let d = drift.col_mut(i);
            let (prev, next) = states.cols_pair_mut(i);
            for p in 0..n_paths {
                d[p] = theta[i] + rho * (prev[p] - mu[i]);
                next[p] = prev[p] + d[p] * dt + sigma * dwi[p];
            }
        }
        Cloud { start, states, drift }
    }
}

/// Regression and truncation counters of a solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub regressions: usize,
    pub fallbacks: usize,
    pub winsorized: usize,
}

impl SolveStats {
    pub fn merge(&mut self, o: SolveStats) {
        self.regressions += o.regressions;
        self.fallbacks += o.fallbacks;
        self.winsorized += o.winsorized;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub basis: RegressionBasis,
    /// Winsorize fitted Z values at these lower/upper quantiles.
    pub winsor: Option<f64>,
}

impl SolverOptions {
    pub fn for_scenario(s: &Scenario) -> Self {
        SolverOptions {
            basis: RegressionBasis { degree: s.numerics.basis_degree },
            winsor: s.numerics.winsor,
        }
    }
}

/// Post-burst solution for a burst at grid index `eta_index`:
/// `Y¹_i(η) = loss_coeff · X_{τ*} + y[i](X_i)` for `i ≥ start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostBurstSolution {
    pub eta_index: usize,
    pub start: usize,
    /// β(τ*)·γ(τ*) with `τ* = η ∧ τ̄`.
    pub loss_coeff: f64,
    /// Indexed by absolute grid step; entries before `start` are zero.
    pub y: Vec<PolyFit>,
    pub z: Vec<PolyFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreBurstSolution {
    pub start: usize,
    pub tau_index: usize,
    /// Markov part of Y⁰. For `i ≥ tau_index` the full value adds the
    /// already-realised `X_τ̄ β γ(τ̄)`, which is not stored.
    pub y: Vec<PolyFit>,
    pub z: Vec<PolyFit>,
}

/// Complete solution for one entry time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeFamily {
    pub entry_index: usize,
    pub tau_index: usize,
    pub pre: PreBurstSolution,
    pub post: PostBurstSolution,
    /// β(t_i)γ(t_i) on the grid, the η-dependent slope of the post-burst family.
    pub loss: Vec<f64>,
    pub stats: SolveStats,
}

impl BsdeFamily {
    /// Y¹_i(η) at state `x` given the inventory held at the burst.
    pub fn y1(&self, eta_index: usize, i: usize, x: f64, x_at_burst: f64) -> f64 {
        debug_assert!(i >= eta_index);
        let burst = eta_index.min(self.tau_index);
        self.loss[burst] * x_at_burst + self.post.y[i].eval(x)
    }

    /// Y¹_{t_i}(t_i): value right after an exogenous burst at `t_i < τ̄`.
    pub fn diag_y1(&self, i: usize, x: f64) -> f64 {
        self.y1(i, i, x, x)
    }

    /// Markov part of Y⁰ at step `i`.
    pub fn y0(&self, i: usize, x: f64) -> f64 {
        self.pre.y[i].eval(x)
    }

    pub fn z0(&self, i: usize, x: f64) -> f64 {
        self.pre.z[i].eval(x)
    }

    pub fn z1(&self, i: usize, x: f64) -> f64 {
        self.post.z[i].eval(x)
    }

    /// Jump of Y at an exogenous burst, `U_t = Y¹_t(t) − Y⁰_t`, for `t < τ̄`.
    pub fn jump(&self, i: usize, x: f64) -> f64 {
        self.diag_y1(i, x) - self.y0(i, x)
    }
}

fn winsorize(values: &mut [f64], q: f64) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let lo = sorted[((q * n as f64) as usize).min(n - 1)];
    let hi = sorted[(((1.0 - q) * n as f64) as usize).min(n - 1)];
    let mut count = 0;
    for v in values.iter_mut() {
        if *v < lo {
            *v = lo;
            count += 1;
        } else if *v > hi {
            *v = hi;
            count += 1;
        }
    }
    count
}

/// One backward regression step from `next` (fit at step i+1) to step i.
///
/// `driver(p, x, z)` is the per-path driver excluding the drift correction;
/// `implicit` is the coefficient `k_i` of the implicit linear term.
fn backward_step(
    cloud: &Cloud,
    dw: &StepMatrix,
    i: usize,
    dt: f64,
    sigma: f64,
    next: &PolyFit,
    implicit: f64,
    opts: &SolverOptions,
    stats: &mut SolveStats,
    driver: impl Fn(usize, f64, f64) -> f64,
) -> (PolyFit, PolyFit) {
    let xs = cloud.states.col(i);
    let xn = cloud.states.col(i + 1);
    let drift = cloud.drift.col(i);
    let dwi = dw.col(i);
    let n = xs.len();

    let slope = next.derivative();
    let mut next_vals = Vec::with_capacity(n);
    let mut z_target = Vec::with_capacity(n);
    for p in 0..n {
        let v = next.eval(xn[p]);
        let mid = xs[p] + drift[p] * dt;
        let g = sigma * slope.eval(mid);
        // Both subtracted terms have known conditional means (0 and g).
        let resid = v - next.eval(mid) - g * dwi[p];
        next_vals.push(v);
        z_target.push(resid * dwi[p] / dt + g);
    }
    let zce = condexp(&z_target, xs, opts.basis);
    stats.regressions += 1;
    stats.fallbacks += zce.fell_back(opts.basis) as usize;
    let mut z_vals = zce.fitted;
    if let Some(q) = opts.winsor {
        stats.winsorized += winsorize(&mut z_vals, q);
    }

    let y_target: Vec<f64> = (0..n)
        .map(|p| {
            let z = z_vals[p];
            next_vals[p] + dt * (driver(p, xs[p], z) - drift[p] * z / sigma)
        })
        .collect();
    let yce = condexp(&y_target, xs, opts.basis);
    stats.regressions += 1;
    stats.fallbacks += yce.fell_back(opts.basis) as usize;
    let y = yce.fit.scaled(1.0 / (1.0 + dt * implicit));
    (y, zce.fit)
}

/// Solves the post-burst equation on `[t_η, T]` (restricted to the cloud's
/// entry) under fixed flows.
pub fn solve_post_burst(
    eta_index: usize,
    flows: &MeanFlows,
    cloud: &Cloud,
    dw: &StepMatrix,
    data: &StepData,
    s: &Scenario,
    opts: &SolverOptions,
) -> (PostBurstSolution, SolveStats) {
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    let m = &s.model;
    let start = eta_index.max(cloud.start).min(n);
    let mut stats = SolveStats::default();

    let mut y = vec![PolyFit::zero(); n + 1];
    let mut z = vec![PolyFit::zero(); n + 1];
    y[n] = PolyFit::from_raw(vec![0.0, 0.0, m.c]);
    z[n] = y[n].derivative().scaled(m.sigma);
    for i in (start..n).rev() {
        let theta = flows.theta_bar[i];
        let (yi, zi) = backward_step(cloud, dw, i, dt, m.sigma, &y[i + 1], 0.0, opts, &mut stats, |_, x, zv| {
            driver_post(x, theta, zv, m)
        });
        y[i] = yi;
        z[i] = zi;
    }
    let burst = eta_index.min(flows.tau_index);
    let sol = PostBurstSolution { eta_index, start, loss_coeff: data.loss[burst], y, z };
    (sol, stats)
}

/// Solves the pre-burst equation on `[t*, τ̄]` given the post-burst family.
pub fn solve_pre_burst(
    flows: &MeanFlows,
    post: &PostBurstSolution,
    cloud: &Cloud,
    dw: &StepMatrix,
    data: &StepData,
    s: &Scenario,
    opts: &SolverOptions,
) -> (PreBurstSolution, SolveStats) {
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    let m = &s.model;
    let start = cloud.start;
    let tau = flows.tau_index.min(n);
    assert!(post.start <= start.max(tau).min(n), "post-burst family must cover the pre-burst range");
    let mut stats = SolveStats::default();

    // After τ̄ both equations share Z and differ by the realised loss only.
    let mut y = post.y.clone();
    let mut z = post.z.clone();
    if tau >= start {
        y[tau] = post.y[tau].clone().add_linear(data.loss[tau]);
        for i in (start..tau).rev() {
            let theta = flows.theta_bar[i];
            let trend = data.trend[i];
            let k = data.intensity[i];
            let loss = data.loss[i];
            let post_y = &post.y[i];
            let (yi, zi) = backward_step(cloud, dw, i, dt, m.sigma, &y[i + 1], k, opts, &mut stats, |_, x, zv| {
                let diag = loss * x + post_y.eval(x);
                driver_post(x, theta, zv, m) - x * trend + k * diag
            });
            y[i] = yi;
            z[i] = zi;
        }
    }
    for i in 0..start {
        y[i] = PolyFit::zero();
        z[i] = PolyFit::zero();
    }
    (PreBurstSolution { start, tau_index: tau, y, z }, stats)
}

/// Post-burst family followed by the single pre-burst solve.
pub fn solve_family(
    flows: &MeanFlows,
    cloud: &Cloud,
    dw: &StepMatrix,
    data: &StepData,
    s: &Scenario,
    opts: &SolverOptions,
) -> BsdeFamily {
    let (post, mut stats) = solve_post_burst(cloud.start, flows, cloud, dw, data, s, opts);
    let (pre, pre_stats) = solve_pre_burst(flows, &post, cloud, dw, data, s, opts);
    stats.merge(pre_stats);
    BsdeFamily {
        entry_index: cloud.start,
        tau_index: flows.tau_index.min(data.grid.n_steps),
        pre,
        post,
        loss: data.loss.clone(),
        stats,
    }
}

/// Generic zero-entry backward solve with a user terminal condition and
/// driver, used by the analytic checks.
pub fn solve_generic(
    terminal: PolyFit,
    cloud: &Cloud,
    dw: &StepMatrix,
    grid: &TimeGrid,
    sigma: f64,
    opts: &SolverOptions,
    implicit: impl Fn(usize) -> f64,
    driver: impl Fn(usize, f64, f64, f64) -> f64,
) -> (Vec<PolyFit>, Vec<PolyFit>) {
    let n = grid.n_steps;
    let mut y = vec![PolyFit::zero(); n + 1];
    let mut z = vec![PolyFit::zero(); n + 1];
    z[n] = terminal.derivative().scaled(sigma);
    y[n] = terminal;
    let mut stats = SolveStats::default();
    for i in (cloud.start..n).rev() {
        let (yi, zi) = backward_step(cloud, dw, i, grid.dt, sigma, &y[i + 1], implicit(i), opts, &mut stats, |_, x, zv| {
            driver(i, x, zv, y[i + 1].eval(x))
        });
        y[i] = yi;
        z[i] = zi;
    }
    (y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::MeanFlows;
    use crate::paths::dw_by_step;
    use crate::scenario::Preset;
    use crate::stochastics::{sample_bundle, Seed};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelParams {
        Preset::Default.scenario().model
    }

    #[test]
    fn control_examples() {
        let m = model();
        assert_eq!(optimal_control(0.0, &m), 0.0);
        assert!((optimal_control(1.0, &m) + 1.0).abs() < 1e-15);
        assert_eq!(optimal_control(200.0, &m), -50.0);
        assert_eq!(optimal_control(-200.0, &m), 50.0);
    }

    #[test]
    fn interior_hamiltonian_identity() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let z: f64 = rng.random_range(-49.0..49.0);
            let x: f64 = rng.random_range(-20.0..20.0);
            let th: f64 = rng.random_range(-50.0..50.0);
            let h = driver_post(x, th, z, &m);
            let closed = -z * z / (4.0 * m.kappa * m.sigma * m.sigma) + m.phi * x * x - x * m.delta * th;
            assert!((h - closed).abs() <= 1e-12 * (1.0 + closed.abs()), "{h} vs {closed}");
        }
    }

    #[test]
    fn minimizer_beats_random_rates() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2_000 {
            let z: f64 = rng.random_range(-300.0..300.0);
            let ham = |a: f64| m.kappa * a * a + a * z / m.sigma;
            let best = ham(optimal_control(z, &m));
            assert!((best - min_hamiltonian(z, &m)).abs() < 1e-9 * (1.0 + best.abs()));
            for _ in 0..200 {
                let a = rng.random_range(m.a_lo..=m.a_hi);
                assert!(best <= ham(a) + 1e-9);
            }
        }
    }

    #[test]
    fn snapping() {
        let g = TimeGrid::new(1.0, 100);
        assert_eq!(g.snap_up(0.0), 0);
        assert_eq!(g.snap_up(0.3), 30);
        assert_eq!(g.snap_up(0.301), 31);
        assert_eq!(g.snap_up(1.0), 100);
        assert_eq!(g.snap_up(1.0001), 101);
        assert_eq!(g.snap_up(f64::INFINITY), 101);
    }

    fn setup(s: &Scenario) -> (StepMatrix, Cloud, StepData) {
        let b = sample_bundle(s, Seed(3));
        let dw = dw_by_step(&b);
        let cloud = Cloud::driftless(&b.iota, &dw, s.model.sigma, 0);
        (dw, cloud, StepData::new(s))
    }

    fn small_scenario(preset: Preset) -> Scenario {
        let mut s = preset.scenario();
        s.numerics.n_paths = 4000;
        s.numerics.n_steps = 20;
        s
    }

    #[test]
    fn zero_costs_give_zero_solution() {
        let mut s = small_scenario(Preset::NoBubble);
        s.model.phi = 0.0;
        s.model.delta = 0.0;
        s.model.c = 0.0;
        let (dw, cloud, data) = setup(&s);
        let flows = MeanFlows::initial(&s, &data.grid);
        let fam = solve_family(&flows, &cloud, &dw, &data, &s, &SolverOptions::for_scenario(&s));
        for i in 0..=s.numerics.n_steps {
            for x in [0.0, 5.0, 12.0] {
                assert_eq!(fam.y0(i, x), 0.0);
                assert_eq!(fam.z0(i, x), 0.0);
                assert_eq!(fam.z1(i, x), 0.0);
            }
        }
    }

    #[test]
    fn post_burst_restriction_matches_full_solve() {
        let s = small_scenario(Preset::Default);
        let (dw, cloud, data) = setup(&s);
        let flows = MeanFlows::initial(&s, &data.grid);
        let opts = SolverOptions::for_scenario(&s);
        let (full, _) = solve_post_burst(0, &flows, &cloud, &dw, &data, &s, &opts);
        for eta in [3, 11, 19] {
            let (seg, _) = solve_post_burst(eta, &flows, &cloud, &dw, &data, &s, &opts);
            assert_eq!(seg.start, eta);
            for i in eta..=s.numerics.n_steps {
                assert_eq!(seg.y[i], full.y[i]);
                assert_eq!(seg.z[i], full.z[i]);
            }
            assert_eq!(seg.loss_coeff, data.loss[eta]);
        }
    }

    #[test]
    fn family_diag_consistency() {
        let s = small_scenario(Preset::Default);
        let (dw, cloud, data) = setup(&s);
        let flows = MeanFlows::initial(&s, &data.grid);
        let fam = solve_family(&flows, &cloud, &dw, &data, &s, &SolverOptions::for_scenario(&s));
        for i in 0..s.numerics.n_steps {
            for x in [2.0, 9.0] {
                assert_eq!(fam.diag_y1(i, x), fam.y1(i, i, x, x));
                assert!((fam.jump(i, x) - (fam.diag_y1(i, x) - fam.y0(i, x))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_intensity_decouples_from_post_burst_values() {
        // With k = 0 the pre-burst solve ignores Y¹ entirely: perturbing the
        // post-burst Y (but not its Z at τ̄) leaves Z⁰ unchanged before τ̄.
        let mut s = small_scenario(Preset::Default);
        s.burst.k = 0.0;
        let (dw, cloud, data) = setup(&s);
        let mut flows = MeanFlows::initial(&s, &data.grid);
        flows.tau_index = 12;
        flows.tau_bar = data.grid.t(12);
        let opts = SolverOptions::for_scenario(&s);
        let (post, _) = solve_post_burst(0, &flows, &cloud, &dw, &data, &s, &opts);
        let (pre_a, _) = solve_pre_burst(&flows, &post, &cloud, &dw, &data, &s, &opts);
        let mut bumped = post.clone();
        for i in 0..12 {
            bumped.y[i] = bumped.y[i].clone().add_linear(123.0).scaled(3.0);
        }
        let (pre_b, _) = solve_pre_burst(&flows, &bumped, &cloud, &dw, &data, &s, &opts);
        assert_eq!(pre_a, pre_b);
    }

    #[test]
    fn large_intensity_pulls_pre_burst_value_to_diagonal() {
        // Implicit step with k → ∞: Y⁰_i → Y¹_i(t_i).
        let mut s = small_scenario(Preset::Default);
        s.burst.k = 1e9;
        let (dw, cloud, data) = setup(&s);
        let mut flows = MeanFlows::initial(&s, &data.grid);
        flows.tau_index = 15;
        flows.tau_bar = data.grid.t(15);
        let fam = solve_family(&flows, &cloud, &dw, &data, &s, &SolverOptions::for_scenario(&s));
        for i in 1..15 {
            for x in [6.0, 10.0, 14.0] {
                let d = fam.diag_y1(i, x);
                assert!((fam.y0(i, x) - d).abs() < 1e-3 * (1.0 + d.abs()), "i={i} x={x}");
            }
        }
    }

    #[test]
    fn no_bubble_pre_and_post_coincide() {
        let s = small_scenario(Preset::NoBubble);
        let (dw, cloud, data) = setup(&s);
        let mut flows = MeanFlows::initial(&s, &data.grid);
        flows.tau_index = 14;
        flows.tau_bar = data.grid.t(14);
        let fam = solve_family(&flows, &cloud, &dw, &data, &s, &SolverOptions::for_scenario(&s));
        for i in 0..=s.numerics.n_steps {
            for x in [6.0, 10.0, 14.0] {
                let scale = 1.0 + fam.post.y[i].eval(x).abs();
                assert!((fam.y0(i, x) - fam.post.y[i].eval(x)).abs() < 1e-3 * scale, "i={i}");
                assert!((fam.z0(i, x) - fam.z1(i, x)).abs() < 1e-3 * (1.0 + fam.z1(i, x).abs()));
            }
        }
    }
}
