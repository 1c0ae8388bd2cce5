//! Mean-field fixed point over the flows (θ̄, μ̄, τ̄).
//!
//! Each Picard iteration solves the BSDE family for every entry point under
//! the current flows, simulates the resulting feedback policies forward,
//! aggregates the entry-weighted means and damps the update. τ̄ is never
//! damped; it is recomputed from the damped μ̄.
//!
//! Regressions use a state cloud driven by the linear feedback
//! `θ̄ + ρ (x − μ̄)` (with the drift correction of the BSDE scheme), where ρ
//! is the damped slope of the previous response. The cloud thus tracks both
//! the level and the contraction of the equilibrium inventory, yet depends
//! only on a few damped curves; clouds built from the raw controlled paths
//! feed regression noise back into the next solve and can diverge when κ is
//! small.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_family, BsdeFamily, Cloud, SolveStats, SolverOptions, StepData, TimeGrid};
use crate::error::{Error, Result};
use crate::paths::{dw_by_step, StepMatrix};
use crate::scenario::{EntryKind, Scenario};
use crate::simulate::{combine_entry_costs, path_costs, simulate_paths, ControlledPaths, Estimate, PolicyField};
use crate::stochastics::{sample_bundle, PathBundle, Seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NumericsSpec {
    pub n_steps: usize,
    pub n_paths: usize,
    pub basis_degree: usize,
    /// Picard damping λ ∈ (0, 1].
    pub damping: f64,
    /// Tolerance on the relative sup-norm fixed-point residual.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Entry quadrature size including the atom at 0; `None` picks 1 for a
    /// fixed entry and 8 otherwise.
    pub n_entry_grid: Option<usize>,
    /// Draw a fresh path bundle every iteration instead of reusing one.
    pub redraw_paths: bool,
    pub antithetic: bool,
    /// Winsorize fitted Z at this lower/upper quantile.
    pub winsor: Option<f64>,
}

impl Default for NumericsSpec {
    fn default() -> Self {
        NumericsSpec {
            n_steps: 100,
            n_paths: 20_000,
            basis_degree: 2,
            damping: 0.5,
            tol: 1e-3,
            max_iter: 50,
            seed: 42,
            n_entry_grid: None,
            redraw_paths: false,
            antithetic: false,
            winsor: None,
        }
    }
}

impl NumericsSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidScenario(m));
        if self.n_steps == 0 || self.n_paths < 2 || self.max_iter == 0 {
            return fail("n_steps, max_iter must be positive and n_paths at least 2".into());
        }
        if self.basis_degree == 0 || self.basis_degree > 8 {
            return fail(format!("basis_degree must be in 1..=8, got {}", self.basis_degree));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return fail(format!("damping must be in (0, 1], got {}", self.damping));
        }
        if !(self.tol > 0.0) {
            return fail(format!("tol must be positive, got {}", self.tol));
        }
        if self.n_entry_grid == Some(0) {
            return fail("n_entry_grid must be positive".into());
        }
        if let Some(q) = self.winsor {
            if !(q > 0.0 && q < 0.5) {
                return fail(format!("winsor quantile must be in (0, 0.5), got {q}"));
            }
        }
        Ok(())
    }
}

/// Entry-weighted mean flows on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFlows {
    /// Mean trading rate θ̄ at each grid time, `n_steps + 1` values.
    pub theta_bar: Vec<f64>,
    /// Mean inventory μ̄ at each grid time.
    pub mu_bar: Vec<f64>,
    pub tau_bar: f64,
    /// Grid index of τ̄ (`n_steps` when τ̄ = T).
    pub tau_index: usize,
}

impl MeanFlows {
    /// No trading, inventory at its initial mean, no endogenous burst.
    pub fn initial(s: &Scenario, grid: &TimeGrid) -> Self {
        Self::constant(grid, 0.0, s.init.mean, grid.n_steps)
    }

    pub fn constant(grid: &TimeGrid, theta: f64, mu: f64, tau_index: usize) -> Self {
        let n = grid.n_steps;
        MeanFlows {
            theta_bar: vec![theta; n + 1],
            mu_bar: vec![mu; n + 1],
            tau_bar: grid.t(tau_index.min(n)),
            tau_index: tau_index.min(n),
        }
    }

    /// `(1 − λ)·self + λ·other` with τ̄ recomputed from the mixed μ̄.
    pub fn damped(&self, other: &MeanFlows, lambda: f64, s: &Scenario, grid: &TimeGrid) -> MeanFlows {
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect() };
        let theta_bar = mix(&self.theta_bar, &other.theta_bar);
        let mu_bar = mix(&self.mu_bar, &other.mu_bar);
        let (tau_index, tau_bar) = endogenous_burst(&mu_bar, grid, s);
        MeanFlows { theta_bar, mu_bar, tau_bar, tau_index }
    }

    /// Relative sup-norm distance plus the τ̄ gap as a fraction of the horizon.
    pub fn residual(&self, other: &MeanFlows, horizon: f64) -> f64 {
        let rel = |a: &[f64], b: &[f64]| -> f64 {
            let scale = a.iter().chain(b).fold(1.0f64, |m, v| m.max(v.abs()));
            a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
        };
        let r = rel(&self.theta_bar, &other.theta_bar).max(rel(&self.mu_bar, &other.mu_bar));
        r + (self.tau_bar - other.tau_bar).abs() / horizon
    }
}

/// First grid time at which the running minimum of μ̄ is at or below ζ;
/// `(n_steps, T)` if it never is.
pub fn endogenous_burst(mu_bar: &[f64], grid: &TimeGrid, s: &Scenario) -> (usize, f64) {
    let mut running = f64::INFINITY;
    for (i, &m) in mu_bar.iter().enumerate().take(grid.n_steps + 1) {
        running = running.min(m);
        if running <= s.threshold(grid.t(i)) {
            return (i, grid.t(i));
        }
    }
    (grid.n_steps, grid.horizon)
}

/// Discrete entry law: an atom at 0 and midpoints of `(0, η]`, each snapped
/// up to the time grid. Points landing on the same grid index are merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryGrid {
    pub times: Vec<f64>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl EntryGrid {
    pub fn fixed() -> Self {
        EntryGrid { times: vec![0.0], indices: vec![0], weights: vec![1.0] }
    }

    pub fn for_scenario(s: &Scenario, grid: &TimeGrid) -> Self {
        let e = &s.entry;
        let points = s.numerics.n_entry_grid.unwrap_or(match e.kind {
            EntryKind::Fixed => 1,
            EntryKind::AtomPlusUniform => 8,
        });
        if e.kind == EntryKind::Fixed || points <= 1 || e.eta <= 0.0 || e.p0 >= 1.0 {
            return Self::fixed();
        }
        let m = points - 1;
        let mut raw = vec![(0.0, e.p0)];
        for j in 0..m {
            raw.push((e.eta * (j as f64 + 0.5) / m as f64, (1.0 - e.p0) / m as f64));
        }
        let mut out = EntryGrid { times: Vec::new(), indices: Vec::new(), weights: Vec::new() };
        for (t, w) in raw {
            let idx = grid.snap_up(t).min(grid.n_steps);
            if out.indices.last() == Some(&idx) {
                *out.weights.last_mut().unwrap() += w;
            } else if w > 0.0 {
                out.times.push(grid.t(idx));
                out.indices.push(idx);
                out.weights.push(w);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Entered mass `F(t_i)` under the discrete law.
    pub fn cdf(&self, i: usize) -> f64 {
        self.indices.iter().zip(&self.weights).filter(|(&idx, _)| idx <= i).map(|(_, w)| w).sum()
    }
}

/// Entry-weighted per-step means of rate and inventory, divided by the
/// entered mass. Summation order is fixed: paths in order, then entries.
pub fn aggregate_flows(paths: &[ControlledPaths], entries: &EntryGrid, grid: &TimeGrid, s: &Scenario) -> MeanFlows {
    let n = grid.n_steps;
    let mut theta_bar = vec![0.0; n + 1];
    let mut mu_bar = vec![0.0; n + 1];
    for i in 0..=n {
        let f = entries.cdf(i);
        if f <= 0.0 {
            mu_bar[i] = s.init.mean;
            continue;
        }
        let mut th = 0.0;
        let mut mu = 0.0;
        for (cp, &w) in paths.iter().zip(&entries.weights) {
            if cp.entry_index <= i {
                th += w * cp.a.col_mean(i);
                mu += w * cp.x.col_mean(i);
            }
        }
        theta_bar[i] = th / f;
        mu_bar[i] = mu / f;
    }
    let (tau_index, tau_bar) = endogenous_burst(&mu_bar, grid, s);
    MeanFlows { theta_bar, mu_bar, tau_bar, tau_index }
}

/// Best response to the given flows: new flows, the policies and the paths they generate.
#[derive(Debug, Clone)]
pub struct Response {
    pub flows: MeanFlows,
    pub policies: Vec<PolicyField>,
    pub paths: Vec<ControlledPaths>,
    pub clamp_rate: f64,
}

/// Simulates every entry's policy on the bundle and aggregates the flows.
pub fn forward_response(
    families: &[BsdeFamily],
    entries: &EntryGrid,
    bundle: &PathBundle,
    dw: &StepMatrix,
    grid: &TimeGrid,
    s: &Scenario,
) -> Response {
    let policies: Vec<PolicyField> = families.iter().map(|f| PolicyField::from_family(f, s)).collect();
    let paths: Vec<ControlledPaths> = policies
        .iter()
        .map(|p| simulate_paths(p, bundle, dw, grid, s.model.sigma))
        .collect();
    let flows = aggregate_flows(&paths, entries, grid, s);
    let clamped: usize = paths.iter().map(|p| p.clamped).sum();
    let evaluated: usize = paths.iter().map(|p| p.evaluated).sum();
    let clamp_rate = if evaluated == 0 { 0.0 } else { clamped as f64 / evaluated as f64 };
    Response { flows, policies, paths, clamp_rate }
}

/// Cost-form objective of one entry's paths under the flows it responded to.
pub fn conditional_objective(paths: &ControlledPaths, flows: &MeanFlows, data: &StepData, s: &Scenario) -> Estimate {
    Estimate::from_samples(&path_costs(paths, flows, data, s))
}

/// Entry-weighted objective: per path, the weighted sum of the entry-conditional costs.
pub fn weighted_objective(paths: &[ControlledPaths], entries: &EntryGrid, flows: &MeanFlows, data: &StepData, s: &Scenario) -> Estimate {
    let per_entry: Vec<Vec<f64>> = paths.iter().map(|p| path_costs(p, flows, data, s)).collect();
    Estimate::from_samples(&combine_entry_costs(&per_entry, entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// Fixed-point residual `‖Ψ(flows) − flows‖` per iteration.
    pub residuals: Vec<f64>,
    pub tau_history: Vec<f64>,
    pub converged: bool,
    /// Iteration whose flows are returned (the last one when converged).
    pub best_iteration: usize,
    pub clamp_rate: f64,
    pub wall_time_s: f64,
    pub solve_stats: SolveStats,
}

/// Output of [`picard_solve`].
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub flows: MeanFlows,
    pub policies: Vec<PolicyField>,
    pub families: Vec<BsdeFamily>,
    /// Forward paths of the returned policies, one set per entry point.
    pub paths: Vec<ControlledPaths>,
    /// Bundle the returned paths were simulated on.
    pub bundle: PathBundle,
    pub entries: EntryGrid,
    pub data: StepData,
    pub objective: Estimate,
    pub report: FixedPointReport,
}

/// State reused across Picard iterations.
pub struct PicardState {
    pub flows: MeanFlows,
    /// Regression clouds per entry point and the increments they were built from.
    pub clouds: Vec<Cloud>,
    pub cloud_dw: StepMatrix,
}

impl PicardState {
    pub fn initial(s: &Scenario, bundle: &PathBundle, dw: &StepMatrix, entries: &EntryGrid, grid: &TimeGrid) -> Self {
        let clouds = entries
            .indices
            .iter()
            .map(|&e| Cloud::driftless(&bundle.iota, dw, s.model.sigma, e))
            .collect();
        PicardState { flows: MeanFlows::initial(s, grid), clouds, cloud_dw: dw.clone() }
    }
}

/// Solves the BSDE family of every entry point under `state.flows`.
pub fn solve_families(state: &PicardState, data: &StepData, s: &Scenario, opts: &SolverOptions) -> Vec<BsdeFamily> {
    state
        .clouds
        .par_iter()
        .map(|c| solve_family(&state.flows, c, &state.cloud_dw, data, s, opts))
        .collect()
}

/// Regression clouds following the linear feedback `θ̄ + ρ (x − μ̄)`.
pub fn feedback_clouds(bundle: &PathBundle, dw: &StepMatrix, entries: &EntryGrid, flows: &MeanFlows, slope: &[f64], s: &Scenario, grid: &TimeGrid) -> Vec<Cloud> {
    entries
        .indices
        .iter()
        .map(|&e| Cloud::feedback(&bundle.iota, dw, s.model.sigma, e, &flows.theta_bar, &flows.mu_bar, slope, grid.dt))
        .collect()
}

/// Per-step slope of trading rate on inventory, pooled over entry cohorts
/// and burst branches so the post-burst level shift does not bias it.
pub fn feedback_slope(paths: &[ControlledPaths], n_steps: usize) -> Vec<f64> {
    (0..n_steps)
        .map(|i| {
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for p in paths.iter().filter(|p| p.entry_index <= i) {
                let (x, a) = (p.x.col(i), p.a.col(i));
                for burst in [false, true] {
                    let idx = (0..x.len()).filter(|&j| (p.burst_index[j] <= i) == burst);
                    let (mut n, mut mx, mut ma) = (0.0, 0.0, 0.0);
                    for j in idx.clone() {
                        n += 1.0;
                        mx += x[j];
                        ma += a[j];
                    }
                    if n < 2.0 {
                        continue;
                    }
                    mx /= n;
                    ma /= n;
                    for j in idx {
                        sxy += (x[j] - mx) * (a[j] - ma);
                        sxx += (x[j] - mx) * (x[j] - mx);
                    }
                }
            }
            if sxx > 1e-12 {
                sxy / sxx
            } else {
                0.0
            }
        })
        .collect()
}

fn iteration_seed(base: u64, iter: usize) -> Seed {
    Seed(base ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Damped Picard iteration from `θ̄ ≡ 0, μ̄ ≡ E[ι], τ̄ = T`.
///
/// Non-convergence is not an error: the iterate with the smallest residual
/// is returned with `converged = false`.
pub fn picard_solve(s: &Scenario) -> Result<Equilibrium> {
    s.validate()?;
    let bundle = sample_bundle(s, Seed(s.numerics.seed));
    picard_solve_with(s, bundle)
}

/// [`picard_solve`] on a given initial bundle.
pub fn picard_solve_with(s: &Scenario, mut bundle: PathBundle) -> Result<Equilibrium> {
    let start = Instant::now();
    let nm = &s.numerics;
    let data = StepData::new(s);
    let grid = data.grid.clone();
    if bundle.n_steps != grid.n_steps {
        return Err(Error::InvalidScenario(format!(
            "bundle has {} steps, scenario {}",
            bundle.n_steps, grid.n_steps
        )));
    }
    let entries = EntryGrid::for_scenario(s, &grid);
    let opts = SolverOptions::for_scenario(s);
    let mut dw = dw_by_step(&bundle);
    let mut state = PicardState::initial(s, &bundle, &dw, &entries, &grid);
    let mut slope = vec![0.0; grid.n_steps];

    let mut residuals = Vec::new();
    let mut tau_history = Vec::new();
    let mut solve_stats = SolveStats::default();
    let mut best: Option<(f64, usize, MeanFlows, Vec<BsdeFamily>, Response, PathBundle)> = None;
    let mut converged = false;

    for iter in 0..nm.max_iter {
        if nm.redraw_paths && iter > 0 {
            bundle = sample_bundle(s, iteration_seed(nm.seed, iter));
            dw = dw_by_step(&bundle);
        }
        let families = solve_families(&state, &data, s, &opts);
        for f in &families {
            solve_stats.merge(f.stats);
        }
        let resp = forward_response(&families, &entries, &bundle, &dw, &grid, s);
        let residual = state.flows.residual(&resp.flows, grid.horizon);
        if !residual.is_finite() {
            return Err(Error::Regression { step: iter, reason: "non-finite fixed-point residual".into() });
        }
        residuals.push(residual);
        tau_history.push(state.flows.tau_bar);
        log::info!(
            "picard {iter:>3}: residual {residual:.3e}  tau_bar {:.3}  clamp {:.4}",
            state.flows.tau_bar,
            resp.clamp_rate
        );

        let next = state.flows.damped(&resp.flows, nm.damping, s, &grid);
        let fitted = feedback_slope(&resp.paths, grid.n_steps);
        for (r, f) in slope.iter_mut().zip(&fitted) {
            *r = (1.0 - nm.damping) * *r + nm.damping * f;
        }
        let is_best = best.as_ref().is_none_or(|b| residual < b.0);
        converged = residual < nm.tol;
        if is_best || converged {
            best = Some((residual, iter, state.flows.clone(), families, resp, bundle.clone()));
        }
        if converged {
            break;
        }
        let clouds = feedback_clouds(&bundle, &dw, &entries, &next, &slope, s, &grid);
        state = PicardState { flows: next, clouds, cloud_dw: dw.clone() };
    }

    let (_, best_iteration, flows, families, resp, fwd_bundle) = best.expect("at least one iteration");
    let objective = weighted_objective(&resp.paths, &entries, &flows, &data, s);
    let report = FixedPointReport {
        iterations: residuals.len(),
        residuals,
        tau_history,
        converged,
        best_iteration,
        clamp_rate: resp.clamp_rate,
        wall_time_s: start.elapsed().as_secs_f64(),
        solve_stats,
    };
    Ok(Equilibrium {
        flows,
        policies: resp.policies,
        families,
        paths: resp.paths,
        bundle: fwd_bundle,
        entries,
        data,
        objective,
        report,
    })
}

/// One undamped best response to `eq.flows` on the equilibrium's own bundle
/// and paths, for self-consistency checks.
pub fn best_response_to(eq: &Equilibrium, s: &Scenario) -> Response {
    let dw = dw_by_step(&eq.bundle);
    let slope = feedback_slope(&eq.paths, eq.data.grid.n_steps);
    let state = PicardState {
        flows: eq.flows.clone(),
        clouds: feedback_clouds(&eq.bundle, &dw, &eq.entries, &eq.flows, &slope, s, &eq.data.grid),
        cloud_dw: dw.clone(),
    };
    let opts = SolverOptions::for_scenario(s);
    let families = solve_families(&state, &eq.data, s, &opts);
    forward_response(&families, &eq.entries, &eq.bundle, &dw, &eq.data.grid, s)
}
