//! Forward Monte Carlo of the equilibrium: controlled inventories, prices
//! with the burst jump, wealth, and summary statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{optimal_control, project_z, BsdeFamily, PolyFit, StepData, TimeGrid};
use crate::equilibrium::{EntryGrid, MeanFlows};
use crate::paths::StepMatrix;
use crate::scenario::{ModelParams, Scenario};
use crate::stochastics::PathBundle;

/// Feedback control for one entry time: `â⁺(t, x)` before the burst and
/// `â⁻(t, x; η)` after it.
///
/// In this model the post-burst Z does not depend on the burst time η (the
/// η-dependence of Y¹ is an already-realised additive term), so a single
/// post-burst table serves the whole family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyField {
    pub entry_index: usize,
    pub tau_index: usize,
    pub z_pre: Vec<PolyFit>,
    pub z_post: Vec<PolyFit>,
    model: ModelParams,
}

impl PolicyField {
    pub fn from_family(fam: &BsdeFamily, s: &Scenario) -> Self {
        PolicyField {
            entry_index: fam.entry_index,
            tau_index: fam.tau_index,
            z_pre: fam.pre.z.clone(),
            z_post: fam.post.z.clone(),
            model: s.model.clone(),
        }
    }

    pub fn pre_burst(&self, i: usize, x: f64) -> f64 {
        optimal_control(self.z_pre[i].eval(x), &self.model)
    }

    pub fn post_burst(&self, i: usize, x: f64) -> f64 {
        optimal_control(self.z_post[i].eval(x), &self.model)
    }

    /// Rate at step `i` for a path whose burst happens at grid index
    /// `burst_index`, plus whether the bound of A was active.
    #[inline]
    pub fn rate(&self, i: usize, x: f64, burst_index: usize) -> (f64, bool) {
        if i < self.entry_index {
            return (0.0, false);
        }
        let z = if i < burst_index { self.z_pre[i].eval(x) } else { self.z_post[i].eval(x) };
        (optimal_control(z, &self.model), project_z(z, &self.model) != z)
    }
}

/// Controlled paths for one entry time. Inventory and rate are zero before entry.
#[derive(Debug, Clone)]
pub struct ControlledPaths {
    pub entry_index: usize,
    pub tau_index: usize,
    /// `n + 1` columns.
    pub x: StepMatrix,
    /// `n + 1` columns; the last is the rate the policy would apply at T.
    pub a: StepMatrix,
    /// Grid index of `τ* = τ̄ ∧ τ` per path (snapped up), `n + 1` if none.
    pub burst_index: Vec<usize>,
    pub clamped: usize,
    pub evaluated: usize,
}

impl ControlledPaths {
    pub fn n_paths(&self) -> usize {
        self.x.n_paths
    }

    pub fn clamp_rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.clamped as f64 / self.evaluated as f64
        }
    }
}

/// Per-path grid index of the actual burst `τ̄ ∧ τ`.
pub fn burst_indices(bundle: &PathBundle, grid: &TimeGrid, tau_index: usize) -> Vec<usize> {
    bundle.tau_exo.iter().map(|&t| grid.snap_up(t).min(tau_index)).collect()
}

/// Euler–Maruyama under the feedback policy: `X_{i+1} = X_i + â Δt + σ ΔW_i`,
/// switching to the post-burst policy from the burst index on.
pub fn simulate_paths(policy: &PolicyField, bundle: &PathBundle, dw: &StepMatrix, grid: &TimeGrid, sigma: f64) -> ControlledPaths {
    let n = grid.n_steps;
    let n_paths = bundle.n_paths;
    let e = policy.entry_index;
    let burst_index = burst_indices(bundle, grid, policy.tau_index);
    let mut x = StepMatrix::zeros(n_paths, n + 1);
    let mut a = StepMatrix::zeros(n_paths, n + 1);
    x.col_mut(e).copy_from_slice(&bundle.iota);
    let mut clamped = 0;
    for i in e..=n {
        let xi = x.col(i);
        let rates: Vec<(f64, bool)> = xi
            .par_iter()
            .zip(burst_index.par_iter())
            .map(|(&xv, &bi)| policy.rate(i, xv, bi))
            .collect();
        clamped += rates.iter().filter(|r| r.1).count();
        let acol = a.col_mut(i);
        for (dst, r) in acol.iter_mut().zip(&rates) {
            *dst = r.0;
        }
        if i < n {
            let dwi = dw.col(i);
            let (prev, next) = x.cols_pair_mut(i);
            let acol = a.col(i);
            next.par_iter_mut().enumerate().for_each(|(p, v)| {
                *v = prev[p] + acol[p] * grid.dt + sigma * dwi[p];
            });
        }
    }
    let evaluated = n_paths * (n + 1 - e);
    ControlledPaths { entry_index: e, tau_index: policy.tau_index, x, a, burst_index, clamped, evaluated }
}

/// Monte Carlo mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Estimate { mean, se: (var / n as f64).sqrt(), n }
    }
}

/// Realised cost per path: running cost plus burst loss and terminal penalty.
pub fn path_costs(paths: &ControlledPaths, flows: &MeanFlows, data: &StepData, s: &Scenario) -> Vec<f64> {
    let m = &s.model;
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    let e = paths.entry_index;
    (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let jb = paths.burst_index[p];
            let mut cost = 0.0;
            for i in e..n {
                let x = paths.x.get(p, i);
                let a = paths.a.get(p, i);
                let mut f = m.kappa * a * a + m.phi * x * x - x * m.delta * flows.theta_bar[i];
                if i < jb {
                    f -= x * data.trend[i];
                }
                cost += f * dt;
            }
            if jb <= n {
                cost += paths.x.get(p, jb) * data.loss[jb];
            }
            let xt = paths.x.get(p, n);
            cost + m.c * xt * xt
        })
        .collect()
}

/// Price paths: fundamental Q and traded price P (post-jump at the burst index).
#[derive(Debug, Clone)]
pub struct PricePaths {
    pub fundamental: StepMatrix,
    pub price: StepMatrix,
    /// Price just before the jump at the burst index, NaN when no burst by T.
    pub pre_jump: Vec<f64>,
}

/// `dP = (1 − D)(b dt + δθ̄ dt + σ₀ dW⁰) + D (δθ̄ dt + σ₀ dW⁰) − βγ(τ*) dD`.
pub fn simulate_price(paths: &ControlledPaths, flows: &MeanFlows, bundle: &PathBundle, data: &StepData, s: &Scenario) -> PricePaths {
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    let n_paths = paths.n_paths();
    let mut q = StepMatrix::zeros(n_paths, n + 1);
    let mut price = StepMatrix::zeros(n_paths, n + 1);
    let mut pre_jump = vec![f64::NAN; n_paths];
    q.col_mut(0).fill(s.model.p0);
    for i in 0..n {
        let (prev, next) = q.cols_pair_mut(i);
        for p in 0..n_paths {
            next[p] = prev[p] + s.model.delta * flows.theta_bar[i] * dt + s.model.sigma0 * bundle.dw0[p * n + i];
        }
    }
    for p in 0..n_paths {
        let jb = paths.burst_index[p];
        let residual = if jb <= n { data.gamma[jb] - data.loss[jb] } else { 0.0 };
        for i in 0..=n {
            let qi = q.get(p, i);
            let offset = if i < jb { data.gamma[i] } else { residual };
            price.col_mut(i)[p] = qi + offset;
        }
        if jb <= n {
            pre_jump[p] = q.get(p, jb) + data.gamma[jb];
        }
    }
    PricePaths { fundamental: q, price, pre_jump }
}

/// Self-financing wealth, `V = 0` at entry:
/// `dV = [−κa² + X(b(1−D) + δθ̄)]dt − Xβγ dD + σ₀ X dW⁰ + σ P dW`.
pub fn simulate_wealth(paths: &ControlledPaths, prices: &PricePaths, flows: &MeanFlows, bundle: &PathBundle, data: &StepData, s: &Scenario) -> StepMatrix {
    let m = &s.model;
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    let e = paths.entry_index;
    let n_paths = paths.n_paths();
    let mut v = StepMatrix::zeros(n_paths, n + 1);
    for p in 0..n_paths {
        let jb = paths.burst_index[p];
        let mut w = 0.0;
        for i in e..n {
            let x = paths.x.get(p, i);
            let a = paths.a.get(p, i);
            if i == jb {
                w -= x * data.loss[i];
            }
            let trend = if i < jb { data.trend[i] } else { 0.0 };
            w += (-m.kappa * a * a + x * (trend + m.delta * flows.theta_bar[i])) * dt;
            w += m.sigma0 * x * bundle.dw0[p * n + i] + m.sigma * prices.price.get(p, i) * bundle.dw[p * n + i];
            v.col_mut(i + 1)[p] = w;
        }
        if jb == n {
            w -= paths.x.get(p, n) * data.loss[n];
            v.col_mut(n)[p] = w;
        }
    }
    v
}

/// Cost implied by the wealth path: `−(V_T − V_0) + Σ φX²Δt + cX_T²`.
pub fn wealth_costs(paths: &ControlledPaths, wealth: &StepMatrix, data: &StepData, s: &Scenario) -> Vec<f64> {
    let n = data.grid.n_steps;
    let dt = data.grid.dt;
    (0..paths.n_paths())
        .map(|p| {
            let running: f64 = (paths.entry_index..n).map(|i| s.model.phi * paths.x.get(p, i).powi(2) * dt).sum();
            let xt = paths.x.get(p, n);
            -wealth.get(p, n) + running + s.model.c * xt * xt
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// Exogenous burst strictly before τ̄.
    Exogenous,
    /// Endogenous burst at τ̄ < T.
    Endogenous,
    /// Nothing before the horizon.
    NoBurst,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Exogenous => "exogenous",
            Branch::Endogenous => "endogenous",
            Branch::NoBurst => "none",
        }
    }
}

pub fn branch_of(exo_index: usize, tau_index: usize, n_steps: usize) -> Branch {
    if exo_index < tau_index {
        Branch::Exogenous
    } else if tau_index < n_steps {
        Branch::Endogenous
    } else {
        Branch::NoBurst
    }
}

pub fn branches(bundle: &PathBundle, grid: &TimeGrid, tau_index: usize) -> Vec<Branch> {
    bundle.tau_exo.iter().map(|&t| branch_of(grid.snap_up(t), tau_index, grid.n_steps)).collect()
}

pub const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Per-step statistics of one group of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub label: String,
    pub n_paths: usize,
    pub mean_x: Vec<f64>,
    /// `quantiles[q][i]` for the levels in [`QUANTILES`].
    pub quantiles: Vec<Vec<f64>>,
    pub mean_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub times: Vec<f64>,
    pub bands: Vec<BandStats>,
    /// Representative exogenous and endogenous paths for plotting.
    pub sample_exogenous: Option<usize>,
    pub sample_endogenous: Option<usize>,
    /// Fraction of negative second differences of the mean inventory before τ̄.
    pub concavity: Option<f64>,
    pub objective: Estimate,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn band(label: &str, paths: &ControlledPaths, members: &[usize]) -> BandStats {
    let n_cols = paths.x.n_cols;
    let mut mean_x = Vec::with_capacity(n_cols);
    let mut mean_a = Vec::with_capacity(n_cols);
    let mut quantiles = vec![Vec::with_capacity(n_cols); QUANTILES.len()];
    for i in 0..n_cols {
        let col = paths.x.col(i);
        let acol = paths.a.col(i);
        let mut xs: Vec<f64> = members.iter().map(|&p| col[p]).collect();
        let k = xs.len().max(1) as f64;
        mean_x.push(xs.iter().sum::<f64>() / k);
        mean_a.push(members.iter().map(|&p| acol[p]).sum::<f64>() / k);
        xs.sort_by(|a, b| a.total_cmp(b));
        for (qv, out) in QUANTILES.iter().zip(quantiles.iter_mut()) {
            out.push(if xs.is_empty() { f64::NAN } else { quantile_sorted(&xs, *qv) });
        }
    }
    BandStats { label: label.to_string(), n_paths: members.len(), mean_x, quantiles, mean_a }
}

/// Fraction of negative second differences of the drift-implied mean
/// inventory `μ̄_0 + Σ θ̄ Δt` on `[0, τ̄]`; the zero-mean Brownian part of
/// the sample mean is left out. `None` when fewer than three points precede τ̄.
pub fn concavity_diagnostic(flows: &MeanFlows, dt: f64) -> Option<f64> {
    let tau = flows.tau_index;
    if tau < 2 {
        return None;
    }
    let negatives = (1..tau).filter(|&i| (flows.theta_bar[i] - flows.theta_bar[i - 1]) * dt < 0.0).count();
    Some(negatives as f64 / (tau - 1) as f64)
}

/// Branch-split bands, representative paths and the concavity diagnostic.
/// Bands are computed over the paths of the first entry time.
pub fn summarize(paths: &ControlledPaths, bundle: &PathBundle, flows: &MeanFlows, grid: &TimeGrid, objective: Estimate) -> PathStats {
    let labels = branches(bundle, grid, flows.tau_index);
    let all: Vec<usize> = (0..paths.n_paths()).collect();
    let mut bands = vec![band("all", paths, &all)];
    for b in [Branch::Exogenous, Branch::Endogenous, Branch::NoBurst] {
        let members: Vec<usize> = all.iter().copied().filter(|&p| labels[p] == b).collect();
        if !members.is_empty() {
            bands.push(band(b.label(), paths, &members));
        }
    }

    let exo: Vec<usize> = all.iter().copied().filter(|&p| labels[p] == Branch::Exogenous).collect();
    let sample_exogenous = if exo.is_empty() {
        None
    } else {
        let mut taus: Vec<f64> = exo.iter().map(|&p| bundle.tau_exo[p]).collect();
        taus.sort_by(|a, b| a.total_cmp(b));
        let median = quantile_sorted(&taus, 0.5);
        exo.iter().copied().min_by(|&a, &b| {
            (bundle.tau_exo[a] - median).abs().total_cmp(&(bundle.tau_exo[b] - median).abs()).then(a.cmp(&b))
        })
    };
    let endo: Vec<usize> = all.iter().copied().filter(|&p| labels[p] != Branch::Exogenous).collect();
    let sample_endogenous = endo.iter().copied().min_by(|&a, &b| {
        let d = |p: usize| -> f64 { (0..paths.x.n_cols).map(|i| (paths.x.get(p, i) - flows.mu_bar[i]).powi(2)).sum() };
        d(a).total_cmp(&d(b)).then(a.cmp(&b))
    });

    PathStats {
        times: grid.times(),
        bands,
        sample_exogenous,
        sample_endogenous,
        concavity: concavity_diagnostic(flows, grid.dt),
        objective,
    }
}

/// Weighted aggregate over entry times of per-path values.
pub fn combine_entry_costs(per_entry: &[Vec<f64>], entries: &EntryGrid) -> Vec<f64> {
    let n = per_entry[0].len();
    (0..n)
        .map(|p| per_entry.iter().zip(&entries.weights).map(|(c, w)| w * c[p]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::PolyFit;
    use crate::paths::dw_by_step;
    use crate::scenario::Preset;
    use crate::stochastics::{sample_bundle, Seed};

    fn flat_policy(s: &Scenario, tau_index: usize, z: f64) -> PolicyField {
        let n = s.numerics.n_steps;
        PolicyField {
            entry_index: 0,
            tau_index,
            z_pre: vec![PolyFit::constant(z); n + 1],
            z_post: vec![PolyFit::constant(z); n + 1],
            // Keep the control map well defined when a test zeroes σ.
            model: ModelParams { sigma: 1.0, ..s.model.clone() },
        }
    }

    fn small(preset: Preset) -> Scenario {
        let mut s = preset.scenario();
        s.numerics.n_paths = 500;
        s.numerics.n_steps = 40;
        s
    }

    #[test]
    fn zero_policy_is_a_random_walk() {
        let s = small(Preset::Default);
        let b = sample_bundle(&s, Seed(1));
        let dw = dw_by_step(&b);
        let grid = TimeGrid::for_scenario(&s);
        let paths = simulate_paths(&flat_policy(&s, 40, 0.0), &b, &dw, &grid, s.model.sigma);
        for p in [0, 17, 499] {
            let mut x = b.iota[p];
            for i in 0..40 {
                assert_eq!(paths.x.get(p, i), x);
                x += s.model.sigma * b.dw_at(p, i);
            }
        }
        assert_eq!(paths.clamped, 0);
    }

    #[test]
    fn price_jump_equals_loss() {
        let s = small(Preset::Default);
        let b = sample_bundle(&s, Seed(2));
        let dw = dw_by_step(&b);
        let data = StepData::new(&s);
        let paths = simulate_paths(&flat_policy(&s, 25, 1.0), &b, &dw, &data.grid, s.model.sigma);
        let flows = MeanFlows::constant(&data.grid, -1.0, 10.0, 25);
        let prices = simulate_price(&paths, &flows, &b, &data, &s);
        for p in 0..b.n_paths {
            let jb = paths.burst_index[p];
            assert!(jb <= 25);
            let drop = prices.pre_jump[p] - prices.price.get(p, jb);
            let scale = prices.pre_jump[p].abs().max(1.0);
            assert!((drop - data.loss[jb]).abs() <= 8.0 * f64::EPSILON * scale, "{drop} vs {}", data.loss[jb]);
            // With β = 1 the price falls exactly to the fundamental value.
            let gap = prices.price.get(p, jb) - prices.fundamental.get(p, jb);
            assert!(gap.abs() <= 8.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn no_bubble_has_no_jump() {
        let s = small(Preset::NoBubble);
        let b = sample_bundle(&s, Seed(2));
        let dw = dw_by_step(&b);
        let data = StepData::new(&s);
        let paths = simulate_paths(&flat_policy(&s, 25, 1.0), &b, &dw, &data.grid, s.model.sigma);
        let flows = MeanFlows::constant(&data.grid, -1.0, 10.0, 25);
        let prices = simulate_price(&paths, &flows, &b, &data, &s);
        for p in 0..b.n_paths {
            assert_eq!(prices.pre_jump[p], prices.price.get(p, paths.burst_index[p]));
        }
    }

    #[test]
    fn idle_trader_keeps_constant_wealth() {
        let mut s = small(Preset::Default);
        s.model.sigma = 1e-300;
        let mut b = sample_bundle(&s, Seed(5));
        b.iota.fill(0.0);
        let dw = dw_by_step(&b);
        let data = StepData::new(&s);
        let paths = simulate_paths(&flat_policy(&s, 40, 0.0), &b, &dw, &data.grid, s.model.sigma);
        let flows = MeanFlows::constant(&data.grid, 0.0, 0.0, 40);
        let prices = simulate_price(&paths, &flows, &b, &data, &s);
        let v = simulate_wealth(&paths, &prices, &flows, &b, &data, &s);
        for p in 0..b.n_paths {
            for i in 0..=40 {
                assert!(v.get(p, i).abs() < 1e-250);
            }
        }
    }

    #[test]
    fn wealth_jump_at_burst() {
        let mut s = small(Preset::Default);
        s.model.sigma = 0.0;
        s.model.sigma0 = 0.0;
        let b = sample_bundle(&s, Seed(6));
        let dw = dw_by_step(&b);
        let data = StepData::new(&s);
        let paths = simulate_paths(&flat_policy(&s, 30, 0.0), &b, &dw, &data.grid, s.model.sigma);
        let flows = MeanFlows::constant(&data.grid, 0.0, 10.0, 30);
        let prices = simulate_price(&paths, &flows, &b, &data, &s);
        let v = simulate_wealth(&paths, &prices, &flows, &b, &data, &s);
        for p in 0..b.n_paths {
            let jb = paths.burst_index[p];
            let x = b.iota[p];
            // Holding x: gains x·γ(t_jb) from the trend, loses x·γ(t_jb) at the burst.
            let before = v.get(p, jb);
            let after = v.get(p, jb + 1);
            assert!((before - x * data.gamma[jb]).abs() < 1e-9 * (1.0 + before.abs()));
            assert!((after + x * data.loss[jb] - before).abs() < 1e-9 * (1.0 + before.abs()));
            assert!(v.get(p, 40).abs() < 1e-9 * (1.0 + before.abs()));
        }
    }

    #[test]
    fn branches_partition_paths() {
        let grid = TimeGrid::new(1.0, 100);
        assert_eq!(branch_of(10, 50, 100), Branch::Exogenous);
        assert_eq!(branch_of(50, 50, 100), Branch::Endogenous);
        assert_eq!(branch_of(101, 50, 100), Branch::Endogenous);
        assert_eq!(branch_of(101, 100, 100), Branch::NoBurst);
        assert_eq!(branch_of(100, 100, 100), Branch::NoBurst);
        assert_eq!(branch_of(99, 100, 100), Branch::Exogenous);
        let s = small(Preset::FearExo);
        let b = sample_bundle(&s, Seed(3));
        for tau in [5, 50, 100] {
            let labels = branches(&b, &grid, tau);
            assert_eq!(labels.len(), b.n_paths);
        }
    }

    #[test]
    fn constant_paths_have_zero_width_bands() {
        let mut s = small(Preset::Default);
        s.model.sigma = 0.0;
        let mut b = sample_bundle(&s, Seed(4));
        b.iota.fill(3.0);
        let dw = dw_by_step(&b);
        let grid = TimeGrid::for_scenario(&s);
        let paths = simulate_paths(&flat_policy(&s, 40, 0.0), &b, &dw, &grid, 0.0);
        let flows = MeanFlows::constant(&grid, 0.0, 3.0, 40);
        let stats = summarize(&paths, &b, &flows, &grid, Estimate { mean: 0.0, se: 0.0, n: 1 });
        for band in &stats.bands {
            for q in &band.quantiles {
                assert!(q.iter().all(|&v| v == 3.0));
            }
        }
        let all = &stats.bands[0];
        for i in 0..all.quantiles[0].len() {
            for w in all.quantiles.windows(2) {
                assert!(w[0][i] <= w[1][i]);
            }
        }
    }

    #[test]
    fn concavity_of_known_profiles() {
        let grid = TimeGrid::new(1.0, 10);
        let mut f = MeanFlows::constant(&grid, 0.0, 10.0, 10);
        // Accelerating selling: θ̄ decreasing ⇒ concave inventory.
        f.theta_bar = (0..=10).map(|i| -(i as f64)).collect();
        assert_eq!(concavity_diagnostic(&f, grid.dt), Some(1.0));
        f.theta_bar = (0..=10).map(|i| -10.0 + i as f64).collect();
        assert_eq!(concavity_diagnostic(&f, grid.dt), Some(0.0));
        f.tau_index = 1;
        assert_eq!(concavity_diagnostic(&f, grid.dt), None);
    }
}
