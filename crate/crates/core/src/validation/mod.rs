//! Independent oracles: the Riccati solution of the bubble-free game,
//! closed-form BSDE cases and sampler distribution checks.

pub mod ode;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_generic, Cloud, PolyFit, RegressionBasis, SolverOptions, TimeGrid};
use crate::equilibrium::{picard_solve, Equilibrium};
use crate::error::{Error, Result};
use crate::paths::dw_by_step;
use crate::scenario::{EntryKind, Preset, Scenario};
use crate::stochastics::{sample_bundle, sample_exogenous, PathBundle, Seed};
use ode::{integrate, integrate_on, OdeTolerance};

/// One row of a validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    /// Passes when `measured < tolerance`.
    pub fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        CheckRow { name: name.into(), measured, tolerance, pass: measured < tolerance }
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<48} {:>12.6} < {}", self.name, self.measured, self.tolerance)
    }
}

/// Quadratic-ansatz solution of the bubble-free game,
/// `v(t, x) = p(t) x² + q(t) x + r(t)` with mean inventory and rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub mu_bar: Vec<f64>,
    pub theta_bar: Vec<f64>,
    /// The linear policy leaves A somewhere on `μ̄ ± 5·sd`, with sd the
    /// standard deviation of inventory under that policy.
    pub clamp_regime: bool,
    /// `|μ̄(0) − E[ι]|` after shooting.
    pub shooting_residual: f64,
}

impl RiccatiSolution {
    pub fn value(&self, i: usize, x: f64) -> f64 {
        self.p[i] * x * x + self.q[i] * x + self.r[i]
    }

    /// `E[v(0, ι)]` for ι with the given mean and standard deviation.
    pub fn expected_value(&self, mean: f64, std: f64) -> f64 {
        self.p[0] * (mean * mean + std * std) + self.q[0] * mean + self.r[0]
    }

    pub fn policy(&self, i: usize, x: f64, kappa: f64) -> f64 {
        -(2.0 * self.p[i] * x + self.q[i]) / (2.0 * kappa)
    }
}

/// Solves the bubble-free game through its Riccati system
///
/// ```text
/// p' = p²/κ − φ                 p(T) = c
/// q' = p q/κ + δ θ̄              q(T) = 0
/// r' = q²/(4κ) − σ² p           r(T) = 0
/// μ̄' = θ̄ = −(2 p μ̄ + q)/(2κ)    μ̄(0) = E[ι]
/// ```
///
/// The (q, μ̄) block is linear, so shooting on `μ̄(T)` from two backward
/// runs is exact up to the integrator tolerance.
pub fn riccati_oracle(s: &Scenario, grid: &TimeGrid) -> Result<RiccatiSolution> {
    if s.bubble.b0 != 0.0 {
        return Err(Error::InvalidScenario("the Riccati oracle requires B0 = 0".into()));
    }
    if s.entry.kind != EntryKind::Fixed && s.entry.p0 < 1.0 {
        return Err(Error::InvalidScenario("the Riccati oracle supports a fixed entry time only".into()));
    }
    let m = &s.model;
    let (kappa, phi, delta, sigma) = (m.kappa, m.phi, m.delta, m.sigma);
    let rhs = move |_t: f64, y: &[f64; 4]| -> [f64; 4] {
        let [p, q, mu, _r] = *y;
        let theta = -(2.0 * p * mu + q) / (2.0 * kappa);
        [p * p / kappa - phi, p * q / kappa + delta * theta, theta, q * q / (4.0 * kappa) - sigma * sigma * p]
    };
    let backward: Vec<f64> = grid.times().into_iter().rev().collect();
    let tol = OdeTolerance::default();
    let run = |mu_t: f64| integrate_on(rhs, &backward, [m.c, 0.0, mu_t, 0.0], tol);
    let a = run(0.0)?.last().unwrap()[2];
    let b = run(1.0)?.last().unwrap()[2];
    if (b - a).abs() < 1e-300 {
        return Err(Error::Ode("degenerate shooting map".into()));
    }
    let mu_t = (s.init.mean - a) / (b - a);
    let mut sol = run(mu_t)?;
    sol.reverse();

    let col = |k: usize| -> Vec<f64> { sol.iter().map(|y| y[k]).collect() };
    let (p, q, mu_bar, r) = (col(0), col(1), col(2), col(3));
    let theta_bar: Vec<f64> = p.iter().zip(&q).zip(&mu_bar).map(|((p, q), mu)| -(2.0 * p * mu + q) / (2.0 * kappa)).collect();
    let times = grid.times();
    let mut out = RiccatiSolution {
        shooting_residual: (mu_bar[0] - s.init.mean).abs(),
        times,
        p,
        q,
        r,
        mu_bar,
        theta_bar,
        clamp_regime: false,
    };
    // Deviation from the mean under the linear feedback: dD = −(p/κ) D dt + σ dW,
    // so Var' = −2 (p/κ) Var + σ²; stepped exactly with p frozen per interval.
    let mut var = s.init.std * s.init.std;
    let mut sd = Vec::with_capacity(out.times.len());
    for i in 0..out.times.len() {
        sd.push(var.sqrt());
        if i + 1 < out.times.len() {
            let dt = out.times[i + 1] - out.times[i];
            let rate = (out.p[i] + out.p[i + 1]) / kappa;
            var = if rate * dt > 1e-12 {
                let decay = (-rate * dt).exp();
                var * decay + sigma * sigma * (1.0 - decay) / rate
            } else {
                var + sigma * sigma * dt
            };
        }
    }
    out.clamp_regime = (0..out.times.len()).any(|i| {
        [-5.0, 5.0].iter().any(|k| {
            let a = out.policy(i, out.mu_bar[i] + k * sd[i], kappa);
            a < m.a_lo || a > m.a_hi
        })
    });
    Ok(out)
}

/// Max error of the integrated `p` against `1/(1/c + (T − t)/κ)` when φ = δ = 0.
pub fn riccati_self_check(kappa: f64, c: f64, horizon: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..=20 {
        let t = horizon * i as f64 / 20.0;
        let p = integrate(|_, y: &[f64; 1]| [y[0] * y[0] / kappa], horizon, [c], t, OdeTolerance::default())?[0];
        let exact = 1.0 / (1.0 / c + (horizon - t) / kappa);
        worst = worst.max((p - exact).abs() / exact.max(1.0));
    }
    Ok(worst)
}

/// Closed-form BSDE cases on `X = W`, `X_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticCase {
    /// ξ = W_T², zero driver: `Y_t = W_t² + (T − t)`.
    SquareTerminal,
    /// ξ = W_T, zero driver: `Y_t = W_t`, `Z ≡ 1`.
    LinearTerminal,
    /// ξ = 1, driver `−kY`: `Y_t = exp(−k (T − t))`.
    Discounted { k: f64 },
}

impl AnalyticCase {
    pub fn terminal(self) -> PolyFit {
        match self {
            AnalyticCase::SquareTerminal => PolyFit::from_raw(vec![0.0, 0.0, 1.0]),
            AnalyticCase::LinearTerminal => PolyFit::from_raw(vec![0.0, 1.0]),
            AnalyticCase::Discounted { .. } => PolyFit::constant(1.0),
        }
    }

    pub fn exact_y(self, t: f64, horizon: f64, w: f64) -> f64 {
        match self {
            AnalyticCase::SquareTerminal => w * w + (horizon - t),
            AnalyticCase::LinearTerminal => w,
            AnalyticCase::Discounted { k } => (-k * (horizon - t)).exp(),
        }
    }
}

pub fn analytic_bsde_cases() -> Vec<AnalyticCase> {
    vec![AnalyticCase::SquareTerminal, AnalyticCase::LinearTerminal, AnalyticCase::Discounted { k: 1.0 }]
}

/// Brownian cloud from 0 on `[0, 1]`.
pub fn brownian_bundle(n_paths: usize, n_steps: usize, seed: Seed) -> PathBundle {
    let mut s = Preset::NoBubble.scenario();
    s.init.mean = 0.0;
    s.init.std = 0.0;
    s.numerics.n_paths = n_paths;
    s.numerics.n_steps = n_steps;
    sample_bundle(&s, seed)
}

/// Fitted Y and Z per step for an analytic case.
pub fn solve_analytic(case: AnalyticCase, bundle: &PathBundle) -> (Vec<PolyFit>, Vec<PolyFit>, Cloud) {
    let dw = dw_by_step(bundle);
    let cloud = Cloud::driftless(&bundle.iota, &dw, 1.0, 0);
    let grid = TimeGrid::new(1.0, bundle.n_steps);
    let opts = SolverOptions { basis: RegressionBasis { degree: 2 }, winsor: None };
    let k = match case {
        AnalyticCase::Discounted { k } => k,
        _ => 0.0,
    };
    let (y, z) = solve_generic(case.terminal(), &cloud, &dw, &grid, 1.0, &opts, |_| k, |_, _, _, _| 0.0);
    (y, z, cloud)
}

/// Max |Z − 1| over the central 99% of states at every step.
pub fn linear_terminal_z_error(bundle: &PathBundle) -> f64 {
    let (_, z, cloud) = solve_analytic(AnalyticCase::LinearTerminal, bundle);
    let mut worst = 0.0f64;
    for (i, zi) in z.iter().enumerate().take(bundle.n_steps) {
        let mut xs = cloud.states.col(i).to_vec();
        xs.sort_by(|a, b| a.total_cmp(b));
        let lo = xs[xs.len() / 200];
        let hi = xs[xs.len() - 1 - xs.len() / 200];
        for j in 0..=20 {
            let x = lo + (hi - lo) * j as f64 / 20.0;
            worst = worst.max((zi.eval(x) - 1.0).abs());
        }
    }
    worst
}

/// The analytic rows of the validation table.
pub fn analytic_rows(n_paths: usize, n_steps: usize, seed: Seed) -> Vec<CheckRow> {
    let bundle = brownian_bundle(n_paths, n_steps, seed);
    let (y, _, _) = solve_analytic(AnalyticCase::SquareTerminal, &bundle);
    let sq = (y[0].eval(0.0) - 1.0).abs();
    let lin = linear_terminal_z_error(&bundle);
    let k = 1.0;
    let (y, _, _) = solve_analytic(AnalyticCase::Discounted { k }, &bundle);
    let grid = TimeGrid::new(1.0, n_steps);
    let disc = (0..=n_steps)
        .map(|i| {
            let exact = AnalyticCase::Discounted { k }.exact_y(grid.t(i), 1.0, 0.0);
            (y[i].eval(0.0) - exact).abs() / exact
        })
        .fold(0.0, f64::max);
    vec![
        CheckRow::below("bsde: xi=W_T^2, |E[Y_0] - T| / T", sq, 0.02),
        CheckRow::below("bsde: xi=W_T, sup |Z - 1|", lin, 0.05),
        CheckRow::below("bsde: xi=1, driver -kY, sup rel. error", disc, 0.01),
    ]
}

/// Moment and survival checks of a sampled bundle against the scenario law.
pub fn distribution_tests(bundle: &PathBundle, s: &Scenario) -> Vec<CheckRow> {
    let n = bundle.n_paths as f64;
    let mean = bundle.iota.iter().sum::<f64>() / n;
    let var = bundle.iota.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut rows = Vec::new();
    if !s.init.truncate_at_zero {
        let se = s.init.std / n.sqrt();
        rows.push(CheckRow::below("sampler: iota mean, |err| / SE", (mean - s.init.mean).abs() / se.max(1e-300), 4.0));
        let se_sd = s.init.std / (2.0 * n).sqrt();
        rows.push(CheckRow::below("sampler: iota std, |err| / SE", (var.sqrt() - s.init.std).abs() / se_sd.max(1e-300), 4.0));
    }
    let m = bundle.dw.len() as f64;
    let dvar = bundle.dw.iter().map(|v| v * v).sum::<f64>() / m;
    let se = bundle.dt * (2.0 / m).sqrt();
    rows.push(CheckRow::below("sampler: dW variance, |err| / SE", (dvar - bundle.dt).abs() / se, 4.0));
    for t in [0.25, 0.5, 1.0] {
        let emp = bundle.tau_exo.iter().filter(|&&tau| tau > t).count() as f64 / n;
        rows.push(CheckRow::below(format!("sampler: bundle survival at t={t}"), (emp - s.exo_survival(t)).abs(), 0.01));
    }
    rows
}

/// Empirical vs. exact survival of the exogenous burst time.
pub fn survival_rows(ks: &[f64], times: &[f64], n: usize, seed: Seed) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for &k in ks {
        let taus = sample_exogenous(k, n, seed);
        for &t in times {
            let emp = taus.iter().filter(|&&tau| tau > t).count() as f64 / n as f64;
            let exact = (-0.5 * k * t * t).exp();
            rows.push(CheckRow::below(format!("sampler: survival k={k} t={t}"), (emp - exact).abs(), 0.01));
        }
    }
    rows
}

/// Solver against the Riccati oracle on a bubble-free scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiComparison {
    pub sup_mu: f64,
    pub sup_theta: f64,
    pub j_bsde: f64,
    pub j_se: f64,
    pub j_ode: f64,
    pub clamp_regime: bool,
    pub converged: bool,
}

impl RiccatiComparison {
    pub fn rows(&self) -> Vec<CheckRow> {
        vec![
            CheckRow::below("riccati: sup |mu_bsde - mu_ode|", self.sup_mu, 0.15),
            CheckRow::below("riccati: sup |theta_bsde - theta_ode|", self.sup_theta, 0.3),
            CheckRow::below("riccati: |J_bsde - J_ode| / SE", (self.j_bsde - self.j_ode).abs() / self.j_se, 3.0),
        ]
    }
}

pub fn compare_with_riccati(eq: &Equilibrium, s: &Scenario) -> Result<RiccatiComparison> {
    let ode = riccati_oracle(s, &eq.data.grid)?;
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    // θ̄ at T is never used by the dynamics; compare on [0, T).
    let n = eq.data.grid.n_steps;
    Ok(RiccatiComparison {
        sup_mu: sup(&eq.flows.mu_bar, &ode.mu_bar),
        sup_theta: sup(&eq.flows.theta_bar[..n], &ode.theta_bar[..n]),
        j_bsde: eq.objective.mean,
        j_se: eq.objective.se,
        j_ode: ode.expected_value(s.init.mean, s.init.std),
        clamp_regime: ode.clamp_regime,
        converged: eq.report.converged,
    })
}

/// Runs the equilibrium solver on `s` (which must be bubble-free) and compares.
pub fn riccati_equivalence(s: &Scenario) -> Result<RiccatiComparison> {
    let eq = picard_solve(s)?;
    compare_with_riccati(&eq, s)
}

/// The complete validation table. `full` adds the equilibrium comparison,
/// which runs the solver on the bubble-free preset.
pub fn validation_suite(seed: u64, full: bool) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let s = Preset::Default.scenario();
    rows.push(CheckRow::below(
        "riccati: integrator vs closed form (phi=delta=0)",
        riccati_self_check(s.model.kappa, s.model.c, s.model.horizon)?,
        1e-7,
    ));
    rows.extend(analytic_rows(100_000, 100, Seed(seed)));
    rows.extend(survival_rows(&[2.0, 5.0], &[0.25, 0.5, 1.0], 100_000, Seed(seed)));
    let mut ds = s.clone();
    ds.numerics.n_paths = 100_000;
    ds.numerics.n_steps = 20;
    rows.extend(distribution_tests(&sample_bundle(&ds, Seed(seed)), &ds));
    if full {
        let mut nb = Preset::NoBubble.scenario();
        nb.numerics.seed = seed;
        rows.extend(riccati_equivalence(&nb)?.rows());
    }
    Ok(rows)
}
