//! Model primitives: price dynamics, burst thresholds, entry law and costs.
//!
//! The bubble component follows a log-periodic power law without the
//! oscillating term, with critical time `tc_mult * T`:
//!
//! ```text
//! γ(t) = P0 · exp(B0·tc^ℓ − B0·(tc − t)^ℓ) − P0
//! b(t) = γ'(t) = (γ(t) + P0) · ℓ · B0 · (tc − t)^(ℓ−1)
//! ```
//!
//! All functions here are pure in `(t, Scenario)`.

use serde::{Deserialize, Serialize};

use crate::equilibrium::NumericsSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Temporary impact coefficient κ.
    pub kappa: f64,
    /// Permanent impact slope, `g(θ̄) = δ·θ̄`.
    pub delta: f64,
    /// Running inventory penalty φ.
    pub phi: f64,
    /// Terminal inventory penalty c.
    pub c: f64,
    /// Inventory noise σ.
    pub sigma: f64,
    /// Fundamental price noise σ₀. Only affects price and wealth paths.
    pub sigma0: f64,
    /// Initial price P₀.
    pub p0: f64,
    /// Horizon T.
    pub horizon: f64,
    pub a_lo: f64,
    pub a_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleSpec {
    /// LPPL scale B₀; zero disables the bubble.
    pub b0: f64,
    /// Power-law exponent ℓ ∈ (0, 1).
    pub ell: f64,
    /// Critical time as a multiple of the horizon.
    pub tc_mult: f64,
    /// Constant loss amplitude β, used when `beta_table` is empty.
    pub beta_const: f64,
    /// Optional non-decreasing piecewise-linear β(t) as `(t, β)` knots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta_table: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    /// Exogenous intensity slope, `k_t = k·t`.
    pub k: f64,
    pub zeta0: f64,
    pub zeta_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    Fixed,
    AtomPlusUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrySpec {
    /// Awareness window length η.
    pub eta: f64,
    /// Probability mass of entering at t = 0.
    pub p0: f64,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    pub mean: f64,
    pub std: f64,
    pub truncate_at_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub model: ModelParams,
    pub bubble: BubbleSpec,
    pub burst: BurstSpec,
    pub entry: EntrySpec,
    pub init: InitialLaw,
    pub numerics: NumericsSpec,
}

/// Named parameter sets: the base case and four one-factor variations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Default,
    BigBubble,
    NoBubble,
    FearExo,
    LowImpact,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Default,
        Preset::BigBubble,
        Preset::NoBubble,
        Preset::FearExo,
        Preset::LowImpact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "Default",
            Preset::BigBubble => "BigBubble",
            Preset::NoBubble => "NoBubble",
            Preset::FearExo => "FearExo",
            Preset::LowImpact => "LowImpact",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }

    pub fn scenario(self) -> Scenario {
        let ln20 = 20f64.ln();
        let mut s = Scenario::base(self.name());
        match self {
            Preset::Default => {}
            Preset::BigBubble => {
                s.bubble.b0 = 1.3 * ln20;
                s.bubble.ell = 0.65;
            }
            Preset::NoBubble => s.bubble.b0 = 0.0,
            Preset::FearExo => s.burst.k = 5.0,
            Preset::LowImpact => {
                s.model.kappa = 0.1;
                s.model.delta = 0.3;
            }
        }
        s
    }
}

impl Scenario {
    /// The Default row with the fixed parameters shared by every preset.
    fn base(name: &str) -> Self {
        Scenario {
            name: name.to_string(),
            model: ModelParams {
                kappa: 0.5,
                delta: 0.5,
                phi: 0.1,
                c: 10.0,
                sigma: 1.0,
                sigma0: 1.0,
                p0: 10.0,
                horizon: 1.0,
                a_lo: -50.0,
                a_hi: 50.0,
            },
            bubble: BubbleSpec {
                b0: 20f64.ln(),
                ell: 0.5,
                tc_mult: 1.1,
                beta_const: 1.0,
                beta_table: Vec::new(),
            },
            burst: BurstSpec {
                k: 2.0,
                zeta0: 2.0,
                zeta_slope: 1e-6,
            },
            entry: EntrySpec {
                eta: 0.0,
                p0: 1.0,
                kind: EntryKind::Fixed,
            },
            init: InitialLaw {
                mean: 10.0,
                std: 2.0,
                truncate_at_zero: false,
            },
            numerics: NumericsSpec::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(Preset::from_name(name)?.scenario())
    }

    /// Checks every parameter invariant. Returns warnings for conditions
    /// that are allowed but outside the model's assumptions.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let m = &self.model;
        let fail = |msg: String| Err(Error::InvalidScenario(msg));
        let finite = [
            m.kappa, m.delta, m.phi, m.c, m.sigma, m.sigma0, m.p0, m.horizon, m.a_lo, m.a_hi,
            self.bubble.b0, self.bubble.ell, self.bubble.tc_mult, self.bubble.beta_const,
            self.burst.k, self.burst.zeta0, self.burst.zeta_slope, self.entry.eta, self.entry.p0,
            self.init.mean, self.init.std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return fail("all parameters must be finite".into());
        }
        if m.kappa <= 0.0 {
            return fail(format!("kappa must be positive, got {}", m.kappa));
        }
        if m.c <= 0.0 {
            return fail(format!("c must be positive, got {}", m.c));
        }
        if m.phi < 0.0 {
            return fail(format!("phi must be non-negative, got {}", m.phi));
        }
        if m.sigma <= 0.0 {
            return fail(format!("sigma must be positive, got {}", m.sigma));
        }
        if m.sigma0 < 0.0 {
            return fail(format!("sigma0 must be non-negative, got {}", m.sigma0));
        }
        if m.horizon <= 0.0 {
            return fail(format!("T must be positive, got {}", m.horizon));
        }
        if !(m.a_lo <= 0.0 && 0.0 <= m.a_hi) {
            return fail(format!("A = [{}, {}] must contain 0", m.a_lo, m.a_hi));
        }
        let b = &self.bubble;
        if b.b0 < 0.0 {
            return fail(format!("B0 must be non-negative, got {}", b.b0));
        }
        if b.b0 > 0.0 && !(b.ell > 0.0 && b.ell < 1.0) {
            return fail(format!("ell must lie in (0, 1), got {}", b.ell));
        }
        if b.tc_mult <= 1.0 {
            return fail(format!("tc_mult must exceed 1, got {}", b.tc_mult));
        }
        if !(0.0..=1.0).contains(&b.beta_const) {
            return fail(format!("beta must lie in [0, 1], got {}", b.beta_const));
        }
        for w in b.beta_table.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return fail("beta_table must have increasing times and non-decreasing values".into());
            }
        }
        if b.beta_table.iter().any(|&(_, v)| !(0.0..=1.0).contains(&v)) {
            return fail("beta_table values must lie in [0, 1]".into());
        }
        let bu = &self.burst;
        if bu.k < 0.0 {
            return fail(format!("k must be non-negative, got {}", bu.k));
        }
        if bu.zeta0 <= 0.0 {
            return fail(format!("zeta0 must be positive, got {}", bu.zeta0));
        }
        if bu.zeta_slope < 0.0 {
            return fail(format!("zeta_slope must be non-negative, got {}", bu.zeta_slope));
        }
        if bu.zeta_slope == 0.0 {
            warnings.push(
                "zeta_slope = 0: threshold is not strictly increasing, burst time may be discontinuous in the flows"
                    .to_string(),
            );
        }
        let e = &self.entry;
        if !(e.p0 > 0.0 && e.p0 <= 1.0) {
            return fail(format!("entry p0 must lie in (0, 1], got {}", e.p0));
        }
        if e.eta < 0.0 || e.eta > m.horizon {
            return fail(format!("eta must lie in [0, T], got {}", e.eta));
        }
        match e.kind {
            EntryKind::Fixed if e.p0 != 1.0 => {
                return fail("fixed entry requires p0 = 1".into());
            }
            EntryKind::AtomPlusUniform if e.p0 == 1.0 => {
                return fail("atom-plus-uniform entry requires p0 < 1 (use kind = fixed)".into());
            }
            EntryKind::AtomPlusUniform if e.eta <= 0.0 => {
                return fail("atom-plus-uniform entry requires eta > 0".into());
            }
            _ => {}
        }
        if self.init.mean <= 0.0 {
            return fail(format!("initial mean must be positive, got {}", self.init.mean));
        }
        if self.init.std < 0.0 {
            return fail(format!("initial std must be non-negative, got {}", self.init.std));
        }
        if bu.zeta0 >= self.init.mean {
            return fail(format!(
                "zeta0 = {} must be below the mean initial inventory {}",
                bu.zeta0, self.init.mean
            ));
        }
        self.numerics.validate()?;
        Ok(warnings)
    }

    fn critical_time(&self) -> f64 {
        self.bubble.tc_mult * self.model.horizon
    }

    /// Bubble component γ(t) = P⁺_t − Q_t.
    pub fn bubble_component(&self, t: f64) -> f64 {
        let b = &self.bubble;
        if b.b0 == 0.0 {
            return 0.0;
        }
        let tc = self.critical_time();
        let p0 = self.model.p0;
        let exponent = b.b0 * tc.powf(b.ell) - b.b0 * (tc - t).powf(b.ell);
        p0 * exponent.exp_m1()
    }

    /// Bubble trend b(t) = γ'(t).
    pub fn bubble_trend(&self, t: f64) -> f64 {
        let b = &self.bubble;
        if b.b0 == 0.0 {
            return 0.0;
        }
        let tc = self.critical_time();
        let level = self.model.p0 + self.bubble_component(t);
        level * b.ell * b.b0 * (tc - t).powf(b.ell - 1.0)
    }

    /// Loss amplitude β(t).
    pub fn beta(&self, t: f64) -> f64 {
        let table = &self.bubble.beta_table;
        if table.is_empty() {
            return self.bubble.beta_const;
        }
        if t <= table[0].0 {
            return table[0].1;
        }
        for w in table.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        table[table.len() - 1].1
    }

    /// Price drop at a burst occurring at `t`: β(t)·γ(t).
    pub fn burst_loss(&self, t: f64) -> f64 {
        self.beta(t) * self.bubble_component(t)
    }

    /// Endogenous burst threshold ζ_t.
    pub fn threshold(&self, t: f64) -> f64 {
        self.burst.zeta0 + self.burst.zeta_slope * t
    }

    /// Exogenous burst intensity k_t = k·t.
    pub fn exo_intensity(&self, t: f64) -> f64 {
        self.burst.k * t
    }

    /// Probability that the exogenous burst has not happened by `t`.
    pub fn exo_survival(&self, t: f64) -> f64 {
        (-0.5 * self.burst.k * t * t).exp()
    }

    /// Entry-time CDF F(t).
    pub fn entry_cdf(&self, t: f64) -> f64 {
        let e = &self.entry;
        match e.kind {
            EntryKind::Fixed => {
                if t >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EntryKind::AtomPlusUniform => {
                if t < 0.0 {
                    0.0
                } else if t >= e.eta {
                    1.0
                } else {
                    e.p0 + (1.0 - e.p0) * t / e.eta
                }
            }
        }
    }

    /// Running cost f⁰ (`pre_burst`) or f¹ at rate `a`.
    pub fn running_cost(&self, t: f64, x: f64, theta_bar: f64, a: f64, pre_burst: bool) -> Result<f64> {
        let m = &self.model;
        if !(m.a_lo..=m.a_hi).contains(&a) {
            return Err(Error::RateOutOfBounds { rate: a, lo: m.a_lo, hi: m.a_hi });
        }
        let mut f = m.kappa * a * a + m.phi * x * x - x * m.delta * theta_bar;
        if pre_burst {
            f -= x * self.bubble_trend(t);
        }
        Ok(f)
    }

    /// Terminal cost X_{τ*}·β(τ*)·γ(τ*) + c·X_T².
    pub fn terminal_cost(&self, x_at_burst: f64, x_terminal: f64, tau_star: f64) -> f64 {
        x_at_burst * self.burst_loss(tau_star) + self.model.c * x_terminal * x_terminal
    }

    /// Stable hash of the full parameterisation, used to key caches and reports.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("scenario serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn presets_match_table() {
        let ln20 = 20f64.ln();
        let rows = [
            ("Default", 0.5, 0.5, 2.0, ln20, 0.5),
            ("BigBubble", 0.5, 0.5, 2.0, 1.3 * ln20, 0.65),
            ("NoBubble", 0.5, 0.5, 2.0, 0.0, 0.5),
            ("FearExo", 0.5, 0.5, 5.0, ln20, 0.5),
            ("LowImpact", 0.1, 0.3, 2.0, ln20, 0.5),
        ];
        for (name, kappa, delta, k, b0, ell) in rows {
            let s = Scenario::preset(name).unwrap();
            assert_eq!(s.model.kappa, kappa, "{name}");
            assert_eq!(s.model.delta, delta, "{name}");
            assert_eq!(s.burst.k, k, "{name}");
            assert_eq!(s.bubble.b0, b0, "{name}");
            if b0 > 0.0 {
                assert_eq!(s.bubble.ell, ell, "{name}");
            }
            assert_eq!((s.model.sigma, s.model.horizon, s.model.c, s.model.phi, s.model.p0), (1.0, 1.0, 10.0, 0.1, 10.0));
            assert_eq!((s.init.mean, s.init.std), (10.0, 2.0));
            assert!(s.validate().unwrap().is_empty());
        }
        assert!(Scenario::preset("bigbubble").is_ok());
        assert!(matches!(Scenario::preset("Huge"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn bubble_component_closed_form() {
        let s = Preset::Default.scenario();
        assert_eq!(s.bubble_component(0.0), 0.0);
        // Direct evaluation of P0 exp(B0 1.1^0.5 − B0 0.1^0.5) − P0.
        let b0 = 20f64.ln();
        let direct = 10.0 * (b0 * 1.1f64.sqrt() - b0 * 0.1f64.sqrt()).exp() - 10.0;
        assert!((s.bubble_component(1.0) - direct).abs() < 1e-12);
        assert!((direct - 79.77).abs() < 0.05, "{direct}");

        let nb = Preset::NoBubble.scenario();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(nb.bubble_component(t), 0.0);
            assert_eq!(nb.bubble_trend(t), 0.0);
        }
    }

    #[test]
    fn trend_integrates_to_component() {
        for preset in [Preset::Default, Preset::BigBubble] {
            let s = preset.scenario();
            for &t in &[0.1, 0.25, 0.5, 0.75, 1.0] {
                let quad = simpson(|u| s.bubble_trend(u), 0.0, t, 2000);
                let exact = s.bubble_component(t);
                assert!((quad - exact).abs() / exact < 1e-6, "{t}: {quad} vs {exact}");
            }
        }
    }

    #[test]
    fn trend_is_increasing_and_positive() {
        let s = Preset::Default.scenario();
        let grid: Vec<f64> = (0..=1000).map(|i| s.bubble_trend(i as f64 / 1000.0)).collect();
        assert!(grid.iter().all(|&b| b > 0.0));
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn threshold_and_entry_cdf() {
        let mut s = Preset::Default.scenario();
        assert_eq!(s.threshold(0.0), 2.0);
        s.burst.zeta_slope = 1e-6;
        assert!((s.threshold(1.0) - 2.000001).abs() < 1e-15);
        s.burst.zeta_slope = 0.0;
        assert_eq!(s.threshold(0.7), 2.0);
        assert_eq!(s.validate().unwrap().len(), 1);

        assert_eq!(s.entry_cdf(0.0), 1.0);
        assert_eq!(s.entry_cdf(0.9), 1.0);
        s.entry = EntrySpec { eta: 0.5, p0: 0.5, kind: EntryKind::AtomPlusUniform };
        assert_eq!(s.entry_cdf(0.0), 0.5);
        assert!((s.entry_cdf(0.25) - 0.75).abs() < 1e-15);
        assert_eq!(s.entry_cdf(0.5), 1.0);
        assert_eq!(s.entry_cdf(0.8), 1.0);
    }

    #[test]
    fn running_cost_cases() {
        let mut s = Preset::Default.scenario();
        assert_eq!(s.running_cost(0.3, 0.0, 1.0, 0.0, true).unwrap(), 0.0);
        s.model.kappa = 0.5;
        s.model.phi = 0.1;
        assert!((s.running_cost(0.3, 1.0, 0.0, 1.0, false).unwrap() - 0.6).abs() < 1e-15);
        let t = 0.4;
        let diff = s.running_cost(t, 2.0, -3.0, 4.0, true).unwrap() - s.running_cost(t, 2.0, -3.0, 4.0, false).unwrap();
        assert!((diff + 2.0 * s.bubble_trend(t)).abs() < 1e-9);
        assert!(matches!(s.running_cost(t, 1.0, 0.0, 51.0, true), Err(Error::RateOutOfBounds { .. })));
    }

    #[test]
    fn terminal_cost_cases() {
        let nb = Preset::NoBubble.scenario();
        assert_eq!(nb.terminal_cost(5.0, 3.0, 0.4), 90.0);
        let s = Preset::Default.scenario();
        assert_eq!(s.terminal_cost(0.0, 3.0, 0.4), 90.0);
        let gamma1 = s.bubble_component(1.0);
        assert!((s.terminal_cost(1.0, 0.0, 1.0) - gamma1).abs() < 1e-12);
    }

    #[test]
    fn beta_table_interpolates() {
        let mut s = Preset::Default.scenario();
        s.bubble.beta_table = vec![(0.0, 0.5), (1.0, 1.0)];
        assert!((s.beta(0.5) - 0.75).abs() < 1e-15);
        assert_eq!(s.beta(2.0), 1.0);
        assert!(s.validate().is_ok());
        s.bubble.beta_table = vec![(0.0, 0.9), (1.0, 0.5)];
        assert!(s.validate().is_err());
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut s = Preset::Default.scenario();
        s.model.a_lo = 1.0;
        assert!(s.validate().is_err());
        let mut s = Preset::Default.scenario();
        s.burst.zeta0 = 10.0;
        assert!(s.validate().is_err());
        let mut s = Preset::Default.scenario();
        s.entry.p0 = 0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = Preset::Default.scenario();
        let mut b = a.clone();
        assert_eq!(a.hash_hex(), b.hash_hex());
        b.burst.k = 2.5;
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex().len(), 16);
    }
}
