//! Flat `key = value` scenario files.
//!
//! ```toml
//! preset = "Default"   # optional base, defaults to Default
//! k = 5.0
//! B0 = 2.9957
//! n_paths = 5000
//! ```
//!
//! Any key left out keeps the base preset's value.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scenario::{EntryKind, Preset, Scenario};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub kappa: Option<f64>,
    pub delta: Option<f64>,
    pub phi: Option<f64>,
    pub c: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma0: Option<f64>,
    #[serde(rename = "P0")]
    pub p0_price: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub a_lo: Option<f64>,
    pub a_hi: Option<f64>,
    #[serde(rename = "B0")]
    pub b0: Option<f64>,
    pub ell: Option<f64>,
    pub tc_mult: Option<f64>,
    pub beta: Option<f64>,
    pub k: Option<f64>,
    pub zeta0: Option<f64>,
    pub zeta_slope: Option<f64>,
    pub eta: Option<f64>,
    pub p0: Option<f64>,
    pub entry: Option<EntryKind>,
    pub init_mean: Option<f64>,
    pub init_std: Option<f64>,
    pub truncate_at_zero: Option<bool>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub basis_degree: Option<usize>,
    pub damping: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub n_entry_grid: Option<usize>,
    pub redraw_paths: Option<bool>,
    pub antithetic: Option<bool>,
    pub winsor: Option<f64>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl ScenarioFile {
    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Base preset (or Default) with every present key applied.
    pub fn to_scenario(&self) -> Result<Scenario> {
        let base = match &self.preset {
            Some(p) => Preset::from_name(p)?,
            None => Preset::Default,
        };
        let mut s = base.scenario();
        self.apply(&mut s);
        Ok(s)
    }

    pub fn apply(&self, s: &mut Scenario) {
        set!(self.name.clone() => s.name);
        let m = &mut s.model;
        set!(self.kappa => m.kappa);
        set!(self.delta => m.delta);
        set!(self.phi => m.phi);
        set!(self.c => m.c);
        set!(self.sigma => m.sigma);
        set!(self.sigma0 => m.sigma0);
        set!(self.p0_price => m.p0);
        set!(self.horizon => m.horizon);
        set!(self.a_lo => m.a_lo);
        set!(self.a_hi => m.a_hi);
        set!(self.b0 => s.bubble.b0);
        set!(self.ell => s.bubble.ell);
        set!(self.tc_mult => s.bubble.tc_mult);
        set!(self.beta => s.bubble.beta_const);
        set!(self.k => s.burst.k);
        set!(self.zeta0 => s.burst.zeta0);
        set!(self.zeta_slope => s.burst.zeta_slope);
        set!(self.eta => s.entry.eta);
        set!(self.p0 => s.entry.p0);
        match self.entry {
            Some(kind) => s.entry.kind = kind,
            None if self.eta.is_some() || self.p0.is_some() => {
                s.entry.kind = if s.entry.eta > 0.0 && s.entry.p0 < 1.0 {
                    EntryKind::AtomPlusUniform
                } else {
                    EntryKind::Fixed
                };
            }
            None => {}
        }
        set!(self.init_mean => s.init.mean);
        set!(self.init_std => s.init.std);
        set!(self.truncate_at_zero => s.init.truncate_at_zero);
        let n = &mut s.numerics;
        set!(self.n_steps => n.n_steps);
        set!(self.n_paths => n.n_paths);
        set!(self.basis_degree => n.basis_degree);
        set!(self.damping => n.damping);
        set!(self.tol => n.tol);
        set!(self.max_iter => n.max_iter);
        set!(self.seed => n.seed);
        if self.n_entry_grid.is_some() {
            n.n_entry_grid = self.n_entry_grid;
        }
        set!(self.redraw_paths => n.redraw_paths);
        set!(self.antithetic => n.antithetic);
        if self.winsor.is_some() {
            n.winsor = self.winsor;
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let file = ScenarioFile::parse(&text).map_err(|e| Error::Config { path: path.to_path_buf(), reason: e.to_string() })?;
    file.to_scenario()
}

/// Sets a single numeric scenario key, using the file key names.
pub fn set_param(s: &mut Scenario, key: &str, value: f64) -> Result<()> {
    let text = format!("{key} = {value:?}");
    let parsed = ScenarioFile::parse(&text).or_else(|_| ScenarioFile::parse(&format!("{key} = {}", value as i64)));
    match parsed {
        Ok(f) if key != "preset" && key != "name" && key != "entry" => {
            f.apply(s);
            Ok(())
        }
        _ => Err(Error::InvalidScenario(format!("cannot set `{key}` to {value}"))),
    }
}
