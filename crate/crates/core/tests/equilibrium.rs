use bubble_core::config::load_scenario;
use bubble_core::equilibrium::{best_response_to, EntryGrid};
use bubble_core::output::write_run_artifacts;
use bubble_core::scenario::EntryKind;
use bubble_core::stochastics::{cache_path, cached_bundle, read_bundle, sample_bundle};
use bubble_core::{picard_solve, Preset, Scenario, Seed};

fn small(preset: Preset) -> Scenario {
    let mut s = preset.scenario();
    s.numerics.n_paths = 3_000;
    s.numerics.n_steps = 50;
    s
}

#[test]
fn equilibrium_is_its_own_best_response() {
    let s = small(Preset::Default);
    let eq = picard_solve(&s).unwrap();
    assert!(eq.report.converged, "residuals {:?}", eq.report.residuals);
    let resp = best_response_to(&eq, &s);
    assert!(eq.flows.residual(&resp.flows, s.model.horizon) < 5.0 * s.numerics.tol);
    assert_eq!(resp.flows.tau_index, eq.flows.tau_index);
}

#[test]
fn flows_are_consistent_with_inventory() {
    let s = small(Preset::Default);
    let eq = picard_solve(&s).unwrap();
    let dt = eq.data.grid.dt;
    let mean_iota = eq.bundle.iota.iter().sum::<f64>() / eq.bundle.n_paths as f64;
    // The returned flows are the damped iterate, exact only up to the tolerance.
    assert!((eq.flows.mu_bar[0] - mean_iota).abs() < s.numerics.tol * mean_iota);
    // μ̄ moves by θ̄ dt per step up to the damped-mixing residual.
    for i in 0..eq.data.grid.n_steps {
        let drift = eq.flows.mu_bar[i + 1] - eq.flows.mu_bar[i];
        assert!((drift - eq.flows.theta_bar[i] * dt).abs() < 0.05, "step {i}");
    }
    assert!(eq.flows.tau_bar > 0.0 && eq.flows.tau_bar < s.model.horizon);
}

#[test]
fn late_entry_equilibrium_converges() {
    let mut s = small(Preset::Default);
    s.entry.kind = EntryKind::AtomPlusUniform;
    s.entry.eta = 0.3;
    s.entry.p0 = 0.5;
    s.numerics.n_entry_grid = Some(4);
    let eq = picard_solve(&s).unwrap();
    assert_eq!(eq.entries.len(), 4);
    assert_eq!(eq.paths.len(), 4);
    assert!(eq.report.converged, "residuals {:?}", eq.report.residuals);
    // Cohorts hold their initial inventory until they enter.
    for (cp, &e) in eq.paths.iter().zip(&eq.entries.indices) {
        assert_eq!(cp.entry_index, e);
        assert_eq!(cp.x.col(e), eq.bundle.iota.as_slice());
    }
    assert!(eq.objective.se > 0.0 && eq.objective.mean.is_finite());
    assert_ne!(eq.entries, EntryGrid::fixed());
}

#[test]
fn seed_reproducibility() {
    let s = small(Preset::BigBubble);
    let a = picard_solve(&s).unwrap();
    let b = picard_solve(&s).unwrap();
    assert_eq!(a.flows, b.flows);
    assert_eq!(a.objective, b.objective);
    let mut other = s.clone();
    other.numerics.seed += 1;
    let c = picard_solve(&other).unwrap();
    assert_ne!(a.flows.theta_bar, c.flows.theta_bar);
}

#[test]
fn artifacts_round_trip() {
    let s = small(Preset::FearExo);
    let eq = picard_solve(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = write_run_artifacts(dir.path(), &eq, &s, vec!["note".into()]).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: bubble_core::output::RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.warnings, vec!["note".to_string()]);
    let b = &report.branch_counts;
    assert_eq!(b.exogenous + b.endogenous + b.none, s.numerics.n_paths);
    let svg = std::fs::read_to_string(dir.path().join("plots.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn bundle_cache_round_trip() {
    let s = small(Preset::Default);
    let dir = tempfile::tempdir().unwrap();
    let fresh = cached_bundle(dir.path(), &s, Seed(5)).unwrap();
    assert!(cache_path(dir.path(), &s, Seed(5)).is_file());
    let again = cached_bundle(dir.path(), &s, Seed(5)).unwrap();
    assert_eq!(fresh, again);
    assert_eq!(read_bundle(&cache_path(dir.path(), &s, Seed(5))).unwrap(), sample_bundle(&s, Seed(5)));
}

#[test]
fn scenario_file_matches_preset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("low.toml");
    std::fs::write(&path, "preset = \"LowImpact\"\n").unwrap();
    let s = load_scenario(&path).unwrap();
    assert_eq!(s, Preset::LowImpact.scenario());
}
