//! Run artifacts: CSV tables, the JSON report, residual log and an SVG plot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bsde::{SolveStats, TimeGrid};
use crate::equilibrium::{Equilibrium, MeanFlows};
use crate::error::Result;
use crate::paths::StepMatrix;
use crate::scenario::Scenario;
use crate::simulate::{branches, simulate_price, simulate_wealth, summarize, wealth_costs, Branch, Estimate, PathStats, PricePaths};

/// Paths written to `paths.csv` besides the two representative ones.
const EXTRA_PATHS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub objective: Estimate,
    /// Objective recomputed from simulated wealth, as a cross-check.
    pub objective_wealth: Estimate,
    pub tau_bar: f64,
    pub converged: bool,
    pub iterations: usize,
    pub best_iteration: usize,
    pub residuals: Vec<f64>,
    pub clamp_rate: f64,
    pub concavity: Option<f64>,
    pub branch_counts: BranchCounts,
    pub solve_stats: SolveStats,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub exogenous: usize,
    pub endogenous: usize,
    pub none: usize,
}

/// Everything derived from an equilibrium for reporting.
pub struct RunSummary {
    pub report: RunReport,
    pub stats: PathStats,
    pub prices: PricePaths,
    pub wealth: StepMatrix,
}

/// Prices, wealth and statistics of the first entry point's paths.
pub fn summarize_run(eq: &Equilibrium, s: &Scenario, warnings: Vec<String>) -> RunSummary {
    let paths = &eq.paths[0];
    let grid = &eq.data.grid;
    let prices = simulate_price(paths, &eq.flows, &eq.bundle, &eq.data, s);
    let wealth = simulate_wealth(paths, &prices, &eq.flows, &eq.bundle, &eq.data, s);
    let objective_wealth = Estimate::from_samples(&wealth_costs(paths, &wealth, &eq.data, s));
    let stats = summarize(paths, &eq.bundle, &eq.flows, grid, eq.objective);
    let mut counts = BranchCounts::default();
    for b in branches(&eq.bundle, grid, eq.flows.tau_index) {
        match b {
            Branch::Exogenous => counts.exogenous += 1,
            Branch::Endogenous => counts.endogenous += 1,
            Branch::NoBurst => counts.none += 1,
        }
    }
    let r = &eq.report;
    let report = RunReport {
        scenario: s.name.clone(),
        scenario_hash: s.hash_hex(),
        seed: s.numerics.seed,
        n_paths: s.numerics.n_paths,
        n_steps: s.numerics.n_steps,
        objective: eq.objective,
        objective_wealth,
        tau_bar: eq.flows.tau_bar,
        converged: r.converged,
        iterations: r.iterations,
        best_iteration: r.best_iteration,
        residuals: r.residuals.clone(),
        clamp_rate: r.clamp_rate,
        concavity: stats.concavity,
        branch_counts: counts,
        solve_stats: r.solve_stats,
        wall_time_s: r.wall_time_s,
        warnings,
    };
    RunSummary { report, stats, prices, wealth }
}

/// `t,theta_bar,mu_bar,zeta_t`.
pub fn write_flows_csv(path: &Path, flows: &MeanFlows, grid: &TimeGrid, s: &Scenario) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "theta_bar", "mu_bar", "zeta_t"])?;
    for i in 0..=grid.n_steps {
        let t = grid.t(i);
        w.write_record([
            t.to_string(),
            flows.theta_bar[i].to_string(),
            flows.mu_bar[i].to_string(),
            s.threshold(t).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (branch, t).
pub fn write_stats_csv(path: &Path, stats: &PathStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "mean_x", "q05", "q25", "q50", "q75", "q95", "mean_a", "branch", "n_paths"])?;
    for band in &stats.bands {
        for (i, t) in stats.times.iter().enumerate() {
            let mut rec = vec![t.to_string(), band.mean_x[i].to_string()];
            rec.extend(band.quantiles.iter().map(|q| q[i].to_string()));
            rec.push(band.mean_a[i].to_string());
            rec.push(band.label.clone());
            rec.push(band.n_paths.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Selected paths of the first entry point: the representative ones, then the first few.
pub fn selected_paths(stats: &PathStats, n_paths: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = stats.sample_exogenous.into_iter().chain(stats.sample_endogenous).collect();
    for p in 0..n_paths.min(EXTRA_PATHS) {
        if !ids.contains(&p) {
            ids.push(p);
        }
    }
    ids
}

/// `path_id,branch,t,x,a,p,v`.
pub fn write_paths_csv(path: &Path, eq: &Equilibrium, summary: &RunSummary) -> Result<()> {
    let grid = &eq.data.grid;
    let paths = &eq.paths[0];
    let labels = branches(&eq.bundle, grid, eq.flows.tau_index);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path_id", "branch", "t", "x", "a", "p", "v"])?;
    for p in selected_paths(&summary.stats, paths.n_paths()) {
        for i in 0..=grid.n_steps {
            w.write_record([
                p.to_string(),
                labels[p].label().to_string(),
                grid.t(i).to_string(),
                paths.x.get(p, i).to_string(),
                paths.a.get(p, i).to_string(),
                summary.prices.price.get(p, i).to_string(),
                summary.wealth.get(p, i).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_residual_log(path: &Path, eq: &Equilibrium) -> Result<()> {
    let mut out = String::from("# iteration residual tau_bar\n");
    for (i, (r, t)) in eq.report.residuals.iter().zip(&eq.report.tau_history).enumerate() {
        writeln!(out, "{i} {r:.6e} {t}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Raw-monomial Z coefficients of every policy, per step.
pub fn write_coefficients(path: &Path, eq: &Equilibrium) -> Result<()> {
    #[derive(Serialize)]
    struct Dump {
        entry_index: usize,
        tau_index: usize,
        z_pre: Vec<Vec<f64>>,
        z_post: Vec<Vec<f64>>,
    }
    let dumps: Vec<Dump> = eq
        .policies
        .iter()
        .map(|p| Dump {
            entry_index: p.entry_index,
            tau_index: p.tau_index,
            z_pre: p.z_pre.iter().map(|f| f.raw_coefficients()).collect(),
            z_post: p.z_post.iter().map(|f| f.raw_coefficients()).collect(),
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&dumps)?)?;
    Ok(())
}

/// Writes every artifact of a run into `dir` and returns the report.
pub fn write_run_artifacts(dir: &Path, eq: &Equilibrium, s: &Scenario, warnings: Vec<String>) -> Result<RunReport> {
    fs::create_dir_all(dir)?;
    let summary = summarize_run(eq, s, warnings);
    write_flows_csv(&dir.join("flows.csv"), &eq.flows, &eq.data.grid, s)?;
    write_stats_csv(&dir.join("stats.csv"), &summary.stats)?;
    write_paths_csv(&dir.join("paths.csv"), eq, &summary)?;
    write_residual_log(&dir.join("residuals.log"), eq)?;
    write_coefficients(&dir.join("coefficients.json"), eq)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary.report)?)?;
    fs::write(dir.join("plots.svg"), render_svg(eq, &summary, s))?;
    Ok(summary.report)
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Static line chart with one panel per entry of `panels`, stacked vertically.
pub fn line_chart(title: &str, panels: &[(String, Vec<Series>)]) -> String {
    let (w, ph, margin) = (720.0, 260.0, 50.0);
    let height = 40.0 + ph * panels.len() as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<text x="{}" y="20" font-size="14">{}</text>"#, margin, escape(title)).unwrap();
    for (k, (name, series)) in panels.iter().enumerate() {
        let top = 40.0 + k as f64 * ph;
        let (x0, x1) = (margin, w - 140.0);
        let (y0, y1) = (top + ph - 30.0, top + 20.0);
        let finite = |v: &&f64| v.is_finite();
        let xmin = series.iter().flat_map(|s| s.xs.iter()).filter(finite).cloned().fold(f64::INFINITY, f64::min);
        let xmax = series.iter().flat_map(|s| s.xs.iter()).filter(finite).cloned().fold(f64::NEG_INFINITY, f64::max);
        let ymin = series.iter().flat_map(|s| s.ys.iter()).filter(finite).cloned().fold(f64::INFINITY, f64::min);
        let ymax = series.iter().flat_map(|s| s.ys.iter()).filter(finite).cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(xmin.is_finite() && ymin.is_finite()) {
            continue;
        }
        let xr = if xmax > xmin { xmax - xmin } else { 1.0 };
        let yr = if ymax > ymin { ymax - ymin } else { 1.0 };
        let px = |x: f64| x0 + (x - xmin) / xr * (x1 - x0);
        let py = |y: f64| y0 + (y - ymin) / yr * (y1 - y0);
        writeln!(svg, r#"<text x="{x0}" y="{}" font-size="12">{}</text>"#, top + 12.0, escape(name)).unwrap();
        writeln!(
            svg,
            r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            x1 - x0,
            y0 - y1
        )
        .unwrap();
        writeln!(svg, r#"<text x="{x0}" y="{}">{xmin:.3}</text>"#, y0 + 14.0).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{xmax:.3}</text>"#, x1, y0 + 14.0).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{ymin:.3}</text>"#, x0 - 4.0, y0).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{ymax:.3}</text>"#, x0 - 4.0, y1 + 8.0).unwrap();
        for (j, s) in series.iter().enumerate() {
            let pts: Vec<String> = s
                .xs
                .iter()
                .zip(&s.ys)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            writeln!(svg, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, s.color, pts.join(" ")).unwrap();
            let ly = y1 + 12.0 + 14.0 * j as f64;
            writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#, x1 + 10.0, x1 + 30.0, s.color).unwrap();
            writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, x1 + 34.0, ly + 4.0, escape(&s.label)).unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(eq: &Equilibrium, summary: &RunSummary, s: &Scenario) -> String {
    let grid = &eq.data.grid;
    let times = grid.times();
    let zeta: Vec<f64> = times.iter().map(|&t| s.threshold(t)).collect();
    let flows = vec![
        Series { label: "mean inventory".into(), color: "#1f77b4", xs: times.clone(), ys: eq.flows.mu_bar.clone() },
        Series { label: "threshold".into(), color: "#d62728", xs: times.clone(), ys: zeta },
    ];
    let speed = vec![Series {
        label: "mean trading rate".into(),
        color: "#2ca02c",
        xs: times[..grid.n_steps].to_vec(),
        ys: eq.flows.theta_bar[..grid.n_steps].to_vec(),
    }];
    let paths = &eq.paths[0];
    let mut inv = Vec::new();
    let mut price = Vec::new();
    for (id, label, color) in [
        (summary.stats.sample_exogenous, "exogenous path", "#ff7f0e"),
        (summary.stats.sample_endogenous, "endogenous path", "#9467bd"),
    ] {
        if let Some(p) = id {
            inv.push(Series { label: label.into(), color, xs: times.clone(), ys: paths.x.path(p) });
            price.push(Series { label: label.into(), color, xs: times.clone(), ys: summary.prices.price.path(p) });
        }
    }
    let title = format!(
        "{}  J = {:.2} ± {:.2}  tau_bar = {:.3}",
        s.name, eq.objective.mean, eq.objective.se, eq.flows.tau_bar
    );
    line_chart(
        &title,
        &[
            ("Mean inventory".to_string(), flows),
            ("Mean trading rate".to_string(), speed),
            ("Inventory, sample paths".to_string(), inv),
            ("Price, sample paths".to_string(), price),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let s = Series { label: "a<b".into(), color: "#000", xs: vec![0.0, 1.0], ys: vec![1.0, f64::NAN] };
        let svg = line_chart("t", &[("p".into(), vec![s])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn flows_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let s = crate::scenario::Preset::Default.scenario();
        let grid = TimeGrid::new(1.0, 4);
        let flows = MeanFlows::constant(&grid, -1.5, 10.0, 4);
        let path = dir.path().join("flows.csv");
        write_flows_csv(&path, &flows, &grid, &s).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,theta_bar,mu_bar,zeta_t");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("0,-1.5,10,2"));
    }
}
