use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bubble_core::config::{load_scenario, set_param};
use bubble_core::equilibrium::picard_solve;
use bubble_core::output::{write_run_artifacts, RunReport};
use bubble_core::validation::validation_suite;
use bubble_core::{Preset, Scenario};

#[derive(Parser, Debug)]
#[command(name = "bubble", version, about = "Equilibrium liquidation of a bubble asset")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "BUBBLE_THREADS")]
    threads: Option<usize>,

    /// Log progress of the fixed-point iteration.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one scenario and write its artifacts.
    Run(ScenarioArgs),
    /// Solve a scenario for several values of one parameter.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Scenario key to vary, as in scenario files (k, B0, kappa, ...).
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the oracle checks and print a pass/fail table.
    Validate {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also solve the bubble-free equilibrium and compare with the Riccati oracle.
        #[arg(long)]
        full: bool,
        /// Write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Built-in preset (Default, BigBubble, NoBubble, FearExo, LowImpact).
    #[arg(long, conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario file with flat `key = value` lines.
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    entry_grid: Option<usize>,
    #[arg(long)]
    redraw_paths: bool,
}

impl ScenarioArgs {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = match (&self.preset, &self.scenario) {
            (_, Some(path)) => load_scenario(path).with_context(|| format!("loading {}", path.display()))?,
            (Some(name), None) => Scenario::preset(name)?,
            (None, None) => Preset::Default.scenario(),
        };
        let n = &mut s.numerics;
        if let Some(v) = self.seed {
            n.seed = v;
        }
        if let Some(v) = self.paths {
            n.n_paths = v;
        }
        if let Some(v) = self.steps {
            n.n_steps = v;
        }
        if let Some(v) = self.damping {
            n.damping = v;
        }
        if let Some(v) = self.tol {
            n.tol = v;
        }
        if let Some(v) = self.max_iter {
            n.max_iter = v;
        }
        if self.entry_grid.is_some() {
            n.n_entry_grid = self.entry_grid;
        }
        if self.redraw_paths {
            n.redraw_paths = true;
        }
        Ok(s)
    }
}

fn solve_and_write(s: &Scenario, dir: &Path) -> Result<RunReport> {
    let warnings = s.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let eq = picard_solve(s)?;
    let report = write_run_artifacts(dir, &eq, s, warnings).with_context(|| format!("writing artifacts to {}", dir.display()))?;
    Ok(report)
}

fn print_report(r: &RunReport) {
    println!("scenario     {} ({})", r.scenario, r.scenario_hash);
    println!("objective    J = {:.3} ± {:.3}   (wealth form {:.3} ± {:.3})", r.objective.mean, r.objective.se, r.objective_wealth.mean, r.objective_wealth.se);
    println!("burst        tau_bar = {:.3}", r.tau_bar);
    println!(
        "fixed point  {} after {} iterations, residual {:.2e}",
        if r.converged { "converged" } else { "NOT converged" },
        r.iterations,
        r.residuals.get(r.best_iteration).copied().unwrap_or(f64::NAN)
    );
    println!("clamp rate   {:.4}", r.clamp_rate);
    if let Some(c) = r.concavity {
        println!("concavity    {c:.3}");
    }
}

fn cmd_run(args: &ScenarioArgs) -> Result<ExitCode> {
    let s = args.scenario()?;
    let report = solve_and_write(&s, &args.out)?;
    print_report(&report);
    println!("artifacts    {}", args.out.display());
    Ok(if report.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_sweep(args: &ScenarioArgs, param: &str, values: &[f64]) -> Result<ExitCode> {
    let base = args.scenario()?;
    fs::create_dir_all(&args.out)?;
    let mut summary = String::from("value,J,J_se,tau_bar,concavity,converged,iterations\n");
    let mut flows = String::from("value,t,theta_bar,mu_bar,zeta_t\n");
    let mut all_converged = true;
    let mut concavity = Vec::new();
    for &v in values {
        let mut s = base.clone();
        set_param(&mut s, param, v)?;
        s.name = format!("{} {param}={v}", base.name);
        let dir = args.out.join(format!("{param}={v}"));
        let r = solve_and_write(&s, &dir)?;
        all_converged &= r.converged;
        concavity.push((v, r.concavity));
        let c = r.concavity.map(|c| c.to_string()).unwrap_or_default();
        summary.push_str(&format!("{v},{},{},{},{c},{},{}\n", r.objective.mean, r.objective.se, r.tau_bar, r.converged, r.iterations));
        let text = fs::read_to_string(dir.join("flows.csv"))?;
        for line in text.lines().skip(1) {
            flows.push_str(&format!("{v},{line}\n"));
        }
        println!("{param} = {v:<8} J = {:>9.3} ± {:.3}  tau_bar = {:.3}  concavity = {c:<6}  {}", r.objective.mean, r.objective.se, r.tau_bar, if r.converged { "" } else { "(not converged)" });
    }
    fs::write(args.out.join("sweep.csv"), summary)?;
    fs::write(args.out.join("sweep_flows.csv"), flows)?;
    let known: Vec<f64> = concavity.iter().filter_map(|(_, c)| *c).collect();
    if known.len() > 1 {
        let monotone = known.windows(2).all(|w| w[1] <= w[0]);
        let crosses = known.iter().any(|&c| c > 0.5) && known.iter().any(|&c| c < 0.5);
        println!("concavity non-increasing: {monotone}, crosses 0.5: {crosses}");
    }
    Ok(if all_converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_validate(seed: u64, full: bool, out: Option<&Path>) -> Result<ExitCode> {
    let rows = validation_suite(seed, full)?;
    for r in &rows {
        println!("{r}");
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", rows.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_presets() {
    println!("{:<10} {:>6} {:>6} {:>6} {:>8} {:>6}", "name", "kappa", "delta", "k", "B0", "ell");
    for p in Preset::ALL {
        let s = p.scenario();
        println!(
            "{:<10} {:>6} {:>6} {:>6} {:>8.4} {:>6}",
            p.name(),
            s.model.kappa,
            s.model.delta,
            s.burst.k,
            s.bubble.b0,
            s.bubble.ell
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep { scenario, param, values } => cmd_sweep(scenario, param, values),
        Command::Validate { seed, full, out } => cmd_validate(*seed, *full, out.as_deref()),
        Command::Presets => {
            cmd_presets();
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
