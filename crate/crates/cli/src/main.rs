use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lasan::adversary::attempt;
use lasan::crypto::Backend;
use lasan::netsim::{LayerKind, RunResult, Scenario};
use lasan_cli::config::resolve_config_path;
use lasan_cli::output::{hist_csv, histogram, summary_csv, sweep_csv};
use lasan_cli::{exit_code_for, run_one, sweep, write_file, CliError, Experiment, CONFIG_DIR_ENV};

/// Simulate authentication start-up on in-vehicle networks.
#[derive(Debug, Parser)]
#[command(name = "lasan-sim", version)]
struct Args {
    /// Experiment file. Relative paths are also looked up in the config directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory searched for relative --config paths.
    #[arg(long, env = CONFIG_DIR_ENV, hide_env_values = true)]
    config_dir: Option<PathBuf>,
    #[arg(long)]
    layer: Option<LayerKind>,
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated-time limit in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Run the config's sweep instead of a single scenario.
    #[arg(long)]
    sweep: bool,
    /// Also write a stream latency histogram with this many bins.
    #[arg(long, value_name = "BINS")]
    hist: Option<usize>,
    /// Run the named attack script from the config and export its trace.
    #[arg(long, value_name = "NAME", conflicts_with = "sweep")]
    attack: Option<String>,
}

fn load(args: &Args) -> Result<Experiment, CliError> {
    let mut exp = match &args.config {
        Some(p) => Experiment::load(&resolve_config_path(p, args.config_dir.as_deref()))?,
        None => Experiment::default(),
    };
    let run = &mut exp.run;
    if let Some(v) = args.layer {
        run.layer = v;
        exp.sweep.layers = vec![v];
    }
    if let Some(v) = args.backend {
        run.backend = v;
        exp.sweep.backends = vec![v];
    }
    if let Some(v) = args.scenario {
        run.scenario = v;
    }
    if let Some(v) = args.seed {
        run.seed = v;
        exp.sweep.base_seed = v;
    }
    if let Some(v) = args.timeout {
        run.timeout_s = v;
    }
    Ok(exp)
}

fn run_single(args: &Args, exp: &Experiment) -> Result<Vec<RunResult>, CliError> {
    let cfg = exp.run.to_run_config();
    let r = run_one(exp, &cfg)?;
    write_file(
        &args.out_dir,
        "summary.csv",
        &summary_csv(std::slice::from_ref(&r)),
    )?;
    if let Some(bins) = args.hist {
        let lat: Vec<_> = r.stream_latency().into_values().collect();
        write_file(
            &args.out_dir,
            "histogram.csv",
            &hist_csv(&histogram(&lat, bins)),
        )?;
    }
    if let Some(lines) = &r.trace {
        write_file(&args.out_dir, "trace.log", &(lines.join("\n") + "\n"))?;
    }
    eprintln!(
        "{} {} {}: {} ECUs, {} streams, {:.6} s{}",
        r.layer,
        r.backend,
        r.scenario,
        r.n_ecus,
        r.n_streams,
        r.total_startup_s(),
        if r.timed_out { " (timed out)" } else { "" }
    );
    Ok(vec![r])
}

fn run_sweep(args: &Args, exp: &Experiment) -> Result<Vec<RunResult>, CliError> {
    let series = sweep(exp, &exp.sweep)?;
    let mut all = Vec::new();
    for s in series {
        let path = write_file(
            &args.out_dir,
            &s.file_name(exp),
            &sweep_csv(exp.run.scenario, &s.results),
        )?;
        eprintln!("wrote {}", path.display());
        all.extend(s.results);
    }
    write_file(&args.out_dir, "summary.csv", &summary_csv(&all))?;
    Ok(all)
}

fn run_attack(args: &Args, exp: &Experiment, name: &str) -> Result<u8, CliError> {
    let attack = exp.attack(name)?;
    let cfg = exp.run.to_run_config();
    let arch = exp.arch_for(cfg.seed)?;
    let report = attempt(&arch, &cfg, &exp.crypto, attack)?;
    let path = args.out_dir.join(format!("attack_{name}.trace"));
    std::fs::create_dir_all(&args.out_dir)
        .and_then(|_| report.write_trace(&path))
        .map_err(|source| CliError::Write {
            path: path.display().to_string(),
            source,
        })?;
    eprintln!("{name}: {:?}", report.verdict);
    for v in &report.violations {
        eprintln!("  {v}");
    }
    Ok(0)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = load(&args).and_then(|exp| match &args.attack {
        Some(name) => run_attack(&args, &exp, name),
        None if args.sweep => run_sweep(&args, &exp).map(|r| exit_code_for(&r)),
        None => run_single(&args, &exp).map(|r| exit_code_for(&r)),
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
