use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgp_sim::experiment::{report_of, run_offline_training, run_seeds, run_variant, OfflineModel, Report, SeedRun};
use dgp_sim::io::{load_dataset, load_gp, mission_file, read_text, save_dataset, save_gp, save_mission, write_text, DATA_FILE, GP_FILE};
use dgp_sim::{selftest, ExperimentConfig, HarnessError, Result, Variant};

const METRICS_TEXT: &str = "metrics.txt";
const METRICS_JSON: &str = "metrics.json";

/// Dual-GP model predictive control of a simulated quadcopter.
#[derive(Parser, Debug)]
#[command(name = "dgpmpc", version)]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fly the excitation mission and train the long-term GP.
    Train,
    /// Run tracking missions with one controller variant.
    Track {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run baseline-gp, online-gp and dgp over several seeds.
    Compare {
        /// Number of consecutive seeds starting at the configured one.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write every mission log.
        #[arg(long)]
        logs: bool,
    },
    /// Run the oracle checks.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = read_text(path).map_err(|e| HarnessError::Config(e.to_string()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_report(out: &Path, report: &Report) -> Result<()> {
    write_text(&out.join(METRICS_TEXT), &report.table())?;
    write_text(&out.join(METRICS_JSON), &report.to_json())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let model = run_offline_training(cfg)?;
    save_gp(&out.join(GP_FILE), &model.gp)?;
    save_dataset(&out.join(DATA_FILE), &model.data)?;
    if let Some(r) = &model.report {
        println!(
            "trained on {} pairs: elbo {:.3} -> {:.3}",
            model.data.len(),
            r.initial_elbo,
            r.final_elbo
        );
    }
    println!("wrote {} and {}", out.join(GP_FILE).display(), out.join(DATA_FILE).display());
    Ok(())
}

/// The saved model in `out` if both files exist, otherwise a fresh training run.
fn offline_model(cfg: &ExperimentConfig, out: &Path) -> Result<OfflineModel> {
    let (gp_path, data_path) = (out.join(GP_FILE), out.join(DATA_FILE));
    if gp_path.exists() && data_path.exists() {
        Ok(OfflineModel {
            data: load_dataset(&data_path)?,
            gp: load_gp(&gp_path)?,
            report: None,
        })
    } else {
        run_offline_training(cfg)
    }
}

fn track(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let offline = offline_model(cfg, out)?;
    let missions = run_variant(cfg, cfg.variant, &offline)?;
    for m in &missions {
        save_mission(&mission_file(out, "", m), m)?;
        if let Some(t) = m.diverged_at {
            eprintln!("iteration {} diverged at t = {t:.2} s", m.log.iteration);
        }
    }
    let run = SeedRun {
        seed: cfg.seed,
        offline,
        missions: vec![(cfg.variant, missions)],
    };
    let report = report_of(std::slice::from_ref(&run));
    write_report(out, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn compare(cfg: &ExperimentConfig, out: &Path, count: u64, logs: bool) -> Result<()> {
    if count == 0 {
        return Err(HarnessError::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..count).map(|i| cfg.seed + i).collect();
    let runs = run_seeds(cfg, &seeds, &Variant::COMPARED)?;
    if logs {
        for r in &runs {
            for (_, missions) in &r.missions {
                for m in missions {
                    save_mission(&mission_file(out, &format!("seed{}_", r.seed), m), m)?;
                }
            }
        }
    }
    let report = report_of(&runs);
    write_report(out, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Command::Selftest = cli.command {
        let checks = selftest::run_all();
        for c in &checks {
            println!("{c}");
        }
        return Ok(checks.iter().all(|c| c.passed));
    }
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => train(&cfg, &cli.out)?,
        Command::Track { variant, iterations } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(k) = iterations {
                cfg.iterations = *k;
            }
            cfg.validate()?;
            track(&cfg, &cli.out)?;
        }
        Command::Compare { seeds, iterations, logs } => {
            if let Some(k) = iterations {
                cfg.iterations = *k;
            }
            cfg.validate()?;
            compare(&cfg, &cli.out, *seeds, *logs)?;
        }
        Command::Selftest => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
