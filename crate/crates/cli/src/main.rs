use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use modngd_cli::config::{ExperimentConfig, KEYS, OUT_ENV};
use modngd_cli::report::{report_diff, report_preservation, DIFF_CSV};
use modngd_cli::sweep::{generate_data, run_sweep, train_single, verify_summary, SUMMARY_CSV};
use modngd_cli::CliError;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .args_override_self(true)
        .arg(Arg::new("config").long("config").value_name("PATH").help("TOML file with config keys"))
        .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite existing outputs"));
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .alias(key.replace('_', "-"))
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(*help)
                .help_heading("Config keys"),
        )
    })
}

fn cli() -> Command {
    Command::new("modngd")
        .about("Modified natural gradient descent experiments")
        .after_help(format!("{OUT_ENV} sets the default out_dir."))
        .subcommand_required(true)
        .subcommand(config_args(Command::new("gen-data").about("Write data.csv for every (sigma2, seed) cell")))
        .subcommand(config_args(
            Command::new("train").about("Train one (sigma2, seed) cell into out_dir/<algorithm>/"),
        ))
        .subcommand(config_args(Command::new("sweep").about("Run every cell and write the summary table")))
        .subcommand(
            Command::new("report-diff")
                .about("Per-sigma2 mean and std of ngd - modified_ngd")
                .arg(Arg::new("summaries").required(true).num_args(1..).value_name("SUMMARY_CSV"))
                .arg(Arg::new("out").long("out").value_name("PATH")),
        )
        .subcommand(
            Command::new("report-preservation")
                .about("Fraction of epochs each mode was preserved")
                .arg(Arg::new("run_dir").required(true).value_name("RUN_DIR"))
                .arg(Arg::new("out").long("out").value_name("DIR")),
        )
        .subcommand(
            Command::new("verify-summary")
                .about("Re-derive summary.csv from the per-run files")
                .arg(Arg::new("out_dir").required(true).value_name("OUT_DIR")),
        )
}

fn load_config(m: &ArgMatches) -> Result<(ExperimentConfig, bool), CliError> {
    let overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    let path = m.get_one::<String>("config").map(PathBuf::from);
    Ok((ExperimentConfig::load(path.as_deref(), &overrides)?, m.get_flag("force")))
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    match m.subcommand() {
        Some(("gen-data", m)) => {
            let (cfg, force) = load_config(m)?;
            for p in generate_data(&cfg, force)? {
                println!("{}", p.display());
            }
        }
        Some(("train", m)) => {
            let (cfg, force) = load_config(m)?;
            for o in train_single(&cfg, force)? {
                println!("{}: final test mse {}", o.algorithm, o.final_test_mse);
            }
        }
        Some(("sweep", m)) => {
            let (cfg, force) = load_config(m)?;
            let outcome = run_sweep(&cfg, force)?;
            for a in outcome.summary.aggregates() {
                println!("sigma2={} {}: mean {:.6e} std {:.6e} (n={})", a.sigma2, a.column, a.mean, a.std, a.n);
            }
            let failed = outcome.failures();
            if !failed.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{} runs failed; see {}",
                    failed.len(),
                    cfg.out_dir.join(modngd_cli::sweep::MANIFEST).display()
                )));
            }
        }
        Some(("report-diff", m)) => {
            let paths: Vec<PathBuf> = m.get_many::<String>("summaries").unwrap().map(PathBuf::from).collect();
            let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
            let out = m.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| {
                paths[0].parent().unwrap_or(Path::new(".")).join(DIFF_CSV)
            });
            for r in report_diff(&refs, &out)? {
                println!("sigma2={} mean_diff={:.6e} std_diff={:.6e}", r.sigma2, r.mean_diff, r.std_diff);
            }
        }
        Some(("report-preservation", m)) => {
            let run_dir = PathBuf::from(m.get_one::<String>("run_dir").unwrap());
            let out = m.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| run_dir.clone());
            let p = report_preservation(&run_dir, &out)?;
            println!("{} modes over {} epochs", p.fractions.len(), p.n_preserved.len());
        }
        Some(("verify-summary", m)) => {
            let dir = PathBuf::from(m.get_one::<String>("out_dir").unwrap());
            let worst = verify_summary(&dir)?;
            if worst != 0.0 {
                return Err(CliError::Report(format!(
                    "{} differs from the per-run files by up to {worst:e}",
                    dir.join(SUMMARY_CSV).display()
                )));
            }
            println!("{}: ok", dir.join(SUMMARY_CSV).display());
        }
        _ => unreachable!("subcommand required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
