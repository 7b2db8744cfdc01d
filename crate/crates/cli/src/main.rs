use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use thz_chanest::harness::{
    convergence_trace, delay_profile_report, run_sweep, write_aperture_csv, write_convergence_csv,
    write_delay_profile_csv, write_meta, write_runs_csv, write_summary_csv, write_timing_csv, Meta, Scenario, VERSION,
};
use thz_chanest::SystemConfig;

/// Monte-Carlo channel-estimation experiments.
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Cli {
    /// Scenario JSON (a bare system config is accepted by `delay-profile`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the scenario's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// NMSE versus SNR.
    SweepSnr,
    /// NMSE versus training length.
    #[command(name = "sweep-T")]
    SweepT,
    /// NMSE versus array size.
    SweepArrays,
    /// Per-iteration NMSE and primal residual of the ADMM estimator.
    Convergence,
    /// Delay-selector profile of a few antenna pairs and aperture delay versus carrier.
    DelayProfile {
        /// Antenna pairs as `m,n`; defaults to the two array corners.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(usize, usize)>,
        /// Carrier grid (Hz); defaults to 100 GHz to 1 THz.
        #[arg(long = "carrier")]
        carriers: Vec<f64>,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s.split_once(',').ok_or("expected m,n")?;
    Ok((
        m.trim().parse().map_err(|e| format!("{e}"))?,
        n.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn load_scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli.config.as_ref().context("--config is required")?;
    let mut scn = Scenario::from_json_file(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        scn.base.seed = seed;
    }
    Ok(scn)
}

fn out_dir(cli: &Cli, scn_dir: Option<&Path>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| scn_dir.map(Path::to_path_buf))
        .context("no output directory: pass --out or set out_dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn sweep(cli: &Cli, expect: Option<&str>, name: &str) -> Result<()> {
    let scn = load_scenario(cli)?;
    if let Some(kind) = expect {
        if scn.sweep.column() != kind {
            bail!("scenario sweeps `{}`, this command needs `{kind}`", scn.sweep.column());
        }
    }
    let dir = out_dir(cli, scn.out_dir.as_deref())?;
    let table = run_sweep(&scn, cli.jobs)?;
    write_summary_csv(&table, &dir.join(format!("{name}.csv")))?;
    write_runs_csv(&table, &scn.sweep, &dir.join("runs.csv"))?;
    write_timing_csv(&table, &scn.sweep, &dir.join("timing.csv"))?;
    write_meta(
        &Meta {
            command: name,
            version: VERSION,
            config: &scn.base,
            scenario: Some(&scn),
        },
        &dir.join("meta.json"),
    )?;
    for s in &table.summary {
        log::info!("{} {} {}: {:.2} dB", table.column, s.label, s.method, s.nmse_db());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::SweepSnr => sweep(&cli, Some("snr_db"), "nmse_vs_snr"),
        Command::SweepT => sweep(&cli, Some("T"), "nmse_vs_T"),
        Command::SweepArrays => sweep(&cli, Some("MxN"), "nmse_vs_array"),
        Command::Convergence => {
            let scn = load_scenario(&cli)?;
            let dir = out_dir(&cli, scn.out_dir.as_deref())?;
            let rows = convergence_trace(&scn, cli.jobs)?;
            write_convergence_csv(&rows, scn.sweep.column(), &dir.join("convergence.csv"))?;
            write_meta(
                &Meta {
                    command: "convergence",
                    version: VERSION,
                    config: &scn.base,
                    scenario: Some(&scn),
                },
                &dir.join("meta.json"),
            )?;
            Ok(())
        }
        Command::DelayProfile { pairs, carriers } => {
            let path = cli.config.as_ref().context("--config is required")?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let (mut cfg, scn_dir) = match Scenario::from_json_str(&text, path.parent()) {
                Ok(scn) => (scn.base, scn.out_dir),
                Err(_) => (SystemConfig::from_json_str(&text, path.parent())?, None),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let dir = out_dir(&cli, scn_dir.as_deref())?;
            let pairs = if pairs.is_empty() {
                vec![(0, 0), (cfg.n_rx - 1, cfg.n_tx - 1)]
            } else {
                pairs.clone()
            };
            let carriers = if carriers.is_empty() {
                (1..=10).map(|i| i as f64 * 100e9).collect()
            } else {
                carriers.clone()
            };
            let (profiles, table) = delay_profile_report(&cfg, &pairs, &carriers)?;
            write_delay_profile_csv(&profiles, &dir.join("delay_profile.csv"))?;
            write_aperture_csv(&table, &dir.join("aperture_delay.csv"))?;
            write_meta(
                &Meta {
                    command: "delay-profile",
                    version: VERSION,
                    config: &cfg,
                    scenario: None,
                },
                &dir.join("meta.json"),
            )?;
            Ok(())
        }
    }
}
