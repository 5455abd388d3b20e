use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};

use ura_core::channel::ChannelModel;
use ura_core::config::{PresetKind, SystemConfig};
use ura_core::runner::{run_scenario, to_csv, to_json, Receiver, RunOptions, Scenario, Sweep};
use ura_core::sbl::write_trace_csv;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Emit {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Model {
    Td,
    Fd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    Snr,
    Ebn0,
}

/// Monte Carlo runner for asynchronous MIMO-OFDM unsourced random access.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// TOML file overriding keys of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: flat, fsf, desk_flat or desk_fsf. Defaults to the desk
    /// preset matching the scenario.
    #[arg(long)]
    preset: Option<String>,
    /// flat_sync, flat_async, fsf_sync or fsf_async.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated sweep values in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "10")]
    snr_list: Vec<f64>,
    /// Read the sweep values as total SNR or as Eb/N0.
    #[arg(long, value_enum, default_value_t = SweepArg::Snr)]
    sweep: SweepArg,
    /// Symbol power in dB held fixed in an Eb/N0 sweep.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    fixed_power: f64,
    #[arg(long, value_enum, default_value_t = Model::Td)]
    channel_model: Model,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    emit: Emit,
    /// Record wall-clock seconds per sweep point.
    #[arg(long)]
    timing: bool,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the decoding graph of trial 0 at the first sweep point as JSON.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
    /// Write per-slot channel estimator traces of trial 0 at the first sweep
    /// point; one CSV per slot with the slot number appended to the stem.
    #[arg(long)]
    sbl_trace: Option<PathBuf>,
    /// Config override `key=value`, repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn build_config(cli: &Cli, scenario: Scenario) -> Result<SystemConfig> {
    let preset = match &cli.preset {
        Some(p) => p.parse::<PresetKind>()?,
        None => match scenario {
            Scenario::FlatSync | Scenario::FlatAsync => PresetKind::DeskFlat,
            Scenario::FsfSync | Scenario::FsfAsync => PresetKind::DeskFsf,
        },
    };
    let mut cfg = SystemConfig::preset(preset);
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = SystemConfig::load_over(&cfg, &text)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg.validated()?)
}

fn slot_path(base: &Path, slot: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}_slot{slot}.{ext}"))
}

fn write_diagnostics(cli: &Cli, cfg: &SystemConfig, opts: &RunOptions) -> Result<()> {
    if cli.dump_graph.is_none() && cli.sbl_trace.is_none() {
        return Ok(());
    }
    let rx = Receiver::new(cfg, opts.scenario)?;
    let (nv, _, _) = rx.noise_of(opts.sweep, opts.points[0]);
    let (_, diag) = rx.run_trial_with(opts.seed, 0, 0, nv, opts.model, true)?;
    let diag = diag.expect("diagnostics requested");
    if let Some(p) = &cli.dump_graph {
        std::fs::write(p, &diag.graph_json).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &cli.sbl_trace {
        if diag.sbl_traces.is_empty() {
            eprintln!("no channel estimator traces: {} uses the closed-form receiver", opts.scenario.name());
        }
        for (t, tr) in diag.sbl_traces.iter().enumerate() {
            write_trace_csv(&slot_path(p, t + 1), tr)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let scenario: Scenario = cli.scenario.parse()?;
    let cfg = build_config(&cli, scenario)?;
    if cli.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    if cli.trials == 0 {
        bail!("--trials must be positive");
    }
    if cli.snr_list.is_empty() {
        bail!("--snr-list needs at least one value");
    }
    let mut opts = RunOptions::new(scenario, cli.trials, cli.seed, cli.snr_list.clone());
    opts.sweep = match cli.sweep {
        SweepArg::Snr => Sweep::Snr,
        SweepArg::Ebn0 => Sweep::Ebn0 {
            power_db: cli.fixed_power,
        },
    };
    opts.model = match cli.channel_model {
        Model::Td => ChannelModel::TimeDomain,
        Model::Fd => ChannelModel::FreqDomain,
    };
    opts.timing = cli.timing;
    if let Some(n) = cli.threads {
        opts.threads = n.max(1);
    }
    write_diagnostics(&cli, &cfg, &opts)?;
    let reports = run_scenario(&cfg, &opts)?;
    let text = match cli.emit {
        Emit::Csv => to_csv(&reports),
        Emit::Json => to_json(&reports),
    };
    match &cli.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
