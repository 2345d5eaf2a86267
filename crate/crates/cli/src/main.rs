use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use stagewise::attention::write_checkpoint;
use stagewise::flow::format_float;
use stagewise::flow::TrajectoryLog;
use stagewise::harness::{
    generate_dataset, plot_metric_log, plot_trajectory, prepare_out_dir, run_ablation, run_experiment, CellResult,
    Emitter, ExperimentConfig, MetricLog,
};
use stagewise::markov::write_dataset;
use stagewise::theory::{config_digest, run_all, simulate_full_flow, SimulateConfig, VerifyConfig};
use stagewise::Error;

/// Stagewise learning laboratory: data generation, training, flow
/// simulation and numerical checks.
#[derive(Parser, Debug)]
#[command(name = "stagewise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for concurrent checks and ablation cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a training set for the configured task.
    Generate,
    /// Train the attention model and log probe metrics.
    Train,
    /// Integrate the full regression flow from a near-uniform start.
    SimulateFlow,
    /// Run the numerical checks; exits 1 if any fails.
    Verify,
    /// Train every cell of the configured ablation grid.
    Ablate,
    /// Render SVG plots from a metric or trajectory CSV.
    Plot {
        /// CSV written by `train`, `ablate`, `verify` or `simulate-flow`.
        input: PathBuf,
    },
}

fn read_config(path: &Option<PathBuf>) -> Result<Option<String>> {
    match path {
        None => Ok(None),
        Some(p) => fs::read_to_string(p)
            .map(Some)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())).into()),
    }
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match read_config(&common.config)? {
        Some(text) => ExperimentConfig::from_toml(&text)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn generate(common: &Common) -> Result<ExitCode> {
    let cfg = experiment_config(common)?;
    cfg.validate()?;
    let mut em = Emitter::create(&common.out)?;
    let (spec, batch) = generate_dataset(&cfg.task, cfg.data.train_size, cfg.seed)?;
    write_dataset(&em.path("dataset.mktk"), &spec, &batch)?;
    em.record("dataset.mktk");
    em.text("config.toml", &cfg.to_toml()?)?;
    em.finish("generate", &cfg.digest()?, &[cfg.seed])?;
    println!("wrote {} sequences to {}", batch.count(), common.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(common: &Common) -> Result<ExitCode> {
    let cfg = experiment_config(common)?;
    cfg.validate()?;
    let mut em = Emitter::create(&common.out)?;
    let out = run_experiment(&cfg)?;
    em.metric_log("metrics", &out.log)?;
    em.text("config.toml", &cfg.to_toml()?)?;
    em.text(
        "stages.toml",
        &(toml_lines(&[
            ("threshold", out.stages.threshold.to_string()),
            ("count", out.stages.count.to_string()),
            ("best_val_loss", format_float(out.best_val_loss)),
            ("best_step", out.best_step.to_string()),
            ("flagged_kl", out.flagged_kl.to_string()),
        ]) + &crossing_lines(&out.stages)),
    )?;
    write_checkpoint(&em.path("model.ckpt"), &out.params, cfg.optim.steps as u64)?;
    em.record("model.ckpt");
    em.finish("train", &out.config_digest, &[cfg.seed])?;
    println!(
        "best validation loss {:.6} at step {}; {} stage(s)",
        out.best_val_loss, out.best_step, out.stages.count
    );
    Ok(ExitCode::SUCCESS)
}

fn toml_lines(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn crossing_lines(stages: &stagewise::harness::StageReport) -> String {
    let mut text = String::from("\n[crossing]\n");
    for s in &stages.series {
        match s.crossing {
            Some(c) => text.push_str(&format!("{} = {c}\n", s.name)),
            None => text.push_str(&format!("# {} never crosses\n", s.name)),
        }
    }
    text
}

fn simulate(common: &Common) -> Result<ExitCode> {
    let mut cfg = match read_config(&common.config)? {
        Some(text) => SimulateConfig::from_toml(&text)?,
        None => SimulateConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.setup.seed = seed;
    }
    let mut em = Emitter::create(&common.out)?;
    let (log, summary) = simulate_full_flow(&cfg)?;
    em.trajectory("trajectory", &log)?;
    em.text(
        "summary.toml",
        &toml_lines(&[
            ("t", format_float(summary.t)),
            ("steps", summary.steps.to_string()),
            ("stop", format!("\"{:?}\"", summary.stop)),
            ("rhs_norm", format_float(summary.rhs_norm)),
            ("total_correction", format_float(summary.total_correction)),
            ("flagged_steps", summary.flagged_steps.to_string()),
        ]),
    )?;
    em.finish("simulate-flow", &config_digest(&cfg)?, &[cfg.setup.seed])?;
    println!("integrated to t = {} ({:?})", summary.t, summary.stop);
    Ok(ExitCode::SUCCESS)
}

fn verify(common: &Common) -> Result<ExitCode> {
    let mut cfg = match read_config(&common.config)? {
        Some(text) => VerifyConfig::from_toml(&text)?,
        None => VerifyConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.setup.seed = seed;
    }
    let mut em = Emitter::create(&common.out)?;
    let outcomes = run_all(&cfg)?;
    let mut failed = 0;
    for o in &outcomes {
        let name = &o.report.name;
        em.report(&o.report)?;
        em.trajectory(&format!("{name}_trajectory"), &o.log)?;
        if !o.series.is_empty() {
            let csv: String = std::iter::once("t,deviation\n".to_string())
                .chain(
                    o.series
                        .iter()
                        .map(|(t, d)| format!("{},{}\n", format_float(*t), format_float(*d))),
                )
                .collect();
            em.text(&format!("{name}_deviation.csv"), &csv)?;
        }
        let status = if o.report.passed() { "pass" } else { "FAIL" };
        println!("{status:4} {name} ({:?})", o.report.status);
        for a in o.report.failures() {
            println!("     {} = {} (bound {})", a.name, a.value, a.bound);
        }
        if !o.report.passed() {
            failed += 1;
        }
    }
    em.finish("verify", &config_digest(&cfg)?, &[cfg.setup.seed])?;
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} of {} checks failed", outcomes.len());
        ExitCode::from(1)
    })
}

fn ablate(common: &Common) -> Result<ExitCode> {
    let cfg = experiment_config(common)?;
    cfg.validate()?;
    let mut em = Emitter::create(&common.out)?;
    let out = run_ablation(&cfg)?;
    let mut failed = 0;
    for cell in &out.cells {
        match &cell.result {
            CellResult::Done(o) => em.metric_log(&format!("cell{}", cell.index), &o.log)?,
            CellResult::Failed(msg) => {
                failed += 1;
                eprintln!("cell {} ({}) failed: {msg}", cell.index, cell.settings.label());
            }
        }
    }
    em.text("summary.csv", &out.summary_csv())?;
    em.text("config.toml", &cfg.to_toml()?)?;
    em.finish("ablate", &cfg.digest()?, &[cfg.seed])?;
    print!("{}", out.summary_csv());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn plot(common: &Common, input: &Path) -> Result<ExitCode> {
    prepare_out_dir(&common.out)?;
    let text = fs::read_to_string(input).map_err(|e| Error::Config(format!("cannot read {}: {e}", input.display())))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let plots: Vec<(&str, String)> = if text.starts_with("step,") {
        plot_metric_log(&MetricLog::read_csv(text.as_bytes())?)?.to_vec()
    } else if text.starts_with("t,") {
        plot_trajectory(&TrajectoryLog::read_csv(text.as_bytes())?)?.to_vec()
    } else {
        return Err(Error::Format {
            path: input.to_path_buf(),
            reason: "neither a metric log nor a trajectory".into(),
        }
        .into());
    };
    for (kind, svg) in plots {
        let path = common.out.join(format!("{stem}_{kind}.svg"));
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::Generate => generate(c),
        Command::Train => train(c),
        Command::SimulateFlow => simulate(c),
        Command::Verify => verify(c),
        Command::Ablate => ablate(c),
        Command::Plot { input } => plot(c, input),
    }
}

/// 2 for bad configuration or malformed input files, 3 for anything that
/// aborts a run.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Format { .. }) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
