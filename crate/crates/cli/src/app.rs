//! Argument parsing and subcommand orchestration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detno::config::RunConfig;
use detno::dataset::{self, read_dataset, write_dataset, Dataset};
use detno::evaluation::{
    ablation_csv, curve_csv, metrics_csv, rollout_curve, rollout_spectrum, run_ablation,
    spectrum_csv, truth_spectrum, AblationAxis,
};
use detno::model::Network;
use detno::nn::Real;
use detno::rollout::{rollout_many, summary_csv, Refiner, RolloutSet};
use detno::training::{self, Setup};
use detno::{Error, Result};

use crate::checks;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_SELF_TEST: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "detno", version, about = "LWR traffic simulation and DETNO forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Starting point before the config file is applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,

    /// Master seed; falls back to DETNO_SEED, then to the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override a single config key, e.g. `--set train.lr=5e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Worker threads for simulation and rollout.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// 64-bit network arithmetic.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dump_config: bool,

    /// Run the built-in check suite and exit.
    #[arg(long)]
    pub self_test: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Desk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate scenarios and write a dataset file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_sims: Option<usize>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Roll a trained model out over the held-out simulations.
    Rollout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rollout predictions against the simulations.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Per-step summary over all simulations.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Averaged spatial spectrum of rollout densities.
    Spectrum {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value = "spectrum.csv")]
        out: PathBuf,
        /// Also write the spectrum of the simulated densities at the same slices.
        #[arg(long, requires = "data")]
        truth_out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Retrain over hyperparameter grids and report held-out error.
    Ablate {
        #[arg(long, required = true)]
        axis: Vec<String>,
        /// Dataset to train on; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
}

/// Exit status for a pipeline error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Crc { .. }
        | Error::UnknownTensor(_)
        | Error::ShapeMismatch { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let env_seed = std::env::var("DETNO_SEED").ok();
    let cfg = resolve_config(&cli.global, env_seed.as_deref())?;
    if cli.global.dump_config {
        print!("{}", cfg.dump());
        return Ok(0);
    }
    if cli.global.self_test {
        let results = checks::self_test();
        for r in &results {
            println!("{r}");
        }
        return Ok(if results.iter().all(|r| r.passed) { 0 } else { EXIT_SELF_TEST });
    }
    let Some(command) = cli.command else {
        return Err(Error::Config(
            "no subcommand given (generate | train | rollout | eval | spectrum | ablate)".into(),
        ));
    };
    let jobs = cli.global.jobs.max(1);
    match command {
        Command::Generate { out, n_sims } => generate(&cfg, &out, n_sims, jobs),
        Command::Train { data, out, log } => {
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            if cli.global.deterministic {
                train::<f64>(&cfg, &data, &out, &log)
            } else {
                train::<f32>(&cfg, &data, &out, &log)
            }
        }
        Command::Rollout { data, model, out } => {
            if cli.global.deterministic {
                rollout::<f64>(&cfg, &data, &model, &out, jobs)
            } else {
                rollout::<f32>(&cfg, &data, &model, &out, jobs)
            }
        }
        Command::Eval {
            preds,
            data,
            out,
            summary,
        } => eval(&cfg, &preds, &data, &out, summary.as_deref()),
        Command::Spectrum {
            preds,
            out,
            truth_out,
            data,
        } => spectrum(&cfg, &preds, &out, truth_out.as_deref(), data.as_deref()),
        Command::Ablate { axis, data, out } => ablate(&cfg, &axis, data.as_deref(), &out, jobs),
    }?;
    Ok(0)
}

/// Preset, then config file, then seed sources, then `--set` overrides.
pub fn resolve_config(args: &GlobalArgs, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match args.preset {
        Preset::Default => RunConfig::default(),
        Preset::Desk => RunConfig::desk_scale(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DETNO_SEED `{s}` is not an unsigned integer")))?;
    }
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.sync_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let data = read_dataset(path)?;
    data.check_config(&cfg.sim)?;
    Ok(data)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn generate(cfg: &RunConfig, out: &Path, n_sims: Option<usize>, jobs: usize) -> Result<()> {
    let n = n_sims.unwrap_or(cfg.n_sims);
    let data = dataset::build_dataset(n, &cfg.sim, &cfg.window, cfg.seed, jobs)?;
    write_dataset(out, &data)?;
    let size = std::fs::metadata(out).map_err(|e| Error::io(out, e))?.len();
    println!(
        "n_sims {} train {} test {} bytes {size} -> {}",
        data.n_sims(),
        data.n_train,
        data.n_test(),
        out.display()
    );
    Ok(())
}

fn train<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, log: &Path) -> Result<()> {
    let data = load_data(cfg, data)?;
    let schedule = cfg.schedule()?;
    let setup = Setup {
        data: &data,
        sim: &cfg.sim,
        spec: &cfg.window,
        schedule: &schedule,
        objective: cfg.diffusion.objective,
    };
    let mut model = Network::<T>::new(&cfg.model, cfg.seed)?;
    eprintln!(
        "{} parameters, {} training windows, {} arithmetic",
        model.count_parameters(),
        setup.train_windows().len(),
        T::NAME
    );
    let report = training::train(&mut model, &setup, &cfg.train_config(Some(out.into())), |r| {
        match r.val {
            Some((mse, mae)) => eprintln!(
                "epoch {:>4} loss {:.5} val_mse {mse:.5} val_mae {mae:.5} ({:.1}s)",
                r.epoch, r.train_loss, r.wall_seconds
            ),
            None => eprintln!(
                "epoch {:>4} loss {:.5} ({:.1}s)",
                r.epoch, r.train_loss, r.wall_seconds
            ),
        }
    })?;
    report.write_csv(log)
}

fn rollout<T: Real>(cfg: &RunConfig, data: &Path, model: &Path, out: &Path, jobs: usize) -> Result<()> {
    let data = load_data(cfg, data)?;
    let model = Network::<T>::load(&cfg.model, model)?;
    let schedule = cfg.schedule()?;
    let ids: Vec<usize> = data.test_ids().collect();
    let make = |_| Refiner {
        model: &model,
        schedule: &schedule,
        objective: cfg.diffusion.objective,
    };
    let set = rollout_many(
        make,
        &data,
        &ids,
        &cfg.sim,
        &cfg.window,
        &cfg.rollout_config(),
        cfg.seed,
        jobs,
    )?;
    set.write(out)?;
    let rows = set.score(&data, &cfg.sim, &cfg.window)?;
    print!("{}", curve_csv(&rollout_curve(&rows)?));
    Ok(())
}

fn eval(cfg: &RunConfig, preds: &Path, data: &Path, out: &Path, summary: Option<&Path>) -> Result<()> {
    let data = load_data(cfg, data)?;
    let set = RolloutSet::read(preds, cfg.window.delta_pred)?;
    let rows = set.score(&data, &cfg.sim, &cfg.window)?;
    write_text(out, &metrics_csv(&rows))?;
    let summary_text = summary_csv(&rows, cfg.window.delta_pred)?;
    if let Some(path) = summary {
        write_text(path, &summary_text)?;
    }
    print!("{summary_text}");
    Ok(())
}

fn spectrum(
    cfg: &RunConfig,
    preds: &Path,
    out: &Path,
    truth_out: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let set = RolloutSet::read(preds, cfg.window.delta_pred)?;
    write_text(out, &spectrum_csv(&rollout_spectrum(&set, cfg.spectrum_slice)?))?;
    if let (Some(truth_out), Some(data)) = (truth_out, data) {
        let data = load_data(cfg, data)?;
        let rows = truth_spectrum(&set, &data, cfg, cfg.spectrum_slice)?;
        write_text(truth_out, &spectrum_csv(&rows))?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig, axes: &[String], data: Option<&Path>, out: &Path, jobs: usize) -> Result<()> {
    let axes = axes
        .iter()
        .flat_map(|a| a.split(','))
        .map(|a| a.trim().parse())
        .collect::<Result<Vec<AblationAxis>>>()?;
    let data = match data {
        Some(path) => load_data(cfg, path)?,
        None => dataset::build_dataset(cfg.n_sims, &cfg.sim, &cfg.window, cfg.seed, jobs)?,
    };
    let rows = run_ablation(&axes, cfg, &data, |row| match &row.val_mse {
        Ok(mse) => eprintln!("{} = {}: val_mse {mse:.5}", row.axis, row.value),
        Err(e) => eprintln!("{} = {}: failed: {e}", row.axis, row.value),
    });
    write_text(out, &ablation_csv(&rows))
}
