//! Flat `key = value` run configuration with dotted section keys.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::WindowSpec;
use crate::diffusion::{DiffusionSchedule, Objective, ScheduleKind};
use crate::error::{Error, Result};
use crate::evaluation::SpectrumSlice;
use crate::lwr::SimConfig;
use crate::model::ModelConfig;
use crate::rollout::RolloutConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub min_noise_std: f64,
    pub schedule: ScheduleKind,
    pub objective: Objective,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            min_noise_std: 0.09,
            schedule: ScheduleKind::NoiseStd,
            objective: Objective::Diffusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Single source of randomness for generation, initialisation, training
    /// and refinement.
    pub seed: u64,
    pub n_sims: usize,
    pub sim: SimConfig,
    pub window: WindowSpec,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub rollout_t_start: f64,
    pub rollout_grid_nt: usize,
    pub spectrum_slice: SpectrumSlice,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rollout = RolloutConfig::default();
        Self {
            seed: 0,
            n_sims: 1300,
            sim: SimConfig::default(),
            window: WindowSpec::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            rollout_t_start: rollout.t_start,
            rollout_grid_nt: rollout.grid_nt,
            spectrum_slice: SpectrumSlice::default(),
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.n_sims",
    "sim.road_length",
    "sim.total_time",
    "sim.nx",
    "sim.cfl",
    "sim.rho_max",
    "sim.v_max",
    "sim.base_inflow",
    "sim.sample_dt",
    "sim.green",
    "window.delta_past",
    "window.delta_pred",
    "window.sensor_positions",
    "window.sensor_dt",
    "window.n_queries_train",
    "window.rollout_steps",
    "model.d",
    "model.n_blocks",
    "model.n_heads",
    "model.n_experts",
    "model.expert_hidden",
    "model.gating_hidden",
    "model.fourier_n_freq",
    "model.fourier_max_period",
    "model.two_stream",
    "diffusion.K",
    "diffusion.min_noise_std",
    "diffusion.schedule",
    "diffusion.objective",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_decay",
    "train.grad_clip",
    "train.eval_every",
    "train.val_queries",
    "train.resample_queries",
    "rollout.t_start",
    "rollout.grid_nt",
    "eval.spectrum_slice",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Smaller model and query budget used for single-core runs.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.n_sims = 100;
        cfg.model.d = 32;
        cfg.model.expert_hidden = 64;
        cfg.model.gating_hidden = 32;
        cfg.window.n_queries_train = 32;
        cfg.train.epochs = 30;
        cfg.train.eval_every = 30;
        cfg.train.val_queries = 128;
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.n_sims" => self.n_sims = parse(key, v)?,
            "sim.road_length" => self.sim.road_length = parse(key, v)?,
            "sim.total_time" => self.sim.total_time = parse(key, v)?,
            "sim.nx" => self.sim.nx = parse(key, v)?,
            "sim.cfl" => self.sim.cfl = parse(key, v)?,
            "sim.rho_max" => self.sim.rho_max = parse(key, v)?,
            "sim.v_max" => self.sim.v_max = parse(key, v)?,
            "sim.base_inflow" => self.sim.base_inflow = parse(key, v)?,
            "sim.sample_dt" => self.sim.sample_dt = parse(key, v)?,
            "sim.green" => self.sim.green = v.parse()?,
            "window.delta_past" => self.window.delta_past = parse(key, v)?,
            "window.delta_pred" => self.window.delta_pred = parse(key, v)?,
            "window.sensor_positions" => self.window.sensor_positions = parse_list(key, v)?,
            "window.sensor_dt" => self.window.sensor_dt = parse(key, v)?,
            "window.n_queries_train" => self.window.n_queries_train = parse(key, v)?,
            "window.rollout_steps" => self.window.rollout_steps = parse(key, v)?,
            "model.d" => self.model.d = parse(key, v)?,
            "model.n_blocks" => self.model.n_blocks = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.n_experts" => self.model.n_experts = parse(key, v)?,
            "model.expert_hidden" => self.model.expert_hidden = parse(key, v)?,
            "model.gating_hidden" => self.model.gating_hidden = parse(key, v)?,
            "model.fourier_n_freq" => self.model.fourier.n_freq = parse(key, v)?,
            "model.fourier_max_period" => self.model.fourier.max_period = parse(key, v)?,
            "model.two_stream" => self.model.two_stream = parse(key, v)?,
            "diffusion.K" => self.diffusion.steps = parse(key, v)?,
            "diffusion.min_noise_std" => self.diffusion.min_noise_std = parse(key, v)?,
            "diffusion.schedule" => self.diffusion.schedule = v.parse()?,
            "diffusion.objective" => self.diffusion.objective = v.parse()?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.val_queries" => self.train.val_queries = parse(key, v)?,
            "train.resample_queries" => self.train.resample_queries = parse(key, v)?,
            "rollout.t_start" => self.rollout_t_start = parse(key, v)?,
            "rollout.grid_nt" => self.rollout_grid_nt = parse(key, v)?,
            "eval.spectrum_slice" => self.spectrum_slice = v.parse()?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.n_sims" => self.n_sims.to_string(),
            "sim.road_length" => self.sim.road_length.to_string(),
            "sim.total_time" => self.sim.total_time.to_string(),
            "sim.nx" => self.sim.nx.to_string(),
            "sim.cfl" => self.sim.cfl.to_string(),
            "sim.rho_max" => self.sim.rho_max.to_string(),
            "sim.v_max" => self.sim.v_max.to_string(),
            "sim.base_inflow" => self.sim.base_inflow.to_string(),
            "sim.sample_dt" => self.sim.sample_dt.to_string(),
            "sim.green" => self.sim.green.to_string(),
            "window.delta_past" => self.window.delta_past.to_string(),
            "window.delta_pred" => self.window.delta_pred.to_string(),
            "window.sensor_positions" => self
                .window
                .sensor_positions
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "window.sensor_dt" => self.window.sensor_dt.to_string(),
            "window.n_queries_train" => self.window.n_queries_train.to_string(),
            "window.rollout_steps" => self.window.rollout_steps.to_string(),
            "model.d" => self.model.d.to_string(),
            "model.n_blocks" => self.model.n_blocks.to_string(),
            "model.n_heads" => self.model.n_heads.to_string(),
            "model.n_experts" => self.model.n_experts.to_string(),
            "model.expert_hidden" => self.model.expert_hidden.to_string(),
            "model.gating_hidden" => self.model.gating_hidden.to_string(),
            "model.fourier_n_freq" => self.model.fourier.n_freq.to_string(),
            "model.fourier_max_period" => self.model.fourier.max_period.to_string(),
            "model.two_stream" => self.model.two_stream.to_string(),
            "diffusion.K" => self.diffusion.steps.to_string(),
            "diffusion.min_noise_std" => self.diffusion.min_noise_std.to_string(),
            "diffusion.schedule" => self.diffusion.schedule.to_string(),
            "diffusion.objective" => self.diffusion.objective.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.lr_decay" => self.train.lr_decay.to_string(),
            "train.grad_clip" => self.train.grad_clip.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.val_queries" => self.train.val_queries.to_string(),
            "train.resample_queries" => self.train.resample_queries.to_string(),
            "rollout.t_start" => self.rollout_t_start.to_string(),
            "rollout.grid_nt" => self.rollout_grid_nt.to_string(),
            "eval.spectrum_slice" => self.spectrum_slice.to_string(),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.sync_seed();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Propagates `seed` into the module configurations that carry one.
    pub fn sync_seed(&mut self) {
        self.sim.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.window.validate(&self.sim)?;
        self.model.validate()?;
        self.schedule()?;
        self.train.validate()?;
        self.rollout_config().validate(&self.window, self.sim.total_time)?;
        if self.n_sims == 0 {
            return Err(Error::Config("data.n_sims must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(
            self.diffusion.steps,
            self.diffusion.min_noise_std,
            self.diffusion.schedule,
        )
    }

    pub fn train_config(&self, checkpoint: Option<std::path::PathBuf>) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            checkpoint,
            ..self.train.clone()
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            t_start: self.rollout_t_start,
            n_steps: self.window.rollout_steps,
            grid_nt: self.rollout_grid_nt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::desk_scale();
        cfg.seed = 42;
        cfg.diffusion.objective = Objective::Direct;
        cfg.window.sensor_positions = vec![0.25, 1.0 / 3.0];
        cfg.sync_seed();
        let back = RunConfig::parse(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.dump().lines().count(), KEYS.len());
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::parse("model.width = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("model.d = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn parse_is_order_independent() {
        let a = RunConfig::parse("model.d = 32\n# note\ntrain.lr = 0.01\n").unwrap();
        let b = RunConfig::parse("train.lr = 0.01\n\nmodel.d = 32").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.d, 32);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk_scale().validate().unwrap();
    }
}
