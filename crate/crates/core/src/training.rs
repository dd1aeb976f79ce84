//! Single-step supervised training with Adam, global-norm clipping and
//! per-epoch learning-rate decay.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, Dataset, SensorToken, TrainingSample, WindowSpec};
use crate::diffusion::{self, token_matrix, DiffusionSchedule, NoiseDraw, Objective, Predictor};
use crate::error::{Error, Result};
use crate::lwr::SimConfig;
use crate::model::{Batch, Network};
use crate::nn::{Graph, ParamStore, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Validate and checkpoint every this many epochs (and after the last).
    pub eval_every: usize,
    /// Random queries per held-out window during validation.
    pub val_queries: usize,
    /// Draw fresh query points every epoch; otherwise each window keeps the
    /// queries drawn before the first epoch.
    pub resample_queries: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            lr_decay: 0.98,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 10,
            val_queries: 256,
            resample_queries: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr = {} must be >= 0", self.lr)));
        }
        if self.batch_size < 1 || self.eval_every < 1 || self.val_queries < 1 {
            return Err(Error::Config(
                "train.batch_size, train.eval_every and train.val_queries must be at least 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay = {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let step = T::of(lr / c1);
        let c2 = T::of(c2);
        let eps = T::of(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *w -= step * *m / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Rescales accumulated gradients to global norm at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

/// One optimisation step on a prepared batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    target: &Array2<f64>,
    lr: f64,
    grad_clip: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::new(&model.store);
        let l = diffusion::loss_on_graph(&mut g, &model.net, batch, target)?;
        let loss = g.value(l)[[0, 0]].f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        (loss, g.backward(l)?)
    };
    model.store.zero_grad();
    model.store.accumulate(&grads, T::one());
    clip_gradients(&mut model.store, grad_clip);
    adam.step(&mut model.store, lr);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Held-out single-step error, present on validation epochs.
    pub val: Option<(f64, f64)>,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_val(&self) -> Option<(f64, f64)> {
        self.records.iter().rev().find_map(|r| r.val)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse,val_mae,lr,wall_seconds\n");
        for r in &self.records {
            let (mse, mae) = r
                .val
                .map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, mse, mae, r.lr, r.wall_seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to turn dataset windows into model inputs.
#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub data: &'a Dataset,
    pub sim: &'a SimConfig,
    pub spec: &'a WindowSpec,
    pub schedule: &'a DiffusionSchedule,
    pub objective: Objective,
}

impl Setup<'_> {
    /// `(sim_id, t_c)` for every training window.
    pub fn train_windows(&self) -> Vec<(usize, f64)> {
        let anchors = self.spec.anchors(self.data.total_time);
        self.data
            .train_ids()
            .flat_map(|id| anchors.iter().map(move |&t| (id, t)))
            .collect()
    }

    pub fn sensors(&self, sim_id: usize, t_c: f64) -> Result<Vec<SensorToken>> {
        let field = &self.data.sims[sim_id].field;
        let scenario = self.data.scenario(sim_id, self.sim);
        dataset::extract_sensors(field, self.sim, self.spec, &scenario, t_c)
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    dataset::scenario_seed(seed, stream as usize)
}

/// Held-out single-step `(mse, mae)` of refined predictions at random
/// queries, one window per test simulation with a seed-fixed anchor.
pub fn validate_single_step<P: Predictor + ?Sized>(
    model: &P,
    setup: &Setup<'_>,
    n_queries: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ids: Vec<usize> = setup.data.test_ids().collect();
    if ids.is_empty() {
        return Err(Error::Config("dataset has no held-out simulations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let anchors = setup.spec.anchors(setup.data.total_time);
    let mut sensors = Vec::new();
    let mut coords = Array2::zeros((ids.len() * n_queries, 2));
    let mut truth = Vec::with_capacity(ids.len() * n_queries);
    let mut n_sensors = 0;
    for (b, &id) in ids.iter().enumerate() {
        let t_c = anchors[rand::Rng::random_range(&mut rng, 0..anchors.len())];
        let s = dataset::make_sample(setup.data, setup.sim, setup.spec, id, t_c, n_queries, &mut rng)?;
        n_sensors = s.sensors.len();
        sensors.extend(s.sensors.iter().map(|t| t.features()));
        for (i, q) in s.queries.iter().enumerate() {
            coords[[b * n_queries + i, 0]] = q.x;
            coords[[b * n_queries + i, 1]] = q.t;
        }
        truth.extend(s.targets);
    }
    let refined = diffusion::refine(
        model,
        setup.schedule,
        setup.objective,
        &token_matrix(sensors),
        &coords,
        n_sensors,
        n_queries,
        &mut rng,
    )?;
    let (mut se, mut ae) = (0.0, 0.0);
    for (row, t) in refined.x0_hat.rows().into_iter().zip(&truth) {
        for c in 0..2 {
            let e = row[c] - t[c];
            se += e * e;
            ae += e.abs();
        }
    }
    let n = (truth.len() * 2) as f64;
    Ok((se / n, ae / n))
}

/// Trains `model` in place; `on_epoch` sees every record as it is produced.
pub fn train<T: Real, F: FnMut(&EpochRecord)>(
    model: &mut Network<T>,
    setup: &Setup<'_>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport> {
    cfg.validate()?;
    setup.data.check_config(setup.sim)?;
    let windows = setup.train_windows();
    if windows.is_empty() {
        return Err(Error::Config("dataset has no training windows".into()));
    }
    let n_queries = setup.spec.n_queries_train;
    let sensors: Vec<Vec<SensorToken>> = windows
        .iter()
        .map(|&(id, t)| setup.sensors(id, t))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut fixed: Option<Vec<TrainingSample>> = None;
    if !cfg.resample_queries {
        fixed = Some(draw_samples(setup, &windows, &sensors, n_queries, &mut rng)?);
    }

    let mut adam = Adam::new(&model.store);
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let fresh;
        let samples = match &fixed {
            Some(s) => s,
            None => {
                fresh = draw_samples(setup, &windows, &sensors, n_queries, &mut rng)?;
                &fresh
            }
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let draws: Vec<NoiseDraw> = picked
                .iter()
                .map(|s| NoiseDraw::sample(setup.schedule, s.queries.len(), &mut rng))
                .collect();
            let (batch, target) =
                diffusion::training_batch(&picked, setup.schedule, setup.objective, &draws)?;
            let loss = train_step(model, &mut adam, &batch, &target, lr, cfg.grad_clip).map_err(
                |e| match e {
                    Error::Numeric(m) => Error::Numeric(format!(
                        "{m} in epoch {epoch} batch {batch_id} (k = {:?}, parameter norm {:.4e})",
                        draws.iter().map(|d| d.k).collect::<Vec<_>>(),
                        model.store.value_norm()
                    )),
                    other => other,
                },
            )?;
            if !model.store.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after epoch {epoch} batch {batch_id}"
                )));
            }
            total += loss * picked.len() as f64;
            count += picked.len();
        }
        let last = epoch + 1 == cfg.epochs;
        let val = if (epoch + 1) % cfg.eval_every == 0 || last {
            if let Some(path) = &cfg.checkpoint {
                model.save(path)?;
            }
            if setup.data.n_test() > 0 {
                Some(validate_single_step(model, setup, cfg.val_queries, cfg.seed)?)
            } else {
                None
            }
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / count as f64,
            val,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.records.push(record);
    }
    Ok(report)
}

fn draw_samples(
    setup: &Setup<'_>,
    windows: &[(usize, f64)],
    sensors: &[Vec<SensorToken>],
    n_queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    windows
        .iter()
        .zip(sensors)
        .map(|(&(id, t_c), s)| {
            let field = &setup.data.sims[id].field;
            let (queries, targets) =
                dataset::sample_queries(field, setup.sim, setup.spec, t_c, n_queries, rng)?;
            Ok(TrainingSample {
                sensors: s.clone(),
                queries,
                targets,
                sim_id: id,
                t_c,
            })
        })
        .collect()
}
