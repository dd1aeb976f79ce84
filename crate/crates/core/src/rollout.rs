//! Autoregressive multi-window forecasting with pseudo-sensors sampled from
//! the previous window's predictions.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{read_file, LeReader, LeWriter};
use crate::dataset::{
    self, boundary_tokens, extract_sensors, Dataset, Normalizer, QueryGrid, QueryToken,
    SensorToken, WindowSpec,
};
use crate::diffusion::{self, token_matrix, DiffusionSchedule, Objective, Predictor};
use crate::error::{Error, Result};
use crate::evaluation::{mse_mae, MetricsRow};
use crate::lwr::{bracket, lerp, DensityField, Scenario, SimConfig};

pub const PREDICTIONS_MAGIC: &[u8; 4] = b"DTPR";
pub const PREDICTIONS_VERSION: u32 = 1;

const TIME_EPS: f64 = 1e-9;

/// Produces the normalised `(rho, v)` state at every query of one window.
pub trait WindowPredictor {
    fn predict_window<R: Rng + ?Sized>(
        &self,
        sensors: &[SensorToken],
        queries: &[QueryToken],
        t_c: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>>;
}

/// A network run through refinement (or a single forward for direct models).
#[derive(Debug)]
pub struct Refiner<'a, P: ?Sized> {
    pub model: &'a P,
    pub schedule: &'a DiffusionSchedule,
    pub objective: Objective,
}

impl<P: ?Sized> Clone for Refiner<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<P: ?Sized> Copy for Refiner<'_, P> {}

impl<P: Predictor + ?Sized> WindowPredictor for Refiner<'_, P> {
    fn predict_window<R: Rng + ?Sized>(
        &self,
        sensors: &[SensorToken],
        queries: &[QueryToken],
        _t_c: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let coords = Array2::from_shape_fn((queries.len(), 2), |(i, c)| {
            if c == 0 {
                queries[i].x
            } else {
                queries[i].t
            }
        });
        let refined = diffusion::refine(
            self.model,
            self.schedule,
            self.objective,
            &token_matrix(sensors.iter().map(SensorToken::features)),
            &coords,
            sensors.len(),
            queries.len(),
            rng,
        )?;
        Ok(refined.x0_hat)
    }
}

/// Ignores the sensors and answers with the simulated field.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'a> {
    pub field: &'a DensityField,
    pub sim: &'a SimConfig,
    pub spec: &'a WindowSpec,
}

impl WindowPredictor for Oracle<'_> {
    fn predict_window<R: Rng + ?Sized>(
        &self,
        _sensors: &[SensorToken],
        queries: &[QueryToken],
        t_c: f64,
        _rng: &mut R,
    ) -> Result<Array2<f64>> {
        let truth = dataset::query_targets(self.field, self.sim, self.spec, t_c, queries);
        Ok(Array2::from_shape_fn((truth.len(), 2), |(i, c)| truth[i][c]))
    }
}

/// Predicted and true state of one window on its evaluation lattice; arrays
/// are `[n_t, n_x]`, normalised, predictions unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrediction {
    pub step: usize,
    pub t_c: f64,
    pub rho: Array2<f64>,
    pub v: Array2<f64>,
    /// The sensor tokens the prediction was conditioned on.
    pub sensors: Vec<SensorToken>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub t_start: f64,
    pub n_steps: usize,
    /// Lattice times per window; positions are the solver cell centres.
    pub grid_nt: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            t_start: 1.0,
            n_steps: 8,
            grid_nt: 20,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, spec: &WindowSpec, total_time: f64) -> Result<()> {
        if self.n_steps == 0 || self.grid_nt == 0 {
            return Err(Error::Config(
                "rollout.n_steps and rollout.grid_nt must be positive".into(),
            ));
        }
        let end = self.t_start + self.n_steps as f64 * spec.delta_pred;
        if self.t_start < spec.delta_past - TIME_EPS || end > total_time + TIME_EPS {
            return Err(Error::Range(format!(
                "rollout from t={} over {} windows needs [{} , {end}] inside [0, {total_time}]",
                self.t_start,
                self.n_steps,
                self.t_start - spec.delta_past
            )));
        }
        Ok(())
    }
}

fn grid_state(pred: &Array2<f64>, grid: &QueryGrid) -> (Array2<f64>, Array2<f64>) {
    let nx = grid.xs.len();
    let rho = Array2::from_shape_fn((grid.n_t, nx), |(j, i)| pred[[j * nx + i, 0]]);
    let v = Array2::from_shape_fn((grid.n_t, nx), |(j, i)| pred[[j * nx + i, 1]]);
    (rho, v)
}

/// Bracketing indices and weight of `x` in the sorted nodes `xs`, constant
/// outside the range.
fn bracket_sorted(xs: &[f64], x: f64) -> (usize, usize, f64) {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return (0, 0, 0.0);
    }
    if x >= xs[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    if xs[lo] == x {
        return (lo, lo, 0.0);
    }
    (lo, hi, (x - xs[lo]) / (xs[hi] - xs[lo]))
}

/// Interior sensor tokens for the window anchored at `t_c`, built from the
/// previous window's predictions, followed by the true boundary tokens.
///
/// The first lattice time of the new past window coincides with the
/// previous anchor, which the prediction grid does not contain; those values
/// come from the previous window's own sensor tokens.
pub fn make_pseudo_sensors(
    prev: &WindowPrediction,
    grid: &QueryGrid,
    sim: &SimConfig,
    spec: &WindowSpec,
    scenario: &Scenario,
    t_c: f64,
) -> Result<Vec<SensorToken>> {
    let covered = (t_c - spec.delta_past - prev.t_c).abs() <= TIME_EPS
        && t_c <= prev.t_c + spec.delta_pred + TIME_EPS;
    if !covered {
        return Err(Error::Contract(format!(
            "predictions for ({}, {}] do not cover the past window of t_c = {t_c}",
            prev.t_c,
            prev.t_c + spec.delta_pred
        )));
    }
    if prev.rho.dim() != (grid.n_t, grid.xs.len()) {
        return Err(Error::Contract("prediction grid does not match the lattice".into()));
    }
    let norm = Normalizer::new(sim, spec);
    let n_past = spec.past_times(prev.t_c).len();
    let dx = sim.dx();
    let mut times = vec![prev.t_c];
    times.extend((0..grid.n_t).map(|j| prev.t_c + grid.t_norm(j) * spec.delta_pred));

    let mut out = Vec::with_capacity(spec.n_sensor_tokens());
    for (p, &xs) in spec.sensor_positions.iter().enumerate() {
        // Sensors read the cell they sit in; look up at its centre.
        let cell = ((xs / dx + 1e-9).floor().max(0.0) as usize).min(sim.nx - 1);
        let x_look = (cell as f64 + 0.5) * dx;
        let (i0, i1, wx) = bracket_sorted(&grid.xs, x_look);
        let anchor = prev
            .sensors
            .get(p * n_past + n_past - 1)
            .filter(|s| (norm.x_inv(s.x) - xs).abs() < 1e-9 && s.t.abs() < 1e-9)
            .ok_or_else(|| {
                Error::Contract("previous sensor tokens do not follow the lattice order".into())
            })?;
        let mut series_rho = vec![anchor.rho];
        let mut series_v = vec![anchor.v];
        for j in 0..grid.n_t {
            series_rho.push(lerp(prev.rho[[j, i0]], prev.rho[[j, i1]], wx));
            series_v.push(lerp(prev.v[[j, i0]], prev.v[[j, i1]], wx));
        }
        for &t in &spec.past_times(t_c) {
            let s = (t - prev.t_c) / (times[1] - times[0]);
            let (n0, n1, wt) = if (s - s.round()).abs() < 1e-9 {
                let n = s.round().max(0.0) as usize;
                let n = n.min(times.len() - 1);
                (n, n, 0.0)
            } else {
                bracket(s, times.len())
            };
            out.push(SensorToken {
                x: norm.x(xs),
                t: norm.past_t(t, t_c),
                rho: lerp(series_rho[n0], series_rho[n1], wt).clamp(0.0, 1.0),
                v: lerp(series_v[n0], series_v[n1], wt).clamp(0.0, 1.0),
            });
        }
    }
    out.extend(boundary_tokens(sim, spec, scenario, t_c));
    Ok(out)
}

/// Forecasts `cfg.n_steps` consecutive windows from `cfg.t_start`; the first
/// uses real sensors, later ones pseudo-sensors.
pub fn rollout<P: WindowPredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    field: &DensityField,
    sim: &SimConfig,
    spec: &WindowSpec,
    scenario: &Scenario,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Vec<WindowPrediction>> {
    cfg.validate(spec, field.end_time())?;
    let grid = QueryGrid::cell_centres(sim, cfg.grid_nt);
    let norm = Normalizer::new(sim, spec);
    let queries = grid.queries(&norm);
    let mut out: Vec<WindowPrediction> = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let t_c = cfg.t_start + step as f64 * spec.delta_pred;
        let started = Instant::now();
        let sensors = match out.last() {
            None => extract_sensors(field, sim, spec, scenario, t_c)?,
            Some(prev) => make_pseudo_sensors(prev, &grid, sim, spec, scenario, t_c)?,
        };
        let pred = predictor
            .predict_window(&sensors, &queries, t_c, rng)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("rollout window {}: {m}", step + 1)),
                other => other,
            })?;
        let (rho, v) = grid_state(&pred, &grid);
        out.push(WindowPrediction {
            step: step + 1,
            t_c,
            rho,
            v,
            sensors,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(out)
}

/// Ground truth on a window's lattice as `(rho, v)`, each `[n_t, n_x]`.
pub fn window_truth(
    field: &DensityField,
    sim: &SimConfig,
    spec: &WindowSpec,
    grid: &QueryGrid,
    t_c: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let truth = grid.truth(field, sim, spec, t_c)?;
    let pred = Array2::from_shape_fn((truth.len(), 2), |(i, c)| truth[i][c]);
    Ok(grid_state(&pred, grid))
}

/// Per-window metrics of a rollout against the simulated field.
pub fn score_rollout(
    sim_id: usize,
    windows: &[WindowPrediction],
    field: &DensityField,
    sim: &SimConfig,
    spec: &WindowSpec,
    grid_nt: usize,
) -> Result<Vec<MetricsRow>> {
    let grid = QueryGrid::cell_centres(sim, grid_nt);
    windows
        .iter()
        .map(|w| {
            let (rho, v) = window_truth(field, sim, spec, &grid, w.t_c)?;
            let (mse, mae) = mse_mae(&[w.rho.view(), w.v.view()], &[rho.view(), v.view()])?;
            Ok(MetricsRow {
                sim_id,
                step: w.step,
                mse,
                mae,
                wall_ms: w.wall_ms,
            })
        })
        .collect()
}

/// Rollouts of one simulation set.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub grid_nt: usize,
    pub nx: usize,
    pub runs: Vec<SimRollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRollout {
    pub sim_id: usize,
    pub t_start: f64,
    pub windows: Vec<WindowPrediction>,
}

/// Per-simulation refinement noise, independent of scheduling.
pub fn rollout_rng(seed: u64, sim_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(dataset::scenario_seed(seed ^ 0x5EED_0F_D7_u64, sim_id))
}

/// Rolls out every simulation in `ids`, on `jobs` workers when `jobs > 1`.
/// `make_predictor` receives the simulation index.
pub fn rollout_many<F, P>(
    make_predictor: F,
    data: &Dataset,
    ids: &[usize],
    sim: &SimConfig,
    spec: &WindowSpec,
    cfg: &RolloutConfig,
    seed: u64,
    jobs: usize,
) -> Result<RolloutSet>
where
    F: Fn(usize) -> P + Sync,
    P: WindowPredictor,
{
    data.check_config(sim)?;
    let run = |&id: &usize| -> Result<SimRollout> {
        let rec = data
            .sims
            .get(id)
            .ok_or_else(|| Error::Range(format!("simulation {id} not in dataset")))?;
        let scenario = data.scenario(id, sim);
        let predictor = make_predictor(id);
        let mut rng = rollout_rng(seed, id);
        let windows = rollout(&predictor, &rec.field, sim, spec, &scenario, cfg, &mut rng)?;
        Ok(SimRollout {
            sim_id: id,
            t_start: cfg.t_start,
            windows,
        })
    };
    let runs = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| ids.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        ids.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(RolloutSet {
        grid_nt: cfg.grid_nt,
        nx: sim.nx,
        runs,
    })
}

impl RolloutSet {
    pub fn score(&self, data: &Dataset, sim: &SimConfig, spec: &WindowSpec) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for run in &self.runs {
            let field = &data
                .sims
                .get(run.sim_id)
                .ok_or_else(|| Error::Range(format!("simulation {} not in dataset", run.sim_id)))?
                .field;
            rows.extend(score_rollout(run.sim_id, &run.windows, field, sim, spec, self.grid_nt)?);
        }
        Ok(rows)
    }

    /// Binary export of the unclamped normalised predictions.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n_windows = self.runs.first().map_or(0, |r| r.windows.len());
        if self.runs.iter().any(|r| r.windows.len() != n_windows) {
            return Err(Error::Contract("rollouts differ in window count".into()));
        }
        let mut w = LeWriter::default();
        w.bytes(PREDICTIONS_MAGIC);
        w.u32(PREDICTIONS_VERSION);
        w.u32(self.runs.len() as u32);
        w.u32(n_windows as u32);
        w.u32(self.grid_nt as u32);
        w.u32(self.nx as u32);
        for run in &self.runs {
            w.u32(run.sim_id as u32);
            w.f64(run.t_start);
            for win in &run.windows {
                for v in win.rho.iter().chain(win.v.iter()) {
                    w.f32(*v as f32);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::default();
        w.buf = self.encode()?;
        w.write_to(path)
    }

    /// Inverse of [`RolloutSet::encode`]; sensor tokens and timings are not
    /// stored and come back empty.
    pub fn decode(bytes: &[u8], path: &Path, delta_pred: f64) -> Result<Self> {
        let mut r = LeReader::new(bytes, path);
        r.expect_magic(PREDICTIONS_MAGIC)?;
        r.expect_version(PREDICTIONS_VERSION)?;
        let n_runs = r.u32()? as usize;
        let n_windows = r.u32()? as usize;
        let grid_nt = r.u32()? as usize;
        let nx = r.u32()? as usize;
        let cells = grid_nt
            .checked_mul(nx)
            .ok_or_else(|| r.error("grid size overflow"))?;
        let mut runs = Vec::with_capacity(n_runs.min(1 << 16));
        for _ in 0..n_runs {
            let sim_id = r.u32()? as usize;
            let t_start = r.f64()?;
            let mut windows = Vec::with_capacity(n_windows.min(1 << 16));
            for step in 0..n_windows {
                let vals = r.f32_vec(2 * cells)?;
                let to_grid = |s: &[f32]| {
                    Array2::from_shape_vec((grid_nt, nx), s.iter().map(|&v| v as f64).collect())
                        .expect("sized slice")
                };
                windows.push(WindowPrediction {
                    step: step + 1,
                    t_c: t_start + step as f64 * delta_pred,
                    rho: to_grid(&vals[..cells]),
                    v: to_grid(&vals[cells..]),
                    sensors: Vec::new(),
                    wall_ms: 0.0,
                });
            }
            runs.push(SimRollout {
                sim_id,
                t_start,
                windows,
            });
        }
        if r.remaining() != 0 {
            return Err(r.error(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { grid_nt, nx, runs })
    }

    pub fn read(path: &Path, delta_pred: f64) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::decode(&bytes, path, delta_pred)
    }
}

/// Per-step mean error as CSV: `step,t_offset,mse,mae`.
pub fn summary_csv(rows: &[MetricsRow], delta_pred: f64) -> Result<String> {
    let curve = crate::evaluation::rollout_curve(rows)?;
    let mut out = String::from("step,t_offset,mse,mae\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.step,
            p.step as f64 * delta_pred,
            p.mse,
            p.mae
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_bracket() {
        let xs = [0.0, 1.0, 3.0];
        assert_eq!(bracket_sorted(&xs, -1.0), (0, 0, 0.0));
        assert_eq!(bracket_sorted(&xs, 1.0), (1, 1, 0.0));
        assert_eq!(bracket_sorted(&xs, 2.0), (1, 2, 0.5));
        assert_eq!(bracket_sorted(&xs, 5.0), (2, 2, 0.0));
    }
}
