//! v-parameterised diffusion over the query state channels: noise schedule,
//! corruption, velocity targets, the training loss and deterministic DDIM
//! refinement.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::model::{Batch, OUT_DIM, TOKEN_DIM};
use crate::nn::{Graph, Real, Var};

/// Largest diffusion timestep fed to the embedding.
pub const TAU_MAX: f64 = 1000.0;

/// How the per-step noise level is read from `s^((K - k) / K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    /// As the noise standard deviation.
    #[default]
    NoiseStd,
    /// As the noise variance.
    NoiseVariance,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NoiseStd => "noise_std",
            Self::NoiseVariance => "noise_variance",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_std" => Ok(Self::NoiseStd),
            "noise_variance" => Ok(Self::NoiseVariance),
            _ => Err(Error::Config(format!(
                "unknown schedule kind `{s}` (noise_std | noise_variance)"
            ))),
        }
    }
}

/// What the network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Velocity of the corrupted state, refined by DDIM.
    #[default]
    Diffusion,
    /// The clean state in one forward pass; query state channels are zero.
    Direct,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Diffusion => "diffusion",
            Self::Direct => "direct",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "direct" => Ok(Self::Direct),
            _ => Err(Error::Config(format!(
                "unknown objective `{s}` (diffusion | direct)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    min_noise_std: f64,
    kind: ScheduleKind,
    sigma: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, min_noise_std: f64, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("diffusion.K must be at least 1".into()));
        }
        if !(min_noise_std > 0.0 && min_noise_std < 1.0) {
            return Err(Error::Config(format!(
                "diffusion.min_noise_std = {min_noise_std} must lie in (0, 1)"
            )));
        }
        let sigma: Vec<f64> = (0..=steps)
            .map(|k| {
                let level = min_noise_std.powf((steps - k) as f64 / steps as f64);
                match kind {
                    ScheduleKind::NoiseStd => level,
                    ScheduleKind::NoiseVariance => level.sqrt(),
                }
            })
            .collect();
        let sqrt_alpha_bar = sigma.iter().map(|s| (1.0 - s * s).sqrt()).collect();
        Ok(Self {
            steps,
            min_noise_std,
            kind,
            sigma,
            sqrt_alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn min_noise_std(&self) -> f64 {
        self.min_noise_std
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.steps {
            return Err(Error::Range(format!(
                "diffusion step {k} outside 0..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Noise standard deviation `sqrt(1 - alpha_bar_k)`.
    pub fn sigma(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.sigma[k])
    }

    pub fn sqrt_alpha_bar(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.sqrt_alpha_bar[k])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(1.0 - self.sigma[k] * self.sigma[k])
    }

    /// Embedding timestep `k * 1000 / K`.
    pub fn tau_of(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(k as f64 * TAU_MAX / self.steps as f64)
    }

    fn coefficients(&self, k: usize) -> Result<(f64, f64)> {
        Ok((self.sqrt_alpha_bar(k)?, self.sigma(k)?))
    }

    /// `sqrt(ab_k) y + sqrt(1 - ab_k) eps`.
    pub fn corrupt(&self, y: ArrayView2<f64>, k: usize, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
        same_shape(y, eps, "corrupt")?;
        let (a, s) = self.coefficients(k)?;
        Ok(Zip::from(&y).and(&eps).map_collect(|&y, &e| a * y + s * e))
    }

    /// `sqrt(ab_k) eps - sqrt(1 - ab_k) y`.
    pub fn v_target(&self, y: ArrayView2<f64>, eps: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        same_shape(y, eps, "v_target")?;
        let (a, s) = self.coefficients(k)?;
        Ok(Zip::from(&y).and(&eps).map_collect(|&y, &e| a * e - s * y))
    }

    /// Clean state implied by a corrupted state and a velocity.
    pub fn reconstruct(&self, x_k: ArrayView2<f64>, nu: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        same_shape(x_k, nu, "reconstruct")?;
        let (a, s) = self.coefficients(k)?;
        Ok(Zip::from(&x_k).and(&nu).map_collect(|&x, &v| a * x - s * v))
    }

    /// Deterministic DDIM update from step `k` to `k - 1`.
    pub fn ddim_step(&self, x_k: ArrayView2<f64>, nu_hat: ArrayView2<f64>, k: usize) -> Result<DdimStep> {
        if k == 0 {
            return Err(Error::Range("DDIM step needs k >= 1".into()));
        }
        same_shape(x_k, nu_hat, "ddim_step")?;
        let (a, s) = self.coefficients(k)?;
        let (a_prev, s_prev) = self.coefficients(k - 1)?;
        let x0_hat = Zip::from(&x_k).and(&nu_hat).map_collect(|&x, &v| a * x - s * v);
        let eps_hat = Zip::from(&x_k).and(&nu_hat).map_collect(|&x, &v| s * x + a * v);
        let x_prev = Zip::from(&x0_hat)
            .and(&eps_hat)
            .map_collect(|&x0, &e| a_prev * x0 + s_prev * e);
        Ok(DdimStep {
            x0_hat,
            eps_hat,
            x_prev,
        })
    }
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimStep {
    pub x0_hat: Array2<f64>,
    pub eps_hat: Array2<f64>,
    pub x_prev: Array2<f64>,
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Noise level and Gaussian draw for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub k: usize,
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(schedule: &DiffusionSchedule, n_queries: usize, rng: &mut R) -> Self {
        let k = rng.random_range(0..=schedule.steps());
        Self {
            k,
            eps: standard_normal(n_queries, OUT_DIM, rng),
        }
    }
}

pub fn token_matrix<I: IntoIterator<Item = [f64; 4]>>(tokens: I) -> Array2<f64> {
    let flat: Vec<f64> = tokens.into_iter().flatten().collect();
    let n = flat.len() / TOKEN_DIM;
    Array2::from_shape_vec((n, TOKEN_DIM), flat).expect("whole tokens")
}

/// Model inputs and regression targets for a set of examples.
///
/// Under [`Objective::Diffusion`] each example's state channels are corrupted
/// at its draw's step and the target is the velocity; under
/// [`Objective::Direct`] draws are ignored, states are zero and the target is
/// the clean state.
pub fn training_batch(
    samples: &[&TrainingSample],
    schedule: &DiffusionSchedule,
    objective: Objective,
    draws: &[NoiseDraw],
) -> Result<(Batch, Array2<f64>)> {
    let Some(first) = samples.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let (ns, nq) = (first.sensors.len(), first.queries.len());
    if objective == Objective::Diffusion && draws.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} noise draws for {} samples",
            draws.len(),
            samples.len()
        )));
    }
    let mut sensors = Vec::with_capacity(samples.len() * ns);
    let mut queries = Array2::zeros((samples.len() * nq, TOKEN_DIM));
    let mut target = Array2::zeros((samples.len() * nq, OUT_DIM));
    let mut taus = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        if s.sensors.len() != ns || s.queries.len() != nq || s.targets.len() != nq {
            return Err(Error::Contract(format!(
                "sample {b} has {} sensors / {} queries, batch expects {ns} / {nq}",
                s.sensors.len(),
                s.queries.len()
            )));
        }
        sensors.extend(s.sensors.iter().map(|t| t.features()));
        let y = Array2::from_shape_fn((nq, OUT_DIM), |(i, c)| s.targets[i][c]);
        let (state, tgt, tau) = match objective {
            Objective::Diffusion => {
                let d = &draws[b];
                (
                    schedule.corrupt(y.view(), d.k, d.eps.view())?,
                    schedule.v_target(y.view(), d.eps.view(), d.k)?,
                    schedule.tau_of(d.k)?,
                )
            }
            Objective::Direct => (Array2::zeros((nq, OUT_DIM)), y, 0.0),
        };
        for (i, q) in s.queries.iter().enumerate() {
            let row = b * nq + i;
            queries[[row, 0]] = q.x;
            queries[[row, 1]] = q.t;
            queries[[row, 2]] = state[[i, 0]];
            queries[[row, 3]] = state[[i, 1]];
            target[[row, 0]] = tgt[[i, 0]];
            target[[row, 1]] = tgt[[i, 1]];
        }
        taus.push(tau);
    }
    let batch = Batch::new(token_matrix(sensors), queries, taus, ns, nq)?;
    Ok((batch, target))
}

/// Anything that maps a batch to per-query two-channel outputs.
pub trait Predictor {
    fn predict(&self, batch: &Batch) -> Result<Array2<f64>>;
}

/// Result of refinement. `x0_hat` is the clean-state estimate of the final
/// step and is the reported prediction; `x0` is the sampler's end state,
/// which retains the residual noise floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub x0_hat: Array2<f64>,
    pub x0: Array2<f64>,
}

impl Refined {
    /// Reported prediction clipped to the physical range.
    pub fn clamped(&self) -> Array2<f64> {
        self.x0_hat.mapv(|v| v.clamp(0.0, 1.0))
    }
}

/// Predicts the state at normalised query coordinates `coords` (`[B * nq, 2]`).
///
/// Diffusion starts every state channel from a standard normal draw and runs
/// `K` model evaluations with DDIM updates; direct prediction is one forward.
pub fn refine<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    schedule: &DiffusionSchedule,
    objective: Objective,
    sensors: &Array2<f64>,
    coords: &Array2<f64>,
    n_sensors: usize,
    n_queries: usize,
    rng: &mut R,
) -> Result<Refined> {
    let n = coords.nrows();
    if coords.ncols() != 2 || n_queries == 0 || n % n_queries != 0 {
        return Err(Error::Contract(format!(
            "query coordinates {:?} for {n_queries} queries per window",
            coords.dim()
        )));
    }
    let batch_len = n / n_queries;
    let make_batch = |state: &Array2<f64>, tau: f64| -> Result<Batch> {
        let mut q = Array2::zeros((n, TOKEN_DIM));
        q.slice_mut(ndarray::s![.., 0..2]).assign(coords);
        q.slice_mut(ndarray::s![.., 2..4]).assign(state);
        Batch::new(sensors.clone(), q, vec![tau; batch_len], n_sensors, n_queries)
    };
    match objective {
        Objective::Direct => {
            let out = model.predict(&make_batch(&Array2::zeros((n, OUT_DIM)), 0.0)?)?;
            Ok(Refined {
                x0_hat: out.clone(),
                x0: out,
            })
        }
        Objective::Diffusion => {
            let mut x = standard_normal(n, OUT_DIM, rng);
            let mut x0_hat = None;
            for k in (1..=schedule.steps()).rev() {
                let nu = model
                    .predict(&make_batch(&x, schedule.tau_of(k)?)?)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("refinement step {k}: {m}")),
                        other => other,
                    })?;
                let step = schedule.ddim_step(x.view(), nu.view(), k)?;
                if !step.x_prev.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite state at refinement step {k}"
                    )));
                }
                x = step.x_prev;
                x0_hat = Some(step.x0_hat);
            }
            Ok(Refined {
                x0_hat: x0_hat.expect("at least one step"),
                x0: x,
            })
        }
    }
}

/// Mean squared error between the network output and `target`, on a graph.
pub fn loss_on_graph<T: Real>(
    g: &mut Graph<'_, T>,
    net: &crate::model::Detno,
    batch: &Batch,
    target: &Array2<f64>,
) -> Result<Var> {
    let out = net.forward(g, batch)?;
    g.mse(out, target.mapv(T::of))
}

/// Single-sample diffusion loss with a fresh uniform `k` and Gaussian draw.
pub fn diffusion_loss<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    sample: &TrainingSample,
    schedule: &DiffusionSchedule,
    objective: Objective,
    rng: &mut R,
) -> Result<f64> {
    let draw = NoiseDraw::sample(schedule, sample.queries.len(), rng);
    loss_with_draw(model, sample, schedule, objective, &draw)
}

pub fn loss_with_draw<P: Predictor + ?Sized>(
    model: &P,
    sample: &TrainingSample,
    schedule: &DiffusionSchedule,
    objective: Objective,
    draw: &NoiseDraw,
) -> Result<f64> {
    let (batch, target) = training_batch(&[sample], schedule, objective, std::slice::from_ref(draw))?;
    let out = model.predict(&batch)?;
    Ok(mse(out.view(), target.view()))
}

/// Loss summed over every step `k = 0..=K`, each with its own draw.
pub fn diffusion_loss_all_steps<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    sample: &TrainingSample,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..=schedule.steps() {
        let draw = NoiseDraw {
            k,
            eps: standard_normal(sample.queries.len(), OUT_DIM, rng),
        };
        total += loss_with_draw(model, sample, schedule, Objective::Diffusion, &draw)?;
    }
    Ok(total)
}

fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    Zip::from(&a).and(&b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = DiffusionSchedule::new(10, 0.09, ScheduleKind::NoiseStd).unwrap();
        assert_eq!(s.sigma(10).unwrap(), 1.0);
        assert_eq!(s.alpha_bar(10).unwrap(), 0.0);
        assert_eq!(s.sigma(0).unwrap(), 0.09);
        assert!((s.alpha_bar(0).unwrap() - 0.9919).abs() < 1e-15);
        for k in 1..=10 {
            assert!(s.sigma(k).unwrap() > s.sigma(k - 1).unwrap());
        }
        assert_eq!(s.tau_of(0).unwrap(), 0.0);
        assert_eq!(s.tau_of(10).unwrap(), 1000.0);
        assert_eq!(s.tau_of(3).unwrap(), 300.0);
        assert!(matches!(s.tau_of(11), Err(Error::Range(_))));
        let v = DiffusionSchedule::new(10, 0.09, ScheduleKind::NoiseVariance).unwrap();
        assert!((v.sigma(0).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn schedule_config_errors() {
        assert!(DiffusionSchedule::new(0, 0.09, ScheduleKind::NoiseStd).is_err());
        assert!(DiffusionSchedule::new(10, 1.0, ScheduleKind::NoiseStd).is_err());
        assert_eq!("direct".parse::<Objective>().unwrap(), Objective::Direct);
        assert!("x".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn corruption_examples() {
        let s = DiffusionSchedule::new(10, 0.09, ScheduleKind::NoiseStd).unwrap();
        let y = Array2::from_shape_vec((2, 2), vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        let eps = Array2::from_shape_vec((2, 2), vec![1.0, -0.3, 0.1, 2.0]).unwrap();
        assert_eq!(s.corrupt(y.view(), 10, eps.view()).unwrap(), eps);
        let zero = Array2::zeros((2, 2));
        let c = s.corrupt(y.view(), 0, zero.view()).unwrap();
        let a0 = (1.0f64 - 0.0081).sqrt();
        assert!(c.iter().zip(y.iter()).all(|(c, y)| (c - a0 * y).abs() < 1e-15));
        let nu = s.v_target(y.view(), eps.view(), 10).unwrap();
        assert_eq!(nu, -&y);
        assert!(s.ddim_step(y.view(), y.view(), 0).is_err());
    }
}
