//! Error metrics, rollout error curves, spatial spectra and the ablation grid.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2, Zip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rollout::RolloutSet;
use crate::training::{self, Setup};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sim_id: usize,
    /// Rollout window, 1-based.
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
    pub wall_ms: f64,
}

/// Mean squared and mean absolute error over all entries of paired arrays.
pub fn mse_mae(pred: &[ArrayView2<f64>], truth: &[ArrayView2<f64>]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predicted channels, {} true",
            pred.len(),
            truth.len()
        )));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if p.dim() != t.dim() {
            return Err(Error::Contract(format!(
                "prediction {:?} vs truth {:?}",
                p.dim(),
                t.dim()
            )));
        }
        Zip::from(p).and(t).for_each(|&p, &t| {
            let e = p - t;
            se += e * e;
            ae += e.abs();
        });
        n += p.len();
    }
    if n == 0 {
        return Err(Error::Contract("no grid points to score".into()));
    }
    Ok((se / n as f64, ae / n as f64))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("sim_id,step,mse,mae,wall_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.3}", r.sim_id, r.step, r.mse, r.mae, r.wall_ms);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Mean error per rollout step over simulations; every simulation must
/// report every step.
pub fn rollout_curve(rows: &[MetricsRow]) -> Result<Vec<CurvePoint>> {
    let n_steps = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let mut sims: Vec<usize> = rows.iter().map(|r| r.sim_id).collect();
    sims.sort_unstable();
    sims.dedup();
    if sims.is_empty() {
        return Err(Error::Contract("no metrics rows".into()));
    }
    let mut out = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let at: Vec<&MetricsRow> = rows.iter().filter(|r| r.step == step).collect();
        for &id in &sims {
            if !at.iter().any(|r| r.sim_id == id) {
                return Err(Error::Contract(format!(
                    "simulation {id} has no metrics for step {step}"
                )));
            }
        }
        let n = at.len() as f64;
        out.push(CurvePoint {
            step,
            mse: at.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: at.iter().map(|r| r.mae).sum::<f64>() / n,
        });
    }
    Ok(out)
}

/// Last-step over first-step mean squared error.
pub fn growth_ratio(curve: &[CurvePoint]) -> Result<f64> {
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) if a.mse > 0.0 => Ok(b.mse / a.mse),
        _ => Err(Error::Contract("growth ratio needs a positive first-step error".into())),
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,mse,mae\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.step, p.mse, p.mae);
    }
    out
}

/// One-sided magnitude of the unnormalised DFT, `|sum_j x_j e^(-2 pi i jk/n)|`
/// for `k = 0..=n/2`.
pub fn spectrum(slice: ArrayView1<f64>) -> Result<Vec<f64>> {
    let n = slice.len();
    if n < 4 {
        return Err(Error::Contract(format!("spectrum needs at least 4 points, got {n}")));
    }
    let mut buf: Vec<Complex<f64>> = slice.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(buf[..=n / 2].iter().map(|c| c.norm()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub wavenumber_index: usize,
    pub amplitude: f64,
}

/// Which density slices of a rollout enter the averaged spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectrumSlice {
    /// Final time of the last window.
    #[default]
    Final,
    /// Final time of every window.
    WindowFinals,
}

impl fmt::Display for SpectrumSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Final => "final",
            Self::WindowFinals => "window_finals",
        })
    }
}

impl FromStr for SpectrumSlice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Self::Final),
            "window_finals" => Ok(Self::WindowFinals),
            _ => Err(Error::Config(format!(
                "unknown spectrum slice `{s}` (final | window_finals)"
            ))),
        }
    }
}

/// Mean spectrum of several equally long slices.
pub fn mean_spectrum<'a, I: IntoIterator<Item = ArrayView1<'a, f64>>>(slices: I) -> Result<Vec<SpectrumRow>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for s in slices {
        let amp = spectrum(s)?;
        if acc.is_empty() {
            acc = amp;
        } else if acc.len() != amp.len() {
            return Err(Error::Contract("slices differ in length".into()));
        } else {
            acc.iter_mut().zip(amp).for_each(|(a, b)| *a += b);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("no slices to transform".into()));
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(k, a)| SpectrumRow {
            wavenumber_index: k,
            amplitude: a / count as f64,
        })
        .collect())
}

/// Averaged predicted-density spectrum of a rollout set.
pub fn rollout_spectrum(set: &RolloutSet, which: SpectrumSlice) -> Result<Vec<SpectrumRow>> {
    let slices = set.runs.iter().flat_map(|run| {
        let windows = match which {
            SpectrumSlice::Final => &run.windows[run.windows.len().saturating_sub(1)..],
            SpectrumSlice::WindowFinals => &run.windows[..],
        };
        windows.iter().map(|w| w.rho.row(w.rho.nrows() - 1))
    });
    mean_spectrum(slices)
}

/// Averaged true-density spectrum at the same slices as [`rollout_spectrum`].
pub fn truth_spectrum(
    set: &RolloutSet,
    data: &Dataset,
    cfg: &RunConfig,
    which: SpectrumSlice,
) -> Result<Vec<SpectrumRow>> {
    let grid = crate::dataset::QueryGrid::cell_centres(&cfg.sim, set.grid_nt);
    let mut slices = Vec::new();
    for run in &set.runs {
        let field = &data.sims[run.sim_id].field;
        let windows = match which {
            SpectrumSlice::Final => &run.windows[run.windows.len().saturating_sub(1)..],
            SpectrumSlice::WindowFinals => &run.windows[..],
        };
        for w in windows {
            let (rho, _) = crate::rollout::window_truth(field, &cfg.sim, &cfg.window, &grid, w.t_c)?;
            slices.push(rho.row(rho.nrows() - 1).to_owned());
        }
    }
    mean_spectrum(slices.iter().map(|s| s.view()))
}

/// Mean amplitude over the top quartile of wavenumbers.
pub fn high_frequency_amplitude(rows: &[SpectrumRow]) -> f64 {
    let n = rows.len();
    let start = n - (n / 4).max(1);
    rows[start..].iter().map(|r| r.amplitude).sum::<f64>() / (n - start) as f64
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("wavenumber_index,amplitude\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.wavenumber_index, r.amplitude);
    }
    out
}

/// Hyperparameter axes of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Hidden,
    Experts,
    MinNoise,
    RefineSteps,
    Stream,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        Self::Hidden,
        Self::Experts,
        Self::MinNoise,
        Self::RefineSteps,
        Self::Stream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hidden => "hidden",
            Self::Experts => "experts",
            Self::MinNoise => "min_noise",
            Self::RefineSteps => "refine_steps",
            Self::Stream => "stream",
        }
    }

    /// Grid values, as printed in the CSV.
    pub fn values(self) -> &'static [&'static str] {
        match self {
            Self::Hidden => &["32", "64", "128"],
            Self::Experts => &["2", "3", "4", "5"],
            Self::MinNoise => &["0.07", "0.08", "0.09", "0.1"],
            Self::RefineSteps => &["1", "5", "10"],
            Self::Stream => &["two", "concat"],
        }
    }

    /// Configuration with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = || Error::Config(format!("invalid {} value `{value}`", self.name()));
        match self {
            Self::Hidden => cfg.model.d = value.parse().map_err(|_| bad())?,
            Self::Experts => cfg.model.n_experts = value.parse().map_err(|_| bad())?,
            Self::MinNoise => cfg.diffusion.min_noise_std = value.parse().map_err(|_| bad())?,
            Self::RefineSteps => cfg.diffusion.steps = value.parse().map_err(|_| bad())?,
            Self::Stream => {
                cfg.model.two_stream = match value {
                    "two" => true,
                    "concat" => false,
                    _ => return Err(bad()),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation axis `{s}` (hidden | experts | min_noise | refine_steps | stream)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub seed: u64,
    /// Held-out single-step MSE, or the failure of this variant.
    pub val_mse: std::result::Result<f64, String>,
}

/// Trains one variant per axis value with the shared seed and budget and
/// reports its held-out single-step error. Failing variants are recorded and
/// the grid continues.
pub fn run_ablation<F: FnMut(&AblationRow)>(
    axes: &[AblationAxis],
    base: &RunConfig,
    data: &Dataset,
    mut on_row: F,
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &axis in axes {
        for value in axis.values() {
            let result = ablation_point(axis, value, base, data);
            let row = AblationRow {
                axis,
                value: value.to_string(),
                seed: base.seed,
                val_mse: result.map_err(|e| e.to_string()),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    rows
}

fn ablation_point(axis: AblationAxis, value: &str, base: &RunConfig, data: &Dataset) -> Result<f64> {
    let cfg = axis.apply(base, value)?;
    let schedule = cfg.schedule()?;
    let setup = Setup {
        data,
        sim: &cfg.sim,
        spec: &cfg.window,
        schedule: &schedule,
        objective: cfg.diffusion.objective,
    };
    let train_cfg = cfg.train_config(None);
    let mut model = Network::<f32>::new(&cfg.model, cfg.seed)?;
    training::train(&mut model, &setup, &train_cfg, |_| {})?;
    let (mse, _) = training::validate_single_step(&model, &setup, train_cfg.val_queries, cfg.seed)?;
    Ok(mse)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,value,seed,val_mse\n");
    for r in rows {
        let mse = r.val_mse.as_ref().map_or("nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{}", r.axis, r.value, r.seed, mse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn metric_examples() {
        let t = arr2(&[[0.1, 0.2], [0.3, 0.4]]);
        assert_eq!(mse_mae(&[t.view()], &[t.view()]).unwrap(), (0.0, 0.0));
        let p = t.mapv(|v| v + 0.1);
        let (mse, mae) = mse_mae(&[p.view()], &[t.view()]).unwrap();
        assert!((mse - 0.01).abs() < 1e-12 && (mae - 0.1).abs() < 1e-12);
        let a = arr2(&[[0.0, 0.2]]);
        let z = arr2(&[[0.0, 0.0]]);
        let (mse, mae) = mse_mae(&[a.view()], &[z.view()]).unwrap();
        assert!((mse - 0.02).abs() < 1e-15 && (mae - 0.1).abs() < 1e-15);
        assert!(mse_mae(&[a.view()], &[t.view()]).is_err());
    }

    #[test]
    fn constant_spectrum() {
        let s = spectrum(arr1(&[0.5; 8]).view()).unwrap();
        assert_eq!(s.len(), 5);
        assert!((s[0] - 4.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|&a| a < 1e-12));
        assert!(spectrum(arr1(&[1.0, 2.0]).view()).is_err());
    }

    #[test]
    fn growth_ratio_of_reported_values() {
        let curve = [
            CurvePoint { step: 1, mse: 0.002, mae: 0.0 },
            CurvePoint { step: 8, mse: 0.008, mae: 0.0 },
        ];
        assert!((growth_ratio(&curve).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn curve_needs_every_step() {
        let row = |sim_id, step| MetricsRow { sim_id, step, mse: 1.0, mae: 1.0, wall_ms: 0.0 };
        assert!(rollout_curve(&[row(0, 1), row(0, 2), row(1, 2)]).is_err());
        let c = rollout_curve(&[row(0, 1), row(0, 2)]).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert_eq!(AblationAxis::RefineSteps.values().len(), 3);
    }
}
