use ndarray::Array2;

use super::Real;
use crate::error::{Error, Result};

/// Sinusoidal timestep features: `n_freq` sines followed by `n_freq` cosines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierEmbedConfig {
    pub n_freq: usize,
    pub max_period: f64,
}

impl Default for FourierEmbedConfig {
    fn default() -> Self {
        Self {
            n_freq: 32,
            max_period: 10_000.0,
        }
    }
}

impl FourierEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_freq < 1 || !(self.max_period > 1.0) {
            return Err(Error::Config(
                "fourier embedding needs n_freq >= 1 and max_period > 1".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 * self.n_freq
    }

    /// `max_period^(-i / (n_freq - 1))`, geometric from 1 down to `1 / max_period`.
    pub fn frequency(&self, i: usize) -> f64 {
        if self.n_freq == 1 {
            return 1.0;
        }
        self.max_period.powf(-(i as f64) / (self.n_freq - 1) as f64)
    }
}

pub fn fourier_embed(tau: f64, cfg: &FourierEmbedConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.dim()];
    for i in 0..cfg.n_freq {
        let arg = tau * cfg.frequency(i);
        out[i] = arg.sin();
        out[cfg.n_freq + i] = arg.cos();
    }
    out
}

/// Embeddings of several timesteps as rows.
pub fn fourier_embed_rows<T: Real>(taus: &[f64], cfg: &FourierEmbedConfig) -> Array2<T> {
    let mut out = Array2::zeros((taus.len(), cfg.dim()));
    for (mut row, &tau) in out.rows_mut().into_iter().zip(taus) {
        for (dst, v) in row.iter_mut().zip(fourier_embed(tau, cfg)) {
            *dst = T::of(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_timestep() {
        let cfg = FourierEmbedConfig::default();
        let e = fourier_embed(0.0, &cfg);
        assert_eq!(e.len(), 64);
        assert!(e[..32].iter().all(|&v| v == 0.0));
        assert!(e[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frequency_ladder() {
        let cfg = FourierEmbedConfig::default();
        assert_eq!(cfg.frequency(0), 1.0);
        assert!((cfg.frequency(31) - 1e-4).abs() < 1e-18);
        let e = fourier_embed(2.0, &cfg);
        assert!((e[0] - 2f64.sin()).abs() < 1e-15);
        assert!((e[32] - 2f64.cos()).abs() < 1e-15);
        let single = FourierEmbedConfig {
            n_freq: 1,
            ..cfg
        };
        assert_eq!(single.frequency(0), 1.0);
        assert_eq!(fourier_embed(1.0, &single).len(), 2);
    }
}
