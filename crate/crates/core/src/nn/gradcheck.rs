//! Central finite-difference check of analytic parameter gradients.
//!
//! The numerical side only ever evaluates forward passes, so it is independent
//! of the backward implementation it checks.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Gradient magnitude below which a tensor counts as structurally zero (for
/// example key biases, which the token softmax cancels); differences there
/// are finite-difference round-off.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, SCALE_FLOOR)`.
    pub rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.rel_error)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.rel_error <= tol)
    }
}

/// Compares backward-pass gradients of `loss` against central differences
/// with step `h` for every parameter tensor in `store`.
///
/// Five-point central stencils at `h` and `h / 2` are combined by Richardson
/// extrapolation, leaving O(h^6) truncation; strongly curved instances
/// otherwise put the oracle's own error above 1e-4 at `h = 1e-3`.
///
/// Tensor-wise relative error is used so that entries whose gradient is
/// at the level of the finite-difference truncation error do not dominate.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(store);
        let l = loss(&mut g)?;
        Ok(g.value(l)[[0, 0]])
    };

    let ids: Vec<_> = (0..store.len()).map(super::params::ParamId).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.get(id).value.as_slice().expect("standard layout")[j];
            let mut at = |offset: f64| -> Result<f64> {
                store.get_mut(id).value.as_slice_mut().unwrap()[j] = orig + offset;
                eval(store)
            };
            let mut stencil = |h: f64| -> Result<f64> {
                let (up, down) = (at(h)?, at(-h)?);
                let (up2, down2) = (at(2.0 * h)?, at(-2.0 * h)?);
                Ok((8.0 * (up - down) - (up2 - down2)) / (12.0 * h))
            };
            let (coarse, fine) = (stencil(h)?, stencil(0.5 * h)?);
            store.get_mut(id).value.as_slice_mut().unwrap()[j] = orig;
            numeric.push((16.0 * fine - coarse) / 15.0);
        }
        let exact: Vec<f64> = analytic
            .get(id)
            .map_or_else(|| vec![0.0; n], |a| a.iter().copied().collect());
        let max_a = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = exact
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = max_a.max(max_n).max(SCALE_FLOOR);
        tensors.push(TensorCheck {
            name: store.get(id).name.clone(),
            rel_error: diff / scale,
            max_abs_grad: max_a,
        });
    }
    Ok(GradCheckReport { tensors })
}
