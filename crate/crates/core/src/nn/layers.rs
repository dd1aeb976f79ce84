use rand::Rng;

use super::graph::{Graph, Segments, Var};
use super::params::{ParamId, ParamStore};
use super::Real;
use crate::error::{Error, Result};

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = store.zeros(format!("{name}.bias"), &[d_out]);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let h = g.matmul(x, w)?;
        let b = g.param(self.bias);
        g.add_row(h, b)
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).value.fill(T::zero());
        store.get_mut(self.bias).value.fill(T::zero());
    }
}

/// Affine layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, d) = g.shape(x);
        if d != self.d_in() {
            return Err(Error::Contract(format!(
                "MLP expects {} input features, got {d}",
                self.d_in()
            )));
        }
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < n {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), &[d], 1.0),
            beta: store.zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Projected multi-head linear attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
        segs: Segments,
    ) -> Result<Var> {
        let q = self.wq.forward(g, query)?;
        let k = self.wk.forward(g, context)?;
        let v = self.wv.forward(g, context)?;
        let a = g.linear_attention(q, k, v, self.heads, segs)?;
        self.wo.forward(g, a)
    }
}

/// Dense soft mixture of experts with a gating network on the raw query token.
#[derive(Debug, Clone)]
pub struct MoE {
    pub experts: Vec<Mlp>,
    pub gate: Mlp,
}

impl MoE {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        n_experts: usize,
        expert_hidden: usize,
        gate_in: usize,
        gating_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_experts < 1 {
            return Err(Error::Config("a mixture needs at least one expert".into()));
        }
        let experts = (0..n_experts)
            .map(|e| {
                Mlp::new(
                    store,
                    &format!("{name}.experts.{e}"),
                    &[d, expert_hidden, d],
                    rng,
                )
            })
            .collect();
        let gate = Mlp::new(
            store,
            &format!("{name}.gate"),
            &[gate_in, gating_hidden, gating_hidden, n_experts],
            rng,
        );
        Ok(Self { experts, gate })
    }

    /// Softmax gate weights `[n, n_experts]`.
    pub fn gate_weights<T: Real>(&self, g: &mut Graph<'_, T>, raw: Var) -> Result<Var> {
        let logits = self.gate.forward(g, raw)?;
        Ok(g.softmax_rows(logits))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, raw: Var) -> Result<Var> {
        let weights = self.gate_weights(g, raw)?;
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(g, h)?;
            let w = g.slice_cols(weights, e, 1)?;
            let term = g.mul_col(y, w)?;
            out = Some(match out {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(out.expect("at least one expert"))
    }

    /// Zeroes each expert's output layer so the block contributes nothing.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        for e in &self.experts {
            e.last().zero(store);
        }
    }
}
