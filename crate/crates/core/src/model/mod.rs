//! The DETNO network: query, branch and diffusion encoders, a stack of
//! cross-attention blocks with mixtures of experts and query self-attention,
//! and an output head mapping each query to two channels.

mod checkpoint;

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    fourier_embed_rows, Attention, FourierEmbedConfig, Graph, LayerNorm, Linear, MoE, Mlp,
    ParamStore, Real, Segments, Var,
};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

/// Width of sensor and query tokens: `(x, t, rho, v)`.
pub const TOKEN_DIM: usize = 4;
/// Output channels: density and velocity.
pub const OUT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub gating_hidden: usize,
    pub fourier: FourierEmbedConfig,
    /// Separate diffusion key/value stream; when false the timestep latent
    /// is concatenated to every sensor token instead.
    pub two_stream: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_blocks: 3,
            n_heads: 4,
            n_experts: 3,
            expert_hidden: 256,
            gating_hidden: 256,
            fourier: FourierEmbedConfig::default(),
            two_stream: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("expert_hidden", self.expert_hidden),
            ("gating_hidden", self.gating_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.n_heads = {}",
                self.d, self.n_heads
            )));
        }
        self.fourier.validate()
    }
}

/// A batch of windows that share token counts. Rows of sample `b` are
/// `b * n_sensors ..` in `sensors` and `b * n_queries ..` in `queries`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sensors: Array2<f64>,
    pub queries: Array2<f64>,
    pub taus: Vec<f64>,
    pub n_sensors: usize,
    pub n_queries: usize,
}

impl Batch {
    pub fn new(
        sensors: Array2<f64>,
        queries: Array2<f64>,
        taus: Vec<f64>,
        n_sensors: usize,
        n_queries: usize,
    ) -> Result<Self> {
        let b = taus.len();
        let ok = b > 0
            && n_sensors > 0
            && n_queries > 0
            && sensors.dim() == (b * n_sensors, TOKEN_DIM)
            && queries.dim() == (b * n_queries, TOKEN_DIM);
        if !ok {
            return Err(Error::Contract(format!(
                "batch of {b}: sensors {:?} for {n_sensors} each, queries {:?} for {n_queries} each",
                sensors.dim(),
                queries.dim()
            )));
        }
        if !sensors.iter().chain(queries.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite input token".into()));
        }
        if taus.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Contract("diffusion timestep must be >= 0".into()));
        }
        Ok(Self {
            sensors,
            queries,
            taus,
            n_sensors,
            n_queries,
        })
    }

    /// A single window.
    pub fn single(sensors: Array2<f64>, queries: Array2<f64>, tau: f64) -> Result<Self> {
        let (ns, nq) = (sensors.nrows(), queries.nrows());
        Self::new(sensors, queries, vec![tau], ns, nq)
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Sensor tokens with each sample's rows sorted lexicographically, which
    /// makes the forward pass exactly invariant to their input order.
    pub fn canonical_sensors(&self) -> Array2<f64> {
        let mut out = self.sensors.clone();
        for b in 0..self.len() {
            let rows = b * self.n_sensors..(b + 1) * self.n_sensors;
            let block = self.sensors.slice(s![rows.clone(), ..]);
            let mut order: Vec<usize> = (0..self.n_sensors).collect();
            order.sort_by(|&i, &j| {
                let (ri, rj) = (block.row(i), block.row(j));
                ri.iter()
                    .zip(rj.iter())
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (dst, &src) in order.iter().enumerate() {
                out.row_mut(rows.start + dst).assign(&block.row(src));
            }
        }
        out
    }
}

/// Encoded tokens of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub query: Var,
    pub kv_op: Var,
    pub kv_diff: Var,
    pub raw_query: Var,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm_cross: LayerNorm,
    pub cross_op: Attention,
    pub cross_diff: Option<Attention>,
    pub fuse: Linear,
    pub norm_moe: LayerNorm,
    pub moe: MoE,
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: MoE,
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d;
        let moe = |store: &mut ParamStore<T>, tag: &str, rng: &mut R| {
            MoE::new(
                store,
                &format!("{name}.{tag}"),
                d,
                cfg.n_experts,
                cfg.expert_hidden,
                TOKEN_DIM,
                cfg.gating_hidden,
                rng,
            )
        };
        Ok(Self {
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d),
            cross_op: Attention::new(store, &format!("{name}.cross_op"), d, cfg.n_heads, rng),
            cross_diff: cfg
                .two_stream
                .then(|| Attention::new(store, &format!("{name}.cross_diff"), d, cfg.n_heads, rng)),
            fuse: Linear::new(store, &format!("{name}.fuse"), d, d, rng),
            norm_moe: LayerNorm::new(store, &format!("{name}.norm_moe"), d),
            moe: moe(store, "moe", rng)?,
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.n_heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
            ffn: moe(store, "ffn", rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        enc: &Encoded,
        batch: usize,
        n_sensors: usize,
        n_queries: usize,
    ) -> Result<Var> {
        let h = self.norm_cross.forward(g, q)?;
        let mut ctx = self.cross_op.forward(
            g,
            h,
            enc.kv_op,
            Segments {
                count: batch,
                q_len: n_queries,
                k_len: n_sensors,
            },
        )?;
        if let Some(cross_diff) = &self.cross_diff {
            let c_d = cross_diff.forward(
                g,
                h,
                enc.kv_diff,
                Segments {
                    count: batch,
                    q_len: n_queries,
                    k_len: 1,
                },
            )?;
            ctx = g.add(ctx, c_d)?;
        }
        let fused = self.fuse.forward(g, ctx)?;
        let mut q = g.add(q, fused)?;

        let h = self.norm_moe.forward(g, q)?;
        let m = self.moe.forward(g, h, enc.raw_query)?;
        q = g.add(q, m)?;

        let h = self.norm_self.forward(g, q)?;
        let sa = self.self_attn.forward(
            g,
            h,
            h,
            Segments {
                count: batch,
                q_len: n_queries,
                k_len: n_queries,
            },
        )?;
        q = g.add(q, sa)?;

        let h = self.norm_ffn.forward(g, q)?;
        let m = self.ffn.forward(g, h, enc.raw_query)?;
        g.add(q, m)
    }

    /// Zeroes every residual branch so the block is the identity.
    pub fn zero_residuals<T: Real>(&self, store: &mut ParamStore<T>) {
        self.fuse.zero(store);
        self.moe.zero_output(store);
        self.self_attn.wo.zero(store);
        self.ffn.zero_output(store);
    }
}

/// Parameter layout of a DETNO instance; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Detno {
    pub config: ModelConfig,
    pub query_encoder: Mlp,
    pub branch_encoder: Mlp,
    pub diffusion_encoder: Mlp,
    pub blocks: Vec<Block>,
    pub head: Mlp,
}

impl Detno {
    /// Registers all parameters in `store`, initialised from `rng`.
    pub fn build<T: Real, R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let branch_in = if cfg.two_stream { TOKEN_DIM } else { TOKEN_DIM + d };
        let query_encoder = Mlp::new(store, "query_encoder", &[TOKEN_DIM, d, d], rng);
        let branch_encoder = Mlp::new(store, "branch_encoder", &[branch_in, d, d], rng);
        let diffusion_encoder = Mlp::new(store, "diffusion_encoder", &[cfg.fourier.dim(), d, d], rng);
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::new(store, &format!("blocks.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let head = Mlp::new(store, "head", &[d, d, OUT_DIM], rng);
        Ok(Self {
            config: cfg.clone(),
            query_encoder,
            branch_encoder,
            diffusion_encoder,
            blocks,
            head,
        })
    }

    /// Builds a fresh store and layout from a seed.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Self::build(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Encoded> {
        let raw_query = g.input(batch.queries.mapv(T::of));
        let query = self.query_encoder.forward(g, raw_query)?;
        let gamma = g.input(fourier_embed_rows(&batch.taus, &self.config.fourier));
        let kv_diff = self.diffusion_encoder.forward(g, gamma)?;
        let sensors = g.input(batch.canonical_sensors().mapv(T::of));
        let branch_in = if self.config.two_stream {
            sensors
        } else {
            let z = g.repeat_rows(kv_diff, batch.n_sensors);
            g.concat_cols(sensors, z)?
        };
        let kv_op = self.branch_encoder.forward(g, branch_in)?;
        Ok(Encoded {
            query,
            kv_op,
            kv_diff,
            raw_query,
        })
    }

    /// Predicted two-channel field at every query, `[B * n_queries, 2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Var> {
        let enc = self.encode(g, batch)?;
        let mut q = enc.query;
        for (i, block) in self.blocks.iter().enumerate() {
            q = block.forward(g, q, &enc, batch.len(), batch.n_sensors, batch.n_queries)?;
            if !g.value(q).iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation after block {i}"
                )));
            }
        }
        self.head.forward(g, q)
    }

    /// Forward pass without recording, returned in 64-bit.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<Array2<f64>> {
        let mut g = Graph::inference(store);
        let out = self.forward(&mut g, batch)?;
        let out = g.value(out).mapv(|v| v.f64());
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(out)
    }

    pub fn zero_residuals<T: Real>(&self, store: &mut ParamStore<T>) {
        for b in &self.blocks {
            b.zero_residuals(store);
        }
    }
}

pub fn count_parameters<T: Real>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// A layout together with its parameter values.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub net: Detno,
    pub store: ParamStore<T>,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (net, store) = Detno::init(cfg, seed)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    /// Builds the layout for `cfg` and fills it from a checkpoint file.
    pub fn load(cfg: &ModelConfig, path: &std::path::Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        load_checkpoint(path, &mut model.store)?;
        Ok(model)
    }

    /// Same parameters in another arithmetic.
    pub fn convert<U: Real>(&self) -> Network<U> {
        let (net, mut store) = Detno::init::<U>(&self.net.config, 0).expect("validated config");
        store
            .load_values_from(&self.store)
            .expect("identical layouts");
        Network { net, store }
    }
}

impl<T: Real> crate::diffusion::Predictor for Network<T> {
    fn predict(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.net.predict(&self.store, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_sized() {
        let (_, store) = Detno::init::<f32>(&ModelConfig::default(), 0).unwrap();
        let n = count_parameters(&store);
        assert!((800_000..=1_500_000).contains(&n), "{n}");
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig {
            d: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            n_experts: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_contract() {
        let s = Array2::zeros((3, 4));
        let q = Array2::zeros((2, 4));
        assert!(Batch::new(s.clone(), q.clone(), vec![0.0, 1.0], 3, 2).is_err());
        assert!(Batch::single(s.clone(), q.clone(), -1.0).is_err());
        let mut bad = q.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(Batch::single(s, bad, 0.0), Err(Error::Numeric(_))));
    }
}
