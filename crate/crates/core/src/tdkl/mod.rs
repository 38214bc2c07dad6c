//! Transformer deep-kernel surrogate.
//!
//! Observed `(x, y)` pairs are projected to tokens and encoded. Query points
//! (including the observed locations themselves) are projected and decoded
//! against the encoded context with a diagonal self-attention mask, then
//! layer-normalized into embeddings `z`. A small network maps each `z` to a
//! log-scale `u`, and an exact GP with the normalized combination kernel runs
//! on `(z, u)`.

mod train;

pub use train::{split_pivot_loss, split_pivot_loss_and_grads_at, split_pivot_loss_at, SurrogateTrainer};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gp::posterior::{
    condition_nodes, prior_nodes, query_nodes, ConditionedNodes, EmbeddedObservations, GaussianPosterior,
    ObservationSet,
};
use crate::gp::{points_matrix, KernelParameters, MeanParameters, DEFAULT_COMPONENTS, DEFAULT_JITTER};
use crate::nn::{Bound, Graph, Linear, Mlp, ParamId, ParamSet, TransformerConfig, TransformerDecoder, TransformerEncoder, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateVariant {
    Transformer,
    Feedforward,
    None,
}

impl std::fmt::Display for SurrogateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurrogateVariant::Transformer => "transformer",
            SurrogateVariant::Feedforward => "feedforward",
            SurrogateVariant::None => "none",
        })
    }
}

impl std::str::FromStr for SurrogateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "feedforward" => Ok(Self::Feedforward),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown surrogate variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdklConfig {
    pub variant: SurrogateVariant,
    pub transformer: TransformerConfig,
    pub kernel_components: usize,
    pub variance_hidden: usize,
    pub jitter: f64,
    pub learning_rate: f64,
    /// Trajectories per surrogate training step.
    pub batch_size: usize,
}

impl Default for TdklConfig {
    fn default() -> Self {
        Self {
            variant: SurrogateVariant::Transformer,
            transformer: TransformerConfig::default(),
            kernel_components: DEFAULT_COMPONENTS,
            variance_hidden: 32,
            jitter: DEFAULT_JITTER,
            learning_rate: 3e-4,
            batch_size: 4,
        }
    }
}

impl TdklConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variant != SurrogateVariant::None {
            self.transformer.validate()?;
        }
        if self.kernel_components == 0 || self.variance_hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("surrogate sizes must be positive".into()));
        }
        if !(self.jitter >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("jitter and learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Embedder {
    Transformer { proj_x: Linear, proj_xy: Linear, encoder: TransformerEncoder, decoder: TransformerDecoder },
    Feedforward { net: Mlp },
    Identity,
}

/// All learnable surrogate state plus the architecture that reads it.
#[derive(Debug, Clone)]
pub struct TdklModel {
    pub config: TdklConfig,
    pub input_dim: usize,
    pub params: ParamSet,
    embedder: Embedder,
    variance: Option<Mlp>,
    log_alpha: ParamId,
    mean_w: ParamId,
}

/// Per-query surrogate features: embeddings and the posterior over
/// standardized values (`m × 1` each for mean and variance).
#[derive(Debug, Clone, Copy)]
pub struct QueryNodes {
    pub z: Var,
    pub mean: Var,
    pub var: Var,
}

impl TdklModel {
    pub fn new(config: TdklConfig, input_dim: usize, seed: u64) -> Result<Self> {
        crate::instrument::surrogate_call();
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidDimension("input dimension must be positive".into()));
        }
        let mut params = ParamSet::new(seed);
        let md = config.transformer.model_dim;
        let embedder = match config.variant {
            SurrogateVariant::Transformer => Embedder::Transformer {
                proj_x: Linear::new(&mut params, "tdkl.proj_x", input_dim, md),
                proj_xy: Linear::new(&mut params, "tdkl.proj_xy", input_dim + 1, md),
                encoder: TransformerEncoder::new(&mut params, "tdkl.encoder", config.transformer),
                decoder: TransformerDecoder::new(&mut params, "tdkl.decoder", config.transformer),
            },
            SurrogateVariant::Feedforward => Embedder::Feedforward {
                net: Mlp::new(
                    &mut params,
                    "tdkl.feedforward",
                    &[input_dim, config.transformer.feedforward_dim, config.transformer.feedforward_dim, md],
                ),
            },
            SurrogateVariant::None => Embedder::Identity,
        };
        let emb_dim = if config.variant == SurrogateVariant::None { input_dim } else { md };
        let variance = (config.variant != SurrogateVariant::None).then(|| {
            let net = Mlp::new(&mut params, "tdkl.variance", &[emb_dim, config.variance_hidden, 1]);
            let last = net.last();
            params.get_mut(last.w).fill(0.0);
            params.get_mut(last.b).fill(0.0);
            net
        });
        let log_alpha = params.add_zeros("tdkl.kernel.log_alpha", 1, config.kernel_components);
        let mean_w = params.add_zeros("tdkl.mean.w", 1, emb_dim);
        Ok(Self { config, input_dim, params, embedder, variance, log_alpha, mean_w })
    }

    pub fn variant(&self) -> SurrogateVariant {
        self.config.variant
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get(self.mean_w).ncols()
    }

    pub fn kernel(&self) -> KernelParameters {
        KernelParameters { log_alpha: self.params.get(self.log_alpha).iter().copied().collect() }
    }

    pub fn mean(&self) -> MeanParameters {
        MeanParameters { w: self.params.get(self.mean_w).iter().copied().collect() }
    }

    /// Parameter ids of the kernel coefficients and mean weights.
    pub fn gp_param_ids(&self) -> (ParamId, ParamId) {
        (self.log_alpha, self.mean_w)
    }

    fn check_points(&self, xs: &[Vec<f64>]) -> Result<()> {
        if let Some(bad) = xs.iter().find(|x| x.len() != self.input_dim) {
            return Err(Error::Shape(format!("point of length {} for a {}-D surrogate", bad.len(), self.input_dim)));
        }
        Ok(())
    }

    /// Encodes context tokens built from `x` and standardized `y`. Returns
    /// `None` for variants that ignore context.
    pub fn context_nodes(&self, g: &mut Graph, p: &Bound, x: Var, y_std: Var) -> Result<Option<Var>> {
        match &self.embedder {
            Embedder::Transformer { proj_xy, encoder, .. } => {
                let xy = g.concat_cols(&[x, y_std]);
                let tokens = proj_xy.forward(g, p, xy);
                Ok(Some(encoder.forward(g, p, tokens)?))
            }
            _ => Ok(None),
        }
    }

    /// Embeds query rows. The transformer variant requires encoded context.
    pub fn embed_nodes(&self, g: &mut Graph, p: &Bound, xq: Var, context: Option<Var>) -> Result<Var> {
        match &self.embedder {
            Embedder::Transformer { proj_x, decoder, .. } => {
                let ctx = context.ok_or(Error::RequiresContext)?;
                let q = proj_x.forward(g, p, xq);
                let h = decoder.forward(g, p, q, ctx)?;
                Ok(g.layer_norm(h))
            }
            Embedder::Feedforward { net } => {
                let h = net.forward(g, p, xq);
                Ok(g.layer_norm(h))
            }
            Embedder::Identity => Ok(xq),
        }
    }

    /// Per-row log-scales `u(z)` as an `m × 1` column (zero for the
    /// identity variant).
    pub fn log_scale_nodes(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        match &self.variance {
            Some(net) => net.forward(g, p, z),
            None => g.constant(Array2::zeros((g.shape(z).0, 1))),
        }
    }

    pub fn gp_nodes(&self, p: &Bound) -> (Var, Var) {
        (p[self.log_alpha], p[self.mean_w])
    }

    /// Posterior nodes at `xq` given observations `(xo, yo_std)` already on
    /// the graph. `xo` may have zero rows, giving the prior.
    pub fn posterior_nodes(
        &self,
        g: &mut Graph,
        p: &Bound,
        xq: Var,
        xo: Var,
        yo_std: Var,
    ) -> Result<QueryNodes> {
        let n = g.shape(xo).0;
        let m = g.shape(xq).0;
        let (la, w) = self.gp_nodes(p);
        if n == 0 {
            return Ok(self.prior_query_nodes(g, p, xq));
        }
        let ctx = self.context_nodes(g, p, xo, yo_std)?;
        let all = g.concat_rows(&[xo, xq]);
        let z_all = self.embed_nodes(g, p, all, ctx)?;
        let u_all = self.log_scale_nodes(g, p, z_all);
        let zo = g.slice_rows(z_all, 0, n);
        let uo = g.slice_rows(u_all, 0, n);
        let zq = g.slice_rows(z_all, n, m);
        let uq = g.slice_rows(u_all, n, m);
        let cond = condition_nodes(g, zo, uo, yo_std, la, w, self.config.jitter)?;
        let (mean, var) = query_nodes(g, &cond, zq, uq, la, w)?;
        Ok(QueryNodes { z: zq, mean, var })
    }

    /// Prior with no context: the GP over raw inputs with `u ≡ 0`. The
    /// identity variant uses its linear mean; learned embeddings do not
    /// match the input dimension, so their prior mean is zero.
    fn prior_query_nodes(&self, g: &mut Graph, p: &Bound, xq: Var) -> QueryNodes {
        let m = g.shape(xq).0;
        let u = g.constant(Array2::zeros((m, 1)));
        let w = match self.embedder {
            Embedder::Identity => p[self.mean_w],
            _ => g.constant(Array2::zeros((1, self.input_dim))),
        };
        let (mean, var) = prior_nodes(g, xq, u, w, self.config.jitter);
        QueryNodes { z: xq, mean, var }
    }

    /// Conditional embeddings of `query_x` and of the observed locations.
    pub fn embed_context(&self, query_x: &[Vec<f64>], obs: &ObservationSet) -> Result<(Array2<f64>, Array2<f64>)> {
        if obs.is_empty() && self.variant() == SurrogateVariant::Transformer {
            return Err(Error::RequiresContext);
        }
        crate::instrument::surrogate_call();
        if query_x.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_points(query_x)?;
        self.check_points(obs.x())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xo = g.constant(obs.x_matrix());
        let yo = g.constant(column(&obs.standardized_y()));
        let xq = g.constant(points_matrix(query_x));
        let ctx = if obs.is_empty() { None } else { self.context_nodes(&mut g, &p, xo, yo)? };
        let zq = self.embed_nodes(&mut g, &p, xq, ctx)?;
        let zo = if obs.is_empty() {
            Array2::zeros((0, self.embedding_dim()))
        } else {
            let z = self.embed_nodes(&mut g, &p, xo, ctx)?;
            g.value(z).clone()
        };
        Ok((g.value(zq).clone(), zo))
    }

    /// Posterior at `query_x` in the units of `obs.y`.
    pub fn predict(&self, query_x: &[Vec<f64>], obs: &ObservationSet) -> Result<GaussianPosterior> {
        if query_x.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_points(query_x)?;
        self.check_points(obs.x())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xq = g.constant(points_matrix(query_x));
        let xo = g.constant(if obs.is_empty() { Array2::zeros((0, self.input_dim)) } else { obs.x_matrix() });
        let yo = g.constant(column(&obs.standardized_y()));
        let q = self.posterior_nodes(&mut g, &p, xq, xo, yo)?;
        let post = GaussianPosterior {
            mean: g.value(q.mean).iter().copied().collect(),
            variance: g.value(q.var).iter().copied().collect(),
            covariance: None,
        };
        Ok(obs.destandardize(&post))
    }

    /// Precomputes everything that depends only on the observations, so
    /// many query batches can be scored cheaply.
    pub fn condition(&self, obs: &ObservationSet) -> Result<Conditioned> {
        crate::instrument::surrogate_call();
        if obs.is_empty() {
            return Err(Error::RequiresContext);
        }
        self.check_points(obs.x())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xo = g.constant(obs.x_matrix());
        let yo = g.constant(column(&obs.standardized_y()));
        let ctx = self.context_nodes(&mut g, &p, xo, yo)?;
        let zo = self.embed_nodes(&mut g, &p, xo, ctx)?;
        let uo = self.log_scale_nodes(&mut g, &p, zo);
        let (la, w) = self.gp_nodes(&p);
        let cond = condition_nodes(&mut g, zo, uo, yo, la, w, self.config.jitter)?;
        Ok(Conditioned {
            context: ctx.map(|c| g.value(c).clone()),
            z: g.value(zo).clone(),
            u: g.value(uo).clone(),
            scale: g.value(cond.scale).clone(),
            chol: g.value(cond.chol).clone(),
            alpha: g.value(cond.alpha).clone(),
            jitter: cond.jitter,
            y_mean: obs.y_mean(),
            y_scale: obs.y_scale(),
        })
    }

    /// Binds the surrogate parameters as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, false)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Checkpoint::from_sections(&[("tdkl", &self.params)]).save(path)
    }

    /// Loads weights into a model built with the same configuration.
    pub fn load_checkpoint(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Checkpoint::load(path)?.restore_sections(&mut [("tdkl", &mut self.params)])
    }
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

/// A surrogate conditioned on a fixed observation set, stored as plain
/// values.
#[derive(Debug, Clone)]
pub struct Conditioned {
    context: Option<Array2<f64>>,
    /// Embeddings of the observed points.
    pub z: Array2<f64>,
    pub u: Array2<f64>,
    scale: Array2<f64>,
    chol: Array2<f64>,
    alpha: Array2<f64>,
    pub jitter: f64,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Conditioned {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// Query features on `g`. `p` must come from [`TdklModel::bind_frozen`]
    /// of the model that produced `self`; gradients flow only into `xq`.
    pub fn query(&self, model: &TdklModel, g: &mut Graph, p: &Bound, xq: Var) -> Result<QueryNodes> {
        let ctx = self.context.as_ref().map(|c| g.constant(c.clone()));
        let zq = model.embed_nodes(g, p, xq, ctx)?;
        let uq = model.log_scale_nodes(g, p, zq);
        let (la, w) = model.gp_nodes(p);
        let cond = ConditionedNodes {
            z: g.constant(self.z.clone()),
            scale: g.constant(self.scale.clone()),
            chol: g.constant(self.chol.clone()),
            alpha: g.constant(self.alpha.clone()),
            jitter: self.jitter,
        };
        let (mean, var) = query_nodes(g, &cond, zq, uq, la, w)?;
        Ok(QueryNodes { z: zq, mean, var })
    }

    /// Standardized posterior and embeddings at plain query points.
    pub fn evaluate(&self, model: &TdklModel, query_x: &[Vec<f64>]) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
        model.check_points(query_x)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let xq = g.constant(points_matrix(query_x));
        let q = self.query(model, &mut g, &p, xq)?;
        Ok((
            g.value(q.z).clone(),
            g.value(q.mean).iter().copied().collect(),
            g.value(q.var).iter().copied().collect(),
        ))
    }

    pub fn embedded_observations(&self, y_std: Vec<f64>) -> EmbeddedObservations {
        EmbeddedObservations { z: self.z.clone(), u: self.u.iter().copied().collect(), y: y_std }
    }
}
