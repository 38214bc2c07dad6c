//! Pre-norm transformer encoder and decoder stacks without positional
//! embeddings, so the encoder is permutation-equivariant and the decoder is
//! invariant to the order of its context.

use serde::{Deserialize, Serialize};

use super::attention::{AttentionMask, MultiHeadAttention};
use super::graph::{Graph, Var};
use super::layers::{FeedForward, LayerNorm};
use super::params::{Bound, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub feedforward_dim: usize,
    #[serde(default)]
    pub use_positional_embedding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            feedforward_dim: 128,
            use_positional_embedding: false,
        }
    }
}

impl TransformerConfig {
    /// Compact configuration used by tests and gradient checks.
    pub fn tiny(model_dim: usize) -> Self {
        Self {
            model_dim,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            feedforward_dim: 2 * model_dim,
            use_positional_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} does not divide model_dim {}",
                self.num_heads, self.model_dim
            )));
        }
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.use_positional_embedding {
            return Err(Error::Config("positional embeddings are not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    pub config: TransformerConfig,
}

impl TransformerEncoder {
    pub fn new(params: &mut ParamSet, name: &str, config: TransformerConfig) -> Self {
        let d = config.model_dim;
        let layers = (0..config.num_encoder_layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(params, &format!("{n}.norm_attn"), d),
                    attn: MultiHeadAttention::new(params, &format!("{n}.attn"), d, config.num_heads),
                    norm_ff: LayerNorm::new(params, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(params, &format!("{n}.ff"), d, config.feedforward_dim, d),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(params, &format!("{name}.final_norm"), d);
        Self { layers, final_norm, config }
    }

    /// Encodes an `n × model_dim` token matrix into `n` latent tokens.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let (n, d) = g.shape(tokens);
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if d != self.config.model_dim {
            return Err(Error::Shape(format!("token dim {d} vs model_dim {}", self.config.model_dim)));
        }
        let mut h = tokens;
        for layer in &self.layers {
            let x = layer.norm_attn.forward(g, p, h);
            let a = layer.attn.forward(g, p, x, x, x, &AttentionMask::Full)?;
            h = g.add(h, a);
            let x = layer.norm_ff.forward(g, p, h);
            let f = layer.ff.forward(g, p, x);
            h = g.add(h, f);
        }
        Ok(self.final_norm.forward(g, p, h))
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

/// Decoder whose query self-attention is restricted to the diagonal, so each
/// output row depends on its own query and the context only.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    layers: Vec<DecoderLayer>,
    pub config: TransformerConfig,
}

impl TransformerDecoder {
    pub fn new(params: &mut ParamSet, name: &str, config: TransformerConfig) -> Self {
        let d = config.model_dim;
        let layers = (0..config.num_decoder_layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                DecoderLayer {
                    norm_self: LayerNorm::new(params, &format!("{n}.norm_self"), d),
                    self_attn: MultiHeadAttention::new(params, &format!("{n}.self_attn"), d, config.num_heads),
                    norm_cross: LayerNorm::new(params, &format!("{n}.norm_cross"), d),
                    cross_attn: MultiHeadAttention::new(params, &format!("{n}.cross_attn"), d, config.num_heads),
                    norm_ff: LayerNorm::new(params, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(params, &format!("{n}.ff"), d, config.feedforward_dim, d),
                }
            })
            .collect();
        Self { layers, config }
    }

    /// Decodes `queries` against encoder `context` latents. The output is not
    /// normalized; callers apply their own final normalization.
    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: Var, context: Var) -> Result<Var> {
        self.forward_masked(g, p, queries, context, &AttentionMask::Diagonal)
    }

    /// Like [`forward`](Self::forward) with an explicit query self-attention mask.
    pub fn forward_masked(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        context: Var,
        self_mask: &AttentionMask,
    ) -> Result<Var> {
        if g.shape(context).0 == 0 {
            return Err(Error::EmptyContext);
        }
        if g.shape(queries).0 == 0 {
            return Err(Error::EmptyInput);
        }
        let mut h = queries;
        for layer in &self.layers {
            let x = layer.norm_self.forward(g, p, h);
            let a = layer.self_attn.forward(g, p, x, x, x, self_mask)?;
            h = g.add(h, a);
            let x = layer.norm_cross.forward(g, p, h);
            let c = layer.cross_attn.forward(g, p, x, context, context, &AttentionMask::Full)?;
            h = g.add(h, c);
            let x = layer.norm_ff.forward(g, p, h);
            let f = layer.ff.forward(g, p, x);
            h = g.add(h, f);
        }
        Ok(h)
    }
}
