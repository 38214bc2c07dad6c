//! Multi-head scaled dot-product attention.

use std::rc::Rc;

use ndarray::Array2;

use super::graph::{Graph, Var};
use super::layers::Linear;
use super::params::{Bound, ParamSet};
use crate::error::{Error, Result};

/// Which keys each query may attend to.
#[derive(Debug, Clone)]
pub enum AttentionMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees only key `i`. Requires as many queries as keys.
    Diagonal,
    /// Arbitrary `|queries| × |keys|` pattern; `true` allows attention.
    Explicit(Rc<Array2<bool>>),
}

impl AttentionMask {
    pub fn explicit(m: Array2<bool>) -> Self {
        Self::Explicit(Rc::new(m))
    }

    /// Dense boolean form of the mask.
    pub fn to_matrix(&self, n_queries: usize, n_keys: usize) -> Array2<bool> {
        match self {
            Self::Full => Array2::from_elem((n_queries, n_keys), true),
            Self::Diagonal => Array2::from_shape_fn((n_queries, n_keys), |(i, j)| i == j),
            Self::Explicit(m) => (**m).clone(),
        }
    }

    fn validate(&self, n_queries: usize, n_keys: usize) -> Result<()> {
        match self {
            Self::Full => Ok(()),
            Self::Diagonal if n_queries == n_keys => Ok(()),
            Self::Diagonal => Err(Error::Shape(format!(
                "diagonal mask needs as many queries as keys ({n_queries} vs {n_keys})"
            ))),
            Self::Explicit(m) => {
                if m.dim() != (n_queries, n_keys) {
                    return Err(Error::Shape(format!(
                        "mask {:?} vs attention ({n_queries}, {n_keys})",
                        m.dim()
                    )));
                }
                match m.rows().into_iter().position(|r| !r.iter().any(|&b| b)) {
                    Some(row) => Err(Error::InvalidMask(row)),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub model_dim: usize,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ParamSet, name: &str, model_dim: usize, num_heads: usize) -> Self {
        assert!(num_heads > 0 && model_dim % num_heads == 0, "num_heads must divide model_dim");
        Self {
            query: Linear::new(params, &format!("{name}.query"), model_dim, model_dim),
            key: Linear::new(params, &format!("{name}.key"), model_dim, model_dim),
            value: Linear::new(params, &format!("{name}.value"), model_dim, model_dim),
            output: Linear::new(params, &format!("{name}.output"), model_dim, model_dim),
            model_dim,
            num_heads,
        }
    }

    /// Attends `queries` over `keys`/`values`; row `i` of the result depends
    /// only on query `i` and the keys its mask row allows.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        queries: Var,
        keys: Var,
        values: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (nq, dq) = g.shape(queries);
        let (nk, dk) = g.shape(keys);
        let (nv, dv) = g.shape(values);
        if dq != self.model_dim || dk != self.model_dim || dv != self.model_dim || nk != nv {
            return Err(Error::Shape(format!(
                "attention inputs q{:?} k{:?} v{:?} with model_dim {}",
                (nq, dq),
                (nk, dk),
                (nv, dv),
                self.model_dim
            )));
        }
        if nq == 0 {
            return Err(Error::EmptyInput);
        }
        if nk == 0 {
            return Err(Error::EmptyContext);
        }
        mask.validate(nq, nk)?;

        let v = self.value.forward(g, p, values);
        let mixed = if let AttentionMask::Diagonal = mask {
            // a single admissible key gets softmax weight exactly 1
            v
        } else {
            let q = self.query.forward(g, p, queries);
            let k = self.key.forward(g, p, keys);
            let soft_mask = match mask {
                AttentionMask::Full => None,
                other => Some(Rc::new(other.to_matrix(nq, nk))),
            };
            let head_dim = self.model_dim / self.num_heads;
            let scale = 1.0 / (head_dim as f64).sqrt();
            let mut heads = Vec::with_capacity(self.num_heads);
            for h in 0..self.num_heads {
                let qh = g.slice_cols(q, h * head_dim, head_dim);
                let kh = g.slice_cols(k, h * head_dim, head_dim);
                let vh = g.slice_cols(v, h * head_dim, head_dim);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, scale);
                let weights = g.softmax_rows(scores, soft_mask.as_ref());
                heads.push(g.matmul(weights, vh));
            }
            if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            }
        };
        Ok(self.output.forward(g, p, mixed))
    }
}
