//! Differentiable building blocks: a matrix autodiff tape, linear and
//! normalization layers, multi-head attention, transformer stacks and the
//! tanh-squashed Gaussian policy head.

pub mod attention;
pub mod graph;
pub mod head;
pub mod layers;
pub mod params;
pub mod transformer;

pub use attention::{AttentionMask, MultiHeadAttention};
pub use graph::{Gradients, Graph, Var};
pub use head::{TanhGaussian, TanhGaussianHead};
pub use layers::{FeedForward, LayerNorm, Linear, Mlp};
pub use params::{Adam, AdamConfig, Bound, ParamId, ParamSet};
pub use transformer::{TransformerConfig, TransformerDecoder, TransformerEncoder};

#[cfg(test)]
mod tests {
    use super::params::{central_differences, max_relative_error};
    use super::*;
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    fn set_identity(params: &mut ParamSet, lin: &Linear) {
        let w = params.get_mut(lin.w);
        w.fill(0.0);
        w.diag_mut().fill(1.0);
        params.get_mut(lin.b).fill(0.0);
    }

    /// softmax(QKᵀ/√d)V per head, written as explicit loops.
    fn naive_attention(
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
        params: &ParamSet,
        mha: &MultiHeadAttention,
    ) -> Array2<f64> {
        let proj = |x: &Array2<f64>, l: &Linear| x.dot(params.get(l.w)) + params.get(l.b);
        let q = proj(q_in, &mha.query);
        let k = proj(kv_in, &mha.key);
        let v = proj(kv_in, &mha.value);
        let hd = mha.model_dim / mha.num_heads;
        let mut mixed = Array2::<f64>::zeros((q.nrows(), mha.model_dim));
        for h in 0..mha.num_heads {
            for i in 0..q.nrows() {
                let mut scores = vec![0.0; k.nrows()];
                for j in 0..k.nrows() {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[[i, h * hd + c]] * k[[j, h * hd + c]];
                    }
                    scores[j] = s / (hd as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..k.nrows() {
                    for c in 0..hd {
                        mixed[[i, h * hd + c]] += e[j] / z * v[[j, h * hd + c]];
                    }
                }
            }
        }
        proj(&mixed, &mha.output)
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut params = ParamSet::new(1);
        let mha = MultiHeadAttention::new(&mut params, "attn", 4, 2);
        for l in [&mha.query, &mha.key, &mha.value, &mha.output] {
            set_identity(&mut params, l);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let q = g.constant(Array2::from_shape_vec((1, 4), vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let kv_val = Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kv = g.constant(kv_val.clone());
        let mask = AttentionMask::explicit(Array2::from_elem((1, 1), true));
        let out = mha.forward(&mut g, &p, q, kv, kv, &mask).unwrap();
        assert_eq!(g.value(out), &kv_val);
    }

    #[test]
    fn attention_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new(2);
        let mha = MultiHeadAttention::new(&mut params, "attn", 8, 2);
        let q_in = random_tokens(&mut rng, 2, 8);
        let kv_in = random_tokens(&mut rng, 4, 8);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let q = g.constant(q_in.clone());
        let kv = g.constant(kv_in.clone());
        let out = mha.forward(&mut g, &p, q, kv, kv, &AttentionMask::Full).unwrap();
        let expected = naive_attention(&q_in, &kv_in, &params, &mha);
        let diff = (g.value(out) - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn diagonal_mask_ignores_other_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new(3);
        let mha = MultiHeadAttention::new(&mut params, "attn", 4, 2);
        let x = random_tokens(&mut rng, 3, 4);
        let run = |keys: &Array2<f64>, mask: &AttentionMask| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let q = g.constant(x.clone());
            let k = g.constant(keys.clone());
            let out = mha.forward(&mut g, &p, q, k, k, mask).unwrap();
            g.value(out).clone()
        };
        let base = run(&x, &AttentionMask::Diagonal);
        let explicit = run(&x, &AttentionMask::explicit(AttentionMask::Diagonal.to_matrix(3, 3)));
        assert!((&base - &explicit).iter().all(|v| v.abs() < 1e-12));
        let mut other = random_tokens(&mut rng, 3, 4);
        other.row_mut(1).assign(&x.row(1));
        let changed = run(&other, &AttentionMask::explicit(AttentionMask::Diagonal.to_matrix(3, 3)));
        for c in 0..4 {
            assert!((changed[[1, c]] - base[[1, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_errors() {
        let mut params = ParamSet::new(4);
        let mha = MultiHeadAttention::new(&mut params, "attn", 4, 2);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let q = g.constant(Array2::zeros((2, 4)));
        let k = g.constant(Array2::zeros((3, 4)));
        let mut m = Array2::from_elem((2, 3), true);
        m.row_mut(1).fill(false);
        assert!(matches!(
            mha.forward(&mut g, &p, q, k, k, &AttentionMask::explicit(m)),
            Err(crate::Error::InvalidMask(1))
        ));
        let bad = g.constant(Array2::zeros((3, 5)));
        assert!(matches!(mha.forward(&mut g, &p, q, bad, bad, &AttentionMask::Full), Err(crate::Error::Shape(_))));
        assert!(matches!(mha.forward(&mut g, &p, q, k, k, &AttentionMask::Diagonal), Err(crate::Error::Shape(_))));
    }

    fn encode(enc: &TransformerEncoder, params: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let t = g.constant(x.clone());
        let out = enc.forward(&mut g, &p, t).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::new(5);
        let enc = TransformerEncoder::new(&mut params, "enc", TransformerConfig::tiny(8));
        let x = random_tokens(&mut rng, 3, 8);
        let perm = [2usize, 0, 1];
        let xp = x.select(Axis(0), &perm);
        let a = encode(&enc, &params, &x);
        let b = encode(&enc, &params, &xp);
        let ap = a.select(Axis(0), &perm);
        assert!((&ap - &b).iter().all(|v| v.abs() < 1e-6));

        let dup = ndarray::concatenate(Axis(0), &[x.row(0).insert_axis(Axis(0)), x.row(0).insert_axis(Axis(0))]).unwrap();
        let d = encode(&enc, &params, &dup);
        assert!((&d.row(0) - &d.row(1)).iter().all(|v| v.abs() < 1e-12));

        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let empty = g.constant(Array2::zeros((0, 8)));
        assert!(matches!(enc.forward(&mut g, &p, empty), Err(crate::Error::EmptyInput)));
    }

    fn decode(dec: &TransformerDecoder, params: &ParamSet, q: &Array2<f64>, ctx: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let qv = g.constant(q.clone());
        let cv = g.constant(ctx.clone());
        let out = dec.forward(&mut g, &p, qv, cv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn decoder_queries_are_independent_and_context_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new(6);
        let dec = TransformerDecoder::new(&mut params, "dec", TransformerConfig::tiny(8));
        let q = random_tokens(&mut rng, 2, 8);
        let ctx = random_tokens(&mut rng, 4, 8);
        let both = decode(&dec, &params, &q, &ctx);
        let first = decode(&dec, &params, &q.slice(ndarray::s![0..1, ..]).to_owned(), &ctx);
        assert!((&both.row(0) - &first.row(0)).iter().all(|v| v.abs() < 1e-6));
        let ctx_p = ctx.select(Axis(0), &[3, 1, 0, 2]);
        let permuted = decode(&dec, &params, &q, &ctx_p);
        assert!((&both - &permuted).iter().all(|v| v.abs() < 1e-6));

        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let qv = g.constant(q);
        let empty = g.constant(Array2::zeros((0, 8)));
        assert!(matches!(dec.forward(&mut g, &p, qv, empty), Err(crate::Error::EmptyContext)));
    }

    #[test]
    fn single_query_single_context_matches_reference() {
        let cfg = TransformerConfig { num_heads: 1, num_decoder_layers: 1, ..TransformerConfig::tiny(4) };
        let mut params = ParamSet::new(7);
        let dec = TransformerDecoder::new(&mut params, "dec", cfg);
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.ends_with(".weight") && params.get(i).nrows() == params.get(i).ncols() {
                let w = params.get_mut(i);
                w.fill(0.0);
                w.diag_mut().fill(1.0);
            }
        }
        let q = Array2::from_shape_vec((1, 4), vec![0.5, -0.2, 0.1, 0.9]).unwrap();
        let c = Array2::from_shape_vec((1, 4), vec![-0.3, 0.8, 0.4, -1.0]).unwrap();
        let out = decode(&dec, &params, &q, &c);

        // pre-norm residual stack, written out with plain arrays
        let ln = |x: &Array2<f64>| {
            let m = x.mean().unwrap();
            let v = x.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            x.mapv(|a| (a - m) / (v + 1e-5).sqrt())
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
        let mut h = q.clone();
        h = &h + &ln(&h); // diagonal self-attention with identity projections
        h = &h + &c; // one context token: weight 1 on its value
        let ff_in = ln(&h);
        let hid = names.iter().position(|n| n.ends_with("ff.hidden.weight")).unwrap();
        let out_w = names.iter().position(|n| n.ends_with("ff.out.weight")).unwrap();
        let hidden = ff_in.dot(params.get(hid)).mapv(gelu);
        h = &h + &hidden.dot(params.get(out_w));
        let diff = (&out - &h).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = TransformerConfig::tiny(4);
        let mut params = ParamSet::new(8);
        let enc = TransformerEncoder::new(&mut params, "enc", cfg);
        let dec = TransformerDecoder::new(&mut params, "dec", cfg);
        // perturb the deterministic initial values so every path is active
        for t in params.tensors_mut() {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        let ctx = random_tokens(&mut rng, 3, 4);
        let q = random_tokens(&mut rng, 2, 4);
        let weights = random_tokens(&mut rng, 2, 4);
        let loss = |params: &ParamSet, g: &mut Graph, p: &Bound| {
            let c = g.constant(ctx.clone());
            let qv = g.constant(q.clone());
            let lat = enc.forward(g, p, c).unwrap();
            let out = dec.forward(g, p, qv, lat).unwrap();
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w);
            let _ = params;
            g.sum(prod)
        };
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let l = loss(&params, &mut g, &p);
        let grads = params.collect_grads(&p, &g.backward(l));
        let numeric = central_differences(&mut params.clone(), 1e-4, |ps| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, false);
            let l = loss(ps, &mut g, &p);
            g.scalar(l)
        });
        for (i, (a, n)) in grads.iter().zip(&numeric).enumerate() {
            let err = max_relative_error(a, n, 1e-3);
            assert!(err < 1e-3, "{}: {err}", params.names()[i]);
        }
    }

    #[test]
    fn initialization_is_deterministic() {
        let build = |seed| {
            let mut p = ParamSet::new(seed);
            TransformerEncoder::new(&mut p, "enc", TransformerConfig::default());
            p
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }
}
