//! Tanh-squashed Gaussian policy head with an affine map onto a box domain.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use super::layers::{Linear, Mlp};
use super::params::{Bound, ParamSet};
use crate::domain::BoxDomain;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const TANH_LIMIT: f64 = 1.0 - 1e-12;

/// `log(1 − tanh²(u))`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - super::graph::softplus(-2.0 * u))
}

/// Per-sample distribution in pre-tanh coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhGaussian {
    pub mean: Vec<f64>,
    /// Already clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Vec<f64>,
}

impl TanhGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws an action strictly inside `bounds` together with its log-density
    /// under the squashed and rescaled distribution.
    pub fn sample<R: Rng + ?Sized>(&self, bounds: &BoxDomain, rng: &mut R) -> (Vec<f64>, f64) {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(bounds, &eps)
    }

    /// The action reached from standard-normal draws `eps`, with its
    /// log-density.
    pub fn sample_with_noise(&self, bounds: &BoxDomain, eps: &[f64]) -> (Vec<f64>, f64) {
        let mut action = Vec::with_capacity(self.dim());
        let mut logp = 0.0;
        for d in 0..self.dim() {
            let u = self.mean[d] + self.log_std[d].exp() * eps[d];
            let t = u.tanh().clamp(-TANH_LIMIT, TANH_LIMIT);
            action.push(bounds.mid(d) + bounds.half_width(d) * t);
            logp += -0.5 * eps[d] * eps[d] - HALF_LN_2PI - self.log_std[d] - log_one_minus_tanh_sq(u)
                - bounds.half_width(d).ln();
        }
        (action, logp)
    }

    /// Log-density of an action strictly inside `bounds`.
    pub fn log_density(&self, bounds: &BoxDomain, action: &[f64]) -> f64 {
        let mut logp = 0.0;
        for d in 0..self.dim() {
            let t = ((action[d] - bounds.mid(d)) / bounds.half_width(d)).clamp(-TANH_LIMIT, TANH_LIMIT);
            let u = t.atanh();
            let z = (u - self.mean[d]) / self.log_std[d].exp();
            logp += -0.5 * z * z - HALF_LN_2PI - self.log_std[d] - (1.0 - t * t).ln() - bounds.half_width(d).ln();
        }
        logp
    }

    /// Deterministic action `mid + half·tanh(mean)`.
    pub fn mode(&self, bounds: &BoxDomain) -> Vec<f64> {
        (0..self.dim()).map(|d| bounds.mid(d) + bounds.half_width(d) * self.mean[d].tanh()).collect()
    }
}

/// Maps a latent vector to the mean and clamped log-std of a
/// [`TanhGaussian`] over `action_dim` coordinates.
#[derive(Debug, Clone)]
pub struct TanhGaussianHead {
    net: Mlp,
    pub action_dim: usize,
}

impl TanhGaussianHead {
    pub fn new(params: &mut ParamSet, name: &str, latent_dim: usize, hidden: usize, action_dim: usize) -> Self {
        let mut layers = Mlp::new(params, name, &[latent_dim, hidden]).layers;
        let out = Linear::with_scale(params, &format!("{name}.out"), hidden, 2 * action_dim, 1e-2);
        // bias the raw log-std so the initial policy has unit pre-tanh std
        let raw0 = (2.0 * (0.0 - LOG_STD_MIN) / (LOG_STD_MAX - LOG_STD_MIN) - 1.0).atanh();
        params.get_mut(out.b).slice_mut(ndarray::s![.., action_dim..]).fill(raw0);
        layers.push(out);
        Self { net: Mlp { layers }, action_dim }
    }

    /// `(mean, log_std)`, both `m × action_dim`, for `m` latent rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> (Var, Var) {
        let out = self.net.forward(g, p, latent);
        let mean = g.slice_cols(out, 0, self.action_dim);
        let raw = g.slice_cols(out, self.action_dim, self.action_dim);
        let t = g.tanh(raw);
        let t = g.add_const(t, 1.0);
        let s = g.scale(t, 0.5 * (LOG_STD_MAX - LOG_STD_MIN));
        let log_std = g.add_const(s, LOG_STD_MIN);
        (mean, log_std)
    }

    /// Distributions for each latent row, read off graph values.
    pub fn distributions(g: &Graph, mean: Var, log_std: Var) -> Vec<TanhGaussian> {
        g.value(mean)
            .rows()
            .into_iter()
            .zip(g.value(log_std).rows())
            .map(|(m, s)| TanhGaussian { mean: m.to_vec(), log_std: s.to_vec() })
            .collect()
    }

    /// Reparameterized sample from `noise` (`m × action_dim` standard normal
    /// draws). Returns the action rows and their `m × 1` log-densities.
    pub fn rsample(
        g: &mut Graph,
        mean: Var,
        log_std: Var,
        noise: &Array2<f64>,
        bounds: &BoxDomain,
    ) -> (Var, Var) {
        let (m, dim) = g.shape(mean);
        assert_eq!(noise.dim(), (m, dim), "noise shape");
        let eps = g.constant(noise.clone());
        let std = g.exp(log_std);
        let spread = g.mul(std, eps);
        let u = g.add(mean, spread);
        let t = g.tanh(u);
        let half = Array2::from_shape_fn((1, dim), |(_, d)| bounds.half_width(d));
        let mid = Array2::from_shape_fn((1, dim), |(_, d)| bounds.mid(d));
        let half_v = g.constant(half);
        let mid_v = g.constant(mid);
        let scaled = g.mul_row(t, half_v);
        let action = g.add_row(scaled, mid_v);

        let ln_half: f64 = (0..dim).map(|d| bounds.half_width(d).ln()).sum();
        let base = noise
            .rows()
            .into_iter()
            .map(|r| -0.5 * r.dot(&r) - dim as f64 * HALF_LN_2PI - ln_half)
            .collect::<Vec<_>>();
        let base = g.constant(Array2::from_shape_vec((m, 1), base).expect("shape"));
        let sum_log_std = g.sum_rows(log_std);
        let neg2u = g.scale(u, -2.0);
        let sp = g.softplus(neg2u);
        let u_plus_sp = g.add(u, sp);
        let s = g.sum_rows(u_plus_sp);
        // Σ log(1 − tanh²u) = 2·(D·ln2 − Σ(u + softplus(−2u)))
        let s = g.scale(s, -2.0);
        let jac = g.add_const(s, 2.0 * dim as f64 * std::f64::consts::LN_2);
        let lp = g.sub(base, sum_log_std);
        let logp = g.sub(lp, jac);
        (action, logp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> BoxDomain {
        BoxDomain::cube(1, -1.0, 1.0).unwrap()
    }

    #[test]
    fn floor_std_collapses_to_midpoint() {
        let dist = TanhGaussian::new(vec![0.0], vec![-1e9]);
        assert_eq!(dist.log_std[0], LOG_STD_MIN);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (a, _) = dist.sample(&unit(), &mut rng);
            worst = worst.max(a[0].abs());
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn affine_midpoint() {
        let b = BoxDomain::cube(1, 0.0, 2.0).unwrap();
        let dist = TanhGaussian::new(vec![0.0], vec![0.0]);
        assert_eq!(dist.mode(&b), vec![1.0]);
    }

    #[test]
    fn density_integrates_to_one() {
        let b = BoxDomain::cube(1, -1.0, 1.0).unwrap();
        for (m, s) in [(0.0, 0.0), (0.7, -0.5), (-1.5, 0.8)] {
            let dist = TanhGaussian::new(vec![m], vec![s]);
            let n = 100_000;
            let h = 2.0 / n as f64;
            let total: f64 = (0..n).map(|i| dist.log_density(&b, &[-1.0 + (i as f64 + 0.5) * h]).exp() * h).sum();
            assert!((total - 1.0).abs() < 0.01, "mean {m} log_std {s}: {total}");
        }
    }

    #[test]
    fn sample_density_matches_log_density() {
        let b = BoxDomain::new(vec![-2.0, 0.0], vec![1.0, 5.0]).unwrap();
        let dist = TanhGaussian::new(vec![0.3, -0.4], vec![-0.2, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (a, lp) = dist.sample(&b, &mut rng);
            assert!(b.contains(&a));
            assert!((dist.log_density(&b, &a) - lp).abs() < 1e-6);
        }
    }

    #[test]
    fn reproducible_given_rng_state() {
        let dist = TanhGaussian::new(vec![0.1, 0.2], vec![0.0, -1.0]);
        let b = BoxDomain::cube(2, -1.0, 1.0).unwrap();
        let a = dist.sample(&b, &mut ChaCha8Rng::seed_from_u64(4));
        let c = dist.sample(&b, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, c);
    }

    #[test]
    fn graph_rsample_agrees_with_scalar_density() {
        let mut params = ParamSet::new(3);
        let head = TanhGaussianHead::new(&mut params, "head", 4, 8, 2);
        let bounds = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let latent = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3));
        let (mean, log_std) = head.forward(&mut g, &p, latent);
        let noise = Array2::from_shape_fn((3, 2), |(i, j)| 0.5 * i as f64 - 0.7 * j as f64);
        let (action, logp) = TanhGaussianHead::rsample(&mut g, mean, log_std, &noise, &bounds);
        let dists = TanhGaussianHead::distributions(&g, mean, log_std);
        for i in 0..3 {
            let a: Vec<f64> = g.value(action).row(i).to_vec();
            let expected = dists[i].log_density(&bounds, &a);
            assert!((g.value(logp)[[i, 0]] - expected).abs() < 1e-8);
        }
    }
}
