//! Classical acquisitions over a plain GP: expected improvement,
//! probability of improvement, upper confidence bound and random search,
//! plus a gradient-free acquisition maximizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{
    fit_gp_hyperparameters, gp_posterior, points_matrix, EmbeddedObservations, GaussianPosterior, KernelParameters,
    MeanParameters, ObservationSet, DEFAULT_COMPONENTS, DEFAULT_JITTER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Ei,
    Pi,
    Ucb,
    Random,
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ei => "ei",
            Self::Pi => "pi",
            Self::Ucb => "ucb",
            Self::Random => "random",
        })
    }
}

impl std::str::FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ei" => Ok(Self::Ei),
            "pi" => Ok(Self::Pi),
            "ucb" => Ok(Self::Ucb),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown acquisition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaximizerConfig {
    pub n_starts: usize,
    pub refine_steps: usize,
}

impl Default for MaximizerConfig {
    fn default() -> Self {
        Self { n_starts: 512, refine_steps: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub xi: f64,
    pub kappa: f64,
    pub maximizer: MaximizerConfig,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { kind: AcquisitionKind::Ei, xi: 0.01, kappa: 2.0, maximizer: MaximizerConfig::default() }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) {
            return Err(Error::Config(format!("xi must be non-negative, got {}", self.xi)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.maximizer.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

fn check(post: &GaussianPosterior) -> Result<()> {
    if post.mean.len() != post.variance.len() {
        return Err(Error::Shape("posterior mean and variance lengths differ".into()));
    }
    if let Some(v) = post.variance.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::DegenerateDensity(*v));
    }
    Ok(())
}

/// `E[max(0, Y − best_y − xi)]` under each Gaussian marginal.
pub fn expected_improvement(post: &GaussianPosterior, best_y: f64, xi: f64) -> Result<Vec<f64>> {
    check(post)?;
    Ok(post
        .mean
        .iter()
        .zip(&post.variance)
        .map(|(&mu, &var)| {
            let sigma = var.sqrt();
            let d = mu - best_y - xi;
            if sigma == 0.0 {
                d.max(0.0)
            } else {
                let u = d / sigma;
                (d * normal_cdf(u) + sigma * normal_pdf(u)).max(0.0)
            }
        })
        .collect())
}

pub fn probability_of_improvement(post: &GaussianPosterior, best_y: f64, xi: f64) -> Result<Vec<f64>> {
    check(post)?;
    Ok(post
        .mean
        .iter()
        .zip(&post.variance)
        .map(|(&mu, &var)| {
            let sigma = var.sqrt();
            let d = mu - best_y - xi;
            if sigma == 0.0 {
                if d > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                normal_cdf(d / sigma)
            }
        })
        .collect())
}

pub fn upper_confidence_bound(post: &GaussianPosterior, kappa: f64) -> Result<Vec<f64>> {
    check(post)?;
    Ok(post.mean.iter().zip(&post.variance).map(|(mu, var)| mu + kappa * var.sqrt()).collect())
}

/// Scores of the configured acquisition. Random search has no score.
pub fn improvement_acquisitions(post: &GaussianPosterior, best_y: f64, config: &AcquisitionConfig) -> Result<Vec<f64>> {
    match config.kind {
        AcquisitionKind::Ei => expected_improvement(post, best_y, config.xi),
        AcquisitionKind::Pi => probability_of_improvement(post, best_y, config.xi),
        AcquisitionKind::Ucb => upper_confidence_bound(post, config.kappa),
        AcquisitionKind::Random => Err(Error::Config("random search has no acquisition score".into())),
    }
}

/// Maximizes a batch scoring function over the domain.
///
/// On a box: the best of `n_starts` uniform points, then up to
/// `refine_steps` compass rounds from the incumbent, each trying `±step`
/// along every coordinate, moving to the best improving neighbour or
/// halving the step. On a candidate list: the exact argmax. Non-finite
/// scores never win.
pub fn maximize_acquisition<F, R>(
    mut acq: F,
    domain: &Domain,
    config: &MaximizerConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let pick = |points: &[Vec<f64>], scores: &[f64]| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in scores.iter().enumerate().take(points.len()) {
            if !s.is_nan() && best.is_none_or(|(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
        best
    };
    match domain {
        Domain::Discrete(candidates) => {
            if candidates.is_empty() {
                return Err(Error::InvalidDomain("no candidates".into()));
            }
            let scores = acq(candidates)?;
            let (k, s) = pick(candidates, &scores).unwrap_or((0, f64::NEG_INFINITY));
            Ok((candidates[k].clone(), s))
        }
        Domain::Box(bounds) => {
            let starts: Vec<Vec<f64>> = (0..config.n_starts.max(1)).map(|_| bounds.sample_uniform(rng)).collect();
            let scores = acq(&starts)?;
            let (k, mut best) = pick(&starts, &scores).unwrap_or((0, f64::NEG_INFINITY));
            let mut x = starts[k].clone();
            let d = bounds.dim();
            let mut step: Vec<f64> = (0..d).map(|i| 0.1 * (bounds.hi()[i] - bounds.lo()[i])).collect();
            for _ in 0..config.refine_steps {
                let mut moves = Vec::with_capacity(2 * d);
                for i in 0..d {
                    for dir in [1.0, -1.0] {
                        let mut c = x.clone();
                        c[i] = (c[i] + dir * step[i]).clamp(bounds.lo()[i], bounds.hi()[i]);
                        if c[i] != x[i] {
                            moves.push(c);
                        }
                    }
                }
                if moves.is_empty() {
                    break;
                }
                let s = acq(&moves)?;
                match pick(&moves, &s) {
                    Some((j, v)) if v > best => {
                        best = v;
                        x = moves.swap_remove(j);
                    }
                    _ => step.iter_mut().for_each(|v| *v *= 0.5),
                }
            }
            Ok((x, best))
        }
    }
}

/// Posterior of a plain GP (identity embedding, unit scales) in the units
/// of `obs.y`. Points where the kernel is undefined get a `NaN` mean and
/// zero variance, so they never win a maximization.
pub fn classical_posterior(
    query: &[Vec<f64>],
    obs: &ObservationSet,
    kernel: &KernelParameters,
    mean: &MeanParameters,
    jitter: f64,
) -> Result<GaussianPosterior> {
    let emb = EmbeddedObservations { z: obs.x_matrix(), u: vec![0.0; obs.len()], y: obs.standardized_y() };
    let run = |q: &[Vec<f64>]| {
        gp_posterior(points_matrix(q).view(), &vec![0.0; q.len()], &emb, kernel, mean, jitter, false)
            .map(|p| obs.destandardize(&p))
    };
    match run(query) {
        Ok(p) => Ok(p),
        Err(Error::DegenerateEmbedding(_)) => {
            let mut out = GaussianPosterior { mean: Vec::new(), variance: Vec::new(), covariance: None };
            for q in query {
                match run(std::slice::from_ref(q)) {
                    Ok(p) => {
                        out.mean.push(p.mean[0]);
                        out.variance.push(p.variance[0]);
                    }
                    Err(Error::DegenerateEmbedding(_)) => {
                        out.mean.push(f64::NAN);
                        out.variance.push(0.0);
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        }
        Err(e) => Err(e),
    }
}

/// A classical-GP optimizer whose hyperparameters are refit by marginal
/// likelihood every `refit_every` new observations.
#[derive(Debug, Clone)]
pub struct ClassicalGp {
    pub config: AcquisitionConfig,
    pub kernel: KernelParameters,
    pub mean: MeanParameters,
    pub jitter: f64,
    pub refit_every: usize,
    pub refit_steps: usize,
    pub refit_lr: f64,
    fitted_at: usize,
}

impl ClassicalGp {
    pub fn new(config: AcquisitionConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            kernel: KernelParameters::unit(DEFAULT_COMPONENTS),
            mean: MeanParameters::zeros(dim),
            jitter: DEFAULT_JITTER,
            refit_every: 10,
            refit_steps: 50,
            refit_lr: 0.05,
            fitted_at: 0,
        })
    }

    /// Next query given all observations so far.
    pub fn propose<R: Rng + ?Sized>(&mut self, obs: &ObservationSet, domain: &Domain, rng: &mut R) -> Result<Vec<f64>> {
        if self.config.kind == AcquisitionKind::Random || obs.is_empty() {
            return domain.sample_uniform(rng);
        }
        if obs.len() >= 2 && obs.len() >= self.fitted_at + self.refit_every {
            let (k, m) = fit_gp_hyperparameters(obs, &self.kernel, &self.mean, self.refit_steps, self.refit_lr)?;
            self.kernel = k;
            self.mean = m;
            self.fitted_at = obs.len();
        }
        let best_y = obs.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let config = self.config;
        let (kernel, mean, jitter) = (&self.kernel, &self.mean, self.jitter);
        let (x, _) = maximize_acquisition(
            |q| {
                let post = classical_posterior(q, obs, kernel, mean, jitter)?;
                let finite = GaussianPosterior {
                    mean: post.mean.iter().map(|m| if m.is_nan() { f64::NEG_INFINITY } else { *m }).collect(),
                    ..post
                };
                let mut s = improvement_acquisitions(&finite, best_y, &config)?;
                for (v, m) in s.iter_mut().zip(&finite.mean) {
                    if *m == f64::NEG_INFINITY {
                        *v = f64::NAN;
                    }
                }
                Ok(s)
            },
            domain,
            &config.maximizer,
            rng,
        )?;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BoxDomain;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn post(mean: Vec<f64>, variance: Vec<f64>) -> GaussianPosterior {
        GaussianPosterior { mean, variance, covariance: None }
    }

    /// `E[max(0, Y − best)]` by midpoint quadrature over ±12σ.
    fn ei_quadrature(mu: f64, sigma: f64, best: f64) -> f64 {
        let n = 200_000;
        let lo = mu - 12.0 * sigma;
        let h = 24.0 * sigma / n as f64;
        (0..n)
            .map(|i| {
                let y = lo + (i as f64 + 0.5) * h;
                (y - best).max(0.0) * normal_pdf((y - mu) / sigma) / sigma * h
            })
            .sum()
    }

    #[test]
    fn ei_examples() {
        assert_eq!(expected_improvement(&post(vec![0.5], vec![0.0]), 1.0, 0.0).unwrap(), vec![0.0]);
        let v = expected_improvement(&post(vec![1.0], vec![1.0]), 1.0, 0.0).unwrap()[0];
        assert!((v - 0.3989423).abs() < 1e-7);
        assert!((v - ei_quadrature(1.0, 1.0, 1.0)).abs() < 1e-8);
        for (mu, s, best) in [(0.3, 0.7, 0.5), (-1.0, 2.0, 0.0), (2.0, 0.1, 1.9)] {
            let v = expected_improvement(&post(vec![mu], vec![s * s]), best, 0.0).unwrap()[0];
            assert!((v - ei_quadrature(mu, s, best)).abs() < 1e-7, "{mu} {s} {best}");
        }
        let grid: Vec<f64> = (1..50).map(|i| (i as f64 * 0.1).powi(2)).collect();
        let ei = expected_improvement(&post(vec![0.0; 49], grid), 0.0, 0.0).unwrap();
        assert!(ei.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn pi_and_ucb_examples() {
        let cfg = AcquisitionConfig { kind: AcquisitionKind::Pi, xi: 0.0, ..AcquisitionConfig::default() };
        assert_eq!(improvement_acquisitions(&post(vec![1.0], vec![1.0]), 1.0, &cfg).unwrap(), vec![0.5]);
        assert_eq!(probability_of_improvement(&post(vec![0.5, 2.0], vec![0.0, 0.0]), 1.0, 0.0).unwrap(), vec![0.0, 1.0]);
        let p = post(vec![0.3, -2.0], vec![4.0, 0.25]);
        assert_eq!(upper_confidence_bound(&p, 0.0).unwrap(), p.mean);
        assert_eq!(upper_confidence_bound(&p, 2.0).unwrap(), vec![4.3, -1.0]);
        let random = AcquisitionConfig { kind: AcquisitionKind::Random, ..AcquisitionConfig::default() };
        assert!(matches!(improvement_acquisitions(&p, 0.0, &random), Err(Error::Config(_))));
        assert!(expected_improvement(&post(vec![0.0], vec![-1.0]), 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pi_in_unit_interval(mu in -10.0..10.0f64, var in 0.0..25.0f64, best in -10.0..10.0f64, xi in 0.0..1.0f64) {
            let v = probability_of_improvement(&post(vec![mu], vec![var]), best, xi).unwrap()[0];
            prop_assert!((0.0..=1.0).contains(&v));
            let e = expected_improvement(&post(vec![mu], vec![var]), best, xi).unwrap()[0];
            prop_assert!(e >= 0.0);
        }
    }

    #[test]
    fn certain_non_improving_points() {
        let p = post(vec![0.2, 0.9], vec![0.0, 0.0]);
        assert_eq!(expected_improvement(&p, 1.0, 0.01).unwrap(), vec![0.0, 0.0]);
        assert!(probability_of_improvement(&p, 1.0, 0.0).unwrap().iter().all(|v| *v <= 0.5));
    }

    #[test]
    fn maximizer_finds_bowl_center() {
        let domain = Domain::Box(BoxDomain::cube(2, 0.0, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = |q: &[Vec<f64>]| Ok(q.iter().map(|x| -((x[0] - 0.3).powi(2) + (x[1] - 0.3).powi(2))).collect());
        let (x, _) = maximize_acquisition(f, &domain, &MaximizerConfig::default(), &mut rng).unwrap();
        assert!(((x[0] - 0.3).powi(2) + (x[1] - 0.3).powi(2)).sqrt() < 0.02, "{x:?}");
    }

    #[test]
    fn maximizer_discrete_and_single_start() {
        let cands = vec![vec![0.0], vec![0.5], vec![0.9]];
        let domain = Domain::Discrete(cands);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = |q: &[Vec<f64>]| Ok(q.iter().map(|x| -(x[0] - 0.6).abs()).collect());
        assert_eq!(maximize_acquisition(f, &domain, &MaximizerConfig::default(), &mut rng).unwrap().0, vec![0.5]);

        let boxed = Domain::Box(BoxDomain::cube(3, -1.0, 1.0).unwrap());
        let cfg = MaximizerConfig { n_starts: 1, refine_steps: 0 };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let (x, _) = maximize_acquisition(|q: &[Vec<f64>]| Ok(vec![0.0; q.len()]), &boxed, &cfg, &mut a).unwrap();
        assert_eq!(x, boxed.sample_uniform(&mut b).unwrap());
    }

    #[test]
    fn maximizer_never_worse_than_best_start() {
        let domain = Domain::Box(BoxDomain::cube(2, -1.0, 1.0).unwrap());
        let f = |q: &[Vec<f64>]| -> Result<Vec<f64>> {
            Ok(q.iter().map(|x| (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + 0.1 * x[0]).collect())
        };
        for seed in 0..20 {
            let cfg = MaximizerConfig { n_starts: 16, refine_steps: 10 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, best) = maximize_acquisition(f, &domain, &cfg, &mut rng).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let starts: Vec<Vec<f64>> = (0..16).map(|_| domain.sample_uniform(&mut rng).unwrap()).collect();
            let start_best = f(&starts).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= start_best);
        }
    }

    fn bowl(x: &[f64]) -> f64 {
        -((x[0] - 0.35).powi(2) + (x[1] + 0.2).powi(2))
    }

    fn run_loop(kind: AcquisitionKind, seed: u64, budget: usize) -> Vec<f64> {
        let domain = Domain::Box(BoxDomain::cube(2, -1.0, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AcquisitionConfig { kind, ..AcquisitionConfig::default() };
        let mut gp = ClassicalGp::new(cfg, 2).unwrap();
        let mut obs = ObservationSet::empty();
        let mut regret = Vec::new();
        for t in 0..budget {
            let x = if t < 3 { domain.sample_uniform(&mut rng).unwrap() } else { gp.propose(&obs, &domain, &mut rng).unwrap() };
            obs.push(x.clone(), bowl(&x)).unwrap();
            let best = obs.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            regret.push(-best);
        }
        regret
    }

    #[test]
    fn ei_loop_beats_random_search() {
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let mut ei_final = Vec::new();
        let mut rs_final = Vec::new();
        for seed in 0..5 {
            let r = run_loop(AcquisitionKind::Ei, seed, 25);
            assert!(r.windows(2).all(|w| w[1] <= w[0]));
            ei_final.push(*r.last().unwrap());
            rs_final.push(*run_loop(AcquisitionKind::Random, seed, 25).last().unwrap());
        }
        assert!(median(ei_final.clone()) < median(rs_final.clone()), "{ei_final:?} vs {rs_final:?}");
    }

    #[test]
    fn config_validation() {
        assert!(AcquisitionConfig { xi: -1.0, ..AcquisitionConfig::default() }.validate().is_err());
        assert!(AcquisitionConfig { kappa: 0.0, ..AcquisitionConfig::default() }.validate().is_err());
        let bad = AcquisitionConfig { maximizer: MaximizerConfig { n_starts: 0, refine_steps: 1 }, ..AcquisitionConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("ucb".parse::<AcquisitionKind>().unwrap(), AcquisitionKind::Ucb);
    }
}
