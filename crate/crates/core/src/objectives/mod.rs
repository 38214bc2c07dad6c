//! Benchmark objective families. Every variant is exposed in maximization
//! form, so the Thomson energy and the Powell function are negated.

pub mod optimum;
pub mod table;
pub mod thomson;

use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{BoxDomain, Domain};
use crate::error::{Error, Result};

pub use optimum::{estimate_optimum, OptimumCache, DEFAULT_OPTIMUM_BUDGET};
pub use table::load_discrete_candidates;
pub use thomson::thomson_energy;

pub const DEFAULT_BASE_ELECTRONS: usize = 32;
/// Tolerance above `f_star` before an observation forces a refresh.
pub const F_STAR_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ThomsonSlice,
    Powell,
    DiscreteTable,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ThomsonSlice => "thomson_slice",
            Family::Powell => "powell",
            Family::DiscreteTable => "discrete_table",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thomson_slice" => Ok(Family::ThomsonSlice),
            "powell" => Ok(Family::Powell),
            "discrete_table" => Ok(Family::DiscreteTable),
            other => Err(Error::Config(format!("unknown objective family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    ThomsonSlice { a: Array2<f64>, c: Array1<f64> },
    Powell { shift: Vec<f64> },
    Table(table::CandidateTable),
}

/// One member of an objective family.
#[derive(Debug, Clone)]
pub struct ObjectiveVariant {
    pub id: String,
    pub family: Family,
    pub seed: u64,
    domain: Domain,
    kind: Kind,
    f_star: f64,
}

impl ObjectiveVariant {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Optimum of the maximization form (estimated for the continuous
    /// families).
    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn set_f_star(&mut self, f_star: f64) {
        self.f_star = f_star;
    }

    /// Raises `f_star` when `y` exceeds it by more than [`F_STAR_SLACK`].
    /// Returns whether a refresh happened.
    pub fn observe(&mut self, y: f64) -> bool {
        if y > self.f_star + F_STAR_SLACK {
            log::warn!("{}: observed {y} above f_star {}; refreshing", self.id, self.f_star);
            self.f_star = y;
            true
        } else {
            false
        }
    }

    /// Evaluates a point in the domain.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::DomainViolation(x.to_vec()));
        }
        self.evaluate_unchecked(x)
    }

    /// Evaluation without the domain check; table lookups still require
    /// an exact candidate.
    pub fn evaluate_unchecked(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point of length {} for a {}-D objective", x.len(), self.dim())));
        }
        match &self.kind {
            Kind::ThomsonSlice { a, c } => {
                let full = a.dot(&Array1::from(x.to_vec())) + c;
                Ok(-thomson_energy(full.as_slice().expect("contiguous")))
            }
            Kind::Powell { shift } => {
                let z: Vec<f64> = x.iter().zip(shift).map(|(v, s)| v - s).collect();
                Ok(-powell(&z)?)
            }
            Kind::Table(t) => t.lookup(x),
        }
    }

    /// Slice matrix `A` and offset `c` of a Thomson slice variant.
    pub fn slice_map(&self) -> Option<(&Array2<f64>, &Array1<f64>)> {
        match &self.kind {
            Kind::ThomsonSlice { a, c } => Some((a, c)),
            _ => None,
        }
    }

    /// Location of the Powell minimum for this variant.
    pub fn powell_shift(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Powell { shift } => Some(shift),
            _ => None,
        }
    }
}

/// Standard Powell singular function; coordinates past the last full block
/// of four contribute `Σ x_j²`.
pub fn powell(x: &[f64]) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::InvalidDimension(format!("Powell needs at least 4 dimensions, got {}", x.len())));
    }
    let mut total = 0.0;
    let blocks = x.len() / 4;
    for b in 0..blocks {
        let (x1, x2, x3, x4) = (x[4 * b], x[4 * b + 1], x[4 * b + 2], x[4 * b + 3]);
        total += (x1 + 10.0 * x2).powi(2) + 5.0 * (x3 - x4).powi(2) + (x2 - 2.0 * x3).powi(4) + 10.0 * (x1 - x4).powi(4);
    }
    total += x[4 * blocks..].iter().map(|v| v * v).sum::<f64>();
    Ok(total)
}

/// Orthonormalizes the columns of `a` by modified Gram-Schmidt, applied
/// twice for numerical orthogonality.
pub fn orthonormalize_columns(a: &mut Array2<f64>) {
    for _ in 0..2 {
        for j in 0..a.ncols() {
            for k in 0..j {
                let proj = a.column(j).dot(&a.column(k));
                let ck = a.column(k).to_owned();
                a.column_mut(j).scaled_add(-proj, &ck);
            }
            let norm = a.column(j).dot(&a.column(j)).sqrt();
            a.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
}

fn unit_cube(dim: usize) -> Result<Domain> {
    Ok(Domain::Box(BoxDomain::cube(dim, -1.0, 1.0)?))
}

/// Thomson slice with an explicit map `x_full = c + A x`. `f_star` is left
/// unset (`-inf`) until estimated.
pub fn thomson_slice_from_map(a: Array2<f64>, c: Array1<f64>, seed: u64) -> Result<ObjectiveVariant> {
    let dim = a.ncols();
    if a.nrows() != c.len() || a.nrows() % 4 != 0 || dim == 0 {
        return Err(Error::Shape(format!("slice map {:?} with offset of length {}", a.dim(), c.len())));
    }
    if dim > a.nrows() {
        return Err(Error::InvalidSlice { dim, base: a.nrows() });
    }
    Ok(ObjectiveVariant {
        id: format!("thomson_slice-d{dim}-s{seed}"),
        family: Family::ThomsonSlice,
        seed,
        domain: unit_cube(dim)?,
        kind: Kind::ThomsonSlice { a, c },
        f_star: f64::NEG_INFINITY,
    })
}

/// Random `D`-dimensional slice through the `4·base_n`-dimensional Thomson
/// problem, without an optimum estimate.
pub fn thomson_slice_unestimated(base_n: usize, dim: usize, seed: u64) -> Result<ObjectiveVariant> {
    let base = 4 * base_n;
    if dim > base {
        return Err(Error::InvalidSlice { dim, base });
    }
    if dim == 0 {
        return Err(Error::InvalidDimension("slice dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Array2::from_shape_simple_fn((base, dim), || rng.sample::<f64, _>(StandardNormal));
    orthonormalize_columns(&mut a);
    let c = Array1::from_shape_simple_fn(base, || rng.random_range(-0.5..0.5));
    thomson_slice_from_map(a, c, seed)
}

/// Random slice variant with `f_star` estimated at the default budget.
pub fn make_slice_variant(base_n: usize, dim: usize, seed: u64) -> Result<ObjectiveVariant> {
    let mut v = thomson_slice_unestimated(base_n, dim, seed)?;
    v.f_star = estimate_optimum(&v, DEFAULT_OPTIMUM_BUDGET);
    Ok(v)
}

/// Powell variant on `[-1, 1]^dim` whose minimum sits at a seeded shift
/// in `[-0.5, 0.5]^dim`, so `f_star = 0` exactly.
pub fn powell_variant(dim: usize, seed: u64) -> Result<ObjectiveVariant> {
    if dim < 4 {
        return Err(Error::InvalidDimension(format!("Powell needs at least 4 dimensions, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5057_454c_4c00_0000);
    let shift = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    Ok(ObjectiveVariant {
        id: format!("powell-d{dim}-s{seed}"),
        family: Family::Powell,
        seed,
        domain: unit_cube(dim)?,
        kind: Kind::Powell { shift },
        f_star: 0.0,
    })
}

/// Powell variant with its minimum at the origin.
pub fn powell_centered(dim: usize) -> Result<ObjectiveVariant> {
    let mut v = powell_variant(dim, 0)?;
    v.kind = Kind::Powell { shift: vec![0.0; dim] };
    v.id = format!("powell-d{dim}-centered");
    Ok(v)
}

pub(crate) fn table_variant(id: String, candidates: Vec<Vec<f64>>, t: table::CandidateTable) -> ObjectiveVariant {
    let f_star = t.max_value();
    ObjectiveVariant {
        id,
        family: Family::DiscreteTable,
        seed: 0,
        domain: Domain::Discrete(candidates),
        kind: Kind::Table(t),
        f_star,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powell_examples() {
        assert_eq!(powell(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(powell(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 11.0);
        assert_eq!(powell(&[0.0; 10]).unwrap(), 0.0);
        assert_eq!(powell(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, -1.0]).unwrap(), 5.0);
        assert!(matches!(powell(&[0.0; 3]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn slice_columns_orthonormal() {
        let v = thomson_slice_unestimated(32, 16, 7).unwrap();
        let (a, c) = v.slice_map().unwrap();
        let gram = a.t().dot(a);
        for i in 0..16 {
            for j in 0..16 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expected).abs() < 1e-10);
            }
        }
        assert!(c.iter().all(|v| (-0.5..0.5).contains(v)));
        assert!(matches!(thomson_slice_unestimated(32, 129, 0), Err(Error::InvalidSlice { .. })));
    }

    #[test]
    fn slices_are_deterministic_and_distinct() {
        let a = thomson_slice_unestimated(32, 16, 3).unwrap();
        let b = thomson_slice_unestimated(32, 16, 3).unwrap();
        let c = thomson_slice_unestimated(32, 16, 4).unwrap();
        assert_eq!(a.slice_map(), b.slice_map());
        let center = vec![0.0; 16];
        assert_eq!(a.evaluate(&center).unwrap(), b.evaluate(&center).unwrap());
        assert_ne!(a.evaluate(&center).unwrap(), c.evaluate(&center).unwrap());
    }

    #[test]
    fn identity_slice_reproduces_full_objective() {
        let n = 3;
        let v = thomson_slice_from_map(Array2::eye(4 * n), Array1::zeros(4 * n), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(v.evaluate(&x).unwrap(), -thomson_energy(&x));
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let v = powell_variant(4, 1).unwrap();
        assert!(matches!(v.evaluate(&[2.0, 0.0, 0.0, 0.0]), Err(Error::DomainViolation(_))));
        let s = v.powell_shift().unwrap().to_vec();
        assert_eq!(v.evaluate(&s).unwrap(), 0.0);
    }

    #[test]
    fn observe_refreshes_f_star() {
        let mut v = powell_variant(4, 1).unwrap();
        assert!(!v.observe(0.0));
        assert!(v.observe(1.0));
        assert_eq!(v.f_star(), 1.0);
    }
}
