//! Search domains: finite boxes and discrete candidate lists.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lo_d, hi_d]` with `lo_d < hi_d` in every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidDomain(format!("bounds of length {} and {}", lo.len(), hi.len())));
        }
        for (d, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::InvalidDomain(format!("dimension {d}: [{l}, {h}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi]^dim`
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn mid(&self, d: usize) -> f64 {
        0.5 * (self.lo[d] + self.hi[d])
    }

    pub fn half_width(&self, d: usize) -> f64 {
        0.5 * (self.hi[d] - self.lo[d])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim()).map(|d| self.mid(d)).collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Box(BoxDomain),
    Discrete(Vec<Vec<f64>>),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box(b) => b.dim(),
            Domain::Discrete(c) => c.first().map_or(0, |x| x.len()),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box(b) => b.contains(x),
            Domain::Discrete(c) => c.iter().any(|cand| cand.as_slice() == x),
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Domain::Box(b) => Ok(b.sample_uniform(rng)),
            Domain::Discrete(c) if c.is_empty() => Err(Error::InvalidDomain("no candidates".into())),
            Domain::Discrete(c) => Ok(c[rng.random_range(0..c.len())].clone()),
        }
    }

    /// Bounding box of the domain; for candidate lists, the tightest box
    /// around the candidates (widened where a coordinate is constant).
    pub fn bounding_box(&self) -> Result<BoxDomain> {
        match self {
            Domain::Box(b) => Ok(b.clone()),
            Domain::Discrete(c) => {
                let d = self.dim();
                if c.is_empty() || d == 0 {
                    return Err(Error::InvalidDomain("no candidates".into()));
                }
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for x in c {
                    for k in 0..d {
                        lo[k] = lo[k].min(x[k]);
                        hi[k] = hi[k].max(x[k]);
                    }
                }
                for k in 0..d {
                    if hi[k] - lo[k] < 1e-9 {
                        lo[k] -= 0.5;
                        hi[k] += 0.5;
                    }
                }
                BoxDomain::new(lo, hi)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_bounds_rejected() {
        assert!(matches!(BoxDomain::new(vec![0.0], vec![0.0]), Err(Error::InvalidDomain(_))));
        assert!(matches!(BoxDomain::new(vec![1.0], vec![0.0]), Err(Error::InvalidDomain(_))));
        assert!(BoxDomain::new(vec![-1.0], vec![1.0]).is_ok());
    }

    #[test]
    fn discrete_bounding_box_widens_constant_columns() {
        let d = Domain::Discrete(vec![vec![0.0, 1.0], vec![2.0, 1.0]]);
        let b = d.bounding_box().unwrap();
        assert_eq!(b.lo(), &[0.0, 0.5]);
        assert_eq!(b.hi(), &[2.0, 1.5]);
    }
}
