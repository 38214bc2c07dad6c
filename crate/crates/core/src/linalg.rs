//! Dense helpers for small symmetric positive-definite systems.

use ndarray::{Array2, ArrayView2};

/// Lower Cholesky factor of a symmetric matrix, or `None` when a pivot is
/// not strictly positive (or not finite).
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let lik = l[[i, k]];
            if lik != 0.0 {
                let (head, mut tail) = x.view_mut().split_at(ndarray::Axis(0), i);
                let mut xi = tail.row_mut(0);
                xi.scaled_add(-lik, &head.row(k));
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[[k, i]];
            if lki != 0.0 {
                let (mut head, tail) = x.view_mut().split_at(ndarray::Axis(0), i + 1);
                let mut xi = head.row_mut(i);
                xi.scaled_add(-lki, &tail.row(k - i - 1));
            }
        }
        let d = l[[i, i]];
        x.row_mut(i).mapv_inplace(|v| v / d);
    }
    x
}

/// Keeps the lower triangle (diagonal included), zeroing the rest.
pub fn tril(a: &mut Array2<f64>) {
    for ((i, j), v) in a.indexed_iter_mut() {
        if j > i {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 3.0, 0.5], [0.4, 0.5, 2.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn triangular_solves() {
        let l = array![[2.0, 0.0, 0.0], [1.0, 3.0, 0.0], [-1.0, 0.5, 1.5]];
        let b = array![[1.0, 2.0], [0.0, -1.0], [3.0, 4.0]];
        let x = solve_lower(l.view(), b.view());
        let r = l.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let y = solve_lower_t(l.view(), b.view());
        let r = l.t().dot(&y) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }
}
