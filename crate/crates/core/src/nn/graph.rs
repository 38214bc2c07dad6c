//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding its
//! forward value and the indices of its inputs. [`Graph::backward`] replays
//! the tape in reverse and accumulates vector-Jacobian products. Vectors are
//! represented as `1 × n` rows or `n × 1` columns; scalars are `1 × 1`.
//!
//! Nodes whose inputs are all constants are marked as not requiring
//! gradients and are skipped during the reverse sweep, so frozen networks can
//! be evaluated on the same tape at no extra backward cost.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::linalg;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    RepeatRows(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Diag(Var),
    Poly(Var, Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    Min(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Row-wise boolean mask for [`Graph::softmax_rows`]; `true` keeps an entry.
pub type SoftmaxMask = Rc<Array2<bool>>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_bt inner dimension");
        let out = va.dot(&vb.t());
        self.push(out, Op::MatMulBT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    // ---- elementwise binary ---------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min shapes");
        let mut out = self.value(a).clone();
        Zip::from(&mut out).and(self.value(b)).for_each(|o, &y| {
            if y < *o {
                *o = y
            }
        });
        self.push(out, Op::Min(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.ncols()), vr.dim(), "add_row shapes");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Adds an `m × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((va.nrows(), 1), vc.dim(), "add_col shapes");
        let out = va + vc;
        self.push(out, Op::AddCol(a, col), &[a, col])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.ncols()), vr.dim(), "mul_row shapes");
        let out = va * vr;
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((va.nrows(), 1), vc.dim(), "mul_col shapes");
        let out = va * vc;
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar");
        let k = self.scalar(s);
        let out = self.value(a) * k;
        self.push(out, Op::ScaleBy(a, s), &[a, s])
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Adds `k` to the diagonal of a square matrix.
    pub fn add_diag(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.diag_mut().mapv_inplace(|v| v + k);
        self.push(out, Op::AddConst(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|x| x.powf(p));
        self.push(out, Op::Powf(a, p), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `max(a, lo)` with the gradient passed only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(lo));
        self.push(out, Op::ClampMin(a, lo), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.ncols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Row-wise softmax. Masked-out entries get probability zero; every row
    /// must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&SoftmaxMask>) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[[i, j]]);
            let mut mx = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if keep(j) && *v > mx {
                    mx = *v;
                }
            }
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - mx).exp() } else { 0.0 };
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    // ---- structure --------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Tiles a `1 × n` row `m` times.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), 1, "repeat_rows expects a row");
        let out = va.broadcast((m, va.ncols())).expect("broadcast").to_owned();
        self.push(out, Op::RepeatRows(a), &[a])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums across columns, giving an `m × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Sums across rows, giving a `1 × n` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumCols(a), &[a])
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let out = self.value(a).diag().to_owned().insert_axis(Axis(1));
        self.push(out, Op::Diag(a), &[a])
    }

    // ---- kernel and factorization primitives -------------------------------

    /// Elementwise truncated power series `Σ_k coef_k s^k / k!`, `k = 1..=K`,
    /// with `coef` a `1 × K` row.
    pub fn poly(&mut self, s: Var, coef: Var) -> Var {
        let c: Vec<f64> = self.value(coef).iter().copied().collect();
        let weights = series_weights(&c);
        let out = self.value(s).mapv(|x| {
            let mut p = 1.0;
            let mut acc = 0.0;
            for w in &weights {
                p *= x;
                acc += w * p;
            }
            acc
        });
        self.push(out, Op::Poly(s, coef), &[s, coef])
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a).view())
            .ok_or_else(|| Error::NumericalFailure("Cholesky factorization failed".into()))?;
        Ok(self.push(l, Op::Cholesky(a), &[a]))
    }

    /// Records `l` as the Cholesky factor of `a` without refactorizing.
    /// The caller guarantees `l · lᵀ = a`.
    pub fn cholesky_known(&mut self, a: Var, l: Array2<f64>) -> Var {
        debug_assert_eq!(l.dim(), self.shape(a));
        self.push(l, Op::Cholesky(a), &[a])
    }

    /// `L⁻¹ B` for a lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let out = linalg::solve_lower(self.value(l).view(), self.value(b).view());
        self.push(out, Op::SolveLower(l, b), &[l, b])
    }

    /// `L⁻ᵀ B` for a lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let out = linalg::solve_lower_t(self.value(l).view(), self.value(b).view());
        self.push(out, Op::SolveLowerT(l, b), &[l, b])
    }

    // ---- reverse sweep -------------------------------------------------------

    /// Gradients of the scalar node `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    acc(*a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    acc(*b, val(a).t().dot(g));
                }
            }
            Op::MatMulBT(a, b) => {
                if needs(a) {
                    acc(*a, g.dot(val(b)));
                }
                if needs(b) {
                    acc(*b, g.t().dot(val(a)));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(*a, g * val(b));
                }
                if needs(b) {
                    acc(*b, g * val(a));
                }
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(a), val(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga).and(&mut gb).and(va).and(vb).for_each(|x, y, &p, &q| {
                    if q < p {
                        *x = 0.0;
                    } else {
                        *y = 0.0;
                    }
                });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, c) => {
                acc(*a, g.clone());
                acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulRow(a, r) => {
                if needs(a) {
                    acc(*a, g * val(r));
                }
                if needs(r) {
                    acc(*r, (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if needs(a) {
                    acc(*a, g * val(c));
                }
                if needs(c) {
                    acc(*c, (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::ScaleBy(a, s) => {
                let k = val(s)[[0, 0]];
                if needs(a) {
                    acc(*a, g * k);
                }
                if needs(s) {
                    let d = (g * val(a)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g * out),
            Op::Log(a) => acc(*a, g / val(a)),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &t| *d *= 1.0 - t * t);
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                });
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| *d *= sigmoid(x));
                acc(*a, d);
            }
            Op::Powf(a, p) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| *d *= p * x.powf(p - 1.0));
                acc(*a, d);
            }
            Op::ClampMin(a, lo) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x <= *lo {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), is) in d.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / n;
                    let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv = is * (*dv - mean_g - y * mean_gy));
                }
                acc(*x, d);
            }
            Op::Softmax(a) => {
                let mut d = g.clone();
                for (mut drow, prow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow).and(&prow).for_each(|dv, &p| *dv = p * (*dv - dot));
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if needs(p) {
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(p).nrows();
                    if needs(p) {
                        acc(*p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::RepeatRows(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(*a, Array2::from_elem(val(a).dim(), k));
            }
            Op::SumRows(a) => {
                let d = g.broadcast(val(a).dim()).expect("broadcast").to_owned();
                acc(*a, d);
            }
            Op::SumCols(a) => {
                let d = g.broadcast(val(a).dim()).expect("broadcast").to_owned();
                acc(*a, d);
            }
            Op::Diag(a) => {
                let mut d = Array2::zeros(val(a).dim());
                d.diag_mut().assign(&g.column(0));
                acc(*a, d);
            }
            Op::Poly(sv, coef) => {
                let c: Vec<f64> = val(coef).iter().copied().collect();
                let weights = series_weights(&c);
                let x = val(sv);
                if needs(sv) {
                    // d/ds Σ w_k s^k = Σ k w_k s^{k-1}
                    let mut d = g.clone();
                    Zip::from(&mut d).and(x).for_each(|d, &s| {
                        let mut p = 1.0;
                        let mut acc = 0.0;
                        for (k, w) in weights.iter().enumerate() {
                            acc += (k + 1) as f64 * w * p;
                            p *= s;
                        }
                        *d *= acc;
                    });
                    acc(*sv, d);
                }
                if needs(coef) {
                    let kmax = c.len();
                    let mut dc = vec![0.0; kmax];
                    Zip::from(g).and(x).for_each(|&gv, &s| {
                        let mut p = 1.0;
                        let mut fact = 1.0;
                        for (k, slot) in dc.iter_mut().enumerate() {
                            p *= s;
                            fact *= (k + 1) as f64;
                            *slot += gv * p / fact;
                        }
                    });
                    acc(*coef, Array2::from_shape_vec((1, kmax), dc).expect("shape"));
                }
            }
            Op::Cholesky(a) => {
                let l = out;
                let mut gl = g.clone();
                linalg::tril(&mut gl);
                let mut p = l.t().dot(&gl);
                linalg::tril(&mut p);
                p.diag_mut().mapv_inplace(|v| 0.5 * v);
                let x = linalg::solve_lower_t(l.view(), p.view());
                let st = linalg::solve_lower_t(l.view(), x.t());
                let sym = (&st + &st.t()) * 0.5;
                acc(*a, sym);
            }
            Op::SolveLower(l, b) => {
                let gb = linalg::solve_lower_t(val(l).view(), g.view());
                if needs(l) {
                    let mut gl = -gb.dot(&out.t());
                    linalg::tril(&mut gl);
                    acc(*l, gl);
                }
                acc(*b, gb);
            }
            Op::SolveLowerT(l, b) => {
                let gb = linalg::solve_lower(val(l).view(), g.view());
                if needs(l) {
                    let mut gl = -out.dot(&gb.t());
                    linalg::tril(&mut gl);
                    acc(*l, gl);
                }
                acc(*b, gb);
            }
        }
    }
}

/// `coef_k / k!` for `k = 1..=K`.
fn series_weights(coef: &[f64]) -> Vec<f64> {
    let mut fact = 1.0;
    coef.iter()
        .enumerate()
        .map(|(k, c)| {
            fact *= (k + 1) as f64;
            c / fact
        })
        .collect()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
