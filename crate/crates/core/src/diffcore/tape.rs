//! Wengert tape over dense matrices.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and produces exact gradients for the parameter
//! blocks that were read through [`Tape::param`].

use std::sync::Arc;

use super::{Gradients, Matrix, ParamId, ParamStore, Real};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row-sparse linear map: output row `i` is `sum_j w_ij * input[row_ij]`.
///
/// Used for bilinear interpolation, finite-difference stencils and any other
/// fixed linear resampling of rows.
#[derive(Clone, Debug)]
pub struct SparseMap<R> {
    input_rows: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<R>,
}

impl<R: Real> SparseMap<R> {
    pub fn new(input_rows: usize) -> Self {
        Self {
            input_rows,
            offsets: vec![0],
            sources: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends one output row. An empty slice yields an all-zero row.
    pub fn push_row(&mut self, entries: &[(usize, R)]) {
        for &(src, w) in entries {
            debug_assert!(src < self.input_rows);
            self.sources.push(src);
            self.weights.push(w);
        }
        self.offsets.push(self.sources.len());
    }

    pub fn push_entry(&mut self, src: usize, w: R) {
        debug_assert!(src < self.input_rows);
        self.sources.push(src);
        self.weights.push(w);
    }

    /// Closes the row started after the previous `finish_row`/`push_row`.
    pub fn finish_row(&mut self) {
        self.offsets.push(self.sources.len());
    }

    pub fn output_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn input_rows(&self) -> usize {
        self.input_rows
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, R)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.sources[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, input: &Matrix<R>) -> Result<Matrix<R>> {
        ensure!(
            input.rows() == self.input_rows,
            Shape,
            "sparse map expects {} input rows, got {}",
            self.input_rows,
            input.rows()
        );
        let cols = input.cols();
        let mut out = Matrix::zeros(self.output_rows(), cols);
        for i in 0..self.output_rows() {
            for (src, w) in self.row(i) {
                let s = input.row(src);
                let dst = out.row_mut(i);
                for c in 0..cols {
                    dst[c] += w * s[c];
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SparseRows(Var, Arc<SparseMap<R>>),
    GroupSum(Var, usize),
    Composite { colors: Var, alphas: Var, planes: usize },
}

#[derive(Clone, Debug)]
struct Node<R> {
    value: Matrix<R>,
    op: Op<R>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    param_count: usize,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_count: 0,
        }
    }

    fn push(&mut self, value: Matrix<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn constant(&mut self, value: Matrix<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter block (as a matrix whose columns are its last axis).
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        self.param_count = self.param_count.max(store.len());
        self.push(store.matrix(id), Op::Param(id))
    }

    /// `x * w + b`, with `x: n x in`, `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.value(x).shape();
        let (wk, out) = self.value(w).shape();
        ensure!(k == wk, Shape, "linear: input width {k} vs weight rows {wk}");
        let mut y = Matrix::zeros(n, out);
        R::gemm(
            n,
            k,
            out,
            self.value(x).as_slice(),
            false,
            self.value(w).as_slice(),
            false,
            y.as_mut_slice(),
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            ensure!(
                bias.len() == out,
                Shape,
                "linear: bias width {} vs output width {out}",
                bias.len()
            );
            let bias = bias.as_slice().to_vec();
            for i in 0..n {
                for (yv, bv) in y.row_mut(i).iter_mut().zip(&bias) {
                    *yv += *bv;
                }
            }
        }
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > R::zero() { v } else { R::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(R::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(R::abs);
        self.push(y, Op::Abs(x))
    }

    fn zip_with(&self, a: Var, b: Var, name: &str, f: impl Fn(R, R) -> R) -> Result<Matrix<R>> {
        let (ma, mb) = (self.value(a), self.value(b));
        ensure!(
            ma.shape() == mb.shape(),
            Shape,
            "{name}: {:?} vs {:?}",
            ma.shape(),
            mb.shape()
        );
        let data = ma
            .as_slice()
            .iter()
            .zip(mb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(ma.rows(), ma.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    /// Mean over all entries; the mean of an empty matrix is zero.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let s: R = m.as_slice().iter().copied().sum();
        let mean = if m.is_empty() {
            R::zero()
        } else {
            s / R::of(m.len() as f64)
        };
        self.push(Matrix::scalar(mean), Op::Mean(x))
    }

    /// Row lookup (embedding tables and any other row selection).
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let cols = src.cols();
        let mut y = Matrix::zeros(index.len(), cols);
        for (i, &r) in index.iter().enumerate() {
            ensure!(
                r < src.rows(),
                Contract,
                "row index {r} out of range for {} rows",
                src.rows()
            );
            y.row_mut(i).copy_from_slice(src.row(r));
        }
        Ok(self.push(y, Op::GatherRows(x, index)))
    }

    pub fn sparse_rows(&mut self, x: Var, map: Arc<SparseMap<R>>) -> Result<Var> {
        let y = map.apply(self.value(x))?;
        Ok(self.push(y, Op::SparseRows(x, map)))
    }

    /// Splits the columns into `groups` equal consecutive groups and sums them:
    /// `y[i, j] = sum_g x[i, g * w + j]`.
    pub fn group_sum(&mut self, x: Var, groups: usize) -> Result<Var> {
        let src = self.value(x);
        ensure!(
            groups > 0 && src.cols().is_multiple_of(groups),
            Shape,
            "group_sum: {} columns not divisible into {groups} groups",
            src.cols()
        );
        let w = src.cols() / groups;
        let mut y = Matrix::zeros(src.rows(), w);
        for i in 0..src.rows() {
            let row = src.row(i);
            let out = y.row_mut(i);
            for g in 0..groups {
                for j in 0..w {
                    out[j] += row[g * w + j];
                }
            }
        }
        Ok(self.push(y, Op::GroupSum(x, groups)))
    }

    /// Back-to-front over-compositing of `planes` consecutive rows per ray.
    ///
    /// `colors` is `(rays * planes) x c`, `alphas` is `(rays * planes) x 1`,
    /// row `r * planes + d` holding plane `d` of ray `r` with `d = planes - 1`
    /// the frontmost. Output is `rays x c`.
    pub fn composite(&mut self, colors: Var, alphas: Var, planes: usize) -> Result<Var> {
        let (c, a) = (self.value(colors), self.value(alphas));
        ensure!(planes > 0, Shape, "composite needs at least one plane");
        ensure!(
            c.rows() == a.rows() && a.cols() == 1 && c.rows() % planes == 0,
            Shape,
            "composite: colors {:?}, alphas {:?}, planes {planes}",
            c.shape(),
            a.shape()
        );
        let rays = c.rows() / planes;
        let ch = c.cols();
        let mut y = Matrix::zeros(rays, ch);
        for r in 0..rays {
            let out = y.row_mut(r);
            for d in 0..planes {
                let row = r * planes + d;
                let alpha = a.as_slice()[row];
                let keep = R::one() - alpha;
                for (o, &col) in out.iter_mut().zip(c.row(row)) {
                    *o = *o * keep + col * alpha;
                }
            }
        }
        Ok(self.push(
            y,
            Op::Composite {
                colors,
                alphas,
                planes,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let lv = self.value(loss);
        ensure!(lv.shape() == (1, 1), Shape, "loss must be a 1x1 scalar, got {:?}", lv.shape());
        if !lv.as_slice()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {}; refusing to compute gradients",
                lv.as_slice()[0]
            )));
        }

        let mut grads: Vec<Option<Matrix<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(R::one()));
        let mut out = Gradients::new(self.param_count);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, g.len(), g.as_slice()),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k) = xv.shape();
                    let outw = wv.cols();
                    {
                        let dx = slot(&mut grads, *x, (n, k));
                        // dx += g * w^T
                        R::gemm(n, outw, k, g.as_slice(), false, wv.as_slice(), true, dx.as_mut_slice(), true);
                    }
                    {
                        let dw = slot(&mut grads, *w, (k, outw));
                        // dw += x^T * g
                        R::gemm(k, n, outw, xv.as_slice(), true, g.as_slice(), false, dw.as_mut_slice(), true);
                    }
                    if let Some(b) = b {
                        let shape = self.value(*b).shape();
                        let db = slot(&mut grads, *b, shape);
                        let dbs = db.as_mut_slice();
                        for r in 0..n {
                            for (acc, v) in dbs.iter_mut().zip(g.row(r)) {
                                *acc += *v;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = slot(&mut grads, *x, xv.shape());
                    for ((d, &gv), &xi) in dx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(xv.as_slice()) {
                        if xi > R::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = slot(&mut grads, *x, y.shape());
                    for ((d, &gv), &yv) in dx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        *d += gv * yv * (R::one() - yv);
                    }
                }
                Op::Abs(x) => {
                    let xv = self.value(*x);
                    let dx = slot(&mut grads, *x, xv.shape());
                    for ((d, &gv), &xi) in dx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(xv.as_slice()) {
                        if xi > R::zero() {
                            *d += gv;
                        } else if xi < R::zero() {
                            *d -= gv;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    let shape = g.shape();
                    add_into(slot(&mut grads, *a, shape), &g, R::one());
                    let sign = if negate { -R::one() } else { R::one() };
                    add_into(slot(&mut grads, *b, shape), &g, sign);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = slot(&mut grads, *a, g.shape());
                    for ((d, &gv), &o) in da.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *d += gv * o;
                    }
                    let db = slot(&mut grads, *b, g.shape());
                    for ((d, &gv), &o) in db.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *d += gv * o;
                    }
                }
                Op::Scale(x, c) => {
                    add_into(slot(&mut grads, *x, g.shape()), &g, *c);
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let shape = self.value(*x).shape();
                    let mut gv = g.as_slice()[0];
                    if matches!(node.op, Op::Mean(_)) && shape.0 * shape.1 > 0 {
                        gv = gv / R::of((shape.0 * shape.1) as f64);
                    }
                    for d in slot(&mut grads, *x, shape).as_mut_slice() {
                        *d += gv;
                    }
                }
                Op::GatherRows(x, index) => {
                    let shape = self.value(*x).shape();
                    let dx = slot(&mut grads, *x, shape);
                    for (i, &r) in index.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                }
                Op::SparseRows(x, map) => {
                    let shape = self.value(*x).shape();
                    let dx = slot(&mut grads, *x, shape);
                    for i in 0..map.output_rows() {
                        let gi = g.row(i);
                        for (src, w) in map.row(i) {
                            for (d, &gv) in dx.row_mut(src).iter_mut().zip(gi) {
                                *d += w * gv;
                            }
                        }
                    }
                }
                Op::GroupSum(x, groups) => {
                    let shape = self.value(*x).shape();
                    let w = shape.1 / groups;
                    let dx = slot(&mut grads, *x, shape);
                    for r in 0..shape.0 {
                        let gi = g.row(r);
                        let di = dx.row_mut(r);
                        for gidx in 0..*groups {
                            for j in 0..w {
                                di[gidx * w + j] += gi[j];
                            }
                        }
                    }
                }
                Op::Composite {
                    colors,
                    alphas,
                    planes,
                } => {
                    let (cv, av) = (self.value(*colors), self.value(*alphas));
                    let ch = cv.cols();
                    let rays = cv.rows() / planes;
                    let mut dcol = Matrix::zeros(cv.rows(), ch);
                    let mut dalpha = Matrix::zeros(av.rows(), 1);
                    let mut below = vec![R::zero(); ch];
                    let mut trans = vec![R::zero(); *planes];
                    for r in 0..rays {
                        let base = r * planes;
                        // trans[d] = prod_{i > d} (1 - alpha_i)
                        let mut t = R::one();
                        for d in (0..*planes).rev() {
                            trans[d] = t;
                            t *= R::one() - av.as_slice()[base + d];
                        }
                        below.iter_mut().for_each(|b| *b = R::zero());
                        let gr = g.row(r);
                        for d in 0..*planes {
                            let row = base + d;
                            let alpha = av.as_slice()[row];
                            let col = cv.row(row);
                            let w = alpha * trans[d];
                            let mut da = R::zero();
                            for c in 0..ch {
                                dcol.row_mut(row)[c] = gr[c] * w;
                                da += gr[c] * trans[d] * (col[c] - below[c]);
                                below[c] = below[c] * (R::one() - alpha) + col[c] * alpha;
                            }
                            dalpha.as_mut_slice()[row] = da;
                        }
                    }
                    add_into(slot(&mut grads, *colors, cv.shape()), &dcol, R::one());
                    add_into(slot(&mut grads, *alphas, av.shape()), &dalpha, R::one());
                }
            }
        }
        Ok(out)
    }
}

fn slot<R: Real>(grads: &mut [Option<Matrix<R>>], v: Var, shape: (usize, usize)) -> &mut Matrix<R> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn add_into<R: Real>(dst: &mut Matrix<R>, src: &Matrix<R>, scale: R) {
    for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += scale * s;
    }
}
