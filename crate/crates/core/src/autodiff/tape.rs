//! Reverse-mode differentiation over batched matrices.
//!
//! Every node of the tape holds a full `rows x cols` value. Rows are batch
//! samples, so one node covers a whole batch and the tape stays short: a
//! training sweep over `N` time steps records `O(N)` nodes, not `O(N * B)`.
//!
//! Arithmetic primitives are elementwise and require equal shapes;
//! broadcasting is explicit through [`Tape::broadcast_rows`] and
//! [`Tape::broadcast_cols`]. Reductions accumulate in index order, so a
//! recorded computation and its gradients are bit-reproducible.

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x * w^T + b`, with `w: out x in` and `b: 1 x out`.
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Square(Var),
    Log(Var),
    Atan(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    MeanRows(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    SliceCols(Var, usize, usize),
    Concat(Vec<Var>),
    /// Per-row matrix-vector product: row `r` of `z` is a `k x d` matrix in
    /// row-major order, row `r` of `v` a length-`d` vector.
    RowContract { z: Var, v: Var, k: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records an input. Parameters and constants are both leaves; which
    /// leaves are trainable is decided by whoever reads the gradients.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.leaf(Matrix::filled(rows, cols, value))
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let value = Self::eval(&op, |v| &self.nodes[v.0].value);
        self.push(value, op)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (_, cin) = self.shape(x);
        let (wout, win) = self.shape(w);
        assert_eq!(cin, win, "affine: input width {cin} vs weight width {win}");
        assert_eq!(self.shape(b), (1, wout), "affine: bias shape");
        self.record(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.record(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.record(Op::Neg(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.record(Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.record(Op::Log(a))
    }

    pub fn atan(&mut self, a: Var) -> Var {
        self.record(Op::Atan(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.record(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Var {
        self.record(Op::Offset(a, shift))
    }

    /// `1 x n -> rows x n`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        assert_eq!(self.shape(a).0, 1, "broadcast_rows expects a row vector");
        self.record(Op::BroadcastRows(a, rows))
    }

    /// `r x 1 -> r x cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        assert_eq!(self.shape(a).1, 1, "broadcast_cols expects a column");
        self.record(Op::BroadcastCols(a, cols))
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.record(Op::MeanRows(a))
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.record(Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(Op::Mean(a))
    }

    /// Sum of squares of all entries, `1 x 1`.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        self.record(Op::SquaredNorm(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, c) = self.shape(a);
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c}");
        self.record(Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        for p in parts {
            assert_eq!(self.shape(*p).0, rows, "concat_cols row mismatch");
        }
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn row_contract(&mut self, z: Var, v: Var, k: usize) -> Var {
        let (zr, zc) = self.shape(z);
        let (vr, d) = self.shape(v);
        assert_eq!(zr, vr, "row_contract row mismatch");
        assert_eq!(zc, k * d, "row_contract: z width {zc} is not {k}x{d}");
        self.record(Op::RowContract { z, v, k })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    /// Values as recorded, in recording order.
    pub fn recorded(&self) -> impl Iterator<Item = &Matrix> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => Self::eval(op, |v| &values[v.0]),
            };
            values.push(value);
        }
        values
    }

    fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a Matrix) -> Matrix {
        match *op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Affine { x, w, b } => {
                let (xv, wv, bv) = (val(x), val(w), val(b));
                let (rows, cin) = xv.shape();
                let cout = wv.rows();
                let mut out = Matrix::tile_row(bv.as_slice(), rows);
                gemm(
                    rows,
                    cin,
                    cout,
                    1.0,
                    xv.as_slice(),
                    (cin as isize, 1),
                    wv.as_slice(),
                    (1, cin as isize),
                    1.0,
                    out.as_mut_slice(),
                );
                out
            }
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Add(a, b) => val(a).zip_map(val(b), |x, y| x + y),
            Op::Sub(a, b) => val(a).zip_map(val(b), |x, y| x - y),
            Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y),
            Op::Div(a, b) => val(a).zip_map(val(b), |x, y| x / y),
            Op::Neg(a) => val(a).map(|x| -x),
            Op::Square(a) => val(a).map(|x| x * x),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Atan(a) => val(a).map(f64::atan),
            Op::Scale(a, s) => val(a).map(|x| x * s),
            Op::Offset(a, s) => val(a).map(|x| x + s),
            Op::BroadcastRows(a, rows) => Matrix::tile_row(val(a).as_slice(), rows),
            Op::BroadcastCols(a, cols) => {
                let av = val(a);
                let mut out = Matrix::zeros(av.rows(), cols);
                for r in 0..av.rows() {
                    out.row_mut(r).fill(av.get(r, 0));
                }
                out
            }
            Op::MeanRows(a) => Matrix::row_vector(val(a).mean_rows()),
            Op::SumCols(a) => {
                let av = val(a);
                let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
                Matrix::from_vec(av.rows(), 1, data)
            }
            Op::Sum(a) => Matrix::scalar(val(a).as_slice().iter().sum()),
            Op::Mean(a) => {
                let av = val(a);
                Matrix::scalar(av.as_slice().iter().sum::<f64>() / av.len() as f64)
            }
            Op::SquaredNorm(a) => Matrix::scalar(val(a).as_slice().iter().map(|x| x * x).sum()),
            Op::SliceCols(a, start, end) => {
                let av = val(a);
                let mut data = Vec::with_capacity(av.rows() * (end - start));
                for r in 0..av.rows() {
                    data.extend_from_slice(&av.row(r)[start..end]);
                }
                Matrix::from_vec(av.rows(), end - start, data)
            }
            Op::Concat(ref parts) => {
                let rows = val(parts[0]).rows();
                let cols: usize = parts.iter().map(|p| val(*p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(*p).row(r));
                    }
                }
                Matrix::from_vec(rows, cols, data)
            }
            Op::RowContract { z, v, k } => {
                let (zv, vv) = (val(z), val(v));
                let (rows, d) = vv.shape();
                let mut out = Matrix::zeros(rows, k);
                for r in 0..rows {
                    let zr = zv.row(r);
                    let vr = vv.row(r);
                    for a in 0..k {
                        let mut acc = 0.0;
                        for l in 0..d {
                            acc += zr[a * d + l] * vr[l];
                        }
                        out.set(r, a, acc);
                    }
                }
                out
            }
        }
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Usage(format!(
                "backward needs a scalar loss node, got a {r}x{c} value"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their adjoint for the caller; interior adjoints are
            // dropped once propagated.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (rows, cin) = xv.shape();
                    let cout = wv.rows();
                    let mut gx = Matrix::zeros(rows, cin);
                    gemm(
                        rows,
                        cout,
                        cin,
                        1.0,
                        g.as_slice(),
                        (cout as isize, 1),
                        wv.as_slice(),
                        (cin as isize, 1),
                        0.0,
                        gx.as_mut_slice(),
                    );
                    let mut gw = Matrix::zeros(cout, cin);
                    gemm(
                        cout,
                        rows,
                        cin,
                        1.0,
                        g.as_slice(),
                        (1, cout as isize),
                        xv.as_slice(),
                        (cin as isize, 1),
                        0.0,
                        gw.as_mut_slice(),
                    );
                    let gb = Matrix::row_vector(column_sums(&g));
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, w, gw);
                    accumulate(&mut grads, b, gb);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(out, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, b, g.clone());
                    accumulate(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|x| -x));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(b), |gi, bv| gi * bv);
                    let gb = g.zip_map(self.value(a), |gi, av| gi * av);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let ga = g.zip_map(bv, |gi, bv| gi / bv);
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.zip_map(out, |gi, q| gi * q).zip_map(bv, |x, bv| -x / bv);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, a, g.map(|x| -x)),
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(a), |gi, av| 2.0 * av * gi);
                    accumulate(&mut grads, a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(a), |gi, av| gi / av);
                    accumulate(&mut grads, a, ga);
                }
                Op::Atan(a) => {
                    let ga = g.zip_map(self.value(a), |gi, av| gi / (1.0 + av * av));
                    accumulate(&mut grads, a, ga);
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.map(|x| x * s)),
                Op::Offset(a, _) => accumulate(&mut grads, a, g),
                Op::BroadcastRows(a, _) => {
                    accumulate(&mut grads, a, Matrix::row_vector(column_sums(&g)));
                }
                Op::BroadcastCols(a, _) => {
                    let data = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    accumulate(&mut grads, a, Matrix::from_vec(g.rows(), 1, data));
                }
                Op::MeanRows(a) => {
                    let (rows, _) = self.shape(a);
                    let scaled: Vec<f64> = g.as_slice().iter().map(|x| x / rows as f64).collect();
                    accumulate(&mut grads, a, Matrix::tile_row(&scaled, rows));
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r).fill(g.get(r, 0));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(a);
                    accumulate(&mut grads, a, Matrix::filled(rows, cols, g.item()));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(a);
                    let n = (rows * cols) as f64;
                    accumulate(&mut grads, a, Matrix::filled(rows, cols, g.item() / n));
                }
                Op::SquaredNorm(a) => {
                    let gi = g.item();
                    accumulate(&mut grads, a, self.value(a).map(|x| 2.0 * x * gi));
                }
                Op::SliceCols(a, start, end) => {
                    let (rows, cols) = self.shape(a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[start..end].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Concat(ref parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::RowContract { z, v, k } => {
                    let (zv, vv) = (self.value(z), self.value(v));
                    let (rows, d) = vv.shape();
                    let mut gz = Matrix::zeros(rows, k * d);
                    let mut gv = Matrix::zeros(rows, d);
                    for r in 0..rows {
                        let zr = zv.row(r);
                        let vr = vv.row(r);
                        let gr = g.row(r);
                        let gzr = gz.row_mut(r);
                        for a in 0..k {
                            for l in 0..d {
                                gzr[a * d + l] = gr[a] * vr[l];
                            }
                        }
                        let gvr = gv.row_mut(r);
                        for a in 0..k {
                            for l in 0..d {
                                gvr[l] += gr[a] * zr[a * d + l];
                            }
                        }
                    }
                    accumulate(&mut grads, z, gz);
                    accumulate(&mut grads, v, gv);
                }
            }
        }

        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn column_sums(g: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (a, v) in acc.iter_mut().zip(g.row(r)) {
            *a += v;
        }
    }
    acc
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
