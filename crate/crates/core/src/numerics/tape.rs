//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so a node's
//! inputs always precede it. [`Tape::backward`] walks the list in reverse and
//! accumulates adjoints. Constant tables (memory banks) are borrowed for the
//! tape's lifetime rather than copied.

use super::matrix::{dot, Matrix};
use crate::avid_loss::NceContext;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Input,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Normalize { x: Var, eps: f64, norms: Vec<f64> },
    GatherDot { x: Var, table: &'a Matrix, ids: Vec<usize> },
    Nce { s: Var, positives: usize, ctx: NceContext },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Matrix },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints of every node reachable from the loss.
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape(),
                rhs: rv.shape(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms = xv.row_norms();
        let value = xv.l2_normalize_rows(eps);
        self.push(value, Op::Normalize { x, eps, norms })
    }

    /// `out[b][w] = x[b] · table[ids[b * width + w]]` for a `B × width` output.
    pub fn gather_dot(&mut self, x: Var, table: &'a Matrix, ids: Vec<usize>, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != table.cols() {
            return Err(Error::Dimension {
                op: "gather_dot",
                lhs: xv.shape(),
                rhs: table.shape(),
            });
        }
        if ids.len() != xv.rows() * width {
            return Err(Error::contract(format!(
                "gather_dot expects {} ids for {} rows of width {width}, got {}",
                xv.rows() * width,
                xv.rows(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::IdOutOfRange { id: bad, n: table.rows() });
        }
        let mut value = Matrix::zeros(xv.rows(), width);
        for b in 0..xv.rows() {
            let xr = xv.row(b);
            for w in 0..width {
                value.set(b, w, dot(xr, table.row(ids[b * width + w])));
            }
        }
        Ok(self.push(value, Op::GatherDot { x, table, ids }))
    }

    /// Per-row noise-contrastive loss over a similarity matrix whose first
    /// `positives` columns are data targets and remaining columns are noise
    /// samples. Positive terms are averaged, noise terms summed; the result
    /// is a `B × 1` column.
    pub fn nce(&mut self, s: Var, positives: usize, ctx: NceContext) -> Result<Var> {
        let sv = self.value(s);
        if positives == 0 || sv.cols() != positives + ctx.k {
            return Err(Error::contract(format!(
                "nce expects {positives} positive + {} noise columns, got {}",
                ctx.k,
                sv.cols()
            )));
        }
        let mut value = Matrix::zeros(sv.rows(), 1);
        let inv_p = 1.0 / positives as f64;
        for b in 0..sv.rows() {
            let row = sv.row(b);
            let pos: f64 = row[..positives].iter().map(|&x| ctx.positive_term(x).0).sum();
            let neg: f64 = row[positives..].iter().map(|&x| ctx.negative_term(x).0).sum();
            value.set(b, 0, pos * inv_p + neg);
        }
        Ok(self.push(value, Op::Nce { s, positives, ctx }))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: lv.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::IdOutOfRange { id: bad, n: lv.cols() });
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
            loss -= (lv.get(r, label) - max - z.ln()).min(0.0);
        }
        let n = labels.len().max(1) as f64;
        let value = Matrix::scalar(loss / n);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::new(av.rows(), av.cols(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).data().len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of the scalar `loss` node with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::AddRow(x, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *x, g.clone());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(&mut adj, *x, Matrix::new(g.rows(), g.cols(), data)?);
                }
                Op::Normalize { x, eps, norms } => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let out = dx.row_mut(r);
                        if norms[r] >= *eps {
                            let proj = dot(yr, gr);
                            for c in 0..gr.len() {
                                out[c] = (gr[c] - yr[c] * proj) / norms[r];
                            }
                        } else {
                            for c in 0..gr.len() {
                                out[c] = gr[c] / eps;
                            }
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::GatherDot { x, table, ids } => {
                    let width = g.cols();
                    let mut dx = Matrix::zeros(g.rows(), table.cols());
                    for b in 0..g.rows() {
                        let out = dx.row_mut(b);
                        for w in 0..width {
                            let coef = g.get(b, w);
                            if coef == 0.0 {
                                continue;
                            }
                            for (o, t) in out.iter_mut().zip(table.row(ids[b * width + w])) {
                                *o += coef * t;
                            }
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Nce { s, positives, ctx } => {
                    let sv = self.value(*s);
                    let inv_p = 1.0 / *positives as f64;
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    for b in 0..sv.rows() {
                        let up = g.get(b, 0);
                        let row = sv.row(b);
                        let out = ds.row_mut(b);
                        for c in 0..row.len() {
                            out[c] = if c < *positives {
                                up * inv_p * ctx.positive_term(row[c]).1
                            } else {
                                up * ctx.negative_term(row[c]).1
                            };
                        }
                    }
                    acc(&mut adj, *s, ds);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let up = g.get(0, 0) / labels.len().max(1) as f64;
                    let mut dl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let v = dl.get(r, label);
                        dl.set(r, label, v - 1.0);
                    }
                    dl.data_mut().iter_mut().for_each(|v| *v *= up);
                    acc(&mut adj, *logits, dl);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(d, y)| d * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(d, x)| d * x).collect();
                    acc(&mut adj, *a, Matrix::new(g.rows(), g.cols(), da)?);
                    acc(&mut adj, *b, Matrix::new(g.rows(), g.cols(), db)?);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut adj, *x, g.map(|v| v * c));
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut adj, *x, Matrix::filled(r, c, g.get(0, 0)));
                }
            }
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }
}
