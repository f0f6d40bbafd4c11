//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates parameter gradients into a [`ParamStore`].

use super::matrix::{dot, matmul_into, Matrix};
use super::ops::{gelu, gelu_grad, mean_inv_std, relu, sigmoid, softmax_row_into, softplus};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    GatherRows {
        param: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    MulConst(Var, Matrix),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        keep: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowDot(Var, Var),
    Bce {
        pos: Var,
        neg: Var,
        weight: Vec<f64>,
        denom: f64,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
        denom: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Rows `ids` of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let mut out = Matrix::zeros(ids.len(), table.cols());
        for (r, &i) in ids.iter().enumerate() {
            if i >= table.rows() {
                return Err(Error::Config(format!(
                    "row {i} out of range for `{}` with {} rows",
                    store.get(id).name,
                    table.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                param: id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_transb(self.value(b))?;
        Ok(self.push(v, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// `a + 1·bias` for a `1 × cols` bias.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let src = self.value(a);
        if factors.len() != src.rows() {
            return Err(Error::Dimension {
                op: "row_scale",
                left: src.shape(),
                right: (factors.len(), 1),
            });
        }
        let mut v = src.clone();
        for (r, &f) in factors.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(v, Op::RowScale(a, factors)))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let src = self.value(a);
        if src.shape() != mask.shape() {
            return Err(dim_err("mul_const", src, &mask));
        }
        let data = src.as_slice().iter().zip(mask.as_slice()).map(|(x, m)| x * m).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data)?;
        Ok(self.push(v, Op::MulConst(a, mask)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(dim_err("layer_norm", xv, g));
        }
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_stds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, inv_std) = mean_inv_std(row, eps);
            inv_stds.push(inv_std);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv_std;
            }
            let xh = xhat.row(r);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g.as_slice()[c] * xh[c] + b.as_slice()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std: inv_stds,
            },
        ))
    }

    /// Row-wise softmax over entries where `keep` is true; others are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.rows() * xv.cols() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                left: xv.shape(),
                right: (keep.len(), 1),
            });
        }
        let c = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), c);
        for r in 0..xv.rows() {
            softmax_row_into(xv.row(r), Some(&keep[r * c..(r + 1) * c]), out.row_mut(r))
                .map_err(|_| Error::DegenerateMask { row: r })?;
        }
        Ok(self.push(out, Op::MaskedSoftmax { x, keep }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: xv.shape(),
                right: (start, width),
            });
        }
        let mut out = Matrix::zeros(xv.rows(), width);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + count > xv.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: xv.shape(),
                right: (start, count),
            });
        }
        let c = xv.cols();
        let data = xv.as_slice()[start * c..(start + count) * c].to_vec();
        let out = Matrix::from_vec(count, c, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, width);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), pv));
            }
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(Error::Dimension {
                    op: "select_rows",
                    left: xv.shape(),
                    right: (r, 0),
                });
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Per-row dot products of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("row_dot", av, bv));
        }
        let data = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let out = Matrix::from_vec(av.rows(), 1, data)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// `Σ_r w_r [softplus(−pos_r) + softplus(neg_r)] / denom`: binary
    /// cross-entropy of a positive and a negative logit per row.
    pub fn bce_pos_neg(&mut self, pos: Var, neg: Var, weight: Vec<f64>, denom: f64) -> Result<Var> {
        let (pv, nv) = (self.value(pos), self.value(neg));
        if pv.shape() != nv.shape() || pv.cols() != 1 || weight.len() != pv.rows() {
            return Err(dim_err("bce_pos_neg", pv, nv));
        }
        let mut loss = 0.0;
        for (r, &w) in weight.iter().enumerate() {
            if w != 0.0 {
                loss += w * (softplus(-pv.get(r, 0)) + softplus(nv.get(r, 0)));
            }
        }
        let out = Matrix::row_vector(&[if denom > 0.0 { loss / denom } else { 0.0 }]);
        Ok(self.push(
            out,
            Op::Bce {
                pos,
                neg,
                weight,
                denom,
            },
        ))
    }

    /// Mean (over `denom`) softmax cross-entropy, one target column per row.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], denom: f64) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::Dimension {
                op: "softmax_xent",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= lv.cols() {
                return Err(Error::Dimension {
                    op: "softmax_xent",
                    left: lv.shape(),
                    right: (r, t),
                });
            }
            softmax_row_into(lv.row(r), None, probs.row_mut(r)).map_err(|_| Error::DegenerateMask { row: r })?;
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let out = Matrix::row_vector(&[if denom > 0.0 { loss / denom } else { 0.0 }]);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
                denom,
            },
        ))
    }

    /// Backpropagates from the `1 × 1` node `loss`, adding parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g)?,
                Op::GatherRows { param, ids } => {
                    let pg = &mut store.get_mut(*param).grad;
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, s) in pg.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul_transb(bv)?;
                    let gb = av.transa_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTransB(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    matmul_into(
                        g.as_slice(),
                        bv.as_slice(),
                        ga.as_mut_slice(),
                        g.rows(),
                        g.cols(),
                        bv.cols(),
                    );
                    let gb = g.transa_matmul(av)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, s) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::RowScale(a, f) => {
                    let mut ga = g;
                    for (r, &fr) in f.iter().enumerate() {
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= fr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MulConst(a, mask) => {
                    let mut ga = g;
                    for (x, m) in ga.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *x *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, &inp) in ga.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                        if inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    for (x, &inp) in ga.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                        *x *= gelu_grad(inp);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gainv = self.value(*gain).as_slice();
                    let cols = g.cols();
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(g.rows(), cols);
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            ggain.as_mut_slice()[c] += gr[c] * xh[c];
                            gbias.as_mut_slice()[c] += gr[c];
                            dxhat[c] = gr[c] * gainv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskedSoftmax { x, keep } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = Matrix::zeros(y.rows(), c);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            if keep[r * c + j] {
                                *o = yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let c = xv.cols();
                    gx.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let s = g.get(r, 0);
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                            *o = s * v;
                        }
                        for (o, &v) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Bce {
                    pos,
                    neg,
                    weight,
                    denom,
                } => {
                    let up = g.get(0, 0);
                    let (pv, nv) = (self.value(*pos), self.value(*neg));
                    let mut gp = Matrix::zeros(pv.rows(), 1);
                    let mut gn = Matrix::zeros(nv.rows(), 1);
                    if *denom > 0.0 {
                        for (r, &w) in weight.iter().enumerate() {
                            if w != 0.0 {
                                gp.set(r, 0, up * w * (sigmoid(pv.get(r, 0)) - 1.0) / denom);
                                gn.set(r, 0, up * w * sigmoid(nv.get(r, 0)) / denom);
                            }
                        }
                    }
                    accumulate(&mut grads, *pos, gp);
                    accumulate(&mut grads, *neg, gn);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                    denom,
                } => {
                    let up = g.get(0, 0);
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    if *denom > 0.0 {
                        for (r, &t) in targets.iter().enumerate() {
                            for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = up * p / denom;
                            }
                            let cur = gl.get(r, t);
                            gl.set(r, t, cur - up / denom);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
