//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for the [`ParamSet`] entries that
//! were read. Graph-shaped operations (row gather/scatter, per-segment softmax)
//! let a whole mini-batch of graphs run as one set of dense matrix products.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ScaleRows(Var, Rc<[f64]>),
    RowDot(Var, Var),
    MulCol(Var, Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    Bce(Var, Rc<[f64]>, f64),
}

/// Per-parameter gradients, aligned with the [`ParamSet`] they came from.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    values: Vec<Cow<'p, Array2<f64>>>,
    ops: Vec<Op>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn owned(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn rows(&self, v: Var) -> usize {
        self.values[v.0].nrows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.values[v.0].ncols()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.owned(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let params = self.params;
        let v = self.push(Cow::Borrowed(params.get(id)), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.owned(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.owned(out, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `1×m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.rows(row), 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        self.owned(out, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.owned(out, Op::Sub(a, b))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.owned(out, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.owned(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.owned(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.owned(out, Op::Sigmoid(a))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.owned(out, Op::Affine(a, scale))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.owned(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.owned(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Row `k` of the output is row `index[k]` of `a`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((index.len(), src.ncols()));
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).assign(&src.row(i));
        }
        self.owned(out, Op::Gather(a, index))
    }

    /// Sums row `k` of `a` into output row `index[k]`.
    pub fn scatter_add(&mut self, a: Var, index: Rc<[usize]>, out_rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), index.len());
        let mut out = Array2::zeros((out_rows, src.ncols()));
        for (k, &i) in index.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &src.row(k);
        }
        self.owned(out, Op::ScatterAdd(a, index))
    }

    pub fn scale_rows(&mut self, a: Var, scale: Rc<[f64]>) -> Var {
        let mut out = self.value(a).clone();
        for (mut row, &s) in out.rows_mut().into_iter().zip(scale.iter()) {
            row *= s;
        }
        self.owned(out, Op::ScaleRows(a, scale))
    }

    /// Row-wise dot product, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.owned(out, Op::RowDot(a, b))
    }

    /// Scales each row of `a` by the matching entry of the column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let out = self.value(a) * self.value(c);
        self.owned(out, Op::MulCol(a, c))
    }

    /// Softmax of a column vector within groups given by `segment[k]`, with
    /// max-subtraction per group.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1);
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(x[[k, 0]]);
        }
        let mut out = Array2::zeros(x.raw_dim());
        let mut sum = vec![0.0; n_segments];
        for (k, &s) in segment.iter().enumerate() {
            let e = (x[[k, 0]] - max[s]).exp();
            out[[k, 0]] = e;
            sum[s] += e;
        }
        for (k, &s) in segment.iter().enumerate() {
            out[[k, 0]] /= sum[s];
        }
        self.owned(out, Op::SegmentSoftmax(a, segment))
    }

    /// Mean binary cross-entropy of probabilities `p` (`n×1`) against
    /// `targets`, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&mut self, p: Var, targets: Rc<[f64]>, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.nrows(), targets.len());
        let n = targets.len().max(1) as f64;
        let total: f64 = pv
            .column(0)
            .iter()
            .zip(targets.iter())
            .map(|(&q, &y)| bce(q, y, eps))
            .sum();
        self.owned(Array2::from_elem((1, 1), total / n), Op::Bce(p, targets, eps))
    }

    /// Gradients of the `1×1` value `loss` with respect to every parameter
    /// read on this tape.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<Option<Array2<f64>>> = vec![None; self.params.len()];

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = &self.values[i];
            match &self.ops[i] {
                Op::Const => {}
                Op::Param(id) => acc(&mut param_grads[id.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[a.0], g);
                    acc(&mut grads[row.0], gr);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], -&g);
                    acc(&mut grads[a.0], g);
                }
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x <= 0.0 { *g = 0.0 });
                    acc(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&**out).for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads[a.0], ga);
                }
                Op::Affine(a, scale) => acc(&mut grads[a.0], g * *scale),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.cols(*p);
                        acc(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.rows(*p);
                        acc(&mut grads[p.0], g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Gather(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &r) in index.iter().enumerate() {
                        let mut row = ga.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::ScatterAdd(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &r) in index.iter().enumerate() {
                        ga.row_mut(k).assign(&g.row(r));
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::ScaleRows(a, scale) => {
                    let mut ga = g;
                    for (mut row, &s) in ga.rows_mut().into_iter().zip(scale.iter()) {
                        row *= s;
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::RowDot(a, b) => {
                    let ga = self.value(*b) * &g;
                    let gb = self.value(*a) * &g;
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::MulCol(a, c) => {
                    let ga = &g * self.value(*c);
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[c.0], gc);
                }
                Op::SegmentSoftmax(a, segment) => {
                    let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for (k, &s) in segment.iter().enumerate() {
                        dot[s] += out[[k, 0]] * g[[k, 0]];
                    }
                    let mut ga = Array2::zeros(g.raw_dim());
                    for (k, &s) in segment.iter().enumerate() {
                        ga[[k, 0]] = out[[k, 0]] * (g[[k, 0]] - dot[s]);
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Bce(p, targets, eps) => {
                    let pv = self.value(*p);
                    let n = targets.len().max(1) as f64;
                    let scale = g[[0, 0]] / n;
                    let mut gp = Array2::zeros(pv.raw_dim());
                    for (k, &y) in targets.iter().enumerate() {
                        let q = pv[[k, 0]];
                        if q > *eps && q < 1.0 - eps {
                            gp[[k, 0]] = scale * (-y / q + (1.0 - y) / (1.0 - q));
                        }
                    }
                    acc(&mut grads[p.0], gp);
                }
            }
        }
        Grads { grads: param_grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn bce(p: f64, y: f64, eps: f64) -> f64 {
    let q = p.clamp(eps, 1.0 - eps);
    -y * q.ln() - (1.0 - y) * (1.0 - q).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a scalar function of one parameter tensor.
    fn numeric_grad(
        params: &mut ParamSet,
        id: ParamId,
        f: &dyn Fn(&ParamSet) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let shape = params.get(id).raw_dim();
        let mut g = Array2::zeros(shape);
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = params.get(id)[[r, c]];
            params.get_mut(id)[[r, c]] = orig + h;
            let up = f(params);
            params.get_mut(id)[[r, c]] = orig - h;
            let down = f(params);
            params.get_mut(id)[[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut params = ParamSet::new();
        let x = params.add("x", array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4], [-0.9, 0.8, 0.6]]);
        let w = params.add("w", array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.7]]);
        let b = params.add("b", array![[0.05, -0.02]]);
        let f = |p: &ParamSet| -> (f64, Option<Grads>) {
            let mut t = Tape::new(p);
            let xv = t.param(x);
            let wv = t.param(w);
            let bv = t.param(b);
            let h = t.matmul(xv, wv);
            let h = t.add_row(h, bv);
            let r = t.relu(h);
            let th = t.tanh(h);
            let d = t.sub(r, th);
            let ad = t.abs(d);
            let both = t.concat_cols(&[ad, th]);
            let stacked = t.concat_rows(&[ad, r, th]);
            let idx: Rc<[usize]> = vec![0, 2, 2, 1, 4].into();
            let gathered = t.gather(stacked, idx.clone());
            let seg: Rc<[usize]> = vec![0, 1, 1, 0, 1].into();
            let pairs = t.concat_cols(&[gathered, gathered]);
            let sc = t.scatter_add(pairs, seg.clone(), 2);
            let scaled = t.scale_rows(sc, vec![0.5, 2.0].into());
            let dot = t.row_dot(gathered, gathered);
            let sm = t.segment_softmax(dot, seg, 2);
            let weighted = t.mul_col(gathered, sm);
            let z = t.row_dot(weighted, weighted);
            let z2 = t.affine(z, 0.3, -0.1);
            let s = t.sigmoid(z2);
            let sums = t.row_dot(scaled, scaled);
            let s2 = t.sigmoid(sums);
            let bb = t.row_dot(both, both);
            let s3 = t.sigmoid(bb);
            let all = t.concat_rows(&[s, s2, s3]);
            let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
            let loss = t.bce_mean(all, targets.into(), 1e-7);
            let l = t.value(loss)[[0, 0]];
            (l, Some(t.backward(loss)))
        };
        let (_, grads) = f(&params);
        let grads = grads.unwrap();
        for id in [x, w, b] {
            let numeric = numeric_grad(&mut params, id, &|p| f(p).0);
            assert_close(grads.get(id).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn softmax_segments_normalize() {
        let p = ParamSet::new();
        let mut t = Tape::new(&p);
        let x = t.constant(array![[1e3], [-1e3], [0.0], [5.0], [5.0]]);
        let y = t.segment_softmax(x, vec![0, 0, 1, 1, 1].into(), 2);
        let v = t.value(y);
        assert!((v[[0, 0]] + v[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((v[[2, 0]] + v[[3, 0]] + v[[4, 0]] - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn bce_analytic_values() {
        assert!((bce(0.5, 1.0, 1e-7) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(1.0 - 1e-12, 1.0, 1e-7) < 1e-6);
        assert!(bce(0.0, 1.0, 1e-7).is_finite());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut params = ParamSet::new();
        let a = params.add("a", array![[2.0]]);
        let mut t = Tape::new(&params);
        let x = t.param(a);
        let y = t.param(a);
        let sq = t.row_dot(x, y);
        let g = t.backward(sq);
        assert_eq!(g.get(a).unwrap()[[0, 0]], 4.0);
    }
}
