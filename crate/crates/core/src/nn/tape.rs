//! Wengert-list reverse-mode autodiff. A `Tape` owns every intermediate
//! tensor of one forward pass; `backward` walks the list in reverse and
//! accumulates gradients into the leaves.
//!
//! Tensors are row-major `Vec<f64>` with an explicit shape. Scalars use
//! shape `[1]`, vectors `[n]`, matrices `[r, c]`. Parameters are bound by
//! name via [`Tape::param`]; binding the same parameter twice returns the
//! same node so gradients from repeated use accumulate correctly.

use std::collections::BTreeMap;

use super::param::Param;
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter name after a backward pass.
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LnClamped(Var, f64),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    StackRows(Vec<Var>),
    Row(Var, usize),
    ConcatRows(Var, Var),
    MeanRows(Var, Vec<usize>),
    Embed(Var, Vec<usize>),
    Reshape(Var),
    CeLoss(Var, Vec<usize>),
    BceLoss(Var, Vec<f64>),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(data, shape, Op::Leaf, false)
    }

    /// Trainable leaf without a parameter binding (used in gradient checks).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(data, shape, Op::Leaf, true)
    }

    /// Bind a named parameter as a trainable leaf. Repeated binds of the
    /// same name return the original node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.bindings.get(&p.name) {
            return v;
        }
        let v = self.push(p.data.clone(), p.shape.clone(), Op::Leaf, true);
        self.bindings.insert(p.name.clone(), v);
        v
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected rank 1 or 2, got {s:?}"),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if ka != kb {
            return Err(NnError::Shape {
                context: "matmul inner dimensions".into(),
                left: ka,
                right: kb,
            });
        }
        let mut out = vec![0.0; m * n];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for i in 0..m {
            for p in 0..ka {
                let av = ad[i * ka + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(out, vec![c, r], Op::Transpose(a), ng)
    }

    fn zip_same_shape(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (la, lb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        if la != lb {
            return Err(NnError::Shape {
                context: "elementwise operands".into(),
                left: la,
                right: lb,
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same_shape(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same_shape(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same_shape(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_same_shape(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `(rows, cols) + (cols)` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (r, c) = self.rows_cols(a);
        let bl = self.nodes[bias.0].data.len();
        if bl != c {
            return Err(NnError::Shape {
                context: "row-broadcast bias".into(),
                left: c,
                right: bl,
            });
        }
        let bd = self.nodes[bias.0].data.clone();
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bd[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(data, shape, Op::AddRow(a, bias), ng))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Neg(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::Scale(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| c + x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, Op::AddConst(a), ng)
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(data, shape, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp binds.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map_unary(a, |x| x.max(floor).ln(), Op::LnClamped(a, floor))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(a);
        self.push(vec![s / n], vec![1], Op::Mean(a), ng)
    }

    /// Numerically-stable softmax applied to each row independently.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(out, shape, Op::SoftmaxRows(a), ng)
    }

    /// Stack rank-1 vectors of equal length into a `(n, d)` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Contract("stack_rows on empty list".into()));
        }
        let d = self.nodes[parts[0].0].data.len();
        let mut data = Vec::with_capacity(parts.len() * d);
        let mut ng = false;
        for &p in parts {
            let pd = &self.nodes[p.0].data;
            if pd.len() != d {
                return Err(NnError::Shape {
                    context: "stack_rows row widths".into(),
                    left: d,
                    right: pd.len(),
                });
            }
            data.extend_from_slice(pd);
            ng |= self.needs(p);
        }
        Ok(self.push(
            data,
            vec![parts.len(), d],
            Op::StackRows(parts.to_vec()),
            ng,
        ))
    }

    /// Extract row `i` of a matrix as a rank-1 vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, NnError> {
        let (r, c) = self.rows_cols(a);
        if i >= r {
            return Err(NnError::Index {
                what: "row".into(),
                index: i,
                bound: r,
            });
        }
        let data = self.nodes[a.0].data[i * c..(i + 1) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(data, vec![c], Op::Row(a, i), ng))
    }

    /// Concatenate two matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ra, ca) = self.rows_cols(a);
        let (rb, cb) = self.rows_cols(b);
        if ca != cb {
            return Err(NnError::Shape {
                context: "concat_rows column widths".into(),
                left: ca,
                right: cb,
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![ra + rb, ca], Op::ConcatRows(a, b), ng))
    }

    /// Mean of the selected rows of a matrix, as a rank-1 vector.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NnError> {
        let (r, c) = self.rows_cols(a);
        if rows.is_empty() {
            return Err(NnError::Contract("mean_rows over empty selection".into()));
        }
        let mut out = vec![0.0; c];
        for &ri in rows {
            if ri >= r {
                return Err(NnError::Index {
                    what: "mean_rows row".into(),
                    index: ri,
                    bound: r,
                });
            }
            for j in 0..c {
                out[j] += self.nodes[a.0].data[ri * c + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
        let ng = self.needs(a);
        Ok(self.push(out, vec![c], Op::MeanRows(a, rows.to_vec()), ng))
    }

    /// Gather rows of an embedding table: `(vocab, d)` + ids -> `(len, d)`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (v, d) = self.rows_cols(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::Index {
                    what: "embedding id".into(),
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(data, vec![ids.len(), d], Op::Embed(table, ids.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let want = numel(&shape);
        let have = self.nodes[a.0].data.len();
        if want != have {
            return Err(NnError::Shape {
                context: "reshape element count".into(),
                left: have,
                right: want,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(a);
        Ok(self.push(data, shape, Op::Reshape(a), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` with shape `(seq, vocab)`.
    pub fn ce_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (t, v) = self.rows_cols(logits);
        if t != targets.len() {
            return Err(NnError::Shape {
                context: "ce_loss rows vs targets".into(),
                left: t,
                right: targets.len(),
            });
        }
        let mut total = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(NnError::Index {
                    what: "ce_loss target id".into(),
                    index: tgt,
                    bound: v,
                });
            }
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            vec![total / t as f64],
            vec![1],
            Op::CeLoss(logits, targets.to_vec()),
            ng,
        ))
    }

    /// Binary cross entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]` inside the logs.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var, NnError> {
        let n = self.nodes[p.0].data.len();
        if n != labels.len() {
            return Err(NnError::Shape {
                context: "bce_loss probabilities vs labels".into(),
                left: n,
                right: labels.len(),
            });
        }
        const EPS: f64 = 1e-7;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let pc = self.nodes[p.0].data[i].clamp(EPS, 1.0 - EPS);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let ng = self.needs(p);
        Ok(self.push(
            vec![total / n as f64],
            vec![1],
            Op::BceLoss(p, labels.to_vec()),
            ng,
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every bound
    /// parameter: reachable ones get their accumulated gradient, bound but
    /// unreachable ones get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap, NnError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.data.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&x| x == 0.0) {
                grads[i] = g;
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.rows_cols(a);
                    let (_, nn_) = self.rows_cols(b);
                    if self.needs(a) {
                        // dA = G @ B^T
                        let bd = &self.nodes[b.0].data;
                        let ga = &mut grads[a.0];
                        for r in 0..m {
                            for j in 0..nn_ {
                                let gv = g[r * nn_ + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[r * k + p] += gv * bd[p * nn_ + j];
                                }
                            }
                        }
                    }
                    if self.needs(b) {
                        // dB = A^T @ G
                        let ad = &self.nodes[a.0].data;
                        let gb = &mut grads[b.0];
                        for r in 0..m {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..nn_ {
                                    gb[p * nn_ + j] += av * g[r * nn_ + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (c, r) = self.rows_cols(Var(i));
                    if self.needs(a) {
                        let ga = &mut grads[a.0];
                        for x in 0..c {
                            for y in 0..r {
                                ga[y * c + x] += g[x * r + y];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                    if self.needs(b) {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                            *gb += gv;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    let (r, c) = self.rows_cols(a);
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                    if self.needs(bias) {
                        let gb = &mut grads[bias.0];
                        for ri in 0..r {
                            for j in 0..c {
                                gb[j] += g[ri * c + j];
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                    if self.needs(b) {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                            *gb -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bd = self.nodes[b.0].data.clone();
                        for ((ga, &gv), bv) in grads[a.0].iter_mut().zip(&g).zip(bd) {
                            *ga += gv * bv;
                        }
                    }
                    if self.needs(b) {
                        let ad = self.nodes[a.0].data.clone();
                        for ((gb, &gv), av) in grads[b.0].iter_mut().zip(&g).zip(ad) {
                            *gb += gv * av;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let ad = self.nodes[a.0].data.clone();
                    let bd = self.nodes[b.0].data.clone();
                    if self.needs(a) {
                        for ((ga, &gv), bv) in grads[a.0].iter_mut().zip(&g).zip(&bd) {
                            *ga += gv / bv;
                        }
                    }
                    if self.needs(b) {
                        for (j, (gb, &gv)) in grads[b.0].iter_mut().zip(&g).enumerate() {
                            *gb -= gv * ad[j] / (bd[j] * bd[j]);
                        }
                    }
                }
                Op::Neg(a) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga -= gv;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += c * gv;
                        }
                    }
                }
                Op::AddConst(a) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let ad = self.nodes[a.0].data.clone();
                        for ((ga, &gv), av) in grads[a.0].iter_mut().zip(&g).zip(ad) {
                            if av > 0.0 {
                                *ga += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(a) {
                        let yd = self.nodes[i].data.clone();
                        for ((ga, &gv), y) in grads[a.0].iter_mut().zip(&g).zip(yd) {
                            *ga += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(a) {
                        let yd = self.nodes[i].data.clone();
                        for ((ga, &gv), y) in grads[a.0].iter_mut().zip(&g).zip(yd) {
                            *ga += gv * (1.0 - y * y);
                        }
                    }
                }
                Op::LnClamped(a, floor) => {
                    if self.needs(a) {
                        let ad = self.nodes[a.0].data.clone();
                        for ((ga, &gv), av) in grads[a.0].iter_mut().zip(&g).zip(ad) {
                            if av >= floor {
                                *ga += gv / av;
                            }
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs(a) {
                        let yd = self.nodes[i].data.clone();
                        for ((ga, &gv), y) in grads[a.0].iter_mut().zip(&g).zip(yd) {
                            *ga += gv / (2.0 * y);
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        for ga in grads[a.0].iter_mut() {
                            *ga += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    if self.needs(a) {
                        let inv = 1.0 / self.nodes[a.0].data.len() as f64;
                        for ga in grads[a.0].iter_mut() {
                            *ga += g[0] * inv;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(a) {
                        let (r, c) = self.rows_cols(a);
                        let yd = self.nodes[i].data.clone();
                        let ga = &mut grads[a.0];
                        for ri in 0..r {
                            let y = &yd[ri * c..(ri + 1) * c];
                            let gr = &g[ri * c..(ri + 1) * c];
                            let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..c {
                                ga[ri * c + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::StackRows(parts) => {
                    let d = g.len() / parts.len();
                    for (ri, p) in parts.iter().enumerate() {
                        if self.needs(*p) {
                            let gp = &mut grads[p.0];
                            for j in 0..d {
                                gp[j] += g[ri * d + j];
                            }
                        }
                    }
                }
                Op::Row(a, ri) => {
                    if self.needs(a) {
                        let c = g.len();
                        let ga = &mut grads[a.0];
                        for j in 0..c {
                            ga[ri * c + j] += g[j];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let la = self.nodes[a.0].data.len();
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g[..la]) {
                            *ga += gv;
                        }
                    }
                    if self.needs(b) {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g[la..]) {
                            *gb += gv;
                        }
                    }
                }
                Op::MeanRows(a, rows) => {
                    if self.needs(a) {
                        let c = g.len();
                        let inv = 1.0 / rows.len() as f64;
                        let ga = &mut grads[a.0];
                        for &ri in &rows {
                            for j in 0..c {
                                ga[ri * c + j] += g[j] * inv;
                            }
                        }
                    }
                }
                Op::Embed(table, ids) => {
                    if self.needs(table) {
                        let d = g.len() / ids.len();
                        let gt = &mut grads[table.0];
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[t * d + j];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                            *ga += gv;
                        }
                    }
                }
                Op::CeLoss(logits, targets) => {
                    if self.needs(logits) {
                        let (t, v) = self.rows_cols(logits);
                        let scale = g[0] / t as f64;
                        let ld = self.nodes[logits.0].data.clone();
                        let gl = &mut grads[logits.0];
                        for (ri, &tgt) in targets.iter().enumerate() {
                            let row = &ld[ri * v..(ri + 1) * v];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                            for j in 0..v {
                                let sm = (row[j] - m).exp() / z;
                                let ind = if j == tgt { 1.0 } else { 0.0 };
                                gl[ri * v + j] += scale * (sm - ind);
                            }
                        }
                    }
                }
                Op::BceLoss(p, labels) => {
                    if self.needs(p) {
                        const EPS: f64 = 1e-7;
                        let scale = g[0] / labels.len() as f64;
                        let pd = self.nodes[p.0].data.clone();
                        let gp = &mut grads[p.0];
                        for (j, &y) in labels.iter().enumerate() {
                            let pv = pd[j];
                            if pv >= EPS && pv <= 1.0 - EPS {
                                gp[j] -= scale * (y / pv - (1.0 - y) / (1.0 - pv));
                            }
                        }
                    }
                }
            }
            grads[i] = g;
        }

        let mut map = GradMap::new();
        for (name, &v) in &self.bindings {
            map.insert(name.clone(), std::mem::take(&mut grads[v.0]));
        }
        let _ = n;
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x * x), x = [1, -2, 3] -> grad = 2x
        let mut t = Tape::new();
        let x = Param::from_values("x", vec![1.0, -2.0, 3.0], vec![3]);
        let xv = t.param(&x);
        let sq = t.mul(xv, xv).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"], vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut t = Tape::new();
        let x = Param::from_values("x", vec![1.0, 2.0], vec![2]);
        let _xv = t.param(&x);
        let c = t.constant(vec![5.0], vec![1]);
        let loss = t.scale(c, 1.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"], vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2]);
        assert!(matches!(t.backward(x), Err(NnError::Contract(_))));
    }

    #[test]
    fn ce_loss_uniform_logits_is_ln_vocab() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0; 4], vec![1, 4]);
        let loss = t.ce_loss(logits, &[2]).unwrap();
        assert!((t.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_certain_prediction_is_near_zero() {
        let mut t = Tape::new();
        let logits = t.constant(vec![1e6, 0.0, 0.0], vec![1, 3]);
        let loss = t.ce_loss(logits, &[0]).unwrap();
        assert!(t.scalar_value(loss).abs() < 1e-9);
    }

    #[test]
    fn ce_loss_two_way_closed_form() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0, 0.0], vec![1, 2]);
        let loss = t.ce_loss(logits, &[0]).unwrap();
        assert!((t.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_loss_target_out_of_vocab_is_index_error() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0, 0.0], vec![1, 2]);
        assert!(matches!(
            t.ce_loss(logits, &[2]),
            Err(NnError::Index { .. })
        ));
    }

    #[test]
    fn bce_loss_examples() {
        let mut t = Tape::new();
        let p = t.constant(vec![0.5], vec![1]);
        let l = t.bce_loss(p, &[1.0]).unwrap();
        assert!((t.scalar_value(l) - 0.6931471805599453).abs() < 1e-12);

        let p2 = t.constant(vec![1.0 - 1e-7], vec![1]);
        let l2 = t.bce_loss(p2, &[1.0]).unwrap();
        assert!(t.scalar_value(l2) < 1e-6);

        let p3 = t.constant(vec![0.9, 0.1], vec![2]);
        let l3 = t.bce_loss(p3, &[1.0, 0.0]).unwrap();
        let want = -0.5 * (0.9f64.ln() + 0.9f64.ln());
        assert!((t.scalar_value(l3) - want).abs() < 1e-6);
        assert!((t.scalar_value(l3) - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn bce_length_mismatch_is_shape_error() {
        let mut t = Tape::new();
        let p = t.constant(vec![0.5, 0.5], vec![2]);
        assert!(matches!(t.bce_loss(p, &[1.0]), Err(NnError::Shape { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0], vec![2, 3]);
        let s = t.softmax_rows(x);
        for r in 0..2 {
            let sum: f64 = t.value(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 8], vec![4, 2]);
        match t.matmul(a, b) {
            Err(NnError::Shape { left, right, .. }) => {
                assert_eq!((left, right), (3, 4));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_param_binding_accumulates() {
        // loss = sum(x) + sum(x) -> grad = 2 per element
        let mut t = Tape::new();
        let x = Param::from_values("x", vec![1.0, 1.0], vec![2]);
        let a = t.param(&x);
        let b = t.param(&x);
        assert_eq!(a, b);
        let s1 = t.sum(a);
        let s2 = t.sum(b);
        let loss = t.add(s1, s2).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g["x"], vec![2.0, 2.0]);
    }
}
