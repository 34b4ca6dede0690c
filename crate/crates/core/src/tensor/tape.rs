use super::gemm::{gemm, gemm_strided};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;
/// Row norms below this are clamped before dividing, so zero rows map to zero.
pub const L2_NORM_FLOOR: f64 = 1e-12;
/// `sqrt(2/pi)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Matmul,
    MatmulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    L2NormalizeRows,
    Transpose,
    ConcatLastDim,
    ConcatRows,
    GatherRows,
    Mse,
    WeightedSqError,
    Sum,
    Mean,
    Attention,
    CrossEntropy,
}

enum Op {
    Leaf,
    Constant,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose(Var),
    ConcatLastDim(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Mse(Var, Var),
    WeightedSqError { a: Var, b: Var, weights: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    q_segs: Vec<usize>,
    kv_segs: Vec<usize>,
    heads: usize,
    probs: Vec<f64>,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Matmul(..) => OpKind::Matmul,
            Op::MatmulNt(..) => OpKind::MatmulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::Transpose(..) => OpKind::Transpose,
            Op::ConcatLastDim(..) => OpKind::ConcatLastDim,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Mse(..) => OpKind::Mse,
            Op::WeightedSqError { .. } => OpKind::WeightedSqError,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Attention(..) => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Values are immutable once recorded. An operation whose inputs carry no
/// gradient is stored as a constant, so frozen branches cost nothing in the
/// backward pass. A tape is meant to live for a single training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

fn rc(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// Corrupts the backward rule of one op family (scales its upstream
    /// gradient by 1.25). Only useful for proving that gradient checks catch
    /// a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies a value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn kind(&self, x: Var) -> OpKind {
        self.nodes[x.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&Tensor> {
        self.nodes[x.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros of its shape when none was accumulated.
    pub fn grad_or_zeros(&self, x: Var) -> Tensor {
        self.grad(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(x).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rc(self.value(a));
        let (k2, n) = rc(self.value(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs is {m}x{k}, rhs is {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rc(self.value(a));
        let (n, k2) = rc(self.value(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("lhs is {m}x{k}, rhs (transposed) is {n}x{k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatmulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_row_vec(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (c, r) = (self.value(x).cols(), self.value(row));
        if r.len() != c {
            return Err(Error::shape(
                op,
                format!("row vector has {} values, matrix has {c} columns", r.len()),
            ));
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_vec("add_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tr.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row_vec("mul_row", x, row)?;
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tr.data()[i % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Divides each row by `max(‖row‖, L2_NORM_FLOOR)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn concat_last_dim(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat_last_dim of zero tensors"));
        };
        let r = self.value(first).rows();
        if let Some(bad) = xs.iter().find(|&&v| self.value(v).rows() != r) {
            return Err(Error::shape(
                "concat_last_dim",
                format!("row counts {r} and {}", self.value(*bad).rows()),
            ));
        }
        let total: usize = xs.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatLastDim(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::vstack(&parts).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("concat_rows", detail),
            other => other,
        })?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with an empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {} rows", t.rows()),
            ));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// `Σ_r w_r Σ_c (a_rc − b_rc)²` with one weight per row.
    pub fn weighted_sq_error(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        self.same_shape("weighted_sq_error", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if weights.len() != ta.rows() {
            return Err(Error::shape(
                "weighted_sq_error",
                format!("{} weights for {} rows", weights.len(), ta.rows()),
            ));
        }
        let mut s = 0.0;
        for (r, w) in weights.iter().enumerate() {
            let row: f64 = ta
                .row(r)
                .iter()
                .zip(tb.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            s += w * row;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqError {
                a,
                b,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q` rows are split into consecutive segments of `q_segs` lengths and
    /// `k`/`v` rows into `kv_segs`; query segment `i` attends only to key
    /// segment `i`. Self-attention passes the same segmentation twice.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &[usize],
        kv_segs: &[usize],
        heads: usize,
    ) -> Result<Var> {
        let (tq, d) = rc(self.value(q));
        let (tk, dk) = rc(self.value(k));
        let (tv, dv) = rc(self.value(v));
        if dk != d || dv != d || tv != tk {
            return Err(Error::shape(
                "attention",
                format!("q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if q_segs.len() != kv_segs.len()
            || q_segs.iter().sum::<usize>() != tq
            || kv_segs.iter().sum::<usize>() != tk
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "segments q {q_segs:?} (rows {tq}) and kv {kv_segs:?} (rows {tk}) disagree"
                ),
            ));
        }
        if let Some(s) = (0..q_segs.len()).find(|&s| q_segs[s] > 0 && kv_segs[s] == 0) {
            return Err(Error::shape(
                "attention",
                format!("segment {s} has queries but no keys"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; tq * d];
        let mut probs = Vec::with_capacity(
            q_segs
                .iter()
                .zip(kv_segs)
                .map(|(a, b)| a * b * heads)
                .sum(),
        );
        let (mut qo, mut ko) = (0, 0);
        for (&nq, &nk) in q_segs.iter().zip(kv_segs) {
            for h in 0..heads {
                let c = h * dh;
                if nq == 0 {
                    continue;
                }
                let start = probs.len();
                probs.resize(start + nq * nk, 0.0);
                let p = &mut probs[start..];
                gemm(
                    nq,
                    dh,
                    nk,
                    &qd[qo * d + c..],
                    (d, 1),
                    &kd[ko * d + c..],
                    (1, d),
                    p,
                    0.0,
                );
                for row in p.chunks_mut(nk) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    softmax_in_place(row);
                }
                gemm_strided(
                    nq,
                    nk,
                    dh,
                    p,
                    (nk, 1),
                    &vd[ko * d + c..],
                    (d, 1),
                    &mut out[qo * d + c..],
                    (d, 1),
                    0.0,
                );
            }
            qo += nq;
            ko += nk;
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(tq, d, out),
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                q_segs: q_segs.to_vec(),
                kv_segs: kv_segs.to_vec(),
                heads,
                probs,
            })),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = rc(t);
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target class {bad} with {k} logits"),
            ));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(targets) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every trainable leaf reachable from
    /// `loss`. Repeated calls add to existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g = g.map(|v| v * 1.25);
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], x: Var, g: Tensor) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.value(x).len());
        match &mut grads[x.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => {
                let g = if g.shape() == self.value(x).shape() {
                    g
                } else {
                    g.reshape(self.value(x).shape().to_vec()).expect("same size")
                };
                *slot = Some(g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = rc(ta);
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = rc(ta);
                let n = tb.rows();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (k, 1), &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (1, n), ta.data(), (k, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip(g, tb, |gv, bv| gv * bv));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip(g, ta, |gv, av| gv * av));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*row) {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for grow in g.data().chunks(c) {
                        for (d, v) in dr.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, dr).expect("row"));
                }
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (self.value(*x), self.value(*row));
                let c = tx.cols();
                if self.requires_grad(*x) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, gv)| gv * tr.data()[j % c])
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), data).expect("x"));
                }
                if self.requires_grad(*row) {
                    let mut dr = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(tx.data().chunks(c)) {
                        for j in 0..c {
                            dr[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(tr.shape().to_vec(), dr).expect("row"));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut dx = g.data().to_vec();
                for (drow, yrow) in dx.chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("x"));
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let mut dx = g.data().to_vec();
                for ((drow, yrow), r) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let mean_g = drow.iter().sum::<f64>() / c as f64;
                    let mean_gy = drow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = r * (*dv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("x"));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, zip(g, tx, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut dx = g.data().to_vec();
                for ((drow, yrow), &n) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(norms) {
                    if n > L2_NORM_FLOOR {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (dv, yv) in drow.iter_mut().zip(yrow) {
                            *dv = (*dv - yv * dot) / n;
                        }
                    } else {
                        for dv in drow.iter_mut() {
                            *dv /= n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).expect("x"));
            }
            Op::Transpose(x) => {
                let dx = g.transpose();
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatLastDim(xs) => {
                let (r, total) = rc(y);
                let mut off = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    if self.requires_grad(x) {
                        let mut dx = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dx.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        }
                        let shape = self.value(x).shape().to_vec();
                        self.accumulate(grads, x, Tensor::new(shape, dx).expect("x"));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.requires_grad(x) {
                        let shape = self.value(x).shape().to_vec();
                        let dx = g.data()[off..off + n].to_vec();
                        self.accumulate(grads, x, Tensor::new(shape, dx).expect("x"));
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g.data()[r * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).expect("x"));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / ta.len() as f64;
                let da = zip(ta, tb, |x, yv| s * (x - yv));
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSqError { a, b, weights } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let gv = g.item();
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(j, (x, yv))| 2.0 * gv * weights[j / c] * (x - yv))
                    .collect();
                let da = Tensor::new(ta.shape().to_vec(), data).expect("a");
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let gv = g.item() / tx.len() as f64;
                self.accumulate(grads, *x, Tensor::full(tx.shape(), gv));
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let n = targets.len();
                let s = g.item() / n as f64;
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] -= 1.0;
                }
                for v in dx.iter_mut() {
                    *v *= s;
                }
                self.accumulate(grads, *logits, Tensor::matrix(n, k, dx));
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tq, d) = rc(self.value(s.q));
        let tk = self.value(s.k).rows();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(s.q).data(),
            self.value(s.k).data(),
            self.value(s.v).data(),
        );
        let gd = g.data();
        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let (mut qo, mut ko, mut po) = (0, 0, 0);
        let mut ds = Vec::new();
        for (&nq, &nk) in s.q_segs.iter().zip(&s.kv_segs) {
            for h in 0..s.heads {
                if nq == 0 {
                    continue;
                }
                let c = h * dh;
                let p = &s.probs[po..po + nq * nk];
                po += nq * nk;
                // dV = Pᵀ·dO
                gemm_strided(
                    nk,
                    nq,
                    dh,
                    p,
                    (1, nk),
                    &gd[qo * d + c..],
                    (d, 1),
                    &mut dv[ko * d + c..],
                    (d, 1),
                    1.0,
                );
                // dP = dO·Vᵀ, then through the row softmax and the scale.
                ds.clear();
                ds.resize(nq * nk, 0.0);
                gemm(
                    nq,
                    dh,
                    nk,
                    &gd[qo * d + c..],
                    (d, 1),
                    &vd[ko * d + c..],
                    (1, d),
                    &mut ds,
                    0.0,
                );
                for (drow, prow) in ds.chunks_mut(nk).zip(p.chunks(nk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv_, pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ = dS·K, dK = dSᵀ·Q
                gemm_strided(
                    nq,
                    nk,
                    dh,
                    &ds,
                    (nk, 1),
                    &kd[ko * d + c..],
                    (d, 1),
                    &mut dq[qo * d + c..],
                    (d, 1),
                    1.0,
                );
                gemm_strided(
                    nk,
                    nq,
                    dh,
                    &ds,
                    (1, nk),
                    &qd[qo * d + c..],
                    (d, 1),
                    &mut dk[ko * d + c..],
                    (d, 1),
                    1.0,
                );
            }
            qo += nq;
            ko += nk;
        }
        self.accumulate(grads, s.q, Tensor::matrix(tq, d, dq));
        self.accumulate(grads, s.k, Tensor::matrix(tk, d, dk));
        self.accumulate(grads, s.v, Tensor::matrix(tk, d, dv));
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
