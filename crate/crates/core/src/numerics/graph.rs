//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints.
//! Operations are deliberately coarse (fused attention, fused losses) so a
//! full encoder pass stays at a few hundred nodes.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{masked_softmax_row, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    SoftmaxRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftMargin {
        logits: Var,
        labels: Vec<bool>,
    },
    InfoNce {
        q: Var,
        keys: Var,
        positive: Vec<bool>,
        extra_negatives: Option<Tensor>,
        tau: f64,
        eps: f64,
    },
    PairGram {
        u: Var,
        weights: Rc<Tensor>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Rc<[u8]>,
        ignore: u8,
        probs: Tensor,
        count: usize,
    },
    TotalVariation {
        x: Var,
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    branches: u64,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Digest of the branch taken by every piecewise operation recorded so
    /// far (max-pool winners, signs inside absolute values). Two evaluations
    /// with equal digests lie on the same smooth piece, up to hash collisions.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branch(&mut self, choice: u64) {
        self.branches = (self.branches ^ choice).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, inserting it once per graph. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() < store.len() {
            self.params.resize(store.len(), None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let entry = store.entry(id);
        let v = if entry.trainable {
            self.input(entry.value.clone())
        } else {
            self.constant(entry.value.clone())
        };
        self.params[id.0] = Some(v);
        v
    }

    /// Gradients of bound trainable parameters, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(i)
                    .copied()
                    .flatten()
                    .filter(|v| self.nodes[v.0].needs_grad)
                    .and_then(|v| grads.get(v).cloned())
            })
            .collect()
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value =
            crate::numerics::tensor::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        let c = x.cols();
        if b.len() != c {
            return Err(Error::dim(format!(
                "add_row: bias of {} for {c} columns",
                b.len()
            )));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `Σ wᵢ·xᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::dim("weighted_sum of nothing"))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut value = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "weighted_sum: {:?} vs {shape:?}",
                    t.shape()
                )));
            }
            for (o, x) in value.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(Error::dim("layer_norm affine extent"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention over `n×d` queries, keys and
    /// values. Keys with `keep[j] == false` get exactly zero weight in every
    /// head. Per-head attention matrices are retained for inspection.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keep: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim("attention: q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("attention: {d} dims over {heads} heads")));
        }
        if keep.len() != n {
            return Err(Error::dim(format!(
                "attention: mask of {} for {n} keys",
                keep.len()
            )));
        }
        if !keep.iter().any(|&b| b) {
            return Err(Error::Domain("all keys dropped: empty softmax support".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = vec![0.0; n * n];
            // S = Q_h K_hᵀ · scale
            strided_gemm(
                n,
                dh,
                n,
                scale,
                View::new(qv.data(), off, d, 1),
                View::new(kv.data(), off, 1, d),
                0.0,
                ViewMut::new(&mut s, 0, n, 1),
            );
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                masked_softmax_row(&s[i * n..(i + 1) * n], keep, &mut p[i * n..(i + 1) * n]);
            }
            // O_h = P V_h
            strided_gemm(
                n,
                n,
                dh,
                1.0,
                View::new(&p, 0, n, 1),
                View::new(vv.data(), off, d, 1),
                0.0,
                ViewMut::new(&mut out, off, d, 1),
            );
            probs.push(Tensor::new(vec![n, n], p)?);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Per-head attention weights recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = crate::numerics::tensor::softmax(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {}",
                start + len,
                xv.rows()
            )));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::dim("concat_rows: column mismatch"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column-wise maximum of an `r×c` matrix, giving `1×c`. Ties resolve to
    /// the first row.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::dim("col_max over zero rows"));
        }
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0; c];
        for i in 1..r {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::new(vec![1, c], best)?;
        for &a in &argmax {
            self.record_branch(a as u64);
        }
        Ok(self.push(value, Op::ColMax { x, argmax }, &[x]))
    }

    /// Scales each row to unit L2 norm; rows with (near) zero norm map to zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = nrm;
            if nrm > NORM_FLOOR {
                for j in 0..c {
                    out[i * c + j] = row[j] / nrm;
                }
            }
        }
        let value = Tensor::new(vec![r, c], out).expect("same extent");
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Mean multi-label soft-margin loss of `1×C` logits against binary labels.
    pub fn soft_margin(&mut self, logits: Var, labels: &[bool]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim(format!(
                "soft_margin: {} logits for {} labels",
                x.len(),
                labels.len()
            )));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(labels)
            .map(|(&v, &y)| if y { softplus(-v) } else { softplus(v) })
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftMargin {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// InfoNCE of a `1×d` query against `k×d` keys, split into positives and
    /// negatives by `positive`. `extra_negatives` are constant keys (no gradient).
    /// Requires at least one positive.
    pub fn info_nce(
        &mut self,
        q: Var,
        keys: Var,
        positive: &[bool],
        extra_negatives: Option<Tensor>,
        tau: f64,
        eps: f64,
    ) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(keys));
        if qv.rows() != 1 || kv.cols() != qv.cols() || kv.rows() != positive.len() {
            return Err(Error::dim("info_nce operand shapes"));
        }
        if let Some(extra) = &extra_negatives {
            if extra.cols() != qv.cols() {
                return Err(Error::dim("info_nce extra negatives width"));
            }
        }
        let value = info_nce_value(qv, kv, positive, extra_negatives.as_ref(), tau, eps)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::InfoNce {
                q,
                keys,
                positive: positive.to_vec(),
                extra_negatives,
                tau,
                eps,
            },
            &[q, keys],
        ))
    }

    /// `offset + Σᵢⱼ wᵢⱼ · (uᵢ · uⱼ)` for an `n×d` matrix `u` and constant `n×n` weights.
    pub fn pair_gram(&mut self, u: Var, weights: Rc<Tensor>, offset: f64) -> Result<Var> {
        let uv = self.value(u);
        let n = uv.rows();
        if weights.shape() != [n, n] {
            return Err(Error::dim("pair_gram weight extent"));
        }
        let gram = crate::numerics::tensor::matmul_t(uv, false, uv, true)?;
        let s: f64 = gram
            .data()
            .iter()
            .zip(weights.data())
            .map(|(g, w)| g * w)
            .sum();
        Ok(self.push(
            Tensor::scalar(offset + s),
            Op::PairGram { u, weights },
            &[u],
        ))
    }

    /// Mean softmax cross-entropy of `p×k` logit rows against per-row class
    /// targets, skipping rows whose target equals `ignore`. Returns the node
    /// and the number of rows that contributed; zero rows yields a 0 loss.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: Rc<[u8]>,
        ignore: u8,
    ) -> Result<(Var, usize)> {
        let x = self.value(logits);
        let (p, k) = (x.rows(), x.cols());
        if targets.len() != p {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {p} rows",
                targets.len()
            )));
        }
        let probs = crate::numerics::tensor::softmax(x);
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let t = t as usize;
            if t >= k {
                return Err(Error::Domain(format!("target class {t} ≥ {k}")));
            }
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let v = self.push(
            Tensor::scalar(value),
            Op::CrossEntropyRows {
                logits,
                targets,
                ignore,
                probs,
                count,
            },
            &[logits],
        );
        Ok((v, count))
    }

    /// Mean anisotropic total variation of a `(height·width)×k` map whose rows
    /// are pixels in row-major order.
    pub fn total_variation(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != height * width {
            return Err(Error::dim(format!(
                "total_variation: {} rows for {height}×{width}",
                xv.rows()
            )));
        }
        let value = tv_value(xv, height, width);
        let signs = tv_signs(xv, height, width);
        for s in signs {
            self.record_branch(s);
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::TotalVariation { x, height, width },
            &[x],
        ))
    }

    // ---- reverse pass ----

    /// Accumulates adjoints of the scalar `root` into every upstream node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got {:?}",
                rv.shape()
            )));
        }
        rv.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                use crate::numerics::tensor::matmul_t;
                if self.needs_grad(*a) {
                    // C = op(A) op(B): dop(A) = G op(B)ᵀ
                    let ga = if *ta {
                        matmul_t(bv, *tb, g, true)?
                    } else {
                        matmul_t(g, false, bv, !*tb)?
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let gb = if *tb {
                        matmul_t(g, true, av, *ta)?
                    } else {
                        matmul_t(av, !*ta, g, false)?
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*row) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, gb)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.map(|x| x * w));
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gy = g.row(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dgamma[j] += gy[j] * xh[j];
                        dbeta[j] += gy[j];
                        let dxh = gy[j] * gam[j];
                        mean_d += dxh;
                        mean_dx += dxh * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dxh = gy[j] * gam[j];
                        dx[i * c + j] = inv_std[i] * (dxh - mean_d - xh[j] * mean_dx);
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; n * n];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    let p = p.data();
                    // dV_h = Pᵀ dO_h
                    strided_gemm(
                        n,
                        n,
                        dh,
                        1.0,
                        View::new(p, 0, 1, n),
                        View::new(g.data(), off, d, 1),
                        0.0,
                        ViewMut::new(&mut dv, off, d, 1),
                    );
                    // dP = dO_h V_hᵀ
                    strided_gemm(
                        n,
                        dh,
                        n,
                        1.0,
                        View::new(g.data(), off, d, 1),
                        View::new(vv.data(), off, 1, d),
                        0.0,
                        ViewMut::new(&mut dp, 0, n, 1),
                    );
                    // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                    for i in 0..n {
                        let pr = &p[i * n..(i + 1) * n];
                        let dr = &mut dp[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv_, &pv) in dr.iter_mut().zip(pr) {
                            *dv_ = pv * (*dv_ - dot);
                        }
                    }
                    // dQ_h = scale · dS K_h ; dK_h = scale · dSᵀ Q_h
                    strided_gemm(
                        n,
                        n,
                        dh,
                        scale,
                        View::new(&dp, 0, n, 1),
                        View::new(kv.data(), off, d, 1),
                        0.0,
                        ViewMut::new(&mut dq, off, d, 1),
                    );
                    strided_gemm(
                        n,
                        n,
                        dh,
                        scale,
                        View::new(&dp, 0, 1, n),
                        View::new(qv.data(), off, d, 1),
                        0.0,
                        ViewMut::new(&mut dk, off, d, 1),
                    );
                }
                self.accumulate(grads, *q, Tensor::new(vec![n, d], dq)?);
                self.accumulate(grads, *k, Tensor::new(vec![n, d], dk)?);
                self.accumulate(grads, *v, Tensor::new(vec![n, d], dv)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let piece = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(grads, p, Tensor::new(shape, piece)?);
                }
            }
            Op::ColMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (j, &i) in argmax.iter().enumerate() {
                    dx.data_mut()[i * c + j] += g.data()[j];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    if norms[i] <= NORM_FLOOR {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::SoftMargin { logits, labels } => {
                let xv = self.value(*logits);
                let c = labels.len() as f64;
                let gs = g.item();
                let d = xv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| gs * (sigmoid(x) - if y { 1.0 } else { 0.0 }) / c)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::InfoNce {
                q,
                keys,
                positive,
                extra_negatives,
                tau,
                eps,
            } => {
                let (dq, dk) = info_nce_grad(
                    self.value(*q),
                    self.value(*keys),
                    positive,
                    extra_negatives.as_ref(),
                    *tau,
                    *eps,
                )?;
                let gs = g.item();
                self.accumulate(grads, *q, dq.map(|x| x * gs));
                self.accumulate(grads, *keys, dk.map(|x| x * gs));
            }
            Op::PairGram { u, weights } => {
                // d/dU Σ wᵢⱼ uᵢ·uⱼ = (W + Wᵀ) U
                let uv = self.value(*u);
                let n = uv.rows();
                let mut sym = vec![0.0; n * n];
                let w = weights.data();
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = g.item() * (w[i * n + j] + w[j * n + i]);
                    }
                }
                let sym = Tensor::new(vec![n, n], sym)?;
                let du = crate::numerics::tensor::matmul(&sym, uv)?;
                self.accumulate(grads, *u, du);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count > 0 {
                    let k = probs.cols();
                    let mut dx = Tensor::zeros(probs.shape());
                    let s = g.item() / *count as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let pr = probs.row(i);
                        let out = &mut dx.data_mut()[i * k..(i + 1) * k];
                        for j in 0..k {
                            out[j] = s * pr[j];
                        }
                        out[t as usize] -= s;
                    }
                    self.accumulate(grads, *logits, dx);
                }
            }
            Op::TotalVariation { x, height, width } => {
                let dx = tv_grad(self.value(*x), *height, *width, g.item());
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn info_nce_value(
    q: &Tensor,
    keys: &Tensor,
    positive: &[bool],
    extra: Option<&Tensor>,
    tau: f64,
    eps: f64,
) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Domain("InfoNCE needs at least one positive".into()));
    }
    let qd = q.data();
    let mut neg_sum = 0.0;
    for (i, &p) in positive.iter().enumerate() {
        if !p {
            neg_sum += (dot(qd, keys.row(i)) / tau).exp();
        }
    }
    if let Some(extra) = extra {
        for i in 0..extra.rows() {
            neg_sum += (dot(qd, extra.row(i)) / tau).exp();
        }
    }
    let mut total = 0.0;
    for (i, &p) in positive.iter().enumerate() {
        if p {
            let s = dot(qd, keys.row(i)) / tau;
            let e = s.exp();
            total -= s - (e + neg_sum + eps).ln();
        }
    }
    Ok(total / n_pos as f64)
}

fn info_nce_grad(
    q: &Tensor,
    keys: &Tensor,
    positive: &[bool],
    extra: Option<&Tensor>,
    tau: f64,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let qd = q.data();
    let d = qd.len();
    let exps: Vec<f64> = (0..keys.rows())
        .map(|i| (dot(qd, keys.row(i)) / tau).exp())
        .collect();
    let extra_exps: Vec<f64> = extra
        .map(|e| (0..e.rows()).map(|i| (dot(qd, e.row(i)) / tau).exp()).collect())
        .unwrap_or_default();
    let neg_sum: f64 = exps
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(e, _)| e)
        .sum::<f64>()
        + extra_exps.iter().sum::<f64>();
    // Σ over positives of 1/Dᵢ, shared by every negative.
    let mut inv_denoms = 0.0;
    // dL/dsᵢ for each key
    let mut ds = vec![0.0; keys.rows()];
    for (i, &p) in positive.iter().enumerate() {
        if p {
            let denom = exps[i] + neg_sum + eps;
            inv_denoms += 1.0 / denom;
            ds[i] = -(1.0 - exps[i] / denom) / n_pos;
        }
    }
    for (i, &p) in positive.iter().enumerate() {
        if !p {
            ds[i] = exps[i] * inv_denoms / n_pos;
        }
    }
    let mut dq = vec![0.0; d];
    let mut dk = vec![0.0; keys.len()];
    for i in 0..keys.rows() {
        let row = keys.row(i);
        for j in 0..d {
            dq[j] += ds[i] * row[j] / tau;
            dk[i * d + j] = ds[i] * qd[j] / tau;
        }
    }
    if let Some(extra) = extra {
        for (i, e) in extra_exps.iter().enumerate() {
            let dsi = e * inv_denoms / n_pos;
            for (o, x) in dq.iter_mut().zip(extra.row(i)) {
                *o += dsi * x / tau;
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(keys.shape().to_vec(), dk)?,
    ))
}

/// Sign of every neighbour difference, encoded 0 (negative), 1 (zero), 2 (positive).
fn tv_signs(x: &Tensor, height: usize, width: usize) -> Vec<u64> {
    let k = x.cols();
    let d = x.data();
    let px = |y: usize, xx: usize, c: usize| d[(y * width + xx) * k + c];
    let code = |v: f64| if v < 0.0 { 0 } else if v == 0.0 { 1 } else { 2 };
    let mut out = Vec::with_capacity(2 * d.len());
    for y in 0..height {
        for xx in 0..width {
            for c in 0..k {
                if xx + 1 < width {
                    out.push(code(px(y, xx + 1, c) - px(y, xx, c)));
                }
                if y + 1 < height {
                    out.push(code(px(y + 1, xx, c) - px(y, xx, c)));
                }
            }
        }
    }
    out
}

fn tv_value(x: &Tensor, height: usize, width: usize) -> f64 {
    let k = x.cols();
    let d = x.data();
    let px = |y: usize, xx: usize, c: usize| d[(y * width + xx) * k + c];
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for y in 0..height {
        for xx in 0..width {
            for c in 0..k {
                if xx + 1 < width {
                    horiz += (px(y, xx + 1, c) - px(y, xx, c)).abs();
                }
                if y + 1 < height {
                    vert += (px(y + 1, xx, c) - px(y, xx, c)).abs();
                }
            }
        }
    }
    let nh = height * width.saturating_sub(1) * k;
    let nv = height.saturating_sub(1) * width * k;
    let mut out = 0.0;
    if nh > 0 {
        out += horiz / nh as f64;
    }
    if nv > 0 {
        out += vert / nv as f64;
    }
    out
}

fn tv_grad(x: &Tensor, height: usize, width: usize, g: f64) -> Tensor {
    let k = x.cols();
    let d = x.data();
    let mut dx = Tensor::zeros(x.shape());
    let nh = height * width.saturating_sub(1) * k;
    let nv = height.saturating_sub(1) * width * k;
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let out = dx.data_mut();
    for y in 0..height {
        for xx in 0..width {
            for c in 0..k {
                let here = (y * width + xx) * k + c;
                if xx + 1 < width {
                    let right = (y * width + xx + 1) * k + c;
                    let s = g * sign(d[right] - d[here]) / nh as f64;
                    out[right] += s;
                    out[here] -= s;
                }
                if y + 1 < height {
                    let below = ((y + 1) * width + xx) * k + c;
                    let s = g * sign(d[below] - d[here]) / nv as f64;
                    out[below] += s;
                    out[here] -= s;
                }
            }
        }
    }
    dx
}

/// Read-only strided matrix view: element `(i, j)` lives at `offset + i*rs + j*cs`.
struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        View {
            data,
            offset,
            rs,
            cs,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    fn new(data: &'a mut [f64], offset: usize, rs: usize, cs: usize) -> Self {
        ViewMut {
            data,
            offset,
            rs,
            cs,
        }
    }
}

/// `c = alpha · a[m×k] · b[k×n] + beta · c` over strided views.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: ViewMut<'_>,
) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
        assert!(last < c.data.len(), "strided output out of bounds");
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above for its logical extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn attention_full_mask_matches_plain_softmax() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[0.1, 0.2], &[0.3, -0.4], &[1.0, 0.5]]));
        let out = g.attention(q, q, q, 1, &[true; 3]).unwrap();
        let p = &g.attention_probs(out).unwrap()[0];
        let qv = g.value(q);
        let s = crate::numerics::tensor::matmul_t(qv, false, qv, true)
            .unwrap()
            .map(|x| x / 2f64.sqrt());
        let expected = crate::numerics::tensor::softmax(&s);
        assert!(p.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn tv_of_step_edge() {
        // One channel, 2×2, left column 0 and right column 1.
        let x = Tensor::new(vec![4, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tv_value(&x, 2, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }
}
