//! Terms of the training objective and their weighted combination.
//!
//! Each loss is recorded on a [`Graph`] so gradients come from the tape;
//! small `*_value` helpers evaluate the same formulas on plain data.

use std::rc::Rc;

use rand::Rng;

use crate::encoder::xavier;
use crate::error::{Error, Result};
use crate::numerics::{softplus, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pseudo::{PairAffinityLabel, PairKind, ReliableLabel, IGNORE};

/// Weights of the auxiliary terms; the two classification losses are unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub affinity: f64,
    pub mcc: f64,
    pub seg: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            affinity: 0.2,
            mcc: 0.5,
            seg: 0.1,
            reg: 0.05,
        }
    }
}

/// One value per objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub cls: T,
    pub cls_aux: T,
    pub aff: T,
    pub mcc: T,
    pub seg: T,
    pub reg: T,
}

impl<T: Copy> LossParts<T> {
    pub fn named(&self) -> [(&'static str, T); 6] {
        [
            ("cls", self.cls),
            ("cls_aux", self.cls_aux),
            ("aff", self.aff),
            ("mcc", self.mcc),
            ("seg", self.seg),
            ("reg", self.reg),
        ]
    }
}

impl LossWeights {
    /// Coefficients in the order of [`LossParts::named`].
    pub fn coefficients(&self) -> [f64; 6] {
        [1.0, 1.0, self.affinity, self.mcc, self.seg, self.reg]
    }
}

/// `cls + cls_aux + λ₁·aff + λ₂·mcc + λ₃·seg + λ₄·reg`.
pub fn total_loss(parts: &LossParts<f64>, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), w) in parts.named().into_iter().zip(weights.coefficients()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
        total += w * v;
    }
    Ok(total)
}

/// Graph version of [`total_loss`]; missing terms contribute nothing.
pub fn total_loss_graph(
    g: &mut Graph,
    parts: &LossParts<Option<Var>>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    for ((name, v), w) in parts.named().into_iter().zip(weights.coefficients()) {
        if let Some(v) = v {
            if !g.value(v).all_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
            terms.push((v, w));
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.weighted_sum(&terms)
}

/// Multi-label soft-margin loss on `1×C` logits.
pub fn cls_loss(g: &mut Graph, logits: Var, labels: &[bool]) -> Result<Var> {
    g.soft_margin(logits, labels)
}

pub fn cls_loss_value(logits: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| if y { softplus(-x) } else { softplus(x) })
        .sum();
    total / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorRole {
    Global,
    Local,
}

/// Linear head mapping class tokens into the contrast space.
#[derive(Clone, Debug)]
pub struct Projector {
    pub role: ProjectorRole,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projector {
    /// Registers a trainable local projector and a frozen global copy of it.
    pub fn new_pair<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> (Projector, Projector) {
        let w = xavier(dim, proj_dim, rng);
        let b = Tensor::zeros(&[1, proj_dim]);
        let local = Projector {
            role: ProjectorRole::Local,
            weight: store.add("projector.local.weight", w.clone()),
            bias: store.add("projector.local.bias", b.clone()),
        };
        let global = Projector {
            role: ProjectorRole::Global,
            weight: store.add_frozen("projector.global.weight", w),
            bias: store.add_frozen("projector.global.bias", b),
        };
        (local, global)
    }

    /// Projects rows of `x` and normalises them to unit length.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        Ok(g.l2_normalize_rows(y))
    }
}

/// `θ_g ← m·θ_g + (1 − m)·θ_l`, element-wise.
pub fn ema_update_tensor(global: &mut Tensor, local: &Tensor, m: f64) -> Result<()> {
    if global.shape() != local.shape() {
        return Err(Error::dim(format!(
            "EMA shapes differ: {:?} vs {:?}",
            global.shape(),
            local.shape()
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!("momentum {m} outside [0, 1]")));
    }
    for (g, l) in global.data_mut().iter_mut().zip(local.data()) {
        *g = m * *g + (1.0 - m) * l;
    }
    Ok(())
}

/// Moves the global projector towards the local one; the local projector is untouched.
pub fn ema_update(store: &mut ParamStore, global: &Projector, local: &Projector, m: f64) -> Result<()> {
    for (gid, lid) in [(global.weight, local.weight), (global.bias, local.bias)] {
        let l = store.get(lid).clone();
        ema_update_tensor(store.get_mut(gid), &l, m)?;
    }
    Ok(())
}

/// Plain-data InfoNCE instance. Embeddings are normalised before use.
#[derive(Clone, Debug)]
pub struct ContrastBatch {
    pub q: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub tau: f64,
    pub eps: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// InfoNCE value; `None` when there is no positive.
pub fn mcc_loss_value(batch: &ContrastBatch) -> Option<f64> {
    if batch.positives.is_empty() {
        return None;
    }
    let q = unit(&batch.q);
    let sim = |k: &Vec<f64>| unit(k).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / batch.tau;
    let neg: f64 = batch.negatives.iter().map(|k| sim(k).exp()).sum();
    let total: f64 = batch
        .positives
        .iter()
        .map(|k| {
            let s = sim(k);
            -(s - (s.exp() + neg + batch.eps).ln())
        })
        .sum();
    Some(total / batch.positives.len() as f64)
}

/// InfoNCE between a unit-norm `1×d` query and unit-norm `K×d` keys, split by
/// `positive`. Returns `None` when no key is positive (the view set
/// contributes nothing). `extra_negatives` are constant keys.
pub fn mcc_loss(
    g: &mut Graph,
    q: Var,
    keys: Var,
    positive: &[bool],
    extra_negatives: Option<Tensor>,
    tau: f64,
    eps: f64,
) -> Result<Option<Var>> {
    if !positive.iter().any(|&p| p) {
        return Ok(None);
    }
    g.info_nce(q, keys, positive, extra_negatives, tau, eps).map(Some)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AffinityDiagnostics {
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Pairs dropped because one token had zero norm.
    pub skipped_zero_norm: usize,
}

/// Cosine affinity loss on `N×D` tokens:
/// `mean_pos(1 − cos) + mean_neg(cos)`, each term omitted when its pair set is empty.
pub fn affinity_loss(
    g: &mut Graph,
    tokens: Var,
    pairs: &PairAffinityLabel,
) -> Result<(Option<Var>, AffinityDiagnostics)> {
    let t = g.value(tokens);
    let n = t.rows();
    if pairs.n != n {
        return Err(Error::dim(format!("{} pair labels for {n} tokens", pairs.n)));
    }
    let zero: Vec<bool> = (0..n)
        .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-12)
        .collect();
    let mut diag = AffinityDiagnostics::default();
    for i in 0..n {
        for j in 0..n {
            let kind = pairs.get(i, j);
            if kind == PairKind::Ignore {
                continue;
            }
            if zero[i] || zero[j] {
                diag.skipped_zero_norm += 1;
                continue;
            }
            match kind {
                PairKind::Positive => diag.positive_pairs += 1,
                PairKind::Negative => diag.negative_pairs += 1,
                PairKind::Ignore => {}
            }
        }
    }
    if diag.positive_pairs == 0 && diag.negative_pairs == 0 {
        return Ok((None, diag));
    }
    let wp = if diag.positive_pairs > 0 {
        -1.0 / diag.positive_pairs as f64
    } else {
        0.0
    };
    let wn = if diag.negative_pairs > 0 {
        1.0 / diag.negative_pairs as f64
    } else {
        0.0
    };
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if zero[i] || zero[j] {
                continue;
            }
            w[i * n + j] = match pairs.get(i, j) {
                PairKind::Positive => wp,
                PairKind::Negative => wn,
                PairKind::Ignore => 0.0,
            };
        }
    }
    let offset = if diag.positive_pairs > 0 { 1.0 } else { 0.0 };
    let u = g.l2_normalize_rows(tokens);
    let loss = g.pair_gram(u, Rc::new(Tensor::new(vec![n, n], w)?), offset)?;
    Ok((Some(loss), diag))
}

/// Pixel-wise softmax cross-entropy of `(H·W)×(C+1)` logits against a label
/// map, skipping uncertain pixels. The flag is set when every pixel was skipped.
pub fn seg_loss(g: &mut Graph, logits: Var, target: &ReliableLabel) -> Result<(Var, bool)> {
    let k = g.value(logits).cols();
    if target.labels.iter().any(|&l| l != IGNORE && l as usize >= k) {
        return Err(Error::Domain(format!("segmentation target outside 0..{k}")));
    }
    let targets: Rc<[u8]> = target.labels.clone().into();
    let (v, count) = g.cross_entropy_rows(logits, targets, IGNORE)?;
    Ok((v, count == 0))
}

/// Mean anisotropic total variation of per-pixel class probabilities laid
/// out as `(height·width)×(C+1)`.
pub fn reg_loss(g: &mut Graph, probs: Var, height: usize, width: usize) -> Result<Var> {
    g.total_variation(probs, height, width)
}
