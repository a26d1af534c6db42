//! Intersection-over-union scoring of pseudo labels and decoder output.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::data::SyntheticSample;
use crate::harness::model::Model;
use crate::numerics::ParamStore;
use crate::pseudo::IGNORE;

/// Pixel counts of `(ground truth, prediction)` over `k` classes. Predictions
/// of the uncertain value are kept apart and scored as misses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    /// `counts[gt * k + pred]`.
    pub counts: Vec<u64>,
    /// Uncertain predictions per ground-truth class.
    pub uncertain: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
            uncertain: vec![0; k],
        }
    }

    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::dim(format!("{} ground-truth pixels, {} predicted", gt.len(), pred.len())));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            let g = g as usize;
            if g >= self.k {
                return Err(Error::Domain(format!("ground-truth class {g} outside 0..{}", self.k)));
            }
            if p == IGNORE {
                self.uncertain[g] += 1;
            } else if (p as usize) < self.k {
                self.counts[g * self.k + p as usize] += 1;
            } else {
                return Err(Error::Domain(format!("predicted class {p} outside 0..{}", self.k)));
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let k = self.k;
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt_total: u64 = self.counts[c * k..(c + 1) * k].iter().sum::<u64>() + self.uncertain[c];
            let pred_total: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let union = gt_total + pred_total - tp;
            per_class.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        }
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        MiouReport {
            per_class,
            mean,
            confusion: (0..k).map(|g| self.counts[g * k..(g + 1) * k].to_vec()).collect(),
            uncertain: self.uncertain.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub confusion: Vec<Vec<u64>>,
    pub uncertain: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub pseudo: MiouReport,
    pub seg: MiouReport,
}

/// Scores final-layer pseudo labels (given the true image labels) and the
/// decoder's argmax against ground-truth masks.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[SyntheticSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let c = &model.cfg;
    let k = c.encoder.num_classes + 1;
    let mut pseudo = Confusion::new(k);
    let mut seg = Confusion::new(k);
    for s in data {
        let pred = model.predict(store, &s.image, &s.image_labels)?;
        let label = model.pixel_label(&pred.final_cam)?;
        pseudo.add(&s.gt_mask, &label.labels)?;
        let argmax: Vec<u8> = (0..pred.seg_logits.rows())
            .map(|r| {
                let row = pred.seg_logits.row(r);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect();
        seg.add(&s.gt_mask, &argmax)?;
    }
    Ok(EvalReport {
        pseudo: pseudo.report(),
        seg: seg.report(),
    })
}
