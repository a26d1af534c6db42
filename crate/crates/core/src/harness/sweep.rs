//! Grid over masking ratio and scale, one short training run per cell.

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::eval::evaluate;
use crate::harness::train::{datasets, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub scale: usize,
    pub pseudo_miou: f64,
    pub seg_miou: f64,
}

pub const CSV_HEADER: &str = "ratio,scale,pseudo_miou,seg_miou";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6}", self.ratio, self.scale, self.pseudo_miou, self.seg_miou)
    }
}

/// Trains `base` once per `(ratio, scale)` cell and scores the validation
/// split. Rows come back sorted by ratio, then scale.
pub fn mask_sweep(
    base: &TrainConfig,
    ratios: &[f64],
    scales: &[usize],
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() || scales.is_empty() {
        return Err(Error::config("sweep needs at least one ratio and one scale"));
    }
    let mut cells: Vec<(f64, usize)> = ratios
        .iter()
        .flat_map(|&r| scales.iter().map(move |&s| (r, s)))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cells.dedup();
    let (train, val) = datasets(base)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (ratio, scale) in cells {
        let mut cfg = base.clone();
        cfg.mask_ratio = ratio;
        cfg.mask_scale = scale;
        cfg.validate()?;
        let mut t = Trainer::new(&cfg, train.clone())?;
        t.run(None)?;
        let r = evaluate(&t.model, &t.store, &val)?;
        let row = SweepRow {
            ratio,
            scale,
            pseudo_miou: r.pseudo.mean,
            seg_miou: r.seg.mean,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
