//! The full network and the batch objective.

use rand::Rng;

use crate::encoder::{patchify, Encoder, EncoderVars, Image};
use crate::error::{Error, Result};
use crate::harness::config::{CamSource, TrainConfig};
use crate::losses::{
    affinity_loss, cls_loss, mcc_loss, reg_loss, seg_loss, total_loss_graph, LossParts, Projector,
};
use crate::masking::{sample_key_mask, KeyMask};
use crate::numerics::{upsample_matrix, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pseudo::{
    affinity_pairs, compute_cam, partition, positiveness, token_label, Cam, IdentityRefiner,
    PairAffinityLabel, Refiner, ReliableLabel,
};

/// Per-token two-layer head followed by bilinear upsampling to pixels.
#[derive(Clone, Debug)]
pub struct Decoder {
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    upsample: Tensor,
    height: usize,
    width: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let e = &cfg.encoder;
        let k = e.num_classes + 1;
        let h = cfg.decoder_hidden;
        Decoder {
            fc1: (
                store.add("decoder.fc1.weight", crate::encoder::xavier(e.dim, h, rng)),
                store.add("decoder.fc1.bias", Tensor::zeros(&[1, h])),
            ),
            fc2: (
                store.add("decoder.fc2.weight", crate::encoder::xavier(h, k, rng)),
                store.add("decoder.fc2.bias", Tensor::zeros(&[1, k])),
            ),
            upsample: upsample_matrix(e.grid(), e.grid(), e.image_size, e.image_size),
            height: e.image_size,
            width: e.image_size,
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Token grid to pixel interpolation matrix.
    pub fn interpolation(&self) -> &Tensor {
        &self.upsample
    }

    /// `N×D` tokens to `(H·W)×(C+1)` logits, pixels row-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let w1 = g.param(store, self.fc1.0);
        let b1 = g.param(store, self.fc1.1);
        let w2 = g.param(store, self.fc2.0);
        let b2 = g.param(store, self.fc2.1);
        let h = g.matmul(tokens, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, b2)?;
        let up = g.constant(self.upsample.clone());
        g.matmul(up, h)
    }
}

/// Discrete supervision derived for one image. Computed from detached
/// activations, so it can be frozen and reused.
#[derive(Clone, Debug)]
pub struct ImageTargets {
    pub masks: Vec<KeyMask>,
    pub positive: Vec<bool>,
    pub pairs: PairAffinityLabel,
    /// Full-resolution label supervising the decoder.
    pub seg_label: ReliableLabel,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    /// Batch means of each term.
    pub parts: LossParts<f64>,
    pub n_pos_views: usize,
    pub n_neg_views: usize,
    pub targets: Vec<ImageTargets>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub final_cam: Cam,
    pub aux_cam: Cam,
    pub cls_logits: Tensor,
    /// `(H·W)×(C+1)`.
    pub seg_logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub local: Projector,
    pub global: Projector,
}

struct Pass {
    vars: EncoderVars,
    targets: ImageTargets,
    q: Var,
    keys: Option<Var>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), store, rng)?;
        let decoder = Decoder::new(cfg, store, rng);
        let (local, global) = Projector::new_pair(store, cfg.encoder.dim, cfg.proj_dim, rng);
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            decoder,
            local,
            global,
        })
    }

    fn cams(&self, store: &ParamStore, g: &Graph, vars: &EncoderVars, labels: &[bool]) -> Result<(Cam, Cam)> {
        let e = &self.cfg.encoder;
        let grid = e.grid();
        let last = g.value(*vars.patches.last().expect("depth ≥ 2"));
        let aux = g.value(vars.patches[e.aux_layer - 1]);
        let mut final_cam = compute_cam(last, store.get(self.encoder.head_weight()), labels, grid, grid)?;
        final_cam.source_layer = e.depth;
        let mut aux_cam = compute_cam(aux, store.get(self.encoder.aux_head_weight()), labels, grid, grid)?;
        aux_cam.source_layer = e.aux_layer;
        Ok((final_cam, aux_cam))
    }

    /// Reliable label at image resolution: the CAM is resized bilinearly,
    /// then partitioned per pixel.
    pub fn pixel_label(&self, cam: &Cam) -> Result<ReliableLabel> {
        let (h, w) = self.decoder.output_size();
        let up = cam.resample(self.decoder.interpolation(), h, w)?;
        partition(&up, self.cfg.beta_bg, self.cfg.beta_fg)
    }

    fn derive_targets<R: Rng + ?Sized>(
        &self,
        image: &Image,
        final_cam: &Cam,
        aux_cam: &Cam,
        refiner: &dyn Refiner,
        rng: &mut R,
    ) -> Result<ImageTargets> {
        let c = &self.cfg;
        let grid = c.encoder.grid();
        let aux_label = partition(aux_cam, c.beta_bg, c.beta_fg)?;
        let pairs = affinity_pairs(&aux_label);
        let tokens = token_label(aux_cam, c.beta_fg);
        let mut masks = Vec::with_capacity(c.num_views);
        let mut positive = Vec::with_capacity(c.num_views);
        for _ in 0..c.num_views {
            let m = sample_key_mask(grid, grid, c.mask_ratio, c.mask_scale, rng)?;
            positive.push(positiveness(&tokens, &m, c.mu)?);
            masks.push(m);
        }
        let seg_src = match c.seg_cam {
            CamSource::Final => final_cam,
            CamSource::Aux => aux_cam,
        };
        let seg_label = refiner.refine(self.pixel_label(seg_src)?, image);
        Ok(ImageTargets {
            masks,
            positive,
            pairs,
            seg_label,
        })
    }

    /// Records the weighted objective for a batch of `(image, labels)` pairs.
    /// With `fixed`, masks and pseudo labels are taken from it instead of
    /// being drawn and derived.
    pub fn objective<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[(&Image, &[bool])],
        fixed: Option<&[ImageTargets]>,
        rng: &mut R,
    ) -> Result<Objective> {
        let c = &self.cfg;
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if let Some(f) = fixed {
            if f.len() != batch.len() {
                return Err(Error::dim(format!("{} targets for {} images", f.len(), batch.len())));
            }
        }
        let use_mcc = c.weights.mcc > 0.0;
        let mut passes = Vec::with_capacity(batch.len());
        for (i, (image, labels)) in batch.iter().enumerate() {
            let patches = g.constant(patchify(image, c.encoder.patch_size)?);
            let vars = self.encoder.forward_graph(g, store, patches, None)?;
            let targets = match fixed {
                Some(f) => f[i].clone(),
                None => {
                    let (final_cam, aux_cam) = self.cams(store, g, &vars, labels)?;
                    self.derive_targets(image, &final_cam, &aux_cam, &IdentityRefiner, rng)?
                }
            };
            let mut cls = *vars.cls.last().expect("depth ≥ 2");
            if c.detach_query {
                cls = g.constant(g.value(cls).clone());
            }
            let q = self.global.apply(g, store, cls)?;
            let keys = if use_mcc {
                let mut rows = Vec::with_capacity(targets.masks.len());
                for m in &targets.masks {
                    let local = self.encoder.forward_graph(g, store, patches, Some(m))?;
                    let cls = *local.cls.last().expect("depth ≥ 2");
                    rows.push(self.local.apply(g, store, cls)?);
                }
                Some(g.concat_rows(&rows)?)
            } else {
                None
            };
            passes.push(Pass { vars, targets, q, keys });
        }

        let pooled: Vec<Vec<Vec<f64>>> = if c.pool_negatives && use_mcc {
            passes
                .iter()
                .map(|p| {
                    let kv = g.value(p.keys.expect("mcc on"));
                    p.targets
                        .positive
                        .iter()
                        .enumerate()
                        .filter(|(_, &pos)| !pos)
                        .map(|(k, _)| kv.row(k).to_vec())
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };

        let b = batch.len() as f64;
        let mut sums = LossParts::<f64>::default();
        let mut totals = Vec::with_capacity(batch.len());
        let (mut n_pos, mut n_neg) = (0, 0);
        for (i, (p, (_, labels))) in passes.iter().zip(batch).enumerate() {
            let cls = cls_loss(g, p.vars.cls_logits, labels)?;
            let cls_aux = cls_loss(g, p.vars.aux_logits, labels)?;
            let last = *p.vars.patches.last().expect("depth ≥ 2");
            n_pos += p.targets.positive.iter().filter(|&&x| x).count();
            n_neg += p.targets.positive.iter().filter(|&&x| !x).count();
            let mcc = match p.keys {
                Some(keys) => {
                    let extra: Vec<f64> = pooled
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .flat_map(|(_, rows)| rows.iter().flatten().copied())
                        .collect();
                    let extra = if extra.is_empty() {
                        None
                    } else {
                        Some(Tensor::new(vec![extra.len() / c.proj_dim, c.proj_dim], extra)?)
                    };
                    mcc_loss(g, p.q, keys, &p.targets.positive, extra, c.tau, c.eps)?
                }
                None => None,
            };
            let (aff, _) = affinity_loss(g, last, &p.targets.pairs)?;
            let logits = self.decoder.forward(g, store, last)?;
            let (seg, _) = seg_loss(g, logits, &p.targets.seg_label)?;
            let probs = g.softmax_rows(logits);
            let (h, w) = self.decoder.output_size();
            let reg = reg_loss(g, probs, h, w)?;
            let parts = LossParts {
                cls: Some(cls),
                cls_aux: Some(cls_aux),
                aff,
                mcc,
                seg: Some(seg),
                reg: Some(reg),
            };
            let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            sums.cls += value(parts.cls);
            sums.cls_aux += value(parts.cls_aux);
            sums.aff += value(parts.aff);
            sums.mcc += value(parts.mcc);
            sums.seg += value(parts.seg);
            sums.reg += value(parts.reg);
            totals.push((total_loss_graph(g, &parts, &c.weights)?, 1.0 / b));
        }
        let loss = g.weighted_sum(&totals)?;
        let parts = LossParts {
            cls: sums.cls / b,
            cls_aux: sums.cls_aux / b,
            aff: sums.aff / b,
            mcc: sums.mcc / b,
            seg: sums.seg / b,
            reg: sums.reg / b,
        };
        Ok(Objective {
            loss,
            parts,
            n_pos_views: n_pos,
            n_neg_views: n_neg,
            targets: passes.into_iter().map(|p| p.targets).collect(),
        })
    }

    /// Unmasked inference: both CAMs (restricted to `labels`), the
    /// classifier logits and decoder logits.
    pub fn predict(&self, store: &ParamStore, image: &Image, labels: &[bool]) -> Result<Prediction> {
        let mut g = Graph::new();
        let patches = g.constant(patchify(image, self.cfg.encoder.patch_size)?);
        let vars = self.encoder.forward_graph(&mut g, store, patches, None)?;
        let (final_cam, aux_cam) = self.cams(store, &g, &vars, labels)?;
        let last = *vars.patches.last().expect("depth ≥ 2");
        let logits = self.decoder.forward(&mut g, store, last)?;
        Ok(Prediction {
            final_cam,
            aux_cam,
            cls_logits: g.value(vars.cls_logits).clone(),
            seg_logits: g.value(logits).clone(),
        })
    }
}
