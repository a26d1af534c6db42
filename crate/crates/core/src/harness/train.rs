//! The training loop and its on-disk state.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{lr_at, TrainConfig};
use crate::harness::data::{generate_range, SyntheticSample};
use crate::harness::model::Model;
use crate::harness::optim::AdamW;
use crate::losses::{ema_update, total_loss};
use crate::numerics::{Graph, ParamStore, Tensor};

const SHUFFLE_STREAM: u64 = 1 << 48;

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub cls: f64,
    pub cls_aux: f64,
    pub aff: f64,
    pub mcc: f64,
    pub seg: f64,
    pub reg: f64,
    pub total: f64,
    pub lr: f64,
    pub n_pos_views: usize,
    pub n_neg_views: usize,
}

/// Training and validation splits: disjoint index ranges of one stream.
pub fn datasets(cfg: &TrainConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let (size, c) = (cfg.encoder.image_size, cfg.encoder.num_classes);
    let train = generate_range(cfg.n_train, 0, size, c, cfg.data_seed)?;
    let val = generate_range(cfg.n_val, cfg.n_train as u64, size, c, cfg.data_seed)?;
    Ok((train, val))
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    /// Completed optimizer steps.
    pub step: usize,
    pub train: Vec<SyntheticSample>,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: &TrainConfig, train: Vec<SyntheticSample>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, &mut rng)?;
        let opt = AdamW::new(&store, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Ok(Trainer {
            model,
            store,
            opt,
            step: 0,
            train,
            perm: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.cfg
    }

    /// Dataset indices used by optimizer step `step`: consecutive slices of
    /// a fresh permutation per epoch.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.train.len();
        let b = self.model.cfg.batch_size;
        let seed = self.model.cfg.seed;
        (0..b)
            .map(|i| {
                let pos = step * b + i;
                let epoch = pos / n;
                if self.perm.as_ref().map(|p| p.0) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng);
                    self.perm = Some((epoch, order));
                }
                self.perm.as_ref().expect("set above").1[pos % n]
            })
            .collect()
    }

    /// One optimizer step followed by one EMA update of the global projector.
    pub fn train_step(&mut self) -> Result<LogRecord> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let cfg = self.model.cfg.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + step as u64);
        let batch: Vec<_> = idx
            .iter()
            .map(|&i| (&self.train[i].image, self.train[i].image_labels.as_slice()))
            .collect();
        let mut g = Graph::new();
        let obj = self.model.objective(&mut g, &self.store, &batch, None, &mut rng)?;
        let total = total_loss(&obj.parts, &cfg.weights)?;
        let grads = g.backward(obj.loss)?;
        let grads = g.param_grads(&grads, &self.store);
        for (e, gr) in self.store.entries().iter().zip(&grads) {
            if let Some(gr) = gr {
                gr.check_finite(&format!("gradient of {}", e.name))?;
            }
        }
        let lr = lr_at(step, &cfg);
        self.opt.step(&mut self.store, &grads, lr)?;
        let (global, local) = (self.model.global.clone(), self.model.local.clone());
        ema_update(&mut self.store, &global, &local, cfg.momentum)?;
        self.step += 1;
        let p = obj.parts;
        Ok(LogRecord {
            step,
            cls: p.cls,
            cls_aux: p.cls_aux,
            aff: p.aff,
            mcc: p.mcc,
            seg: p.seg,
            reg: p.reg,
            total,
            lr,
            n_pos_views: obj.n_pos_views,
            n_neg_views: obj.n_neg_views,
        })
    }

    /// Runs the remaining steps, writing one JSON line per step to `log`.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<LogRecord>> {
        let mut out = Vec::with_capacity(self.model.cfg.iters.saturating_sub(self.step));
        while self.step < self.model.cfg.iters {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            out.push(rec);
        }
        Ok(out)
    }

    /// Parameters, optimizer moments and the step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        for e in self.store.entries() {
            arrays.push((e.name.clone(), e.value.clone()));
        }
        for (i, e) in self.store.entries().iter().enumerate() {
            arrays.push((format!("optim.m.{}", e.name), self.opt.m[i].clone()));
            arrays.push((format!("optim.v.{}", e.name), self.opt.v[i].clone()));
        }
        arrays.push(("optim.t".into(), Tensor::scalar(self.opt.t as f64)));
        arrays.push(("trainer.step".into(), Tensor::scalar(self.step as f64)));
        Checkpoint {
            config: self.model.cfg.to_text(),
            arrays,
        }
    }

    /// Rebuilds a trainer; the training split is regenerated from the config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse(&ck.config)?;
        let (train, _) = datasets(&cfg)?;
        let mut t = Trainer::new(&cfg, train)?;
        let mut params = Vec::new();
        let (mut t_opt, mut step) = (None, None);
        for (name, value) in &ck.arrays {
            if let Some(rest) = name.strip_prefix("optim.m.") {
                let id = t.store.find(rest).ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
                check_shape(name, &t.opt.m[id.0], value)?;
                t.opt.m[id.0] = value.clone();
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                let id = t.store.find(rest).ok_or_else(|| Error::Format(format!("unknown array {name}")))?;
                check_shape(name, &t.opt.v[id.0], value)?;
                t.opt.v[id.0] = value.clone();
            } else if name == "optim.t" {
                t_opt = Some(value.item() as u64);
            } else if name == "trainer.step" {
                step = Some(value.item() as usize);
            } else {
                params.push((name.clone(), value.clone()));
            }
        }
        t.store.load_named(params)?;
        t.opt.t = t_opt.ok_or_else(|| Error::Format("missing optim.t".into()))?;
        t.step = step.ok_or_else(|| Error::Format("missing trainer.step".into()))?;
        Ok(t)
    }
}

fn check_shape(name: &str, have: &Tensor, got: &Tensor) -> Result<()> {
    if have.shape() != got.shape() {
        return Err(Error::Format(format!(
            "array {name}: shape {:?} does not match model {:?}",
            got.shape(),
            have.shape()
        )));
    }
    Ok(())
}
