//! Stage 1: supervised pretraining of the backbone against cosine-similarity
//! class prototypes.

pub mod augment;
pub mod prototype;

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Archive;
use crate::nn::{add_assign, join, zeros_like, Adam, Params};
use crate::parallel::Exec;
use crate::synthdata::{ClassScheme, FundusSample};
pub use augment::{augment, normalize, AugmentConfig};
pub use prototype::{cosine_logits, metric_ce_loss, PrototypeBank};

/// Samples whose gradients are accumulated sequentially before the
/// per-chunk results are summed in order. Fixed, so the summation order
/// (and hence every bit of the result) does not depend on thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the cosine logits inside the cross-entropy. 1 leaves
    /// the logits raw.
    pub logit_scale: f64,
    pub classes: ClassScheme,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 50,
            batch_size: 96,
            learning_rate: 1e-4,
            logit_scale: 1.0,
            classes: ClassScheme::Four,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl Stage1Config {
    /// Settings for small synthetic cohorts on a CPU: fewer epochs, smaller
    /// batches and a larger step than the full-scale defaults.
    pub fn desk() -> Self {
        Stage1Config { epochs: 30, batch_size: 32, learning_rate: 2e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("stage1: epochs and batch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.logit_scale > 0.0) {
            return Err(Error::Validation("stage1: learning_rate and logit_scale must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return Err(Error::Validation("stage1: hflip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Backbone plus prototype bank; the trainable unit of Stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub backbone: Backbone,
    pub bank: PrototypeBank,
    pub classes: ClassScheme,
}

impl Params for Stage1Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.bank.visit(&join(prefix, "prototypes"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.bank.visit_mut(&join(prefix, "prototypes"), f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy over the (augmented) training batches of the epoch.
    pub accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub model: Stage1Model,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were returned.
    pub selected_epoch: usize,
}

impl Stage1Model {
    pub fn new(backbone_cfg: BackboneConfig, classes: ClassScheme, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(backbone_cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let bank = PrototypeBank::new(classes.n_classes(), backbone.embed_dim(), &mut rng);
        Ok(Stage1Model { backbone, bank, classes })
    }

    /// Pooled f4 of an already normalized image.
    pub fn embed_normalized(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.backbone.features(image)?.f4().pooled())
    }

    /// Pooled f4 of a raw `[0, 1]` image (normalization applied here).
    pub fn embed(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        self.embed_normalized(&normalize(image))
    }

    /// Argmax class of the cosine logits, ties to the lowest index.
    pub fn predict(&self, image: &Array3<f64>) -> Result<usize> {
        let logits = cosine_logits(self.embed(image)?.view(), &self.bank)?;
        Ok(argmax(&logits))
    }

    /// Loss and gradient for one normalized image, accumulated into `grad`.
    pub fn sample_step(
        &self,
        image: &Array3<f64>,
        label: usize,
        scale: f64,
        grad: &mut Stage1Model,
    ) -> Result<(f64, bool)> {
        let (feats, cache) = self.backbone.forward(image)?;
        let f4 = feats.f4();
        let pooled = f4.pooled();
        let logits = cosine_logits(pooled.view(), &self.bank)?;
        let loss = metric_ce_loss(&logits, label, scale)?;
        let dlogits = prototype::metric_ce_grad(&logits, label, scale);
        let df = prototype::cosine_logits_backward(pooled.view(), &self.bank, &logits, &dlogits, &mut grad.bank);
        let tokens = f4.data.nrows();
        let dmap = Array2::from_shape_fn(f4.data.dim(), |(_, k)| df[k] / tokens as f64);
        self.backbone.backward(&cache, &[None, None, None, Some(dmap)], &mut grad.backbone);
        Ok((loss, argmax(&logits) == label))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<String> {
        let config = serde_json::json!({
            "backbone": self.backbone.config,
            "classes": self.classes,
        });
        let mut arc = Archive::new(STAGE1_KIND, config);
        arc.meta = meta;
        arc.add_params("", self);
        arc.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arc = Archive::read(path)?;
        Self::from_archive(&arc)
    }

    pub fn from_archive(arc: &Archive) -> Result<Self> {
        if arc.kind != STAGE1_KIND {
            return Err(Error::Validation(format!("expected a '{STAGE1_KIND}' checkpoint, found '{}'", arc.kind)));
        }
        let bad = |e: serde_json::Error| Error::Validation(format!("stage1 checkpoint config: {e}"));
        let cfg: BackboneConfig = serde_json::from_value(arc.config["backbone"].clone()).map_err(bad)?;
        let classes: ClassScheme = serde_json::from_value(arc.config["classes"].clone()).map_err(bad)?;
        let mut model = Stage1Model::new(cfg, classes, 0)?;
        arc.load_into("", &mut model)?;
        Ok(model)
    }
}

pub const STAGE1_KIND: &str = "stage1";

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Class-balanced ordering: per-class shuffles interleaved round-robin.
fn balanced_order(labels: &[usize], n_classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in pools.iter_mut() {
        p.shuffle(rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = pools.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for p in &pools {
            if let Some(&i) = p.get(k) {
                order.push(i);
            }
        }
    }
    order
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA5A5_0000).wrapping_add(epoch as u64));
    rng.set_stream(index as u64);
    rng
}

/// Fraction of samples whose predicted class matches the scheme's label.
pub fn accuracy(model: &Stage1Model, samples: &[&FundusSample], exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let hits = exec.map(samples, |s| -> Result<bool> {
        Ok(model.predict(&s.image)? == model.classes.label(s.severity)?)
    });
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / samples.len() as f64)
}

/// Trains backbone and prototypes on `train`. With a validation set the
/// parameters from the best validation-accuracy epoch are returned (first
/// such epoch on ties); otherwise those of the final epoch.
pub fn train_stage1(
    train: &[&FundusSample],
    val: Option<&[&FundusSample]>,
    backbone_cfg: &BackboneConfig,
    cfg: &Stage1Config,
    exec: Exec,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<Stage1Result> {
    cfg.validate()?;
    let n_classes = cfg.classes.n_classes();
    let labels: Vec<usize> = train.iter().map(|s| cfg.classes.label(s.severity)).collect::<Result<_>>()?;
    let mut present = vec![false; n_classes];
    for &l in &labels {
        present[l] = true;
    }
    if train.is_empty() || (cfg.classes != ClassScheme::Twelve && present.iter().any(|p| !p)) {
        return Err(Error::Validation(format!(
            "stage1 needs at least one training sample of every class ({n_classes} classes)"
        )));
    }

    let mut model = Stage1Model::new(backbone_cfg.clone(), cfg.classes, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Stage1Model)> = None;

    for epoch in 1..=cfg.epochs {
        let order = balanced_order(&labels, n_classes, &mut order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let parts = exec.map(&chunks, |chunk| -> Result<(Stage1Model, f64, usize)> {
                let mut grad = zeros_like(&model);
                let (mut l, mut h) = (0.0, 0usize);
                for &i in chunk.iter() {
                    let mut rng = sample_rng(cfg.seed, epoch, i);
                    let img = augment(&train[i].image, &cfg.augment, &mut rng);
                    let (li, hit) = model.sample_step(&img, labels[i], cfg.logit_scale, &mut grad)?;
                    l += li;
                    h += usize::from(hit);
                }
                Ok((grad, l, h))
            });
            let mut total: Option<Stage1Model> = None;
            let mut batch_loss = 0.0;
            for part in parts {
                let (g, l, h) = part?;
                batch_loss += l;
                hits += h;
                match total.as_mut() {
                    Some(t) => add_assign(t, &g),
                    None => total = Some(g),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("stage1 loss is {batch_loss} at epoch {epoch}, batch {b}")));
            }
            loss_sum += batch_loss;
            let mut grad = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grad.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v *= inv));
            adam.step(&mut model, &grad);
            model.bank.enforce_min_norm();
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&model, v, exec)?),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: hits as f64 / train.len() as f64,
            val_accuracy,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(sink, "{line}").map_err(|e| Error::io("<stage1 log>", e))?;
        }
        if let Some(va) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| va > *b) {
                best = Some((va, epoch, model.clone()));
            }
        }
        log.push(entry);
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs),
    };
    Ok(Stage1Result { model, log, selected_epoch })
}

/// One row per sample: id, class label under the model's scheme, pooled f4.
pub fn embed_samples(model: &Stage1Model, samples: &[&FundusSample], exec: Exec) -> Result<Vec<Array1<f64>>> {
    exec.map(samples, |s| model.embed(&s.image)).into_iter().collect()
}

/// Writes `sample_id, class, e000..` as CSV.
pub fn export_embeddings(model: &Stage1Model, samples: &[&FundusSample], path: &Path, exec: Exec) -> Result<()> {
    let rows = embed_samples(model, samples, exec)?;
    let d = model.backbone.embed_dim();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut header = vec!["sample_id".to_string(), "class".to_string()];
    header.extend((0..d).map(|k| format!("e{k:03}")));
    w.write_record(&header).map_err(io)?;
    for (s, v) in samples.iter().zip(&rows) {
        let mut rec = vec![s.sample_id(), model.classes.label(s.severity)?.to_string()];
        rec.extend(v.iter().map(|x| format!("{x}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
