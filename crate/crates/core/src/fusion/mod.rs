//! Stage 2: survival model on frozen backbone features.
//!
//! Pooled multi-scale features are projected to a common width, the
//! tabular covariates are projected to an initial query, and the query is
//! refined by one attention step per scale (f̄₁ first), each followed by a
//! pre-LN feed-forward update. The result is gated by the Stage-1 prototypes
//! and mapped to a scalar log-risk by a two-layer head.

pub mod attention;
pub mod cox;
pub mod gate;

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::block::{Ffn, FfnCache};
use crate::backbone::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::act::{gelu, gelu_grad};
use crate::nn::checkpoint::Archive;
use crate::nn::norm::LayerNormCache;
use crate::nn::{add_assign, join, zeros_like, Adam, LayerNorm, Linear, Params};
use crate::parallel::Exec;
use crate::pretrain::{normalize, PrototypeBank, Stage1Model};
use crate::survstats::concordance_index;
use attention::{Mhsa, MhsaCache};
pub use cox::{cox_loss, CoxLoss};
pub use gate::{apply_gate, gate_vector, prototype_gate, GateMode};

const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Iterative attention over the four pooled scales.
    #[default]
    MultiscaleAttention,
    /// Pooled f4 concatenated with the covariates, straight into the head.
    Concat,
    /// Pooled f4 only; covariates are ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub fusion_mode: FusionMode,
    pub gate_mode: GateMode,
    pub n_heads: usize,
    /// Hidden width of the refinement FFN as a multiple of d.
    pub ffn_expansion: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay (0 disables).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            fusion_mode: FusionMode::MultiscaleAttention,
            gate_mode: GateMode::Hard,
            n_heads: 4,
            ffn_expansion: 2,
            epochs: 100,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl FusionConfig {
    /// Small-cohort CPU settings: fewer epochs at a larger step.
    pub fn desk() -> Self {
        FusionConfig { epochs: 100, learning_rate: 1e-3, weight_decay: 0.01, ..Self::default() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("fusion config: {m}")));
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return bad(format!("width {d} is not divisible by {} heads", self.n_heads));
        }
        if self.gate_mode != GateMode::None && self.fusion_mode != FusionMode::MultiscaleAttention {
            return bad("prototype gating requires multiscale_attention fusion".into());
        }
        if self.epochs == 0 || self.batch_size < 2 || !(self.learning_rate > 0.0) || self.ffn_expansion == 0 {
            return bad("epochs > 0, batch_size ≥ 2, learning_rate > 0 and ffn_expansion > 0 required".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Frozen-backbone inputs of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    /// Globally averaged f1..f4 (widths differ per scale).
    pub pooled: [Array1<f64>; 4],
    pub covariates: Array1<f64>,
}

/// Features of a raw `[0, 1]` image under the evaluation transform.
pub fn extract_features(stage1: &Stage1Model, image: &ndarray::Array3<f64>, covariates: &Array1<f64>) -> Result<SubjectFeatures> {
    let msf = stage1.backbone.features(&normalize(image))?;
    Ok(SubjectFeatures { pooled: msf.pooled(), covariates: covariates.clone() })
}

/// Per-feature standardization fitted on a training set. Applied to the
/// pooled maps and covariates before any learned layer; the prototype gate
/// still sees the raw pooled f4.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaler {
    /// f1..f4 then covariates.
    pub mean: Vec<Array1<f64>>,
    pub inv_sd: Vec<Array1<f64>>,
}

impl InputScaler {
    pub fn identity(widths: [usize; 4], d_e: usize) -> Self {
        let all: Vec<usize> = widths.iter().copied().chain([d_e]).collect();
        InputScaler {
            mean: all.iter().map(|&w| Array1::zeros(w)).collect(),
            inv_sd: all.iter().map(|&w| Array1::ones(w)).collect(),
        }
    }

    pub fn fit(xs: &[SubjectFeatures]) -> Self {
        let block = |k: usize, x: &SubjectFeatures| if k < 4 { x.pooled[k].clone() } else { x.covariates.clone() };
        let n = xs.len() as f64;
        let mut mean = Vec::with_capacity(5);
        let mut inv_sd = Vec::with_capacity(5);
        for k in 0..5 {
            let m = xs.iter().fold(Array1::zeros(block(k, &xs[0]).len()), |acc, x| acc + block(k, x)) / n;
            let var: Array1<f64> = xs.iter().fold(Array1::zeros(m.len()), |acc, x| acc + (block(k, x) - &m).mapv(|v| v * v)) / n;
            inv_sd.push(var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }));
            mean.push(m);
        }
        InputScaler { mean, inv_sd }
    }

    pub fn apply(&self, x: &SubjectFeatures) -> SubjectFeatures {
        let f = |k: usize, v: &Array1<f64>| (v - &self.mean[k]) * &self.inv_sd[k];
        SubjectFeatures { pooled: [0, 1, 2, 3].map(|k| f(k, &x.pooled[k])), covariates: f(4, &x.covariates) }
    }
}

impl Params for InputScaler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.mean.visit(&join(prefix, "mean"), f);
        self.inv_sd.visit(&join(prefix, "inv_sd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mean.visit_mut(&join(prefix, "mean"), f);
        self.inv_sd.visit_mut(&join(prefix, "inv_sd"), f);
    }
}

/// Attention fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCore {
    /// Per-scale projection of the pooled map to width d.
    pub proj: Vec<Linear>,
    /// Tabular projection `W_q` (d × d_e, no bias).
    pub w_tab: Linear,
    pub mhsa: Mhsa,
    pub ln: LayerNorm,
    pub ffn: Ffn,
}

impl Params for AttentionCore {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.w_tab.visit(&join(prefix, "w_tab"), f);
        self.mhsa.visit(&join(prefix, "mhsa"), f);
        self.ln.visit(&join(prefix, "ln"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.w_tab.visit_mut(&join(prefix, "w_tab"), f);
        self.mhsa.visit_mut(&join(prefix, "mhsa"), f);
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    mhsa: MhsaCache,
    ln: LayerNormCache,
    n: Array2<f64>,
    ffn: FfnCache,
}

impl AttentionCore {
    /// One refinement step: `x = q + MHSA(q, f̄)`, then `x + FFN(LN(x))`.
    pub fn fuse_step(&self, q: &Array1<f64>, fbar: &Array1<f64>) -> (Array1<f64>, StepCache) {
        let ctx = fbar.clone().insert_axis(Axis(0));
        let (a, mhsa) = self.mhsa.forward(q, &ctx);
        let x1 = q + &a;
        let (n, ln) = self.ln.forward(x1.view().insert_axis(Axis(0)));
        let (f, ffn) = self.ffn.forward(n.view());
        let out = &x1 + &f.row(0);
        (out, StepCache { mhsa, ln, n, ffn })
    }

    /// Returns `(dq, dfbar)`.
    pub fn fuse_step_backward(&self, c: &StepCache, dout: &Array1<f64>, grad: &mut AttentionCore) -> (Array1<f64>, Array1<f64>) {
        let dy = dout.view().insert_axis(Axis(0));
        let dn = self.ffn.backward(c.n.view(), &c.ffn, dy, &mut grad.ffn);
        let dx1_ln = self.ln.backward(&c.ln, dn.view(), &mut grad.ln);
        let dx1 = dout + &dx1_ln.row(0);
        let (dq_att, dctx) = self.mhsa.backward(&c.mhsa, &dx1, &mut grad.mhsa);
        (dx1 + dq_att, dctx.row(0).to_owned())
    }
}

/// Two-layer head `d_in → d/2 → 1` with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl Params for SurvivalHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub d: usize,
    pub d_e: usize,
    pub scale_widths: [usize; 4],
    pub core: Option<AttentionCore>,
    pub head: SurvivalHead,
    /// Frozen Stage-1 prototypes (not trainable here).
    pub bank: Option<PrototypeBank>,
    /// Fixed input standardization (not trainable).
    pub scaler: InputScaler,
}

impl Params for FusionModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(c) = &self.core {
            c.visit(&join(prefix, "core"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        if let Some(c) = self.core.as_mut() {
            c.visit_mut(&join(prefix, "core"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: Vec<StepCache>,
    gate: Array1<f64>,
    head_in: Array1<f64>,
    pre: Array1<f64>,
    act: Array1<f64>,
}

impl FusionModel {
    pub fn new(
        config: FusionConfig,
        scale_widths: [usize; 4],
        d_e: usize,
        bank: Option<PrototypeBank>,
    ) -> Result<Self> {
        let d = scale_widths[3];
        config.validate(d)?;
        if config.gate_mode != GateMode::None {
            match &bank {
                Some(b) if b.dim() == d => {}
                Some(b) => return Err(Error::Shape(format!("prototype width {} vs feature width {d}", b.dim()))),
                None => return Err(Error::Validation("gated fusion needs the Stage-1 prototype bank".into())),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let core = (config.fusion_mode == FusionMode::MultiscaleAttention).then(|| AttentionCore {
            proj: scale_widths.iter().map(|&c| Linear::new(c, d, true, &mut rng)).collect(),
            w_tab: Linear::new(d_e, d, false, &mut rng),
            mhsa: Mhsa::new(d, config.n_heads, &mut rng),
            ln: LayerNorm::new(d),
            ffn: Ffn::new(d, config.ffn_expansion, &mut rng),
        });
        let head_in = match config.fusion_mode {
            FusionMode::Concat => d + d_e,
            _ => d,
        };
        let hidden = (d / 2).max(1);
        let head = SurvivalHead {
            hidden: Linear::new(head_in, hidden, true, &mut rng),
            out: Linear::new(hidden, 1, true, &mut rng),
        };
        let scaler = InputScaler::identity(scale_widths, d_e);
        Ok(FusionModel { config, d, d_e, scale_widths, core, head, bank, scaler })
    }

    fn check(&self, x: &SubjectFeatures) -> Result<()> {
        if x.covariates.len() != self.d_e {
            return Err(Error::Shape(format!("covariate width {} vs expected {}", x.covariates.len(), self.d_e)));
        }
        for (i, p) in x.pooled.iter().enumerate() {
            if p.len() != self.scale_widths[i] {
                return Err(Error::Shape(format!("scale {} width {} vs expected {}", i + 1, p.len(), self.scale_widths[i])));
            }
        }
        Ok(())
    }

    fn core(&self) -> Result<&AttentionCore> {
        self.core.as_ref().ok_or_else(|| Error::Validation("model has no attention fusion".into()))
    }

    /// Global average pooling per scale, standardization, then the
    /// per-scale projection to width d.
    pub fn pool_features(&self, msf: &MultiScaleFeatures) -> Result<[Array1<f64>; 4]> {
        let core = self.core()?;
        let pooled = msf.pooled();
        Ok([0, 1, 2, 3].map(|i| core.proj[i].forward_vec(&((&pooled[i] - &self.scaler.mean[i]) * &self.scaler.inv_sd[i]))))
    }

    /// `q₁ = W_q e`.
    pub fn project_tabular(&self, e: &Array1<f64>) -> Result<Array1<f64>> {
        if e.len() != self.d_e {
            return Err(Error::Shape(format!("covariate width {} vs expected {}", e.len(), self.d_e)));
        }
        Ok(self.core()?.w_tab.forward_vec(e))
    }

    fn gate_for(&self, f4: &Array1<f64>) -> Result<Array1<f64>> {
        match (&self.bank, self.config.gate_mode) {
            (Some(b), mode) if mode != GateMode::None => gate_vector(f4.view(), b, mode),
            _ => Ok(Array1::zeros(self.d)),
        }
    }

    pub fn forward(&self, raw: &SubjectFeatures) -> Result<(f64, ForwardCache)> {
        self.check(raw)?;
        let x = &self.scaler.apply(raw);
        let mut cache = ForwardCache {
            steps: Vec::new(),
            gate: Array1::zeros(0),
            head_in: Array1::zeros(0),
            pre: Array1::zeros(0),
            act: Array1::zeros(0),
        };
        let head_in = match self.config.fusion_mode {
            FusionMode::None => x.pooled[3].clone(),
            FusionMode::Concat => concatenate![Axis(0), x.pooled[3], x.covariates],
            FusionMode::MultiscaleAttention => {
                let core = self.core()?;
                let mut q = core.w_tab.forward_vec(&x.covariates);
                for i in 0..4 {
                    let fbar = core.proj[i].forward_vec(&x.pooled[i]);
                    let (next, sc) = core.fuse_step(&q, &fbar);
                    cache.steps.push(sc);
                    q = next;
                }
                let g = self.gate_for(&raw.pooled[3])?;
                let u = apply_gate(&q, &g);
                cache.gate = g;
                u
            }
        };
        let pre = self.head.hidden.forward_vec(&head_in);
        let act = pre.mapv(gelu);
        let beta = self.head.out.forward_vec(&act)[0];
        if !beta.is_finite() {
            return Err(Error::Numeric("non-finite log-risk".into()));
        }
        cache.head_in = head_in;
        cache.pre = pre;
        cache.act = act;
        Ok((beta, cache))
    }

    pub fn risk(&self, x: &SubjectFeatures) -> Result<f64> {
        Ok(self.forward(x)?.0)
    }

    pub fn risks(&self, xs: &[SubjectFeatures], exec: Exec) -> Result<Vec<f64>> {
        exec.map(xs, |x| self.risk(x)).into_iter().collect()
    }

    /// Accumulates `dβ · ∂β/∂θ` into `grad`.
    pub fn backward(&self, raw: &SubjectFeatures, cache: &ForwardCache, dbeta: f64, grad: &mut FusionModel) {
        let dact = self.head.out.backward_vec(&cache.act, &Array1::from_elem(1, dbeta), &mut grad.head.out);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        let du = self.head.hidden.backward_vec(&cache.head_in, &dpre, &mut grad.head.hidden);
        if let (Some(core), Some(gcore)) = (self.core.as_ref(), grad.core.as_mut()) {
            let x = &self.scaler.apply(raw);
            let mut dq = &du * &cache.gate.mapv(|v| 1.0 + v);
            for i in (0..4).rev() {
                let (dq_prev, dfbar) = core.fuse_step_backward(&cache.steps[i], &dq, gcore);
                core.proj[i].backward_vec(&x.pooled[i], &dfbar, &mut gcore.proj[i]);
                dq = dq_prev;
            }
            core.w_tab.backward_vec(&x.covariates, &dq, &mut gcore.w_tab);
        }
    }

    pub fn save(&self, path: &Path, stage1_hash: Option<&str>) -> Result<String> {
        let config = serde_json::json!({
            "fusion": self.config,
            "d_e": self.d_e,
            "scale_widths": self.scale_widths,
            "stage1_sha256": stage1_hash,
        });
        let mut arc = Archive::new(STAGE2_KIND, config);
        arc.add_params("model", self);
        arc.add_params("scaler", &self.scaler);
        arc.write(path)
    }

    /// Loads a Stage-2 archive; `bank` must come from the Stage-1 checkpoint
    /// it was trained on (see the `stage1_sha256` entry of its config).
    pub fn from_archive(arc: &Archive, bank: Option<PrototypeBank>) -> Result<Self> {
        if arc.kind != STAGE2_KIND {
            return Err(Error::Validation(format!("expected a '{STAGE2_KIND}' checkpoint, found '{}'", arc.kind)));
        }
        let bad = |e: serde_json::Error| Error::Validation(format!("stage2 checkpoint config: {e}"));
        let config: FusionConfig = serde_json::from_value(arc.config["fusion"].clone()).map_err(bad)?;
        let d_e: usize = serde_json::from_value(arc.config["d_e"].clone()).map_err(bad)?;
        let widths: [usize; 4] = serde_json::from_value(arc.config["scale_widths"].clone()).map_err(bad)?;
        let mut m = FusionModel::new(config, widths, d_e, bank)?;
        arc.load_into("model", &mut m)?;
        arc.load_into("scaler", &mut m.scaler)?;
        Ok(m)
    }
}

pub const STAGE2_KIND: &str = "stage2";

/// Features plus outcomes for a set of subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalSet {
    pub features: Vec<SubjectFeatures>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

impl SurvivalSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> SurvivalSet {
        SurvivalSet {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            time: idx.iter().map(|&i| self.time[i]).collect(),
            event: idx.iter().map(|&i| self.event[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    /// Mean per-event Cox loss over the epoch's batches.
    pub train_loss: f64,
    pub val_c_index: Option<f64>,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub model: FusionModel,
    pub log: Vec<Stage2EpochLog>,
    pub selected_epoch: usize,
}

/// Cox loss (divided by the number of events) and its gradient over a batch.
pub fn batch_gradient(model: &FusionModel, set: &SurvivalSet, batch: &[usize], exec: Exec) -> Result<Option<(f64, FusionModel)>> {
    let fwd: Vec<(f64, ForwardCache)> =
        exec.map(batch, |&i| model.forward(&set.features[i])).into_iter().collect::<Result<_>>()?;
    let beta: Vec<f64> = fwd.iter().map(|f| f.0).collect();
    let t: Vec<f64> = batch.iter().map(|&i| set.time[i]).collect();
    let e: Vec<bool> = batch.iter().map(|&i| set.event[i]).collect();
    let Some(loss) = cox_loss(&beta, &t, &e)? else { return Ok(None) };
    let scale = 1.0 / loss.n_events as f64;
    let positions: Vec<usize> = (0..batch.len()).collect();
    let chunks: Vec<&[usize]> = positions.chunks(GRAD_CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| {
        let mut g = zeros_like(model);
        for &k in chunk.iter() {
            model.backward(&set.features[batch[k]], &fwd[k].1, loss.grad[k] * scale, &mut g);
        }
        g
    });
    let mut parts = parts.into_iter();
    let mut total = parts.next().expect("non-empty batch");
    for p in parts {
        add_assign(&mut total, &p);
    }
    Ok(Some((loss.value * scale, total)))
}

/// Trains on `train`; with `val`, the parameters of the epoch with the best
/// validation C-index are returned (first on ties).
pub fn train_stage2(
    train: &SurvivalSet,
    val: Option<&SurvivalSet>,
    bank: Option<&PrototypeBank>,
    cfg: &FusionConfig,
    exec: Exec,
) -> Result<Stage2Result> {
    let first = train.features.first().ok_or_else(|| Error::Validation("stage2: empty training set".into()))?;
    if !train.event.iter().any(|&e| e) {
        return Err(Error::Validation(format!("stage2: all {} training subjects are censored", train.len())));
    }
    let widths = [0, 1, 2, 3].map(|i| first.pooled[i].len());
    let mut model = FusionModel::new(cfg.clone(), widths, first.covariates.len(), bank.cloned())?;
    model.scaler = InputScaler::fit(&train.features);
    let mut adam = Adam::new(cfg.learning_rate);
    adam.weight_decay = cfg.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, FusionModel)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                skipped += 1;
                continue;
            }
            match batch_gradient(&model, train, batch, exec)? {
                Some((loss, grad)) => {
                    if !loss.is_finite() {
                        return Err(Error::Numeric(format!("stage2 loss is {loss} at epoch {epoch}")));
                    }
                    adam.step(&mut model, &grad);
                    loss_sum += loss;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let val_c_index = match val {
            Some(v) if !v.is_empty() => {
                let r = model.risks(&v.features, exec)?;
                concordance_index(&r, &v.time, &v.event).ok()
            }
            _ => None,
        };
        if let Some(c) = val_c_index {
            if best.as_ref().is_none_or(|(b, _, _)| c > *b) {
                best = Some((c, epoch, model.clone()));
            }
        }
        log.push(Stage2EpochLog {
            epoch,
            train_loss: if used > 0 { loss_sum / used as f64 } else { f64::NAN },
            val_c_index,
            skipped_batches: skipped,
        });
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs),
    };
    Ok(Stage2Result { model, log, selected_epoch })
}
