//! Pretraining: student on the masked source, EMA teacher on the full target,
//! conditioned prediction of the masked positions, squared-L2 loss.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iwm_tensor::{ema_update, AdamWConfig, AdamWState, Binder, Graph, ParamStore, ScheduleKind, ScheduleSpec, Tensor, Var};

use crate::augment::{sample_view_pair, AugPreset, ViewGeometry, ViewPair};
use crate::checkpoint::{save_checkpoint, CheckpointBundle};
use crate::config::KvConfig;
use crate::data::{self, DatasetRef, SynthSpec, SynthTask};
use crate::error::{io_err, Error, Result};
use crate::image::ImageTensor;
use crate::rng::{sample_key, stream};
use crate::vit::{self, Conditioning, PosEmbed, PredictorConfig, PredictorInput, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub data: DatasetRef,
    pub epochs: usize,
    pub batch_size: usize,
    pub preset: AugPreset,
    pub encoder: ViTConfig,
    pub predictor: PredictorConfig,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_epochs: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub stretch: f64,
    pub adam: (f64, f64, f64),
    pub seed: u64,
    pub normalize_targets: bool,
    /// Teacher tracks the student exactly (momentum 0).
    pub shared_teacher: bool,
    pub log_every: u64,
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            data: DatasetRef::Synthetic(SynthSpec::new(4, 64, 64, 0)),
            epochs: 30,
            batch_size: 16,
            preset: AugPreset::default_preset(),
            encoder: ViTConfig::default(),
            predictor: PredictorConfig::default(),
            lr_start: 0.0,
            lr_peak: 1e-3,
            lr_end: 1e-6,
            warmup_epochs: 4.0,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            stretch: 1.25,
            adam: (0.9, 0.999, 1e-8),
            seed: 0,
            normalize_targets: false,
            shared_teacher: false,
            log_every: 1,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub lr: ScheduleSpec,
    pub wd: ScheduleSpec,
    pub ema: ScheduleSpec,
}

impl PretrainConfig {
    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry {
            height: self.encoder.image_size,
            width: self.encoder.image_size,
            patch: self.encoder.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.predictor.validate()?;
        self.preset.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.stretch < 1.0 {
            return Err(Error::Config("schedule stretch must be >= 1".into()));
        }
        Ok(())
    }

    /// All three schedules share the same stretched horizon.
    pub fn schedules(&self, steps_per_epoch: usize) -> Schedules {
        let total = (self.epochs * steps_per_epoch) as u64;
        let warmup = ((self.warmup_epochs * steps_per_epoch as f64).round() as u64).min(total);
        let cosine = |start: f64, end: f64| ScheduleSpec {
            kind: ScheduleKind::Cosine,
            warmup_steps: 0,
            total_steps: total,
            stretch: self.stretch,
            start,
            peak: start,
            end,
        };
        Schedules {
            lr: ScheduleSpec {
                kind: ScheduleKind::WarmupCosine,
                warmup_steps: warmup,
                total_steps: total,
                stretch: self.stretch,
                start: self.lr_start,
                peak: self.lr_peak,
                end: self.lr_end,
            },
            wd: cosine(self.wd_start, self.wd_end),
            ema: if self.shared_teacher {
                ScheduleSpec::constant(0.0)
            } else {
                cosine(self.ema_start, self.ema_end)
            },
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        match &self.data {
            DatasetRef::Synthetic(s) => {
                kv.set("data.kind", "synthetic");
                kv.set("data.classes", s.classes);
                kv.set("data.per_class", s.per_class);
                kv.set("data.size", s.size);
                kv.set("data.seed", s.seed);
                kv.set(
                    "data.task",
                    match s.task {
                        SynthTask::Shape => "shape",
                        SynthTask::Quadrant => "quadrant",
                    },
                );
            }
            DatasetRef::Folder { root, size, seed } => {
                kv.set("data.kind", "folder");
                kv.set("data.root", root.display());
                kv.set("data.size", size);
                kv.set("data.seed", seed);
            }
        }
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.seed", self.seed);
        kv.set("train.normalize_targets", self.normalize_targets);
        kv.set("train.shared_teacher", self.shared_teacher);
        kv.set("train.log_every", self.log_every);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        let aug = self.preset.to_kv();
        for k in aug.keys() {
            kv.set(&format!("aug.{k}"), aug.get(k).unwrap_or_default());
        }
        let e = &self.encoder;
        kv.set("encoder.image_size", e.image_size);
        kv.set("encoder.patch", e.patch);
        kv.set("encoder.dim", e.dim);
        kv.set("encoder.depth", e.depth);
        kv.set("encoder.heads", e.heads);
        kv.set("encoder.mlp_ratio", e.mlp_ratio);
        kv.set(
            "encoder.pos_embed",
            match e.pos_embed {
                PosEmbed::Learned => "learned",
                PosEmbed::Sinusoidal => "sinusoidal",
            },
        );
        kv.set("encoder.ln_eps", e.ln_eps);
        let p = &self.predictor;
        kv.set("predictor.depth", p.depth);
        kv.set("predictor.dim", p.dim);
        kv.set("predictor.heads", p.heads);
        kv.set("predictor.mlp_ratio", p.mlp_ratio);
        kv.set("predictor.conditioning", p.conditioning.name());
        kv.set("predictor.action_tokens", p.action_tokens);
        kv.set("optim.lr_start", self.lr_start);
        kv.set("optim.lr", self.lr_peak);
        kv.set("optim.lr_end", self.lr_end);
        kv.set("optim.warmup_epochs", self.warmup_epochs);
        kv.set("optim.wd_start", self.wd_start);
        kv.set("optim.wd_end", self.wd_end);
        kv.set("optim.beta1", self.adam.0);
        kv.set("optim.beta2", self.adam.1);
        kv.set("optim.eps", self.adam.2);
        kv.set("optim.stretch", self.stretch);
        kv.set("ema.start", self.ema_start);
        kv.set("ema.end", self.ema_end);
        kv
    }

    /// Builds a config from key-value entries; absent keys keep defaults.
    /// `predictor.preset` and `aug.name` select base presets before
    /// individual keys are applied.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = PretrainConfig::default();
        let size = kv.usize_or("data.size", kv.usize_or("encoder.image_size", 64)?)?;
        let dseed = kv.u64_or("data.seed", 0)?;
        c.data = match kv.str_or("data.kind", "synthetic") {
            "synthetic" => DatasetRef::Synthetic(SynthSpec {
                classes: kv.usize_or("data.classes", 4)?,
                per_class: kv.usize_or("data.per_class", 64)?,
                size,
                seed: dseed,
                task: match kv.str_or("data.task", "shape") {
                    "shape" => SynthTask::Shape,
                    "quadrant" => SynthTask::Quadrant,
                    t => return Err(Error::Config(format!("unknown synthetic task `{t}`"))),
                },
            }),
            "folder" => DatasetRef::Folder {
                root: PathBuf::from(
                    kv.get("data.root")
                        .ok_or_else(|| Error::Config("folder dataset needs data.root".into()))?,
                ),
                size,
                seed: dseed,
            },
            k => return Err(Error::Config(format!("unknown data.kind `{k}`"))),
        };
        c.epochs = kv.usize_or("train.epochs", c.epochs)?;
        c.batch_size = kv.usize_or("train.batch_size", c.batch_size)?;
        c.seed = kv.u64_or("train.seed", c.seed)?;
        c.normalize_targets = kv.bool_or("train.normalize_targets", c.normalize_targets)?;
        c.shared_teacher = kv.bool_or("train.shared_teacher", c.shared_teacher)?;
        c.log_every = kv.u64_or("train.log_every", c.log_every)?.max(1);
        c.checkpoint_every = kv.usize_or("train.checkpoint_every", c.checkpoint_every)?;
        let aug = kv.section("aug");
        c.preset = if let Some(name) = kv.get("aug.preset") {
            let mut a = aug.clone();
            a.set("name", name);
            AugPreset::from_kv(&a)?
        } else {
            AugPreset::from_kv(&aug)?
        };
        let e = &mut c.encoder;
        e.image_size = size;
        e.patch = kv.usize_or("encoder.patch", e.patch)?;
        e.dim = kv.usize_or("encoder.dim", e.dim)?;
        e.depth = kv.usize_or("encoder.depth", e.depth)?;
        e.heads = kv.usize_or("encoder.heads", e.heads)?;
        e.mlp_ratio = kv.usize_or("encoder.mlp_ratio", e.mlp_ratio)?;
        e.ln_eps = kv.f64_or("encoder.ln_eps", e.ln_eps)?;
        e.pos_embed = match kv.str_or("encoder.pos_embed", "learned") {
            "learned" => PosEmbed::Learned,
            "sinusoidal" => PosEmbed::Sinusoidal,
            s => return Err(Error::Config(format!("unknown pos_embed `{s}`"))),
        };
        let mut p = PredictorConfig::preset(kv.str_or("predictor.preset", "shallow"))?;
        p.depth = kv.usize_or("predictor.depth", p.depth)?;
        p.dim = kv.usize_or("predictor.dim", p.dim)?;
        p.heads = kv.usize_or("predictor.heads", p.heads)?;
        p.mlp_ratio = kv.usize_or("predictor.mlp_ratio", p.mlp_ratio)?;
        p.conditioning = Conditioning::parse(kv.str_or("predictor.conditioning", p.conditioning.name()))?;
        p.action_tokens = kv.usize_or("predictor.action_tokens", p.action_tokens)?;
        c.predictor = p;
        c.lr_start = kv.f64_or("optim.lr_start", c.lr_start)?;
        c.lr_peak = kv.f64_or("optim.lr", c.lr_peak)?;
        c.lr_end = kv.f64_or("optim.lr_end", c.lr_end)?;
        c.warmup_epochs = kv.f64_or("optim.warmup_epochs", c.warmup_epochs)?;
        c.wd_start = kv.f64_or("optim.wd_start", c.wd_start)?;
        c.wd_end = kv.f64_or("optim.wd_end", c.wd_end)?;
        c.adam.0 = kv.f64_or("optim.beta1", c.adam.0)?;
        c.adam.1 = kv.f64_or("optim.beta2", c.adam.1)?;
        c.adam.2 = kv.f64_or("optim.eps", c.adam.2)?;
        c.stretch = kv.f64_or("optim.stretch", c.stretch)?;
        c.ema_start = kv.f64_or("ema.start", c.ema_start)?;
        c.ema_end = kv.f64_or("ema.end", c.ema_end)?;
        c.validate()?;
        Ok(c)
    }
}

/// Weights and optimizer state of a run. The teacher never enters a graph
/// as a trainable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub predictor: ParamStore<f32>,
    pub opt_student: AdamWState<f32>,
    pub opt_predictor: AdamWState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn init(cfg: &PretrainConfig) -> Self {
        let mut rng = stream(cfg.seed, "init");
        let student: ParamStore<f32> = vit::init_encoder(&cfg.encoder, &mut rng);
        let predictor: ParamStore<f32> = vit::init_predictor(&cfg.predictor, &cfg.encoder, &mut rng);
        let adam = AdamWConfig {
            beta1: cfg.adam.0,
            beta2: cfg.adam.1,
            eps: cfg.adam.2,
        };
        TrainState {
            teacher: student.clone(),
            opt_student: AdamWState::new(&student, adam),
            opt_predictor: AdamWState::new(&predictor, adam),
            student,
            predictor,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema_momentum: f64,
    pub embed_std: f64,
    pub grad_norm: f64,
}

/// `sum_i ||pred_i - target_i||^2` for one sample, both `[Nt, d]`.
pub fn iwm_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Invalid(format!(
            "prediction {:?} and target {:?} are not aligned",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}

/// Batch loss: per-sample sums averaged over the batch.
pub fn iwm_loss_batch(preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Invalid("prediction and target batches differ in size".into()));
    }
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        acc += iwm_loss(p, t)?;
    }
    Ok(acc / preds.len() as f64)
}

/// Graph form of [`iwm_loss`].
pub fn iwm_loss_graph(g: &mut Graph<f32>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Invalid("prediction and target are not aligned".into()));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum_all(sq)?)
}

/// Mean over dimensions of the per-dimension population standard
/// deviation across a batch of pooled embeddings.
pub fn collapse_metric(embeddings: &[Vec<f32>]) -> f64 {
    let n = embeddings.len();
    if n < 2 {
        return 0.0;
    }
    let d = embeddings[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = embeddings.iter().map(|e| e[j] as f64).sum::<f64>() / n as f64;
        let var = embeddings.iter().map(|e| (e[j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

pub fn mean_pool(t: &Tensor<f32>) -> Vec<f32> {
    t.mean_rows()
}

/// Per-token standardisation over the feature axis.
fn normalize_tokens(t: &Tensor<f32>, eps: f64) -> Tensor<f32> {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
    }
    out
}

/// Teacher targets for a batch: full-grid encodings `[G, d]`.
pub fn teacher_targets(state: &TrainState, cfg: &PretrainConfig, batch: &[ViewPair]) -> Result<Vec<Tensor<f32>>> {
    let imgs: Vec<&ImageTensor> = batch.iter().map(|v| &v.target).collect();
    let mut out = vit::encode_frozen(&state.teacher, &cfg.encoder, &imgs)?;
    if cfg.normalize_targets {
        out = out.iter().map(|t| normalize_tokens(t, cfg.encoder.ln_eps)).collect();
    }
    Ok(out)
}

struct SampleResult {
    loss: f64,
    grads_student: Vec<Tensor<f32>>,
    grads_predictor: Vec<Tensor<f32>>,
}

fn sample_grads(state: &TrainState, cfg: &PretrainConfig, view: &ViewPair, target: &Tensor<f32>) -> Result<SampleResult> {
    let kept = view.mask.kept_indices();
    let masked = view.mask.masked_indices();
    let mut g = Graph::new();
    let mut bs = Binder::new(&state.student, true);
    let mut bp = Binder::new(&state.predictor, true);
    let z = vit::encode_image(&mut g, &mut bs, &cfg.encoder, &view.source, &kept)?;
    let action = vit::action_constant(&mut g, &view.action.0)?;
    let out = vit::predict(
        &mut g,
        &mut bp,
        &cfg.predictor,
        &cfg.encoder,
        PredictorInput {
            context: z,
            context_pos: &kept,
            target_pos: &masked,
            action: Some(action),
            extra: None,
        },
    )?;
    let pred = out.predictions.ok_or_else(|| Error::Invalid("mask selects no positions".into()))?;
    let d = cfg.encoder.dim;
    let mut rows = Vec::with_capacity(masked.len() * d);
    for &i in &masked {
        rows.extend_from_slice(target.row(i));
    }
    let tgt = g.constant(Tensor::new(vec![masked.len(), d], rows)?)?;
    let loss = iwm_loss_graph(&mut g, pred, tgt)?;
    let grads = g.backward(loss)?;
    Ok(SampleResult {
        loss: g.value(loss).item() as f64,
        grads_student: bs.collect(&grads),
        grads_predictor: bp.collect(&grads),
    })
}

fn accumulate(acc: &mut [Tensor<f32>], add: &[Tensor<f32>]) {
    for (a, b) in acc.iter_mut().zip(add) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn grad_norm(groups: &[&[Tensor<f32>]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One optimisation step over a batch of view pairs.
pub fn train_step(state: &mut TrainState, cfg: &PretrainConfig, sched: &Schedules, batch: &[ViewPair]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let targets = teacher_targets(state, cfg, batch)?;
    let pooled: Vec<Vec<f32>> = targets.iter().map(mean_pool).collect();
    let embed_std = collapse_metric(&pooled);
    let frozen: &TrainState = state;
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .zip(targets.par_iter())
        .map(|(v, t)| sample_grads(frozen, cfg, v, t))
        .collect();
    let mut gs: Vec<Tensor<f32>> = state.student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut gp: Vec<Tensor<f32>> = state.predictor.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for r in results {
        let r = r.map_err(|e| Error::NonFiniteLoss {
            step: state.step,
            detail: e.to_string(),
        })?;
        loss += r.loss;
        accumulate(&mut gs, &r.grads_student);
        accumulate(&mut gp, &r.grads_predictor);
    }
    let inv = 1.0 / batch.len() as f32;
    for t in gs.iter_mut().chain(gp.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("loss = {loss}"),
        });
    }
    let lr = sched.lr.value(state.step);
    let wd = sched.wd.value(state.step);
    let momentum = sched.ema.value(state.step);
    for opt in [&mut state.opt_student, &mut state.opt_predictor] {
        opt.lr = lr;
        opt.weight_decay = wd;
    }
    let norm = grad_norm(&[&gs, &gp]);
    state.opt_student.step(&mut state.student, &gs)?;
    state.opt_predictor.step(&mut state.predictor, &gp)?;
    ema_update(&mut state.teacher, &state.student, momentum)?;
    let m = StepMetrics {
        step: state.step,
        loss,
        lr,
        wd,
        ema_momentum: momentum,
        embed_std,
        grad_norm: norm,
    };
    state.step += 1;
    Ok(m)
}

/// Sample indices of each step in one epoch.
pub fn epoch_batches(train: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut stream(seed ^ epoch as u64, "shuffle"));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

pub fn make_views(images: &[ImageTensor], indices: &[usize], cfg: &PretrainConfig, epoch: usize) -> Vec<ViewPair> {
    let geom = cfg.geometry();
    indices
        .par_iter()
        .map(|&i| sample_view_pair(&images[i], &cfg.preset, geom, sample_key(cfg.seed, epoch as u64, i as u64)))
        .collect()
}

pub fn bundle(state: &TrainState, cfg: &PretrainConfig, metrics: serde_json::Value) -> CheckpointBundle {
    let mut stores = BTreeMap::new();
    stores.insert("student".to_string(), state.student.clone());
    stores.insert("teacher".to_string(), state.teacher.clone());
    stores.insert("predictor".to_string(), state.predictor.clone());
    CheckpointBundle {
        step: state.step,
        configs: serde_json::json!({ "pretrain": cfg }),
        metrics,
        stores,
    }
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    /// Collapse metric of teacher embeddings of the clean training images.
    pub final_embed_std: f64,
}

fn write_jsonl<T: Serialize>(f: &mut std::fs::File, path: &Path, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Full loop. With `out_dir`, writes `metrics.jsonl` (deterministic),
/// `timing.jsonl` (wallclock), periodic checkpoints and `final/`.
pub fn run_pretraining(cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let ds = data::load(&cfg.data)?;
    if ds.train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let images: Vec<ImageTensor> = ds.images.iter().map(|i| data::resize(i, cfg.encoder.image_size)).collect();
    let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let sched = cfg.schedules(steps_per_epoch);
    let mut state = TrainState::init(cfg);
    let mut files = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let mp = dir.join("metrics.jsonl");
            let tp = dir.join("timing.jsonl");
            Some((
                std::fs::File::create(&mp).map_err(io_err(&mp))?,
                mp,
                std::fs::File::create(&tp).map_err(io_err(&tp))?,
                tp,
            ))
        }
        None => None,
    };
    let t0 = Instant::now();
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(&ds.train, cfg.batch_size, cfg.seed, epoch) {
            let views = make_views(&images, &idx, cfg, epoch);
            let m = match train_step(&mut state, cfg, &sched, &views) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        let _ = save_checkpoint(&bundle(&state, cfg, serde_json::json!({"error": e.to_string()})), &dir.join("crash"));
                    }
                    return Err(e);
                }
            };
            if m.step % cfg.log_every == 0 {
                log::info!("step {} loss {:.4} lr {:.2e} std {:.4}", m.step, m.loss, m.lr, m.embed_std);
                if let Some((mf, mp, tf, tp)) = files.as_mut() {
                    write_jsonl(mf, mp, &m)?;
                    write_jsonl(tf, tp, &serde_json::json!({"step": m.step, "wallclock": t0.elapsed().as_secs_f64()}))?;
                }
            }
            metrics.push(m);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                save_checkpoint(&bundle(&state, cfg, serde_json::json!({})), &dir.join(format!("epoch-{}", epoch + 1)))
                    .map_err(|e| Error::Invalid(format!("checkpoint at step {}: {e}", state.step)))?;
            }
        }
    }
    let clean: Vec<&ImageTensor> = ds.train.iter().map(|&i| &images[i]).collect();
    let mut pooled = Vec::new();
    for chunk in clean.chunks(32) {
        for t in vit::encode_frozen(&state.teacher, &cfg.encoder, chunk)? {
            pooled.push(mean_pool(&t));
        }
    }
    let final_embed_std = collapse_metric(&pooled);
    if let Some(dir) = out_dir {
        let last = metrics.last().map(|m: &StepMetrics| m.loss).unwrap_or(f64::NAN);
        let summary = serde_json::json!({"final_loss": last, "embed_std": final_embed_std, "steps": state.step});
        save_checkpoint(&bundle(&state, cfg, summary), &dir.join("final"))
            .map_err(|e| Error::Invalid(format!("final checkpoint at step {}: {e}", state.step)))?;
        let p = dir.join("config.resolved");
        std::fs::write(&p, cfg.to_kv().render()).map_err(io_err(&p))?;
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        final_embed_std,
    })
}

/// Rebuilds the pretraining config stored in a checkpoint manifest.
pub fn config_from_bundle(b: &CheckpointBundle) -> Result<PretrainConfig> {
    serde_json::from_value(b.configs.get("pretrain").cloned().unwrap_or_default())
        .map_err(|e| Error::Corrupt(format!("manifest pretrain config: {e}")))
}

/// Weights of a trained model, as consumed by evaluation.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder_cfg: ViTConfig,
    pub predictor_cfg: PredictorConfig,
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub predictor: ParamStore<f32>,
}

impl Model {
    pub fn from_state(state: &TrainState, cfg: &PretrainConfig) -> Self {
        Model {
            encoder_cfg: cfg.encoder,
            predictor_cfg: cfg.predictor,
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            predictor: state.predictor.clone(),
        }
    }

    pub fn from_bundle(b: &CheckpointBundle) -> Result<Self> {
        let cfg = config_from_bundle(b)?;
        let get = |n: &str| {
            b.stores
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{n}` weights")))
        };
        Ok(Model {
            encoder_cfg: cfg.encoder,
            predictor_cfg: cfg.predictor,
            student: get("student")?,
            teacher: get("teacher")?,
            predictor: get("predictor")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_cases() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f32);
        assert_eq!(iwm_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for v in &mut b.data_mut()[4..8] {
            *v += 1.0;
        }
        assert_eq!(iwm_loss(&a, &b).unwrap(), 4.0);
        assert!(iwm_loss(&a, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn collapse_cases() {
        assert_eq!(collapse_metric(&[vec![1.0, 2.0], vec![1.0, 2.0]]), 0.0);
        let alt: Vec<Vec<f32>> = (0..10).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        assert!((collapse_metric(&alt) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = PretrainConfig::default();
        c.predictor.conditioning = Conditioning::Sequence;
        c.epochs = 3;
        let back = PretrainConfig::from_kv(&KvConfig::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
