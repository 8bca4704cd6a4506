//! Frozen-encoder evaluation: linear and attentive probes, predictor
//! finetuning with its prediction-task variants, and multitask predictor
//! tuning with task tokens.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iwm_tensor::{AdamWConfig, AdamWState, Binder, Graph, ParamStore, ScheduleKind, ScheduleSpec, Scalar, Tensor, Var};

use crate::augment::{
    encode_action, random_resized_crop_flip, sample_crop, ActionVector, AugPreset, DestructiveParams, JitterParams,
};
use crate::checkpoint::store_hash;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pretrain::Model;
use crate::rng::{rng_from_key, sample_key, stream};
use crate::vit::{self, PredictorInput, ViTConfig};

const HEAD_EPS: f64 = 1e-6;
const PROBE_CROP_SCALE: (f64, f64) = (0.3, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    Linear,
    Attentive,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Attentive => "attentive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "attentive" => Ok(ProbeKind::Attentive),
            _ => Err(Error::Config(format!("unknown probe kind `{s}`"))),
        }
    }
}

/// Augmentation of the images a probe or finetuned predictor trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeAug {
    None,
    CropFlip,
    /// Crop and flip, then the pretraining source jitter and destructive
    /// augmentations.
    Full,
}

impl ProbeAug {
    pub fn name(self) -> &'static str {
        match self {
            ProbeAug::None => "none",
            ProbeAug::CropFlip => "crop-flip",
            ProbeAug::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ProbeAug::None),
            "crop-flip" => Ok(ProbeAug::CropFlip),
            "full" => Ok(ProbeAug::Full),
            _ => Err(Error::Config(format!("unknown probe augmentation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub aug: ProbeAug,
    /// Attention heads of the attentive probe's cross-attention.
    pub heads: usize,
    /// Probe the teacher encoder rather than the student.
    pub use_teacher: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear,
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            warmup_epochs: 1.0,
            weight_decay: 0.01,
            aug: ProbeAug::CropFlip,
            heads: 1,
            use_teacher: true,
            seed: 0,
        }
    }
}

/// The prediction task the predictor is finetuned on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTaskConfig {
    pub use_teacher: bool,
    /// Condition on the zero action rather than the one undoing the
    /// training augmentation.
    pub null_latents: bool,
    /// Predict one aggregate token instead of the full image.
    pub single_token: bool,
    pub pretrained_predictor: bool,
    /// Predictor learning rate is divided by this when pretrained.
    pub lr_divisor: f64,
}

impl Default for PredictionTaskConfig {
    fn default() -> Self {
        PredictionTaskConfig {
            use_teacher: true,
            null_latents: true,
            single_token: false,
            pretrained_predictor: true,
            lr_divisor: 10.0,
        }
    }
}

impl PredictionTaskConfig {
    /// The 8 combinations of (null latents, teacher, single token), in the
    /// row order of the ablation table.
    pub fn ablation_grid() -> Vec<Self> {
        let mut out = Vec::new();
        for null_latents in [false, true] {
            for use_teacher in [false, true] {
                for single_token in [false, true] {
                    out.push(PredictionTaskConfig {
                        use_teacher,
                        null_latents,
                        single_token,
                        ..Default::default()
                    });
                }
            }
        }
        out
    }

    /// Tokens the predictor transformer sees: context plus one query per
    /// position, or plus a single aggregate query.
    pub fn expected_seq_len(&self, model: &Model, extra_tokens: usize) -> usize {
        let g = model.encoder_cfg.num_patches();
        let queries = if self.single_token { 1 } else { g };
        let action_tokens = match model.predictor_cfg.conditioning {
            vit::Conditioning::Sequence => model.predictor_cfg.action_tokens,
            _ => 0,
        };
        g + queries + action_tokens + extra_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub aug: ProbeAug,
    pub heads: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            iterations: None,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.1,
            aug: ProbeAug::CropFlip,
            heads: 1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn iterations_for(&self, train_len: usize) -> usize {
        self.iterations
            .unwrap_or_else(|| self.epochs * train_len.div_ceil(self.batch_size.max(1)))
    }
}

/// One task of multitask tuning.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub id: String,
    pub dataset: Dataset,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, dataset: Dataset) -> Self {
        TaskSpec {
            id: id.into(),
            dataset,
            weight: 1.0,
        }
    }
}

// ---- views ------------------------------------------------------------------

/// A training view for probing plus the action that maps it back to the
/// unaugmented image.
pub struct ProbeView {
    pub image: ImageTensor,
    pub undo: ActionVector,
}

pub fn probe_view(img: &ImageTensor, aug: ProbeAug, key: u64) -> ProbeView {
    let mut rng = rng_from_key(key);
    let cropped = match aug {
        ProbeAug::None => img.clone(),
        ProbeAug::CropFlip | ProbeAug::Full => {
            let c = sample_crop(&mut rng, img.height(), img.width(), PROBE_CROP_SCALE, 0.5);
            random_resized_crop_flip(img, &c, img.height(), img.width())
        }
    };
    if aug != ProbeAug::Full {
        return ProbeView {
            image: cropped,
            undo: ActionVector::ZERO,
        };
    }
    let preset = AugPreset::default_preset();
    let jitter = JitterParams::sample(&mut rng, &preset.source_jitter);
    let destructive = DestructiveParams::sample(&mut rng, &preset);
    let image = destructive.apply(&jitter.apply(&cropped), preset.solarize_threshold);
    ProbeView {
        image,
        undo: encode_action(&jitter, &destructive, &JitterParams::IDENTITY),
    }
}

// ---- heads ------------------------------------------------------------------

pub fn head_param_shapes(kind: ProbeKind, dim: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    if kind == ProbeKind::Attentive {
        v.push(("query".into(), vec![1, dim]));
        for n in ["attn.k", "attn.v", "attn.proj"] {
            v.push((format!("{n}.w"), vec![dim, dim]));
            v.push((format!("{n}.b"), vec![dim]));
        }
        v.push(("ln.g".into(), vec![dim]));
        v.push(("ln.b".into(), vec![dim]));
    }
    v.push(("head.w".into(), vec![dim, classes]));
    v.push(("head.b".into(), vec![classes]));
    v
}

fn prefixed(prefix: &str, shapes: Vec<(String, Vec<usize>)>) -> Vec<(String, Vec<usize>)> {
    shapes.into_iter().map(|(n, s)| (format!("{prefix}{n}"), s)).collect()
}

/// Logits `[..., C]` from tokens `[..., N, d]`, plus the attention weights
/// `[..., heads, 1, N]` of the attentive head.
pub fn head_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    kind: ProbeKind,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<(Var, Option<Var>)> {
    let s = g.shape(x).to_vec();
    let nd = s.len();
    let d = s[nd - 1];
    let name = |n: &str| format!("{prefix}{n}");
    match kind {
        ProbeKind::Linear => {
            let pooled = g.mean_axis(x, nd - 2, false)?;
            Ok((vit::linear(g, p, &name("head"), pooled)?, None))
        }
        ProbeKind::Attentive => {
            if heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
            }
            let q = p.get(g, &name("query"))?;
            let mut qs = s.clone();
            qs[nd - 2] = 1;
            let q = g.broadcast_to(q, &qs)?;
            let k = vit::linear(g, p, &name("attn.k"), x)?;
            let v = vit::linear(g, p, &name("attn.v"), x)?;
            let qh = vit::split_heads(g, q, heads)?;
            let kh = vit::split_heads(g, k, heads)?;
            let vh = vit::split_heads(g, v, heads)?;
            let (a, probs) = vit::attention(g, qh, kh, vh)?;
            let a = vit::merge_heads(g, a)?;
            let a = vit::linear(g, p, &name("attn.proj"), a)?;
            let y = g.add(q, a)?;
            let mut out = s[..nd - 2].to_vec();
            out.push(d);
            let y = g.reshape(y, &out)?;
            let y = vit::layer_norm_affine(g, p, &name("ln"), y, HEAD_EPS)?;
            Ok((vit::linear(g, p, &name("head"), y)?, Some(probs)))
        }
    }
}

/// Mean cross-entropy of logits `[B, C]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Invalid(format!("logits {s:?} for {} labels", labels.len())));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut onehot = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + l] = T::one();
    }
    let lsm = g.log_softmax(logits, 1)?;
    let oh = g.constant(onehot)?;
    let picked = g.mul(lsm, oh)?;
    let total = g.sum_all(picked)?;
    Ok(g.scale(total, -1.0 / labels.len() as f64)?)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn adamw() -> AdamWConfig {
    AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    }
}

fn lr_schedule(peak: f64, warmup: u64, total: u64) -> ScheduleSpec {
    ScheduleSpec {
        kind: ScheduleKind::WarmupCosine,
        warmup_steps: warmup.min(total),
        total_steps: total.max(1),
        stretch: 1.0,
        start: 0.0,
        peak,
        end: peak * 1e-3,
    }
}

// ---- linear / attentive probes ---------------------------------------------

/// Full-grid tokens `[G, d]` of each image under frozen weights.
pub fn frozen_tokens(store: &ParamStore<f32>, cfg: &ViTConfig, images: &[&ImageTensor]) -> Result<Vec<Tensor<f32>>> {
    const CHUNK: usize = 32;
    let parts: Vec<Result<Vec<Tensor<f32>>>> = images
        .par_chunks(CHUNK)
        .map(|c| vit::encode_frozen(store, cfg, c))
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub frozen_hash: String,
}

/// Trains a head on token sets. `train_tokens(epoch)` supplies the
/// (possibly re-augmented) training tokens of each epoch.
pub fn fit_head(
    cfg: &ProbeConfig,
    classes: usize,
    mut train_tokens: impl FnMut(usize) -> Result<Vec<Tensor<f32>>>,
    train_labels: &[usize],
    val_tokens: &[Tensor<f32>],
    val_labels: &[usize],
) -> Result<(ParamStore<f32>, f64, Vec<f64>)> {
    if classes == 0 {
        return Err(Error::Invalid("probe needs at least one class".into()));
    }
    let dim = match val_tokens.first() {
        Some(t) => t.shape()[1],
        None => return Err(Error::Invalid("probe needs a validation split".into())),
    };
    let shapes = head_param_shapes(cfg.kind, dim, classes);
    let mut head: ParamStore<f32> = vit::init_store(&shapes, &mut stream(cfg.seed, "probe-head"));
    let mut opt = AdamWState::new(&head, adamw());
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train_labels.len().div_ceil(batch);
    let sched = lr_schedule(
        cfg.lr,
        (cfg.warmup_epochs * steps_per_epoch as f64).round() as u64,
        (cfg.epochs * steps_per_epoch) as u64,
    );
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let tokens = train_tokens(epoch)?;
        if tokens.len() != train_labels.len() {
            return Err(Error::Invalid(format!("{} token sets for {} labels", tokens.len(), train_labels.len())));
        }
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.shuffle(&mut stream(cfg.seed ^ epoch as u64, "probe-order"));
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let x = stack(idx.iter().map(|&i| &tokens[i]))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(&head, true);
            let xv = g.constant(x)?;
            let (logits, _) = head_logits(&mut g, &mut b, cfg.kind, "", cfg.heads, xv)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            let grads = g.backward(loss)?;
            let grads = b.collect(&grads);
            total += g.value(loss).item() as f64 * idx.len() as f64;
            opt.lr = sched.value(step);
            opt.weight_decay = cfg.weight_decay;
            opt.step(&mut head, &grads)?;
            step += 1;
        }
        losses.push(total / tokens.len().max(1) as f64);
    }
    let preds = head_predict(&head, cfg.kind, cfg.heads, val_tokens)?;
    Ok((head, accuracy(&preds, val_labels), losses))
}

fn stack<'a>(ts: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for t in ts {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Invalid(format!("ragged token sets {s:?} vs {:?}", t.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut s = vec![n];
    s.extend(shape.unwrap_or_default());
    Ok(Tensor::new(s, data)?)
}

/// Class predictions of a trained head.
pub fn head_predict(head: &ParamStore<f32>, kind: ProbeKind, heads: usize, tokens: &[Tensor<f32>]) -> Result<Vec<usize>> {
    let parts: Vec<Result<Vec<usize>>> = tokens
        .par_chunks(64)
        .map(|c| {
            let mut g = Graph::new();
            let mut b = Binder::new(head, false);
            let x = g.constant(stack(c.iter())?)?;
            let (logits, _) = head_logits(&mut g, &mut b, kind, "", heads, x)?;
            let v = g.value(logits);
            let classes = v.shape()[1];
            Ok(v.data().chunks(classes).map(argmax).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(tokens.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn probe_encoder<'a>(model: &'a Model, use_teacher: bool) -> &'a ParamStore<f32> {
    if use_teacher {
        &model.teacher
    } else {
        &model.student
    }
}

/// Trains a probe of `cfg.kind` on the frozen encoder and reports held-out
/// accuracy. Fails if the encoder weights change.
pub fn run_probe(model: &Model, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let encoder = probe_encoder(model, cfg.use_teacher);
    let before = store_hash(encoder);
    let enc = &model.encoder_cfg;
    let train_labels: Vec<usize> = ds.train.iter().map(|&i| ds.labels[i]).collect();
    let val_labels: Vec<usize> = ds.val.iter().map(|&i| ds.labels[i]).collect();
    let val_imgs: Vec<&ImageTensor> = ds.val.iter().map(|&i| &ds.images[i]).collect();
    let val_tokens = frozen_tokens(encoder, enc, &val_imgs)?;
    let train_tokens = |epoch: usize| -> Result<Vec<Tensor<f32>>> {
        let views: Vec<ImageTensor> = ds
            .train
            .par_iter()
            .map(|&i| probe_view(&ds.images[i], cfg.aug, sample_key(cfg.seed ^ 0x9B0E, epoch as u64, i as u64)).image)
            .collect();
        let refs: Vec<&ImageTensor> = views.iter().collect();
        frozen_tokens(encoder, enc, &refs)
    };
    let (_, acc, losses) = fit_head(cfg, ds.num_classes(), train_tokens, &train_labels, &val_tokens, &val_labels)?;
    let after = store_hash(encoder);
    if before != after {
        return Err(Error::Invalid("frozen encoder weights changed during probing".into()));
    }
    Ok(ProbeReport {
        kind: cfg.kind,
        accuracy: acc,
        train_size: train_labels.len(),
        val_size: val_labels.len(),
        epoch_losses: losses,
        frozen_hash: after,
    })
}

pub fn linear_probe(model: &Model, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    run_probe(model, ds, &ProbeConfig {
        kind: ProbeKind::Linear,
        ..cfg.clone()
    })
}

pub fn attentive_probe(model: &Model, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    run_probe(model, ds, &ProbeConfig {
        kind: ProbeKind::Attentive,
        ..cfg.clone()
    })
}

// ---- predictor finetuning ---------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub id: String,
    pub accuracy: f64,
    pub val_size: usize,
    /// Samples of this task seen over training.
    pub samples_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: PredictionTaskConfig,
    pub iterations: usize,
    /// Predictor sequence length per sample.
    pub seq_len: usize,
    pub tasks: Vec<TaskResult>,
    pub losses: Vec<f64>,
    pub frozen_hash: String,
}

impl FinetuneReport {
    pub fn accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.accuracy).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

/// Sub-batch sizes of an evenly split batch; sizes differ by at most one.
pub fn split_batch(batch: usize, tasks: usize) -> Vec<usize> {
    (0..tasks).map(|t| batch / tasks + usize::from(t < batch % tasks)).collect()
}

struct Run<'a> {
    model: &'a Model,
    encoder: &'a ParamStore<f32>,
    task: PredictionTaskConfig,
    heads: usize,
    /// Append a learned task token per task.
    task_tokens: bool,
}

struct SampleOut {
    logits: Vec<f32>,
    loss: f64,
    seq_len: usize,
    grads_pred: Vec<Tensor<f32>>,
    grads_extra: Vec<Tensor<f32>>,
}

impl Run<'_> {
    fn extra_shapes(&self, tasks: &[(usize, usize)]) -> Vec<(String, Vec<usize>)> {
        let dp = self.model.predictor_cfg.dim;
        let d = self.model.encoder_cfg.dim;
        let mut v = Vec::new();
        if self.task.single_token {
            v.push(("agg".to_string(), vec![1, dp]));
        }
        for &(t, classes) in tasks {
            if self.task_tokens {
                v.push((format!("task.{t}"), vec![1, dp]));
            }
            v.extend(prefixed(&format!("heads.{t}."), head_param_shapes(ProbeKind::Attentive, d, classes)));
        }
        v
    }

    fn sample(
        &self,
        predictor: &ParamStore<f32>,
        extras: &ParamStore<f32>,
        task: usize,
        view: &ProbeView,
        label: Option<usize>,
        scale: f64,
    ) -> Result<SampleOut> {
        let enc = &self.model.encoder_cfg;
        let pcfg = &self.model.predictor_cfg;
        let g_all: Vec<usize> = (0..enc.num_patches()).collect();
        let train = label.is_some();
        let mut g = Graph::new();
        let mut be = Binder::new(self.encoder, false);
        let mut bp = Binder::new(predictor, train);
        let mut bx = Binder::new(extras, train);
        let z = vit::encode_image(&mut g, &mut be, enc, &view.image, &g_all)?;
        // The context is frozen: cut it from the graph.
        let z = g.constant(g.value(z).clone())?;
        let action = if self.task.null_latents {
            ActionVector::ZERO
        } else {
            view.undo
        };
        let a = vit::action_constant(&mut g, &action.0)?;
        let mut extra = Vec::new();
        if self.task.single_token {
            let agg = bx.get(&mut g, "agg")?;
            extra.push(vit::condition_tokens(&mut g, &mut bp, pcfg, agg, Some(a))?);
        }
        if self.task_tokens {
            extra.push(bx.get(&mut g, &format!("task.{task}"))?);
        }
        let extra = match extra.len() {
            0 => None,
            1 => Some(extra[0]),
            _ => Some(g.concat(&extra, 0)?),
        };
        let targets: &[usize] = if self.task.single_token { &[] } else { &g_all };
        let out = vit::predict(
            &mut g,
            &mut bp,
            pcfg,
            enc,
            PredictorInput {
                context: z,
                context_pos: &g_all,
                target_pos: targets,
                action: Some(a),
                extra,
            },
        )?;
        let tokens = if self.task.single_token {
            let e = out.extra.ok_or_else(|| Error::Invalid("missing aggregate output".into()))?;
            g.slice(e, 0, 0, 1)?
        } else {
            out.predictions.ok_or_else(|| Error::Invalid("missing predictions".into()))?
        };
        let d = g.shape(tokens)[1];
        let n = g.shape(tokens)[0];
        let x = g.reshape(tokens, &[1, n, d])?;
        let (logits, _) = head_logits(&mut g, &mut bx, ProbeKind::Attentive, &format!("heads.{task}."), self.heads, x)?;
        let lv = g.value(logits).data().to_vec();
        let (loss, grads_pred, grads_extra) = match label {
            Some(l) => {
                let ce = cross_entropy(&mut g, logits, &[l])?;
                let scaled = g.scale(ce, scale)?;
                let grads = g.backward(scaled)?;
                (g.value(ce).item() as f64, bp.collect(&grads), bx.collect(&grads))
            }
            None => (0.0, Vec::new(), Vec::new()),
        };
        Ok(SampleOut {
            logits: lv,
            loss,
            seq_len: out.seq_len,
            grads_pred,
            grads_extra,
        })
    }
}

fn add_into(acc: &mut [Tensor<f32>], add: &[Tensor<f32>]) {
    for (a, b) in acc.iter_mut().zip(add) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn zeros_like(store: &ParamStore<f32>) -> Vec<Tensor<f32>> {
    store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()
}

/// Cycles through a task's training indices, reshuffling on every pass.
struct Sampler {
    indices: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    task: usize,
}

impl Sampler {
    fn new(indices: Vec<usize>, seed: u64, task: usize) -> Self {
        Sampler {
            indices,
            order: Vec::new(),
            pos: 0,
            pass: 0,
            seed,
            task,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order = self.indices.clone();
            let s = sample_key(self.seed, self.pass, self.task as u64);
            self.order.shuffle(&mut stream(s, "ft-order"));
            self.pass += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn finetune(
    model: &Model,
    tasks: &[(&str, &Dataset, f64)],
    task_cfg: &PredictionTaskConfig,
    cfg: &FinetuneConfig,
    iterations: usize,
    task_tokens: bool,
) -> Result<FinetuneReport> {
    if tasks.is_empty() {
        return Err(Error::Invalid("finetuning needs at least one task".into()));
    }
    let mut seen = BTreeSet::new();
    for (id, ds, _) in tasks {
        if !seen.insert(*id) {
            return Err(Error::Invalid(format!("task id `{id}` used twice")));
        }
        if ds.train.is_empty() || ds.val.is_empty() {
            return Err(Error::Data(format!("task `{id}` needs train and val samples")));
        }
    }
    if cfg.batch_size < tasks.len() {
        return Err(Error::Config(format!(
            "batch of {} cannot be split over {} tasks",
            cfg.batch_size,
            tasks.len()
        )));
    }
    let encoder = probe_encoder(model, task_cfg.use_teacher);
    let before = store_hash(encoder);
    let run = Run {
        model,
        encoder,
        task: *task_cfg,
        heads: cfg.heads,
        task_tokens,
    };
    let mut predictor = if task_cfg.pretrained_predictor {
        model.predictor.clone()
    } else {
        vit::init_predictor(&model.predictor_cfg, &model.encoder_cfg, &mut stream(cfg.seed, "ft-predictor"))
    };
    let class_counts: Vec<(usize, usize)> = tasks.iter().enumerate().map(|(t, (_, ds, _))| (t, ds.num_classes())).collect();
    let mut extras: ParamStore<f32> = vit::init_store(&run.extra_shapes(&class_counts), &mut stream(cfg.seed, "ft-extras"));
    let mut opt_p = AdamWState::new(&predictor, adamw());
    let mut opt_x = AdamWState::new(&extras, adamw());
    let divisor = if task_cfg.pretrained_predictor { task_cfg.lr_divisor } else { 1.0 };
    let sched = lr_schedule(cfg.lr, (cfg.warmup_frac * iterations as f64).round() as u64, iterations as u64);
    let split = split_batch(cfg.batch_size, tasks.len());
    let mut samplers: Vec<Sampler> = tasks
        .iter()
        .enumerate()
        .map(|(t, (_, ds, _))| Sampler::new(ds.train.clone(), cfg.seed, t))
        .collect();
    let expected = task_cfg.expected_seq_len(model, usize::from(task_tokens));
    let mut losses = Vec::with_capacity(iterations);
    let mut samples_seen = vec![0usize; tasks.len()];
    for step in 0..iterations {
        let mut jobs = Vec::with_capacity(cfg.batch_size);
        for (t, &n) in split.iter().enumerate() {
            for _ in 0..n {
                let i = samplers[t].next();
                let scale = tasks[t].2 / n as f64;
                jobs.push((t, i, scale));
            }
            samples_seen[t] += n;
        }
        let outs: Vec<Result<SampleOut>> = jobs
            .par_iter()
            .map(|&(t, i, scale)| {
                let ds = tasks[t].1;
                let key = sample_key(cfg.seed ^ 0xF1E7, step as u64, ((t as u64) << 32) | i as u64);
                let view = probe_view(&ds.images[i], cfg.aug, key);
                run.sample(&predictor, &extras, t, &view, Some(ds.labels[i]), scale)
            })
            .collect();
        let mut gp = zeros_like(&predictor);
        let mut gx = zeros_like(&extras);
        let mut loss = 0.0;
        for (o, &(_, _, scale)) in outs.into_iter().zip(&jobs) {
            let o = o?;
            if o.seq_len != expected {
                return Err(Error::Invalid(format!("predictor saw {} tokens, expected {expected}", o.seq_len)));
            }
            loss += o.loss * scale;
            add_into(&mut gp, &o.grads_pred);
            add_into(&mut gx, &o.grads_extra);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                detail: format!("finetune loss = {loss}"),
            });
        }
        losses.push(loss);
        let lr = sched.value(step as u64);
        opt_p.lr = lr / divisor;
        opt_x.lr = lr;
        opt_p.weight_decay = cfg.weight_decay;
        opt_x.weight_decay = cfg.weight_decay;
        opt_p.step(&mut predictor, &gp)?;
        opt_x.step(&mut extras, &gx)?;
    }
    let mut results = Vec::with_capacity(tasks.len());
    let mut seq_len = expected;
    for (t, (id, ds, _)) in tasks.iter().enumerate() {
        let outs: Vec<Result<SampleOut>> = ds
            .val
            .par_iter()
            .map(|&i| {
                let view = ProbeView {
                    image: ds.images[i].clone(),
                    undo: ActionVector::ZERO,
                };
                run.sample(&predictor, &extras, t, &view, None, 1.0)
            })
            .collect();
        let mut preds = Vec::with_capacity(outs.len());
        for o in outs {
            let o = o?;
            seq_len = o.seq_len;
            preds.push(argmax(&o.logits));
        }
        let labels: Vec<usize> = ds.val.iter().map(|&i| ds.labels[i]).collect();
        results.push(TaskResult {
            id: id.to_string(),
            accuracy: accuracy(&preds, &labels),
            val_size: labels.len(),
            samples_seen: samples_seen[t],
        });
    }
    if seq_len != expected {
        return Err(Error::Invalid(format!("predictor saw {seq_len} tokens, expected {expected}")));
    }
    let after = store_hash(encoder);
    if before != after {
        return Err(Error::Invalid("frozen encoder weights changed during finetuning".into()));
    }
    Ok(FinetuneReport {
        task: *task_cfg,
        iterations,
        seq_len,
        tasks: results,
        losses,
        frozen_hash: after,
    })
}

/// Finetunes the predictor (and an attentive head on its output) for
/// classification on top of the frozen encoder.
pub fn predictor_finetune(
    model: &Model,
    ds: &Dataset,
    task: &PredictionTaskConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let iterations = cfg.iterations_for(ds.train.len());
    finetune(model, &[("main", ds, 1.0)], task, cfg, iterations, false)
}

/// Runs every row of the prediction-task ablation.
pub fn prediction_task_ablation(model: &Model, ds: &Dataset, cfg: &FinetuneConfig) -> Result<Vec<FinetuneReport>> {
    PredictionTaskConfig::ablation_grid()
        .iter()
        .map(|t| predictor_finetune(model, ds, t, cfg))
        .collect()
}

/// Ablation rows with the accuracy difference to the default row.
pub fn ablation_csv(rows: &[FinetuneReport]) -> String {
    let default = PredictionTaskConfig::default();
    let base = rows.iter().find(|r| r.task == default).map(|r| r.accuracy());
    let mut s = String::from("null_latents,on_teacher,single_token,pretrained,seq_len,accuracy,delta\n");
    for r in rows {
        let delta = base.map_or(String::new(), |b| format!("{:.4}", r.accuracy() - b));
        s.push_str(&format!(
            "{},{},{},{},{},{:.4},{}\n",
            u8::from(r.task.null_latents),
            u8::from(r.task.use_teacher),
            u8::from(r.task.single_token),
            u8::from(r.task.pretrained_predictor),
            r.seq_len,
            r.accuracy(),
            delta
        ));
    }
    s
}

// ---- multitask --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskReport {
    pub iterations: usize,
    pub multitask: FinetuneReport,
    /// One single-task run per task, each with the same iteration count.
    pub single: Vec<FinetuneReport>,
}

impl MultitaskReport {
    pub fn mean_multitask(&self) -> f64 {
        self.multitask.accuracy()
    }

    pub fn mean_single(&self) -> f64 {
        self.single.iter().map(|r| r.accuracy()).sum::<f64>() / self.single.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,multitask,single_task,delta\n");
        for (m, r) in self.multitask.tasks.iter().zip(&self.single) {
            let a = r.accuracy();
            s.push_str(&format!("{},{:.4},{:.4},{:.4}\n", m.id, m.accuracy, a, m.accuracy - a));
        }
        s.push_str(&format!(
            "mean,{:.4},{:.4},{:.4}\n",
            self.mean_multitask(),
            self.mean_single(),
            self.mean_multitask() - self.mean_single()
        ));
        s
    }
}

/// One shared predictor for all tasks, the batch split evenly between
/// them, plus single-task baselines with the same number of iterations.
pub fn multitask_finetune(
    model: &Model,
    tasks: &[TaskSpec],
    task_cfg: &PredictionTaskConfig,
    cfg: &FinetuneConfig,
    with_baselines: bool,
) -> Result<MultitaskReport> {
    let refs: Vec<(&str, &Dataset, f64)> = tasks.iter().map(|t| (t.id.as_str(), &t.dataset, t.weight)).collect();
    let iterations = cfg.iterations_for(tasks.iter().map(|t| t.dataset.train.len()).max().unwrap_or(0));
    let multitask = finetune(model, &refs, task_cfg, cfg, iterations, true)?;
    let single = if with_baselines {
        refs.iter()
            .map(|&r| finetune(model, &[r], task_cfg, cfg, iterations, false).map(|mut rep| {
                rep.tasks[0].id = r.0.to_string();
                rep
            }))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(MultitaskReport {
        iterations,
        multitask,
        single,
    })
}
