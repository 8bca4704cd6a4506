//! World-model evaluation: MRR against a bank of augmented targets,
//! nearest-neighbour retrieval, marginalised invariant codes and
//! similarity matrices.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iwm_tensor::{Binder, Graph, ParamStore, Tensor};

use crate::augment::{
    encode_action, sample_view_pair, ActionVector, AugPreset, DestructiveParams, JitterParams, JitterStrength,
    ViewGeometry,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::pretrain::{mean_pool, Model};
use crate::rng::{rng_from_key, sample_key};
use crate::vit::{self, PredictorInput, ViTConfig};

/// How predictions are compared with bank entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    /// Euclidean distance between mean-pooled token sets.
    #[default]
    Pooled,
    /// Sum over tokens of per-token Euclidean distances.
    PerToken,
}

#[derive(Clone, Debug)]
pub struct BankEntry {
    pub image: ImageTensor,
    pub jitter: JitterParams,
    /// Action turning the clean image into this entry.
    pub action: ActionVector,
    pub tokens: Tensor<f32>,
    pub pooled: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct TargetBank {
    pub entries: Vec<BankEntry>,
}

/// Jitter used for bank entries: the preset's target strengths, always applied.
pub fn bank_jitter(preset: &AugPreset) -> JitterStrength {
    JitterStrength {
        prob: 1.0,
        ..preset.target_jitter
    }
}

/// `n` jittered copies of `image` encoded by `encoder`. With `clean_first`
/// entry 0 is the untouched image.
pub fn build_bank(
    image: &ImageTensor,
    n: usize,
    strength: &JitterStrength,
    encoder: &ParamStore<f32>,
    cfg: &ViTConfig,
    key: u64,
    clean_first: bool,
) -> Result<TargetBank> {
    if n < 2 {
        return Err(Error::Invalid("bank needs at least two entries".into()));
    }
    let mut rng = rng_from_key(key);
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        params.push(if clean_first && i == 0 {
            JitterParams::IDENTITY
        } else {
            JitterParams::sample(&mut rng, strength)
        });
    }
    let images: Vec<ImageTensor> = params.iter().map(|p| p.apply(image)).collect();
    let mut tokens = Vec::with_capacity(n);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    for chunk in refs.chunks(32) {
        tokens.extend(vit::encode_frozen(encoder, cfg, chunk)?);
    }
    let none = DestructiveParams::default();
    let entries = images
        .into_iter()
        .zip(params)
        .zip(tokens)
        .map(|((image, jitter), tokens)| BankEntry {
            action: encode_action(&JitterParams::IDENTITY, &none, &jitter),
            pooled: mean_pool(&tokens),
            image,
            jitter,
            tokens,
        })
        .collect();
    Ok(TargetBank { entries })
}

/// Frozen full-grid encoding of one image, `[G, d]`.
pub fn encode_one(store: &ParamStore<f32>, cfg: &ViTConfig, img: &ImageTensor) -> Result<Tensor<f32>> {
    Ok(vit::encode_frozen(store, cfg, &[img])?.remove(0))
}

/// Predictor output for every grid position given a full, unmasked
/// context `[G, d]` and an action.
pub fn predict_full(model: &Model, context: &Tensor<f32>, action: &ActionVector) -> Result<Tensor<f32>> {
    let all: Vec<usize> = (0..model.encoder_cfg.num_patches()).collect();
    let mut g = Graph::new();
    let mut b = Binder::new(&model.predictor, false);
    let ctx = g.constant(context.clone())?;
    let a = vit::action_constant(&mut g, &action.0)?;
    let out = vit::predict(
        &mut g,
        &mut b,
        &model.predictor_cfg,
        &model.encoder_cfg,
        PredictorInput {
            context: ctx,
            context_pos: &all,
            target_pos: &all,
            action: Some(a),
            extra: None,
        },
    )?;
    let p = out.predictions.expect("full grid has positions");
    Ok(g.value(p).clone())
}

/// Student encodes the clean image; the predictor applies `action`.
pub fn predict_into_bank(model: &Model, clean: &ImageTensor, action: &ActionVector) -> Result<Tensor<f32>> {
    let ctx = encode_one(&model.student, &model.encoder_cfg, clean)?;
    predict_full(model, &ctx, action)
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn distance(kind: Distance, pred: &Tensor<f32>, entry: &BankEntry) -> f64 {
    match kind {
        Distance::Pooled => euclid(&mean_pool(pred), &entry.pooled),
        Distance::PerToken => {
            let d = pred.shape()[1];
            pred.data()
                .chunks(d)
                .zip(entry.tokens.data().chunks(d))
                .map(|(a, b)| euclid(a, b))
                .sum()
        }
    }
}

/// 1-based rank of `truth` when sorting by distance, ties broken by index.
pub fn rank_of(distances: &[f64], truth: usize) -> usize {
    let dt = distances[truth];
    1 + distances
        .iter()
        .enumerate()
        .filter(|&(j, &d)| d < dt || (d == dt && j < truth))
        .count()
}

/// Indices of the `k` nearest entries, ascending distance then index.
pub fn retrieve_nn(distances: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn pooled_distances(pred: &[f32], bank: &[Vec<f32>]) -> Vec<f64> {
    bank.iter().map(|b| euclid(pred, b)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    pub mrr: f64,
    pub images: usize,
    pub bank_size: usize,
    /// Ranks per image, one per bank entry.
    pub ranks: Vec<Vec<usize>>,
}

/// Mean reciprocal rank over every (image, bank entry) pair.
pub fn mrr(model: &Model, images: &[ImageTensor], n: usize, preset: &AugPreset, seed: u64, kind: Distance) -> Result<MrrReport> {
    let strength = bank_jitter(preset);
    let per_image: Vec<Result<Vec<usize>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let bank = build_bank(img, n, &strength, &model.teacher, &model.encoder_cfg, sample_key(seed, 0xBA4C, i as u64), false)?;
            let ctx = encode_one(&model.student, &model.encoder_cfg, img)?;
            let mut ranks = Vec::with_capacity(n);
            for (t, entry) in bank.entries.iter().enumerate() {
                let pred = predict_full(model, &ctx, &entry.action)?;
                let d: Vec<f64> = bank.entries.iter().map(|e| distance(kind, &pred, e)).collect();
                ranks.push(rank_of(&d, t));
            }
            Ok(ranks)
        })
        .collect();
    let ranks = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MrrReport {
        mrr: mrr_from_ranks(&ranks),
        images: images.len(),
        bank_size: n,
        ranks,
    })
}

pub fn mrr_from_ranks(ranks: &[Vec<usize>]) -> f64 {
    let (mut acc, mut count) = (0.0, 0usize);
    for r in ranks.iter().flatten() {
        acc += 1.0 / *r as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// `(1/N) sum_i p(z_x, a_i)` over the given actions.
pub fn marginalize_invariant(model: &Model, context: &Tensor<f32>, actions: &[ActionVector]) -> Result<Tensor<f32>> {
    if actions.is_empty() {
        return Err(Error::Invalid("marginalisation needs at least one action".into()));
    }
    let preds: Vec<Tensor<f32>> = actions
        .par_iter()
        .map(|a| predict_full(model, context, a))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0f64; preds[0].numel()];
    for p in &preds {
        for (s, &v) in acc.iter_mut().zip(p.data()) {
            *s += v as f64;
        }
    }
    let n = actions.len() as f64;
    Ok(Tensor::new(
        preds[0].shape().to_vec(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )?)
}

/// Draws `n` actions the way bank entries are drawn, relative to the clean image.
pub fn sample_actions<R: Rng + ?Sized>(rng: &mut R, strength: &JitterStrength, n: usize) -> Vec<ActionVector> {
    let none = DestructiveParams::default();
    (0..n)
        .map(|_| encode_action(&JitterParams::IDENTITY, &none, &JitterParams::sample(rng, strength)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrial {
    pub image: usize,
    /// Bank index of the nearest neighbour of the invariant code (0 = clean).
    pub nearest: usize,
    pub top: Vec<usize>,
}

/// For each image: marginalise over `n_actions` sampled actions and look
/// the result up in a bank whose entry 0 is the clean image.
pub fn marginal_retrieval(
    model: &Model,
    images: &[ImageTensor],
    bank_size: usize,
    n_actions: usize,
    preset: &AugPreset,
    seed: u64,
) -> Result<Vec<RetrievalTrial>> {
    let strength = bank_jitter(preset);
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let bank = build_bank(img, bank_size, &strength, &model.teacher, &model.encoder_cfg, sample_key(seed, 0xBA4C, i as u64), true)?;
            let ctx = encode_one(&model.student, &model.encoder_cfg, img)?;
            let mut rng = rng_from_key(sample_key(seed, 0xAC7, i as u64));
            let actions = sample_actions(&mut rng, &strength, n_actions);
            let inv = marginalize_invariant(model, &ctx, &actions)?;
            let bank_pooled: Vec<Vec<f32>> = bank.entries.iter().map(|e| e.pooled.clone()).collect();
            let top = retrieve_nn(&pooled_distances(&mean_pool(&inv), &bank_pooled), 5);
            Ok(RetrievalTrial {
                image: i,
                nearest: top[0],
                top,
            })
        })
        .collect()
}

/// Cosine similarity between mean-pooled encodings of `views` augmented
/// views of each image, ordered image-major.
pub fn similarity_matrix(
    encoder: &ParamStore<f32>,
    cfg: &ViTConfig,
    images: &[ImageTensor],
    views: usize,
    preset: &AugPreset,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() || views == 0 {
        return Err(Error::Invalid("similarity matrix needs images and views".into()));
    }
    let geom = ViewGeometry {
        height: cfg.image_size,
        width: cfg.image_size,
        patch: cfg.patch,
    };
    let mut all = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for v in 0..views {
            let key = sample_key(seed, i as u64, v as u64);
            all.push(sample_view_pair(img, preset, geom, key).target);
        }
    }
    let refs: Vec<&ImageTensor> = all.iter().collect();
    let mut pooled = Vec::new();
    for chunk in refs.chunks(32) {
        for t in vit::encode_frozen(encoder, cfg, chunk)? {
            pooled.push(mean_pool(&t));
        }
    }
    Ok(cosine_matrix(&pooled))
}

pub fn cosine_matrix(vectors: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let n = vectors.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(&a, &b)| a as f64 * b as f64).sum();
            let s = if i == j { 1.0 } else { dot / (norms[i] * norms[j]) };
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceCell {
    pub preset: String,
    pub predictor: String,
    pub mrr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub cells: Vec<EquivarianceCell>,
    pub seed: u64,
    pub bank_size: usize,
}

impl EquivarianceReport {
    /// Rows are presets, columns predictors; missing runs read `absent`.
    pub fn to_csv(&self) -> String {
        let mut presets: Vec<&str> = Vec::new();
        let mut preds: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !presets.contains(&c.preset.as_str()) {
                presets.push(&c.preset);
            }
            if !preds.contains(&c.predictor.as_str()) {
                preds.push(&c.predictor);
            }
        }
        let mut out = String::from("preset");
        for p in &preds {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
        for pr in &presets {
            out.push_str(pr);
            for pd in &preds {
                let cell = self.cells.iter().find(|c| c.preset == *pr && c.predictor == *pd);
                match cell.and_then(|c| c.mrr) {
                    Some(v) => {
                        let _ = write!(out, ",{v:.4}");
                    }
                    None => out.push_str(",absent"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// MRR per (preset, predictor) cell. `None` models mark absent cells.
pub fn equivariance_grid(
    runs: &[(String, String, Option<Model>)],
    images: &[ImageTensor],
    bank_size: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    let mut cells = Vec::new();
    for (preset, predictor, model) in runs {
        let mrr = match model {
            Some(m) => {
                let p = AugPreset::named(preset)?;
                Some(mrr(m, images, bank_size, &p, seed, Distance::Pooled)?.mrr)
            }
            None => None,
        };
        cells.push(EquivarianceCell {
            preset: preset.clone(),
            predictor: predictor.clone(),
            mrr,
        });
    }
    Ok(EquivarianceReport {
        cells,
        seed,
        bank_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_rules() {
        assert_eq!(rank_of(&[0.0, 1.0, 2.0], 0), 1);
        assert_eq!(rank_of(&[1.0, 0.5], 0), 2);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 3);
        assert_eq!(retrieve_nn(&[0.3, 0.1, 0.3, 0.0], 4), vec![3, 1, 0, 2]);
    }

    #[test]
    fn cosine_diagonal_and_symmetry() {
        let m = cosine_matrix(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![-2.0, 0.5]]);
        for i in 0..3 {
            assert!((m[i][i] - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
    }

    #[test]
    fn grid_csv_marks_absent() {
        let r = EquivarianceReport {
            cells: vec![
                EquivarianceCell {
                    preset: "default".into(),
                    predictor: "shallow".into(),
                    mrr: Some(0.25),
                },
                EquivarianceCell {
                    preset: "default".into(),
                    predictor: "deep".into(),
                    mrr: None,
                },
            ],
            seed: 0,
            bank_size: 4,
        };
        assert_eq!(r.to_csv(), "preset,shallow,deep\ndefault,0.2500,absent\n");
    }
}
