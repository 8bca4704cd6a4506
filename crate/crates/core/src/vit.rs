//! Tiny ViT encoder and the action-conditioned predictor.
//!
//! Forward functions build onto a caller-owned [`Graph`] and read weights
//! through a [`Binder`], so the same code serves training (trainable leaves),
//! the teacher (constant leaves) and f64 gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use iwm_tensor::{Binder, Graph, ParamStore, Scalar, Tensor, Var};

use crate::augment::ACTION_DIM;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosEmbed {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_embed: PosEmbed,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch: 8,
            dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4,
            pos_embed: PosEmbed::Learned,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder depth and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    None,
    Sequence,
    Feature,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Sequence => "sequence",
            Conditioning::Feature => "feature",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Conditioning::None),
            "sequence" => Ok(Conditioning::Sequence),
            "feature" => Ok(Conditioning::Feature),
            _ => Err(Error::Config(format!("unknown conditioning `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub conditioning: Conditioning,
    pub action_dim: usize,
    /// Extra tokens in sequence mode.
    pub action_tokens: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::preset("shallow").expect("known preset")
    }
}

impl PredictorConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (depth, dim, heads) = match name {
            "shallow" => (3, 96, 3),
            "deep" => (6, 192, 3),
            _ => return Err(Error::Config(format!("unknown predictor preset `{name}`"))),
        };
        Ok(PredictorConfig {
            depth,
            dim,
            heads,
            mlp_ratio: 4,
            conditioning: Conditioning::Feature,
            action_dim: ACTION_DIM,
            action_tokens: ACTION_DIM,
        })
    }

    /// `IWM_{depth,dim}`.
    pub fn name(&self) -> String {
        format!("IWM_{{{},{}}}", self.depth, self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("predictor depth must be at least 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "predictor dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.conditioning == Conditioning::Sequence && self.action_tokens == 0 {
            return Err(Error::Config("sequence conditioning needs action tokens".into()));
        }
        Ok(())
    }

    pub fn uses_adapters(&self, enc_dim: usize) -> bool {
        self.dim != enc_dim
    }
}

// ---- initialisation ---------------------------------------------------------

fn block_param_shapes(prefix: &str, d: usize, ratio: usize) -> Vec<(String, Vec<usize>)> {
    let h = d * ratio;
    [
        ("ln1.g", vec![d]),
        ("ln1.b", vec![d]),
        ("attn.qkv.w", vec![d, 3 * d]),
        ("attn.qkv.b", vec![3 * d]),
        ("attn.proj.w", vec![d, d]),
        ("attn.proj.b", vec![d]),
        ("ln2.g", vec![d]),
        ("ln2.b", vec![d]),
        ("mlp.fc1.w", vec![d, h]),
        ("mlp.fc1.b", vec![h]),
        ("mlp.fc2.w", vec![h, d]),
        ("mlp.fc2.b", vec![d]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{prefix}{n}"), s))
    .collect()
}

pub fn encoder_param_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut out = vec![
        ("patch.w".to_string(), vec![cfg.patch_dim(), d]),
        ("patch.b".to_string(), vec![d]),
    ];
    if cfg.pos_embed == PosEmbed::Learned {
        out.push(("pos".to_string(), vec![cfg.num_patches(), d]));
    }
    for i in 0..cfg.depth {
        out.extend(block_param_shapes(&format!("blocks.{i}."), d, cfg.mlp_ratio));
    }
    out.push(("norm.g".to_string(), vec![d]));
    out.push(("norm.b".to_string(), vec![d]));
    out
}

pub fn predictor_param_shapes(p: &PredictorConfig, enc: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dp) = (enc.dim, p.dim);
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    if p.uses_adapters(d) {
        out.push(("in.w".into(), vec![d, dp]));
        out.push(("in.b".into(), vec![dp]));
    }
    out.push(("pos".into(), vec![enc.num_patches(), dp]));
    out.push(("mask_token".into(), vec![dp]));
    let cond_in = if p.conditioning == Conditioning::Feature {
        dp + p.action_dim
    } else {
        dp
    };
    out.push(("cond.fc1.w".into(), vec![cond_in, dp]));
    out.push(("cond.fc1.b".into(), vec![dp]));
    out.push(("cond.fc2.w".into(), vec![dp, dp]));
    out.push(("cond.fc2.b".into(), vec![dp]));
    out.push(("cond.fc3.w".into(), vec![dp, dp]));
    out.push(("cond.fc3.b".into(), vec![dp]));
    if p.conditioning == Conditioning::Sequence {
        out.push(("act.w".into(), vec![p.action_dim, p.action_tokens * dp]));
        out.push(("act.b".into(), vec![p.action_tokens, dp]));
    }
    for i in 0..p.depth {
        out.extend(block_param_shapes(&format!("blocks.{i}."), dp, p.mlp_ratio));
    }
    out.push(("norm.g".into(), vec![dp]));
    out.push(("norm.b".into(), vec![dp]));
    if p.uses_adapters(d) {
        out.push(("out.w".into(), vec![dp, d]));
        out.push(("out.b".into(), vec![d]));
    }
    out
}

pub fn param_count(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Norm gains start at one, other 1-D parameters at zero, matrices and
/// embeddings from a truncated normal.
pub fn init_store<T: Scalar, R: Rng + ?Sized>(shapes: &[(String, Vec<usize>)], rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = if name.ends_with(".g") {
            Tensor::ones(shape)
        } else if shape.len() == 1 && name != "mask_token" {
            Tensor::zeros(shape)
        } else {
            Tensor::trunc_normal(shape, INIT_STD, rng)
        };
        store.insert(name.clone(), t);
    }
    store
}

pub fn init_encoder<T: Scalar, R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> ParamStore<T> {
    init_store(&encoder_param_shapes(cfg), rng)
}

pub fn init_predictor<T: Scalar, R: Rng + ?Sized>(p: &PredictorConfig, enc: &ViTConfig, rng: &mut R) -> ParamStore<T> {
    init_store(&predictor_param_shapes(p, enc), rng)
}

// ---- tokenisation -----------------------------------------------------------

/// Flattened `P x P` patches in grid order, each laid out `(c, py, px)`.
pub fn patchify<T: Scalar>(img: &ImageTensor, patch: usize, positions: &[usize]) -> Result<Tensor<T>> {
    if img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::Invalid(format!(
            "{}x{} image not divisible by patch {patch}",
            img.height(),
            img.width()
        )));
    }
    let gw = img.width() / patch;
    let pd = CHANNELS * patch * patch;
    let mut data = Vec::with_capacity(positions.len() * pd);
    for &i in positions {
        let (gy, gx) = (i / gw, i % gw);
        for c in 0..CHANNELS {
            for py in 0..patch {
                for px in 0..patch {
                    data.push(T::lit(img.get(c, gy * patch + py, gx * patch + px) as f64));
                }
            }
        }
    }
    Ok(Tensor::new(vec![positions.len(), pd], data)?)
}

/// Fixed 2-D sine-cosine table `[grid_h * grid_w, dim]`.
pub fn sincos_table<T: Scalar>(grid_h: usize, grid_w: usize, dim: usize) -> Tensor<T> {
    let quarter = (dim / 4).max(1);
    Tensor::from_fn(&[grid_h * grid_w, dim], |flat| {
        let (cell, j) = (flat / dim, flat % dim);
        let (y, x) = ((cell / grid_w) as f64, (cell % grid_w) as f64);
        let half = dim / 2;
        let (coord, k) = if j < half { (y, j) } else { (x, j - half) };
        let band = (k % quarter) as f64;
        let omega = 1.0 / 10000f64.powf(band / quarter as f64);
        if k < quarter {
            T::lit((coord * omega).sin())
        } else {
            T::lit((coord * omega).cos())
        }
    })
}

// ---- building blocks --------------------------------------------------------

/// `x @ {prefix}.w + {prefix}.b` over the last axis.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(g, &format!("{prefix}.w"))?;
    let b = p.get(g, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

pub fn layer_norm_affine<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis, eps)?;
    let gain = p.get(g, &format!("{prefix}.g"))?;
    let bias = p.get(g, &format!("{prefix}.b"))?;
    let y = g.mul(n, gain)?;
    Ok(g.add(y, bias)?)
}

/// Splits `[..., N, d]` into `[..., heads, N, d / heads]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let nd = s.len();
    let mut shape = s[..nd - 1].to_vec();
    shape.extend([heads, s[nd - 1] / heads]);
    let r = g.reshape(x, &shape)?;
    Ok(g.transpose(r, nd - 2, nd - 1)?)
}

pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let nd = s.len();
    let t = g.transpose(x, nd - 3, nd - 2)?;
    let mut shape = s[..nd - 3].to_vec();
    shape.extend([s[nd - 2], s[nd - 3] * s[nd - 1]]);
    Ok(g.reshape(t, &shape)?)
}

/// Scaled dot-product attention over `[..., h, N, dh]` inputs. Returns the
/// output and the attention weights `[..., h, Nq, Nk]`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let nd = g.shape(k).len();
    let dh = g.shape(q)[nd - 1];
    let kt = g.transpose(k, nd - 2, nd - 1)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = g.softmax(scores, nd - 1)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Pre-norm transformer block on `[..., N, d]`.
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
    attn_sink: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = *g.shape(x).last().expect("token axis");
    let nd = g.shape(x).len();
    let h = layer_norm_affine(g, p, &format!("{prefix}ln1"), x, eps)?;
    let qkv = linear(g, p, &format!("{prefix}attn.qkv"), h)?;
    let q = g.slice(qkv, nd - 1, 0, d)?;
    let k = g.slice(qkv, nd - 1, d, 2 * d)?;
    let v = g.slice(qkv, nd - 1, 2 * d, 3 * d)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let (a, probs) = attention(g, q, k, v)?;
    if let Some(sink) = attn_sink {
        sink.push(probs);
    }
    let a = merge_heads(g, a)?;
    let a = linear(g, p, &format!("{prefix}attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm_affine(g, p, &format!("{prefix}ln2"), x, eps)?;
    let h = linear(g, p, &format!("{prefix}mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}mlp.fc2"), h)?;
    Ok(g.add(x, h)?)
}

// ---- encoder ----------------------------------------------------------------

/// Projects patches `[..., N, patch_dim]` taken at grid `positions` and adds
/// positional embeddings.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &ViTConfig,
    patches: Tensor<T>,
    positions: &[usize],
) -> Result<Var> {
    let x = g.constant(patches)?;
    let x = linear(g, p, "patch", x)?;
    let pos = match cfg.pos_embed {
        PosEmbed::Learned => p.get(g, "pos")?,
        PosEmbed::Sinusoidal => {
            let (gh, gw) = cfg.grid();
            g.constant(sincos_table(gh, gw, cfg.dim))?
        }
    };
    let pos = g.gather_rows(pos, positions)?;
    Ok(g.add(x, pos)?)
}

/// Transformer stack plus final norm over embedded tokens.
pub fn encode_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &ViTConfig,
    tokens: Var,
    mut attn_sink: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = block(
            g,
            p,
            &format!("blocks.{i}."),
            x,
            cfg.heads,
            cfg.ln_eps,
            attn_sink.as_deref_mut(),
        )?;
    }
    layer_norm_affine(g, p, "norm", x, cfg.ln_eps)
}

/// Encodes the patches of `img` at `positions` (the kept set). Returns
/// `[positions.len(), d]`.
pub fn encode_image<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &ViTConfig,
    img: &ImageTensor,
    positions: &[usize],
) -> Result<Var> {
    let patches = patchify(img, cfg.patch, positions)?;
    let x = embed_patches(g, p, cfg, patches, positions)?;
    encode_tokens(g, p, cfg, x, None)
}

/// Full-grid encoding of several images at once: `[B, G, d]`.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &ViTConfig,
    imgs: &[&ImageTensor],
) -> Result<Var> {
    let positions: Vec<usize> = (0..cfg.num_patches()).collect();
    let mut data = Vec::new();
    for img in imgs {
        data.extend(patchify::<T>(img, cfg.patch, &positions)?.into_data());
    }
    let patches = Tensor::new(vec![imgs.len(), positions.len(), cfg.patch_dim()], data)?;
    let x = embed_patches(g, p, cfg, patches, &positions)?;
    encode_tokens(g, p, cfg, x, None)
}

/// Plain-value full-grid encoding with frozen weights, `[G, d]` per image.
pub fn encode_frozen(store: &ParamStore<f32>, cfg: &ViTConfig, imgs: &[&ImageTensor]) -> Result<Vec<Tensor<f32>>> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let out = encode_batch(&mut g, &mut b, cfg, imgs)?;
    let v = g.value(out);
    let (n, d) = (cfg.num_patches(), cfg.dim);
    Ok((0..imgs.len())
        .map(|i| Tensor::new(vec![n, d], v.data()[i * n * d..(i + 1) * n * d].to_vec()).expect("slice"))
        .collect())
}

// ---- predictor --------------------------------------------------------------

/// What the predictor sees for one sample.
pub struct PredictorInput<'a> {
    /// Encoder output rows `[Nc, d]`.
    pub context: Var,
    pub context_pos: &'a [usize],
    /// Grid positions to predict; one conditioned mask token each.
    pub target_pos: &'a [usize],
    /// `[1, k]`; read only in feature and sequence modes.
    pub action: Option<Var>,
    /// Additional learned tokens `[E, dp]` appended after everything else
    /// (task tokens, aggregate queries).
    pub extra: Option<Var>,
}

pub struct PredictorOutput {
    /// `[Nt, d]`, aligned with `target_pos`.
    pub predictions: Option<Var>,
    /// `[E, d]` outputs at the extra tokens.
    pub extra: Option<Var>,
    /// Total sequence length seen by the transformer.
    pub seq_len: usize,
}

fn action_or_zero<T: Scalar>(g: &mut Graph<T>, a: Option<Var>, k: usize) -> Result<Var> {
    match a {
        Some(v) => {
            if g.shape(v) != [1, k] {
                return Err(Error::Invalid(format!("action shape {:?}, expected [1, {k}]", g.shape(v))));
            }
            Ok(v)
        }
        None => Ok(g.constant(Tensor::zeros(&[1, k]))?),
    }
}

/// Conditioned mask tokens `[Nt, dp]`: learned mask token plus position,
/// concatenated with the action in feature mode, through a 3-layer ReLU MLP.
pub fn build_mask_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &PredictorConfig,
    target_pos: &[usize],
    action: Option<Var>,
) -> Result<Var> {
    let token = p.get(g, "mask_token")?;
    let pos = p.get(g, "pos")?;
    let pos = g.gather_rows(pos, target_pos)?;
    let x = g.add(pos, token)?;
    condition_tokens(g, p, cfg, x, action)
}

/// The conditioning MLP applied to query tokens `[Nt, dp]`; in feature mode
/// the action is concatenated to every token first.
pub fn condition_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &PredictorConfig,
    mut x: Var,
    action: Option<Var>,
) -> Result<Var> {
    let nt = g.shape(x)[0];
    if cfg.conditioning == Conditioning::Feature {
        let a = action_or_zero(g, action, cfg.action_dim)?;
        let a = g.broadcast_to(a, &[nt, cfg.action_dim])?;
        x = g.concat(&[x, a], 1)?;
    }
    let h = linear(g, p, "cond.fc1", x)?;
    let h = g.relu(h)?;
    let h = linear(g, p, "cond.fc2", h)?;
    let h = g.relu(h)?;
    linear(g, p, "cond.fc3", h)
}

/// `n_a` tokens, token `j = W_j a + b_j`.
pub fn append_action_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &PredictorConfig,
    action: Option<Var>,
) -> Result<Var> {
    let a = action_or_zero(g, action, cfg.action_dim)?;
    let w = p.get(g, "act.w")?;
    let t = g.matmul(a, w)?;
    let t = g.reshape(t, &[cfg.action_tokens, cfg.dim])?;
    let b = p.get(g, "act.b")?;
    Ok(g.add(t, b)?)
}

pub fn predict<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &PredictorConfig,
    enc: &ViTConfig,
    input: PredictorInput<'_>,
) -> Result<PredictorOutput> {
    let adapters = cfg.uses_adapters(enc.dim);
    let mut ctx = input.context;
    if adapters {
        ctx = linear(g, p, "in", ctx)?;
    }
    let pos = p.get(g, "pos")?;
    let cpos = g.gather_rows(pos, input.context_pos)?;
    let ctx = g.add(ctx, cpos)?;
    let nc = input.context_pos.len();
    let nt = input.target_pos.len();
    let mut parts = vec![ctx];
    if nt > 0 {
        parts.push(build_mask_tokens(g, p, cfg, input.target_pos, input.action)?);
    }
    let mut n_action = 0;
    if cfg.conditioning == Conditioning::Sequence {
        parts.push(append_action_tokens(g, p, cfg, input.action)?);
        n_action = cfg.action_tokens;
    }
    let n_extra = match input.extra {
        Some(e) => {
            parts.push(e);
            g.shape(e)[0]
        }
        None => 0,
    };
    let mut x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let seq_len = g.shape(x)[0];
    for i in 0..cfg.depth {
        x = block(g, p, &format!("blocks.{i}."), x, cfg.heads, enc.ln_eps, None)?;
    }
    let x = layer_norm_affine(g, p, "norm", x, enc.ln_eps)?;
    let mut finish = |g: &mut Graph<T>, start: usize, len: usize| -> Result<Option<Var>> {
        if len == 0 {
            return Ok(None);
        }
        let mut y = g.slice(x, 0, start, start + len)?;
        if adapters {
            y = linear(g, p, "out", y)?;
        }
        Ok(Some(y))
    };
    let predictions = finish(g, nc, nt)?;
    let extra = finish(g, nc + nt + n_action, n_extra)?;
    Ok(PredictorOutput {
        predictions,
        extra,
        seq_len,
    })
}

/// Action as a `[1, k]` constant.
pub fn action_constant<T: Scalar>(g: &mut Graph<T>, action: &[f64]) -> Result<Var> {
    let t = Tensor::new(vec![1, action.len()], action.iter().map(|&v| T::lit(v)).collect())?;
    Ok(g.constant(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ViTConfig, PredictorConfig) {
        let enc = ViTConfig {
            image_size: 16,
            patch: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            ..Default::default()
        };
        let pred = PredictorConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            ..PredictorConfig::default()
        };
        (enc, pred)
    }

    #[test]
    fn param_count_matches_store() {
        let (enc, mut pred) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [Conditioning::None, Conditioning::Sequence, Conditioning::Feature] {
            pred.conditioning = c;
            let s: ParamStore<f32> = init_predictor(&pred, &enc, &mut rng);
            assert_eq!(s.num_scalars(), param_count(&predictor_param_shapes(&pred, &enc)));
        }
        let e: ParamStore<f32> = init_encoder(&enc, &mut rng);
        assert_eq!(e.num_scalars(), param_count(&encoder_param_shapes(&enc)));
    }

    #[test]
    fn naming() {
        assert_eq!(PredictorConfig::preset("deep").unwrap().name(), "IWM_{6,192}");
    }

    #[test]
    fn zero_image_tokens_equal_positions() {
        let (enc, _) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store: ParamStore<f64> = init_encoder(&enc, &mut rng);
        let img = ImageTensor::filled(16, 16, [0.0; 3]);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let pos = [0usize, 5, 7];
        let patches = patchify(&img, enc.patch, &pos).unwrap();
        let x = embed_patches(&mut g, &mut b, &enc, patches, &pos).unwrap();
        let table = store.get("pos").unwrap();
        for (r, &i) in pos.iter().enumerate() {
            assert_eq!(g.value(x).row(r), table.row(i));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (enc, _) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store: ParamStore<f64> = init_encoder(&enc, &mut rng);
        let img = ImageTensor::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f32 / 6.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let pos: Vec<usize> = (0..16).collect();
        let patches = patchify(&img, enc.patch, &pos).unwrap();
        let x = embed_patches(&mut g, &mut b, &enc, patches, &pos).unwrap();
        let mut sink = Vec::new();
        let y = encode_tokens(&mut g, &mut b, &enc, x, Some(&mut sink)).unwrap();
        assert_eq!(g.shape(y), [16, 16]);
        assert_eq!(sink.len(), 2);
        for a in sink {
            for row in g.value(a).data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sincos_rows_distinct() {
        let t: Tensor<f64> = sincos_table(4, 4, 16);
        for i in 0..16 {
            for j in 0..i {
                assert!(t.row(i) != t.row(j));
            }
        }
    }
}
