//! Tri-modal encoders, text/image fusion and the cross-attention forecaster.
//!
//! Frozen stand-ins for the pretrained language and vision backbones are
//! registered as non-trainable parameters, so their outputs can be computed
//! once per window and reused across training steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::image::ImageStack;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoderKind {
    Gru,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBackbone {
    /// Frozen causal transformer block.
    Causal,
    /// Average of frozen token embeddings.
    BagOfEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub window: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Width of the frozen text backbone.
    pub text_dim: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    /// Width of the frozen per-frame image embedding.
    pub frame_dim: usize,
    /// Side of the pixel blocks averaged by the frozen image projection.
    pub frame_patch: usize,
    pub image_size: usize,
    pub group_size: usize,
    pub gru_hidden: usize,
    pub dropout: f64,
    pub horizons: Vec<usize>,
    pub image_encoder: ImageEncoderKind,
    pub text_backbone: TextBackbone,
    pub use_text: bool,
    pub use_image: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 1,
            window: 480,
            patch_len: 16,
            patch_stride: 8,
            embed_dim: 128,
            heads: 4,
            ff_dim: 256,
            text_dim: 128,
            max_tokens: 512,
            vocab_size: 256,
            frame_dim: 512,
            frame_patch: 16,
            image_size: 224,
            group_size: 8,
            gru_hidden: 128,
            dropout: 0.1,
            horizons: vec![24, 96, 192, 336],
            image_encoder: ImageEncoderKind::Gru,
            text_backbone: TextBackbone::Causal,
            use_text: true,
            use_image: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads)));
        }
        if self.text_dim % self.heads != 0 {
            return Err(Error::Config(format!("text_dim {} not divisible by heads {}", self.text_dim, self.heads)));
        }
        if self.patch_len == 0 || self.patch_stride == 0 || self.patch_len > self.window {
            return Err(Error::Config("patch_len must lie in 1..=window and stride must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("at least one positive horizon required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let positive = [
            self.n_channels,
            self.ff_dim,
            self.text_dim,
            self.max_tokens,
            self.vocab_size,
            self.frame_dim,
            self.frame_patch,
            self.image_size,
            self.group_size,
            self.gru_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        crate::data::patch_count(self.window, self.patch_len, self.patch_stride)
    }

    /// Cells per side of the frozen image projection's averaging grid.
    pub fn frame_grid(&self) -> usize {
        (self.image_size / self.frame_patch).max(1)
    }
}

/// Frozen features of one window, computed once and reused.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    /// Normalized patch tokens, `P × (patch_len·d)`.
    pub tokens: Tensor,
    pub norm: NormStats,
    /// `h × d` in the series' scale.
    pub target: Tensor,
    pub start: usize,
    /// Frozen text backbone output.
    pub text: Tensor,
    pub text_negative: Option<Tensor>,
    /// Frozen per-frame embeddings, `N × frame_dim`.
    pub image: Tensor,
    pub image_negative: Option<Tensor>,
}

/// Encoder outputs for one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowOutput {
    /// `h × d`, de-normalized.
    pub pred: Var,
    /// `P × D`
    pub h_x: Var,
    /// `1 × D`
    pub h_t: Var,
    /// `N × D`
    pub h_i: Var,
    /// `(1 + N) × D`
    pub h_f: Var,
    /// Decoder state, `P × D`.
    pub decoded: Var,
    pub text_negative: Option<Var>,
    pub image_negative: Option<Var>,
}

/// Per-window pooled rows stacked over a batch.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub x: Var,
    pub t: Var,
    pub i: Var,
    pub f: Var,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `(B·h) × d`
    pub pred: Var,
    pub target: Var,
    pub pooled: Pooled,
    pub text_negatives: Option<Var>,
    pub image_negatives: Option<Var>,
}

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

pub struct PrismNet {
    pub config: ModelConfig,
    pub store: ParamStore,
}

struct AttnNames {
    wq: String,
    wk: String,
    wv: String,
    wo: String,
}

impl AttnNames {
    fn new(prefix: &str) -> Self {
        Self {
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
            wo: format!("{prefix}.wo"),
        }
    }
}

impl PrismNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let (d, dt, p) = (c.embed_dim, c.text_dim, c.num_patches());
        let mut add = |store: &mut ParamStore, name: &str, shape: &[usize], trainable: bool| -> Result<()> {
            let fan_in = if shape.len() == 2 { shape[0] } else { shape[shape.len() - 1] };
            let t = Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);
            store.register(name, t, trainable)?;
            Ok(())
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize, trainable: bool| -> Result<()> {
            store.register(name, Tensor::zeros(&[1, n]), trainable)?;
            Ok(())
        };

        // series encoder
        add(&mut store, "series.embed.w", &[c.patch_len * c.n_channels, d], true)?;
        zeros(&mut store, "series.embed.b", d, true)?;
        add(&mut store, "series.pos", &[p, d], true)?;
        for w in ["wq", "wk", "wv", "wo"] {
            add(&mut store, &format!("series.attn.{w}"), &[d, d], true)?;
        }
        add(&mut store, "series.fcl.w", &[d, d], true)?;
        zeros(&mut store, "series.fcl.b", d, true)?;

        // frozen text backbone
        add(&mut store, "text.frozen.tok", &[c.vocab_size, dt], false)?;
        add(&mut store, "text.frozen.pos", &[c.max_tokens, dt], false)?;
        for w in ["wq", "wk", "wv", "wo"] {
            add(&mut store, &format!("text.frozen.attn.{w}"), &[dt, dt], false)?;
        }
        add(&mut store, "text.frozen.ff1.w", &[dt, 2 * dt], false)?;
        zeros(&mut store, "text.frozen.ff1.b", 2 * dt, false)?;
        add(&mut store, "text.frozen.ff2.w", &[2 * dt, dt], false)?;
        zeros(&mut store, "text.frozen.ff2.b", dt, false)?;

        // trainable prompt encoder
        add(&mut store, "text.prompt.in.w", &[dt, d], true)?;
        zeros(&mut store, "text.prompt.in.b", d, true)?;
        for w in ["wq", "wk", "wv", "wo"] {
            add(&mut store, &format!("text.prompt.attn.{w}"), &[d, d], true)?;
        }
        add(&mut store, "text.prompt.ff1.w", &[d, c.ff_dim], true)?;
        zeros(&mut store, "text.prompt.ff1.b", c.ff_dim, true)?;
        add(&mut store, "text.prompt.ff2.w", &[c.ff_dim, d], true)?;
        zeros(&mut store, "text.prompt.ff2.b", d, true)?;

        // frozen per-frame projection
        let g = c.frame_grid();
        add(&mut store, "image.frozen.proj", &[g * g, c.frame_dim], false)?;

        let hdim = c.gru_hidden;
        match c.image_encoder {
            ImageEncoderKind::Gru => {
                add(&mut store, "image.gru.w", &[c.frame_dim, 3 * hdim], true)?;
                for gate in ["uu", "ur", "un"] {
                    add(&mut store, &format!("image.gru.{gate}"), &[hdim, hdim], true)?;
                }
                zeros(&mut store, "image.gru.b", 3 * hdim, true)?;
                add(&mut store, "image.proj.w", &[hdim, d], true)?;
                zeros(&mut store, "image.proj.b", d, true)?;
            }
            ImageEncoderKind::Transformer => {
                add(&mut store, "image.tf.in.w", &[c.frame_dim, d], true)?;
                zeros(&mut store, "image.tf.in.b", d, true)?;
                add(&mut store, "image.tf.pos", &[c.group_size, d], true)?;
                for w in ["wq", "wk", "wv", "wo"] {
                    add(&mut store, &format!("image.tf.attn.{w}"), &[d, d], true)?;
                }
                add(&mut store, "image.tf.ff1.w", &[d, c.ff_dim], true)?;
                zeros(&mut store, "image.tf.ff1.b", c.ff_dim, true)?;
                add(&mut store, "image.tf.ff2.w", &[c.ff_dim, d], true)?;
                zeros(&mut store, "image.tf.ff2.b", d, true)?;
            }
        }

        add(&mut store, "fuse.text.w", &[d, d], true)?;
        add(&mut store, "fuse.image.w", &[d, d], true)?;

        for w in ["wq", "wk", "wv", "wo"] {
            add(&mut store, &format!("forecast.attn.{w}"), &[d, d], true)?;
        }
        for &h in &c.horizons {
            add(&mut store, &format!("forecast.head{h}.w"), &[p * d, h * c.n_channels], true)?;
            zeros(&mut store, &format!("forecast.head{h}.b"), h * c.n_channels, true)?;
        }
        Ok(Self { config, store })
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.store.id(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        Ok(tape.param(&self.store, id))
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = self.p(tape, w)?;
        let y = tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.p(tape, b)?;
                Ok(tape.add_bias(y, bv)?)
            }
            None => Ok(y),
        }
    }

    /// Multi-head attention without projection biases. Returns the output and
    /// the per-head attention matrices.
    fn attention(
        &self,
        tape: &mut Tape,
        query: Var,
        context: Var,
        names: &AttnNames,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let heads = self.config.heads;
        let q = self.linear(tape, query, &names.wq, None)?;
        let k = self.linear(tape, context, &names.wk, None)?;
        let v = self.linear(tape, context, &names.wv, None)?;
        let width = tape.value(q).cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice(q, 1, hd * dh, dh)?, tape.slice(k, 1, hd * dh, dh)?, tape.slice(v, 1, hd * dh, dh)?)
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores, 1)?;
            weights.push(attn);
            outs.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        Ok((self.linear(tape, merged, &names.wo, None)?, weights))
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.ff1.w"), Some(&format!("{prefix}.ff1.b")))?;
        let h = tape.relu(h);
        self.linear(tape, h, &format!("{prefix}.ff2.w"), Some(&format!("{prefix}.ff2.b")))
    }

    /// Pre-norm transformer block: attention and feed-forward, each residual.
    fn block(&self, tape: &mut Tape, x: Var, prefix: &str, mask: Option<Var>, dropout: f64) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let (a, _) = self.attention(tape, n, n, &AttnNames::new(&format!("{prefix}.attn")), mask)?;
        let a = tape.dropout(a, dropout);
        let x = tape.add(x, a)?;
        let n = tape.layer_norm(x, LN_EPS);
        let f = self.feed_forward(tape, n, prefix)?;
        let f = tape.dropout(f, dropout);
        Ok(tape.add(x, f)?)
    }

    /// Series embedding `h_X` (`P × D`) and the self-attention matrices.
    pub fn encode_series_detailed(&self, tape: &mut Tape, tokens: &Tensor) -> Result<(Var, Vec<Var>)> {
        let x = tape.constant(tokens.clone());
        let e = self.linear(tape, x, "series.embed.w", Some("series.embed.b"))?;
        let pos = self.p(tape, "series.pos")?;
        let e = tape.add(e, pos)?;
        let (a, weights) = self.attention(tape, e, e, &AttnNames::new("series.attn"), None)?;
        let a = tape.dropout(a, self.config.dropout);
        let mixed = tape.add(a, e)?;
        let h = self.linear(tape, mixed, "series.fcl.w", Some("series.fcl.b"))?;
        Ok((h, weights))
    }

    pub fn encode_series(&self, tape: &mut Tape, tokens: &Tensor) -> Result<Var> {
        Ok(self.encode_series_detailed(tape, tokens)?.0)
    }

    fn causal_mask(n: usize) -> Tensor {
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                m.data_mut()[i * n + j] = MASKED;
            }
        }
        m
    }

    /// Keeps the last `max_tokens` ids.
    pub fn truncate_tokens<'a>(&self, tokens: &'a [usize]) -> &'a [usize] {
        let max = self.config.max_tokens;
        if tokens.len() > max {
            log::warn!("text of {} tokens truncated to the last {max}", tokens.len());
            &tokens[tokens.len() - max..]
        } else {
            tokens
        }
    }

    /// Frozen backbone on the tape; all inputs are constants.
    fn text_backbone_var(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let tokens = self.truncate_tokens(tokens);
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = self.p(tape, "text.frozen.tok")?;
        let emb = tape.embedding(table, tokens)?;
        match self.config.text_backbone {
            TextBackbone::BagOfEmbeddings => Ok(tape.mean_axis(emb, 0)?),
            TextBackbone::Causal => {
                let pos = self.p(tape, "text.frozen.pos")?;
                let pos = tape.slice(pos, 0, 0, tokens.len())?;
                let x = tape.add(emb, pos)?;
                let mask = tape.constant(Self::causal_mask(tokens.len()));
                self.block(tape, x, "text.frozen", Some(mask), 0.0)
            }
        }
    }

    /// Output of the frozen text backbone, `S × text_dim` (or `1 × text_dim`
    /// for the bag-of-embeddings backbone).
    pub fn text_features(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.text_backbone_var(&mut tape, tokens)?;
        Ok(tape.value(v).clone())
    }

    /// Trainable prompt encoder over frozen features, mean-pooled to `1 × D`.
    pub fn encode_text_features(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let x = tape.constant(features.clone());
        let y = self.linear(tape, x, "text.prompt.in.w", Some("text.prompt.in.b"))?;
        let y = self.block(tape, y, "text.prompt", None, self.config.dropout)?;
        Ok(tape.mean_axis(y, 0)?)
    }

    pub fn encode_text(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let f = self.text_features(tokens)?;
        self.encode_text_features(tape, &f)
    }

    /// Frozen per-frame embedding `z_t`: block means of the pixels scaled to
    /// `[-0.5, 0.5]`, linearly projected; `N × frame_dim`.
    pub fn image_features(&self, stack: &ImageStack) -> Result<Tensor> {
        let g = self.config.frame_grid();
        let (hgt, wid) = (stack.height, stack.width);
        if hgt < g || wid < g {
            return Err(Error::Contract(format!("frame {hgt}×{wid} smaller than the {g}×{g} grid")));
        }
        let mut means = Vec::with_capacity(stack.n * g * g);
        for f in 0..stack.n {
            let px = stack.frame(f);
            for gi in 0..g {
                for gj in 0..g {
                    let (r0, r1) = (gi * hgt / g, (gi + 1) * hgt / g);
                    let (c0, c1) = (gj * wid / g, (gj + 1) * wid / g);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += px[r * wid + c0..r * wid + c1].iter().map(|&p| f64::from(p)).sum::<f64>();
                    }
                    means.push(acc / ((r1 - r0) * (c1 - c0)) as f64 / 255.0 - 0.5);
                }
            }
        }
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![stack.n, g * g], means)?);
        let z = self.linear(&mut tape, m, "image.frozen.proj", None)?;
        Ok(tape.value(z).clone())
    }

    /// GRU hidden states `h_1..h_N` over frame embeddings, each `1 × hidden`.
    pub fn gru_states(&self, tape: &mut Tape, z: Var) -> Result<Vec<Var>> {
        let hdim = self.config.gru_hidden;
        let n = tape.value(z).rows();
        let xw = self.linear(tape, z, "image.gru.w", Some("image.gru.b"))?;
        let uu = self.p(tape, "image.gru.uu")?;
        let ur = self.p(tape, "image.gru.ur")?;
        let un = self.p(tape, "image.gru.un")?;
        let mut h = tape.constant(Tensor::zeros(&[1, hdim]));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let row = tape.slice(xw, 0, t, 1)?;
            let (xu, xr, xn) = (tape.slice(row, 1, 0, hdim)?, tape.slice(row, 1, hdim, hdim)?, tape.slice(row, 1, 2 * hdim, hdim)?);
            let hu = tape.matmul(h, uu)?;
            let u = tape.add(xu, hu)?;
            let u = tape.sigmoid(u);
            let hr = tape.matmul(h, ur)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h)?;
            let rhu = tape.matmul(rh, un)?;
            let cand = tape.add(xn, rhu)?;
            let cand = tape.tanh(cand);
            // h_t = h_{t-1} + u ⊙ (n − h_{t-1})
            let delta = tape.sub(cand, h)?;
            let step = tape.mul(u, delta)?;
            h = tape.add(h, step)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Image embedding `h_I` (`N × D`) from frozen frame embeddings.
    pub fn encode_image_features(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let z = tape.constant(features.clone());
        match self.config.image_encoder {
            ImageEncoderKind::Gru => {
                let states = self.gru_states(tape, z)?;
                let stacked = tape.concat(&states, 0)?;
                self.linear(tape, stacked, "image.proj.w", Some("image.proj.b"))
            }
            ImageEncoderKind::Transformer => {
                let n = features.rows();
                if n > self.config.group_size {
                    return Err(Error::Contract(format!("{n} frames exceed group size {}", self.config.group_size)));
                }
                let x = self.linear(tape, z, "image.tf.in.w", Some("image.tf.in.b"))?;
                let pos = self.p(tape, "image.tf.pos")?;
                let pos = tape.slice(pos, 0, 0, n)?;
                let x = tape.add(x, pos)?;
                self.block(tape, x, "image.tf", None, self.config.dropout)
            }
        }
    }

    pub fn encode_images(&self, tape: &mut Tape, stack: &ImageStack) -> Result<Var> {
        let f = self.image_features(stack)?;
        self.encode_image_features(tape, &f)
    }

    /// `[h_T W_t ; h_I W_i]`, `(1 + N) × D`. Disabled modalities contribute
    /// zero rows.
    pub fn fuse(&self, tape: &mut Tape, h_t: Var, h_i: Var) -> Result<Var> {
        let t = self.linear(tape, h_t, "fuse.text.w", None)?;
        let i = self.linear(tape, h_i, "fuse.image.w", None)?;
        Ok(tape.concat(&[t, i], 0)?)
    }

    /// Cross-attention of series queries over fused keys/values, plus the
    /// residual; returns the decoder state and attention matrices.
    pub fn decode(&self, tape: &mut Tape, h_x: Var, h_f: Var) -> Result<(Var, Vec<Var>)> {
        let (a, weights) = self.attention(tape, h_x, h_f, &AttnNames::new("forecast.attn"), None)?;
        let a = tape.dropout(a, self.config.dropout);
        Ok((tape.add(h_x, a)?, weights))
    }

    /// Linear head on the flattened decoder state, de-normalized; `h × d`.
    pub fn head(&self, tape: &mut Tape, decoded: Var, h: usize, norm: &NormStats) -> Result<Var> {
        if !self.config.horizons.contains(&h) {
            return Err(Error::Config(format!("horizon {h} not in configured set {:?}", self.config.horizons)));
        }
        let d = self.config.n_channels;
        let len = tape.value(decoded).len();
        let flat = tape.reshape(decoded, &[1, len])?;
        let y = self.linear(tape, flat, &format!("forecast.head{h}.w"), Some(&format!("forecast.head{h}.b")))?;
        let y = tape.reshape(y, &[h, d])?;
        let mut scale = Vec::with_capacity(h * d);
        let mut shift = Vec::with_capacity(h * d);
        for _ in 0..h {
            for c in 0..d {
                scale.push(norm.scale(c));
                shift.push(norm.mean[c]);
            }
        }
        let scale = tape.constant(Tensor::new(vec![h, d], scale)?);
        let shift = tape.constant(Tensor::new(vec![h, d], shift)?);
        let y = tape.mul(y, scale)?;
        Ok(tape.add(y, shift)?)
    }

    pub fn forecast(&self, tape: &mut Tape, h_x: Var, h_f: Var, h: usize, norm: &NormStats) -> Result<Var> {
        let (decoded, _) = self.decode(tape, h_x, h_f)?;
        self.head(tape, decoded, h, norm)
    }

    fn text_rows(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        if self.config.use_text {
            self.encode_text_features(tape, features)
        } else {
            Ok(tape.constant(Tensor::zeros(&[1, self.config.embed_dim])))
        }
    }

    fn image_rows(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        if self.config.use_image {
            self.encode_image_features(tape, features)
        } else {
            Ok(tape.constant(Tensor::zeros(&[features.rows(), self.config.embed_dim])))
        }
    }

    /// Full forward pass for one window. Negatives are embedded when
    /// `negatives` is set and the window carries them.
    pub fn forward_window(&self, tape: &mut Tape, w: &WindowFeatures, h: usize, negatives: bool) -> Result<WindowOutput> {
        let h_x = self.encode_series(tape, &w.tokens)?;
        let h_t = self.text_rows(tape, &w.text)?;
        let h_i = self.image_rows(tape, &w.image)?;
        let h_f = self.fuse(tape, h_t, h_i)?;
        let (decoded, _) = self.decode(tape, h_x, h_f)?;
        let pred = self.head(tape, decoded, h, &w.norm)?;
        let text_negative = match (&w.text_negative, negatives && self.config.use_text) {
            (Some(f), true) => Some(self.encode_text_features(tape, f)?),
            _ => None,
        };
        let image_negative = match (&w.image_negative, negatives && self.config.use_image) {
            (Some(f), true) => {
                let rows = self.encode_image_features(tape, f)?;
                Some(tape.mean_axis(rows, 0)?)
            }
            _ => None,
        };
        Ok(WindowOutput { pred, h_x, h_t, h_i, h_f, decoded, text_negative, image_negative })
    }

    pub fn forward_batch(&self, tape: &mut Tape, batch: &[&WindowFeatures], h: usize, negatives: bool) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let (mut xs, mut ts, mut is, mut fs) = (vec![], vec![], vec![], vec![]);
        let (mut tn, mut inn) = (vec![], vec![]);
        for w in batch {
            if w.target.rows() != h {
                return Err(Error::Contract(format!("window target has {} rows, horizon is {h}", w.target.rows())));
            }
            let out = self.forward_window(tape, w, h, negatives)?;
            preds.push(out.pred);
            targets.push(tape.constant(w.target.clone()));
            xs.push(tape.mean_axis(out.h_x, 0)?);
            ts.push(out.h_t);
            is.push(tape.mean_axis(out.h_i, 0)?);
            fs.push(tape.mean_axis(out.h_f, 0)?);
            tn.extend(out.text_negative);
            inn.extend(out.image_negative);
        }
        let stack = |tape: &mut Tape, v: &[Var]| -> Result<Option<Var>> {
            Ok(if v.is_empty() { None } else { Some(tape.concat(v, 0)?) })
        };
        let pred = tape.concat(&preds, 0)?;
        let target = tape.concat(&targets, 0)?;
        let pooled = Pooled { x: tape.concat(&xs, 0)?, t: tape.concat(&ts, 0)?, i: tape.concat(&is, 0)?, f: tape.concat(&fs, 0)? };
        Ok(BatchOutput { pred, target, pooled, text_negatives: stack(tape, &tn)?, image_negatives: stack(tape, &inn)? })
    }

    /// Pooled representations for one window: `h_X`, decoder states with only
    /// image or only text keys (`h_X+I`, `h_X+T`), and `h_F`.
    pub fn tagged_embeddings(&self, w: &WindowFeatures) -> Result<Vec<(&'static str, Vec<f64>)>> {
        let mut tape = Tape::new();
        let h_x = self.encode_series(&mut tape, &w.tokens)?;
        let h_t = self.text_rows(&mut tape, &w.text)?;
        let h_i = self.image_rows(&mut tape, &w.image)?;
        let d = self.config.embed_dim;
        let zt = tape.constant(Tensor::zeros(&[1, d]));
        let zi = tape.constant(Tensor::zeros(&[w.image.rows(), d]));
        let only_i = self.fuse(&mut tape, zt, h_i)?;
        let only_t = self.fuse(&mut tape, h_t, zi)?;
        let h_f = self.fuse(&mut tape, h_t, h_i)?;
        let (x_i, _) = self.decode(&mut tape, h_x, only_i)?;
        let (x_t, _) = self.decode(&mut tape, h_x, only_t)?;
        let mut out = Vec::with_capacity(4);
        for (tag, v) in [("h_X", h_x), ("h_X+I", x_i), ("h_X+T", x_t), ("h_F", h_f)] {
            let pooled = tape.mean_axis(v, 0)?;
            out.push((tag, tape.value(pooled).data().to_vec()));
        }
        Ok(out)
    }
}
