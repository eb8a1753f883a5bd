//! Config-driven training, evaluation and the ablation and few-shot suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::contrastive::{self, ContrastiveConfig, LossBreakdown, LossLog, Negatives};
use crate::data::{self, CsvSchema, LoadSeries, SplitIndices, Standardizer, SyntheticConfig};
use crate::error::{Error, Result};
use crate::image::{self, ConvStack, ImageConfig, ImageNegativeKind};
use crate::model::{ImageEncoderKind, ModelConfig, PrismNet, TextBackbone, WindowFeatures};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::text::{self, EntityLevel, RuleTable, TextMeta, TextNegativeKind, TextParts, TextView, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    pub csv_path: Option<PathBuf>,
    pub csv: CsvSchema,
    /// Step between consecutive window starts.
    pub window_stride: usize,
    pub entity_level: EntityLevel,
    /// Seasonal period used by the text statistics; defaults to one day.
    pub period_hint: Option<usize>,
    /// Directory of `<window>.txt` files replacing the rendered template.
    pub text_dir: Option<PathBuf>,
    /// CSV of precomputed frame embeddings: `window,frame,v0,...`.
    pub frame_embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            csv_path: None,
            csv: CsvSchema::default(),
            window_stride: 1,
            entity_level: EntityLevel::Building,
            period_hint: None,
            text_dir: None,
            frame_embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of the training windows kept, counted from the start.
    pub few_shot_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, lr: 1e-4, epochs: 10, patience: 5, few_shot_fraction: 1.0 }
    }
}

/// One switch per ablation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_text: bool,
    pub no_stat: bool,
    pub no_knowledge: bool,
    pub no_image: bool,
    pub no_cl: bool,
    pub gru_to_transformer: bool,
    pub word2vec_text: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 7] =
        ["no_text", "no_stat", "no_knowledge", "word2vec_text", "no_image", "gru_to_transformer", "no_cl"];

    pub fn single(name: &str) -> Result<Self> {
        let mut f = Self::default();
        match name {
            "no_text" => f.no_text = true,
            "no_stat" => f.no_stat = true,
            "no_knowledge" => f.no_knowledge = true,
            "no_image" => f.no_image = true,
            "no_cl" => f.no_cl = true,
            "gru_to_transformer" => f.gru_to_transformer = true,
            "word2vec_text" => f.word2vec_text = true,
            other => return Err(Error::Config(format!("unknown ablation '{other}'"))),
        }
        Ok(f)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .copied()
            .filter(|n| Self::single(n).map(|f| self.contains(f)).unwrap_or(false))
            .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    fn contains(&self, other: Self) -> bool {
        let a = [self.no_text, self.no_stat, self.no_knowledge, self.no_image, self.no_cl, self.gru_to_transformer, self.word2vec_text];
        let b = [other.no_text, other.no_stat, other.no_knowledge, other.no_image, other.no_cl, other.gru_to_transformer, other.word2vec_text];
        a.iter().zip(&b).all(|(x, y)| *x || !*y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Frozen convolution settings; size and group come from `model`.
    pub image: ImageConfig,
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub ablation: AblationFlags,
    /// Rule table file; the built-in table is used when unset.
    pub rules_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            image: ImageConfig::default(),
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            ablation: AblationFlags::default(),
            rules_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(t.few_shot_fraction > 0.0 && t.few_shot_fraction <= 1.0) {
            return Err(Error::Config(format!("few_shot_fraction {} not in (0, 1]", t.few_shot_fraction)));
        }
        if self.data.window_stride == 0 {
            return Err(Error::Config("window_stride must be positive".into()));
        }
        if self.data.source == DataSource::Csv && self.data.csv_path.is_none() {
            return Err(Error::Config("csv source requires csv_path".into()));
        }
        if self.model.group_size == 0 || self.model.window % self.model.group_size != 0 {
            return Err(Error::Config(format!(
                "group_size {} does not divide window {}",
                self.model.group_size, self.model.window
            )));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Model settings with the ablation switches applied.
    pub fn effective_model(&self, n_channels: usize, vocab_size: usize, horizon: usize) -> ModelConfig {
        let a = self.ablation;
        ModelConfig {
            n_channels,
            vocab_size,
            horizons: vec![horizon],
            use_text: !a.no_text,
            use_image: !a.no_image,
            image_encoder: if a.gru_to_transformer { ImageEncoderKind::Transformer } else { self.model.image_encoder },
            text_backbone: if a.word2vec_text { TextBackbone::BagOfEmbeddings } else { self.model.text_backbone },
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Contrastive weights with the ablation switches applied.
    pub fn effective_contrastive(&self) -> ContrastiveConfig {
        let a = self.ablation;
        let mut c = self.contrastive.clone();
        if a.no_cl {
            c.lambda1 = 0.0;
            c.lambda2 = 0.0;
        }
        if a.no_text {
            c.alpha[0] = 0.0;
            c.beta[1] = 0.0;
        }
        if a.no_image {
            c.alpha[1] = 0.0;
            c.beta[2] = 0.0;
        }
        c
    }

    fn image_config(&self) -> ImageConfig {
        ImageConfig {
            image_size: self.model.image_size,
            group_size: self.model.group_size,
            ..self.image.clone()
        }
    }
}

/// Raw series standardized with statistics of the full training range.
pub fn load_series(cfg: &ExperimentConfig) -> Result<LoadSeries> {
    match cfg.data.source {
        DataSource::Synthetic => data::generate_synthetic(&cfg.data.synthetic),
        DataSource::Csv => {
            let path = cfg.data.csv_path.as_ref().ok_or_else(|| Error::Config("csv_path unset".into()))?;
            data::ingest_csv(path, &cfg.data.csv)
        }
    }
}

/// Reads `window,frame,v0,...` rows into one `N × dim` tensor per window.
pub fn load_frame_embeddings(path: &Path, dim: usize) -> Result<BTreeMap<usize, Tensor>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let mut rows: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Parse { line, message: format!("missing column {k}") })
        };
        let parse_idx = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::Parse { line, message: e.to_string() });
        let (w, f) = (parse_idx(field(0)?)?, parse_idx(field(1)?)?);
        if rec.len() != dim + 2 {
            return Err(Error::Parse { line, message: format!("expected {} values, found {}", dim, rec.len().saturating_sub(2)) });
        }
        let vals = (2..rec.len())
            .map(|k| rec[k].trim().parse::<f64>().map_err(|e| Error::Parse { line, message: e.to_string() }))
            .collect::<Result<Vec<_>>>()?;
        rows.entry(w).or_default().insert(f, vals);
    }
    rows.into_iter()
        .map(|(w, frames)| {
            let n = frames.len();
            if frames.keys().copied().ne(0..n) {
                return Err(Error::Parse { line: 0, message: format!("window {w}: frames must be numbered 0..{n}") });
            }
            Ok((w, Tensor::new(vec![n, dim], frames.into_values().flatten().collect())?))
        })
        .collect()
}

/// Windows for one horizon with their frozen features. Training windows
/// removed by the few-shot cut are absent, and `split` indexes `windows`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub horizon: usize,
    pub windows: Vec<WindowFeatures>,
    pub split: SplitIndices,
    /// Rendered positive text per window.
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => self.split.train.clone(),
            Split::Val => self.split.val.clone(),
            Split::Test => self.split.test.clone(),
        }
    }

    pub fn subset(&self, split: Split) -> Vec<&WindowFeatures> {
        self.windows[self.indices(split)].iter().collect()
    }

    /// SHA-256 over the starts, histories and targets of the test windows.
    pub fn test_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.windows[self.split.test.clone()] {
            h.update((w.start as u64).to_le_bytes());
            for t in [&w.tokens, &w.target] {
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn window_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64)
}

/// Standardizes the series, windows it and computes every frozen feature.
pub fn prepare(cfg: &ExperimentConfig, model: &PrismNet, series: &LoadSeries, tokenizer: &Tokenizer, rules: &RuleTable) -> Result<Dataset> {
    let mc = &model.config;
    let h = *mc.horizons.first().ok_or_else(|| Error::Config("no horizon".into()))?;
    let (l, stride) = (mc.window, cfg.data.window_stride);
    let n_windows = data::window_count(series.len(), l, h, stride);
    if n_windows < 10 {
        return Err(Error::Config(format!("only {n_windows} windows; need at least 10 for a split")));
    }
    let split = data::few_shot_split(n_windows, cfg.train.few_shot_fraction)?;
    let full_train = data::few_shot_split(n_windows, 1.0)?.train;
    let fit_rows = 0..((full_train.end - 1) * stride + l);
    let series = Standardizer::fit(series, fit_rows).apply(series);
    let windows = data::make_windows(&series, l, h, stride)?;

    let conv = ConvStack::new(series.n_channels(), cfg.image_config())?;
    let period = cfg.data.period_hint.unwrap_or_else(|| (1440 / series.resolution.0.max(1) as usize).max(2));
    let meta = TextMeta { entity_level: cfg.data.entity_level, resolution: series.resolution, horizon: h };
    let parts = TextParts { stat: !cfg.ablation.no_stat, knowledge: !cfg.ablation.no_knowledge };
    let external = match &cfg.data.text_dir {
        Some(dir) => text::load_external_texts(dir)?,
        None => BTreeMap::new(),
    };
    let frames = match &cfg.data.frame_embeddings {
        Some(p) => load_frame_embeddings(p, mc.frame_dim)?,
        None => BTreeMap::new(),
    };

    let cc = cfg.effective_contrastive();
    let want_negatives = cc.lambda1 > 0.0 || cc.lambda2 > 0.0;
    // windows dropped by the few-shot cut are never featurized
    let skipped = full_train.end - split.train.end;
    let kept = split.train.clone().chain(full_train.end..n_windows);
    let mut out = Vec::with_capacity(n_windows - skipped);
    let mut texts = Vec::with_capacity(n_windows - skipped);
    for i in kept {
        let w = &windows[i];
        let negatives = want_negatives && split.train.contains(&i);
        let mut rng = window_rng(cfg.seed, i);
        let normed = data::instance_normalize(w)?;
        let norm = normed.norm_stats.clone().expect("normalized window carries stats");
        let tokens = data::patchify(&normed.history, mc.patch_len, mc.patch_stride)?.tokens();

        let (text, text_negative, rendered) = if mc.use_text {
            let view = match external.get(&i) {
                Some(t) => TextView::external(t, tokenizer),
                None => text::render_text(&text::aggregate_stats(&w.history, period), meta, rules, parts, tokenizer),
            };
            let kind = if rng.gen_bool(0.5) { TextNegativeKind::ContextSwap } else { TextNegativeKind::SemanticTamper };
            let negative = match negatives.then(|| text::make_text_negative(&view, kind, &mut rng, tokenizer)) {
                Some(Ok(n)) => Some(model.text_features(&n.tokens)?),
                // external texts carry no template fields to corrupt
                _ => None,
            };
            (model.text_features(&view.tokens)?, negative, view.text())
        } else {
            (Tensor::zeros(&[1, mc.text_dim]), None, String::new())
        };

        let (img, image_negative) = if mc.use_image {
            match frames.get(&i) {
                Some(z) => (z.clone(), None),
                None => {
                    let stack = image::render_frames(&normed.history, &conv, mc.group_size)?;
                    let neg = if negatives {
                        let mut rng = window_rng(!cfg.seed, i);
                        let kind =
                            if rng.gen_bool(0.5) { ImageNegativeKind::PatchSwap } else { ImageNegativeKind::ColorJitter };
                        Some(model.image_features(&image::make_image_negative(&stack, kind, &mut rng)?)?)
                    } else {
                        None
                    };
                    (model.image_features(&stack)?, neg)
                }
            }
        } else {
            (Tensor::zeros(&[mc.group_size, mc.frame_dim]), None)
        };

        texts.push(rendered);
        out.push(WindowFeatures {
            tokens,
            norm,
            target: w.target.clone(),
            start: w.start,
            text,
            text_negative,
            image: img,
            image_negative,
        });
    }
    let split = SplitIndices {
        train: split.train,
        val: split.val.start - skipped..split.val.end - skipped,
        test: split.test.start - skipped..split.test.end - skipped,
    };
    Ok(Dataset { horizon: h, windows: out, split, texts })
}

/// Everything needed to train one horizon.
pub struct Session {
    pub config: ExperimentConfig,
    pub model: PrismNet,
    pub data: Dataset,
    pub tokenizer: Tokenizer,
}

impl Session {
    pub fn new(cfg: &ExperimentConfig, series: &LoadSeries, horizon: usize) -> Result<Self> {
        cfg.validate()?;
        let rules = match &cfg.rules_path {
            Some(p) => RuleTable::load(p)?,
            None => RuleTable::default(),
        };
        let tokenizer = Tokenizer::for_templates(&rules);
        let model = PrismNet::new(cfg.effective_model(series.n_channels(), tokenizer.vocab_size(), horizon))?;
        let data = prepare(cfg, &model, series, &tokenizer, &rules)?;
        Ok(Self { config: cfg.clone(), model, data, tokenizer })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Per-horizon errors plus their averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<HorizonMetrics>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub runtime_secs: f64,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(rows: Vec<HorizonMetrics>, runtime_secs: f64, config_hash: String, seed: u64) -> Self {
        let n = rows.len().max(1) as f64;
        let avg_mse = rows.iter().map(|r| r.mse).sum::<f64>() / n;
        let avg_mae = rows.iter().map(|r| r.mae).sum::<f64>() / n;
        Self { rows, avg_mse, avg_mae, runtime_secs, config_hash, seed }
    }

    /// Runtime is left out so that reruns produce identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mse,mae,config_hash,seed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:e},{},{}", r.horizon, r.mse, r.mae, self.config_hash, self.seed);
        }
        let _ = writeln!(s, "avg,{:e},{:e},{},{}", self.avg_mse, self.avg_mae, self.config_hash, self.seed);
        s
    }
}

/// MSE and MAE of de-normalized predictions over a window subset.
pub fn evaluate(model: &PrismNet, windows: &[&WindowFeatures], horizon: usize) -> Result<HorizonMetrics> {
    if windows.is_empty() {
        return Err(Error::Contract("no windows to evaluate".into()));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in windows.chunks(16) {
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, chunk, horizon, false)?;
        let (p, t) = (tape.value(out.pred), tape.value(out.target));
        for (a, b) in p.data().iter().zip(t.data()) {
            se += (a - b).powi(2);
            ae += (a - b).abs();
        }
        n += p.len();
    }
    Ok(HorizonMetrics { horizon, mse: se / n as f64, mae: ae / n as f64 })
}

pub fn evaluate_split(session: &Session, split: Split) -> Result<HorizonMetrics> {
    evaluate(&session.model, &session.data.subset(split), session.data.horizon)
}

/// One training step's record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    /// Validation prediction loss before training and after each epoch.
    pub val_history: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Loss of one mini-batch on a training tape.
pub fn batch_loss(
    model: &PrismNet,
    tape: &mut Tape,
    batch: &[&WindowFeatures],
    horizon: usize,
    cc: &ContrastiveConfig,
) -> Result<(crate::Var, LossBreakdown)> {
    let use_cl = cc.lambda1 > 0.0 || cc.lambda2 > 0.0;
    let out = model.forward_batch(tape, batch, horizon, use_cl)?;
    let neg = Negatives { text: out.text_negatives, image: out.image_negatives };
    let p = out.pooled;
    let rdn = if cc.lambda1 > 0.0 { Some(contrastive::loss_rdn(tape, p.x, p.t, p.i, neg, cc)?) } else { None };
    let syn = if cc.lambda2 > 0.0 { Some(contrastive::loss_syn(tape, p.f, p.x, p.t, p.i, neg, cc)?) } else { None };
    contrastive::total_loss(tape, out.pred, out.target, rdn.as_ref(), syn.as_ref(), cc.lambda1, cc.lambda2)
}

fn val_loss(session: &Session) -> Result<f64> {
    Ok(evaluate_split(session, Split::Val)?.mse)
}

/// Mini-batch Adam with early stopping on validation prediction loss. The
/// best-validation parameters are restored before returning.
pub fn train(session: &mut Session, log_path: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = session.config.clone();
    let cc = cfg.effective_contrastive();
    let horizon = session.data.horizon;
    let mut adam = Adam::new(&session.model.store, AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut log = log_path.map(LossLog::create).transpose()?;

    let initial = val_loss(session)?;
    let mut best_val = initial;
    let mut best_store: ParamStore = session.model.store.clone();
    let (mut best_epoch, mut bad, mut epochs_run) = (0, 0, 0);
    let mut val_history = vec![initial];
    let mut steps = Vec::new();
    let mut order: Vec<usize> = session.data.indices(Split::Train).collect();

    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.train.batch_size) {
            let step = steps.len();
            let batch: Vec<&WindowFeatures> = chunk.iter().map(|&i| &session.data.windows[i]).collect();
            let mut tape = Tape::training(cfg.seed.wrapping_add(step as u64 + 1));
            let (loss, breakdown) = batch_loss(&session.model, &mut tape, &batch, horizon, &cc)?;
            if !breakdown.l_total.is_finite() {
                return Err(Error::Divergence { step, message: format!("total loss is {}", breakdown.l_total) });
            }
            let grads = tape.backward(loss)?;
            session.model.store.accumulate(&grads);
            adam.step(&mut session.model.store)?;
            if let Some(log) = log.as_mut() {
                log.append(step, &breakdown)?;
            }
            steps.push(StepRecord { step, epoch, loss: breakdown });
        }
        epochs_run = epoch;
        let v = val_loss(session)?;
        if !v.is_finite() {
            return Err(Error::Divergence { step: steps.len(), message: format!("validation loss is {v}") });
        }
        val_history.push(v);
        log::info!("epoch {epoch}: validation mse {v:.6}");
        if v < best_val {
            best_val = v;
            best_epoch = epoch;
            best_store = session.model.store.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.train.patience {
                break;
            }
        }
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    session.model.store = best_store;
    Ok(TrainOutcome { steps, val_history, best_val, best_epoch, epochs_run })
}

/// Result of training and evaluating every configured horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub test: MetricsReport,
    pub val: MetricsReport,
    /// Per horizon.
    pub training: Vec<TrainOutcome>,
    pub test_hash: String,
}

pub fn checkpoint_path(dir: &Path, horizon: usize) -> PathBuf {
    dir.join(format!("model_h{horizon}.prsm"))
}

/// Trains one model per horizon. With `out`, writes checkpoints, loss logs
/// and `metrics.csv` there.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let started = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let series = load_series(cfg)?;
    let mut test_rows = Vec::new();
    let mut val_rows = Vec::new();
    let mut training = Vec::new();
    let mut hasher = Sha256::new();
    for &h in &cfg.model.horizons {
        let mut session = Session::new(cfg, &series, h)?;
        let log = out.map(|d| d.join(format!("loss_h{h}.csv")));
        training.push(train(&mut session, log.as_deref())?);
        if let Some(dir) = out {
            checkpoint::save(&session.model.store, &checkpoint_path(dir, h))?;
        }
        test_rows.push(evaluate_split(&session, Split::Test)?);
        val_rows.push(evaluate_split(&session, Split::Val)?);
        hasher.update(session.data.test_hash().as_bytes());
    }
    let secs = started.elapsed().as_secs_f64();
    let test = MetricsReport::new(test_rows, secs, cfg.hash(), cfg.seed);
    let val = MetricsReport::new(val_rows, secs, cfg.hash(), cfg.seed);
    if let Some(dir) = out {
        fs::write(dir.join("metrics.csv"), test.to_csv())?;
        fs::write(dir.join("val_metrics.csv"), val.to_csv())?;
        fs::write(dir.join("runtime.txt"), format!("{secs:.3}\n"))?;
    }
    Ok(RunOutcome { test, val, training, test_hash: hex::encode(hasher.finalize()) })
}

/// Evaluates the checkpoints in `dir` on one split.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, dir: &Path, split: Split, horizons: &[usize]) -> Result<MetricsReport> {
    let started = Instant::now();
    let series = load_series(cfg)?;
    let mut rows = Vec::new();
    for &h in horizons {
        if !cfg.model.horizons.contains(&h) {
            return Err(Error::Config(format!("horizon {h} was not trained; configured {:?}", cfg.model.horizons)));
        }
        let mut session = Session::new(cfg, &series, h)?;
        checkpoint::restore(&mut session.model.store, &checkpoint_path(dir, h))?;
        rows.push(evaluate_split(&session, split)?);
    }
    Ok(MetricsReport::new(rows, started.elapsed().as_secs_f64(), cfg.hash(), cfg.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub label: String,
    pub fraction: f64,
    pub outcome: RunOutcome,
}

/// The full model followed by one run per ablation in `names`, all with the
/// same seed and data.
pub fn run_ablation_suite(cfg: &ExperimentConfig, names: &[&str], out: Option<&Path>) -> Result<Vec<SuiteRow>> {
    let mut variants = vec![("full".to_string(), AblationFlags::default())];
    for n in names {
        variants.push((n.to_string(), AblationFlags::single(n)?));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (label, flags) in variants {
        let c = ExperimentConfig { ablation: flags, ..cfg.clone() };
        let dir = out.map(|d| d.join(&label));
        let outcome = run(&c, dir.as_deref())?;
        rows.push(SuiteRow { label, fraction: c.train.few_shot_fraction, outcome });
    }
    if let Some(dir) = out {
        fs::write(dir.join("ablation.csv"), suite_csv(&rows))?;
    }
    Ok(rows)
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

/// One run per training fraction against a fixed test set.
pub fn run_few_shot_suite(cfg: &ExperimentConfig, fractions: &[f64], out: Option<&Path>) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut c = cfg.clone();
        c.train.few_shot_fraction = f;
        let label = format!("fraction_{f}");
        let dir = out.map(|d| d.join(&label));
        let outcome = run(&c, dir.as_deref())?;
        rows.push(SuiteRow { label, fraction: f, outcome });
    }
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.outcome.test_hash != first.outcome.test_hash) {
            return Err(Error::Contract(format!("test set changed at fraction {}", bad.fraction)));
        }
    }
    if let Some(dir) = out {
        fs::write(dir.join("fewshot.csv"), suite_csv(&rows))?;
    }
    Ok(rows)
}

/// Long-format table, one row per run and horizon plus an average row.
pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut s = String::from("label,fraction,horizon,test_mse,test_mae,val_mse,val_mae,test_hash\n");
    for r in rows {
        let (t, v) = (&r.outcome.test, &r.outcome.val);
        for (a, b) in t.rows.iter().zip(&v.rows) {
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{:e},{:e},{}",
                r.label, r.fraction, a.horizon, a.mse, a.mae, b.mse, b.mae, r.outcome.test_hash
            );
        }
        let _ = writeln!(
            s,
            "{},{},avg,{:e},{:e},{:e},{:e},{}",
            r.label, r.fraction, t.avg_mse, t.avg_mae, v.avg_mse, v.avg_mae, r.outcome.test_hash
        );
    }
    s
}

/// Writes `tag,window,d0..` rows for the four pooled representations of
/// every window in `split`.
pub fn dump_embeddings(session: &Session, split: Split, path: &Path) -> Result<usize> {
    let d = session.model.config.embed_dim;
    let mut s = String::from("tag,window");
    for k in 0..d {
        let _ = write!(s, ",d{k}");
    }
    s.push('\n');
    let mut rows = 0;
    for i in session.data.indices(split) {
        let w = &session.data.windows[i];
        let index = w.start / session.config.data.window_stride;
        for (tag, v) in session.model.tagged_embeddings(w)? {
            let _ = write!(s, "{tag},{index}");
            for x in v {
                let _ = write!(s, ",{x:e}");
            }
            s.push('\n');
            rows += 1;
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s)?;
    Ok(rows)
}

/// Writes the text view and image frames of one window to `dir`.
pub fn render_preview(cfg: &ExperimentConfig, window: usize, dir: &Path) -> Result<()> {
    let series = load_series(cfg)?;
    let h = *cfg.model.horizons.first().ok_or_else(|| Error::Config("no horizon".into()))?;
    let l = cfg.model.window;
    let stride = cfg.data.window_stride;
    let n = data::window_count(series.len(), l, h, stride);
    if window >= n {
        return Err(Error::Config(format!("window {window} out of range; series has {n}")));
    }
    let full_train = data::few_shot_split(n, 1.0)?.train;
    let series = Standardizer::fit(&series, 0..((full_train.end - 1) * stride + l)).apply(&series);
    let w = &data::make_windows(&series, l, h, stride)?[window];
    let rules = match &cfg.rules_path {
        Some(p) => RuleTable::load(p)?,
        None => RuleTable::default(),
    };
    let tok = Tokenizer::for_templates(&rules);
    let period = cfg.data.period_hint.unwrap_or_else(|| (1440 / series.resolution.0.max(1) as usize).max(2));
    let meta = TextMeta { entity_level: cfg.data.entity_level, resolution: series.resolution, horizon: h };
    let parts = TextParts { stat: !cfg.ablation.no_stat, knowledge: !cfg.ablation.no_knowledge };
    let view = text::render_text(&text::aggregate_stats(&w.history, period), meta, &rules, parts, &tok);
    let mut rng = window_rng(cfg.seed, window);
    let neg = text::make_text_negative(&view, TextNegativeKind::SemanticTamper, &mut rng, &tok)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("text.txt"), format!("{}\n", view.text()))?;
    fs::write(dir.join("text_negative.txt"), format!("{}\n", neg.text()))?;
    let normed = data::instance_normalize(w)?;
    let conv = ConvStack::new(series.n_channels(), cfg.image_config())?;
    let stack = image::render_frames(&normed.history, &conv, cfg.model.group_size)?;
    image::export_stack_pgm(&dir.join("frames"), &stack)?;
    let neg = image::make_image_negative(&stack, ImageNegativeKind::PatchSwap, &mut rng)?;
    image::export_stack_pgm(&dir.join("frames_negative"), &neg)?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Small synthetic setup that trains in well under a second.
    pub(crate) fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = 3;
        c.data.synthetic = SyntheticConfig { n_steps: 400, n_channels: 2, weekly_period: 0, ..SyntheticConfig::default() };
        c.data.window_stride = 8;
        c.model = ModelConfig {
            window: 48,
            patch_len: 8,
            patch_stride: 8,
            embed_dim: 8,
            heads: 2,
            ff_dim: 16,
            text_dim: 8,
            max_tokens: 400,
            frame_dim: 8,
            frame_patch: 4,
            image_size: 16,
            group_size: 4,
            gru_hidden: 8,
            horizons: vec![12],
            ..ModelConfig::default()
        };
        c.train = TrainConfig { batch_size: 8, lr: 1e-2, epochs: 2, patience: 5, few_shot_fraction: 1.0 };
        c
    }

    #[test]
    fn defaults_match_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.train.batch_size, c.train.lr, c.train.epochs, c.train.patience), (32, 1e-4, 10, 5));
        assert_eq!((c.model.window, c.model.embed_dim, c.model.dropout), (480, 128, 0.1));
        assert_eq!(c.model.horizons, vec![24, 96, 192, 336]);
        assert!((c.contrastive.lambda2 / c.contrastive.lambda1 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = tiny();
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = ExperimentConfig::parse("seed = 9\n[train]\nepochs = 3\n[ablation]\nno_cl = true\n").unwrap();
        assert_eq!((partial.seed, partial.train.epochs, partial.train.batch_size), (9, 3, 32));
        assert!(partial.ablation.no_cl);
        assert!(matches!(ExperimentConfig::parse("[train]\nbatch_size = 0\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("[ablation]\nno_such = true\n"), Err(Error::Config(_))));
        assert!(AblationFlags::single("bogus").is_err());
        assert_eq!(AblationFlags::single("no_cl").unwrap().label(), "no_cl");
        assert_eq!(AblationFlags::default().label(), "full");
    }

    #[test]
    fn ablation_switches() {
        let mut c = tiny();
        c.ablation = AblationFlags { no_text: true, no_cl: true, gru_to_transformer: true, ..Default::default() };
        let m = c.effective_model(2, 30, 12);
        assert!(!m.use_text && m.use_image && m.image_encoder == ImageEncoderKind::Transformer);
        let cc = c.effective_contrastive();
        assert_eq!((cc.lambda1, cc.lambda2, cc.alpha[0], cc.beta[1]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_report_averages() {
        let rows = vec![HorizonMetrics { horizon: 24, mse: 1.0, mae: 0.5 }, HorizonMetrics { horizon: 96, mse: 3.0, mae: 1.5 }];
        let r = MetricsReport::new(rows, 0.0, "x".into(), 1);
        assert_eq!((r.avg_mse, r.avg_mae), (2.0, 1.0));
        assert!(r.to_csv().ends_with("avg,2e0,1e0,x,1\n"));
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let c = tiny();
        let series = load_series(&c).unwrap();
        let mut s = Session::new(&c, &series, 12).unwrap();
        // zero head weights and bias give the window mean; zero mean and unit
        // std in the stored stats then give a constant-zero predictor
        for (id, p) in s.model.store.iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
            if p.starts_with("forecast.head") {
                s.model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut windows: Vec<WindowFeatures> = s.data.subset(Split::Test).into_iter().cloned().collect();
        for w in &mut windows {
            w.norm.mean.iter_mut().for_each(|m| *m = 0.0);
        }
        let refs: Vec<&WindowFeatures> = windows.iter().collect();
        let m = evaluate(&s.model, &refs, 12).unwrap();
        let vals: Vec<f64> = windows.iter().flat_map(|w| w.target.data().to_vec()).collect();
        let ms = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        let ma = vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
        assert!((m.mse - ms).abs() < 1e-12 && (m.mae - ma).abs() < 1e-12);
        assert!(m.mae * m.mae <= m.mse + 1e-15);

        // targets replaced by the predictions give zero error
        let mut tape = Tape::new();
        let mut exact = windows.clone();
        for w in &mut exact {
            let o = s.model.forward_window(&mut tape, w, 12, false).unwrap();
            w.target = tape.value(o.pred).clone();
        }
        let refs: Vec<&WindowFeatures> = exact.iter().collect();
        let m = evaluate(&s.model, &refs, 12).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = tiny();
        let series = load_series(&c).unwrap();
        let mut a = Session::new(&c, &series, 12).unwrap();
        let out = train(&mut a, None).unwrap();
        let first = out.steps.first().unwrap().loss.l_total;
        let last = out.steps.last().unwrap().loss.l_total;
        assert!(last < first, "{first} -> {last}");
        assert!(out.steps.iter().all(|s| s.loss.identity_residual() < 1e-12));
        let mut b = Session::new(&c, &series, 12).unwrap();
        assert_eq!(train(&mut b, None).unwrap(), out);
        assert_eq!(checkpoint::encode(&a.model.store), checkpoint::encode(&b.model.store));
    }

    #[test]
    fn early_stopping_keeps_best() {
        let mut c = tiny();
        c.train.patience = 0;
        c.train.epochs = 6;
        c.train.lr = 0.5;
        let series = load_series(&c).unwrap();
        let mut s = Session::new(&c, &series, 12).unwrap();
        let out = train(&mut s, None).unwrap();
        let first_bad = out.val_history.iter().enumerate().skip(1).find(|(i, v)| {
            **v >= out.val_history[..*i].iter().cloned().fold(f64::INFINITY, f64::min)
        });
        if let Some((i, _)) = first_bad {
            assert_eq!(out.epochs_run, i);
        }
        let min = out.val_history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val, min);
        assert_eq!(evaluate_split(&s, Split::Val).unwrap().mse, min);
    }

    #[test]
    fn no_cl_logs_zero_contrastive_terms() {
        let mut c = tiny();
        c.ablation.no_cl = true;
        let series = load_series(&c).unwrap();
        let mut s = Session::new(&c, &series, 12).unwrap();
        let out = train(&mut s, None).unwrap();
        assert!(out.steps.iter().all(|r| r.loss.l_rdn == 0.0 && r.loss.l_syn == 0.0 && r.loss.l_total == r.loss.l_prediction));
    }

    #[test]
    fn few_shot_keeps_test_set() {
        let c = tiny();
        let series = load_series(&c).unwrap();
        let hashes: Vec<String> = [0.1, 0.5, 1.0]
            .iter()
            .map(|&f| {
                let mut c = c.clone();
                c.train.few_shot_fraction = f;
                Session::new(&c, &series, 12).unwrap().data.test_hash()
            })
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn run_writes_artifacts_and_evaluates_checkpoints() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let out = run(&c, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, out.test.to_csv());
        let log = fs::read_to_string(dir.path().join("loss_h12.csv")).unwrap();
        assert_eq!(log.lines().count(), out.training[0].steps.len() + 1);
        let again = evaluate_checkpoints(&c, dir.path(), Split::Test, &[12]).unwrap();
        assert_eq!(again.rows, out.test.rows);
        assert!(matches!(evaluate_checkpoints(&c, dir.path(), Split::Test, &[24]), Err(Error::Config(_))));
    }

    #[test]
    fn embeddings_dump() {
        let c = tiny();
        let series = load_series(&c).unwrap();
        let s = Session::new(&c, &series, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let rows = dump_embeddings(&s, Split::Test, &path).unwrap();
        assert_eq!(rows, 4 * s.data.indices(Split::Test).len());
        let first = fs::read(&path).unwrap();
        dump_embeddings(&s, Split::Test, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        let text = String::from_utf8(first).unwrap();
        let line = text.lines().nth(1).unwrap();
        let i = s.data.split.test.start;
        let vals: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        let mem = s.model.tagged_embeddings(&s.data.windows[i]).unwrap();
        assert_eq!(mem[0].0, "h_X");
        assert!(vals.iter().zip(&mem[0].1).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn preview_and_frame_embeddings() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        render_preview(&c, 2, dir.path()).unwrap();
        assert!(fs::read_to_string(dir.path().join("text.txt")).unwrap().starts_with("Task:"));
        assert!(dir.path().join("frames/frame_0.pgm").exists());
        assert!(render_preview(&c, 10_000, dir.path()).is_err());

        let path = dir.path().join("frames.csv");
        fs::write(&path, "window,frame,a,b\n0,1,3,4\n0,0,1,2\n").unwrap();
        let m = load_frame_embeddings(&path, 2).unwrap();
        assert_eq!(m[&0].data(), &[1.0, 2.0, 3.0, 4.0]);
        fs::write(&path, "window,frame,a,b\n0,0,1\n").unwrap();
        assert!(matches!(load_frame_embeddings(&path, 2), Err(Error::Parse { line: 2, .. })));
    }
}
