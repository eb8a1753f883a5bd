//! Text view of a load window: summary statistics, a three-part template
//! (task + statistics + domain knowledge), a lossless tokenizer and the
//! two text negative constructions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Resolution;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default rule table shipped with the crate.
pub const DEFAULT_RULES: &str = include_str!("../assets/knowledge_rules.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    /// Lag-period autocorrelation clipped at 0.
    pub seasonality: f64,
    /// Least-squares slope per step.
    pub trend: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Standardized fourth central moment (non-excess).
    pub kurtosis: f64,
    pub skewness: f64,
    /// Window shorter than two periods; seasonality reported as 0.
    pub seasonality_degenerate: bool,
    /// Constant window; skewness and kurtosis reported as 0.
    pub constant: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let denom = (saa * sbb).sqrt();
    (denom > 1e-300).then(|| sab / denom)
}

/// Statistics of one channel.
pub fn series_stats(x: &[f64], period_hint: usize) -> WindowStats {
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let constant = m2 <= 1e-24 * mean.abs().max(1.0).powi(2);
    let (skewness, kurtosis) = if constant { (0.0, 0.0) } else { (m3 / m2.powf(1.5), m4 / (m2 * m2)) };

    let t_mean = (nf - 1.0) / 2.0;
    let (mut stx, mut stt) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        stx += dt * (v - mean);
        stt += dt * dt;
    }
    let trend = if stt > 0.0 { stx / stt } else { 0.0 };

    let seasonality_degenerate = period_hint == 0 || n < 2 * period_hint;
    let seasonality = if seasonality_degenerate {
        0.0
    } else {
        pearson(&x[..n - period_hint], &x[period_hint..]).unwrap_or(0.0).max(0.0)
    };
    WindowStats { seasonality, trend, min, max, mean, kurtosis, skewness, seasonality_degenerate, constant }
}

/// Per-channel statistics of an `l × d` history.
pub fn compute_stats(history: &Tensor, period_hint: usize) -> Vec<WindowStats> {
    (0..history.cols())
        .map(|c| {
            let col: Vec<f64> = (0..history.rows()).map(|t| history.at(t, c)).collect();
            series_stats(&col, period_hint)
        })
        .collect()
}

/// Statistics of the channel-averaged history, used for the rendered text.
pub fn aggregate_stats(history: &Tensor, period_hint: usize) -> WindowStats {
    let d = history.cols() as f64;
    let avg: Vec<f64> = (0..history.rows()).map(|t| history.row(t).iter().sum::<f64>() / d).collect();
    series_stats(&avg, period_hint)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatField {
    Seasonality,
    Trend,
    Min,
    Max,
    Mean,
    Kurtosis,
    Skewness,
}

impl StatField {
    pub const ALL: [StatField; 7] = [
        StatField::Seasonality,
        StatField::Trend,
        StatField::Min,
        StatField::Max,
        StatField::Mean,
        StatField::Kurtosis,
        StatField::Skewness,
    ];

    pub fn key(self) -> &'static str {
        match self {
            StatField::Seasonality => "seasonality",
            StatField::Trend => "trend",
            StatField::Min => "min",
            StatField::Max => "max",
            StatField::Mean => "mean",
            StatField::Kurtosis => "kurtosis",
            StatField::Skewness => "skewness",
        }
    }

    fn label(self) -> &'static str {
        match self {
            StatField::Min => "minimum",
            StatField::Max => "maximum",
            StatField::Kurtosis => "kurtosis (non-excess)",
            other => other.key(),
        }
    }

    pub fn value(self, s: &WindowStats) -> f64 {
        match self {
            StatField::Seasonality => s.seasonality,
            StatField::Trend => s.trend,
            StatField::Min => s.min,
            StatField::Max => s.max,
            StatField::Mean => s.mean,
            StatField::Kurtosis => s.kurtosis,
            StatField::Skewness => s.skewness,
        }
    }
}

impl FromStr for StatField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StatField::ALL
            .into_iter()
            .find(|f| f.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown statistic '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparator {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub stat: StatField,
    pub comparator: Comparator,
    pub threshold: f64,
    pub statement: String,
}

/// Predicates on window statistics mapped to domain statements.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    pub rules: Vec<Rule>,
    pub default_statement: String,
}

impl Default for RuleTable {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rule table parses")
    }
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        let mut default_statement = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (key, statement) = line.split_once(" = ").ok_or_else(|| err("expected 'key = statement'".into()))?;
            let (key, statement) = (key.trim(), statement.trim().to_string());
            if key == "default" {
                default_statement = statement;
                continue;
            }
            let parts: Vec<&str> = key.split_whitespace().collect();
            let [stat, cmp, threshold] = parts.as_slice() else {
                return Err(err(format!("predicate '{key}' must be '<stat> <cmp> <threshold>'")));
            };
            let stat = stat.parse().map_err(|e: Error| err(e.to_string()))?;
            let comparator = match *cmp {
                ">" => Comparator::Gt,
                ">=" => Comparator::Ge,
                "<" => Comparator::Lt,
                "<=" => Comparator::Le,
                other => return Err(err(format!("unknown comparator '{other}'"))),
            };
            let threshold = threshold.parse().map_err(|_| err(format!("bad threshold '{threshold}'")))?;
            rules.push(Rule { stat, comparator, threshold, statement });
        }
        Ok(Self { rules, default_statement })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Statements of every rule that fires, in table order.
    pub fn statements(&self, stats: &WindowStats) -> Vec<&str> {
        let fired: Vec<&str> = self
            .rules
            .iter()
            .filter(|r| r.comparator.holds(r.stat.value(stats), r.threshold))
            .map(|r| r.statement.as_str())
            .collect();
        if fired.is_empty() && !self.default_statement.is_empty() {
            vec![self.default_statement.as_str()]
        } else {
            fired
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityLevel {
    User,
    Building,
    DistributionNetwork,
}

impl fmt::Display for EntityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityLevel::User => "user-level",
            EntityLevel::Building => "building-level",
            EntityLevel::DistributionNetwork => "distribution network",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextMeta {
    pub entity_level: EntityLevel,
    pub resolution: Resolution,
    pub horizon: usize,
}

/// Which template parts are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextParts {
    pub stat: bool,
    pub knowledge: bool,
}

impl Default for TextParts {
    fn default() -> Self {
        Self { stat: true, knowledge: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextNegativeKind {
    None,
    ContextSwap,
    SemanticTamper,
}

impl FromStr for TextNegativeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context_swap" => Ok(Self::ContextSwap),
            "semantic_tamper" => Ok(Self::SemanticTamper),
            other => Err(Error::Contract(format!("unknown text negative kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TemplateFields {
    meta: TextMeta,
    values: BTreeMap<StatField, String>,
    knowledge: Vec<String>,
    parts: TextParts,
}

impl TemplateFields {
    fn task(&self) -> String {
        format!(
            "Task: forecast the next {} steps of {} load sampled every {}. ",
            self.meta.horizon, self.meta.entity_level, self.meta.resolution
        )
    }

    fn stat(&self) -> String {
        if !self.parts.stat {
            return String::new();
        }
        let body: Vec<String> =
            StatField::ALL.iter().map(|f| format!("{} <{}>", f.label(), self.values[f])).collect();
        format!("Statistics: {}. ", body.join(", "))
    }

    fn knowledge(&self) -> String {
        if !self.parts.knowledge {
            return String::new();
        }
        format!("Knowledge: {}", self.knowledge.join(" "))
    }
}

/// One rendered text view; the full text is `task + stat + knowledge`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextView {
    pub task_part: String,
    pub stat_part: String,
    pub knowledge_part: String,
    pub tokens: Vec<usize>,
    pub is_negative: bool,
    pub negative_kind: TextNegativeKind,
    fields: Option<TemplateFields>,
}

impl TextView {
    pub fn text(&self) -> String {
        format!("{}{}{}", self.task_part, self.stat_part, self.knowledge_part)
    }

    fn from_fields(fields: TemplateFields, tokenizer: &Tokenizer) -> Self {
        let (task_part, stat_part, knowledge_part) = (fields.task(), fields.stat(), fields.knowledge());
        let tokens = tokenizer.tokenize(&format!("{task_part}{stat_part}{knowledge_part}"));
        Self {
            task_part,
            stat_part,
            knowledge_part,
            tokens,
            is_negative: false,
            negative_kind: TextNegativeKind::None,
            fields: Some(fields),
        }
    }

    /// Wraps externally generated text; it is kept whole in the knowledge part.
    pub fn external(text: &str, tokenizer: &Tokenizer) -> Self {
        Self {
            task_part: String::new(),
            stat_part: String::new(),
            knowledge_part: text.to_string(),
            tokens: tokenizer.tokenize(text),
            is_negative: false,
            negative_kind: TextNegativeKind::None,
            fields: None,
        }
    }
}

fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Renders the fixed template for one window.
pub fn render_text(
    stats: &WindowStats,
    meta: TextMeta,
    rules: &RuleTable,
    parts: TextParts,
    tokenizer: &Tokenizer,
) -> TextView {
    let values = StatField::ALL.iter().map(|&f| (f, fmt3(f.value(stats)))).collect();
    let knowledge = rules.statements(stats).into_iter().map(String::from).collect();
    TextView::from_fields(TemplateFields { meta, values, knowledge, parts }, tokenizer)
}

/// Replaces `field` with an implausible value.
pub fn semantic_tamper(view: &TextView, field: StatField, rng: &mut impl Rng, tokenizer: &Tokenizer) -> Result<TextView> {
    let fields = positive_fields(view)?;
    if !fields.parts.stat {
        return Err(Error::Contract("no statistics part to tamper with".into()));
    }
    let parse = |f: StatField| fields.values[&f].parse::<f64>().unwrap_or(0.0);
    let jump = f64::from(rng.gen_range(10u32..100));
    let bogus = match field {
        StatField::Seasonality => format!("{}", rng.gen_range(2u32..100)),
        StatField::Kurtosis => format!("-{}", rng.gen_range(1u32..10)),
        StatField::Min => fmt3(parse(StatField::Max) + jump),
        StatField::Max => fmt3(parse(StatField::Min) - jump),
        StatField::Mean => fmt3(parse(StatField::Max) + jump),
        StatField::Trend | StatField::Skewness => fmt3(-parse(field).signum() * jump),
    };
    let mut fields = fields.clone();
    fields.values.insert(field, bogus);
    let mut out = TextView::from_fields(fields, tokenizer);
    out.is_negative = true;
    out.negative_kind = TextNegativeKind::SemanticTamper;
    Ok(out)
}

/// Swaps the entity level named in the task part.
pub fn context_swap(view: &TextView, rng: &mut impl Rng, tokenizer: &Tokenizer) -> Result<TextView> {
    let mut fields = positive_fields(view)?.clone();
    fields.meta.entity_level = match fields.meta.entity_level {
        EntityLevel::User => EntityLevel::DistributionNetwork,
        EntityLevel::DistributionNetwork => EntityLevel::User,
        EntityLevel::Building => {
            if rng.gen_bool(0.5) {
                EntityLevel::User
            } else {
                EntityLevel::DistributionNetwork
            }
        }
    };
    let mut out = TextView::from_fields(fields, tokenizer);
    out.is_negative = true;
    out.negative_kind = TextNegativeKind::ContextSwap;
    Ok(out)
}

fn positive_fields(view: &TextView) -> Result<&TemplateFields> {
    if view.is_negative {
        return Err(Error::Contract("negatives are built from positive views".into()));
    }
    view.fields.as_ref().ok_or_else(|| Error::Contract("external text has no template fields".into()))
}

/// Fields a semantic tamper may corrupt.
pub const TAMPER_FIELDS: [StatField; 5] =
    [StatField::Seasonality, StatField::Min, StatField::Max, StatField::Mean, StatField::Kurtosis];

/// Builds a negative of the requested kind; exactly one template field changes.
pub fn make_text_negative(
    view: &TextView,
    kind: TextNegativeKind,
    rng: &mut impl Rng,
    tokenizer: &Tokenizer,
) -> Result<TextView> {
    match kind {
        TextNegativeKind::ContextSwap => context_swap(view, rng, tokenizer),
        TextNegativeKind::SemanticTamper => {
            let field = TAMPER_FIELDS[rng.gen_range(0..TAMPER_FIELDS.len())];
            semantic_tamper(view, field, rng, tokenizer)
        }
        TextNegativeKind::None => Err(Error::Contract("negative kind 'none' is not a negative".into())),
    }
}

/// Reads `<index>.txt` files from a directory.
pub fn load_external_texts(dir: &Path) -> Result<BTreeMap<usize, String>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.insert(idx, std::fs::read_to_string(&path)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

pub const UNK: &str = "<unk>";

/// Word-level tokenizer with digit-wise numbers. A word token may carry one
/// leading space; digits, punctuation and other spaces are single-char tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn pieces(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        let ch = text[i..].chars().next().expect("in bounds");
        let word_after_space = ch == ' '
            && text[i + 1..].chars().next().is_some_and(|c| c.is_ascii_alphabetic());
        if ch.is_ascii_alphabetic() || word_after_space {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
        } else {
            i += ch.len_utf8();
        }
        out.push(&text[start..i]);
    }
    out
}

impl Tokenizer {
    /// Vocabulary of `<unk>`, printable ASCII symbols and every word piece in
    /// `corpus`, in a deterministic order.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = vec![UNK.to_string()];
        vocab.extend((0x20u8..0x7f).filter(|b| !b.is_ascii_alphabetic()).map(|b| (b as char).to_string()));
        let words: BTreeSet<String> = corpus
            .into_iter()
            .flat_map(pieces)
            .filter(|p| p.chars().any(|c| c.is_ascii_alphabetic()))
            .map(String::from)
            .collect();
        vocab.extend(words);
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, index }
    }

    /// Vocabulary covering every string the template and `rules` can emit.
    pub fn for_templates(rules: &RuleTable) -> Self {
        let mut corpus: Vec<String> = vec![
            "Task: forecast the next steps of load sampled every min hour day. ".into(),
            " Statistics: Knowledge: ".into(),
        ];
        for level in [EntityLevel::User, EntityLevel::Building, EntityLevel::DistributionNetwork] {
            corpus.push(format!(" of {level} load"));
        }
        corpus.extend(StatField::ALL.iter().map(|f| format!(", {} <", f.label())));
        corpus.extend(rules.rules.iter().map(|r| format!(" {}", r.statement)));
        corpus.push(format!(" {}", rules.default_statement));
        Self::from_corpus(corpus.iter().map(String::as_str))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        pieces(text).into_iter().map(|p| self.index.get(p).copied().unwrap_or(0)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab.get(i).map_or(UNK, String::as_str)).collect()
    }
}
