//! Bidirectional InfoNCE and the redundancy/synergy training objective.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Squared Euclidean distance between L2-normalized rows.
    NormalizedSqEuclidean,
    SqEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Weight of the reverse direction.
    pub eta: f64,
    pub distance: Distance,
    /// Weights of the series-text and series-image redundancy terms.
    pub alpha: [f64; 2],
    /// Weights of the fused-vs-series, fused-vs-text and fused-vs-image
    /// synergy terms.
    pub beta: [f64; 3],
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            eta: 0.5,
            distance: Distance::NormalizedSqEuclidean,
            alpha: [1.0, 1.0],
            beta: [1.0, 1.0, 1.0],
            lambda1: 0.1,
            lambda2: 0.3,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda weights must be nonnegative".into()));
        }
        if self.alpha.iter().chain(&self.beta).any(|w| *w < 0.0) {
            return Err(Error::Config("alpha and beta weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `−(1/N) Σ_i log softmax_j(−D(a_i, c_j)/τ)[i]` where the candidates `c` are
/// the targets followed by any constructed negatives.
pub fn info_nce_directional(
    tape: &mut Tape,
    anchors: Var,
    targets: Var,
    negatives: Option<Var>,
    tau: f64,
    distance: Distance,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let n = tape.value(anchors).rows();
    if tape.value(targets).rows() != n {
        return Err(Error::Contract("anchors and targets must pair row by row".into()));
    }
    let candidates = match negatives {
        Some(neg) => tape.concat(&[targets, neg], 0)?,
        None => targets,
    };
    let (a, c) = match distance {
        Distance::NormalizedSqEuclidean => (tape.l2_normalize_rows(anchors)?, tape.l2_normalize_rows(candidates)?),
        Distance::SqEuclidean => (anchors, candidates),
    };
    let dist = tape.sq_dist(a, c)?;
    nce_from_distances(tape, dist, tau)
}

/// InfoNCE on an `N × M` distance matrix whose first `N` columns hold the
/// positives on the diagonal.
pub fn nce_from_distances(tape: &mut Tape, dist: Var, tau: f64) -> Result<Var> {
    let (n, m) = (tape.value(dist).rows(), tape.value(dist).cols());
    if m < n {
        return Err(Error::Contract(format!("{n} anchors but only {m} candidates")));
    }
    let logits = tape.scale(dist, -1.0 / tau);
    let logp = tape.log_softmax(logits, 1)?;
    let mut mask = Tensor::zeros(&[n, m]);
    for i in 0..n {
        mask.data_mut()[i * m + i] = 1.0;
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// `L_{x→y} + η·L_{y→x}`; `neg_y` joins the forward denominators, `neg_x` the
/// reverse ones.
pub fn info_nce(
    tape: &mut Tape,
    e_x: Var,
    e_y: Var,
    neg_x: Option<Var>,
    neg_y: Option<Var>,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let fwd = info_nce_directional(tape, e_x, e_y, neg_y, cfg.tau, cfg.distance)?;
    let rev = info_nce_directional(tape, e_y, e_x, neg_x, cfg.tau, cfg.distance)?;
    let rev = tape.scale(rev, cfg.eta);
    Ok(tape.add(fwd, rev)?)
}

/// Embedded constructed negatives, one row each.
#[derive(Debug, Clone, Copy, Default)]
pub struct Negatives {
    pub text: Option<Var>,
    pub image: Option<Var>,
}

/// A weighted loss together with its weighted sub-terms.
#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

type Term<'a> = (&'static str, f64, Box<dyn FnOnce(&mut Tape) -> Result<Var> + 'a>);

/// Sums weighted terms. Zero-weight terms are not evaluated and are logged
/// as constant zeros.
fn weighted_sum(tape: &mut Tape, parts: Vec<Term<'_>>) -> Result<WeightedLoss> {
    let mut terms = Vec::with_capacity(parts.len());
    let mut total: Option<Var> = None;
    for (name, w, f) in parts {
        if w == 0.0 {
            terms.push((name, tape.constant(Tensor::scalar(0.0))));
            continue;
        }
        let v = f(tape)?;
        let wv = tape.scale(v, w);
        terms.push((name, wv));
        total = Some(match total {
            Some(t) => tape.add(t, wv)?,
            None => wv,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(WeightedLoss { total, terms })
}

/// `α₁·NCE(h_X, h_T) + α₂·NCE(h_X, h_I)` on pooled per-window rows.
pub fn loss_rdn(tape: &mut Tape, h_x: Var, h_t: Var, h_i: Var, neg: Negatives, cfg: &ContrastiveConfig) -> Result<WeightedLoss> {
    weighted_sum(
        tape,
        vec![
            ("rdn_xt", cfg.alpha[0], Box::new(|t: &mut Tape| info_nce(t, h_x, h_t, None, neg.text, cfg))),
            ("rdn_xi", cfg.alpha[1], Box::new(|t: &mut Tape| info_nce(t, h_x, h_i, None, neg.image, cfg))),
        ],
    )
}

/// `β₁·NCE(h_F, h_X) + β₂·NCE(h_F, h_T) + β₃·NCE(h_F, h_I)`.
pub fn loss_syn(
    tape: &mut Tape,
    h_f: Var,
    h_x: Var,
    h_t: Var,
    h_i: Var,
    neg: Negatives,
    cfg: &ContrastiveConfig,
) -> Result<WeightedLoss> {
    weighted_sum(
        tape,
        vec![
            ("syn_fx", cfg.beta[0], Box::new(|t: &mut Tape| info_nce(t, h_f, h_x, None, None, cfg))),
            ("syn_ft", cfg.beta[1], Box::new(|t: &mut Tape| info_nce(t, h_f, h_t, None, neg.text, cfg))),
            ("syn_fi", cfg.beta[2], Box::new(|t: &mut Tape| info_nce(t, h_f, h_i, None, neg.image, cfg))),
        ],
    )
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_prediction: f64,
    pub l_rdn: f64,
    pub l_syn: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weighted sub-terms, e.g. `rdn_xt`.
    pub components: Vec<(String, f64)>,
}

impl LossBreakdown {
    /// `λ₁ / λ₂`, when `λ₂ > 0`.
    pub fn lambda_ratio(&self) -> Option<f64> {
        (self.lambda2 > 0.0).then(|| self.lambda1 / self.lambda2)
    }

    pub fn identity_residual(&self) -> f64 {
        (self.l_total - (self.l_prediction + self.lambda1 * self.l_rdn + self.lambda2 * self.l_syn)).abs()
    }
}

pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `L_total = MSE(pred, target) + λ₁·L_rdn + λ₂·L_syn`. Missing contrastive
/// terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    rdn: Option<&WeightedLoss>,
    syn: Option<&WeightedLoss>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, LossBreakdown)> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::Config("lambda weights must be nonnegative".into()));
    }
    let l_pred = mse(tape, pred, target)?;
    let mut total = l_pred;
    let mut components = Vec::new();
    let (mut l_rdn, mut l_syn) = (0.0, 0.0);
    for (loss, lambda, slot) in [(rdn, lambda1, &mut l_rdn), (syn, lambda2, &mut l_syn)] {
        if let Some(w) = loss {
            *slot = tape.scalar(w.total);
            components.extend(w.terms.iter().map(|(n, v)| (n.to_string(), tape.scalar(*v))));
            let scaled = tape.scale(w.total, lambda);
            total = tape.add(total, scaled)?;
        }
    }
    let breakdown = LossBreakdown {
        l_prediction: tape.scalar(l_pred),
        l_rdn,
        l_syn,
        l_total: tape.scalar(total),
        lambda1,
        lambda2,
        components,
    };
    Ok((total, breakdown))
}

/// Per-step CSV log of loss breakdowns.
pub struct LossLog {
    writer: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,l_prediction,l_rdn,l_syn,l_total";

    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(writer, "{}", Self::HEADER)?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, step: usize, b: &LossBreakdown) -> Result<()> {
        writeln!(self.writer, "{step},{:e},{:e},{:e},{:e}", b.l_prediction, b.l_rdn, b.l_syn, b.l_total)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Straight-line directional loss on raw rows.
    fn oracle_dir(a: &[Vec<f64>], c: &[Vec<f64>], tau: f64, normalize: bool) -> f64 {
        let norm = |v: &Vec<f64>| -> Vec<f64> {
            if !normalize {
                return v.clone();
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let a: Vec<Vec<f64>> = a.iter().map(norm).collect();
        let c: Vec<Vec<f64>> = c.iter().map(norm).collect();
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let mut loss = 0.0;
        for (i, ai) in a.iter().enumerate() {
            let num = (-d(ai, &c[i]) / tau).exp();
            let den: f64 = c.iter().map(|cj| (-d(ai, cj) / tau).exp()).sum();
            loss -= (num / den).ln();
        }
        loss / a.len() as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn eval_dir(a: Tensor, t: Tensor, neg: Option<Tensor>, tau: f64, dist: Distance) -> f64 {
        let mut tape = Tape::new();
        let (a, t) = (tape.leaf(a, false), tape.leaf(t, false));
        let neg = neg.map(|n| tape.leaf(n, false));
        let l = info_nce_directional(&mut tape, a, t, neg, tau, dist).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn single_pair_is_zero() {
        let l = eval_dir(rows(&[&[1.0, 2.0]]), rows(&[&[-3.0, 0.5]]), None, 0.1, Distance::NormalizedSqEuclidean);
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn two_pair_hand_value() {
        // cross pairs at squared distance 2 on the unit circle
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l1 = eval_dir(e.clone(), e.clone(), None, 1.0, Distance::NormalizedSqEuclidean);
        assert!((l1 - 0.126_928_011_042_972_5).abs() < 1e-12);
        let l01 = eval_dir(e.clone(), e, None, 0.1, Distance::NormalizedSqEuclidean);
        assert!(l01 <= l1);
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(1.0).reshape(&[1, 1]).unwrap(), false);
        assert!(matches!(info_nce_directional(&mut tape, v, v, None, 0.0, Distance::SqEuclidean), Err(Error::Config(_))));
    }

    #[test]
    fn directional_matches_oracle_with_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (a, t, neg) = (random_rows(&mut rng, 4, 6), random_rows(&mut rng, 4, 6), random_rows(&mut rng, 3, 6));
            let mut cands = t.clone();
            cands.extend(neg.clone());
            for (dist, normalize) in [(Distance::NormalizedSqEuclidean, true), (Distance::SqEuclidean, false)] {
                let got = eval_dir(
                    Tensor::from_rows(&a).unwrap(),
                    Tensor::from_rows(&t).unwrap(),
                    Some(Tensor::from_rows(&neg).unwrap()),
                    0.5,
                    dist,
                );
                assert!((got - oracle_dir(&a, &cands, 0.5, normalize)).abs() < 1e-12);
                assert!(got >= 0.0);
            }
        }
    }

    fn eval_nce(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &ContrastiveConfig) -> (f64, f64) {
        let mut tape = Tape::new();
        let ex = tape.leaf(Tensor::from_rows(x).unwrap(), false);
        let ey = tape.leaf(Tensor::from_rows(y).unwrap(), false);
        let total = info_nce(&mut tape, ex, ey, None, None, cfg).unwrap();
        let fwd = info_nce_directional(&mut tape, ex, ey, None, cfg.tau, cfg.distance).unwrap();
        (tape.scalar(total), tape.scalar(fwd))
    }

    #[test]
    fn bidirectional_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_rows(&mut rng, 4, 5);
        let cfg = ContrastiveConfig::default();
        let (total, fwd) = eval_nce(&x, &x, &cfg);
        assert!((total - (1.0 + cfg.eta) * fwd).abs() < 1e-12);
        let y = random_rows(&mut rng, 4, 5);
        let mut tiny = cfg.clone();
        tiny.eta = 1e-300;
        let (total, fwd) = eval_nce(&x, &y, &tiny);
        assert!((total - fwd).abs() < 1e-12);
        let (total, _) = eval_nce(&x, &y, &cfg);
        let expect = oracle_dir(&x, &y, cfg.tau, true) + cfg.eta * oracle_dir(&y, &x, cfg.tau, true);
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn shrinking_positive_distance_never_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eval = |d: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(vec![4, 6], d.to_vec()).unwrap(), false);
            let l = nce_from_distances(&mut tape, v, 0.5).unwrap();
            tape.scalar(l)
        };
        for _ in 0..50 {
            let mut d: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..4.0)).collect();
            let before = eval(&d);
            let i = rng.gen_range(0..4);
            d[i * 6 + i] *= rng.gen_range(0.0..1.0);
            assert!(eval(&d) <= before + 1e-12);
        }
    }

    struct Batch {
        x: Vec<Vec<f64>>,
        t: Vec<Vec<f64>>,
        i: Vec<Vec<f64>>,
        f: Vec<Vec<f64>>,
    }

    fn objective(b: &Batch, cfg: &ContrastiveConfig) -> (f64, f64) {
        let mut tape = Tape::new();
        let leaf = |tape: &mut Tape, r: &[Vec<f64>]| tape.leaf(Tensor::from_rows(r).unwrap(), false);
        let (x, t, i, f) = (leaf(&mut tape, &b.x), leaf(&mut tape, &b.t), leaf(&mut tape, &b.i), leaf(&mut tape, &b.f));
        let r = loss_rdn(&mut tape, x, t, i, Negatives::default(), cfg).unwrap();
        let s = loss_syn(&mut tape, f, x, t, i, Negatives::default(), cfg).unwrap();
        (tape.scalar(r.total), tape.scalar(s.total))
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
        Batch { x: random_rows(rng, 4, 6), t: random_rows(rng, 4, 6), i: random_rows(rng, 4, 6), f: random_rows(rng, 4, 6) }
    }

    #[test]
    fn weight_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = random_batch(&mut rng);
        let base = ContrastiveConfig::default();
        let nce = |x: &[Vec<f64>], y: &[Vec<f64>]| {
            oracle_dir(x, y, base.tau, true) + base.eta * oracle_dir(y, x, base.tau, true)
        };
        let cfg = ContrastiveConfig { alpha: [0.0, 2.0], beta: [1.5, 0.0, 0.0], ..base.clone() };
        let (r, s) = objective(&b, &cfg);
        assert!((r - 2.0 * nce(&b.x, &b.i)).abs() < 1e-12);
        assert!((s - 1.5 * nce(&b.f, &b.x)).abs() < 1e-12);
    }

    #[test]
    fn aligned_pairs_beat_permuted_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_rows(&mut rng, 4, 6);
        let aligned = Batch { x: x.clone(), t: x.clone(), i: x.clone(), f: x.clone() };
        let mut perm = x.clone();
        perm.rotate_left(1);
        let shuffled = Batch { x: x.clone(), t: perm.clone(), i: perm.clone(), f: perm };
        let cfg = ContrastiveConfig::default();
        let (ra, sa) = objective(&aligned, &cfg);
        let (rp, sp) = objective(&shuffled, &cfg);
        assert!(ra < rp && sa < sp);
    }

    #[test]
    fn batch_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let b = random_batch(&mut rng);
        let order = [2usize, 0, 3, 1];
        let p = |v: &Vec<Vec<f64>>| order.iter().map(|&k| v[k].clone()).collect::<Vec<_>>();
        let permuted = Batch { x: p(&b.x), t: p(&b.t), i: p(&b.i), f: p(&b.f) };
        let cfg = ContrastiveConfig::default();
        let (r1, s1) = objective(&b, &cfg);
        let (r2, s2) = objective(&permuted, &cfg);
        assert!((r1 - r2).abs() < 1e-12 && (s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn negatives_only_enter_their_target_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (x, t, neg) = (random_rows(&mut rng, 3, 4), random_rows(&mut rng, 3, 4), random_rows(&mut rng, 3, 4));
        let cfg = ContrastiveConfig::default();
        let mut tape = Tape::new();
        let ex = tape.leaf(Tensor::from_rows(&x).unwrap(), false);
        let et = tape.leaf(Tensor::from_rows(&t).unwrap(), false);
        let en = tape.leaf(Tensor::from_rows(&neg).unwrap(), false);
        let l = info_nce(&mut tape, ex, et, None, Some(en), &cfg).unwrap();
        let mut cands = t.clone();
        cands.extend(neg);
        let expect = oracle_dir(&x, &cands, cfg.tau, true) + cfg.eta * oracle_dir(&t, &x, cfg.tau, true);
        assert!((tape.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let b = random_batch(&mut rng);
        let negs = random_rows(&mut rng, 4, 6);
        let cfg = ContrastiveConfig::default();
        let eval = |t_rows: &[Vec<f64>], grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let leaf = |tape: &mut Tape, r: &[Vec<f64>], g: bool| tape.leaf(Tensor::from_rows(r).unwrap(), g);
            let x = leaf(&mut tape, &b.x, false);
            let t = leaf(&mut tape, t_rows, grad);
            let i = leaf(&mut tape, &b.i, false);
            let f = leaf(&mut tape, &b.f, false);
            let n = leaf(&mut tape, &negs, false);
            let neg = Negatives { text: Some(n), image: None };
            let r = loss_rdn(&mut tape, x, t, i, neg, &cfg).unwrap();
            let s = loss_syn(&mut tape, f, x, t, i, neg, &cfg).unwrap();
            let tot = tape.add(r.total, s.total).unwrap();
            let v = tape.scalar(tot);
            let g = grad.then(|| tape.backward(tot).unwrap().get(t).unwrap().to_vec());
            (v, g)
        };
        let (_, g) = eval(&b.t, true);
        let g = g.unwrap();
        let h = 1e-5;
        for k in 0..24 {
            let (r, c) = (k / 6, k % 6);
            let mut plus = b.t.clone();
            plus[r][c] += h;
            let mut minus = b.t.clone();
            minus[r][c] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-3 * fd.abs().max(1e-3), "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn total_loss_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = random_batch(&mut rng);
        let cfg = ContrastiveConfig::default();
        let mut tape = Tape::new();
        let leaf = |tape: &mut Tape, r: &[Vec<f64>]| tape.leaf(Tensor::from_rows(r).unwrap(), false);
        let (x, t, i, f) = (leaf(&mut tape, &b.x), leaf(&mut tape, &b.t), leaf(&mut tape, &b.i), leaf(&mut tape, &b.f));
        let r = loss_rdn(&mut tape, x, t, i, Negatives::default(), &cfg).unwrap();
        let s = loss_syn(&mut tape, f, x, t, i, Negatives::default(), &cfg).unwrap();
        let (_, bd) = total_loss(&mut tape, x, t, Some(&r), Some(&s), cfg.lambda1, cfg.lambda2).unwrap();
        assert!(bd.identity_residual() < 1e-12);
        assert!((bd.lambda_ratio().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bd.components.len(), 5);
        let sum_rdn: f64 = bd.components.iter().filter(|(n, _)| n.starts_with("rdn")).map(|(_, v)| v).sum();
        assert!((sum_rdn - bd.l_rdn).abs() < 1e-12);

        let (_, bd) = total_loss(&mut tape, x, t, Some(&r), Some(&s), 0.0, 0.0).unwrap();
        let direct: f64 = b.x.iter().flatten().zip(b.t.iter().flatten()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 24.0;
        assert!((bd.l_total - direct).abs() < 1e-12);
        let (_, bd) = total_loss(&mut tape, x, x, None, None, 0.1, 0.3).unwrap();
        assert_eq!(bd.l_prediction, 0.0);
        assert!(matches!(total_loss(&mut tape, x, t, None, None, -1.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_and_log() {
        assert!(ContrastiveConfig::default().validate().is_ok());
        assert!(ContrastiveConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ContrastiveConfig { eta: 1.0, ..Default::default() }.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut log = LossLog::create(&path).unwrap();
        let bd = LossBreakdown { l_prediction: 1.0, l_rdn: 2.0, l_syn: 3.0, l_total: 2.0, lambda1: 0.1, lambda2: 0.3, components: vec![] };
        log.append(0, &bd).unwrap();
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(LossLog::HEADER));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn zero_weights_skip_degenerate_terms() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), true);
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let cfg = ContrastiveConfig { alpha: [0.0, 1.0], beta: [1.0, 0.0, 1.0], ..Default::default() };
        let r = loss_rdn(&mut tape, x, zero, x, Negatives::default(), &cfg).unwrap();
        let s = loss_syn(&mut tape, x, x, zero, x, Negatives::default(), &cfg).unwrap();
        assert!(tape.scalar(r.total).is_finite() && tape.scalar(s.total).is_finite());
        assert_eq!(tape.scalar(r.terms[0].1), 0.0);
        assert_eq!(tape.scalar(s.terms[1].1), 0.0);
        let off = ContrastiveConfig { alpha: [0.0; 2], beta: [0.0; 3], ..Default::default() };
        let r = loss_rdn(&mut tape, x, zero, zero, Negatives::default(), &off).unwrap();
        assert_eq!(tape.scalar(r.total), 0.0);
    }
}
