//! Partial information decomposition of small discrete systems using the
//! Williams-Beer `I_min` redundancy measure on the full antichain lattice.
//!
//! Sources are indexed from 0 and subsets are bitmasks. For three sources the
//! order is `X, T, I`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_SOURCES: usize = 3;
pub const MAX_CARDINALITY: usize = 8;
/// Slack for probability sums and atom nonnegativity.
pub const TOLERANCE: f64 = 1e-9;

/// Joint table over `sources..., target`, row-major with the target varying
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    names: Vec<String>,
    cards: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    /// `cards` and `names` list the sources followed by the target.
    pub fn new(names: Vec<String>, cards: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let n_src = cards.len().saturating_sub(1);
        if n_src == 0 || n_src > MAX_SOURCES {
            return Err(Error::Contract(format!("need 1..={MAX_SOURCES} sources plus a target, got {} variables", cards.len())));
        }
        if names.len() != cards.len() {
            return Err(Error::Contract("one name per variable required".into()));
        }
        if cards.iter().any(|&c| c == 0 || c > MAX_CARDINALITY) {
            return Err(Error::Contract(format!("cardinalities must lie in 1..={MAX_CARDINALITY}")));
        }
        let size: usize = cards.iter().product();
        if probs.len() != size {
            return Err(Error::Contract(format!("table has {} cells, expected {size}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { names, cards, probs })
    }

    /// Default names: `X, T, I, Y` for three sources, `M1.., Y` otherwise.
    pub fn with_default_names(cards: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let n_src = cards.len().saturating_sub(1);
        let mut names: Vec<String> = if n_src == 3 {
            ["X", "T", "I"].map(String::from).to_vec()
        } else {
            (1..=n_src).map(|i| format!("M{i}")).collect()
        };
        names.push("Y".into());
        Self::new(names, cards, probs)
    }

    /// Builds a table from a deterministic or stochastic map `sources -> y`.
    pub fn from_fn(cards: Vec<usize>, mut p: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let size: usize = cards.iter().product();
        let probs = (0..size).map(|i| p(&unravel(i, &cards))).collect();
        Self::with_default_names(cards, probs)
    }

    /// Random table with cell masses drawn from `U(0,1)` and normalized.
    pub fn random(cards: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let size: usize = cards.iter().product();
        let raw: Vec<f64> = (0..size).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // absorb rounding so the sum check is exact enough
        let drift: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += drift;
        Self::with_default_names(cards, probs)
    }

    pub fn n_sources(&self) -> usize {
        self.cards.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, outcome: &[usize]) -> f64 {
        self.probs[ravel(outcome, &self.cards)]
    }

    /// `p(a, y)` where `a` is the joint value of the sources in `mask`,
    /// returned as `(table[a][y], cardinality of a)`.
    fn marginal(&self, mask: u8) -> (Vec<Vec<f64>>, usize) {
        let n = self.n_sources();
        let ky = self.cards[n];
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let ka: usize = members.iter().map(|&i| self.cards[i]).product();
        let mut table = vec![vec![0.0; ky]; ka];
        for (cell, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let idx = unravel(cell, &self.cards);
            let mut a = 0;
            for &i in &members {
                a = a * self.cards[i] + idx[i];
            }
            table[a][idx[n]] += p;
        }
        (table, ka)
    }

    fn target_marginal(&self) -> Vec<f64> {
        let ky = self.cards[self.n_sources()];
        let mut py = vec![0.0; ky];
        for (cell, &p) in self.probs.iter().enumerate() {
            py[cell % ky] += p;
        }
        py
    }

    /// Reads a plain-text table: optional header of variable names, then one
    /// row per outcome holding integer values followed by the probability.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<Vec<String>> = None;
        let mut rows: Vec<(usize, Vec<usize>, f64)> = Vec::new();
        let mut width = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
            let err = |message: String| Error::Parse { line: i + 1, message };
            if rows.is_empty() && header.is_none() && toks.iter().any(|t| t.parse::<f64>().is_err()) {
                let mut names: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
                if matches!(names.last().map(String::as_str), Some("p" | "prob" | "probability")) {
                    names.pop();
                }
                header = Some(names);
                continue;
            }
            if toks.len() < 3 {
                return Err(err("expected at least two values and a probability".into()));
            }
            if *width.get_or_insert(toks.len()) != toks.len() {
                return Err(err(format!("expected {} columns, found {}", width.unwrap_or(0), toks.len())));
            }
            let (vals, p) = toks.split_at(toks.len() - 1);
            let vals = vals
                .iter()
                .map(|t| t.parse::<usize>().map_err(|_| err(format!("'{t}' is not a nonnegative integer"))))
                .collect::<Result<Vec<_>>>()?;
            let p: f64 = p[0].parse().map_err(|_| err(format!("'{}' is not a probability", p[0])))?;
            rows.push((i + 1, vals, p));
        }
        let Some(w) = width else {
            return Err(Error::Parse { line: 0, message: "no outcome rows".into() });
        };
        let n_vars = w - 1;
        let mut cards = vec![1; n_vars];
        for (_, vals, _) in &rows {
            for (c, v) in cards.iter_mut().zip(vals) {
                *c = (*c).max(v + 1);
            }
        }
        if let Some((line, _, _)) = rows.iter().find(|(_, vals, _)| vals.iter().any(|&v| v >= MAX_CARDINALITY)) {
            return Err(Error::Parse { line: *line, message: format!("values must be below {MAX_CARDINALITY}") });
        }
        let mut probs = vec![0.0; cards.iter().product()];
        let mut seen = vec![false; probs.len()];
        for (line, vals, p) in &rows {
            let idx = ravel(vals, &cards);
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Parse { line: *line, message: "duplicate outcome".into() });
            }
            probs[idx] = *p;
        }
        match header {
            Some(names) if names.len() != n_vars => Err(Error::Parse {
                line: 1,
                message: format!("header names {} variables, rows have {n_vars}", names.len()),
            }),
            Some(names) => Self::new(names, cards, probs),
            None => Self::with_default_names(cards, probs),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn unravel(mut i: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for (o, &c) in out.iter_mut().zip(cards).rev() {
        *o = i % c;
        i /= c;
    }
    out
}

fn ravel(idx: &[usize], cards: &[usize]) -> usize {
    idx.iter().zip(cards).fold(0, |acc, (&i, &c)| acc * c + i)
}

fn xlog2(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        0.0
    } else {
        (num / den).log2()
    }
}

/// Shannon `I(Y; M_subset)` in bits. `subset` lists source indices.
pub fn mutual_info(joint: &DiscreteJoint, subset: &[usize]) -> Result<f64> {
    let mask = subset_mask(joint, subset)?;
    Ok(mi_mask(joint, mask))
}

fn subset_mask(joint: &DiscreteJoint, subset: &[usize]) -> Result<u8> {
    if subset.is_empty() {
        return Err(Error::Contract("source subset must be nonempty".into()));
    }
    subset.iter().try_fold(0u8, |m, &i| {
        if i >= joint.n_sources() {
            Err(Error::Contract(format!("source index {i} out of range")))
        } else {
            Ok(m | (1 << i))
        }
    })
}

fn mi_mask(joint: &DiscreteJoint, mask: u8) -> f64 {
    let (table, _) = joint.marginal(mask);
    let py = joint.target_marginal();
    let mut mi = 0.0;
    for row in &table {
        let pa: f64 = row.iter().sum();
        for (y, &p) in row.iter().enumerate() {
            mi += p * xlog2(p, pa * py[y]);
        }
    }
    mi.max(0.0)
}

/// Specific information `I_spec(y; A)` for every target value `y`.
fn specific_info(joint: &DiscreteJoint, mask: u8) -> Vec<f64> {
    let (table, _) = joint.marginal(mask);
    let py = joint.target_marginal();
    (0..py.len())
        .map(|y| {
            if py[y] == 0.0 {
                return 0.0;
            }
            table
                .iter()
                .map(|row| {
                    let pa: f64 = row.iter().sum();
                    let pay = row[y];
                    // p(a|y) log p(y|a)/p(y)
                    (pay / py[y]) * xlog2(pay, pa * py[y])
                })
                .sum()
        })
        .collect()
}

/// A lattice node: a set of source subsets, none contained in another.
pub type Antichain = Vec<u8>;

/// All antichains of nonempty source subsets, ordered so that every node
/// comes after the nodes below it.
pub fn antichains(n_sources: usize) -> Vec<Antichain> {
    let subsets: Vec<u8> = (1..(1u8 << n_sources)).collect();
    let mut out = Vec::new();
    for pick in 1u32..(1 << subsets.len()) {
        let chosen: Vec<u8> = subsets.iter().enumerate().filter(|(i, _)| pick & (1 << i) != 0).map(|(_, &s)| s).collect();
        let ok = chosen.iter().all(|&a| chosen.iter().all(|&b| a == b || a & b != a));
        if ok {
            out.push(chosen);
        }
    }
    // downset size is a linear extension of the order
    let sizes: Vec<usize> = out.iter().map(|a| out.iter().filter(|b| precedes(b, a)).count()).collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by_key(|&i| (sizes[i], out[i].clone()));
    order.into_iter().map(|i| out[i].clone()).collect()
}

/// `alpha ≼ beta`: every element of `beta` contains some element of `alpha`.
pub fn precedes(alpha: &[u8], beta: &[u8]) -> bool {
    beta.iter().all(|&b| alpha.iter().any(|&a| a & b == a))
}

/// Interaction group of the simplified three-source lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EiGroup {
    Xt,
    Xi,
}

/// Atoms aggregated into `EI_XT` and `EI_XI` (three-source masks
/// `X=1, T=2, I=4`); `EI_XTI` is their union. These are the atoms that remain
/// once `Info(Y;M_X)`, the unique, and the synergy atoms are taken out of a
/// pair's down-set.
pub fn ei_assignment() -> Vec<(Antichain, Vec<EiGroup>)> {
    use EiGroup::*;
    vec![
        (vec![2, 5], vec![Xt, Xi]),
        (vec![4, 3], vec![Xt, Xi]),
        (vec![3, 5, 6], vec![Xt, Xi]),
        (vec![3, 5], vec![Xt, Xi]),
        (vec![3, 6], vec![Xt]),
        (vec![5, 6], vec![Xi]),
    ]
}

/// Atoms forced to zero when `T`–`I` interactions are neglected.
pub fn neglected_atoms() -> Vec<Antichain> {
    vec![vec![2, 4], vec![6]]
}

fn same_node(a: &[u8], b: &[u8]) -> bool {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidAtom {
    pub node: Antichain,
    pub label: String,
    pub bits: f64,
}

/// Decomposition of `I(Y; sources)` into lattice atoms, in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct PidResult {
    pub source_names: Vec<String>,
    pub atoms: Vec<PidAtom>,
    /// Shannon mutual information for every nonempty source subset.
    pub mutual_info: BTreeMap<u8, f64>,
    pub simplified: bool,
    /// Value the neglected atoms had in the full lattice.
    pub neglected_mass: f64,
}

impl PidResult {
    pub fn n_sources(&self) -> usize {
        self.source_names.len()
    }

    pub fn atom(&self, node: &[u8]) -> f64 {
        self.atoms.iter().find(|a| same_node(&a.node, node)).map_or(0.0, |a| a.bits)
    }

    /// Atom by label, e.g. `"{X}{T}"` or `"{X,T}"`.
    pub fn atom_by_label(&self, label: &str) -> Option<f64> {
        self.atoms.iter().find(|a| a.label == label).map(|a| a.bits)
    }

    fn all_mask(&self) -> u8 {
        (1u8 << self.n_sources()) - 1
    }

    /// Sum of (retained) atoms in the down-set of the single-subset node.
    pub fn lattice_info(&self, mask: u8) -> f64 {
        self.atoms.iter().filter(|a| precedes(&a.node, &[mask])).map(|a| a.bits).sum()
    }

    /// Redundancy shared by all sources.
    pub fn redundancy(&self) -> f64 {
        let all: Antichain = (0..self.n_sources()).map(|i| 1u8 << i).collect();
        self.atom(&all)
    }

    /// Redundant part of `Info(Y; M_i)`: its down-set without the unique atom.
    pub fn redundancy_for(&self, i: usize) -> f64 {
        self.lattice_info(1 << i) - self.unique(i)
    }

    pub fn unique(&self, i: usize) -> f64 {
        self.atom(&[1 << i])
    }

    /// Synergy atom of a multi-source subset.
    pub fn synergy(&self, mask: u8) -> f64 {
        self.atom(&[mask])
    }

    /// All atoms with two or more elements.
    pub fn total_redundancy(&self) -> f64 {
        self.atoms.iter().filter(|a| a.node.len() >= 2).map(|a| a.bits).sum()
    }

    /// All single-subset atoms over two or more sources.
    pub fn total_synergy(&self) -> f64 {
        self.atoms.iter().filter(|a| a.node.len() == 1 && a.node[0].count_ones() >= 2).map(|a| a.bits).sum()
    }

    /// `EI_XT`, `EI_XI` or (both groups) `EI_XTI`.
    pub fn entangled(&self, groups: &[EiGroup]) -> f64 {
        ei_assignment()
            .iter()
            .filter(|(_, g)| groups.iter().any(|x| g.contains(x)))
            .map(|(node, _)| self.atom(node))
            .sum()
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms.iter().map(|a| a.bits).fold(f64::INFINITY, f64::min)
    }

    pub fn to_text(&self) -> String {
        let width = self.atoms.iter().map(|a| a.label.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        for a in &self.atoms {
            let _ = writeln!(s, "{:<width$}  {:>12.9}", a.label, a.bits);
        }
        for (&mask, v) in &self.mutual_info {
            let name = format!("I(Y;{})", mask_names(mask, &self.source_names).join(","));
            let _ = writeln!(s, "{name:<width$}  {v:>12.9}");
        }
        if self.simplified {
            let _ = writeln!(s, "{:<width$}  {:>12.9}", "neglected", self.neglected_mass);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,bits\n");
        for a in &self.atoms {
            let _ = writeln!(s, "\"{}\",{:.12}", a.label, a.bits);
        }
        for (&mask, v) in &self.mutual_info {
            let _ = writeln!(s, "\"I(Y;{})\",{v:.12}", mask_names(mask, &self.source_names).join(","));
        }
        s
    }
}

fn mask_names(mask: u8, names: &[String]) -> Vec<String> {
    (0..names.len()).filter(|i| mask & (1 << i) != 0).map(|i| names[i].clone()).collect()
}

pub fn node_label(node: &[u8], names: &[String]) -> String {
    node.iter().map(|&m| format!("{{{}}}", mask_names(m, names).join(","))).collect()
}

/// Full Williams-Beer decomposition over any supported source count.
pub fn decompose(joint: &DiscreteJoint) -> PidResult {
    let n = joint.n_sources();
    let nodes = antichains(n);
    let py = joint.target_marginal();
    let spec: BTreeMap<u8, Vec<f64>> = (1..(1u8 << n)).map(|m| (m, specific_info(joint, m))).collect();
    let i_min = |node: &[u8]| -> f64 {
        (0..py.len()).map(|y| py[y] * node.iter().map(|m| spec[m][y]).fold(f64::INFINITY, f64::min)).sum()
    };
    let mut values: Vec<f64> = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        let below: f64 = (0..k).filter(|&j| precedes(&nodes[j], node)).map(|j| values[j]).sum();
        values.push(i_min(node) - below);
    }
    let names = joint.names()[..n].to_vec();
    let atoms = nodes
        .into_iter()
        .zip(values)
        .map(|(node, bits)| PidAtom { label: node_label(&node, &names), node, bits })
        .collect();
    let mutual_info = (1..(1u8 << n)).map(|m| (m, mi_mask(joint, m))).collect();
    PidResult { source_names: names, atoms, mutual_info, simplified: false, neglected_mass: 0.0 }
}

pub fn decompose2(joint: &DiscreteJoint) -> Result<PidResult> {
    if joint.n_sources() != 2 {
        return Err(Error::Contract(format!("decompose2 needs 2 sources, got {}", joint.n_sources())));
    }
    Ok(decompose(joint))
}

/// Three-source decomposition; with `simplify` the `T`–`I`-only atoms are
/// zeroed.
pub fn decompose3(joint: &DiscreteJoint, simplify: bool) -> Result<PidResult> {
    if joint.n_sources() != 3 {
        return Err(Error::Contract(format!("decompose3 needs 3 sources, got {}", joint.n_sources())));
    }
    let mut out = decompose(joint);
    if simplify {
        let neglected = neglected_atoms();
        for atom in &mut out.atoms {
            if neglected.iter().any(|n| same_node(n, &atom.node)) {
                out.neglected_mass += atom.bits;
                atom.bits = 0.0;
            }
        }
        out.simplified = true;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
}

impl IdentityCheck {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(IdentityCheck::residual).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_residual() < self.tolerance
    }

    pub fn failures(&self) -> Vec<&IdentityCheck> {
        self.checks.iter().filter(|c| c.residual() >= self.tolerance).collect()
    }
}

/// `Info(Y;M_i) = R + U_i` per source and `Info(Y;all) = R + S + ΣU`.
/// Left-hand sides are Shannon values for the full lattice and lattice
/// aggregates when atoms were neglected.
pub fn verify_lemma1(result: &PidResult) -> IdentityReport {
    let lhs = |mask: u8| if result.simplified { result.lattice_info(mask) } else { result.mutual_info[&mask] };
    let mut checks = Vec::new();
    for i in 0..result.n_sources() {
        checks.push(IdentityCheck {
            name: format!("Info(Y;{}) = R + U", result.source_names[i]),
            lhs: lhs(1 << i),
            rhs: result.redundancy_for(i) + result.unique(i),
        });
    }
    let all = result.all_mask();
    let uniques: f64 = (0..result.n_sources()).map(|i| result.unique(i)).sum();
    checks.push(IdentityCheck {
        name: "Info(Y;all) = R + S + sum U".into(),
        lhs: lhs(all),
        rhs: result.total_redundancy() + result.total_synergy() + uniques,
    });
    if !result.simplified {
        for (&mask, &mi) in &result.mutual_info {
            checks.push(IdentityCheck {
                name: format!("downset sum = I(Y;{})", mask_names(mask, &result.source_names).join(",")),
                lhs: mi,
                rhs: result.lattice_info(mask),
            });
        }
    }
    IdentityReport { checks, tolerance: TOLERANCE }
}

/// The three pair/triple identities of the simplified three-source lattice.
/// `Info(Y;M_X)` on the right-hand side is the Shannon value.
pub fn verify_corollary1(result: &PidResult) -> Result<IdentityReport> {
    if !result.simplified || result.n_sources() != 3 {
        return Err(Error::Contract("corollary checks need a simplified three-source decomposition".into()));
    }
    let (x, t, i) = (1u8, 2u8, 4u8);
    let info_x = result.mutual_info[&x];
    let (u_t, u_i) = (result.unique(1), result.unique(2));
    let (s_xt, s_xi, s_xti) = (result.synergy(x | t), result.synergy(x | i), result.synergy(x | t | i));
    use EiGroup::*;
    let checks = vec![
        IdentityCheck {
            name: "Info(Y;X,T) = S_XT + U_T + Info(Y;X) + EI_XT".into(),
            lhs: result.lattice_info(x | t),
            rhs: s_xt + u_t + info_x + result.entangled(&[Xt]),
        },
        IdentityCheck {
            name: "Info(Y;X,I) = S_XI + U_I + Info(Y;X) + EI_XI".into(),
            lhs: result.lattice_info(x | i),
            rhs: s_xi + u_i + info_x + result.entangled(&[Xi]),
        },
        IdentityCheck {
            name: "Info(Y;X,T,I) = S_XTI + S_XI + S_XT + EI_XTI + Info(Y;X) + U_T + U_I".into(),
            lhs: result.lattice_info(x | t | i),
            rhs: s_xti + s_xi + s_xt + result.entangled(&[Xt, Xi]) + info_x + u_t + u_i,
        },
        IdentityCheck { name: "Info(Y;X) from lattice".into(), lhs: info_x, rhs: result.lattice_info(x) },
    ];
    Ok(IdentityReport { checks, tolerance: TOLERANCE })
}

/// Outcome of a randomized identity suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub trials: usize,
    pub max_residual: f64,
    pub min_atom: f64,
}

/// Lemma 1 on random two-source joints.
pub fn lemma1_suite(trials: usize, card: usize, seed: u64) -> Result<SuiteSummary> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = SuiteSummary { trials, max_residual: 0.0, min_atom: f64::INFINITY };
    for _ in 0..trials {
        let r = decompose2(&DiscreteJoint::random(vec![card, card, card], &mut rng)?)?;
        s.max_residual = s.max_residual.max(verify_lemma1(&r).max_residual());
        s.min_atom = s.min_atom.min(r.min_atom());
    }
    Ok(s)
}

/// Corollary identities on random simplified three-source joints.
pub fn corollary1_suite(trials: usize, card: usize, seed: u64) -> Result<SuiteSummary> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = SuiteSummary { trials, max_residual: 0.0, min_atom: f64::INFINITY };
    for _ in 0..trials {
        let joint = DiscreteJoint::random(vec![card; 4], &mut rng)?;
        let r = decompose3(&joint, true)?;
        let worst = verify_corollary1(&r)?.max_residual().max(verify_lemma1(&r).max_residual());
        s.max_residual = s.max_residual.max(worst);
        s.min_atom = s.min_atom.min(decompose3(&joint, false)?.min_atom());
    }
    Ok(s)
}
