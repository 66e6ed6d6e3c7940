//! Conjunctive rules over raw feature values, coverage/purity scoring,
//! density-peak candidate mining, and an append-only JSON-lines rule store.
//!
//! Coverage is the fraction of the anomaly group a rule matches; purity is
//! the fraction of inliers it does *not* match.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureKind, FeatureSchema, Point, Value};

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule has no predicates")]
    EmptyRule,
    #[error("feature `{0}` appears in more than one predicate")]
    DuplicateFeature(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("predicate on `{0}` does not match the feature kind")]
    KindMismatch(String),
    #[error("value `{value}` is not a declared category of `{feature}`")]
    UnknownCategory { feature: String, value: String },
    #[error("interval on `{0}` has lo > hi or a non-finite bound")]
    BadInterval(String),
    #[error("empty anomaly group")]
    EmptyAnomalyGroup,
    #[error("threshold `{0}` must lie in [0, 1]")]
    BadThreshold(&'static str),
    #[error("rule store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("rule store {path}, line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = RuleError> = std::result::Result<T, E>;

/// A single condition. Real features take a closed interval whose ends may
/// be unbounded (`null` in JSON); categorical features take one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Predicate {
    Equals {
        feature: String,
        value: String,
    },
    Interval {
        feature: String,
        lo: Option<f64>,
        hi: Option<f64>,
    },
}

impl Predicate {
    pub fn interval(feature: impl Into<String>, lo: Option<f64>, hi: Option<f64>) -> Self {
        Predicate::Interval {
            feature: feature.into(),
            lo,
            hi,
        }
    }

    pub fn equals(feature: impl Into<String>, value: impl Into<String>) -> Self {
        Predicate::Equals {
            feature: feature.into(),
            value: value.into(),
        }
    }

    pub fn feature(&self) -> &str {
        match self {
            Predicate::Equals { feature, .. } | Predicate::Interval { feature, .. } => feature,
        }
    }

    fn holds(&self, v: &Value) -> bool {
        match (self, v) {
            (Predicate::Interval { lo, hi, .. }, Value::Real(x)) => {
                lo.is_none_or(|lo| *x >= lo) && hi.is_none_or(|hi| *x <= hi)
            }
            (Predicate::Equals { value, .. }, Value::Cat(c)) => value == c,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleSource {
    Mined,
    Analyst,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<RuleSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub meta: RuleMeta,
}

impl Rule {
    pub fn new(predicates: Vec<Predicate>) -> Result<Self> {
        let rule = Self {
            predicates,
            meta: RuleMeta::default(),
        };
        rule.check_shape()?;
        Ok(rule)
    }

    pub fn with_source(mut self, source: RuleSource) -> Self {
        self.meta.source = Some(source);
        self
    }

    fn check_shape(&self) -> Result<()> {
        if self.predicates.is_empty() {
            return Err(RuleError::EmptyRule);
        }
        let mut seen = BTreeSet::new();
        for p in &self.predicates {
            if !seen.insert(p.feature()) {
                return Err(RuleError::DuplicateFeature(p.feature().to_string()));
            }
        }
        Ok(())
    }

    /// Check the rule against a schema and resolve feature positions.
    pub fn compile(&self, schema: &FeatureSchema) -> Result<CompiledRule> {
        self.check_shape()?;
        let mut terms = Vec::with_capacity(self.predicates.len());
        for p in &self.predicates {
            let j = schema
                .position(p.feature())
                .ok_or_else(|| RuleError::UnknownFeature(p.feature().to_string()))?;
            let f = schema.feature(j);
            match (p, f.kind) {
                (Predicate::Interval { lo, hi, feature }, FeatureKind::Real) => {
                    let finite = lo.is_none_or(f64::is_finite) && hi.is_none_or(f64::is_finite);
                    let ordered = match (lo, hi) {
                        (Some(a), Some(b)) => a <= b,
                        _ => true,
                    };
                    if !finite || !ordered {
                        return Err(RuleError::BadInterval(feature.clone()));
                    }
                }
                (Predicate::Equals { feature, value }, FeatureKind::Categorical) => {
                    if !f.values.contains(value) {
                        return Err(RuleError::UnknownCategory {
                            feature: feature.clone(),
                            value: value.clone(),
                        });
                    }
                }
                _ => return Err(RuleError::KindMismatch(p.feature().to_string())),
            }
            terms.push((j, p.clone()));
        }
        Ok(CompiledRule { terms })
    }
}

/// A rule bound to feature positions of a schema.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    terms: Vec<(usize, Predicate)>,
}

impl CompiledRule {
    pub fn matches(&self, point: &Point) -> bool {
        self.terms.iter().all(|(j, p)| p.holds(point.get(*j)))
    }
}

/// Whether every predicate of `rule` holds on the raw values of `point`.
pub fn matches(rule: &Rule, point: &Point, schema: &FeatureSchema) -> Result<bool> {
    Ok(rule.compile(schema)?.matches(point))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleScore {
    pub coverage: f64,
    pub purity: f64,
    pub matched_anomalies: usize,
    pub passing_inliers: usize,
    pub anomalies: usize,
    pub inliers: usize,
}

impl RuleScore {
    fn from_counts(matched: usize, anomalies: usize, passing: usize, inliers: usize) -> Self {
        Self {
            coverage: matched as f64 / anomalies as f64,
            purity: if inliers == 0 {
                1.0
            } else {
                1.0 - passing as f64 / inliers as f64
            },
            matched_anomalies: matched,
            passing_inliers: passing,
            anomalies,
            inliers,
        }
    }

    pub fn meets(&self, coverage_min: f64, purity_min: f64) -> bool {
        self.coverage >= coverage_min && self.purity >= purity_min
    }
}

pub fn score_rule(
    rule: &Rule,
    anomalies: &[Point],
    inliers: &[Point],
    schema: &FeatureSchema,
) -> Result<RuleScore> {
    if anomalies.is_empty() {
        return Err(RuleError::EmptyAnomalyGroup);
    }
    let compiled = rule.compile(schema)?;
    let matched = anomalies.iter().filter(|p| compiled.matches(p)).count();
    let passing = inliers.iter().filter(|p| compiled.matches(p)).count();
    Ok(RuleScore::from_counts(
        matched,
        anomalies.len(),
        passing,
        inliers.len(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub coverage_min: f64,
    pub purity_min: f64,
    pub max_rules: usize,
    /// A real-valued peak keeps grid points whose density is at least this
    /// fraction of the maximum density.
    pub peak_threshold: f64,
    /// Minimum share of the anomaly group a category value needs.
    pub category_threshold: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            coverage_min: 0.5,
            purity_min: 0.9,
            max_rules: 3,
            peak_threshold: 0.2,
            category_threshold: 0.3,
        }
    }
}

impl MiningConfig {
    pub fn with_thresholds(coverage_min: f64, purity_min: f64) -> Self {
        Self {
            coverage_min,
            purity_min,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRule {
    pub rule: Rule,
    pub score: RuleScore,
}

const KDE_GRID: usize = 512;

/// Silverman's rule-of-thumb bandwidth; zero when the sample has no spread.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Maximal intervals where the Gaussian KDE of `xs` is at least
/// `threshold × max density`, each tightened to the sample values it holds.
pub fn density_peaks(xs: &[f64], threshold: f64) -> Vec<(f64, f64)> {
    if xs.is_empty() {
        return Vec::new();
    }
    let h = silverman_bandwidth(xs);
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if h <= 0.0 || hi <= lo {
        return vec![(lo, hi)];
    }
    let (g0, g1) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (g1 - g0) / (KDE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID).map(|i| g0 + step * i as f64).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|&g| {
            xs.iter()
                .map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let peak = density.iter().cloned().fold(0.0, f64::max);
    let cut = threshold * peak;

    let mut runs = Vec::new();
    let mut start = None;
    for (i, &d) in density.iter().enumerate() {
        match (d >= cut, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, KDE_GRID - 1));
    }
    runs.into_iter()
        .filter_map(|(a, b)| {
            let (ra, rb) = (grid[a] - step, grid[b] + step);
            let inside = xs.iter().filter(|&&x| x >= ra && x <= rb);
            let (mn, mx) = inside.fold((f64::INFINITY, f64::NEG_INFINITY), |(p, q), &x| {
                (p.min(x), q.max(x))
            });
            (mn <= mx).then_some((mn, mx))
        })
        .collect()
}

/// Candidate predicates: density peaks for real features, frequent values
/// for categoricals.
pub fn candidate_predicates(
    anomalies: &[Point],
    schema: &FeatureSchema,
    config: &MiningConfig,
) -> Vec<Predicate> {
    let mut out = Vec::new();
    for (j, f) in schema.features().iter().enumerate() {
        match f.kind {
            FeatureKind::Real => {
                let xs: Vec<f64> = anomalies
                    .iter()
                    .filter_map(|p| p.get(j).as_real())
                    .collect();
                for (lo, hi) in density_peaks(&xs, config.peak_threshold) {
                    out.push(Predicate::interval(&f.name, Some(lo), Some(hi)));
                }
            }
            FeatureKind::Categorical => {
                for v in &f.values {
                    let n = anomalies
                        .iter()
                        .filter(|p| p.get(j).as_cat() == Some(v))
                        .count();
                    if n > 0 && n as f64 >= config.category_threshold * anomalies.len() as f64 {
                        out.push(Predicate::equals(&f.name, v));
                    }
                }
            }
        }
    }
    out
}

/// Match masks of one predicate (or a conjunction) over both groups.
#[derive(Clone)]
struct Masks {
    anomalies: Vec<bool>,
    inliers: Vec<bool>,
}

impl Masks {
    fn of(p: &Predicate, j: usize, anomalies: &[Point], inliers: &[Point]) -> Self {
        Self {
            anomalies: anomalies.iter().map(|x| p.holds(x.get(j))).collect(),
            inliers: inliers.iter().map(|x| p.holds(x.get(j))).collect(),
        }
    }

    fn and(&self, other: &Masks) -> Masks {
        Masks {
            anomalies: self
                .anomalies
                .iter()
                .zip(&other.anomalies)
                .map(|(a, b)| *a && *b)
                .collect(),
            inliers: self
                .inliers
                .iter()
                .zip(&other.inliers)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    fn score(&self) -> RuleScore {
        let matched = self.anomalies.iter().filter(|&&b| b).count();
        let passing = self.inliers.iter().filter(|&&b| b).count();
        RuleScore::from_counts(matched, self.anomalies.len(), passing, self.inliers.len())
    }
}

/// Mine up to `max_rules` conjunctive rules describing the anomaly group.
///
/// Every returned rule meets both thresholds. Rules are grown greedily from
/// each candidate predicate, adding the predicate that most improves purity
/// while keeping coverage above the threshold, until purity is reached or
/// nothing improves. Returned rules have distinct leading features and are
/// ordered by purity, coverage, length and leading feature name.
pub fn mine_candidates(
    anomalies: &[Point],
    inliers: &[Point],
    schema: &FeatureSchema,
    config: &MiningConfig,
) -> Result<Vec<ScoredRule>> {
    for (name, t) in [
        ("coverage_min", config.coverage_min),
        ("purity_min", config.purity_min),
    ] {
        if !(0.0..=1.0).contains(&t) {
            return Err(RuleError::BadThreshold(name));
        }
    }
    if anomalies.is_empty() {
        return Err(RuleError::EmptyAnomalyGroup);
    }
    let candidates = candidate_predicates(anomalies, schema, config);
    let masks: Vec<Masks> = candidates
        .iter()
        .map(|p| {
            let j = schema.position(p.feature()).expect("candidate from schema");
            Masks::of(p, j, anomalies, inliers)
        })
        .collect();

    let mut found: Vec<(Vec<usize>, RuleScore)> = Vec::new();
    if inliers.is_empty() {
        // Purity is trivially 1; describe the group by its best peak per feature.
        let mut chosen: Vec<usize> = Vec::new();
        for (i, p) in candidates.iter().enumerate() {
            match chosen
                .iter()
                .position(|&c| candidates[c].feature() == p.feature())
            {
                Some(slot) if masks[i].score().coverage > masks[chosen[slot]].score().coverage => {
                    chosen[slot] = i
                }
                Some(_) => {}
                None => chosen.push(i),
            }
        }
        if let Some((&first, rest)) = chosen.split_first() {
            let combined = rest
                .iter()
                .fold(masks[first].clone(), |m, &i| m.and(&masks[i]));
            found.push((chosen, combined.score()));
        }
    } else {
        for lead in 0..candidates.len() {
            if let Some(hit) = grow_rule(lead, &candidates, &masks, config) {
                found.push(hit);
            }
        }
    }

    found.retain(|(_, s)| s.meets(config.coverage_min, config.purity_min));
    found.sort_by(|(pa, sa), (pb, sb)| {
        sb.purity
            .total_cmp(&sa.purity)
            .then(sb.coverage.total_cmp(&sa.coverage))
            .then(pa.len().cmp(&pb.len()))
            .then(candidates[pa[0]].feature().cmp(candidates[pb[0]].feature()))
    });

    let mut leads = BTreeSet::new();
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    let mut out = Vec::new();
    for (preds, score) in found {
        if out.len() >= config.max_rules {
            break;
        }
        let set: BTreeSet<usize> = preds.iter().copied().collect();
        if sets.contains(&set) || !leads.insert(candidates[preds[0]].feature().to_string()) {
            continue;
        }
        sets.push(set);
        let rule = Rule::new(preds.iter().map(|&i| candidates[i].clone()).collect())?
            .with_source(RuleSource::Mined);
        out.push(ScoredRule { rule, score });
    }
    Ok(out)
}

fn grow_rule(
    lead: usize,
    candidates: &[Predicate],
    masks: &[Masks],
    config: &MiningConfig,
) -> Option<(Vec<usize>, RuleScore)> {
    let mut current = masks[lead].clone();
    let mut score = current.score();
    if score.coverage < config.coverage_min {
        return None;
    }
    let mut chosen = vec![lead];
    while score.purity < config.purity_min {
        let mut best: Option<(usize, Masks, RuleScore)> = None;
        for (i, p) in candidates.iter().enumerate() {
            if chosen
                .iter()
                .any(|&c| candidates[c].feature() == p.feature())
            {
                continue;
            }
            let m = current.and(&masks[i]);
            let s = m.score();
            if s.coverage < config.coverage_min || s.purity <= score.purity {
                continue;
            }
            let better = match &best {
                None => true,
                Some((b, _, bs)) => s
                    .purity
                    .total_cmp(&bs.purity)
                    .then(s.coverage.total_cmp(&bs.coverage))
                    .then(candidates[*b].feature().cmp(p.feature()))
                    .is_gt(),
            };
            if better {
                best = Some((i, m, s));
            }
        }
        match best {
            Some((i, m, s)) => {
                chosen.push(i);
                current = m;
                score = s;
            }
            None => break,
        }
    }
    Some((chosen, score))
}

/// One persisted rule with the score it had on the dataset it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub rule: Rule,
    pub score: RuleScore,
    /// Fingerprint of the dataset the score was computed on.
    pub fingerprint: String,
}

/// Append-only JSON-lines rule store. Writes are serialized.
#[derive(Debug)]
pub struct RuleDb {
    path: PathBuf,
    write_lock: Mutex<()>,
}

impl RuleDb {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| RuleError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            path,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn save(&self, record: &RuleRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let io = |source| RuleError::Io {
            path: self.path.clone(),
            source,
        };
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io)?;
        writeln!(f, "{line}").map_err(io)?;
        f.sync_data().map_err(io)
    }

    pub fn list(&self) -> Result<Vec<RuleRecord>> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let io = |source| RuleError::Io {
            path: self.path.clone(),
            source,
        };
        let f = std::fs::File::open(&self.path).map_err(io)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|source| RuleError::Corrupt {
                    path: self.path.clone(),
                    line: i + 1,
                    source,
                })?,
            );
        }
        Ok(out)
    }
}
