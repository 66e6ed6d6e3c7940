//! Half-space-chain density estimation over hashed random projections.
//!
//! Points are min-max normalized, then either sketched into `K` dimensions
//! with the sparse hash family or one-hot encoded (no-projection mode). Each
//! chain recursively halves that space on randomly sampled dimensions and
//! counts fit points per bin at every level. A point's chain score is the
//! smallest level count extrapolated by `2^level`; the ensemble score is the
//! mean over chains. Lower scores are more anomalous.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cms::CountMinSketch;
use crate::dataio::{
    DataError, DatasetTable, FeatureSchema, NormalizationState, OneHotEncoder, Point, Value,
};
use crate::hashing::{category_key, hash_bytes, mix64, HashFamily};

/// Floor applied to bin widths of dimensions with zero range.
pub const MIN_BIN_WIDTH: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("cannot fit on an empty dataset")]
    EmptyData,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Projection {
    /// Sketch into `dims` dimensions via the sparse hash family.
    Hashed { dims: usize },
    /// One-hot categoricals plus normalized reals.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CounterKind {
    Exact,
    CountMin { rows: usize, cols: usize },
}

impl CounterKind {
    pub const DEFAULT_CMS: CounterKind = CounterKind::CountMin { rows: 3, cols: 50 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Number of chains `M`.
    pub chains: usize,
    /// Chain depth `L`.
    pub depth: usize,
    pub projection: Projection,
    pub counter: CounterKind,
    pub seed: u64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            chains: 200,
            depth: 20,
            projection: Projection::None,
            counter: CounterKind::Exact,
            seed: 0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.chains < 1 {
            return Err(DetectorError::InvalidParams("chains must be >= 1".into()));
        }
        if self.depth < 1 {
            return Err(DetectorError::InvalidParams("depth must be >= 1".into()));
        }
        if let Projection::Hashed { dims } = self.projection {
            if dims < 1 {
                return Err(DetectorError::InvalidParams(
                    "projection dims must be >= 1".into(),
                ));
            }
        }
        if let CounterKind::CountMin { rows, cols } = self.counter {
            if rows < 1 || cols < 1 {
                return Err(DetectorError::InvalidParams(
                    "count-min rows and cols must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `s[k] = Σ_real h_k(F)·x[F] + Σ_cat h_k(F ⊕ x[F])` on a normalized point.
pub fn project(point: &Point, hashes: &HashFamily, schema: &FeatureSchema) -> Vec<f64> {
    let mut sketch = vec![0.0; hashes.dims()];
    for (f, v) in schema.features().iter().zip(point.values()) {
        match v {
            Value::Real(x) => {
                for (k, s) in sketch.iter_mut().enumerate() {
                    *s += f64::from(hashes.sign(k, &f.name)) * x;
                }
            }
            Value::Cat(c) => {
                let key = category_key(&f.name, c);
                for (k, s) in sketch.iter_mut().enumerate() {
                    *s += f64::from(hashes.sign(k, &key));
                }
            }
        }
    }
    sketch
}

/// Bin id of one level: the integer vector over all sketch dimensions.
pub type BinId = Vec<i64>;

/// Exact per-level counter. Bins form a tree across levels: a level-`l` bin
/// differs from its level-`l-1` parent only at the level's halving dimension,
/// so `(parent node, bin index on that dimension)` identifies it exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(u32, i64, u64)>", into = "Vec<(u32, i64, u64)>")]
pub struct ExactCounter {
    nodes: HashMap<(u32, i64), u32>,
    counts: Vec<u64>,
    keys: Vec<(u32, i64)>,
}

impl ExactCounter {
    fn insert(&mut self, parent: u32, bin: i64) -> u32 {
        let next = self.counts.len() as u32;
        let id = *self.nodes.entry((parent, bin)).or_insert(next);
        if id == next {
            self.counts.push(0);
            self.keys.push((parent, bin));
        }
        self.counts[id as usize] += 1;
        id
    }

    fn lookup(&self, parent: u32, bin: i64) -> Option<u32> {
        self.nodes.get(&(parent, bin)).copied()
    }

    /// Number of distinct occupied bins.
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Sum of counts over all bins.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

impl From<Vec<(u32, i64, u64)>> for ExactCounter {
    fn from(entries: Vec<(u32, i64, u64)>) -> Self {
        let mut c = ExactCounter::default();
        for (i, (parent, bin, count)) in entries.into_iter().enumerate() {
            c.nodes.insert((parent, bin), i as u32);
            c.keys.push((parent, bin));
            c.counts.push(count);
        }
        c
    }
}

impl From<ExactCounter> for Vec<(u32, i64, u64)> {
    fn from(c: ExactCounter) -> Self {
        c.keys
            .into_iter()
            .zip(c.counts)
            .map(|((p, b), n)| (p, b, n))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelCounter {
    Exact(ExactCounter),
    CountMin(CountMinSketch),
}

/// Root parent id for level-1 bins.
const ROOT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceChain {
    /// Zero-based halving dimension per level.
    features: Vec<usize>,
    counters: Vec<LevelCounter>,
}

impl HalfSpaceChain {
    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn counters(&self) -> &[LevelCounter] {
        &self.counters
    }

    pub fn depth(&self) -> usize {
        self.features.len()
    }

    /// Per-level bin index on the level's halving dimension, computed
    /// incrementally: the first time a dimension is used its scaled value is
    /// `s/Δ`; each reuse doubles it.
    fn level_bins(&self, sketch: &[f64], delta: &[f64]) -> Vec<i64> {
        // NaN marks a dimension not yet used by this chain.
        let mut z = vec![f64::NAN; sketch.len()];
        self.features
            .iter()
            .map(|&f| {
                z[f] = if z[f].is_nan() {
                    sketch[f] / delta[f]
                } else {
                    2.0 * z[f]
                };
                z[f].floor() as i64
            })
            .collect()
    }

    /// Bin-id vectors for every level.
    pub fn bin_id_path(&self, sketch: &[f64], delta: &[f64]) -> Vec<BinId> {
        let mut zbar = vec![0i64; sketch.len()];
        self.features
            .iter()
            .zip(self.level_bins(sketch, delta))
            .map(|(&f, b)| {
                zbar[f] = b;
                zbar.clone()
            })
            .collect()
    }

    fn insert(&mut self, sketch: &[f64], delta: &[f64]) {
        let bins = self.level_bins(sketch, delta);
        let mut parent = ROOT;
        let mut path_key = 0u64;
        for (l, (counter, b)) in self.counters.iter_mut().zip(bins).enumerate() {
            match counter {
                LevelCounter::Exact(c) => parent = c.insert(parent, b),
                LevelCounter::CountMin(c) => {
                    path_key = path_hash(path_key, self.features[l], b);
                    c.insert(path_key);
                }
            }
        }
    }

    /// Count of fit points sharing the sketch's bin at every level.
    pub fn level_counts(&self, sketch: &[f64], delta: &[f64]) -> Vec<u64> {
        let bins = self.level_bins(sketch, delta);
        let mut parent = Some(ROOT);
        let mut path_key = 0u64;
        self.counters
            .iter()
            .zip(bins)
            .enumerate()
            .map(|(l, (counter, b))| match counter {
                LevelCounter::Exact(c) => {
                    parent = parent.and_then(|p| c.lookup(p, b));
                    parent.map_or(0, |id| c.counts[id as usize])
                }
                LevelCounter::CountMin(c) => {
                    path_key = path_hash(path_key, self.features[l], b);
                    c.count(path_key)
                }
            })
            .collect()
    }

    /// `min_l 2^l · C_l` and its 1-based argmin level (ties go to the smallest level).
    pub fn score(&self, sketch: &[f64], delta: &[f64]) -> ChainScore {
        extrapolated_min(&self.level_counts(sketch, delta))
    }
}

/// Running key for a bin path; equal paths in a chain give equal keys.
fn path_hash(prev: u64, feature: usize, bin: i64) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&(feature as u64).to_le_bytes());
    bytes[8..].copy_from_slice(&bin.to_le_bytes());
    hash_bytes(mix64(prev), 0, &bytes)
}

/// Score of one chain for one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainScore {
    pub score: f64,
    /// 1-based scoring level `l_s`.
    pub level: usize,
}

/// Apply `min_l 2^l · counts[l-1]` with the smallest-level tie-break.
pub fn extrapolated_min(counts: &[u64]) -> ChainScore {
    let mut best = ChainScore {
        score: f64::INFINITY,
        level: 1,
    };
    for (i, &c) in counts.iter().enumerate() {
        let level = i + 1;
        let s = (c as f64) * 2f64.powi(level as i32);
        if s < best.score {
            best = ChainScore { score: s, level };
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Mean of the per-chain scores; lower is more anomalous.
    pub final_score: f64,
    pub per_chain: Vec<ChainScore>,
}

impl ScoreReport {
    fn from_chains(per_chain: Vec<ChainScore>) -> Self {
        let final_score = per_chain.iter().map(|c| c.score).sum::<f64>() / per_chain.len() as f64;
        Self {
            final_score,
            per_chain,
        }
    }
}

/// Per-chain detail of how a point was binned and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub bins: Vec<BinId>,
    pub counts: Vec<u64>,
    pub score: ChainScore,
}

/// A fitted detector. Immutable after [`ChainEnsemble::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEnsemble {
    params: DetectorParams,
    encoder: OneHotEncoder,
    hashes: HashFamily,
    delta: Vec<f64>,
    chains: Vec<HalfSpaceChain>,
    fit_size: usize,
}

impl ChainEnsemble {
    pub fn fit(data: &DatasetTable, params: DetectorParams) -> Result<Self, DetectorError> {
        params.validate()?;
        if data.is_empty() {
            return Err(DetectorError::EmptyData);
        }
        let encoder = OneHotEncoder::fit(data)?;
        let dims = match params.projection {
            Projection::Hashed { dims } => dims,
            Projection::None => encoder.dim(),
        };
        let hashes = HashFamily::new(dims, mix64(params.seed ^ 0x9e37_79b9_7f4a_7c15));
        let mut model = Self {
            params,
            encoder,
            hashes,
            delta: Vec::new(),
            chains: Vec::new(),
            fit_size: data.len(),
        };
        let sketches: Vec<Vec<f64>> = data
            .rows()
            .par_iter()
            .map(|p| model.sketch(p))
            .collect::<Result<_, _>>()?;
        model.delta = half_ranges(&sketches, dims);

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let chains: Vec<HalfSpaceChain> = (0..params.chains)
            .map(|m| HalfSpaceChain {
                features: (0..params.depth)
                    .map(|_| rng.random_range(0..dims))
                    .collect(),
                counters: (0..params.depth)
                    .map(|l| match params.counter {
                        CounterKind::Exact => LevelCounter::Exact(ExactCounter::default()),
                        CounterKind::CountMin { rows, cols } => {
                            LevelCounter::CountMin(CountMinSketch::new(
                                rows,
                                cols,
                                mix64(params.seed ^ ((m * params.depth + l) as u64)),
                            ))
                        }
                    })
                    .collect(),
            })
            .collect();
        let delta = &model.delta;
        model.chains = chains
            .into_par_iter()
            .map(|mut chain| {
                for s in &sketches {
                    chain.insert(s, delta);
                }
                chain
            })
            .collect();
        Ok(model)
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn schema(&self) -> &FeatureSchema {
        self.encoder.schema()
    }

    pub fn encoder(&self) -> &OneHotEncoder {
        &self.encoder
    }

    pub fn normalizer(&self) -> &NormalizationState {
        self.encoder.normalizer()
    }

    pub fn hashes(&self) -> &HashFamily {
        &self.hashes
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn chains(&self) -> &[HalfSpaceChain] {
        &self.chains
    }

    pub fn fit_size(&self) -> usize {
        self.fit_size
    }

    /// Number of sketch dimensions the chains halve.
    pub fn dims(&self) -> usize {
        self.hashes.dims()
    }

    pub fn is_projected(&self) -> bool {
        matches!(self.params.projection, Projection::Hashed { .. })
    }

    /// Map a raw point into the space the chains operate on.
    pub fn sketch(&self, point: &Point) -> Result<Vec<f64>, DetectorError> {
        match self.params.projection {
            Projection::Hashed { .. } => {
                self.schema().check(point)?;
                let normalized = self.normalizer().normalize(point)?;
                Ok(project(&normalized, &self.hashes, self.schema()))
            }
            Projection::None => Ok(self.encoder.encode(point)?),
        }
    }

    pub fn score(&self, point: &Point) -> Result<ScoreReport, DetectorError> {
        Ok(self.score_sketch(&self.sketch(point)?))
    }

    pub fn score_sketch(&self, sketch: &[f64]) -> ScoreReport {
        ScoreReport::from_chains(
            self.chains
                .iter()
                .map(|c| c.score(sketch, &self.delta))
                .collect(),
        )
    }

    /// Score every row; order is preserved.
    pub fn score_batch(&self, data: &DatasetTable) -> Result<Vec<ScoreReport>, DetectorError> {
        data.rows().par_iter().map(|p| self.score(p)).collect()
    }

    pub fn trace(&self, point: &Point) -> Result<Vec<ChainTrace>, DetectorError> {
        let sketch = self.sketch(point)?;
        Ok(self
            .chains
            .iter()
            .map(|c| {
                let counts = c.level_counts(&sketch, &self.delta);
                ChainTrace {
                    bins: c.bin_id_path(&sketch, &self.delta),
                    score: extrapolated_min(&counts),
                    counts,
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Half the per-dimension range of the sketches, floored at [`MIN_BIN_WIDTH`].
fn half_ranges(sketches: &[Vec<f64>], dims: usize) -> Vec<f64> {
    (0..dims)
        .map(|f| {
            let (lo, hi) = sketches
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                    (lo.min(s[f]), hi.max(s[f]))
                });
            let d = (hi - lo) / 2.0;
            if d > 0.0 {
                d
            } else {
                MIN_BIN_WIDTH
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Feature;

    fn real_table(rows: &[&[f64]]) -> DatasetTable {
        let d = rows.first().map_or(1, |r| r.len());
        let schema =
            FeatureSchema::new((0..d).map(|j| Feature::real(format!("x{j}"))).collect()).unwrap();
        DatasetTable::new(schema, rows.iter().map(|r| Point::reals(r)).collect(), None).unwrap()
    }

    #[test]
    fn project_zero_point() {
        let schema = FeatureSchema::new(vec![Feature::real("a"), Feature::real("b")]).unwrap();
        let h = HashFamily::new(5, 1);
        assert_eq!(
            project(&Point::reals(&[0.0, 0.0]), &h, &schema),
            vec![0.0; 5]
        );
    }

    #[test]
    fn project_single_positive_term() {
        let schema = FeatureSchema::new(vec![Feature::real("a")]).unwrap();
        let h = (0..100)
            .map(|seed| HashFamily::new(1, seed))
            .find(|h| h.sign(0, "a") == 1)
            .unwrap();
        assert_eq!(project(&Point::reals(&[0.5]), &h, &schema), vec![0.5]);
    }

    #[test]
    fn incremental_bins_follow_doubling() {
        let chain = HalfSpaceChain {
            features: vec![0, 0],
            counters: vec![],
        };
        assert_eq!(chain.level_bins(&[5.0], &[2.0]), vec![2, 5]);
        let path = chain.bin_id_path(&[5.0, 1.0], &[2.0, 1.0]);
        assert_eq!(path, vec![vec![2, 0], vec![5, 0]]);
    }

    #[test]
    fn extrapolation_example() {
        let s = extrapolated_min(&[8, 3, 1]);
        assert_eq!(s.score, 8.0);
        assert_eq!(s.level, 3);
        // ties resolve to the smallest level
        let t = extrapolated_min(&[2, 1]);
        assert_eq!((t.score, t.level), (4.0, 1));
    }

    #[test]
    fn single_point_fit() {
        let data = real_table(&[&[0.3, 0.7]]);
        let params = DetectorParams {
            chains: 1,
            depth: 2,
            ..Default::default()
        };
        let model = ChainEnsemble::fit(&data, params).unwrap();
        let trace = model.trace(&data.rows()[0]).unwrap();
        assert_eq!(trace[0].counts, vec![1, 1]);
        let r = model.score(&data.rows()[0]).unwrap();
        assert_eq!(r.final_score, 2.0);
        assert_eq!(r.per_chain[0].level, 1);
    }

    #[test]
    fn coincident_points_share_bins() {
        let data = real_table(&[&[1.0, 2.0][..]; 9]);
        let model = ChainEnsemble::fit(
            &data,
            DetectorParams {
                chains: 3,
                depth: 5,
                ..Default::default()
            },
        )
        .unwrap();
        for c in model.chains() {
            for counter in c.counters() {
                let LevelCounter::Exact(e) = counter else {
                    unreachable!()
                };
                assert_eq!(e.bins(), 1);
                assert_eq!(e.total(), 9);
            }
        }
        assert_eq!(model.delta(), &[MIN_BIN_WIDTH, MIN_BIN_WIDTH]);
    }

    #[test]
    fn parameter_validation() {
        let data = real_table(&[&[1.0]]);
        let bad = DetectorParams {
            chains: 0,
            ..Default::default()
        };
        assert!(matches!(
            ChainEnsemble::fit(&data, bad),
            Err(DetectorError::InvalidParams(_))
        ));
        let bad = DetectorParams {
            depth: 0,
            ..Default::default()
        };
        assert!(ChainEnsemble::fit(&data, bad).is_err());
        let empty = data.subset(&[]);
        assert!(matches!(
            ChainEnsemble::fit(&empty, DetectorParams::default()),
            Err(DetectorError::EmptyData)
        ));
    }

    #[test]
    fn json_round_trip() {
        let data = real_table(&[&[0.1, 0.2], &[0.5, 0.9], &[0.3, 0.3]]);
        for counter in [CounterKind::Exact, CounterKind::DEFAULT_CMS] {
            let model = ChainEnsemble::fit(
                &data,
                DetectorParams {
                    chains: 4,
                    depth: 6,
                    counter,
                    projection: Projection::Hashed { dims: 3 },
                    seed: 9,
                },
            )
            .unwrap();
            let back = ChainEnsemble::from_json(&model.to_json()).unwrap();
            assert_eq!(back, model);
            for p in data.rows() {
                assert_eq!(back.score(p).unwrap(), model.score(p).unwrap());
            }
        }
    }
}
