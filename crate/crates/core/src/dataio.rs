//! Mixed-type tabular datasets: schema, CSV ingestion, min-max normalization
//! and the dense one-hot encoding shared by the detector and the simulator.
//!
//! A dataset on disk is a CSV file plus a JSON schema sidecar:
//!
//! ```json
//! {"features":[{"name":"amount","kind":"real"},
//!              {"name":"k_symbol","kind":"categorical","values":["UVER","SIPO"]}]}
//! ```
//!
//! An optional trailing `label` column (`0` inlier, `1` anomaly) carries labels.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Name of the optional trailing label column.
pub const LABEL_COLUMN: &str = "label";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("header does not match schema: expected {expected:?}, found {found:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("row {row}, feature `{feature}`: cannot parse `{cell}` as a number")]
    BadNumber {
        row: usize,
        feature: String,
        cell: String,
    },
    #[error("row {row}, feature `{feature}`: non-finite value")]
    NonFinite { row: usize, feature: String },
    #[error("row {row}, feature `{feature}`: missing value")]
    Missing { row: usize, feature: String },
    #[error("row {row}, feature `{feature}`: category `{value}` is not declared in the schema")]
    UnknownCategory {
        row: usize,
        feature: String,
        value: String,
    },
    #[error("row {row}: label must be 0 or 1, found `{value}`")]
    BadLabel { row: usize, value: String },
    #[error("row {row}: expected {expected} cells, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("point does not conform to schema: {0}")]
    Conformance(String),
    #[error("dataset is empty")]
    Empty,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Real,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
    /// Declared category values; empty for real features.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
}

impl Feature {
    pub fn real(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Real,
            values: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        values: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_real(&self) -> bool {
        self.kind == FeatureKind::Real
    }
}

/// Ordered feature list. Construct through [`FeatureSchema::new`] so the
/// invariants (unique non-empty names, non-empty category sets) hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<Feature>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    features: Vec<Feature>,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = DataError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.features)
    }
}

impl From<FeatureSchema> for RawSchema {
    fn from(schema: FeatureSchema) -> Self {
        RawSchema {
            features: schema.features,
        }
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut index = HashMap::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if f.name.is_empty() {
                return Err(DataError::Schema(format!("feature {i} has an empty name")));
            }
            if f.name == LABEL_COLUMN {
                return Err(DataError::Schema(format!(
                    "`{LABEL_COLUMN}` is reserved for the label column"
                )));
            }
            if index.insert(f.name.clone(), i).is_some() {
                return Err(DataError::Schema(format!("duplicate feature `{}`", f.name)));
            }
            match f.kind {
                FeatureKind::Categorical => {
                    if f.values.is_empty() {
                        return Err(DataError::Schema(format!(
                            "categorical feature `{}` declares no values",
                            f.name
                        )));
                    }
                    let distinct: HashSet<&String> = f.values.iter().collect();
                    if distinct.len() != f.values.len() {
                        return Err(DataError::Schema(format!(
                            "categorical feature `{}` repeats a value",
                            f.name
                        )));
                    }
                }
                FeatureKind::Real => {
                    if !f.values.is_empty() {
                        return Err(DataError::Schema(format!(
                            "real feature `{}` must not declare values",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(Self { features, index })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature(&self, i: usize) -> &Feature {
        &self.features[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn real_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.features[i].is_real())
            .collect()
    }

    /// Restrict to the given feature positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        Self::new(
            positions
                .iter()
                .map(|&i| self.features[i].clone())
                .collect(),
        )
    }

    /// Check that `point` conforms: same length, finite reals, declared categories.
    pub fn check(&self, point: &Point) -> Result<()> {
        if point.len() != self.len() {
            return Err(DataError::Conformance(format!(
                "expected {} values, found {}",
                self.len(),
                point.len()
            )));
        }
        for (f, v) in self.features.iter().zip(point.values()) {
            match (f.kind, v) {
                (FeatureKind::Real, Value::Real(x)) if x.is_finite() => {}
                (FeatureKind::Real, _) => {
                    return Err(DataError::Conformance(format!(
                        "`{}` expects a finite number",
                        f.name
                    )))
                }
                (FeatureKind::Categorical, Value::Cat(s)) if f.values.contains(s) => {}
                (FeatureKind::Categorical, _) => {
                    return Err(DataError::Conformance(format!(
                        "`{}` expects one of {:?}",
                        f.name, f.values
                    )))
                }
            }
        }
        Ok(())
    }
}

/// A single feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Cat(String),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Real(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(x) => write!(f, "{x}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

/// Values positionally aligned with a [`FeatureSchema`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<Value>);

impl Point {
    pub fn new(values: Vec<Value>) -> Self {
        Self(values)
    }

    pub fn reals(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| Value::Real(v)).collect())
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn get(&self, i: usize) -> &Value {
        &self.0[i]
    }

    pub fn set(&mut self, i: usize, v: Value) {
        self.0[i] = v;
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<Value> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Inlier,
    Anomaly,
}

impl Label {
    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    schema: FeatureSchema,
    rows: Vec<Point>,
    labels: Option<Vec<Label>>,
}

impl DatasetTable {
    /// Build a table, validating every row against the schema.
    pub fn new(
        schema: FeatureSchema,
        rows: Vec<Point>,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            schema
                .check(row)
                .map_err(|e| DataError::Conformance(format!("row {}: {e}", i + 1)))?;
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(DataError::Conformance(format!(
                    "{} labels for {} rows",
                    l.len(),
                    rows.len()
                )));
            }
        }
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Point] {
        &self.rows
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_labels(mut self, labels: Option<Vec<Label>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.rows.len() {
                return Err(DataError::Conformance(format!(
                    "{} labels for {} rows",
                    l.len(),
                    self.rows.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    /// Rows at the given indices; labels follow.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Keep only the given feature positions.
    pub fn project_features(&self, positions: &[usize]) -> Result<Self> {
        let schema = self.schema.select(positions)?;
        let rows = self
            .rows
            .iter()
            .map(|r| Point::new(positions.iter().map(|&i| r.get(i).clone()).collect()))
            .collect();
        Ok(Self {
            schema,
            rows,
            labels: self.labels.clone(),
        })
    }

    /// Drop features that take a single value across all rows. Returns the
    /// cleaned table and the names of the dropped features. Tables with fewer
    /// than two rows are returned unchanged.
    pub fn drop_constant_features(&self) -> Result<(Self, Vec<String>)> {
        if self.rows.len() < 2 {
            return Ok((self.clone(), Vec::new()));
        }
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for (j, f) in self.schema.features().iter().enumerate() {
            let first = self.rows[0].get(j);
            if self.rows.iter().all(|r| r.get(j) == first) {
                dropped.push(f.name.clone());
            } else {
                keep.push(j);
            }
        }
        if dropped.is_empty() {
            return Ok((self.clone(), dropped));
        }
        if keep.is_empty() {
            return Err(DataError::Schema("every feature is constant".into()));
        }
        Ok((self.project_features(&keep)?, dropped))
    }

    /// Serialize rows (and the label column, when labels exist) as CSV.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.names().collect();
        if self.labels.is_some() {
            header.push(LABEL_COLUMN);
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut record: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
            if let Some(labels) = &self.labels {
                record.push(if labels[i].is_anomaly() { "1" } else { "0" }.to_string());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: PathBuf::from("<csv>"),
            source,
        })?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Write the CSV + schema sidecar pair.
    pub fn save(&self, csv_path: &Path, schema_path: &Path) -> Result<()> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io { path, source }
        };
        std::fs::write(csv_path, self.to_csv_string()).map_err(io_err(csv_path))?;
        std::fs::write(schema_path, self.schema.to_json()).map_err(io_err(schema_path))?;
        Ok(())
    }

    /// Content hash of the canonical CSV + schema serialization.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.schema.to_json().as_bytes());
        hasher.update([0u8]);
        hasher.update(self.to_csv_string().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Parse CSV text against a schema. Row numbers in errors are 1-based data
/// rows (the header is not counted).
pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<DatasetTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected: Vec<String> = schema.names().map(str::to_string).collect();
    let has_label = header.len() == expected.len() + 1
        && header.last().map(String::as_str) == Some(LABEL_COLUMN);
    let features_match = header.len() >= expected.len() && header[..expected.len()] == expected[..];
    if !features_match || !(header.len() == expected.len() || has_label) {
        return Err(DataError::Header {
            expected,
            found: header,
        });
    }

    let width = header.len();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        if record.len() != width {
            return Err(DataError::RowLength {
                row: row_no,
                expected: width,
                found: record.len(),
            });
        }
        let mut values = Vec::with_capacity(schema.len());
        for (f, cell) in schema.features().iter().zip(record.iter()) {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DataError::Missing {
                    row: row_no,
                    feature: f.name.clone(),
                });
            }
            let value = match f.kind {
                FeatureKind::Real => {
                    let x: f64 = cell.parse().map_err(|_| DataError::BadNumber {
                        row: row_no,
                        feature: f.name.clone(),
                        cell: cell.to_string(),
                    })?;
                    if !x.is_finite() {
                        return Err(DataError::NonFinite {
                            row: row_no,
                            feature: f.name.clone(),
                        });
                    }
                    Value::Real(x)
                }
                FeatureKind::Categorical => {
                    if !f.values.iter().any(|v| v == cell) {
                        return Err(DataError::UnknownCategory {
                            row: row_no,
                            feature: f.name.clone(),
                            value: cell.to_string(),
                        });
                    }
                    Value::Cat(cell.to_string())
                }
            };
            values.push(value);
        }
        if has_label {
            let cell = record[width - 1].trim();
            labels.push(match cell {
                "1" => Label::Anomaly,
                "0" => Label::Inlier,
                other => {
                    return Err(DataError::BadLabel {
                        row: row_no,
                        value: other.to_string(),
                    })
                }
            });
        }
        rows.push(Point::new(values));
    }
    Ok(DatasetTable {
        schema: schema.clone(),
        rows,
        labels: has_label.then_some(labels),
    })
}

pub fn load_csv(path: &Path, schema_path: &Path) -> Result<DatasetTable> {
    let schema = FeatureSchema::load(schema_path)?;
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file), &schema)
}

/// Load a dataset for detection: parse, then drop constant features with a warning.
pub fn ingest(path: &Path, schema_path: &Path) -> Result<DatasetTable> {
    let table = load_csv(path, schema_path)?;
    let (table, dropped) = table.drop_constant_features()?;
    if !dropped.is_empty() {
        log::warn!("dropping constant features: {}", dropped.join(", "));
    }
    Ok(table)
}

/// Per real feature `(min, max)` observed on the fit set; `None` for categoricals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    ranges: Vec<Option<(f64, f64)>>,
}

impl NormalizationState {
    pub fn fit(data: &DatasetTable) -> Result<Self> {
        if data.is_empty() {
            return Err(DataError::Empty);
        }
        let ranges = data
            .schema()
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.is_real().then(|| {
                    data.rows()
                        .iter()
                        .filter_map(|r| r.get(j).as_real())
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                            (lo.min(x), hi.max(x))
                        })
                })
            })
            .collect();
        Ok(Self { ranges })
    }

    pub fn range(&self, j: usize) -> Option<(f64, f64)> {
        self.ranges[j]
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn normalize_value(&self, j: usize, v: f64) -> f64 {
        match self.ranges[j] {
            Some((lo, hi)) if hi > lo => (v - lo) / (hi - lo),
            _ => 0.0,
        }
    }

    pub fn denormalize_value(&self, j: usize, u: f64) -> f64 {
        match self.ranges[j] {
            Some((lo, hi)) => lo + u * (hi - lo),
            None => u,
        }
    }

    /// Min-max map each real value; categoricals pass through. No clamping.
    pub fn normalize(&self, point: &Point) -> Result<Point> {
        if point.len() != self.ranges.len() {
            return Err(DataError::Conformance(format!(
                "expected {} values, found {}",
                self.ranges.len(),
                point.len()
            )));
        }
        point
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| match (self.ranges[j], v) {
                (Some(_), Value::Real(x)) => Ok(Value::Real(self.normalize_value(j, *x))),
                (None, Value::Cat(_)) => Ok(v.clone()),
                _ => Err(DataError::Conformance(format!(
                    "value {j} has the wrong kind"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Point::new)
    }
}

/// Dense encoding: normalized reals, one-hot categoricals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotEncoder {
    schema: FeatureSchema,
    normalizer: NormalizationState,
    blocks: Vec<Range<usize>>,
    dim: usize,
}

impl OneHotEncoder {
    pub fn new(schema: FeatureSchema, normalizer: NormalizationState) -> Self {
        let mut blocks = Vec::with_capacity(schema.len());
        let mut offset = 0;
        for f in schema.features() {
            let width = if f.is_real() { 1 } else { f.values.len() };
            blocks.push(offset..offset + width);
            offset += width;
        }
        Self {
            schema,
            normalizer,
            blocks,
            dim: offset,
        }
    }

    pub fn fit(data: &DatasetTable) -> Result<Self> {
        Ok(Self::new(
            data.schema().clone(),
            NormalizationState::fit(data)?,
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn normalizer(&self) -> &NormalizationState {
        &self.normalizer
    }

    /// Encoded column range of original feature `j`.
    pub fn block(&self, j: usize) -> Range<usize> {
        self.blocks[j].clone()
    }

    /// Original feature owning encoded column `c`.
    pub fn owner(&self, c: usize) -> usize {
        self.blocks.partition_point(|b| b.end <= c)
    }

    pub fn encode(&self, point: &Point) -> Result<Vec<f64>> {
        self.schema.check(point)?;
        let mut out = vec![0.0; self.dim];
        for (j, f) in self.schema.features().iter().enumerate() {
            let b = &self.blocks[j];
            match point.get(j) {
                Value::Real(x) => out[b.start] = self.normalizer.normalize_value(j, *x),
                Value::Cat(s) => {
                    let pos = f.values.iter().position(|v| v == s).expect("checked");
                    out[b.start + pos] = 1.0;
                }
            }
        }
        Ok(out)
    }

    /// Invert [`encode`](Self::encode): reals are denormalized, each
    /// categorical block decodes to its largest entry.
    pub fn decode(&self, encoded: &[f64]) -> Point {
        let values = self
            .schema
            .features()
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let b = &self.blocks[j];
                if f.is_real() {
                    Value::Real(self.normalizer.denormalize_value(j, encoded[b.start]))
                } else {
                    let slice = &encoded[b.clone()];
                    let best = argmax(slice);
                    Value::Cat(f.values[best].clone())
                }
            })
            .collect();
        Point::new(values)
    }
}

/// Index of the largest entry; ties resolve to the first.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
