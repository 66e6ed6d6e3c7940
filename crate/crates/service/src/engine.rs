//! Datasets, runs and the rule store behind the HTTP routes. Every method is
//! a thin adapter over a library call; results are plain serializable values.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use alarm_core::dataio::{read_csv, DatasetTable, FeatureSchema, Value};
use alarm_core::explain::explain_scored;
use alarm_core::insight::{lookout_select, summarize, LookoutSelection, SummaryLayout};
use alarm_core::rules::{
    mine_candidates, score_rule, MiningConfig, Rule, RuleDb, RuleRecord, RuleScore, ScoredRule,
};
use alarm_core::{
    ChainEnsemble, CounterKind, DetectorParams, ImportanceVector, Point, Projection, ScoreReport,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ServiceConfig;
use crate::error::ApiError;

pub type Result<T, E = ApiError> = std::result::Result<T, E>;

/// Anomalies shown when the analyst has not imported their own.
pub const DEFAULT_TOP: usize = 50;

fn short_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0u8]);
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub rows: usize,
    pub features: Vec<String>,
    pub dropped: Vec<String>,
    pub fingerprint: String,
}

#[derive(Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub table: DatasetTable,
}

/// Detector settings in a run request; absent fields take the configured defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub dataset_id: String,
    pub chains: Option<usize>,
    pub depth: Option<usize>,
    /// Projection width; 0 disables projection.
    pub dims: Option<usize>,
    pub count_min: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub dataset_id: String,
    pub status: RunStatus,
    pub params: DetectorParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Rows the analyst imported as the anomaly view, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imported: Option<Vec<usize>>,
}

#[derive(Debug)]
pub struct Fitted {
    pub ensemble: ChainEnsemble,
    pub reports: Vec<ScoreReport>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Default)]
struct Caches {
    importances: HashMap<usize, ImportanceVector>,
    summaries: HashMap<(Option<usize>, usize), Arc<SummaryLayout>>,
    last_clusters: Option<usize>,
}

#[derive(Debug)]
pub struct Run {
    pub id: String,
    pub dataset: Arc<Dataset>,
    pub params: DetectorParams,
    status: RwLock<(RunStatus, Option<String>)>,
    fitted: RwLock<Option<Arc<Fitted>>>,
    imported: RwLock<Option<Vec<usize>>>,
    caches: Mutex<Caches>,
}

/// On-disk form of a fitted run.
#[derive(Serialize, Deserialize)]
struct Spill {
    run_id: String,
    dataset_id: String,
    imported: Option<Vec<usize>>,
    ensemble: ChainEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyEntry {
    pub row: usize,
    pub score: f64,
    pub importances: ImportanceVector,
}

/// Raw values of selected features for one side of the anomaly/inlier split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub rows: Vec<usize>,
    /// `values[i][f]` is feature `f` of row `rows[i]`.
    pub values: Vec<Vec<Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreSlice {
    pub features: Vec<String>,
    pub anomalies: Slice,
    pub inliers: Slice,
}

/// Which anomalies a rule request is about: a cluster of the summary, or the
/// whole anomaly view when `cluster_id` is absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub cluster_id: Option<usize>,
    /// Summary cluster count; defaults to the last one requested for the run.
    pub clusters: Option<usize>,
    /// Size of the default anomaly view.
    pub top: Option<usize>,
}

pub struct Engine {
    config: ServiceConfig,
    datasets: RwLock<BTreeMap<String, Arc<Dataset>>>,
    runs: RwLock<BTreeMap<String, Arc<Run>>>,
    rules: RuleDb,
}

impl Engine {
    /// Open the data directory and reload any datasets and fitted runs in it.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        config
            .prepare_dirs()
            .map_err(|e| ApiError::Internal(format!("data directory: {e}")))?;
        for sub in ["datasets", "runs"] {
            fs::create_dir_all(config.data_dir.join(sub))
                .map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        let rules = RuleDb::open(&config.rule_db)?;
        let engine = Self {
            config,
            datasets: RwLock::default(),
            runs: RwLock::default(),
            rules,
        };
        engine.reload()?;
        Ok(engine)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn dataset_paths(&self, id: &str) -> (PathBuf, PathBuf) {
        let dir = self.config.data_dir.join("datasets");
        (
            dir.join(format!("{id}.csv")),
            dir.join(format!("{id}.schema.json")),
        )
    }

    fn run_path(&self, id: &str) -> PathBuf {
        self.config.data_dir.join("runs").join(format!("{id}.json"))
    }

    fn reload(&self) -> Result<()> {
        let internal = |e: std::io::Error| ApiError::Internal(e.to_string());
        let mut ids: Vec<String> = fs::read_dir(self.config.data_dir.join("datasets"))
            .map_err(internal)?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter_map(|n| n.strip_suffix(".csv").map(str::to_owned))
            .collect();
        ids.sort();
        for id in ids {
            let (csv, schema) = self.dataset_paths(&id);
            let text = fs::read_to_string(&schema).map_err(internal)?;
            let schema = FeatureSchema::from_json(&text)?;
            let table = read_csv(fs::File::open(&csv).map_err(internal)?, &schema)?;
            self.insert_dataset(&id, table, Vec::new());
        }
        let mut spills: Vec<PathBuf> = fs::read_dir(self.config.data_dir.join("runs"))
            .map_err(internal)?
            .filter_map(|e| Some(e.ok()?.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        spills.sort();
        for path in spills {
            let spill: Spill = serde_json::from_str(&fs::read_to_string(&path).map_err(internal)?)
                .map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            let dataset = self.dataset(&spill.dataset_id)?;
            let fitted = score_fitted(spill.ensemble, &dataset.table)?;
            let run = Arc::new(Run::new(
                spill.run_id.clone(),
                dataset,
                *fitted.ensemble.params(),
            ));
            *run.status.write().unwrap() = (RunStatus::Done, None);
            *run.fitted.write().unwrap() = Some(Arc::new(fitted));
            *run.imported.write().unwrap() = spill.imported;
            self.runs.write().unwrap().insert(spill.run_id, run);
        }
        Ok(())
    }

    fn insert_dataset(&self, id: &str, table: DatasetTable, dropped: Vec<String>) -> DatasetInfo {
        let info = DatasetInfo {
            dataset_id: id.to_owned(),
            rows: table.len(),
            features: table.schema().names().map(str::to_owned).collect(),
            dropped,
            fingerprint: table.fingerprint(),
        };
        self.datasets.write().unwrap().insert(
            id.to_owned(),
            Arc::new(Dataset {
                info: info.clone(),
                table,
            }),
        );
        info
    }

    /// Parse and store an uploaded CSV with its schema sidecar. Constant
    /// features are dropped; the id is derived from the stored content.
    pub fn add_dataset(&self, csv: &[u8], schema_json: &str) -> Result<DatasetInfo> {
        let schema =
            FeatureSchema::from_json(schema_json).map_err(|e| ApiError::field("schema", e))?;
        let table = read_csv(csv, &schema).map_err(|e| ApiError::field("csv", e))?;
        let (table, dropped) = table
            .drop_constant_features()
            .map_err(|e| ApiError::field("csv", e))?;
        let id = format!("ds-{}", &table.fingerprint()[..16]);
        let (csv_path, schema_path) = self.dataset_paths(&id);
        if !csv_path.exists() {
            table
                .save(&csv_path, &schema_path)
                .map_err(|e| ApiError::Internal(e.to_string()))?;
        }
        Ok(self.insert_dataset(&id, table, dropped))
    }

    pub fn dataset(&self, id: &str) -> Result<Arc<Dataset>> {
        self.datasets
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound {
                kind: "dataset",
                id: id.into(),
            })
    }

    pub fn datasets(&self) -> Vec<DatasetInfo> {
        self.datasets
            .read()
            .unwrap()
            .values()
            .map(|d| d.info.clone())
            .collect()
    }

    pub fn resolve_params(&self, req: &RunRequest) -> Result<DetectorParams> {
        let d = self.config.detector;
        let dims = req.dims.unwrap_or(d.dims);
        let params = DetectorParams {
            chains: req.chains.unwrap_or(d.chains),
            depth: req.depth.unwrap_or(d.depth),
            projection: if dims == 0 {
                Projection::None
            } else {
                Projection::Hashed { dims }
            },
            counter: if req.count_min.unwrap_or(d.count_min) {
                CounterKind::DEFAULT_CMS
            } else {
                CounterKind::Exact
            },
            seed: req.seed.unwrap_or(d.seed),
        };
        params.validate()?;
        Ok(params)
    }

    /// Register a run. Returns the run and whether it still needs fitting;
    /// identical requests map to the same run.
    pub fn create_run(&self, req: &RunRequest) -> Result<(Arc<Run>, bool)> {
        let dataset = self.dataset(&req.dataset_id)?;
        let params = self.resolve_params(req)?;
        let key = serde_json::to_string(&params).expect("params serialize");
        let id = format!(
            "run-{}",
            short_hash(&[req.dataset_id.as_bytes(), key.as_bytes()])
        );
        let mut runs = self.runs.write().unwrap();
        if let Some(run) = runs.get(&id) {
            let failed = run.status().0 == RunStatus::Failed;
            if failed {
                *run.status.write().unwrap() = (RunStatus::Pending, None);
            }
            return Ok((run.clone(), failed));
        }
        let run = Arc::new(Run::new(id.clone(), dataset, params));
        runs.insert(id, run.clone());
        Ok((run, true))
    }

    /// Fit and score a registered run, then spill it to disk.
    pub fn fit_run(&self, run: &Run) {
        *run.status.write().unwrap() = (RunStatus::Running, None);
        let outcome = ChainEnsemble::fit(&run.dataset.table, run.params)
            .map_err(ApiError::from)
            .and_then(|e| score_fitted(e, &run.dataset.table));
        match outcome {
            Ok(fitted) => {
                let fitted = Arc::new(fitted);
                *run.fitted.write().unwrap() = Some(fitted.clone());
                if let Err(e) = self.spill(run, &fitted) {
                    log::warn!("could not spill run {}: {e}", run.id);
                }
                *run.status.write().unwrap() = (RunStatus::Done, None);
            }
            Err(e) => {
                log::error!("run {} failed: {e}", run.id);
                *run.status.write().unwrap() = (RunStatus::Failed, Some(e.to_string()));
            }
        }
    }

    fn spill(&self, run: &Run, fitted: &Fitted) -> Result<()> {
        let spill = Spill {
            run_id: run.id.clone(),
            dataset_id: run.dataset.info.dataset_id.clone(),
            imported: run.imported.read().unwrap().clone(),
            ensemble: fitted.ensemble.clone(),
        };
        let text = serde_json::to_string(&spill).map_err(|e| ApiError::Internal(e.to_string()))?;
        let path = self.run_path(&run.id);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| ApiError::Internal(e.to_string()))
    }

    pub fn run(&self, id: &str) -> Result<Arc<Run>> {
        self.runs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound {
                kind: "run",
                id: id.into(),
            })
    }

    pub fn anomalies(&self, run: &Run, top: Option<usize>) -> Result<Vec<AnomalyEntry>> {
        let fitted = run.fitted()?;
        run.view(&fitted, top)
            .into_iter()
            .map(|row| {
                Ok(AnomalyEntry {
                    row,
                    score: fitted.scores[row],
                    importances: run.importance(&fitted, row)?,
                })
            })
            .collect()
    }

    /// Replace the anomaly view with analyst-chosen rows; an empty list
    /// restores the default top-k view.
    pub fn import_labels(&self, run: &Run, rows: Vec<usize>) -> Result<RunInfo> {
        let fitted = run.fitted()?;
        let n = run.dataset.table.len();
        let bad: Vec<_> = rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= n)
            .map(|(i, r)| crate::error::FieldError {
                field: format!("rows[{i}]"),
                message: format!("row {r} out of range 0..{n}"),
            })
            .collect();
        if !bad.is_empty() {
            return Err(ApiError::Invalid(bad));
        }
        let mut rows = rows;
        rows.sort_unstable();
        rows.dedup();
        *run.imported.write().unwrap() = (!rows.is_empty()).then_some(rows);
        {
            let mut c = run.caches.lock().unwrap();
            c.summaries.clear();
        }
        if let Err(e) = self.spill(run, &fitted) {
            log::warn!("could not spill run {}: {e}", run.id);
        }
        Ok(run.info())
    }

    pub fn summary(
        &self,
        run: &Run,
        clusters: usize,
        top: Option<usize>,
    ) -> Result<Arc<SummaryLayout>> {
        let fitted = run.fitted()?;
        let key = (top, clusters);
        {
            let mut c = run.caches.lock().unwrap();
            if let Some(hit) = c.summaries.get(&key).cloned() {
                c.last_clusters = Some(clusters);
                return Ok(hit);
            }
        }
        let rows = run.view(&fitted, top);
        let scores: Vec<f64> = rows.iter().map(|&r| fitted.scores[r]).collect();
        let imps = rows
            .iter()
            .map(|&r| run.importance(&fitted, r))
            .collect::<Result<Vec<_>>>()?;
        let layout = Arc::new(summarize(&rows, &scores, &imps, clusters)?);
        let mut c = run.caches.lock().unwrap();
        c.summaries.insert(key, layout.clone());
        c.last_clusters = Some(clusters);
        Ok(layout)
    }

    /// Raw values of `features`, split into the anomaly view and the rest.
    pub fn explore(
        &self,
        run: &Run,
        features: &[String],
        top: Option<usize>,
    ) -> Result<ExploreSlice> {
        let fitted = run.fitted()?;
        let schema = run.dataset.table.schema();
        let mut positions = Vec::with_capacity(features.len());
        let mut bad = Vec::new();
        for (i, f) in features.iter().enumerate() {
            match schema.position(f) {
                Some(p) => positions.push(p),
                None => bad.push(crate::error::FieldError {
                    field: format!("features[{i}]"),
                    message: format!("unknown feature `{f}`"),
                }),
            }
        }
        if features.is_empty() {
            return Err(ApiError::field(
                "features",
                "at least one feature is required",
            ));
        }
        if !bad.is_empty() {
            return Err(ApiError::Invalid(bad));
        }
        let (anomalies, inliers) = run.split(&fitted, top);
        let slice = |rows: Vec<usize>| Slice {
            values: rows
                .iter()
                .map(|&r| {
                    let p = &run.dataset.table.rows()[r];
                    positions.iter().map(|&j| p.get(j).clone()).collect()
                })
                .collect(),
            rows,
        };
        Ok(ExploreSlice {
            features: features.to_vec(),
            anomalies: slice(anomalies),
            inliers: slice(inliers),
        })
    }

    pub fn lookout(
        &self,
        run: &Run,
        budget: usize,
        top: Option<usize>,
    ) -> Result<LookoutSelection> {
        let fitted = run.fitted()?;
        let (a, i) = run.split(&fitted, top);
        let rows = run.dataset.table.rows();
        let pick = |idx: &[usize]| idx.iter().map(|&r| rows[r].clone()).collect::<Vec<Point>>();
        Ok(lookout_select(
            &pick(&a),
            &pick(&i),
            run.dataset.table.schema(),
            budget,
            run.params.seed,
        )?)
    }

    /// Anomaly group and inliers for a rule request. Inliers are all rows
    /// outside the anomaly view.
    pub fn group(&self, run: &Run, spec: GroupSpec) -> Result<(Vec<Point>, Vec<Point>)> {
        let fitted = run.fitted()?;
        let (view, inliers) = run.split(&fitted, spec.top);
        let members = match spec.cluster_id {
            None => view,
            Some(id) => {
                let k = spec
                    .clusters
                    .or(run.caches.lock().unwrap().last_clusters)
                    .ok_or_else(|| {
                        ApiError::field("clusters", "no summary has been computed; pass `clusters`")
                    })?;
                if id >= k {
                    return Err(ApiError::field(
                        "cluster_id",
                        format!("cluster {id} out of range 0..{k}"),
                    ));
                }
                self.summary(run, k, spec.top)?.members(id)
            }
        };
        let rows = run.dataset.table.rows();
        Ok((
            members.iter().map(|&r| rows[r].clone()).collect(),
            inliers.iter().map(|&r| rows[r].clone()).collect(),
        ))
    }

    pub fn rule_candidates(
        &self,
        run: &Run,
        spec: GroupSpec,
        config: &MiningConfig,
    ) -> Result<Vec<ScoredRule>> {
        let (anomalies, inliers) = self.group(run, spec)?;
        Ok(mine_candidates(
            &anomalies,
            &inliers,
            run.dataset.table.schema(),
            config,
        )?)
    }

    pub fn rule_score(&self, run: &Run, rule: &Rule, spec: GroupSpec) -> Result<RuleScore> {
        let (anomalies, inliers) = self.group(run, spec)?;
        Ok(score_rule(
            rule,
            &anomalies,
            &inliers,
            run.dataset.table.schema(),
        )?)
    }

    pub fn save_rule(&self, run: &Run, rule: Rule, spec: GroupSpec) -> Result<RuleRecord> {
        let score = self.rule_score(run, &rule, spec)?;
        let record = RuleRecord {
            rule,
            score,
            fingerprint: run.dataset.info.fingerprint.clone(),
        };
        self.rules.save(&record)?;
        Ok(record)
    }

    pub fn list_rules(&self) -> Result<Vec<RuleRecord>> {
        Ok(self.rules.list()?)
    }

    pub fn rule_db_path(&self) -> &Path {
        self.rules.path()
    }
}

fn score_fitted(ensemble: ChainEnsemble, table: &DatasetTable) -> Result<Fitted> {
    let reports = ensemble.score_batch(table)?;
    let scores = reports.iter().map(|r| r.final_score).collect();
    Ok(Fitted {
        ensemble,
        reports,
        scores,
    })
}

/// The `top` lowest-scoring rows, ties broken by row index.
pub fn top_rows(scores: &[f64], top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(top);
    order
}

impl Run {
    fn new(id: String, dataset: Arc<Dataset>, params: DetectorParams) -> Self {
        Self {
            id,
            dataset,
            params,
            status: RwLock::new((RunStatus::Pending, None)),
            fitted: RwLock::default(),
            imported: RwLock::default(),
            caches: Mutex::default(),
        }
    }

    pub fn status(&self) -> (RunStatus, Option<String>) {
        self.status.read().unwrap().clone()
    }

    pub fn info(&self) -> RunInfo {
        let (status, error) = self.status();
        RunInfo {
            run_id: self.id.clone(),
            dataset_id: self.dataset.info.dataset_id.clone(),
            status,
            params: self.params,
            error,
            imported: self.imported.read().unwrap().clone(),
        }
    }

    pub fn fitted(&self) -> Result<Arc<Fitted>> {
        match self.status() {
            (RunStatus::Done, _) => Ok(self
                .fitted
                .read()
                .unwrap()
                .clone()
                .expect("done runs are fitted")),
            (RunStatus::Failed, e) => Err(ApiError::Conflict(format!(
                "run {} failed: {}",
                self.id,
                e.unwrap_or_default()
            ))),
            (s, _) => Err(ApiError::Conflict(format!(
                "run {} is {s:?}; poll GET /runs/{}",
                self.id, self.id
            ))),
        }
    }

    /// Imported rows if any, else the `top` lowest-scoring rows, ordered by score.
    pub fn view(&self, fitted: &Fitted, top: Option<usize>) -> Vec<usize> {
        match &*self.imported.read().unwrap() {
            Some(rows) => {
                let mut rows = rows.clone();
                rows.sort_by(|&a, &b| {
                    fitted.scores[a]
                        .total_cmp(&fitted.scores[b])
                        .then(a.cmp(&b))
                });
                rows
            }
            None => top_rows(&fitted.scores, top.unwrap_or(DEFAULT_TOP)),
        }
    }

    /// Anomaly view and the remaining rows in ascending order.
    pub fn split(&self, fitted: &Fitted, top: Option<usize>) -> (Vec<usize>, Vec<usize>) {
        let view = self.view(fitted, top);
        let mut in_view = vec![false; fitted.scores.len()];
        for &r in &view {
            in_view[r] = true;
        }
        let rest = (0..in_view.len()).filter(|&r| !in_view[r]).collect();
        (view, rest)
    }

    pub fn importance(&self, fitted: &Fitted, row: usize) -> Result<ImportanceVector> {
        if let Some(v) = self.caches.lock().unwrap().importances.get(&row) {
            return Ok(v.clone());
        }
        let v = explain_scored(
            &self.dataset.table.rows()[row],
            &fitted.reports[row],
            &fitted.ensemble,
        )?;
        self.caches
            .lock()
            .unwrap()
            .importances
            .insert(row, v.clone());
        Ok(v)
    }
}
