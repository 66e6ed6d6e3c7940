//! Command-line interface. Each command prints one JSON value on success;
//! failures print `{"error": ...}` to stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use alarm_core::dataio::{ingest, DatasetTable};
use alarm_core::explain::explain_scored;
use alarm_core::metrics::{auroc, ndcg, random_ndcg};
use alarm_core::rules::{mine_candidates, score_rule, MiningConfig, Rule};
use alarm_core::{ChainEnsemble, DetectorParams, Point, ScoreReport};
use alarm_sim::synth::{load_importances, ImportanceRecord};
use alarm_sim::{fixtures, synthesize, GenModel, InflationPolicy, SynthConfig, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use crate::config::ServiceConfig;
use crate::engine::{top_rows, Engine, DEFAULT_TOP};

/// Seed of the built-in training fixture, offset by `--seed`.
const FIXTURE_ROWS: usize = 2000;
/// Random rankings averaged for the NDCG baseline.
const RANDOM_RESAMPLES: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "alarm",
    version,
    about = "Anomaly detection, explanation and rule design"
)]
pub struct Cli {
    /// Seed for every random choice; overrides the configured detector seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generative model and write a labelled bundle with ground-truth importances.
    Simulate(SimulateArgs),
    /// Fit the detector and write per-row scores.
    Detect(DetectArgs),
    /// Write importance vectors for the most anomalous rows.
    Explain(ExplainArgs),
    /// AUROC of the detector and NDCG of its explanations against ground truth.
    Eval(EvalArgs),
    /// Rule mining and scoring.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema sidecar JSON.
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Projection width; 0 disables projection.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Use count-min counters.
    #[arg(long)]
    pub count_min: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory for bundle.csv, bundle.schema.json and importances.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = alarm_sim::synth::EPSILON)]
    pub epsilon: f64,
    /// Training preset; defaults to the configured one.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training CSV; the built-in mixed fixture is used when absent.
    #[arg(long, requires = "train_schema")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub train_schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Scores CSV (`row,score`).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the fitted ensemble as JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows to explain; defaults to the lowest-scoring `--top`.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_TOP)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Scores CSV from `detect`; the detector is refit when absent.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Ground-truth importances from `simulate`.
    #[arg(long)]
    pub importances: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Mine candidate rules for an anomaly group.
    Mine(MineArgs),
    /// Coverage and purity of a rule on an anomaly group.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Anomaly group rows; defaults to the rows labelled anomalous.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub group: GroupArgs,
    #[arg(long, default_value_t = 0.5)]
    pub coverage: f64,
    #[arg(long, default_value_t = 0.9)]
    pub purity: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub group: GroupArgs,
    /// Rule as JSON text, or a path to a JSON file.
    #[arg(long)]
    pub rule: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; overrides the configured one.
    #[arg(long)]
    pub bind: Option<std::net::SocketAddr>,
}

pub type CliResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

fn err(msg: impl Into<String>) -> Box<dyn std::error::Error + Send + Sync> {
    msg.into().into()
}

fn load(args: &DataArgs) -> CliResult<DatasetTable> {
    Ok(ingest(&args.data, &args.schema)?)
}

fn detector_params(config: &ServiceConfig, args: &DetectorArgs) -> DetectorParams {
    let mut d = config.detector;
    d.chains = args.chains.unwrap_or(d.chains);
    d.depth = args.depth.unwrap_or(d.depth);
    d.dims = args.dims.unwrap_or(d.dims);
    d.count_min |= args.count_min;
    d.params()
}

fn fit(
    table: &DatasetTable,
    params: DetectorParams,
) -> CliResult<(ChainEnsemble, Vec<ScoreReport>)> {
    let ensemble = ChainEnsemble::fit(table, params)?;
    let reports = ensemble.score_batch(table)?;
    Ok((ensemble, reports))
}

fn group(table: &DatasetTable, rows: &[usize]) -> CliResult<(Vec<Point>, Vec<Point>)> {
    let n = table.len();
    let in_group: Vec<bool> = if rows.is_empty() {
        match table.labels() {
            Some(l) => l.iter().map(|l| l.is_anomaly()).collect(),
            None => vec![false; n],
        }
    } else {
        let mut g = vec![false; n];
        for &r in rows {
            *g.get_mut(r)
                .ok_or_else(|| err(format!("row {r} out of range 0..{n}")))? = true;
        }
        g
    };
    let (a, i): (Vec<_>, Vec<_>) = table.rows().iter().zip(&in_group).partition(|(_, &g)| g);
    Ok((
        a.into_iter().map(|(p, _)| p.clone()).collect(),
        i.into_iter().map(|(p, _)| p.clone()).collect(),
    ))
}

fn read_scores(path: &Path) -> CliResult<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row: usize = rec
            .get(0)
            .ok_or_else(|| err("missing row column"))?
            .parse()?;
        if row != i {
            return Err(err(format!("scores file row {i} is labelled {row}")));
        }
        out.push(
            rec.get(1)
                .ok_or_else(|| err("missing score column"))?
                .parse()?,
        );
    }
    Ok(out)
}

fn write_scores(path: &Path, scores: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), format!("{s:?}")])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Execute a parsed command and return its JSON report.
pub fn execute(cli: Cli) -> CliResult<Json> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.detector.seed = seed;
    }
    let seed = config.detector.seed;
    match cli.command {
        Command::Simulate(a) => simulate(&config, a, seed),
        Command::Detect(a) => {
            let table = load(&a.data)?;
            let (ensemble, reports) = fit(&table, detector_params(&config, &a.detector))?;
            let scores: Vec<f64> = reports.iter().map(|r| r.final_score).collect();
            write_scores(&a.out, &scores)?;
            if let Some(m) = &a.model {
                fs::write(m, ensemble.to_json())?;
            }
            Ok(json!({ "rows": scores.len(), "scores": a.out }))
        }
        Command::Explain(a) => {
            let table = load(&a.data)?;
            let (ensemble, reports) = fit(&table, detector_params(&config, &a.detector))?;
            let scores: Vec<f64> = reports.iter().map(|r| r.final_score).collect();
            let rows = if a.rows.is_empty() {
                top_rows(&scores, a.top)
            } else {
                a.rows
            };
            let mut records = Vec::with_capacity(rows.len());
            for r in rows {
                let p = table
                    .rows()
                    .get(r)
                    .ok_or_else(|| err(format!("row {r} out of range")))?;
                let iv = explain_scored(p, &reports[r], &ensemble)?;
                records.push(ImportanceRecord {
                    row: r,
                    weights: iv
                        .names()
                        .iter()
                        .cloned()
                        .zip(iv.weights().iter().copied())
                        .collect(),
                });
            }
            write_json(&a.out, &records)?;
            Ok(json!({ "explained": records.len(), "importances": a.out }))
        }
        Command::Eval(a) => eval(&config, a),
        Command::Rules(RulesCommand::Mine(a)) => {
            let table = load(&a.group.data)?;
            let (anomalies, inliers) = group(&table, &a.group.rows)?;
            let rules = mine_candidates(
                &anomalies,
                &inliers,
                table.schema(),
                &MiningConfig::with_thresholds(a.coverage, a.purity),
            )?;
            Ok(serde_json::to_value(rules)?)
        }
        Command::Rules(RulesCommand::Score(a)) => {
            let table = load(&a.group.data)?;
            let text = if Path::new(&a.rule).is_file() {
                fs::read_to_string(&a.rule)?
            } else {
                a.rule.clone()
            };
            let rule: Rule = serde_json::from_str(&text).map_err(|e| err(format!("rule: {e}")))?;
            let (anomalies, inliers) = group(&table, &a.group.rows)?;
            Ok(serde_json::to_value(score_rule(
                &rule,
                &anomalies,
                &inliers,
                table.schema(),
            )?)?)
        }
        Command::Serve(a) => {
            if let Some(bind) = a.bind {
                config.bind = bind;
            }
            serve(config)?;
            Ok(json!({ "stopped": true }))
        }
    }
}

fn simulate(config: &ServiceConfig, a: SimulateArgs, seed: u64) -> CliResult<Json> {
    let preset = a.preset.as_deref().unwrap_or(&config.simulator_preset);
    let mut train_config = TrainConfig::preset(preset)
        .ok_or_else(|| err(format!("unknown preset {preset:?}")))?
        .with_seed(seed);
    if let Some(e) = a.epochs {
        train_config.epochs = e;
    }
    let training = match (&a.train, &a.train_schema) {
        (Some(csv), Some(schema)) => ingest(csv, schema)?,
        _ => fixtures::mixed(FIXTURE_ROWS, seed),
    };
    let model = GenModel::train(&training, &train_config)?;
    let bundle = synthesize(
        &model,
        &SynthConfig {
            m: a.m,
            k: a.k,
            epsilon: a.epsilon,
            policy: InflationPolicy::default(),
            seed,
        },
    )?;
    fs::create_dir_all(&a.out)?;
    let (csv, schema, imp) = (
        a.out.join("bundle.csv"),
        a.out.join("bundle.schema.json"),
        a.out.join("importances.json"),
    );
    bundle.save(&csv, &schema, &imp)?;
    Ok(json!({
        "csv": csv,
        "schema": schema,
        "importances": imp,
        "normals": bundle.normals.len(),
        "anomalies": bundle.anomalies.len(),
        "threshold": bundle.threshold,
    }))
}

fn eval(config: &ServiceConfig, a: EvalArgs) -> CliResult<Json> {
    let table = load(&a.data)?;
    let labels: Vec<bool> = table
        .labels()
        .ok_or_else(|| err("eval needs a label column"))?
        .iter()
        .map(|l| l.is_anomaly())
        .collect();
    let params = detector_params(config, &a.detector);
    let mut fitted = None;
    let scores = match &a.scores {
        Some(p) => read_scores(p)?,
        None => {
            let (e, r) = fit(&table, params)?;
            let s = r.iter().map(|r| r.final_score).collect();
            fitted = Some((e, r));
            s
        }
    };
    if scores.len() != table.len() {
        return Err(err(format!(
            "{} scores for {} rows",
            scores.len(),
            table.len()
        )));
    }
    let mut report =
        json!({ "rows": table.len(), "anomalies": labels.iter().filter(|&&l| l).count() });
    report["auroc"] = json!(auroc(&scores, &labels)?);
    if let Some(path) = &a.importances {
        let truth = load_importances(path, table.schema())?;
        let (ensemble, reports) = match fitted {
            Some(f) => f,
            None => fit(&table, params)?,
        };
        let (mut total, mut baseline) = (0.0, 0.0);
        for (i, (row, w)) in truth.iter().enumerate() {
            let p = table
                .rows()
                .get(*row)
                .ok_or_else(|| err(format!("importance row {row} out of range")))?;
            let iv = explain_scored(p, &reports[*row], &ensemble)?;
            total += ndcg(iv.weights(), w)?;
            baseline += random_ndcg(w, RANDOM_RESAMPLES, params.seed.wrapping_add(i as u64))?;
        }
        let n = truth.len().max(1) as f64;
        report["ndcg"] = json!(total / n);
        report["random_ndcg"] = json!(baseline / n);
    }
    Ok(report)
}

pub fn serve(config: ServiceConfig) -> CliResult<()> {
    let bind = config.bind;
    let engine = Arc::new(Engine::open(config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::api::router(engine))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, std::io::Error>(())
    })?;
    Ok(())
}
