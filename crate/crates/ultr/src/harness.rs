//! End-to-end experiment pipelines behind the `ultr` CLI: simulate (or load)
//! click logs, estimate propensities, train the method under test alongside
//! its naive counterpart over several seeds, evaluate, and persist reports
//! with significance marks and a hashed manifest.
//!
//! Methods are grouped by base loss for significance testing: a debiasing
//! method is always compared against the naive method sharing its loss
//! (pointwise, listwise, or LambdaRank), with a two-sided paired t-test and
//! Bonferroni correction across the compared metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{split_log, ClickLog, JudgedDataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_click_nll, evaluate_ranker, mean_sd, paired_ttest, MetricReport, Significance,
    DCG_TRUNCATIONS,
};
use crate::losses::{LossKind, LossSpec};
use crate::model::PositionSource;
use crate::propensity::{
    adjacent_pair, all_pairs, build_intervention_index, extract_model_propensities, pivot_rank,
    CurveMethod, PropensityCurve,
};
use crate::simulate::{generate_log, LoggingPolicy, TruthSidecar, UserModelConfig};
use crate::train::{train, TrainConfig};

/// Default t-test level of the comparison protocol.
pub const DEFAULT_ALPHA: f64 = 0.01;

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

fn default_min_docs() -> usize {
    5
}

/// Where the click data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Simulate clicks over a judged dataset.
    Simulated {
        judged: PathBuf,
        #[serde(default)]
        user_model: UserModelConfig,
        #[serde(default)]
        policy: LoggingPolicy,
        n_sessions: usize,
        #[serde(default)]
        sim_seed: u64,
        /// Queries with fewer documents are dropped before simulation.
        #[serde(default = "default_min_docs")]
        min_docs: usize,
    },
    /// Pre-split external logs plus the judged evaluation set.
    External {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        judged: PathBuf,
        /// Optional ground-truth propensity sidecar.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<PathBuf>,
    },
}

/// Where IPS methods get their curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensitySource {
    GroundTruth,
    AdjacentPair,
    PivotRank,
    AllPairs,
}

/// Training knobs shared by every run of a pipeline (the loss and seed vary
/// per run). Field names mirror [`TrainConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub hidden_dims: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::new(LossSpec::new(LossKind::NaivePointwise));
        TrainSettings {
            hidden_dims: base.hidden_dims,
            lr: base.lr,
            weight_decay: base.weight_decay,
            dropout: base.dropout,
            max_epochs: base.max_epochs,
            patience: base.patience,
            batch_size: base.batch_size,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, loss: LossSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            loss,
            hidden_dims: self.hidden_dims.clone(),
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed,
            epoch_lr_override: None,
        }
    }
}

/// One full experiment: method, data, propensity source, seeds, output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// The method under test. For IPS kinds the curve is filled in by the
    /// pipeline from `propensity_source`.
    pub loss: LossSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity_source: Option<PropensitySource>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn read_path(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        Ok(serde_json::from_reader(std::io::BufReader::new(
            fs::File::open(path)?,
        ))?)
    }
}

/// Stable method name, identical to the serde representation of
/// [`LossKind`].
pub fn loss_kind_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::NaivePointwise => "naive-pointwise",
        LossKind::NaiveListwise => "naive-listwise",
        LossKind::NaiveLambdarank => "naive-lambdarank",
        LossKind::TwoTower => "two-tower",
        LossKind::RegressionEm => "regression-em",
        LossKind::IpsPointwise => "ips-pointwise",
        LossKind::IpsListwise => "ips-listwise",
        LossKind::Dla => "dla",
        LossKind::PairDebias => "pair-debias",
    }
}

/// Hashed listing of every artifact a pipeline produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    /// File name -> SHA-256 of its contents (the manifest itself excluded).
    pub files: BTreeMap<String, String>,
}

/// In-memory summary of a finished pipeline.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub out_dir: PathBuf,
    /// Method name -> per-seed reports, in seed order.
    pub per_seed: BTreeMap<String, Vec<(u64, MetricReport)>>,
    /// Metric name -> significance of the method under test against its
    /// naive counterpart. Empty when the method is itself naive.
    pub marks: BTreeMap<String, Significance>,
    pub manifest: Manifest,
}

/// Write a file atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

fn hash_dir_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "manifest.json" {
            continue;
        }
        files.insert(name, sha256_hex(&fs::read(entry.path())?));
    }
    Ok(files)
}

/// Run the full pipeline described by `cfg`; artifacts land in
/// `cfg.out_dir`. On failure, partial outputs are retained and the manifest
/// records the failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut stage = "load-data";
    match run_pipeline_stages(cfg, &mut stage) {
        Ok((per_seed, marks)) => {
            let manifest = Manifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                status: "ok".into(),
                failed_stage: None,
                error: None,
                config: cfg.clone(),
                files: hash_dir_files(&cfg.out_dir)?,
            };
            write_atomic(
                &cfg.out_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?.as_bytes(),
            )?;
            Ok(PipelineResult {
                out_dir: cfg.out_dir.clone(),
                per_seed,
                marks,
                manifest,
            })
        }
        Err(e) => {
            let manifest = Manifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                status: "failed".into(),
                failed_stage: Some(stage.to_string()),
                error: Some(e.to_string()),
                config: cfg.clone(),
                files: hash_dir_files(&cfg.out_dir).unwrap_or_default(),
            };
            let _ = write_atomic(
                &cfg.out_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?.as_bytes(),
            );
            Err(e)
        }
    }
}

type PerSeed = BTreeMap<String, Vec<(u64, MetricReport)>>;

fn run_pipeline_stages(
    cfg: &ExperimentConfig,
    stage: &mut &'static str,
) -> Result<(PerSeed, BTreeMap<String, Significance>)> {
    if cfg.seeds.is_empty() {
        return Err(Error::validation("seeds must be non-empty"));
    }
    let out = &cfg.out_dir;

    *stage = "load-data";
    let (judged, train_split, val_split, test_split, truth) = match &cfg.data {
        DataSource::Simulated {
            judged,
            user_model,
            policy,
            n_sessions,
            sim_seed,
            min_docs,
        } => {
            let judged = JudgedDataset::read_path(judged)?.filter_min_docs(*min_docs);
            *stage = "simulate";
            let sim = generate_log(&judged, policy, user_model, *n_sessions, *sim_seed)?;
            write_atomic(
                &out.join("ground_truth.json"),
                serde_json::to_string_pretty(&sim.sidecar())?.as_bytes(),
            )?;
            *stage = "split";
            let (train_l, val_l, test_l) = split_log(sim.log, cfg.split, *sim_seed)?;
            (judged, train_l, val_l, test_l, Some(sim.truth))
        }
        DataSource::External {
            train,
            val,
            test,
            judged,
            truth,
        } => {
            let judged = JudgedDataset::read_path(judged)?;
            let train_l = ClickLog::read_path(train)?;
            let val_l = ClickLog::read_path(val)?;
            let test_l = ClickLog::read_path(test)?;
            let truth = match truth {
                Some(path) => {
                    let sidecar: TruthSidecar =
                        serde_json::from_reader(std::io::BufReader::new(fs::File::open(path)?))?;
                    Some(PropensityCurve {
                        method: CurveMethod::GroundTruth,
                        values: sidecar.propensities,
                    })
                }
                None => None,
            };
            (judged, train_l, val_l, test_l, truth)
        }
    };

    *stage = "estimate-propensity";
    let mut loss = cfg.loss.clone();
    if loss.kind.needs_curve() {
        let source = cfg.propensity_source.ok_or_else(|| {
            Error::validation("IPS methods need a propensity_source in the config")
        })?;
        let curve = match source {
            PropensitySource::GroundTruth => truth.clone().ok_or_else(|| {
                Error::validation(
                    "propensity_source ground-truth needs simulated data or a truth sidecar",
                )
            })?,
            estimator => {
                let idx = build_intervention_index(&train_split);
                let k = train_split.n_ranks;
                match estimator {
                    PropensitySource::AdjacentPair => adjacent_pair(&idx, k)?,
                    PropensitySource::PivotRank => pivot_rank(&idx, k, 1)?,
                    PropensitySource::AllPairs => all_pairs(&idx, k)?,
                    PropensitySource::GroundTruth => unreachable!(),
                }
            }
        };
        curve.write_path(out.join("propensity.json"))?;
        loss.curve = Some(curve);
    }
    loss.validate()?;

    *stage = "train";
    let main_name = loss_kind_name(loss.kind).to_string();
    let naive_kind = loss.kind.naive_counterpart();
    let mut methods: Vec<(String, LossSpec)> = vec![(main_name.clone(), loss.clone())];
    if naive_kind != loss.kind {
        methods.push((
            loss_kind_name(naive_kind).to_string(),
            LossSpec::new(naive_kind),
        ));
    }

    let mut per_seed: PerSeed = BTreeMap::new();
    for (name, spec) in &methods {
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            let train_cfg = cfg.train.to_config(spec.clone(), seed);
            let trained = train(&train_split, &val_split, &train_cfg)?;
            *stage = "evaluate";
            let mut report = evaluate_ranker(&trained.model, &judged)?;
            report.nll = evaluate_click_nll(&trained.model, spec.kind, &test_split)?;
            trained
                .model
                .save(out.join(format!("checkpoint_{name}_seed{seed}.json")))?;
            if name == &main_name {
                if let Some((_, source)) = trained.model.position_logits() {
                    if matches!(source, PositionSource::Rem | PositionSource::TwoTower) {
                        extract_model_propensities(&trained.model)?
                            .write_path(out.join(format!("propensity_{name}_seed{seed}.json")))?;
                    }
                }
            }
            rows.push((seed, report));
            *stage = "train";
        }
        per_seed.insert(name.clone(), rows);
    }

    *stage = "aggregate";
    let mut csv = String::from("method,seed,dcg@1,dcg@3,dcg@5,dcg@10,mrr@10,nll,n_queries\n");
    for (name, rows) in &per_seed {
        for (seed, report) in rows {
            let nll = report.nll.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(
                csv,
                "{name},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},{nll},{}",
                report.dcg[&1],
                report.dcg[&3],
                report.dcg[&5],
                report.dcg[&10],
                report.mrr10,
                report.n_queries
            );
        }
    }
    write_atomic(&out.join("reports.csv"), csv.as_bytes())?;

    let marks = if methods.len() == 2 {
        significance_marks(
            &per_seed[&main_name],
            &per_seed[loss_kind_name(naive_kind)],
            DEFAULT_ALPHA,
            1,
        )?
    } else {
        BTreeMap::new()
    };

    let mut md = String::new();
    let _ = writeln!(
        md,
        "| Method | DCG@1 | DCG@3 | DCG@5 | DCG@10 | MRR@10 | NLL |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    // Baseline row first, then the method under test with its marks.
    let mut ordered: Vec<&(String, LossSpec)> = methods.iter().collect();
    ordered.reverse();
    for (name, _) in ordered {
        let rows = &per_seed[name];
        let cell = |metric: &str, values: Vec<Option<f64>>| -> String {
            let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
            if present.len() != values.len() {
                return "-".into();
            }
            let (mean, sd) = mean_sd(&present);
            let mark = if name == &main_name {
                match marks.get(metric) {
                    Some(Significance::Better) => " ▲",
                    Some(Significance::Worse) => " ▼",
                    _ => "",
                }
            } else {
                ""
            };
            format!("{mean:.3} ({sd:.3}){mark}")
        };
        let _ = writeln!(
            md,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            cell("dcg@1", rows.iter().map(|(_, r)| Some(r.dcg[&1])).collect()),
            cell("dcg@3", rows.iter().map(|(_, r)| Some(r.dcg[&3])).collect()),
            cell("dcg@5", rows.iter().map(|(_, r)| Some(r.dcg[&5])).collect()),
            cell("dcg@10", rows.iter().map(|(_, r)| Some(r.dcg[&10])).collect()),
            cell("mrr@10", rows.iter().map(|(_, r)| Some(r.mrr10)).collect()),
            cell("nll", rows.iter().map(|(_, r)| r.nll).collect()),
        );
    }
    write_atomic(&out.join("aggregate.md"), md.as_bytes())?;

    Ok((per_seed, marks))
}

/// The metrics a comparison covers, in report order. NLL participates only
/// when both sides define it.
fn metric_values(rows: &[(u64, MetricReport)]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for &k in &DCG_TRUNCATIONS {
        out.insert(
            format!("dcg@{k}"),
            rows.iter().map(|(_, r)| r.dcg[&k]).collect(),
        );
    }
    out.insert(
        "mrr@10".to_string(),
        rows.iter().map(|(_, r)| r.mrr10).collect(),
    );
    if rows.iter().all(|(_, r)| r.nll.is_some()) {
        // Negated so that "better" uniformly means a larger value.
        out.insert(
            "nll".to_string(),
            rows.iter().map(|(_, r)| -r.nll.expect("checked")).collect(),
        );
    }
    out
}

/// Per-metric significance of `candidate` against `baseline` under the
/// grouped comparison protocol: two-sided paired t-test at `alpha`,
/// Bonferroni corrected for `n_runs * n_metrics` comparisons.
pub fn significance_marks(
    candidate: &[(u64, MetricReport)],
    baseline: &[(u64, MetricReport)],
    alpha: f64,
    n_runs: usize,
) -> Result<BTreeMap<String, Significance>> {
    if candidate.len() != baseline.len() {
        return Err(Error::validation(format!(
            "seed-count mismatch: {} vs {}",
            candidate.len(),
            baseline.len()
        )));
    }
    let cand = metric_values(candidate);
    let base = metric_values(baseline);
    let shared: Vec<&String> = cand.keys().filter(|k| base.contains_key(*k)).collect();
    let n_comparisons = shared.len() * n_runs;
    let mut marks = BTreeMap::new();
    for metric in shared {
        let test = paired_ttest(&cand[metric], &base[metric], alpha, n_comparisons)?;
        marks.insert(metric.clone(), test.significant);
    }
    Ok(marks)
}

/// Per-seed reports of the method under test in a pipeline directory.
pub fn read_run_reports(dir: &Path) -> Result<(String, Vec<(u64, MetricReport)>)> {
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(fs::File::open(
        dir.join("manifest.json"),
    )?))?;
    let main = loss_kind_name(manifest.config.loss.kind).to_string();
    let csv = fs::read_to_string(dir.join("reports.csv"))?;
    let mut rows = Vec::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("expected 9 CSV fields, got {}", fields.len()),
            });
        }
        if fields[0] != main {
            continue;
        }
        let num = |idx: usize| -> Result<f64> {
            fields[idx].parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad number `{}`", fields[idx]),
            })
        };
        let mut dcg = BTreeMap::new();
        for (pos, &k) in DCG_TRUNCATIONS.iter().enumerate() {
            dcg.insert(k, num(pos + 2)?);
        }
        rows.push((
            fields[1].parse().map_err(|_| Error::Parse {
                line: ln + 1,
                msg: format!("bad seed `{}`", fields[1]),
            })?,
            MetricReport {
                dcg,
                mrr10: num(6)?,
                nll: if fields[7].is_empty() {
                    None
                } else {
                    Some(num(7)?)
                },
                n_queries: fields[8].parse().map_err(|_| Error::Parse {
                    line: ln + 1,
                    msg: format!("bad n_queries `{}`", fields[8]),
                })?,
            },
        ));
    }
    Ok((main, rows))
}

/// Compare finished runs against a baseline run: per-metric paired t-tests
/// with Bonferroni correction over `runs x metrics`. Writes a marks table
/// (markdown) and a long-format CSV into `out`.
pub fn compare(run_dirs: &[PathBuf], baseline_dir: &Path, alpha: f64, out: &Path) -> Result<()> {
    let (baseline_name, baseline_rows) = read_run_reports(baseline_dir)?;
    if baseline_rows.is_empty() {
        return Err(Error::validation("baseline run has no report rows"));
    }
    let n_queries = baseline_rows[0].1.n_queries;
    let mut runs = Vec::new();
    for dir in run_dirs {
        let (name, rows) = read_run_reports(dir)?;
        if rows.len() != baseline_rows.len() {
            return Err(Error::validation(format!(
                "run {name} has {} seeds, baseline has {}",
                rows.len(),
                baseline_rows.len()
            )));
        }
        if rows.first().map(|(_, r)| r.n_queries) != Some(n_queries) {
            return Err(Error::validation(format!(
                "run {name} was evaluated on a different judged set"
            )));
        }
        runs.push((name, rows));
    }

    let mut csv = String::from("run,metric,mean,sd,baseline_mean,t,p,mark\n");
    let mut md = format!("Baseline: {baseline_name} ({} seeds)\n\n", baseline_rows.len());
    let _ = writeln!(md, "| Run | Metric | Mean (sd) | Baseline | Mark |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    let base_metrics = metric_values(&baseline_rows);
    for (name, rows) in &runs {
        let cand_metrics = metric_values(rows);
        let shared: Vec<&String> = cand_metrics
            .keys()
            .filter(|k| base_metrics.contains_key(*k))
            .collect();
        let n_comparisons = shared.len() * runs.len();
        for metric in shared {
            let test = paired_ttest(
                &cand_metrics[metric],
                &base_metrics[metric],
                alpha,
                n_comparisons,
            )?;
            let (mean, sd) = mean_sd(&cand_metrics[metric]);
            let (base_mean, _) = mean_sd(&base_metrics[metric]);
            // The NLL columns were negated for orientation; undo for display.
            let (mean, base_mean) = if metric == "nll" {
                (-mean, -base_mean)
            } else {
                (mean, base_mean)
            };
            let mark = match test.significant {
                Significance::Better => "▲",
                Significance::Worse => "▼",
                Significance::None => "",
            };
            let _ = writeln!(
                csv,
                "{name},{metric},{mean:.6},{sd:.6},{base_mean:.6},{:.6},{:.6},{mark}",
                test.t, test.p
            );
            let _ = writeln!(
                md,
                "| {name} | {metric} | {mean:.3} ({sd:.3}) | {base_mean:.3} | {mark} |"
            );
        }
    }
    fs::create_dir_all(out)?;
    write_atomic(&out.join("comparison.csv"), csv.as_bytes())?;
    write_atomic(&out.join("comparison.md"), md.as_bytes())?;
    Ok(())
}

/// Long-format CSV `(method, rank, value)` of propensity curves plus the
/// CTR-per-rank diagnostic, ready for external plotting.
pub fn emit_plot_data(
    curves: &[PropensityCurve],
    ctr: &BTreeMap<u32, f64>,
    out: &Path,
) -> Result<()> {
    let mut csv = String::from("method,rank,value\n");
    for curve in curves {
        let name = serde_json::to_value(curve.method)?;
        let name = name.as_str().expect("method serializes to a string").to_string();
        for (i, v) in curve.values.iter().enumerate() {
            let _ = writeln!(csv, "{name},{},{v:.6}", i + 1);
        }
    }
    for (rank, value) in ctr {
        let _ = writeln!(csv, "ctr,{rank},{value:.6}");
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_judged;
    use crate::corpus::{JudgedDataset, JudgedDoc, JudgedQuery};
    use crate::simulate::PolicyKind;

    fn tiny_judged() -> JudgedDataset {
        JudgedDataset {
            queries: (0..4)
                .map(|qi| JudgedQuery {
                    query_id: format!("q{qi}"),
                    docs: (0..6)
                        .map(|di| JudgedDoc {
                            doc_id: format!("q{qi}_d{di}"),
                            features: vec![((di + qi) % 5) as f64, di as f64 * 0.5],
                            grade: ((di + qi) % 5) as u8,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn smoke_config(dir: &Path, kind: LossKind) -> ExperimentConfig {
        let judged_path = dir.join("judged.txt");
        let mut buf = Vec::new();
        write_judged(&tiny_judged(), &mut buf).unwrap();
        fs::write(&judged_path, buf).unwrap();
        ExperimentConfig {
            data: DataSource::Simulated {
                judged: judged_path,
                user_model: UserModelConfig {
                    eta: 1.0,
                    max_rank: 6,
                    swap_fraction: 0.3,
                    ..UserModelConfig::default()
                },
                policy: LoggingPolicy {
                    kind: PolicyKind::OracleNoisy,
                    noise_sigma: 1.0,
                    weight_seed: 0,
                },
                n_sessions: 400,
                sim_seed: 5,
                min_docs: 1,
            },
            loss: LossSpec::new(kind),
            propensity_source: kind.needs_curve().then_some(PropensitySource::GroundTruth),
            train: TrainSettings {
                hidden_dims: vec![4],
                max_epochs: 3,
                patience: 2,
                batch_size: 64,
                lr: 0.01,
                ..TrainSettings::default()
            },
            seeds: vec![0],
            split: (0.8, 0.1, 0.1),
            out_dir: dir.join("run"),
        }
    }

    #[test]
    fn smoke_pipeline_produces_artifacts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path(), LossKind::NaivePointwise);
        let result = run_pipeline(&cfg).unwrap();
        assert_eq!(result.manifest.status, "ok");
        assert!(result.marks.is_empty(), "naive run has no comparison marks");
        assert!(cfg.out_dir.join("reports.csv").exists());
        assert!(cfg.out_dir.join("aggregate.md").exists());
        assert!(cfg.out_dir.join("ground_truth.json").exists());
        assert!(cfg
            .out_dir
            .join("checkpoint_naive-pointwise_seed0.json")
            .exists());
        // Manifest lists every file except itself, with matching hashes.
        for (name, hash) in &result.manifest.files {
            let bytes = fs::read(cfg.out_dir.join(name)).unwrap();
            assert_eq!(&sha256_hex(&bytes), hash, "{name}");
        }
        assert!(!result.manifest.files.contains_key("manifest.json"));

        let (main, rows) = read_run_reports(&cfg.out_dir).unwrap();
        assert_eq!(main, "naive-pointwise");
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn pipeline_with_ips_trains_its_naive_counterpart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path(), LossKind::IpsPointwise);
        let result = run_pipeline(&cfg).unwrap();
        assert!(result.per_seed.contains_key("ips-pointwise"));
        assert!(result.per_seed.contains_key("naive-pointwise"));
        assert_eq!(result.marks.len(), 6, "5 ranking metrics + nll");
        assert!(cfg.out_dir.join("propensity.json").exists());
    }

    #[test]
    fn failed_stage_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config(dir.path(), LossKind::IpsPointwise);
        cfg.propensity_source = None; // invalid: IPS without a source
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().contains("propensity_source"), "{err}");
        let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(
            fs::File::open(cfg.out_dir.join("manifest.json")).unwrap(),
        ))
        .unwrap();
        assert_eq!(manifest.status, "failed");
        assert_eq!(manifest.failed_stage.as_deref(), Some("estimate-propensity"));
    }

    #[test]
    fn compare_marks_match_hand_computed_tests() {
        // Fabricate two run directories with known per-seed DCG values.
        let dir = tempfile::tempdir().unwrap();
        let make_run = |name: &str, kind: LossKind, offsets: &[f64]| -> PathBuf {
            let run_dir = dir.path().join(name);
            fs::create_dir_all(&run_dir).unwrap();
            let mut csv =
                String::from("method,seed,dcg@1,dcg@3,dcg@5,dcg@10,mrr@10,nll,n_queries\n");
            for (seed, off) in offsets.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},,4",
                    loss_kind_name(kind),
                    1.0 + off,
                    2.0 + off,
                    3.0 + off,
                    4.0 + off,
                    0.5 + off / 100.0
                );
            }
            fs::write(run_dir.join("reports.csv"), csv).unwrap();
            let cfg = ExperimentConfig {
                data: DataSource::External {
                    train: "t".into(),
                    val: "v".into(),
                    test: "te".into(),
                    judged: "j".into(),
                    truth: None,
                },
                loss: LossSpec::new(kind),
                propensity_source: None,
                train: TrainSettings::default(),
                seeds: (0..offsets.len() as u64).collect(),
                split: (0.8, 0.1, 0.1),
                out_dir: run_dir.clone(),
            };
            let manifest = Manifest {
                version: "test".into(),
                status: "ok".into(),
                failed_stage: None,
                error: None,
                config: cfg,
                files: BTreeMap::new(),
            };
            fs::write(
                run_dir.join("manifest.json"),
                serde_json::to_string(&manifest).unwrap(),
            )
            .unwrap();
            run_dir
        };

        let baseline = make_run(
            "baseline",
            LossKind::NaiveListwise,
            &[0.0, 0.001, -0.001, 0.0005, -0.0005],
        );
        // Large constant uplift: significant on every metric.
        let better = make_run("better", LossKind::Dla, &[0.5, 0.501, 0.499, 0.5005, 0.4995]);
        let out = dir.path().join("cmp");
        compare(&[better.clone()], &baseline, 0.01, &out).unwrap();
        let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
        for line in csv.lines().skip(1) {
            assert!(line.ends_with(",▲"), "expected ▲ on every metric: {line}");
        }

        // Comparing a run against itself leaves every mark blank.
        let self_out = dir.path().join("cmp_self");
        compare(&[baseline.clone()], &baseline, 0.01, &self_out).unwrap();
        let csv = fs::read_to_string(self_out.join("comparison.csv")).unwrap();
        for line in csv.lines().skip(1) {
            assert!(line.ends_with(','), "expected blank mark: {line}");
        }
    }

    #[test]
    fn emit_plot_data_long_format() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plot.csv");
        let curve = PropensityCurve {
            method: CurveMethod::AdjacentPair,
            values: vec![1.0, 0.5, 0.25],
        };
        let mut ctr = BTreeMap::new();
        ctr.insert(1, 0.4);
        ctr.insert(2, 0.2);
        emit_plot_data(&[curve], &ctr, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,rank,value");
        assert_eq!(lines.len(), 6); // header + 3 curve rows + 2 ctr rows
        assert!(lines[1].starts_with("adjacent-pair,1,"));
        assert!(lines[4].starts_with("ctr,1,"));

        // Empty input: header only.
        let empty_out = dir.path().join("empty.csv");
        emit_plot_data(&[], &BTreeMap::new(), &empty_out).unwrap();
        assert_eq!(fs::read_to_string(&empty_out).unwrap(), "method,rank,value\n");
    }
}
