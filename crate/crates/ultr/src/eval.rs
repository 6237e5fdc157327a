//! Ranking metrics, click-prediction NLL, the random baseline, and the
//! cross-seed significance protocol.
//!
//! DCG uses linear gain (`grade / log2(rank + 1)`) by default — consistent
//! with the magnitude of published random-ranker baselines on 0–4 grades —
//! with an exponential-gain variant (`2^grade - 1`) available for
//! comparison. Score ties break by stable input order everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{ClickLog, JudgedDataset};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{sigmoid, ForwardMode, ScoringModel};
use crate::rng::{stream, stream_rng};

/// DCG truncation levels reported everywhere.
pub const DCG_TRUNCATIONS: [usize; 4] = [1, 3, 5, 10];

/// Grade below which a document does not count as relevant for MRR.
pub const MRR_RELEVANT_THRESHOLD: u8 = 1;

/// Gain function for DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcgGain {
    /// `grade`
    Linear,
    /// `2^grade - 1`
    Exponential,
}

/// Discounted cumulative gain at cutoff `k` with linear gain.
pub fn dcg_at_k(grades_in_ranked_order: &[u8], k: usize) -> f64 {
    dcg_at_k_with_gain(grades_in_ranked_order, k, DcgGain::Linear)
}

pub fn dcg_at_k_with_gain(grades_in_ranked_order: &[u8], k: usize, gain: DcgGain) -> f64 {
    grades_in_ranked_order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| {
            let gain = match gain {
                DcgGain::Linear => g as f64,
                DcgGain::Exponential => ((1u64 << g) - 1) as f64,
            };
            gain / ((i + 2) as f64).log2()
        })
        .sum()
}

/// Reciprocal rank of the first document with `grade >= threshold` within
/// the top 10; 0 when there is none.
pub fn mrr_at_10(grades_in_ranked_order: &[u8], threshold: u8) -> f64 {
    grades_in_ranked_order
        .iter()
        .take(10)
        .position(|&g| g >= threshold)
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

/// Mean negative log-likelihood of predicted click probabilities.
/// Probabilities are clamped away from exactly 0 and 1 at 1e-12.
pub fn nll(click_probs: &[f64], clicks: &[u8]) -> Result<f64> {
    if click_probs.len() != clicks.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} clicks",
            click_probs.len(),
            clicks.len()
        )));
    }
    if click_probs.is_empty() {
        return Err(Error::validation("nll of an empty vector is undefined"));
    }
    let mut total = 0.0;
    for (&p, &c) in click_probs.iter().zip(clicks) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if c == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / clicks.len() as f64)
}

/// One run's evaluation: per-truncation DCG, MRR@10, optional click NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Truncation level -> mean DCG over queries.
    pub dcg: BTreeMap<usize, f64>,
    pub mrr10: f64,
    /// Mean click NLL; only defined for methods predicting calibrated
    /// click probabilities.
    pub nll: Option<f64>,
    pub n_queries: usize,
}

/// Rank a judged dataset with the model's relevance tower and average the
/// ranking metrics over queries. Examination parameters never contribute:
/// evaluation orders by the relevance score alone, ties broken by input
/// order.
pub fn evaluate_ranker(model: &ScoringModel, data: &JudgedDataset) -> Result<MetricReport> {
    if data.queries.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let mut dcg_sums: BTreeMap<usize, f64> = DCG_TRUNCATIONS.iter().map(|&k| (k, 0.0)).collect();
    let mut mrr_sum = 0.0;
    for query in &data.queries {
        let rows: Vec<&[f64]> = query.docs.iter().map(|d| d.features.as_slice()).collect();
        let scores = model.forward(&rows, ForwardMode::Infer)?;
        let ranked = rank_grades_by_scores(&scores, query.docs.iter().map(|d| d.grade));
        for (&k, sum) in dcg_sums.iter_mut() {
            *sum += dcg_at_k(&ranked, k);
        }
        mrr_sum += mrr_at_10(&ranked, MRR_RELEVANT_THRESHOLD);
    }
    let n = data.queries.len() as f64;
    Ok(MetricReport {
        dcg: dcg_sums.into_iter().map(|(k, s)| (k, s / n)).collect(),
        mrr10: mrr_sum / n,
        nll: None,
        n_queries: data.queries.len(),
    })
}

/// Grades reordered by descending score, stable in the input order.
fn rank_grades_by_scores(scores: &[f64], grades: impl Iterator<Item = u8>) -> Vec<u8> {
    let grades: Vec<u8> = grades.collect();
    let mut order: Vec<usize> = (0..grades.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.into_iter().map(|i| grades[i]).collect()
}

/// Predicted click probability of every impression in a log, using the
/// probability form matching the training objective: `sigmoid(s)` for
/// pointwise naive/IPS, `sigmoid(e(k) + s)` for the two-tower model, and
/// the PBM product `sigmoid(e(k)) * sigmoid(s)` for RegressionEM. Returns
/// `None` for objectives without calibrated click probabilities.
pub fn click_probabilities(
    model: &ScoringModel,
    kind: LossKind,
    log: &ClickLog,
) -> Result<Option<(Vec<f64>, Vec<u8>)>> {
    if !kind.predicts_click_prob() {
        return Ok(None);
    }
    let exam = match kind {
        LossKind::TwoTower | LossKind::RegressionEm => {
            let (logits, _) = model.position_logits().ok_or_else(|| {
                Error::validation(format!(
                    "{kind:?} evaluation needs per-rank examination parameters"
                ))
            })?;
            Some(logits.to_vec())
        }
        _ => None,
    };
    let mut probs = Vec::new();
    let mut clicks = Vec::new();
    for session in &log.sessions {
        let rows: Vec<&[f64]> = session.items.iter().map(|i| i.features.as_slice()).collect();
        let scores = model.forward(&rows, ForwardMode::Infer)?;
        for (item, &s) in session.items.iter().zip(&scores) {
            let p = match (&exam, kind) {
                (Some(e), LossKind::TwoTower) => {
                    // Ranks beyond the trained range reuse the deepest
                    // parameter, mirroring curve consumption in IPS.
                    let idx = (item.rank as usize - 1).min(e.len() - 1);
                    sigmoid(e[idx] + s)
                }
                (Some(e), LossKind::RegressionEm) => {
                    let idx = (item.rank as usize - 1).min(e.len() - 1);
                    sigmoid(e[idx]) * sigmoid(s)
                }
                _ => sigmoid(s),
            };
            probs.push(p);
            clicks.push(item.click);
        }
    }
    Ok(Some((probs, clicks)))
}

/// Mean click NLL of a model over a log, or `None` for objectives without
/// calibrated click probabilities.
pub fn evaluate_click_nll(
    model: &ScoringModel,
    kind: LossKind,
    log: &ClickLog,
) -> Result<Option<f64>> {
    match click_probabilities(model, kind, log)? {
        Some((probs, clicks)) => Ok(Some(nll(&probs, &clicks)?)),
        None => Ok(None),
    }
}

/// Mean and standard deviation (across seeds) of the random ranker.
#[derive(Debug, Clone)]
pub struct RandomBaseline {
    pub mean: MetricReport,
    pub sd: MetricReport,
}

/// Rank every query uniformly at random, once per seed, and aggregate the
/// per-seed reports.
pub fn random_baseline(data: &JudgedDataset, n_seeds: usize) -> Result<RandomBaseline> {
    if n_seeds < 1 {
        return Err(Error::validation("n_seeds must be >= 1"));
    }
    if data.queries.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    use rand::seq::SliceRandom;
    let mut reports: Vec<MetricReport> = Vec::with_capacity(n_seeds);
    for seed in 0..n_seeds {
        let mut rng = stream_rng(seed as u64, stream::RANDOM_BASELINE, 0);
        let mut dcg_sums: BTreeMap<usize, f64> =
            DCG_TRUNCATIONS.iter().map(|&k| (k, 0.0)).collect();
        let mut mrr_sum = 0.0;
        for query in &data.queries {
            let mut grades: Vec<u8> = query.docs.iter().map(|d| d.grade).collect();
            grades.shuffle(&mut rng);
            for (&k, sum) in dcg_sums.iter_mut() {
                *sum += dcg_at_k(&grades, k);
            }
            mrr_sum += mrr_at_10(&grades, MRR_RELEVANT_THRESHOLD);
        }
        let n = data.queries.len() as f64;
        reports.push(MetricReport {
            dcg: dcg_sums.into_iter().map(|(k, s)| (k, s / n)).collect(),
            mrr10: mrr_sum / n,
            nll: None,
            n_queries: data.queries.len(),
        });
    }

    let stat = |extract: &dyn Fn(&MetricReport) -> f64| -> (f64, f64) {
        let values: Vec<f64> = reports.iter().map(|r| extract(r)).collect();
        mean_sd(&values)
    };
    let mut mean_dcg = BTreeMap::new();
    let mut sd_dcg = BTreeMap::new();
    for &k in &DCG_TRUNCATIONS {
        let (m, s) = stat(&|r: &MetricReport| r.dcg[&k]);
        mean_dcg.insert(k, m);
        sd_dcg.insert(k, s);
    }
    let (mrr_mean, mrr_sd) = stat(&|r: &MetricReport| r.mrr10);
    Ok(RandomBaseline {
        mean: MetricReport {
            dcg: mean_dcg,
            mrr10: mrr_mean,
            nll: None,
            n_queries: data.queries.len(),
        },
        sd: MetricReport {
            dcg: sd_dcg,
            mrr10: mrr_sd,
            nll: None,
            n_queries: data.queries.len(),
        },
    })
}

/// Sample mean and standard deviation (ddof = 1; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Direction of a significant difference (`a` relative to `b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Significance {
    /// `a`'s mean exceeds `b`'s at the corrected level.
    Better,
    /// `a`'s mean falls below `b`'s at the corrected level.
    Worse,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_diff: f64,
    pub significant: Significance,
    /// Zero-variance differences: the t statistic is undefined, and the
    /// decision falls back to the sign of the mean difference.
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a` against `b` at level `alpha`, Bonferroni
/// corrected for `n_comparisons` simultaneous tests.
pub fn paired_ttest(a: &[f64], b: &[f64], alpha: f64, n_comparisons: usize) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::validation("paired t-test needs at least 2 pairs"));
    }
    if n_comparisons < 1 {
        return Err(Error::validation("n_comparisons must be >= 1"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&diffs);
    let threshold = alpha / n_comparisons as f64;
    let direction = |significant: bool| {
        if !significant {
            Significance::None
        } else if mean > 0.0 {
            Significance::Better
        } else {
            Significance::Worse
        }
    };

    if sd == 0.0 {
        let significant = mean != 0.0;
        return Ok(TTest {
            t: if mean == 0.0 {
                0.0
            } else {
                mean.signum() * f64::INFINITY
            },
            p: if significant { 0.0 } else { 1.0 },
            mean_diff: mean,
            significant: direction(significant),
            degenerate: true,
        });
    }

    let n = diffs.len() as f64;
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::validation(format!("t-distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        t,
        p,
        mean_diff: mean,
        significant: direction(p < threshold),
        degenerate: false,
    })
}
