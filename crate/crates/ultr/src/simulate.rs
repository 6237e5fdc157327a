//! Semi-synthetic click simulation over a judged dataset.
//!
//! Clicks follow the position-based model: an item shown at rank `k` is
//! clicked with probability `e(k) * r(q, d)`, where `e(k) = (1/k)^eta` is the
//! examination probability and `r(q, d)` maps the annotation grade through an
//! exponential-gain curve with a noise floor. Since the generating process is
//! known, estimator and learner output can be checked against ground truth.
//!
//! The paper-scale corpora this mimics never ship their simulation
//! parameters; the defaults here are the field-standard conventions and are
//! all configurable.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClickLog, JudgedDataset, Session, SessionItem};
use crate::error::{Error, Result};
use crate::propensity::{CurveMethod, PropensityCurve};
use crate::rng::{stream, stream_rng};

/// Synthetic user model: bias severity, list length, click noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserModelConfig {
    /// Bias severity exponent; examination is `(1/k)^eta`.
    pub eta: f64,
    /// Number of top-ranked documents shown per session.
    pub max_rank: u32,
    /// Click probability floor for irrelevant documents.
    pub epsilon_minus: f64,
    /// Largest annotation grade (gain saturates here).
    pub max_grade: u8,
    /// Fraction of sessions receiving one random adjacent-pair swap.
    pub swap_fraction: f64,
}

impl Default for UserModelConfig {
    fn default() -> Self {
        // List length 8 mirrors the average result-page length of the
        // production logs this simulation stands in for.
        UserModelConfig {
            eta: 1.0,
            max_rank: 8,
            epsilon_minus: 0.1,
            max_grade: 4,
            swap_fraction: 0.0,
        }
    }
}

impl UserModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("eta must be >= 0"));
        }
        if self.max_rank < 1 {
            return Err(Error::validation("max_rank must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.epsilon_minus) {
            return Err(Error::validation("epsilon_minus must lie in [0, 1)"));
        }
        if self.max_grade < 1 {
            return Err(Error::validation("max_grade must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.swap_fraction) {
            return Err(Error::validation("swap_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// True examination curve for ranks `1..=max_rank`.
    pub fn true_curve(&self) -> PropensityCurve {
        let values = (1..=self.max_rank)
            .map(|k| position_bias(k, self.eta).expect("rank >= 1"))
            .collect();
        PropensityCurve {
            method: CurveMethod::GroundTruth,
            values,
        }
    }
}

/// How the logging policy orders each query's candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Rank by annotation grade plus Gaussian noise: a strong, near-oracle
    /// production ranker whose mistakes grow with `noise_sigma`.
    OracleNoisy,
    /// Rank by a seeded random linear scorer over the features: a weak
    /// policy whose placement is confounded with the feature vector rather
    /// than with relevance.
    FeatureLinear,
}

/// The production ranker that produced the logged rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoggingPolicy {
    pub kind: PolicyKind,
    /// Per-session score noise for `oracle-noisy`.
    pub noise_sigma: f64,
    /// Seed for the random linear scorer of `feature-linear`.
    pub weight_seed: u64,
}

impl Default for LoggingPolicy {
    fn default() -> Self {
        LoggingPolicy {
            kind: PolicyKind::OracleNoisy,
            noise_sigma: 1.0,
            weight_seed: 0,
        }
    }
}

impl LoggingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// A generated click log together with the examination curve that produced
/// it, for checking estimators against ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedLog {
    pub log: ClickLog,
    pub truth: PropensityCurve,
    pub eta: f64,
}

/// Sidecar file recording the generating bias next to a written log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub eta: f64,
    pub propensities: Vec<f64>,
}

impl SimulatedLog {
    pub fn sidecar(&self) -> TruthSidecar {
        TruthSidecar {
            eta: self.eta,
            propensities: self.truth.values.clone(),
        }
    }
}

/// Examination probability `(1/k)^eta`; equals 1 at rank 1 for any eta.
pub fn position_bias(k: u32, eta: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("rank must be >= 1"));
    }
    Ok((1.0 / k as f64).powf(eta))
}

/// Click probability of an examined document:
/// `epsilon_minus + (1 - epsilon_minus) * (2^grade - 1) / (2^max_grade - 1)`.
pub fn relevance_to_click_prob(grade: u8, cfg: &UserModelConfig) -> Result<f64> {
    if grade > cfg.max_grade {
        return Err(Error::validation(format!(
            "grade {grade} exceeds max_grade {}",
            cfg.max_grade
        )));
    }
    let gain = ((1u64 << grade) - 1) as f64 / ((1u64 << cfg.max_grade) - 1) as f64;
    Ok(cfg.epsilon_minus + (1.0 - cfg.epsilon_minus) * gain)
}

/// Generate `n_sessions` PBM click sessions from a judged dataset.
///
/// Queries are sampled uniformly with replacement; the logging policy orders
/// each query's candidates and the top `max_rank` are shown. With probability
/// `swap_fraction` one uniformly chosen adjacent pair is swapped before
/// clicks are drawn, creating the rank co-occurrences intervention
/// harvesting relies on.
///
/// Each session consumes its own RNG substream derived from
/// `(seed, session index)`, so generation order (or parallelism) cannot
/// change the output.
pub fn generate_log(
    data: &JudgedDataset,
    policy: &LoggingPolicy,
    cfg: &UserModelConfig,
    n_sessions: usize,
    seed: u64,
) -> Result<SimulatedLog> {
    cfg.validate()?;
    policy.validate()?;
    if n_sessions < 1 {
        return Err(Error::validation("n_sessions must be >= 1"));
    }
    if data.queries.is_empty() {
        return Err(Error::validation("dataset has no queries"));
    }

    // Click probability per grade is query-independent; precompute.
    let click_prob: Vec<f64> = (0..=cfg.max_grade)
        .map(|g| relevance_to_click_prob(g, cfg))
        .collect::<Result<_>>()?;
    let exam: Vec<f64> = (1..=cfg.max_rank)
        .map(|k| position_bias(k, cfg.eta))
        .collect::<Result<_>>()?;

    let linear_weights = match policy.kind {
        PolicyKind::FeatureLinear => {
            let dim = data.feature_dim();
            let mut rng = stream_rng(policy.weight_seed, stream::POLICY_WEIGHTS, 0);
            Some((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>())
        }
        PolicyKind::OracleNoisy => None,
    };
    let noise = Normal::new(0.0, policy.noise_sigma)
        .map_err(|e| Error::validation(format!("invalid noise_sigma: {e}")))?;

    let mut sessions = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let mut rng = stream_rng(seed, stream::SIM_SESSION, i as u64);
        let query = &data.queries[rng.random_range(0..data.queries.len())];

        let scores: Vec<f64> = match policy.kind {
            PolicyKind::OracleNoisy => query
                .docs
                .iter()
                .map(|d| d.grade as f64 + noise.sample(&mut rng))
                .collect(),
            PolicyKind::FeatureLinear => {
                let w = linear_weights.as_ref().expect("weights for feature-linear");
                query
                    .docs
                    .iter()
                    .map(|d| d.features.iter().zip(w).map(|(x, wi)| x * wi).sum())
                    .collect()
            }
        };
        let mut order: Vec<usize> = (0..query.docs.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
        order.truncate(cfg.max_rank as usize);

        if cfg.swap_fraction > 0.0
            && order.len() >= 2
            && rng.random::<f64>() < cfg.swap_fraction
        {
            let j = rng.random_range(0..order.len() - 1);
            order.swap(j, j + 1);
        }

        let items = order
            .iter()
            .enumerate()
            .map(|(pos, &doc_idx)| {
                let doc = &query.docs[doc_idx];
                let p = exam[pos] * click_prob[doc.grade as usize];
                SessionItem {
                    doc_id: doc.doc_id.clone(),
                    rank: pos as u32 + 1,
                    click: u8::from(rng.random::<f64>() < p),
                    features: doc.features.clone(),
                }
            })
            .collect();
        sessions.push(Session {
            session_id: format!("sim-{i}"),
            query_id: query.query_id.clone(),
            items,
        });
    }

    Ok(SimulatedLog {
        log: ClickLog::from_sessions(sessions),
        truth: cfg.true_curve(),
        eta: cfg.eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{JudgedDoc, JudgedQuery};
    use approx::assert_abs_diff_eq;
    use std::collections::{BTreeSet, HashMap};

    fn dataset(grades_per_query: &[&[u8]]) -> JudgedDataset {
        let queries = grades_per_query
            .iter()
            .enumerate()
            .map(|(qi, grades)| JudgedQuery {
                query_id: format!("q{qi}"),
                docs: grades
                    .iter()
                    .enumerate()
                    .map(|(di, &grade)| JudgedDoc {
                        doc_id: format!("q{qi}_d{di}"),
                        features: vec![grade as f64, di as f64],
                        grade,
                    })
                    .collect(),
            })
            .collect();
        JudgedDataset { queries }
    }

    #[test]
    fn position_bias_values() {
        assert_eq!(position_bias(1, 1.0).unwrap(), 1.0);
        assert_eq!(position_bias(4, 1.0).unwrap(), 0.25);
        assert_eq!(position_bias(2, 0.0).unwrap(), 1.0);
        assert!(position_bias(0, 1.0).is_err());
    }

    #[test]
    fn click_prob_floor_ceiling_and_midpoint() {
        let cfg = UserModelConfig {
            epsilon_minus: 0.1,
            ..UserModelConfig::default()
        };
        assert_abs_diff_eq!(relevance_to_click_prob(0, &cfg).unwrap(), 0.1);
        assert_abs_diff_eq!(relevance_to_click_prob(4, &cfg).unwrap(), 1.0);
        // 0.1 + 0.9 * (2^2 - 1) / (2^4 - 1) = 0.28
        assert_abs_diff_eq!(relevance_to_click_prob(2, &cfg).unwrap(), 0.28, epsilon = 1e-12);
        assert!(relevance_to_click_prob(5, &cfg).is_err());
    }

    #[test]
    fn perfect_relevance_no_bias_clicks_everything() {
        let data = dataset(&[&[4, 4, 4]]);
        let cfg = UserModelConfig {
            eta: 0.0,
            epsilon_minus: 0.0,
            max_rank: 3,
            ..UserModelConfig::default()
        };
        let sim = generate_log(&data, &LoggingPolicy::default(), &cfg, 50, 3).unwrap();
        assert!(sim
            .log
            .sessions
            .iter()
            .all(|s| s.items.iter().all(|i| i.click == 1)));
    }

    #[test]
    fn extreme_bias_clicks_only_rank_one() {
        let data = dataset(&[&[4, 3, 2, 1, 0]]);
        let cfg = UserModelConfig {
            eta: 50.0,
            epsilon_minus: 0.1,
            max_rank: 5,
            ..UserModelConfig::default()
        };
        let sim = generate_log(&data, &LoggingPolicy::default(), &cfg, 10_000, 11).unwrap();
        let below_rank_one: u64 = sim
            .log
            .sessions
            .iter()
            .flat_map(|s| &s.items)
            .filter(|i| i.rank > 1)
            .map(|i| i.click as u64)
            .sum();
        assert_eq!(below_rank_one, 0);
    }

    #[test]
    fn determinism_same_seed_identical_logs() {
        let data = dataset(&[&[4, 2, 0], &[3, 1, 1]]);
        let cfg = UserModelConfig {
            swap_fraction: 0.5,
            max_rank: 3,
            ..UserModelConfig::default()
        };
        let a = generate_log(&data, &LoggingPolicy::default(), &cfg, 200, 9).unwrap();
        let b = generate_log(&data, &LoggingPolicy::default(), &cfg, 200, 9).unwrap();
        assert_eq!(a.log, b.log);
        let c = generate_log(&data, &LoggingPolicy::default(), &cfg, 200, 10).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn swaps_preserve_shown_documents() {
        let data = dataset(&[&[4, 3, 2, 1, 0, 2]]);
        let cfg = UserModelConfig {
            swap_fraction: 1.0,
            max_rank: 6,
            ..UserModelConfig::default()
        };
        let sim = generate_log(&data, &LoggingPolicy::default(), &cfg, 300, 5).unwrap();
        let expected: BTreeSet<&str> = data.queries[0]
            .docs
            .iter()
            .map(|d| d.doc_id.as_str())
            .collect();
        for session in &sim.log.sessions {
            let shown: BTreeSet<&str> =
                session.items.iter().map(|i| i.doc_id.as_str()).collect();
            assert_eq!(shown, expected);
            let ranks: Vec<u32> = session.items.iter().map(|i| i.rank).collect();
            assert_eq!(ranks, (1..=6).collect::<Vec<u32>>());
        }
    }

    /// Empirical CTR at each rank must match `e(k)` times the mean click
    /// probability of the documents the policy actually placed there.
    #[test]
    fn ctr_matches_analytic_product() {
        let data = dataset(&[&[4, 3, 2, 1, 0, 2, 3, 1]]);
        let cfg = UserModelConfig {
            eta: 1.0,
            epsilon_minus: 0.1,
            max_rank: 8,
            ..UserModelConfig::default()
        };
        let policy = LoggingPolicy {
            noise_sigma: 2.0,
            ..LoggingPolicy::default()
        };
        let sim = generate_log(&data, &policy, &cfg, 200_000, 17).unwrap();
        let grade_of: HashMap<&str, u8> = data.queries[0]
            .docs
            .iter()
            .map(|d| (d.doc_id.as_str(), d.grade))
            .collect();

        let mut impressions = vec![0u64; 8];
        let mut clicks = vec![0u64; 8];
        let mut expected_sum = vec![0.0f64; 8];
        for session in &sim.log.sessions {
            for item in &session.items {
                let idx = (item.rank - 1) as usize;
                impressions[idx] += 1;
                clicks[idx] += item.click as u64;
                let g = grade_of[item.doc_id.as_str()];
                expected_sum[idx] += position_bias(item.rank, cfg.eta).unwrap()
                    * relevance_to_click_prob(g, &cfg).unwrap();
            }
        }
        for k in 0..8 {
            let ctr = clicks[k] as f64 / impressions[k] as f64;
            let expected = expected_sum[k] / impressions[k] as f64;
            assert_abs_diff_eq!(ctr, expected, epsilon = 0.01);
        }
    }

    /// For a fixed (query, doc, rank) cell the click rate converges to
    /// `e(k) * r(q, d)`.
    #[test]
    fn conditional_unbiasedness() {
        let data = dataset(&[&[4, 3, 2, 1, 0, 2]]);
        let cfg = UserModelConfig {
            eta: 1.0,
            epsilon_minus: 0.1,
            max_rank: 6,
            swap_fraction: 0.3,
            ..UserModelConfig::default()
        };
        let policy = LoggingPolicy {
            noise_sigma: 1.0,
            ..LoggingPolicy::default()
        };
        let sim = generate_log(&data, &policy, &cfg, 100_000, 23).unwrap();
        let mut cells: HashMap<(&str, u32), (u64, u64)> = HashMap::new();
        for session in &sim.log.sessions {
            for item in &session.items {
                let cell = cells.entry((item.doc_id.as_str(), item.rank)).or_default();
                cell.0 += 1;
                cell.1 += item.click as u64;
            }
        }
        let grade_of: HashMap<&str, u8> = data.queries[0]
            .docs
            .iter()
            .map(|d| (d.doc_id.as_str(), d.grade))
            .collect();
        let mut checked = 0;
        for (&(doc, rank), &(imps, clks)) in &cells {
            if imps < 20_000 {
                continue;
            }
            let expected = position_bias(rank, cfg.eta).unwrap()
                * relevance_to_click_prob(grade_of[doc], &cfg).unwrap();
            assert_abs_diff_eq!(clks as f64 / imps as f64, expected, epsilon = 0.01);
            checked += 1;
        }
        assert!(checked >= 3, "expected several high-traffic cells, got {checked}");
    }

    #[test]
    fn rejects_invalid_inputs() {
        let data = dataset(&[&[1]]);
        let cfg = UserModelConfig::default();
        assert!(generate_log(&data, &LoggingPolicy::default(), &cfg, 0, 1).is_err());
        assert!(
            generate_log(&JudgedDataset::default(), &LoggingPolicy::default(), &cfg, 1, 1)
                .is_err()
        );
        let bad = UserModelConfig {
            epsilon_minus: 1.0,
            ..cfg
        };
        assert!(generate_log(&data, &LoggingPolicy::default(), &bad, 1, 1).is_err());
    }
}
