//! Position-bias estimation from click logs.
//!
//! Intervention harvesting exploits query-document pairs that were logged at
//! more than one rank: for such a pair the relevance factor cancels out of
//! the click-rate ratio between ranks, leaving the examination ratio. Three
//! estimators consume the harvested co-occurrences:
//!
//! * [`adjacent_pair`] — chains click ratios between neighboring ranks;
//! * [`pivot_rank`] — ratios each rank against one fixed pivot;
//! * [`all_pairs`] — reconciles every rank pair at once through a weighted
//!   least-squares objective.
//!
//! [`extract_model_propensities`] reads a curve out of a trained model's
//! per-rank examination parameters instead, and [`ctr_by_rank`] provides the
//! raw click-through-rate diagnostic the estimates are usually plotted
//! against.
//!
//! Within a rank pair, clicks and impressions are pooled across
//! query-document pairs before ratios are taken; anything finer is left to
//! the All Pairs weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ClickLog;
use crate::error::{Error, Result};
use crate::model::{sigmoid, PositionSource, ScoringModel};

/// Lower clip bound for propensities. Ratios can exceed 1 under noise and
/// zero propensities would break inverse-propensity weighting, so curve
/// values are always clipped into `(CLIP_MIN, 1]`.
pub const CLIP_MIN: f64 = 1e-6;

/// Which procedure produced a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMethod {
    AdjacentPair,
    PivotRank,
    AllPairs,
    Rem,
    TwoTower,
    GroundTruth,
}

/// Normalized examination probabilities per rank, `e(1) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityCurve {
    pub method: CurveMethod,
    /// `values[k - 1]` is the propensity of rank `k`.
    pub values: Vec<f64>,
}

impl PropensityCurve {
    /// Normalize by the rank-1 value and clip into `(CLIP_MIN, 1]`.
    pub fn normalized(method: CurveMethod, raw: Vec<f64>) -> PropensityCurve {
        let first = raw.first().copied().unwrap_or(1.0);
        let values = raw
            .into_iter()
            .map(|v| (v / first).clamp(CLIP_MIN, 1.0))
            .collect();
        PropensityCurve { method, values }
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// Propensity at a displayed rank. Ranks beyond the curve length are
    /// assigned the last (deepest) value, matching how IPS consumes curves
    /// trained on truncated result lists.
    pub fn at_rank(&self, rank: u32) -> f64 {
        debug_assert!(rank >= 1 && !self.values.is_empty());
        let idx = (rank as usize - 1).min(self.values.len() - 1);
        self.values[idx]
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<PropensityCurve> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }
}

/// Impression and click counts of one query-document pair at one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RankCounts {
    pub impressions: u64,
    pub clicks: u64,
}

/// One query-document pair observed at both ranks of a rank pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairObservation {
    pub query_id: String,
    pub doc_id: String,
    pub low: RankCounts,
    pub high: RankCounts,
}

/// Pooled counts of a rank pair `(low_rank, high_rank)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledPair {
    pub low_rank: u32,
    pub high_rank: u32,
    pub low: RankCounts,
    pub high: RankCounts,
}

impl PooledPair {
    pub fn ctr_low(&self) -> f64 {
        self.low.clicks as f64 / self.low.impressions as f64
    }
    pub fn ctr_high(&self) -> f64 {
        self.high.clicks as f64 / self.high.impressions as f64
    }
    /// All Pairs weight: the smaller of the two pooled impression counts.
    pub fn weight(&self) -> u64 {
        self.low.impressions.min(self.high.impressions)
    }
}

/// Co-occurrences of query-document pairs across rank pairs.
///
/// A `(q, d)` pair contributes to rank pair `(k, k')` iff it has at least
/// one impression at both ranks.
#[derive(Debug, Clone, Default)]
pub struct InterventionIndex {
    pairs: BTreeMap<(u32, u32), Vec<PairObservation>>,
    max_rank: u32,
}

/// Harvest rank co-occurrences from a click log.
pub fn build_intervention_index(log: &ClickLog) -> InterventionIndex {
    // (query, doc) -> rank -> counts; BTreeMaps keep output order stable.
    let mut per_doc: BTreeMap<(&str, &str), BTreeMap<u32, RankCounts>> = BTreeMap::new();
    for session in &log.sessions {
        for item in &session.items {
            let counts = per_doc
                .entry((session.query_id.as_str(), item.doc_id.as_str()))
                .or_default()
                .entry(item.rank)
                .or_default();
            counts.impressions += 1;
            counts.clicks += item.click as u64;
        }
    }

    let mut pairs: BTreeMap<(u32, u32), Vec<PairObservation>> = BTreeMap::new();
    for ((query_id, doc_id), ranks) in &per_doc {
        let observed: Vec<(&u32, &RankCounts)> = ranks.iter().collect();
        for i in 0..observed.len() {
            for j in (i + 1)..observed.len() {
                pairs
                    .entry((*observed[i].0, *observed[j].0))
                    .or_default()
                    .push(PairObservation {
                        query_id: query_id.to_string(),
                        doc_id: doc_id.to_string(),
                        low: *observed[i].1,
                        high: *observed[j].1,
                    });
            }
        }
    }
    InterventionIndex {
        pairs,
        max_rank: log.n_ranks,
    }
}

impl InterventionIndex {
    pub fn max_rank(&self) -> u32 {
        self.max_rank
    }

    /// Observations for rank pair `(k, k')`; `k < k'` expected.
    pub fn observations(&self, low: u32, high: u32) -> Option<&[PairObservation]> {
        self.pairs.get(&(low, high)).map(Vec::as_slice)
    }

    /// Pooled counts for rank pair `(k, k')`, if any pair contributed.
    pub fn pooled(&self, low: u32, high: u32) -> Option<PooledPair> {
        let obs = self.pairs.get(&(low, high))?;
        let mut pooled = PooledPair {
            low_rank: low,
            high_rank: high,
            low: RankCounts::default(),
            high: RankCounts::default(),
        };
        for o in obs {
            pooled.low.impressions += o.low.impressions;
            pooled.low.clicks += o.low.clicks;
            pooled.high.impressions += o.high.impressions;
            pooled.high.clicks += o.high.clicks;
        }
        Some(pooled)
    }

    /// All populated rank pairs, pooled.
    pub fn pooled_pairs(&self) -> Vec<PooledPair> {
        self.pairs
            .keys()
            .map(|&(low, high)| self.pooled(low, high).expect("key exists"))
            .collect()
    }
}

/// Click-through rate per rank: clicks at `k` over impressions at `k`.
/// Ranks with zero impressions are absent from the result.
pub fn ctr_by_rank(log: &ClickLog) -> BTreeMap<u32, f64> {
    let mut counts: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for session in &log.sessions {
        for item in &session.items {
            let entry = counts.entry(item.rank).or_default();
            entry.0 += 1;
            entry.1 += item.click as u64;
        }
    }
    counts
        .into_iter()
        .map(|(rank, (imps, clicks))| (rank, clicks as f64 / imps as f64))
        .collect()
}

/// Adjacent Pair estimator: chain pooled click ratios between ranks
/// `(k, k+1)` into a cumulative curve.
pub fn adjacent_pair(idx: &InterventionIndex, k: u32) -> Result<PropensityCurve> {
    let mut values = vec![1.0f64];
    let mut current = 1.0f64;
    for j in 1..k {
        let pooled = idx.pooled(j, j + 1).ok_or_else(|| {
            Error::Estimation(format!(
                "no interventional co-occurrences for rank pair ({j}, {})",
                j + 1
            ))
        })?;
        let (low, high) = (pooled.ctr_low(), pooled.ctr_high());
        if low <= 0.0 || high <= 0.0 {
            return Err(Error::Estimation(format!(
                "zero pooled CTR in rank pair ({j}, {}); curve undefined",
                j + 1
            )));
        }
        current *= high / low;
        values.push(current);
    }
    Ok(PropensityCurve::normalized(CurveMethod::AdjacentPair, values))
}

/// Pivot Rank estimator: ratio every rank's pooled CTR against a fixed
/// pivot rank (rank 1 by default).
pub fn pivot_rank(idx: &InterventionIndex, k: u32, pivot: u32) -> Result<PropensityCurve> {
    if pivot < 1 || pivot > k {
        return Err(Error::validation(format!("pivot {pivot} outside 1..={k}")));
    }
    let mut raw = vec![0.0f64; k as usize];
    raw[pivot as usize - 1] = 1.0;
    for rank in 1..=k {
        if rank == pivot {
            continue;
        }
        let (low, high) = (pivot.min(rank), pivot.max(rank));
        let pooled = idx.pooled(low, high).ok_or_else(|| {
            Error::Estimation(format!(
                "no interventional co-occurrences for rank {rank} versus pivot {pivot}"
            ))
        })?;
        let (ctr_pivot, ctr_rank) = if pivot == low {
            (pooled.ctr_low(), pooled.ctr_high())
        } else {
            (pooled.ctr_high(), pooled.ctr_low())
        };
        if ctr_pivot <= 0.0 || ctr_rank <= 0.0 {
            return Err(Error::Estimation(format!(
                "zero pooled CTR in rank pair ({low}, {high}); curve undefined"
            )));
        }
        raw[rank as usize - 1] = ctr_rank / ctr_pivot;
    }
    Ok(PropensityCurve::normalized(CurveMethod::PivotRank, raw))
}

/// All Pairs estimator.
///
/// Minimizes `sum_{k<k'} w_kk' (c_k e_k' - c_k' e_k)^2` over the curve with
/// `e(1) = 1`, where `c` are the pooled interventional CTRs of pair
/// `(k, k')` and `w_kk'` is the smaller pooled impression count. Solved by
/// projected gradient descent on the box `[CLIP_MIN, 1]` to a projected
/// gradient norm below 1e-8 (at most 10k iterations). CTRs and weights are
/// rescaled by their maxima first, which leaves the argmin unchanged and
/// makes the stopping rule insensitive to the overall click scale.
pub fn all_pairs(idx: &InterventionIndex, k: u32) -> Result<PropensityCurve> {
    struct Term {
        low: usize,  // 0-based rank index
        high: usize, // 0-based rank index
        ctr_low: f64,
        ctr_high: f64,
        weight: f64,
    }

    let mut terms = Vec::new();
    for pooled in idx.pooled_pairs() {
        if pooled.high_rank > k {
            continue;
        }
        if pooled.weight() == 0 {
            continue;
        }
        terms.push(Term {
            low: pooled.low_rank as usize - 1,
            high: pooled.high_rank as usize - 1,
            ctr_low: pooled.ctr_low(),
            ctr_high: pooled.ctr_high(),
            weight: pooled.weight() as f64,
        });
    }

    // The curve is only identified when every rank is connected to rank 1
    // through populated pairs.
    let mut reachable = vec![false; k as usize];
    reachable[0] = true;
    let mut frontier = vec![0usize];
    while let Some(node) = frontier.pop() {
        for t in &terms {
            let next = if t.low == node {
                t.high
            } else if t.high == node {
                t.low
            } else {
                continue;
            };
            if !reachable[next] {
                reachable[next] = true;
                frontier.push(next);
            }
        }
    }
    let unreachable: Vec<u32> = (0..k as usize)
        .filter(|&i| !reachable[i])
        .map(|i| i as u32 + 1)
        .collect();
    if !unreachable.is_empty() {
        return Err(Error::Estimation(format!(
            "rank co-occurrence graph is disconnected; ranks unreachable from rank 1: {unreachable:?}"
        )));
    }

    let max_ctr = terms
        .iter()
        .map(|t| t.ctr_low.max(t.ctr_high))
        .fold(0.0f64, f64::max);
    let max_w = terms.iter().map(|t| t.weight).fold(0.0f64, f64::max);
    if max_ctr <= 0.0 {
        return Err(Error::Estimation(
            "all pooled CTRs are zero; curve undefined".into(),
        ));
    }
    for t in &mut terms {
        t.ctr_low /= max_ctr;
        t.ctr_high /= max_ctr;
        t.weight /= max_w;
    }

    // e[0] = 1 fixed; variables are e[1..k].
    let n = k as usize;
    let mut e = vec![1.0f64; n];

    let grad = |e: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in &terms {
            let residual = t.ctr_low * e[t.high] - t.ctr_high * e[t.low];
            let scale = 2.0 * t.weight * residual;
            if t.high > 0 {
                out[t.high] += scale * t.ctr_low;
            }
            if t.low > 0 {
                out[t.low] -= scale * t.ctr_high;
            }
        }
    };

    // Step size 1 / lambda_max(Hessian), via power iteration. The Hessian
    // is constant: H = sum 2 w g g^T with g sparse (two entries per term).
    let hess_mul = |v: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in &terms {
            let gv = t.ctr_low * if t.high > 0 { v[t.high] } else { 0.0 }
                - t.ctr_high * if t.low > 0 { v[t.low] } else { 0.0 };
            let scale = 2.0 * t.weight * gv;
            if t.high > 0 {
                out[t.high] += scale * t.ctr_low;
            }
            if t.low > 0 {
                out[t.low] -= scale * t.ctr_high;
            }
        }
    };
    let mut v = vec![0.0f64; n];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = 1.0 + (i as f64) * 0.01; // deterministic non-degenerate start
    }
    v[0] = 0.0;
    let mut hv = vec![0.0f64; n];
    let mut lambda_max = 1.0f64;
    for _ in 0..100 {
        hess_mul(&v, &mut hv);
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            break;
        }
        lambda_max = norm;
        for (vi, hvi) in v.iter_mut().zip(&hv) {
            *vi = hvi / norm;
        }
    }
    let step = 1.0 / lambda_max.max(1e-12);

    let mut g = vec![0.0f64; n];
    for _ in 0..10_000 {
        grad(&e, &mut g);
        let mut projected_norm_sq = 0.0;
        for i in 1..n {
            let next = (e[i] - step * g[i]).clamp(CLIP_MIN, 1.0);
            let pg = (e[i] - next) / step;
            projected_norm_sq += pg * pg;
            e[i] = next;
        }
        if projected_norm_sq.sqrt() < 1e-8 {
            break;
        }
    }

    Ok(PropensityCurve::normalized(CurveMethod::AllPairs, e))
}

/// Read a curve out of a trained model's per-rank examination parameters:
/// `sigmoid(logit_k) / sigmoid(logit_1)`.
///
/// Only models whose examination head was trained against click
/// probabilities directly (RegressionEM and the additive two-tower model)
/// have sigmoid-calibrated logits; anything else is rejected.
pub fn extract_model_propensities(model: &ScoringModel) -> Result<PropensityCurve> {
    let (logits, source) = model.position_logits().ok_or_else(|| {
        Error::validation("model has no per-rank examination parameters")
    })?;
    let method = match source {
        PositionSource::Rem => CurveMethod::Rem,
        PositionSource::TwoTower => CurveMethod::TwoTower,
        PositionSource::Dla => {
            return Err(Error::validation(
                "DLA examination parameters are softmax-relative, not sigmoid-calibrated; \
                 cannot extract a propensity curve",
            ))
        }
    };
    let raw: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(PropensityCurve::normalized(method, raw))
}
