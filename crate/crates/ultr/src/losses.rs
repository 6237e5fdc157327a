//! Click-based training objectives.
//!
//! Every objective consumes one session: relevance scores `s` (one logit per
//! document), click labels `c`, displayed ranks `k`, and — for methods that
//! estimate position bias jointly — the model's per-rank parameters. Every
//! objective returns a finite scalar loss plus exact gradients for each
//! parameter group it touches. All probability arithmetic stays in logit
//! space, so no probability is ever materialized as exactly 0 or 1.
//!
//! Reduction conventions, fixed across the crate:
//!
//! * pointwise objectives average over the session's documents;
//! * listwise (softmax) objectives sum over clicked documents;
//! * pairwise (LambdaRank) objectives sum over click-discordant pairs.
//!
//! The LambdaRank swap gain uses linear gain on the click labels and
//! discounts at the model's current predicted ordering, with the discount
//! factor treated as locally constant (its dependence on the scores is
//! piecewise constant, so this is the exact gradient almost everywhere).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, softplus, PositionKind, PositionSource};
use crate::propensity::PropensityCurve;

/// The nine supported objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    NaivePointwise,
    NaiveListwise,
    NaiveLambdarank,
    TwoTower,
    RegressionEm,
    IpsPointwise,
    IpsListwise,
    Dla,
    PairDebias,
}

impl LossKind {
    /// The non-debiasing method sharing this method's base loss; used for
    /// grouped significance testing.
    pub fn naive_counterpart(self) -> LossKind {
        match self {
            LossKind::NaivePointwise
            | LossKind::TwoTower
            | LossKind::RegressionEm
            | LossKind::IpsPointwise => LossKind::NaivePointwise,
            LossKind::NaiveListwise | LossKind::IpsListwise | LossKind::Dla => {
                LossKind::NaiveListwise
            }
            LossKind::NaiveLambdarank | LossKind::PairDebias => LossKind::NaiveLambdarank,
        }
    }

    /// Methods whose scores are calibrated click probabilities, i.e. for
    /// which click NLL is well defined.
    pub fn predicts_click_prob(self) -> bool {
        matches!(
            self,
            LossKind::NaivePointwise
                | LossKind::TwoTower
                | LossKind::RegressionEm
                | LossKind::IpsPointwise
        )
    }

    pub fn needs_curve(self) -> bool {
        matches!(self, LossKind::IpsPointwise | LossKind::IpsListwise)
    }

    /// Position parameters the model must allocate for this objective.
    pub fn position_kind(self) -> PositionKind {
        match self {
            LossKind::TwoTower => PositionKind::ExamLogits {
                source: PositionSource::TwoTower,
            },
            LossKind::RegressionEm => PositionKind::ExamLogits {
                source: PositionSource::Rem,
            },
            LossKind::Dla => PositionKind::ExamLogits {
                source: PositionSource::Dla,
            },
            LossKind::PairDebias => PositionKind::PairPropensities,
            _ => PositionKind::None,
        }
    }
}

fn default_tau() -> f64 {
    0.1
}

fn default_l1_weight() -> f64 {
    1.0
}

/// A fully specified objective: the kind plus its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Propensity clip for the IPS kinds.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Examination curve; required by the IPS kinds, rejected elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<PropensityCurve>,
    /// L1 regularizer scale for pairwise debiasing.
    #[serde(default = "default_l1_weight")]
    pub l1_weight: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            tau: default_tau(),
            curve: None,
            l1_weight: default_l1_weight(),
        }
    }

    pub fn with_curve(kind: LossKind, curve: PropensityCurve) -> LossSpec {
        LossSpec {
            curve: Some(curve),
            ..LossSpec::new(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_curve() && self.curve.is_none() {
            return Err(Error::validation(format!(
                "{:?} requires a propensity curve",
                self.kind
            )));
        }
        if !self.kind.needs_curve() && self.curve.is_some() {
            return Err(Error::validation(format!(
                "{:?} must not receive a propensity curve",
                self.kind
            )));
        }
        if self.kind.needs_curve() && !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::validation("tau must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Loss value and gradients for one session.
#[derive(Debug, Clone)]
pub struct SessionLoss {
    pub loss: f64,
    /// Gradient with respect to the relevance scores.
    pub dscores: Vec<f64>,
    /// Gradient with respect to the per-rank examination logits (full
    /// length-K vector), for two-tower / RegressionEM / DLA.
    pub dexam: Option<Vec<f64>>,
    /// Gradients with respect to the positive and negative propensities
    /// (full length-K vectors), for pairwise debiasing.
    pub dpair: Option<(Vec<f64>, Vec<f64>)>,
}

impl SessionLoss {
    fn scores_only(loss: f64, dscores: Vec<f64>) -> SessionLoss {
        SessionLoss {
            loss,
            dscores,
            dexam: None,
            dpair: None,
        }
    }
}

/// Dispatch a session through the objective described by `spec`.
///
/// `exam_logits` is required for two-tower / RegressionEM / DLA and
/// `pair_propensities` for pairwise debiasing; both are the model's full
/// per-rank parameter blocks.
pub fn evaluate_session(
    spec: &LossSpec,
    scores: &[f64],
    clicks: &[u8],
    ranks: &[u32],
    exam_logits: Option<&[f64]>,
    pair_propensities: Option<(&[f64], &[f64])>,
) -> Result<SessionLoss> {
    spec.validate()?;
    let need_exam = || {
        exam_logits.ok_or_else(|| {
            Error::validation(format!("{:?} requires examination logits", spec.kind))
        })
    };
    match spec.kind {
        LossKind::NaivePointwise => {
            let (loss, ds) = naive_pointwise(scores, clicks);
            Ok(SessionLoss::scores_only(loss, ds))
        }
        LossKind::NaiveListwise => {
            let (loss, ds) = naive_listwise(scores, clicks);
            Ok(SessionLoss::scores_only(loss, ds))
        }
        LossKind::NaiveLambdarank => {
            let (loss, ds) = naive_lambdarank(scores, clicks);
            Ok(SessionLoss::scores_only(loss, ds))
        }
        LossKind::TwoTower => {
            let (loss, ds, de) = two_tower(scores, need_exam()?, ranks, clicks)?;
            Ok(SessionLoss {
                loss,
                dscores: ds,
                dexam: Some(de),
                dpair: None,
            })
        }
        LossKind::RegressionEm => {
            let (loss, ds, de) = regression_em(scores, need_exam()?, ranks, clicks)?;
            Ok(SessionLoss {
                loss,
                dscores: ds,
                dexam: Some(de),
                dpair: None,
            })
        }
        LossKind::IpsPointwise => {
            let curve = spec.curve.as_ref().expect("validated");
            let (loss, ds) = ips_pointwise(scores, clicks, ranks, curve, spec.tau)?;
            Ok(SessionLoss::scores_only(loss, ds))
        }
        LossKind::IpsListwise => {
            let curve = spec.curve.as_ref().expect("validated");
            let (loss, ds) = ips_listwise(scores, clicks, ranks, curve, spec.tau)?;
            Ok(SessionLoss::scores_only(loss, ds))
        }
        LossKind::Dla => {
            let (loss, ds, de) = dla(scores, need_exam()?, ranks, clicks)?;
            Ok(SessionLoss {
                loss,
                dscores: ds,
                dexam: Some(de),
                dpair: None,
            })
        }
        LossKind::PairDebias => {
            let (plus, minus) = pair_propensities.ok_or_else(|| {
                Error::validation("pair-debias requires positive/negative propensities")
            })?;
            let (loss, ds, dp, dm) =
                pair_debias(scores, clicks, ranks, plus, minus, spec.l1_weight)?;
            Ok(SessionLoss {
                loss,
                dscores: ds,
                dexam: None,
                dpair: Some((dp, dm)),
            })
        }
    }
}

/// Binary cross-entropy of `sigmoid(score)` against a (possibly weighted)
/// target, computed in logit space: `softplus(s) - t * s`. Valid for
/// targets above 1 (extended BCE); the gradient is `sigmoid(s) - t`.
fn bce_logit(score: f64, target: f64) -> f64 {
    softplus(score) - target * score
}

/// `log-sum-exp` and softmax probabilities, max-shifted.
fn softmax_stats(scores: &[f64]) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    (max + total.ln(), probs)
}

/// Discount `1 / log2(rank + 1)` of each item under the model's current
/// predicted ordering (stable ties by input order).
fn predicted_discounts(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut discounts = vec![0.0; scores.len()];
    for (pos, &item) in order.iter().enumerate() {
        discounts[item] = 1.0 / ((pos + 2) as f64).log2();
    }
    discounts
}

fn check_ranks(ranks: &[u32], k: usize) -> Result<()> {
    for &r in ranks {
        if r < 1 {
            return Err(Error::validation("rank must be >= 1"));
        }
        if r as usize > k {
            return Err(Error::validation(format!(
                "rank {r} exceeds the model's {k} position parameters"
            )));
        }
    }
    Ok(())
}

/// Pointwise binary cross-entropy on raw clicks, no bias correction.
/// Returns mean loss and `dscores[i] = (sigmoid(s_i) - c_i) / n`.
pub fn naive_pointwise(scores: &[f64], clicks: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), clicks.len(), "scores/clicks length mismatch");
    let n = scores.len().max(1) as f64;
    let mut loss = 0.0;
    let mut ds = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        let t = clicks[i] as f64;
        loss += bce_logit(scores[i], t);
        ds[i] = (sigmoid(scores[i]) - t) / n;
    }
    (loss / n, ds)
}

/// Listwise softmax cross-entropy on raw clicks:
/// `-sum_i c_i log softmax(s)_i`. Zero-click sessions contribute nothing.
pub fn naive_listwise(scores: &[f64], clicks: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), clicks.len(), "scores/clicks length mismatch");
    weighted_softmax_loss(scores, |i| clicks[i] as f64)
}

fn weighted_softmax_loss(scores: &[f64], weight: impl Fn(usize) -> f64) -> (f64, Vec<f64>) {
    let n = scores.len();
    let weights: Vec<f64> = (0..n).map(weight).collect();
    let total: f64 = weights.iter().sum();
    if n == 0 || total == 0.0 {
        return (0.0, vec![0.0; n]);
    }
    let (lse, probs) = softmax_stats(scores);
    let mut loss = 0.0;
    let mut ds = vec![0.0; n];
    for i in 0..n {
        if weights[i] != 0.0 {
            loss += weights[i] * (lse - scores[i]);
        }
        ds[i] = total * probs[i] - weights[i];
    }
    (loss, ds)
}

/// LambdaRank on raw clicks: for each pair with `c_i > c_j`,
/// `|ΔDCG_ij| * log(1 + exp(-(s_i - s_j)))`, where `|ΔDCG|` is the DCG
/// change (linear click gain, discounts at predicted ranks) of swapping the
/// two items.
pub fn naive_lambdarank(scores: &[f64], clicks: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), clicks.len(), "scores/clicks length mismatch");
    lambdarank_pairs(scores, clicks, |_, _| 1.0)
}

/// Shared pair loop; `pair_scale(i, j)` multiplies the (clicked i,
/// unclicked j) pair term.
fn lambdarank_pairs(
    scores: &[f64],
    clicks: &[u8],
    pair_scale: impl Fn(usize, usize) -> f64,
) -> (f64, Vec<f64>) {
    let n = scores.len();
    let discounts = predicted_discounts(scores);
    let mut loss = 0.0;
    let mut ds = vec![0.0; n];
    for i in 0..n {
        if clicks[i] == 0 {
            continue;
        }
        for j in 0..n {
            if clicks[j] >= clicks[i] {
                continue;
            }
            let delta = (discounts[i] - discounts[j]).abs();
            let scale = pair_scale(i, j);
            let diff = scores[i] - scores[j];
            loss += scale * delta * softplus(-diff);
            let lambda = scale * delta * sigmoid(-diff);
            ds[i] -= lambda;
            ds[j] += lambda;
        }
    }
    (loss, ds)
}

/// Additive two-tower objective: BCE of
/// `sigmoid(exam_logit(k_i) + s_i)` against the click, averaged over the
/// session. Returns gradients for both towers; the examination gradient is
/// scattered into a full length-K vector.
pub fn two_tower(
    scores: &[f64],
    exam_logits: &[f64],
    ranks: &[u32],
    clicks: &[u8],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    check_ranks(ranks, exam_logits.len())?;
    let n = scores.len().max(1) as f64;
    let mut loss = 0.0;
    let mut ds = vec![0.0; scores.len()];
    let mut dexam = vec![0.0; exam_logits.len()];
    for i in 0..scores.len() {
        let z = exam_logits[ranks[i] as usize - 1] + scores[i];
        let t = clicks[i] as f64;
        loss += bce_logit(z, t);
        let g = (sigmoid(z) - t) / n;
        ds[i] = g;
        dexam[ranks[i] as usize - 1] += g;
    }
    Ok((loss / n, ds, dexam))
}

/// Posterior probabilities of relevance and examination given *no* click,
/// for prior probabilities supplied as logits:
///
/// `P(R=1 | C=0) = r(1-e) / (1-re)`, `P(E=1 | C=0) = e(1-r) / (1-re)`.
///
/// Computed entirely in logit space — `logit(r̄) = r_logit - softplus(e_logit)`
/// — so the result stays accurate for extreme priors.
pub fn rem_posteriors(relevance_logit: f64, exam_logit: f64) -> (f64, f64) {
    (
        sigmoid(relevance_logit - softplus(exam_logit)),
        sigmoid(exam_logit - softplus(relevance_logit)),
    )
}

/// RegressionEM, gradient-based variant: both towers regress against
/// EM targets `c + (1-c) * posterior`, with the posteriors treated as
/// constants (no gradient flows through them).
pub fn regression_em(
    scores: &[f64],
    exam_logits: &[f64],
    ranks: &[u32],
    clicks: &[u8],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    check_ranks(ranks, exam_logits.len())?;
    let n = scores.len().max(1) as f64;
    let mut loss = 0.0;
    let mut ds = vec![0.0; scores.len()];
    let mut dexam = vec![0.0; exam_logits.len()];
    for i in 0..scores.len() {
        let s = scores[i];
        let e = exam_logits[ranks[i] as usize - 1];
        let (t_r, t_e) = if clicks[i] == 1 {
            (1.0, 1.0)
        } else {
            rem_posteriors(s, e)
        };
        loss += bce_logit(s, t_r) + bce_logit(e, t_e);
        ds[i] = (sigmoid(s) - t_r) / n;
        dexam[ranks[i] as usize - 1] += (sigmoid(e) - t_e) / n;
    }
    Ok((loss / n, ds, dexam))
}

fn ips_weight(curve: &PropensityCurve, tau: f64, rank: u32) -> f64 {
    tau.max(curve.at_rank(1)) / tau.max(curve.at_rank(rank))
}

/// Pointwise IPS: extended BCE against the propensity-weighted click
/// `w_i * c_i` with `w_i = max(tau, e(1)) / max(tau, e(k_i))`. The weighted
/// click is a pseudo-label and may exceed 1; the gradient stays
/// `sigmoid(s) - w c`.
pub fn ips_pointwise(
    scores: &[f64],
    clicks: &[u8],
    ranks: &[u32],
    curve: &PropensityCurve,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::validation("tau must lie in (0, 1]"));
    }
    let n = scores.len().max(1) as f64;
    let mut loss = 0.0;
    let mut ds = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        let t = ips_weight(curve, tau, ranks[i]) * clicks[i] as f64;
        loss += bce_logit(scores[i], t);
        ds[i] = (sigmoid(scores[i]) - t) / n;
    }
    Ok((loss / n, ds))
}

/// Listwise IPS: softmax cross-entropy with propensity-weighted clicks,
/// `-sum_i w_i c_i log softmax(s)_i`.
pub fn ips_listwise(
    scores: &[f64],
    clicks: &[u8],
    ranks: &[u32],
    curve: &PropensityCurve,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::validation("tau must lie in (0, 1]"));
    }
    Ok(weighted_softmax_loss(scores, |i| {
        ips_weight(curve, tau, ranks[i]) * clicks[i] as f64
    }))
}

/// Cap on the detached log-ratio weights inside DLA. Ratios beyond e^30
/// carry no usable signal but would overflow into infinite losses.
const DLA_LOG_RATIO_CAP: f64 = 30.0;

/// Dual learning algorithm: softmax-normalize the examination logits over
/// the session's ranks and the relevance scores over its documents, then
/// apply IPS twice — the relevance tower weighted by detached examination
/// ratios `E(first)/E(k)`, the examination tower weighted by detached
/// relevance ratios `R(d_first)/R(d)`.
pub fn dla(
    scores: &[f64],
    exam_logits: &[f64],
    ranks: &[u32],
    clicks: &[u8],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    check_ranks(ranks, exam_logits.len())?;
    let n = scores.len();
    let mut dexam_full = vec![0.0; exam_logits.len()];
    if n == 0 || clicks.iter().all(|&c| c == 0) {
        return Ok((0.0, vec![0.0; n], dexam_full));
    }

    let gathered: Vec<f64> = ranks
        .iter()
        .map(|&r| exam_logits[r as usize - 1])
        .collect();
    let first = (0..n).min_by_key(|&i| ranks[i]).expect("non-empty");

    // Detached weight: ratio of softmax probabilities equals the capped
    // exponentiated logit difference.
    let ratio = |logits: &[f64], i: usize| -> f64 {
        (logits[first] - logits[i]).clamp(-DLA_LOG_RATIO_CAP, DLA_LOG_RATIO_CAP).exp()
    };

    let (rel_loss, ds) =
        weighted_softmax_loss(scores, |i| ratio(&gathered, i) * clicks[i] as f64);
    let (exam_loss, dgathered) =
        weighted_softmax_loss(&gathered, |i| ratio(scores, i) * clicks[i] as f64);
    for (i, &r) in ranks.iter().enumerate() {
        dexam_full[r as usize - 1] += dgathered[i];
    }
    Ok((rel_loss + exam_loss, ds, dexam_full))
}

/// Pairwise debiasing: every LambdaRank pair term is divided by
/// `e_plus(k_i) * e_minus(k_j)` (clicked and unclicked rank respectively),
/// plus an L1 penalty `l1_weight * (||e_plus||_1 + ||e_minus||_1)`.
/// Propensities must be strictly positive; the trainer renormalizes them at
/// rank 1 after every optimizer step.
pub fn pair_debias(
    scores: &[f64],
    clicks: &[u8],
    ranks: &[u32],
    e_plus: &[f64],
    e_minus: &[f64],
    l1_weight: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if scores.len() != clicks.len() || scores.len() != ranks.len() {
        return Err(Error::Shape("scores/clicks/ranks length mismatch".into()));
    }
    if e_plus.len() != e_minus.len() {
        return Err(Error::Shape("e_plus/e_minus length mismatch".into()));
    }
    check_ranks(ranks, e_plus.len())?;
    if e_plus.iter().chain(e_minus).any(|&v| v <= 0.0) {
        return Err(Error::validation("propensities must be strictly positive"));
    }

    let k = e_plus.len();
    let (pair_loss, ds) = lambdarank_pairs(scores, clicks, |i, j| {
        1.0 / (e_plus[ranks[i] as usize - 1] * e_minus[ranks[j] as usize - 1])
    });

    let mut dplus = vec![l1_weight; k];
    let mut dminus = vec![l1_weight; k];
    // d/de of (term / e) is -(term / e) / e; recompute the per-pair terms.
    let discounts = predicted_discounts(scores);
    for i in 0..scores.len() {
        if clicks[i] == 0 {
            continue;
        }
        for j in 0..scores.len() {
            if clicks[j] >= clicks[i] {
                continue;
            }
            let ki = ranks[i] as usize - 1;
            let kj = ranks[j] as usize - 1;
            let term = (discounts[i] - discounts[j]).abs()
                * softplus(-(scores[i] - scores[j]))
                / (e_plus[ki] * e_minus[kj]);
            dplus[ki] -= term / e_plus[ki];
            dminus[kj] -= term / e_minus[kj];
        }
    }
    let l1: f64 = e_plus.iter().sum::<f64>() + e_minus.iter().sum::<f64>();
    Ok((pair_loss + l1_weight * l1, ds, dplus, dminus))
}
