//! Training loop: epoch iteration over sessions, per-loss dispatch,
//! validation-click-loss early stopping, deterministic seeding.
//!
//! Batches are whole sessions (variable length). Each session's loss keeps
//! its own reduction (see [`crate::losses`]); a batch sums session losses
//! and gradients and takes one AdamW step. Model selection never touches
//! annotations: the validation loss is the same click objective, evaluated
//! with dropout off, and training stops after `patience` epochs without a
//! strict improvement (at least 1e-7 lower, guarding against float jitter).

use serde::{Deserialize, Serialize};

use crate::corpus::{ClickLog, Session};
use crate::error::{Error, Result};
use crate::losses::{evaluate_session, LossSpec};
use crate::model::{ForwardMode, OptimizerState, PositionKind, ScoringModel};
use crate::rng::{derive_seed, stream, stream_rng};

fn default_hidden_dims() -> Vec<usize> {
    vec![512, 512, 512, 512]
}

fn default_lr() -> f64 {
    1e-4
}

fn default_max_epochs() -> usize {
    50
}

fn default_patience() -> usize {
    5
}

fn default_batch_size() -> usize {
    256
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    /// Hidden layer widths; the output layer is always appended.
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Sessions per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Test hook: per-epoch learning-rate override (entry `e-1` applies to
    /// epoch `e`; the last entry extends to later epochs). Not part of the
    /// serialized config.
    #[serde(skip)]
    pub epoch_lr_override: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(loss: LossSpec) -> TrainConfig {
        TrainConfig {
            loss,
            hidden_dims: default_hidden_dims(),
            lr: default_lr(),
            weight_decay: 0.0,
            dropout: 0.0,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            seed: 0,
            epoch_lr_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::validation("lr must be positive"));
        }
        if self.patience < 1 || self.patience >= self.max_epochs {
            return Err(Error::validation(
                "patience must satisfy 1 <= patience < max_epochs",
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        Ok(())
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match &self.epoch_lr_override {
            Some(schedule) if !schedule.is_empty() => {
                schedule[(epoch - 1).min(schedule.len() - 1)]
            }
            _ => self.lr,
        }
    }
}

/// Per-epoch loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of one training run: the best-validation parameter snapshot, not
/// the final epoch.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ScoringModel,
    pub history: Vec<EpochStats>,
    /// Epoch at which training stopped (== max_epochs when never early).
    pub stopped_epoch: usize,
    /// Epoch whose snapshot is returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Loss and flat parameter gradient of one session under `spec`, with the
/// loss's position-parameter gradients scattered into the model's position
/// block.
pub fn session_loss_and_grad(
    model: &ScoringModel,
    spec: &LossSpec,
    session: &Session,
    mode: ForwardMode,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.n_params()];
    let loss = accumulate_session(model, spec, session, mode, &mut grad)?;
    Ok((loss, grad))
}

/// Loss of one session under `spec` (no gradients).
pub fn session_loss_value(
    model: &ScoringModel,
    spec: &LossSpec,
    session: &Session,
    mode: ForwardMode,
) -> Result<f64> {
    let rows: Vec<&[f64]> = session.items.iter().map(|i| i.features.as_slice()).collect();
    let clicks: Vec<u8> = session.items.iter().map(|i| i.click).collect();
    let ranks: Vec<u32> = session.items.iter().map(|i| i.rank).collect();
    let scores = model.forward(&rows, mode)?;
    let exam = model.position_logits().map(|(l, _)| l);
    let pair = model.pair_propensities();
    let out = evaluate_session(spec, &scores, &clicks, &ranks, exam, pair)?;
    Ok(out.loss)
}

fn accumulate_session(
    model: &ScoringModel,
    spec: &LossSpec,
    session: &Session,
    mode: ForwardMode,
    grad: &mut [f64],
) -> Result<f64> {
    let rows: Vec<&[f64]> = session.items.iter().map(|i| i.features.as_slice()).collect();
    let clicks: Vec<u8> = session.items.iter().map(|i| i.click).collect();
    let ranks: Vec<u32> = session.items.iter().map(|i| i.rank).collect();
    let scores = model.forward(&rows, mode)?;
    let exam = model.position_logits().map(|(l, _)| l);
    let pair = model.pair_propensities();
    let out = evaluate_session(spec, &scores, &clicks, &ranks, exam, pair)?;
    model.grad_into(&rows, &out.dscores, mode, grad)?;
    let off = model.position_offset();
    if let Some(dexam) = &out.dexam {
        for (g, d) in grad[off..].iter_mut().zip(dexam) {
            *g += d;
        }
    }
    if let Some((dplus, dminus)) = &out.dpair {
        let k = model.position_k();
        for (g, d) in grad[off..off + k].iter_mut().zip(dplus) {
            *g += d;
        }
        for (g, d) in grad[off + k..].iter_mut().zip(dminus) {
            *g += d;
        }
    }
    Ok(out.loss)
}

/// Mean per-session loss of `spec` over a log, dropout off.
pub fn mean_log_loss(model: &ScoringModel, spec: &LossSpec, log: &ClickLog) -> Result<f64> {
    if log.sessions.is_empty() {
        return Err(Error::validation("cannot evaluate loss on an empty log"));
    }
    let mut total = 0.0;
    for session in &log.sessions {
        total += session_loss_value(model, spec, session, ForwardMode::Infer)?;
    }
    Ok(total / log.sessions.len() as f64)
}

fn check_feature_dims(log: &ClickLog, dim: usize, name: &str) -> Result<()> {
    for session in &log.sessions {
        for item in &session.items {
            if item.features.len() != dim {
                return Err(Error::Shape(format!(
                    "{name} log: session {} has a feature vector of dimension {}, expected {dim}",
                    session.session_id,
                    item.features.len()
                )));
            }
        }
    }
    Ok(())
}

/// Train a scorer on click sessions. Fully deterministic in `cfg`.
pub fn train(train_log: &ClickLog, val_log: &ClickLog, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_log.sessions.is_empty() || val_log.sessions.is_empty() {
        return Err(Error::validation("train and validation logs must be non-empty"));
    }
    let input_dim = train_log.feature_dim();
    if input_dim == 0 {
        return Err(Error::validation("training sessions carry no features"));
    }
    check_feature_dims(train_log, input_dim, "train")?;
    check_feature_dims(val_log, input_dim, "validation")?;

    let position = cfg.loss.kind.position_kind();
    let k = match position {
        PositionKind::None => 0,
        _ => train_log.n_ranks.max(val_log.n_ranks) as usize,
    };
    let mut model = ScoringModel::init(
        input_dim,
        &cfg.hidden_dims,
        position,
        k,
        cfg.dropout,
        derive_seed(cfg.seed, stream::MODEL_INIT, 1),
    )?;
    let mut optimizer = OptimizerState::new(cfg.lr, cfg.weight_decay, model.n_params());

    let n_train = train_log.sessions.len();
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_params: Vec<f64> = model.params().to_vec();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_improvement = 0usize;
    let mut stopped_epoch = cfg.max_epochs;

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut batch_grad = vec![0.0f64; model.n_params()];

    for epoch in 1..=cfg.max_epochs {
        optimizer.lr = cfg.lr_for_epoch(epoch);
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream_rng(cfg.seed, stream::EPOCH_SHUFFLE, epoch as u64));

        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            batch_grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let session = &train_log.sessions[idx];
                let mode = if cfg.dropout > 0.0 {
                    ForwardMode::Train {
                        seed: derive_seed(
                            cfg.seed,
                            stream::DROPOUT,
                            ((epoch as u64) << 32) ^ idx as u64,
                        ),
                    }
                } else {
                    ForwardMode::Infer
                };
                let loss = accumulate_session(&model, &cfg.loss, session, mode, &mut batch_grad)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged at epoch {epoch}, step {step}, session {}",
                        session.session_id
                    )));
                }
                batch_loss += loss;
            }
            optimizer
                .adamw_step(model.params_mut(), &batch_grad)
                .map_err(|e| {
                    Error::NonFinite(format!("epoch {epoch}, step {step}: {e}"))
                })?;
            model.renormalize_pair_propensities();
            epoch_loss += batch_loss;
        }

        let val_loss = mean_log_loss(&model, &cfg.loss, val_log)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss diverged at epoch {epoch}"
            )));
        }
        history.push(EpochStats {
            train_loss: epoch_loss / n_train as f64,
            val_loss,
        });

        if val_loss < best_val_loss - 1e-7 {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params());
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= cfg.patience {
                stopped_epoch = epoch;
                break;
            }
        }
    }

    model.params_mut().copy_from_slice(&best_params);
    Ok(TrainedModel {
        model,
        history,
        stopped_epoch,
        best_epoch,
        best_val_loss,
    })
}

/// One grid-sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub config_index: usize,
    pub seed: u64,
    /// Best validation loss, or the failure message for this run.
    pub outcome: std::result::Result<f64, String>,
}

/// Run every `(config, seed)` combination, propagating per-run failures as
/// marked rows. Rows are sorted by the mean validation loss of their config
/// across seeds (failed runs sort last).
pub fn sweep(
    grid: &[TrainConfig],
    train_log: &ClickLog,
    val_log: &ClickLog,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::validation("sweep grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("sweep needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut config_means = vec![(0.0f64, 0usize); grid.len()];
    for (ci, base) in grid.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let outcome = match train(train_log, val_log, &cfg) {
                Ok(trained) => {
                    config_means[ci].0 += trained.best_val_loss;
                    config_means[ci].1 += 1;
                    Ok(trained.best_val_loss)
                }
                Err(e) => Err(e.to_string()),
            };
            rows.push(SweepRow {
                config_index: ci,
                seed,
                outcome,
            });
        }
    }
    let sort_key = |row: &SweepRow| {
        let (sum, count) = config_means[row.config_index];
        if count == 0 {
            f64::INFINITY
        } else {
            sum / count as f64
        }
    };
    rows.sort_by(|a, b| {
        sort_key(a)
            .partial_cmp(&sort_key(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.config_index.cmp(&b.config_index))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SessionItem;
    use crate::losses::LossKind;
    use crate::model::sigmoid;

    /// Doc A (features [1, 0]) is always clicked, doc B ([0, 1]) never.
    fn separable_log(n_sessions: usize) -> ClickLog {
        let sessions = (0..n_sessions)
            .map(|i| Session {
                session_id: format!("s{i}"),
                query_id: "q".into(),
                items: vec![
                    SessionItem {
                        doc_id: "A".into(),
                        rank: 1,
                        click: 1,
                        features: vec![1.0, 0.0],
                    },
                    SessionItem {
                        doc_id: "B".into(),
                        rank: 2,
                        click: 0,
                        features: vec![0.0, 1.0],
                    },
                ],
            })
            .collect();
        ClickLog::from_sessions(sessions)
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            hidden_dims: vec![8],
            lr: 0.02,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 3,
            ..TrainConfig::new(LossSpec::new(LossKind::NaivePointwise))
        }
    }

    #[test]
    fn converges_on_separable_task() {
        let log = separable_log(200);
        let val = separable_log(40);
        let trained = train(&log, &val, &base_config()).unwrap();
        let scores = trained
            .model
            .forward(
                &[&[1.0, 0.0][..], &[0.0, 1.0][..]],
                ForwardMode::Infer,
            )
            .unwrap();
        assert!(
            sigmoid(scores[0]) > 0.9 && sigmoid(scores[1]) < 0.1,
            "A: {}, B: {}",
            sigmoid(scores[0]),
            sigmoid(scores[1])
        );
    }

    #[test]
    fn training_is_deterministic() {
        let log = separable_log(64);
        let val = separable_log(16);
        let mut cfg = base_config();
        cfg.max_epochs = 8;
        cfg.patience = 3;
        let a = train(&log, &val, &cfg).unwrap();
        let b = train(&log, &val, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history, b.history);
        assert_eq!(a.stopped_epoch, b.stopped_epoch);
    }

    #[test]
    fn early_stopping_mechanics() {
        let log = separable_log(64);
        let val = separable_log(16);
        let mut cfg = base_config();
        cfg.patience = 1;
        cfg.max_epochs = 20;
        // Freeze the parameters after epoch 1: the validation loss can never
        // strictly improve again, so patience = 1 stops at epoch 2 and the
        // epoch-1 snapshot is returned.
        cfg.epoch_lr_override = Some(vec![cfg.lr, 0.0]);
        let trained = train(&log, &val, &cfg).unwrap();
        assert_eq!(trained.stopped_epoch, 2);
        assert_eq!(trained.best_epoch, 1);
        assert_eq!(trained.history.len(), 2);
        assert_eq!(trained.best_val_loss, trained.history[0].val_loss);
        let revalidated = mean_log_loss(&trained.model, &cfg.loss, &val).unwrap();
        assert_eq!(revalidated, trained.history[0].val_loss);
        // The snapshot's validation loss bounds every recorded epoch.
        assert!(trained
            .history
            .iter()
            .all(|e| trained.best_val_loss <= e.val_loss));
    }

    #[test]
    fn gradient_accumulation_is_batch_invariant() {
        let log = separable_log(10);
        let model = ScoringModel::init(2, &[4], PositionKind::None, 0, 0.0, 5).unwrap();
        let spec = LossSpec::new(LossKind::NaivePointwise);

        // Batch of one at a time.
        let mut one_by_one = vec![0.0; model.n_params()];
        for session in &log.sessions {
            let mut g = vec![0.0; model.n_params()];
            accumulate_session(&model, &spec, session, ForwardMode::Infer, &mut g).unwrap();
            for (acc, gi) in one_by_one.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        // One batch of everything.
        let mut full = vec![0.0; model.n_params()];
        for session in &log.sessions {
            accumulate_session(&model, &spec, session, ForwardMode::Infer, &mut full).unwrap();
        }
        for (a, b) in one_by_one.iter().zip(&full) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let log = separable_log(8);
        let mut cfg = base_config();
        cfg.patience = cfg.max_epochs;
        assert!(train(&log, &log, &cfg).is_err());
        let mut cfg = base_config();
        cfg.lr = 0.0;
        assert!(train(&log, &log, &cfg).is_err());
        assert!(train(&ClickLog::default(), &log, &base_config()).is_err());
    }

    #[test]
    fn sweep_reports_and_sorts() {
        let log = separable_log(48);
        let val = separable_log(16);
        let mut fast = base_config();
        fast.max_epochs = 6;
        fast.patience = 2;
        let mut slow = fast.clone();
        slow.lr = 1e-5;
        let rows = sweep(&[fast.clone(), slow], &log, &val, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 4);
        // The higher learning rate reaches a lower validation loss on this
        // separable task, so its rows sort first.
        assert_eq!(rows[0].config_index, 0);
        assert_eq!(rows[1].config_index, 0);
        assert!(rows.iter().all(|r| r.outcome.is_ok()));

        // Identical configs produce identical per-seed results.
        let rows2 = sweep(&[fast.clone(), fast], &log, &val, &[7]).unwrap();
        match (&rows2[0].outcome, &rows2[1].outcome) {
            (Ok(a), Ok(b)) => assert_eq!(a, b),
            other => panic!("expected two successes, got {other:?}"),
        }
    }
}
