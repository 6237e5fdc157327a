//! Feed-forward scoring model with exact analytic gradients.
//!
//! The scorer applies a signed log1p transform to the raw features and runs
//! them through linear layers with ReLU activations down to a single
//! unbounded relevance logit per document. No layer or batch normalization.
//! Dropout, when enabled, acts on the final hidden layer only and only in
//! training mode.
//!
//! Methods that jointly estimate position bias get one learnable parameter
//! per rank appended to the flat parameter vector: an examination logit for
//! the two-tower, RegressionEM, and DLA objectives, or a positive/negative
//! propensity pair for pairwise debiasing. Keeping every parameter in one
//! flat vector makes the AdamW state, checkpoints, and finite-difference
//! checks one-dimensional.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `sigmoid^-1(0.9)`: initial examination logit, a weak prior that top
/// ranks are examined.
pub const EXAM_LOGIT_INIT: f64 = 2.197_224_577_336_219_6; // ln 9

/// Signed log scaling: `sign(x) * ln(1 + |x|)` per coordinate. Odd and
/// monotone, tames wide-range ranking features.
pub fn log1p_transform(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.signum() * v.abs().ln_1p()).collect()
}

/// Which objective trained the per-rank examination logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionSource {
    TwoTower,
    Rem,
    Dla,
}

/// Per-rank parameter block attached to the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PositionKind {
    /// No position parameters (naive and IPS objectives).
    None,
    /// One examination logit per rank.
    ExamLogits { source: PositionSource },
    /// One positive and one negative propensity per rank (pairwise
    /// debiasing), kept strictly positive and renormalized at rank 1.
    PairPropensities,
}

impl PositionKind {
    fn param_count(&self, k: usize) -> usize {
        match self {
            PositionKind::None => 0,
            PositionKind::ExamLogits { .. } => k,
            PositionKind::PairPropensities => 2 * k,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Feed-forward relevance scorer with optional per-rank position parameters.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    dropout: f64,
    position: PositionKind,
    k: usize,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Whether a forward pass is for training (dropout active, seeded) or
/// inference (deterministic).
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Infer,
    Train { seed: u64 },
}

struct ForwardCache {
    /// Post-activation values per layer (transformed input first).
    activations: Vec<Vec<f64>>,
    /// Dropout mask over the last hidden layer, scaled by 1/keep.
    dropout_mask: Option<Vec<f64>>,
}

impl ScoringModel {
    /// Create a model with fan-in-scaled uniform weights, zero biases, and
    /// position parameters at their priors. Identical seeds give identical
    /// parameters.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        position: PositionKind,
        k: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<ScoringModel> {
        if input_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("layer dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::validation("dropout must lie in [0, 1)"));
        }
        if !matches!(position, PositionKind::None) && k == 0 {
            return Err(Error::validation("position parameters require k >= 1"));
        }

        let mut layers = Vec::new();
        let mut offset = 0usize;
        let mut in_dim = input_dim;
        for &out_dim in hidden_dims.iter().chain(std::iter::once(&1)) {
            layers.push(LayerShape {
                w_off: offset,
                b_off: offset + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            offset += in_dim * out_dim + out_dim;
            in_dim = out_dim;
        }
        let k = if matches!(position, PositionKind::None) { 0 } else { k };
        let mut params = vec![0.0f64; offset + position.param_count(k)];

        let mut rng = stream_rng(seed, stream::MODEL_INIT, 0);
        for layer in &layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }
        match position {
            PositionKind::None => {}
            PositionKind::ExamLogits { .. } => {
                params[offset..offset + k].fill(EXAM_LOGIT_INIT);
            }
            PositionKind::PairPropensities => {
                params[offset..offset + 2 * k].fill(1.0);
            }
        }

        Ok(ScoringModel {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            dropout,
            position,
            k,
            layers,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn position_kind(&self) -> PositionKind {
        self.position
    }

    /// Number of ranks covered by the position block (0 without one).
    pub fn position_k(&self) -> usize {
        self.k
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of the position block within the flat parameter vector.
    pub fn position_offset(&self) -> usize {
        self.params.len() - self.position.param_count(self.k)
    }

    /// Examination logits and their source, if this model has them.
    pub fn position_logits(&self) -> Option<(&[f64], PositionSource)> {
        match self.position {
            PositionKind::ExamLogits { source } => {
                let off = self.position_offset();
                Some((&self.params[off..off + self.k], source))
            }
            _ => None,
        }
    }

    /// Positive and negative pairwise-debiasing propensities, if present.
    pub fn pair_propensities(&self) -> Option<(&[f64], &[f64])> {
        match self.position {
            PositionKind::PairPropensities => {
                let off = self.position_offset();
                let (plus, minus) = self.params[off..off + 2 * self.k].split_at(self.k);
                Some((plus, minus))
            }
            _ => None,
        }
    }

    /// Clamp pairwise-debiasing propensities positive and rescale each
    /// vector so its rank-1 entry is exactly 1. Applied after every
    /// optimizer step; without it the L1 regularizer drives both vectors to
    /// zero.
    pub fn renormalize_pair_propensities(&mut self) {
        if !matches!(self.position, PositionKind::PairPropensities) {
            return;
        }
        let off = self.position_offset();
        let k = self.k;
        for half in 0..2 {
            let block = &mut self.params[off + half * k..off + (half + 1) * k];
            for v in block.iter_mut() {
                *v = v.max(1e-6);
            }
            let first = block[0];
            for v in block.iter_mut() {
                *v /= first;
            }
        }
    }

    fn check_rows(&self, rows: &[&[f64]]) -> Result<()> {
        for row in rows {
            if row.len() != self.input_dim {
                return Err(Error::Shape(format!(
                    "feature vector has dimension {}, model expects {}",
                    row.len(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    fn dropout_mask(&self, width: usize, rows: usize, mode: ForwardMode) -> Option<Vec<f64>> {
        match mode {
            ForwardMode::Train { seed } if self.dropout > 0.0 && !self.hidden_dims.is_empty() => {
                let keep = 1.0 - self.dropout;
                let mut rng: ChaCha8Rng = stream_rng(seed, stream::DROPOUT, 0);
                Some(
                    (0..width * rows)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    fn forward_cached(&self, rows: &[&[f64]], mode: ForwardMode) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_rows(rows)?;
        let n = rows.len();
        let last_hidden = self.layers.len().saturating_sub(2);
        let mask = self
            .hidden_dims
            .last()
            .and_then(|&w| self.dropout_mask(w, n, mode));

        // activations[l] holds layer l's output for all rows, row-major.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        let mut input = Vec::with_capacity(n * self.input_dim);
        for row in rows {
            input.extend(log1p_transform(row));
        }
        activations.push(input);

        for (l, layer) in self.layers.iter().enumerate() {
            let prev = &activations[l];
            let mut out = vec![0.0f64; n * layer.out_dim];
            let w = &self.params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim];
            let b = &self.params[layer.b_off..layer.b_off + layer.out_dim];
            let is_output = l == self.layers.len() - 1;
            for r in 0..n {
                let x = &prev[r * layer.in_dim..(r + 1) * layer.in_dim];
                for o in 0..layer.out_dim {
                    let wi = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let mut acc = b[o];
                    for (wv, xv) in wi.iter().zip(x) {
                        acc += wv * xv;
                    }
                    if !is_output {
                        acc = acc.max(0.0);
                        if l == last_hidden {
                            if let Some(mask) = &mask {
                                acc *= mask[r * layer.out_dim + o];
                            }
                        }
                    }
                    out[r * layer.out_dim + o] = acc;
                }
            }
            activations.push(out);
        }

        let scores = activations.last().expect("output layer").clone();
        Ok((
            scores,
            ForwardCache {
                activations,
                dropout_mask: mask,
            },
        ))
    }

    /// Score each feature row. Deterministic unless `mode` enables dropout.
    pub fn forward(&self, rows: &[&[f64]], mode: ForwardMode) -> Result<Vec<f64>> {
        Ok(self.forward_cached(rows, mode)?.0)
    }

    /// Exact gradient of `sum_i upstream[i] * score_i` with respect to every
    /// parameter, as a flat vector aligned with [`ScoringModel::params`].
    /// Position-block entries are zero: position parameters feed the losses
    /// directly, not the forward pass.
    ///
    /// `mode` must match the forward pass being differentiated; with dropout
    /// the same seed regenerates the same mask.
    pub fn grad(&self, rows: &[&[f64]], upstream: &[f64], mode: ForwardMode) -> Result<Vec<f64>> {
        let mut grads = vec![0.0f64; self.params.len()];
        self.grad_into(rows, upstream, mode, &mut grads)?;
        Ok(grads)
    }

    /// Like [`ScoringModel::grad`], but accumulates (`+=`) into an existing
    /// buffer so batch accumulation does not reallocate per session.
    pub fn grad_into(
        &self,
        rows: &[&[f64]],
        upstream: &[f64],
        mode: ForwardMode,
        grads: &mut [f64],
    ) -> Result<()> {
        if upstream.len() != rows.len() {
            return Err(Error::Shape(format!(
                "upstream has length {}, expected {}",
                upstream.len(),
                rows.len()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has length {}, expected {}",
                grads.len(),
                self.params.len()
            )));
        }
        let (_, cache) = self.forward_cached(rows, mode)?;
        let n = rows.len();
        let last_hidden = self.layers.len().saturating_sub(2);

        // d(objective)/d(activation) for the layer being processed.
        let mut delta: Vec<f64> = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let prev = &cache.activations[l];
            let this = &cache.activations[l + 1];
            let is_output = l == self.layers.len() - 1;
            let w = &self.params[layer.w_off..layer.w_off + layer.in_dim * layer.out_dim];
            let mut next_delta = vec![0.0f64; n * layer.in_dim];
            for r in 0..n {
                for o in 0..layer.out_dim {
                    let mut d = delta[r * layer.out_dim + o];
                    if !is_output {
                        // ReLU: activation 0 means the unit was clamped (or
                        // dropped); its pre-activation gradient is 0.
                        if this[r * layer.out_dim + o] <= 0.0 {
                            continue;
                        }
                        if l == last_hidden {
                            if let Some(mask) = &cache.dropout_mask {
                                d *= mask[r * layer.out_dim + o];
                            }
                        }
                    }
                    if d == 0.0 {
                        continue;
                    }
                    grads[layer.b_off + o] += d;
                    let x = &prev[r * layer.in_dim..(r + 1) * layer.in_dim];
                    let gw = &mut grads[layer.w_off + o * layer.in_dim
                        ..layer.w_off + (o + 1) * layer.in_dim];
                    let wi = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let nd = &mut next_delta[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        gw[i] += d * x[i];
                        nd[i] += d * wi[i];
                    }
                }
            }
            delta = next_delta;
        }
        Ok(())
    }

    pub fn save(&self, meta_path: impl AsRef<Path>) -> Result<()> {
        let meta_path = meta_path.as_ref();
        let blob_name = {
            let mut p = meta_path.to_path_buf();
            p.set_extension("bin");
            p.file_name()
                .expect("checkpoint path has a file name")
                .to_string_lossy()
                .into_owned()
        };
        let meta = CheckpointMeta {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            dropout: self.dropout,
            position: self.position,
            k: self.k,
            n_params: self.params.len(),
            blob: blob_name.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path)?), &meta)?;

        let blob_path = meta_path.with_file_name(&blob_name);
        let mut out = BufWriter::new(File::create(blob_path)?);
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(meta_path: impl AsRef<Path>) -> Result<ScoringModel> {
        let meta_path = meta_path.as_ref();
        let meta: CheckpointMeta =
            serde_json::from_reader(std::io::BufReader::new(File::open(meta_path)?))?;
        let mut model = ScoringModel::init(
            meta.input_dim,
            &meta.hidden_dims,
            meta.position,
            meta.k.max(1),
            meta.dropout,
            0,
        )?;
        if model.n_params() != meta.n_params {
            return Err(Error::validation(format!(
                "checkpoint declares {} parameters, architecture implies {}",
                meta.n_params,
                model.n_params()
            )));
        }
        let blob_path = meta_path.with_file_name(&meta.blob);
        let mut bytes = Vec::new();
        File::open(blob_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != meta.n_params * 8 {
            return Err(Error::validation(format!(
                "parameter blob holds {} bytes, expected {}",
                bytes.len(),
                meta.n_params * 8
            )));
        }
        for (i, chunk) in bytes.chunks_exact(8).enumerate() {
            model.params[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    dropout: f64,
    position: PositionKind,
    k: usize,
    n_params: usize,
    blob: String,
}

/// AdamW optimizer state: decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> OptimizerState {
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update in place. Rejects non-finite gradients so
    /// divergence surfaces at the step that produced it.
    pub fn adamw_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.epsilon)
                + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rows(data: &[Vec<f64>]) -> Vec<&[f64]> {
        data.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn log1p_transform_values() {
        assert_eq!(log1p_transform(&[0.0]), vec![0.0]);
        assert_abs_diff_eq!(log1p_transform(&[1.0])[0], 0.693147, epsilon = 1e-6);
        assert_abs_diff_eq!(log1p_transform(&[-1.0])[0], -0.693147, epsilon = 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_shapes_position_block() {
        let a = ScoringModel::init(4, &[8], PositionKind::None, 0, 0.0, 3).unwrap();
        let b = ScoringModel::init(4, &[8], PositionKind::None, 0, 0.0, 3).unwrap();
        assert_eq!(a.params(), b.params());

        let linear = ScoringModel::init(4, &[], PositionKind::None, 0, 0.0, 3).unwrap();
        assert_eq!(linear.n_params(), 5); // 4 weights + output bias

        let tt = ScoringModel::init(
            4,
            &[8],
            PositionKind::ExamLogits {
                source: PositionSource::TwoTower,
            },
            10,
            0.0,
            3,
        )
        .unwrap();
        let (logits, source) = tt.position_logits().unwrap();
        assert_eq!(source, PositionSource::TwoTower);
        assert_eq!(logits.len(), 10);
        assert!(logits.iter().all(|&l| l == EXAM_LOGIT_INIT));
        assert_abs_diff_eq!(sigmoid(logits[0]), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn forward_zero_weights_zero_scores() {
        let mut model = ScoringModel::init(3, &[4], PositionKind::None, 0, 0.0, 1).unwrap();
        model.params_mut().fill(0.0);
        let data = vec![vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -0.25]];
        let scores = model.forward(&rows(&data), ForwardMode::Infer).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_model_is_dot_product_of_transformed_features() {
        let mut model = ScoringModel::init(3, &[], PositionKind::None, 0, 0.0, 1).unwrap();
        let w = [0.5, -1.0, 2.0];
        model.params_mut()[..3].copy_from_slice(&w);
        model.params_mut()[3] = 0.0;
        let x = vec![vec![2.0, -3.0, 0.5]];
        let scores = model.forward(&rows(&x), ForwardMode::Infer).unwrap();
        let t = log1p_transform(&x[0]);
        let expected: f64 = w.iter().zip(&t).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(scores[0], expected, epsilon = 1e-12);

        // Gradient of sum(upstream * score) w.r.t. weights is upstream * t.
        let grads = model.grad(&rows(&x), &[2.0], ForwardMode::Infer).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(grads[i], 2.0 * t[i], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(grads[3], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn inference_is_deterministic_and_permutation_equivariant() {
        let model = ScoringModel::init(4, &[8, 8], PositionKind::None, 0, 0.0, 9).unwrap();
        let data: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect())
            .collect();
        let a = model.forward(&rows(&data), ForwardMode::Infer).unwrap();
        let b = model.forward(&rows(&data), ForwardMode::Infer).unwrap();
        assert_eq!(a, b);

        let mut permuted = data.clone();
        permuted.reverse();
        let c = model.forward(&rows(&permuted), ForwardMode::Infer).unwrap();
        let mut a_rev = a;
        a_rev.reverse();
        assert_eq!(a_rev, c);
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let model = ScoringModel::init(4, &[8], PositionKind::None, 0, 0.0, 9).unwrap();
        let data = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let grads = model.grad(&rows(&data), &[0.0], ForwardMode::Infer).unwrap();
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let model = ScoringModel::init(4, &[8], PositionKind::None, 0, 0.0, 9).unwrap();
        let data = vec![vec![1.0, 2.0, 3.0]];
        assert!(model.forward(&rows(&data), ForwardMode::Infer).is_err());
    }

    /// Central finite differences on a 2-layer model: random probes of the
    /// gradient of `sum(upstream * score)`.
    #[test]
    fn gradient_matches_finite_differences() {
        let model = ScoringModel::init(3, &[6], PositionKind::None, 0, 0.0, 42).unwrap();
        let data = vec![
            vec![0.8, -1.5, 2.0],
            vec![-0.3, 0.9, -2.5],
            vec![1.7, 0.2, 0.4],
        ];
        let upstream = [0.7, -1.2, 0.5];
        let analytic = model.grad(&rows(&data), &upstream, ForwardMode::Infer).unwrap();

        let objective = |m: &ScoringModel| -> f64 {
            m.forward(&rows(&data), ForwardMode::Infer)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(s, u)| s * u)
                .sum()
        };
        let h = 1e-4;
        for &i in &[0usize, 5, 11, 17, model.n_params() - 1] {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn dropout_reproducible_by_seed_and_off_at_inference() {
        let model = ScoringModel::init(4, &[16], PositionKind::None, 0, 0.3, 5).unwrap();
        let data = vec![vec![1.0, 2.0, 3.0, 4.0]; 3];
        let t1 = model
            .forward(&rows(&data), ForwardMode::Train { seed: 1 })
            .unwrap();
        let t1b = model
            .forward(&rows(&data), ForwardMode::Train { seed: 1 })
            .unwrap();
        let t2 = model
            .forward(&rows(&data), ForwardMode::Train { seed: 2 })
            .unwrap();
        assert_eq!(t1, t1b);
        assert_ne!(t1, t2);
        let inf1 = model.forward(&rows(&data), ForwardMode::Infer).unwrap();
        let inf2 = model.forward(&rows(&data), ForwardMode::Infer).unwrap();
        assert_eq!(inf1, inf2);
    }

    #[test]
    fn adamw_hand_values() {
        // Zero gradient, zero decay: parameters unchanged.
        let mut p = [1.5];
        let mut opt = OptimizerState::new(0.1, 0.0, 1);
        opt.adamw_step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 1.5);

        // Bias-corrected first step is lr * sign(grad) up to epsilon.
        let mut p = [1.0];
        let mut opt = OptimizerState::new(0.1, 0.0, 1);
        opt.adamw_step(&mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-7);

        // Decoupled decay shrinks by (1 - lr * wd) under zero gradient.
        let mut p = [2.0];
        let mut opt = OptimizerState::new(0.1, 0.01, 1);
        opt.adamw_step(&mut p, &[0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 * (1.0 - 0.1 * 0.01), epsilon = 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut p = [1.0];
        let mut opt = OptimizerState::new(0.1, 0.0, 1);
        assert!(opt.adamw_step(&mut p, &[f64::NAN]).is_err());
        assert!(opt.adamw_step(&mut p, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = ScoringModel::init(
            5,
            &[7, 3],
            PositionKind::ExamLogits {
                source: PositionSource::Rem,
            },
            6,
            0.0,
            13,
        )
        .unwrap();
        model.save(&path).unwrap();
        let loaded = ScoringModel::load(&path).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert_eq!(loaded.position_kind(), model.position_kind());
        let data = vec![vec![0.1, -0.5, 2.0, 1.0, -3.0]];
        assert_eq!(
            loaded.forward(&rows(&data), ForwardMode::Infer).unwrap(),
            model.forward(&rows(&data), ForwardMode::Infer).unwrap()
        );
    }

    #[test]
    fn renormalize_pair_propensities_pins_rank_one() {
        let mut model =
            ScoringModel::init(2, &[], PositionKind::PairPropensities, 4, 0.0, 1).unwrap();
        let off = model.position_offset();
        model.params_mut()[off] = 2.0; // plus[0]
        model.params_mut()[off + 1] = -3.0; // plus[1], must be clamped
        model.params_mut()[off + 4] = 0.5; // minus[0]
        model.renormalize_pair_propensities();
        let (plus, minus) = model.pair_propensities().unwrap();
        assert_eq!(plus[0], 1.0);
        assert_eq!(minus[0], 1.0);
        assert!(plus.iter().chain(minus).all(|&v| v > 0.0));
    }

    proptest! {
        #[test]
        fn log1p_is_odd_and_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let fa = log1p_transform(&[a])[0];
            let fna = log1p_transform(&[-a])[0];
            prop_assert!((fa + fna).abs() < 1e-12);
            let fb = log1p_transform(&[b])[0];
            if a < b {
                prop_assert!(fa <= fb);
            }
        }
    }
}
