//! Losses, optimizers, the training loop, and the gradient-check driver.
//!
//! The training objective is cross-entropy plus an optional auxiliary
//! reconstruction term and an optional L2 penalty added directly to the
//! loss (so gradient checks cover it). Decay-exempt parameters (biases and
//! gain vectors) never enter the penalty. Epoch shuffling draws from a
//! stream seeded with `seed ^ epoch`, and the same stream then feeds any
//! train-time dropout, so a (seed, config, data) triple fixes the entire
//! parameter trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionOutput, Mode};
use crate::metrics::{classification_report, ClassificationReport};
use crate::models::{Batch, Model, TaskData};
use crate::rng::RngStream;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Loss-shaping weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Auxiliary reconstruction weight.
    #[serde(default)]
    pub aux_weight: f64,
    /// L2 penalty coefficient; the loss gains (weight_decay / 2) * ||w||^2
    /// summed over non-exempt parameters.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            aux_weight: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("aux_weight", self.aux_weight), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue {
                    what: "loss config",
                    detail: format!("{name} = {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum,
    #[default]
    Adam,
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimKind,
    /// Overrides the model's fusion dropout when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
}

fn default_batch_size() -> usize {
    32
}
fn default_shuffle() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidValue {
                what: "batch_size",
                detail: "must be at least 1".into(),
            });
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidValue {
                what: "lr",
                detail: format!("{}", self.lr),
            });
        }
        if let Some(p) = self.dropout_p {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidValue {
                    what: "dropout_p",
                    detail: format!("{p} outside [0,1)"),
                });
            }
        }
        Ok(())
    }
}

/// Mean over all elements of the squared difference.
pub fn mse(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum_all(&sq)?;
    tape.mul_scalar(&total, 1.0 / a.numel() as f64)
}

/// Cross-entropy plus the auxiliary and L2 terms:
/// CE + aux_weight * MSE(aux_pred, aux_target) + (weight_decay / 2) * sum
/// of squared non-exempt parameters.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    logits: &Tensor,
    labels: &[usize],
    fusion_out: &FusionOutput,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut loss = tape.cross_entropy(logits, labels)?;
    if cfg.aux_weight > 0.0 {
        let (pred, target) = match (&fusion_out.aux_pred, &fusion_out.aux_target) {
            (Some(p), Some(t)) => (p, t),
            _ => {
                return Err(Error::InvalidValue {
                    what: "auxiliary loss",
                    detail: "aux_weight > 0 but the forward produced no auxiliary pair".into(),
                })
            }
        };
        let aux = mse(tape, pred, target)?;
        let aux = tape.mul_scalar(&aux, cfg.aux_weight)?;
        loss = tape.add(&loss, &aux)?;
    }
    if cfg.weight_decay > 0.0 {
        let mut penalty: Option<Tensor> = None;
        for id in store.ids() {
            if store.get(id).decay_exempt {
                continue;
            }
            let w = tape.watch(store, id)?;
            let sq = tape.mul(&w, &w)?;
            let s = tape.sum_all(&sq)?;
            penalty = Some(match penalty {
                Some(acc) => tape.add(&acc, &s)?,
                None => s,
            });
        }
        if let Some(p) = penalty {
            let scaled = tape.mul_scalar(&p, cfg.weight_decay / 2.0)?;
            loss = tape.add(&loss, &scaled)?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, Default)]
struct Slot {
    momentum: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter optimizer buffers plus hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), Slot::default);
        }
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            let n = param.value.numel();
            let slot = &mut self.slots[id.0];
            match self.kind {
                OptimKind::SgdMomentum => {
                    if slot.momentum.len() != n {
                        slot.momentum = vec![0.0; n];
                    }
                    for i in 0..n {
                        let g = param.grad.data()[i];
                        slot.momentum[i] = self.momentum * slot.momentum[i] + g;
                        param.value.data_mut()[i] -= self.lr * slot.momentum[i];
                    }
                }
                OptimKind::Adam => {
                    if slot.m.len() != n {
                        slot.m = vec![0.0; n];
                        slot.v = vec![0.0; n];
                    }
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for i in 0..n {
                        let g = param.grad.data()[i];
                        slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                        slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        param.value.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Mean training loss and classification quality over one epoch's
/// forwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// One pass over `data`: deterministic shuffle, fixed batch order, final
/// partial batch included. The shuffle stream continues into dropout.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore,
    data: &TaskData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty { what: "training data" });
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(cfg.seed ^ epoch as u64);
    if cfg.shuffle {
        rng.shuffle(&mut order);
    }
    let mut loss_sum = 0.0;
    let mut y_true = Vec::with_capacity(n);
    let mut y_pred = Vec::with_capacity(n);
    for chunk in order.chunks(cfg.batch_size) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let (logits, fusion_out) = model.forward(&mut tape, store, &batch, Mode::Train, &mut rng)?;
        let loss = total_loss(&mut tape, store, &logits, batch.labels(), &fusion_out, loss_cfg)?;
        store.zero_grads();
        tape.backward(&loss, store)?;
        opt.step(store);
        loss_sum += loss.item() * chunk.len() as f64;
        y_true.extend_from_slice(batch.labels());
        y_pred.extend(logits.argmax_rows());
    }
    let report = classification_report(&y_true, &y_pred, data.classes())?;
    Ok(EpochStats {
        loss: loss_sum / n as f64,
        accuracy: report.accuracy,
        macro_f1: report.macro_f1,
    })
}

/// Attention mass placed on corrupted versus clean sources.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionSummary {
    pub corrupted_sum: f64,
    pub corrupted_n: usize,
    pub clean_sum: f64,
    pub clean_n: usize,
}

impl AttentionSummary {
    pub fn corrupted_mean(&self) -> Option<f64> {
        (self.corrupted_n > 0).then(|| self.corrupted_sum / self.corrupted_n as f64)
    }

    pub fn clean_mean(&self) -> Option<f64> {
        (self.clean_n > 0).then(|| self.clean_sum / self.clean_n as f64)
    }

    fn absorb(&mut self, alphas: &Tensor, corrupted: &[Vec<bool>]) {
        let k = alphas.shape()[1];
        for (row, flags) in corrupted.iter().enumerate() {
            for (col, &flag) in flags.iter().enumerate().take(k) {
                let a = alphas.data()[row * k + col];
                if flag {
                    self.corrupted_sum += a;
                    self.corrupted_n += 1;
                } else {
                    self.clean_sum += a;
                    self.clean_n += 1;
                }
            }
        }
    }
}

/// Evaluation-mode metrics over a dataset.
#[derive(Clone, Debug)]
pub struct EvalStats {
    /// Mean cross-entropy.
    pub loss: f64,
    pub report: ClassificationReport,
    /// Present when the model emits attention weights on multi-source
    /// batches.
    pub attention: Option<AttentionSummary>,
}

/// Run the model in eval mode over `data` in index order.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &TaskData,
    batch_size: usize,
) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::Empty { what: "evaluation data" });
    }
    if batch_size == 0 {
        return Err(Error::InvalidValue {
            what: "batch_size",
            detail: "must be at least 1".into(),
        });
    }
    let n = data.len();
    let order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(0);
    let mut loss_sum = 0.0;
    let mut y_true = Vec::with_capacity(n);
    let mut y_pred = Vec::with_capacity(n);
    let mut attention: Option<AttentionSummary> = None;
    for chunk in order.chunks(batch_size) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let (logits, fusion_out) = model.forward(&mut tape, store, &batch, Mode::Eval, &mut rng)?;
        let loss = tape.cross_entropy(&logits, batch.labels())?;
        loss_sum += loss.item() * chunk.len() as f64;
        y_true.extend_from_slice(batch.labels());
        y_pred.extend(logits.argmax_rows());
        if let (Some(alphas), Batch::MultiSource { corrupted, .. }) = (&fusion_out.alphas, &batch) {
            attention
                .get_or_insert_with(AttentionSummary::default)
                .absorb(alphas, corrupted);
        }
    }
    let report = classification_report(&y_true, &y_pred, data.classes())?;
    Ok(EvalStats {
        loss: loss_sum / n as f64,
        report,
        attention,
    })
}

/// Compare the tape's gradients against central differences at `n_coords`
/// parameter coordinates sampled from the stream seeded with `seed`.
/// `forward` must rebuild the same scalar loss on a fresh tape each call.
/// Returns the maximum relative error
/// |g_a - g_n| / max(1e-12, |g_a| + |g_n|).
pub fn grad_check_fn<F>(
    store: &mut ParamStore,
    n_coords: usize,
    seed: u64,
    forward: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    store.zero_grads();
    tape.backward(&loss, store)?;
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.get(id).grad.data().to_vec())
        .collect();
    let total: usize = ids.iter().map(|&id| store.value(id).numel()).sum();
    if total == 0 {
        return Err(Error::Empty { what: "parameters" });
    }
    let mut rng = RngStream::new(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let mut flat = rng.next_index(total);
        let mut which = 0;
        while flat >= store.value(ids[which]).numel() {
            flat -= store.value(ids[which]).numel();
            which += 1;
        }
        let id = ids[which];
        let orig = store.value(id).data()[flat];
        let h = 1e-6 * orig.abs().max(1.0);
        store.get_mut(id).value.data_mut()[flat] = orig + h;
        let mut tp = Tape::new();
        let plus = forward(&mut tp, store)?.item();
        store.get_mut(id).value.data_mut()[flat] = orig - h;
        let mut tm = Tape::new();
        let minus = forward(&mut tm, store)?.item();
        store.get_mut(id).value.data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let ga = analytic[which][flat];
        let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Gradient-check a full model on one batch with the training loss.
/// Dropout must be disabled; the auxiliary target is frozen at its
/// base-parameter value since its gradient path is blocked by design.
pub fn model_grad_check(
    model: &Model,
    store: &mut ParamStore,
    batch: &Batch,
    loss_cfg: &LossConfig,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    if model.dropout_p > 0.0 {
        return Err(Error::InvalidValue {
            what: "grad check",
            detail: "dropout must be disabled".into(),
        });
    }
    let frozen_target = {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0);
        let (_, out) = model.forward(&mut tape, store, batch, Mode::Train, &mut rng)?;
        out.aux_target.map(|t| t.detached())
    };
    let labels = batch.labels().to_vec();
    grad_check_fn(store, n_coords, seed, |tape, store| {
        let mut rng = RngStream::new(0);
        let (logits, mut out) = model.forward(tape, store, batch, Mode::Train, &mut rng)?;
        if let Some(t) = &frozen_target {
            out.aux_target = Some(tape.constant(t)?);
        }
        total_loss(tape, store, &logits, &labels, &out, loss_cfg)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_multisource, MultiSourceSpec};
    use crate::models::{ArchSpec, DirectSpec, FusionMode, ModelConfig};
    use crate::tensor::ParamId;
    use approx::assert_abs_diff_eq;

    fn smoke_data(n: usize, seed: u64) -> TaskData {
        let spec = MultiSourceSpec {
            n,
            p_corrupt: 0.0,
            sigma: 0.3,
            ..MultiSourceSpec::new(n)
        };
        TaskData::MultiSource(gen_multisource(&spec, seed).unwrap())
    }

    fn small_model(mode: FusionMode, aux_weight: f64, seed: u64) -> (Model, ParamStore, ModelConfig) {
        let mut config = ModelConfig::new(
            ArchSpec::Direct(DirectSpec { dims: vec![9, 9, 9] }),
            2,
        );
        config.fusion_mode = mode;
        config.fusion.common_dim = 6;
        config.fusion.attention_hidden = 4;
        config.fusion.gate_bottleneck = 3;
        config.fusion.meta_hidden = 4;
        config.fusion.dropout_p = 0.0;
        config.fusion.aux_weight = aux_weight;
        let mut store = ParamStore::new();
        let model = Model::build(&config, &mut store, &mut RngStream::new(seed)).unwrap();
        (model, store, config)
    }

    #[test]
    fn switched_off_terms_leave_plain_cross_entropy() {
        let (model, store, _) = small_model(FusionMode::Aff, 0.5, 1);
        let data = smoke_data(8, 2);
        let batch = data.batch(&[0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0);
        let (logits, out) = model
            .forward(&mut tape, &store, &batch, Mode::Eval, &mut rng)
            .unwrap();
        let plain = tape.cross_entropy(&logits, batch.labels()).unwrap();
        let cfg = LossConfig {
            aux_weight: 0.0,
            weight_decay: 0.0,
        };
        let total = total_loss(&mut tape, &store, &logits, batch.labels(), &out, &cfg).unwrap();
        assert_eq!(total.item(), plain.item());
    }

    #[test]
    fn decay_penalty_matches_hand_value() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![1], vec![3.0]).unwrap(), false);
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let out = FusionOutput {
            fused: logits.clone(),
            alphas: None,
            gates: None,
            aux_pred: None,
            aux_target: None,
        };
        let cfg = LossConfig {
            aux_weight: 0.0,
            weight_decay: 0.1,
        };
        let total = total_loss(&mut tape, &store, &logits, &[0], &out, &cfg).unwrap();
        let ce = 2.0f64.ln();
        assert_abs_diff_eq!(total.item() - ce, 0.45, epsilon = 1e-15);

        // all-zero weights add nothing
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![4]), false);
        let mut tape = Tape::new();
        let logits = tape.constant(&Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let out = FusionOutput {
            fused: logits.clone(),
            alphas: None,
            gates: None,
            aux_pred: None,
            aux_target: None,
        };
        let total = total_loss(&mut tape, &store, &logits, &[0], &out, &cfg).unwrap();
        assert_eq!(total.item(), ce);
    }

    #[test]
    fn aux_weight_without_aux_pair_is_an_error() {
        let (model, store, _) = small_model(FusionMode::Add, 0.0, 3);
        let data = smoke_data(4, 4);
        let batch = data.batch(&[0, 1]).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0);
        let (logits, out) = model
            .forward(&mut tape, &store, &batch, Mode::Eval, &mut rng)
            .unwrap();
        let cfg = LossConfig {
            aux_weight: 0.1,
            weight_decay: 0.0,
        };
        assert!(total_loss(&mut tape, &store, &logits, batch.labels(), &out, &cfg).is_err());
    }

    #[test]
    fn decay_exempt_gradients_are_untouched_by_weight_decay() {
        let (model, mut store, _) = small_model(FusionMode::Aff, 0.1, 5);
        let data = smoke_data(8, 6);
        let batch = data.batch(&[0, 1, 2, 3]).unwrap();
        let grads_under = |wd: f64, store: &mut ParamStore| -> Vec<(ParamId, Vec<f64>)> {
            let mut tape = Tape::new();
            let mut rng = RngStream::new(0);
            let (logits, out) = model
                .forward(&mut tape, store, &batch, Mode::Train, &mut rng)
                .unwrap();
            let cfg = LossConfig {
                aux_weight: 0.1,
                weight_decay: wd,
            };
            let loss = total_loss(&mut tape, store, &logits, batch.labels(), &out, &cfg).unwrap();
            store.zero_grads();
            tape.backward(&loss, store).unwrap();
            store
                .ids()
                .map(|id| (id, store.get(id).grad.data().to_vec()))
                .collect()
        };
        let without = grads_under(0.0, &mut store);
        let with = grads_under(0.3, &mut store);
        let mut exempt_seen = 0;
        let mut decayed_seen = 0;
        for ((id, a), (_, b)) in without.iter().zip(&with) {
            if store.get(*id).decay_exempt {
                assert_eq!(a, b, "{}", store.get(*id).name);
                exempt_seen += 1;
            } else if a != b {
                decayed_seen += 1;
            }
        }
        assert!(exempt_seen > 0);
        assert!(decayed_seen > 0);
    }

    #[test]
    fn fresh_adam_with_zero_grads_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), false);
        let before = store.value(id).data().to_vec();
        let mut opt = OptimizerState::new(OptimKind::Adam, 0.1);
        store.zero_grads();
        opt.step(&mut store);
        assert_eq!(store.value(id).data(), &before[..]);
    }

    #[test]
    fn plain_sgd_single_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![1]), false);
        store.accumulate_grad(id, &[1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimKind::SgdMomentum, 0.1);
        opt.momentum = 0.0;
        opt.step(&mut store);
        assert_eq!(store.value(id).data(), &[-0.1]);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![1]), false);
        let mut opt = OptimizerState::new(OptimKind::SgdMomentum, 1.0);
        store.zero_grads();
        store.accumulate_grad(id, &[1.0]).unwrap();
        opt.step(&mut store);
        assert_abs_diff_eq!(store.value(id).data()[0], -1.0, epsilon = 1e-15);
        store.zero_grads();
        store.accumulate_grad(id, &[1.0]).unwrap();
        opt.step(&mut store);
        // v2 = 0.9 * 1 + 1 = 1.9, theta = -1 - 1.9
        assert_abs_diff_eq!(store.value(id).data()[0], -2.9, epsilon = 1e-15);
    }

    #[test]
    fn adam_matches_a_scalar_transcription() {
        let grads = [1.0, -2.0, 0.3, 0.0, 5.0];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![1], vec![0.5]).unwrap(), false);
        let mut opt = OptimizerState::new(OptimKind::Adam, 0.01);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
        for (t, &g) in grads.iter().enumerate() {
            store.zero_grads();
            store.accumulate_grad(id, &[g]).unwrap();
            opt.step(&mut store);
            let tt = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(tt));
            let v_hat = v / (1.0 - b2.powi(tt));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            assert_abs_diff_eq!(store.value(id).data()[0], theta, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_almost_exactly_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![1]), false);
        store.accumulate_grad(id, &[1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimKind::Adam, 0.1);
        opt.step(&mut store);
        assert!((store.value(id).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (model, mut store, _) = small_model(FusionMode::Aff, 0.1, 7);
        let data = smoke_data(12, 8);
        let before: Vec<Vec<f64>> = store.ids().map(|id| store.value(id).data().to_vec()).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.0,
            optimizer: OptimKind::Adam,
            dropout_p: None,
            seed: 3,
            shuffle: true,
        };
        let loss_cfg = LossConfig {
            aux_weight: 0.1,
            weight_decay: 0.01,
        };
        let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
        train_epoch(&model, &mut store, &data, &cfg, &loss_cfg, &mut opt, 0).unwrap();
        for (id, want) in store.ids().zip(&before) {
            assert_eq!(store.value(id).data(), &want[..]);
        }
    }

    #[test]
    fn training_is_deterministic_in_seed_and_config() {
        let run = || {
            let (model, mut store, _) = small_model(FusionMode::Aff, 0.1, 9);
            let data = smoke_data(16, 10);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 5,
                lr: 0.01,
                optimizer: OptimKind::Adam,
                dropout_p: None,
                seed: 11,
                shuffle: true,
            };
            let loss_cfg = LossConfig {
                aux_weight: 0.1,
                weight_decay: 0.001,
            };
            let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
            let mut stats = Vec::new();
            for epoch in 0..cfg.epochs {
                stats.push(
                    train_epoch(&model, &mut store, &data, &cfg, &loss_cfg, &mut opt, epoch)
                        .unwrap(),
                );
            }
            let params: Vec<Vec<f64>> =
                store.ids().map(|id| store.value(id).data().to_vec()).collect();
            (stats, params)
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn one_epoch_on_easy_data_decreases_the_loss() {
        let (model, mut store, _) = small_model(FusionMode::Aff, 0.1, 13);
        let data = smoke_data(64, 14);
        let before = evaluate(&model, &store, &data, 16).unwrap().loss;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 3e-3,
            optimizer: OptimKind::Adam,
            dropout_p: None,
            seed: 15,
            shuffle: true,
        };
        let loss_cfg = LossConfig {
            aux_weight: 0.1,
            weight_decay: 0.0,
        };
        let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
        train_epoch(&model, &mut store, &data, &cfg, &loss_cfg, &mut opt, 0).unwrap();
        let after = evaluate(&model, &store, &data, 16).unwrap().loss;
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn every_fusion_parameter_receives_gradient_after_one_batch() {
        let (model, mut store, _) = small_model(FusionMode::Aff, 0.1, 17);
        let spec = MultiSourceSpec {
            n: 32,
            ..MultiSourceSpec::new(32)
        };
        let data = TaskData::MultiSource(gen_multisource(&spec, 18).unwrap());
        let indices: Vec<usize> = (0..32).collect();
        let batch = data.batch(&indices).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::new(0);
        let (logits, out) = model
            .forward(&mut tape, &store, &batch, Mode::Train, &mut rng)
            .unwrap();
        let loss_cfg = LossConfig {
            aux_weight: 0.1,
            weight_decay: 0.0,
        };
        let loss = total_loss(&mut tape, &store, &logits, batch.labels(), &out, &loss_cfg).unwrap();
        store.zero_grads();
        tape.backward(&loss, &mut store).unwrap();
        for id in model.fusion_param_ids() {
            let grad = store.get(id).grad.data();
            assert!(
                grad.iter().any(|&g| g != 0.0),
                "zero gradient on {}",
                store.get(id).name
            );
        }
    }

    #[test]
    fn quadratic_loss_gradient_check_is_nearly_exact() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(19);
        let w = store.add("w", Tensor::from_fn(vec![3, 4], |_| rng.next_normal()), false);
        let x = Tensor::from_fn(vec![4, 2], |_| rng.next_normal());
        let y = Tensor::from_fn(vec![3, 2], |_| rng.next_normal());
        let max_rel = grad_check_fn(&mut store, 12, 20, |tape, store| {
            let wt = tape.watch(store, w)?;
            let xt = tape.constant(&x)?;
            let yt = tape.constant(&y)?;
            let pred = tape.matmul(&wt, &xt)?;
            let diff = tape.sub(&pred, &yt)?;
            let sq = tape.mul(&diff, &diff)?;
            tape.sum_all(&sq)
        })
        .unwrap();
        assert!(max_rel <= 1e-7, "{max_rel}");
    }

    #[test]
    fn full_model_gradient_check_passes() {
        for mode in [FusionMode::Aff, FusionMode::Concat, FusionMode::Add, FusionMode::Mul] {
            let (model, mut store, _) = small_model(mode, 0.1, 21);
            let data = smoke_data(8, 22);
            let batch = data.batch(&[0, 1, 2, 3]).unwrap();
            let loss_cfg = LossConfig {
                // only the adaptive arm owns an auxiliary head
                aux_weight: if mode == FusionMode::Aff { 0.1 } else { 0.0 },
                weight_decay: 0.01,
            };
            let max_rel =
                model_grad_check(&model, &mut store, &batch, &loss_cfg, 20, 23).unwrap();
            assert!(max_rel <= 1e-5, "{mode:?}: {max_rel}");
        }
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![2], vec![0.4, -0.7]).unwrap(), false);
        // (w - detach(w)) contributes zero value but a spurious gradient,
        // emulating a wrong backward rule
        let max_rel = grad_check_fn(&mut store, 8, 24, |tape, store| {
            let wt = tape.watch(store, w)?;
            let sq = tape.mul(&wt, &wt)?;
            let honest = tape.sum_all(&sq)?;
            let ghost = tape.detach(&wt)?;
            let zero = tape.sub(&wt, &ghost)?;
            let spurious = tape.sum_all(&zero)?;
            let spurious = tape.mul_scalar(&spurious, 3.0)?;
            tape.add(&honest, &spurious)
        })
        .unwrap();
        assert!(max_rel > 1e-2, "{max_rel}");
    }

    #[test]
    fn grad_check_requires_dropout_off() {
        let mut config = ModelConfig::new(
            ArchSpec::Direct(DirectSpec { dims: vec![9, 9, 9] }),
            2,
        );
        config.fusion.dropout_p = 0.4;
        let mut store = ParamStore::new();
        let model = Model::build(&config, &mut store, &mut RngStream::new(25)).unwrap();
        let data = smoke_data(4, 26);
        let batch = data.batch(&[0, 1]).unwrap();
        let cfg = LossConfig::default();
        assert!(model_grad_check(&model, &mut store, &batch, &cfg, 5, 27).is_err());
    }

    #[test]
    fn evaluate_reports_attention_only_for_multisource_attention_models() {
        let (model, store, _) = small_model(FusionMode::Aff, 0.1, 29);
        let spec = MultiSourceSpec {
            n: 10,
            ..MultiSourceSpec::new(10)
        };
        let data = TaskData::MultiSource(gen_multisource(&spec, 30).unwrap());
        let stats = evaluate(&model, &store, &data, 4).unwrap();
        let att = stats.attention.unwrap();
        assert_eq!(att.corrupted_n + att.clean_n, 30);
        let total_mass = att.corrupted_sum + att.clean_sum;
        assert_abs_diff_eq!(total_mass, 10.0, epsilon = 1e-9);

        let (concat_model, concat_store, _) = small_model(FusionMode::Concat, 0.0, 29);
        let stats = evaluate(&concat_model, &concat_store, &data, 4).unwrap();
        assert!(stats.attention.is_none());
    }

    #[test]
    fn train_config_serde_defaults_and_validation() {
        let json = r#"{"epochs": 30, "lr": 0.003}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.optimizer, OptimKind::Adam);
        assert!(cfg.shuffle);
        assert_eq!(cfg.dropout_p, None);
        assert!(cfg.validate().is_ok());
        let bad: TrainConfig = serde_json::from_str(r#"{"epochs": 1, "lr": 0.1, "batch_size": 0}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 1, "lr": 0.1, "momentum": 2}"#).is_err());
        let sgd: TrainConfig =
            serde_json::from_str(r#"{"epochs": 1, "lr": 0.1, "optimizer": "sgd_momentum"}"#).unwrap();
        assert_eq!(sgd.optimizer, OptimKind::SgdMomentum);
    }
}
