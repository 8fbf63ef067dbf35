//! Adam optimizer, the two-stage training protocol, and checkpointing.
//!
//! Stage one pretrains HRP on clean segments with a BPM MSE loss. Stage
//! two freezes HRP and trains DPNet on noisy/clean pairs under the
//! staged objective: MSE + λ1·(−SI-SDR) from the start, plus
//! λ2·|bpm_pred − bpm_true| once the warmup epoch count is reached.
//! Every epoch ends with a validation pass; the checkpoint with the
//! lowest validation MSE is kept (HR-MAE breaks ties for DPNet).
//!
//! Determinism: batches are shuffled with an epoch-indexed seed, every
//! sample contributes its gradient in shuffle order, and gradients are
//! reduced in parameter-name order, so a fixed seed reproduces the loss
//! curves bit-for-bit in double precision.

mod checkpoint;

pub use checkpoint::{
    config_digest, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_rng, zscore, SegmentStore, Split, StoredSegment};
use crate::metrics::{self, staged_sample_loss, LossWeights};
use crate::models::{
    dpnet_forward, hrp_forward, DPNetConfig, DPNetParams, HRPConfig, HRPParams, ModelError,
};
use crate::tensor::{Tape, Tensor, TensorError, VarRegistry};

/// RNG purpose tag for per-epoch batch shuffling.
const SHUFFLE_TAG: u64 = 0x53485546;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {got} (this build reads version {expected})")]
    Version { got: u32, expected: u32 },
    #[error("checkpoint config digest mismatch: the file was written for a different model configuration")]
    DigestMismatch,
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint has {0} tensors the model does not declare (first: {1:?})")]
    UnexpectedTensors(usize, String),
    #[error("tensor {name:?}: checkpoint shape {got:?} does not match model shape {expected:?}")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("no gradient supplied for parameter {0:?}")]
    MissingGrad(String),
    #[error("parameter {name:?} has {param} elements but its gradient has {grad}")]
    GradShape {
        name: String,
        param: usize,
        grad: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---- Adam ------------------------------------------------------------------

/// Default Adam hyperparameters (exponential decay rates and the
/// denominator fuzz of the standard update rule).
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam optimizer state: per-parameter moment accumulators keyed by
/// parameter name, plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One optimizer step: `visit` must walk the model's parameters
    /// (e.g. `|f| params.for_each_mut(f)`), and `grads` must hold a
    /// same-length gradient for every visited name.
    ///
    /// Update rule: m ← β1·m + (1−β1)·g; v ← β2·v + (1−β2)·g²; with
    /// bias-corrected m̂, v̂: p ← p − lr·m̂/(√v̂ + ε).
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)),
    ) -> Result<(), TrainError> {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let slots = &mut self.slots;
        let mut err: Option<TrainError> = None;
        visit(&mut |name, tensor| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else {
                err = Some(TrainError::MissingGrad(name.to_string()));
                return;
            };
            if g.len() != tensor.data.len() {
                err = Some(TrainError::GradShape {
                    name: name.to_string(),
                    param: tensor.data.len(),
                    grad: g.len(),
                });
                return;
            }
            let slot = slots.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if slot.m.len() != g.len() {
                err = Some(TrainError::GradShape {
                    name: name.to_string(),
                    param: slot.m.len(),
                    grad: g.len(),
                });
                return;
            }
            for i in 0..g.len() {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

// ---- configuration ---------------------------------------------------------

/// Hyperparameters of the two-stage protocol. [`TrainConfig::full`] is
/// the published schedule; [`TrainConfig::desk`] is the small preset
/// used by the acceptance pipeline (fewer epochs need a larger step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub hrp_epochs: usize,
    pub dpnet_epochs: usize,
    /// Epochs before the HR loss term activates (E_w).
    pub warmup_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Optional global-L2-norm gradient clipping; off by default.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Full-scale schedule: 200 HRP + 600 DPNet epochs, E_w = 300,
    /// λ1 = 1e-4, λ2 = 1e-3, lr = 1e-5, batch 64.
    pub fn full() -> Self {
        Self {
            lr: 1e-5,
            batch: 64,
            hrp_epochs: 200,
            dpnet_epochs: 600,
            warmup_epochs: 300,
            lambda1: 1e-4,
            lambda2: 1e-3,
            seed: 0,
            clip_norm: None,
        }
    }

    /// Desk-scale schedule: 50 + 80 epochs, E_w = 40, lr = 1e-3, and a
    /// smaller batch so the short run still gets enough optimizer steps.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            hrp_epochs: 50,
            dpnet_epochs: 80,
            warmup_epochs: 40,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::InvalidConfig("batch must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "loss weights must be ≥ 0, got λ1 = {}, λ2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(TrainError::InvalidConfig(format!(
                    "clip norm must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            warmup_epochs: self.warmup_epochs,
        }
    }
}

/// One epoch's log row. Loss columns are means over the epoch's
/// training samples; a column belonging to a loss term that was not
/// active that epoch (the HR term during warmup or with λ2 = 0) is
/// exactly 0.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean waveform MSE (BPM² MSE for the HRP stage).
    pub l_mse: f64,
    /// Mean −SI-SDR in dB (0.0 for the HRP stage).
    pub l_sisdr: f64,
    /// Mean |bpm_pred − bpm_label| in BPM; exactly 0.0 while inactive.
    pub l_mae: f64,
    pub val_mse: f64,
    /// Validation HR error in BPM: the regression MAE for HRP, the
    /// peak-detector HR-MAE (with failure penalty) for DPNet.
    pub val_hr_mae: f64,
}

impl EpochLog {
    /// The structured-text form emitted to training logs.
    pub fn line(&self) -> String {
        format!(
            "epoch={} l_mse={:.6e} l_sisdr={:.6e} l_mae={:.6e} val_mse={:.6e} val_hr_mae={:.6e}",
            self.epoch, self.l_mse, self.l_sisdr, self.l_mae, self.val_mse, self.val_hr_mae
        )
    }
}

/// A finished training stage: the best-validation checkpoint and the
/// full per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

// ---- model ↔ checkpoint glue ----------------------------------------------

fn collect_tensors(visit: &dyn Fn(&mut dyn FnMut(&str, &Tensor))) -> Vec<(String, Tensor)> {
    let mut tensors = Vec::new();
    visit(&mut |name, t| tensors.push((name.to_string(), t.clone())));
    tensors
}

/// Snapshot HRP parameters into a checkpoint (digest over its config).
pub fn snapshot_hrp(p: &HRPParams, epoch: usize, val_mse: f64, val_hr_mae: f64) -> Checkpoint {
    Checkpoint {
        digest: config_digest(&p.config),
        epoch: epoch as u32,
        val_mse,
        val_hr_mae,
        tensors: collect_tensors(&|f| p.for_each(f)),
    }
}

/// Snapshot DPNet parameters into a checkpoint (digest over its config).
pub fn snapshot_dpnet(p: &DPNetParams, epoch: usize, val_mse: f64, val_hr_mae: f64) -> Checkpoint {
    Checkpoint {
        digest: config_digest(&p.config),
        epoch: epoch as u32,
        val_mse,
        val_hr_mae,
        tensors: collect_tensors(&|f| p.for_each(f)),
    }
}

fn apply_tensors(
    ckpt: &Checkpoint,
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<(), TrainError> {
    let mut table: BTreeMap<&str, &Tensor> =
        ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err: Option<TrainError> = None;
    visit(&mut |name, dst| {
        if err.is_some() {
            return;
        }
        match table.remove(name) {
            None => err = Some(TrainError::MissingTensor(name.to_string())),
            Some(src) if src.shape != dst.shape => {
                err = Some(TrainError::TensorShape {
                    name: name.to_string(),
                    got: src.shape.clone(),
                    expected: dst.shape.clone(),
                })
            }
            Some(src) => dst.data.copy_from_slice(&src.data),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((&first, _)) = table.iter().next() {
        return Err(TrainError::UnexpectedTensors(table.len(), first.to_string()));
    }
    Ok(())
}

/// Rebuild HRP parameters from a checkpoint written for `config`.
pub fn hrp_from_checkpoint(
    config: HRPConfig,
    ckpt: &Checkpoint,
) -> Result<HRPParams, TrainError> {
    ckpt.verify(&config)?;
    let mut params = HRPParams::init(config, 0)?;
    apply_tensors(ckpt, &mut |f| params.for_each_mut(f))?;
    Ok(params)
}

/// Rebuild DPNet parameters from a checkpoint written for `config`.
pub fn dpnet_from_checkpoint(
    config: DPNetConfig,
    ckpt: &Checkpoint,
) -> Result<DPNetParams, TrainError> {
    ckpt.verify(&config)?;
    let mut params = DPNetParams::init(config, 0)?;
    apply_tensors(ckpt, &mut |f| params.for_each_mut(f))?;
    Ok(params)
}

// ---- shared loop machinery --------------------------------------------------

fn split_indices(store: &SegmentStore) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    let train = store.indices(Split::Train);
    let val = store.indices(Split::Val);
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    Ok((train, val))
}

fn shuffled(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut derive_rng(seed, epoch as u64, SHUFFLE_TAG));
    order
}

/// Adds `sample` into `acc` (which starts empty on the first sample).
fn accumulate(acc: &mut BTreeMap<String, Vec<f64>>, sample: BTreeMap<String, Vec<f64>>) {
    for (name, g) in sample {
        match acc.get_mut(&name) {
            Some(total) => {
                for (t, v) in total.iter_mut().zip(&g) {
                    *t += v;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Scales every gradient by 1/n (batch mean), then applies optional
/// global-norm clipping.
fn finalize_batch_grads(acc: &mut BTreeMap<String, Vec<f64>>, n: usize, clip_norm: Option<f64>) {
    let inv = 1.0 / n as f64;
    for g in acc.values_mut() {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    if let Some(max_norm) = clip_norm {
        let norm = acc
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in acc.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

fn zscored_tensor(xs: &[f64]) -> Tensor {
    let z = zscore(xs);
    let len = z.len();
    Tensor::new(z, &[1, len]).expect("zscore preserves length")
}

// ---- stage one: HRP pretraining ---------------------------------------------

fn hrp_predict(params: &HRPParams, seg: &StoredSegment) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let mut reg = VarRegistry::new();
    let vars = params.bind(&mut tape, &mut reg);
    let x = tape.leaf(&zscored_tensor(&seg.clean));
    let pred = hrp_forward(&mut tape, x, &vars)?;
    Ok(tape.value(pred)[0])
}

fn hrp_validate(params: &HRPParams, store: &SegmentStore, val: &[usize]) -> Result<(f64, f64), TrainError> {
    let mut se = 0.0;
    let mut ae = 0.0;
    for &i in val {
        let seg = &store.segments[i];
        let err = hrp_predict(params, seg)? - seg.bpm_label;
        se += err * err;
        ae += err.abs();
    }
    let n = val.len() as f64;
    Ok((se / n, ae / n))
}

/// Stage one: pretrain HRP on clean segments against their BPM labels
/// with an MSE loss. Returns the lowest-validation-MSE checkpoint and
/// the per-epoch log.
pub fn train_hrp(
    store: &SegmentStore,
    model: HRPConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (train_idx, val_idx) = split_indices(store)?;
    let mut params = HRPParams::init(model, config.seed)?;
    params.set_trainable(true);
    let mut adam = Adam::new(config.lr);
    let mut log = Vec::with_capacity(config.hrp_epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..config.hrp_epochs {
        let order = shuffled(&train_idx, config.seed, epoch);
        let mut epoch_se = 0.0;
        for batch in order.chunks(config.batch) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let seg = &store.segments[i];
                let mut tape = Tape::new();
                let mut reg = VarRegistry::new();
                let vars = params.bind(&mut tape, &mut reg);
                let x = tape.leaf(&zscored_tensor(&seg.clean));
                let pred = hrp_forward(&mut tape, x, &vars)?;
                let diff = tape.add_const(pred, -seg.bpm_label);
                let loss = tape.mul(diff, diff)?;
                epoch_se += tape.value(loss)[0];
                tape.backward(loss)?;
                accumulate(&mut grads, reg.collect_grads(&tape));
            }
            finalize_batch_grads(&mut grads, batch.len(), config.clip_norm);
            adam.step(&grads, &mut |f| params.for_each_mut(f))?;
        }
        let (val_mse, val_mae) = hrp_validate(&params, store, &val_idx)?;
        let row = EpochLog {
            epoch,
            l_mse: epoch_se / train_idx.len() as f64,
            l_sisdr: 0.0,
            l_mae: 0.0,
            val_mse,
            val_hr_mae: val_mae,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().map_or(true, |b| val_mse < b.val_mse) {
            best = Some(snapshot_hrp(&params, epoch, val_mse, val_mae));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("hrp_epochs ≥ 1 yields at least one validation"),
        log,
    })
}

// ---- stage two: DPNet training ----------------------------------------------

fn dpnet_denoise(params: &DPNetParams, noisy: &[f64]) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let mut reg = VarRegistry::new();
    let vars = params.bind(&mut tape, &mut reg);
    let x = tape.leaf(&zscored_tensor(noisy));
    let d = dpnet_forward(&mut tape, x, &vars)?;
    Ok(tape.value(d).to_vec())
}

fn dpnet_validate(
    params: &DPNetParams,
    store: &SegmentStore,
    val: &[usize],
) -> Result<(f64, f64), TrainError> {
    let mut mses = Vec::with_capacity(val.len());
    let mut maes = Vec::new();
    for &i in val {
        let seg = &store.segments[i];
        let denoised = dpnet_denoise(params, &seg.noisy)?;
        let clean_z = zscore(&seg.clean);
        mses.push(metrics::mse(&clean_z, &denoised).map_err(|e| {
            TrainError::InvalidConfig(format!("validation metric failed: {e}"))
        })?);
        match metrics::hr_mae(&clean_z, &denoised, store.fs) {
            metrics::HrMaeOutcome::Value(v) => maes.push(v),
            metrics::HrMaeOutcome::CleanFailed => {}
            metrics::HrMaeOutcome::DenoisedFailed => maes.push(metrics::HR_FAIL_PENALTY),
        }
    }
    let val_mse = mses.iter().sum::<f64>() / mses.len() as f64;
    let val_hr_mae = if maes.is_empty() {
        f64::NAN
    } else {
        maes.iter().sum::<f64>() / maes.len() as f64
    };
    Ok((val_mse, val_hr_mae))
}

/// Stage two: train DPNet on noisy → clean pairs under the staged
/// objective, with `hrp` held frozen (it never enters the optimizer,
/// and its tape leaves are bound without gradient tracking; gradients
/// still flow *through* it into DPNet once the HR term activates).
/// Returns the checkpoint with the lowest validation MSE, ties broken
/// by validation HR-MAE.
pub fn train_dpnet(
    store: &SegmentStore,
    model: DPNetConfig,
    hrp: &HRPParams,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (train_idx, val_idx) = split_indices(store)?;
    let weights = config.loss_weights();
    let mut params = DPNetParams::init(model, config.seed)?;
    params.set_trainable(true);
    let mut frozen_hrp = hrp.clone();
    frozen_hrp.set_trainable(false);
    let mut adam = Adam::new(config.lr);
    let mut log = Vec::with_capacity(config.dpnet_epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..config.dpnet_epochs {
        // The HR branch is evaluated only when its term carries weight,
        // so during warmup the logged MAE is exactly zero by
        // construction, not by rounding.
        let hr_active = epoch >= weights.warmup_epochs && weights.lambda2 > 0.0;
        let order = shuffled(&train_idx, config.seed, epoch);
        let (mut sum_mse, mut sum_sisdr, mut sum_mae) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let seg = &store.segments[i];
                let mut tape = Tape::new();
                let mut reg = VarRegistry::new();
                let vars = params.bind(&mut tape, &mut reg);
                let x = tape.leaf(&zscored_tensor(&seg.noisy));
                let g = tape.leaf(&zscored_tensor(&seg.clean));
                let d = dpnet_forward(&mut tape, x, &vars)?;
                let hr_term = if hr_active {
                    let mut hrp_reg = VarRegistry::new();
                    let hrp_vars = frozen_hrp.bind(&mut tape, &mut hrp_reg);
                    let bpm_pred = hrp_forward(&mut tape, d, &hrp_vars)?;
                    sum_mae += (tape.value(bpm_pred)[0] - seg.bpm_label).abs();
                    Some((bpm_pred, seg.bpm_label))
                } else {
                    None
                };
                let loss = staged_sample_loss(&mut tape, epoch, &weights, d, g, hr_term)?;
                let d_vals = tape.value(d);
                let g_vals = tape.value(g);
                sum_mse += metrics::mse(g_vals, d_vals).expect("same length by construction");
                sum_sisdr -= metrics::si_sdr(d_vals, g_vals).map_err(|e| {
                    TrainError::InvalidConfig(format!("SI-SDR undefined on a training pair: {e}"))
                })?;
                tape.backward(loss)?;
                accumulate(&mut grads, reg.collect_grads(&tape));
            }
            finalize_batch_grads(&mut grads, batch.len(), config.clip_norm);
            adam.step(&grads, &mut |f| params.for_each_mut(f))?;
        }
        let n = train_idx.len() as f64;
        let (val_mse, val_hr_mae) = dpnet_validate(&params, store, &val_idx)?;
        let row = EpochLog {
            epoch,
            l_mse: sum_mse / n,
            l_sisdr: sum_sisdr / n,
            l_mae: if hr_active { sum_mae / n } else { 0.0 },
            val_mse,
            val_hr_mae,
        };
        on_epoch(&row);
        log.push(row);
        let better = best.as_ref().map_or(true, |b| {
            val_mse < b.val_mse || (val_mse == b.val_mse && val_hr_mae < b.val_hr_mae)
        });
        if better {
            best = Some(snapshot_dpnet(&params, epoch, val_mse, val_hr_mae));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("dpnet_epochs ≥ 1 yields at least one validation"),
        log,
    })
}
