//! Two-stage training of the U-Net models and the stacked pipeline.
//!
//! Stage 1 fits a U-Net to a mask target with pixel cross-entropy. Stage 2
//! freezes it and fits the fully connected head to coordinates.

mod losses;
mod optim;
mod pipeline;

pub use losses::{
    boundary_loss_tensor, landmark_loss_tensor, loss_boundary, loss_landmark, loss_unet,
    loss_unet_batch, unet_loss_tensor, BCE_EPS,
};
pub use optim::{Adam, AdamConfig};
pub use pipeline::{
    blackout, boundary_seed, checkpoint_meta, coord_set, fold_entries, landmark_seed,
    load_examples, mask_set, to_network_frame, train_dmsl, train_model, DmslPipeline, Example,
    ModelReport, Prediction, TrainedDmsl,
};

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, StackedModel, UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch: usize,
    /// Epoch budget for stage 1 (and stage 2 unless `epochs_stage2` is set).
    pub epochs: usize,
    pub epochs_stage2: Option<usize>,
    pub patience: usize,
    pub seed: u64,
    pub train_with_predicted_boxes: bool,
    pub unet: UNetConfig,
    pub hidden: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            batch: 16,
            epochs: 100,
            epochs_stage2: None,
            patience: 10,
            seed: 0,
            train_with_predicted_boxes: false,
            unet: UNetConfig::default(),
            hidden: 1024,
        }
    }
}

impl Hyperparams {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let hp: Self = serde_json::from_str(&text)?;
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        self.unet.validate()
    }

    pub fn stage2_epochs(&self) -> usize {
        self.epochs_stage2.unwrap_or(self.epochs)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: Option<usize>,
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
}

pub type LogSink<'a> = &'a mut dyn FnMut(&EpochLog);

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
}

/// Inputs and targets for one stage, as whole-dataset tensors.
#[derive(Debug, Clone)]
pub struct TensorSet {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.inputs.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[u32]) -> Result<(Tensor, Tensor)> {
        let i = Tensor::from_slice(idx, idx.len(), &Device::Cpu)?;
        Ok((self.inputs.index_select(&i, 0)?, self.targets.index_select(&i, 0)?))
    }
}

struct Snapshot(Vec<(Var, Tensor)>);

impl Snapshot {
    fn take(vars: &VarMap) -> Result<Self> {
        vars.all_vars()
            .into_iter()
            .map(|v| {
                let copy = v.as_tensor().copy()?;
                Ok((v, copy))
            })
            .collect::<Result<_>>()
            .map(Snapshot)
    }

    fn restore(&self) -> Result<()> {
        for (var, value) in &self.0 {
            var.set(value)?;
        }
        Ok(())
    }
}

struct Loop<'a> {
    label: &'a str,
    fold: Option<usize>,
    epochs: usize,
    patience: usize,
    batch: usize,
    seed: u64,
}

impl Loop<'_> {
    /// Generic mini-batch loop with early stopping on validation loss (or
    /// training loss when there is no validation set). The best parameters
    /// are restored at the end.
    fn run(
        &self,
        vars: &VarMap,
        opt: &mut Adam,
        train: &TensorSet,
        val: Option<&TensorSet>,
        loss_fn: &dyn Fn(&Tensor) -> Result<Tensor>,
        eval_fn: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
        log: LogSink,
    ) -> Result<StageSummary> {
        if train.is_empty() {
            return Err(Error::Validation(format!("{}: empty training set", self.label)));
        }
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut order: Vec<u32> = (0..train.len() as u32).collect();
        let mut best = (f64::INFINITY, 0usize);
        let mut best_params = Snapshot::take(vars)?;
        let mut last_finite = f64::NAN;
        let mut summary = StageSummary {
            epochs_run: 0,
            best_epoch: 0,
            final_train_loss: f64::NAN,
            best_val_loss: None,
        };
        for epoch in 1..=self.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(self.batch).enumerate() {
                let (x, y) = train.batch(chunk)?;
                let loss = eval_fn(&loss_fn(&x)?, &y)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "{} epoch {epoch} batch {b}: loss {value} (last finite {last_finite})",
                        self.label
                    )));
                }
                last_finite = value;
                opt.backward_step(&loss)?;
                total += value * chunk.len() as f64;
            }
            let train_loss = total / train.len() as f64;
            let val_loss = match val.filter(|v| !v.is_empty()) {
                Some(v) => Some(evaluate(v, self.batch, loss_fn, eval_fn)?),
                None => None,
            };
            summary.epochs_run = epoch;
            summary.final_train_loss = train_loss;
            log(&EpochLog {
                fold: self.fold,
                stage: self.label.to_string(),
                epoch,
                train_loss,
                val_loss,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            let score = val_loss.unwrap_or(train_loss);
            if score < best.0 {
                best = (score, epoch);
                best_params = Snapshot::take(vars)?;
            } else if epoch - best.1 >= self.patience.max(1) {
                break;
            }
        }
        best_params.restore()?;
        summary.best_epoch = best.1;
        summary.best_val_loss = val.filter(|v| !v.is_empty()).map(|_| best.0);
        Ok(summary)
    }
}

/// Mean loss over a set, weighted by batch size.
fn evaluate(
    set: &TensorSet,
    batch: usize,
    loss_fn: &dyn Fn(&Tensor) -> Result<Tensor>,
    eval_fn: &dyn Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<f64> {
    let idx: Vec<u32> = (0..set.len() as u32).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch) {
        let (x, y) = set.batch(chunk)?;
        let pred = loss_fn(&x)?.detach();
        let v = eval_fn(&pred, &y)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += v * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

fn adam(vars: &VarMap, lr: f64) -> Result<Adam> {
    Adam::new(vars.all_vars(), AdamConfig::new(lr))
}

/// Stage 1: fit the U-Net's output map to the target masks.
pub fn train_stage1(
    unet: &UNet,
    train: &TensorSet,
    val: Option<&TensorSet>,
    hp: &Hyperparams,
    label: &str,
    fold: Option<usize>,
    log: LogSink,
) -> Result<StageSummary> {
    let mut opt = adam(unet.vars(), hp.lr_stage1)?;
    Loop {
        label,
        fold,
        epochs: hp.epochs,
        patience: hp.patience,
        batch: hp.batch,
        seed: hp.seed,
    }
    .run(
        unet.vars(),
        &mut opt,
        train,
        val,
        &|x| unet.forward(x),
        &|p, t| unet_loss_tensor(p, t),
        log,
    )
}

/// Frozen U-Net features for every input, `(N, S*S)`.
pub fn unet_features(unet: &UNet, inputs: &Tensor, batch: usize) -> Result<Tensor> {
    let n = inputs.dim(0)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let x = inputs.narrow(0, start, len)?;
        parts.push(unet.forward(&x)?.flatten_from(1)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Summary {
    pub stage: StageSummary,
    pub unet_digest_before: String,
    pub unet_digest_after: String,
}

/// Stage 2: freeze the U-Net and fit the head to coordinates. Only the
/// head's parameters are handed to the optimizer and the U-Net sees no
/// gradient; its digest is checked before returning.
pub fn train_stage2(
    model: &StackedModel,
    train: &TensorSet,
    val: Option<&TensorSet>,
    hp: &Hyperparams,
    label: &str,
    fold: Option<usize>,
    log: LogSink,
) -> Result<Stage2Summary> {
    let before = model.unet.digest()?;
    let featurize = |set: &TensorSet| -> Result<TensorSet> {
        Ok(TensorSet {
            inputs: unet_features(&model.unet, &set.inputs, hp.batch)?,
            targets: set.targets.clone(),
        })
    };
    let train_f = featurize(train)?;
    let val_f = val.map(featurize).transpose()?;
    let mut opt = adam(model.head.vars(), hp.lr_stage2)?;
    let kind = model.kind;
    let stage = Loop {
        label,
        fold,
        epochs: hp.stage2_epochs(),
        patience: hp.patience,
        batch: hp.batch,
        seed: hp.seed.wrapping_add(2),
    }
    .run(
        model.head.vars(),
        &mut opt,
        &train_f,
        val_f.as_ref(),
        &|x| model.head.forward(x),
        &|p, t| coord_loss(kind, p, t),
        log,
    )?;
    let after = model.unet.digest()?;
    if after != before {
        return Err(Error::Divergence(format!("{label}: frozen U-Net parameters changed")));
    }
    Ok(Stage2Summary {
        stage,
        unet_digest_before: before,
        unet_digest_after: after,
    })
}

/// The coordinate loss matching a head kind.
pub fn coord_loss(kind: HeadKind, pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    match kind {
        HeadKind::Boundary => boundary_loss_tensor(pred, truth),
        HeadKind::Landmarks => landmark_loss_tensor(pred, truth),
    }
}
