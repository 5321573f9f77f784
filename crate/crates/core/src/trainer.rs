//! Supervised training: Adam under the combined objective, exponential
//! learning-rate decay, per-epoch checkpoints and a CSV log.
//!
//! At the end of every epoch the whole training state (parameters,
//! batch-norm statistics, Adam moments) is rounded to `f32`, the precision
//! of the checkpoint container. A run resumed from a checkpoint therefore
//! continues exactly as the uninterrupted run would have.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{derive_seed, read_container, sha256_hex, write_atomic, Container, Dataset, NamedTensor, WindowConfig, WindowSet};
use crate::diff::{Tape, Tensor};
use crate::encoder::{EncoderConfig, EncoderModel, ForwardOptions, Mode};
use crate::evaluator::{evaluate_clips, Protocols};
use crate::losses::{total_loss, Cameras, LossBreakdown, LossWeights};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,loss_total,loss_pose3d,loss_depth,loss_kc,loss_reproj,val_mpjpe_mm,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub augment_flip: bool,
    /// Frame step between training windows.
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 0.001,
            lr_decay: 0.95,
            batch_size: 128,
            seed: 0,
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            adam: AdamConfig::default(),
            augment_flip: true,
            stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return bad("batch_size and stride must be at least 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        self.weights.validate()?;
        self.encoder.residual_connections()?;
        Ok(())
    }

    /// `lr0 · decay^epoch`, epochs counted from 0.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    fn same_run_as(&self, other: &TrainConfig) -> bool {
        TrainConfig {
            epochs: other.epochs,
            ..self.clone()
        } == *other
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[NamedTensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite.
pub fn adam_step(params: &mut [NamedTensor], grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if g.shape() != p.tensor.shape() || m.shape() != p.tensor.shape() {
            return Err(Error::Contract(format!(
                "adam_step: gradient {:?} does not match parameter {:?} {:?}",
                g.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Domain(format!("non-finite gradient for parameter {:?}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pk) in p.tensor.data_mut().iter_mut().enumerate() {
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *pk -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: String,
    pub train_config: TrainConfig,
    pub epochs_completed: usize,
    /// Learning rate used in the last completed epoch.
    pub lr: f64,
    pub seed: u64,
    pub adam_step: u64,
    pub initial_val_mpjpe_mm: f64,
    pub val_mpjpe_mm: Vec<f64>,
    pub best_val_mpjpe_mm: f64,
    pub best_epoch: Option<usize>,
    pub dataset_hash: String,
}

/// Model, optimizer state and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = self.model.state();
        for (p, (m, v)) in self.model.parameters().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push(NamedTensor::new(format!("adam.m.{}", p.name), m.clone()));
            tensors.push(NamedTensor::new(format!("adam.v.{}", p.name), v.clone()));
        }
        Ok(Container {
            tensors,
            meta: serde_json::to_value(&self.meta)?,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Contract(format!("container is not a checkpoint: {e}")))?;
        if meta.kind != "checkpoint" {
            return Err(Error::Contract(format!("container kind is {:?}, expected \"checkpoint\"", meta.kind)));
        }
        let mut model = EncoderModel::from_state(meta.train_config.encoder, &c.tensors)?;
        model.set_mode(Mode::Eval);
        let mut adam = AdamState::new(model.parameters());
        adam.step = meta.adam_step;
        for (i, p) in model.parameters().iter().enumerate() {
            for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = c.require(&format!("adam.{prefix}.{}", p.name))?;
                if t.shape() != p.tensor.shape() {
                    return Err(Error::Contract(format!("Adam moment for {:?} has the wrong shape", p.name)));
                }
                *slot = t.clone();
            }
        }
        Ok(Self { model, adam, meta })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.encode()?))
    }
}

/// Where training writes its artifacts; everything is optional.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    /// Latest checkpoint, rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Best-by-validation checkpoint.
    pub best_checkpoint: Option<PathBuf>,
    /// CSV log; rows are appended, the header is written when the file is new.
    pub log: Option<PathBuf>,
    /// Test hook: poison the loss at `(epoch, batch)`.
    pub inject_nan_at: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub val_mpjpe_mm: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, l.total, l.pose3d_mpjpe, l.depth_wmpjpe, l.kinematic, l.reproj_mpjpe, self.val_mpjpe_mm, self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final model in eval mode.
    pub model: EncoderModel,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn canonicalize(model: &mut EncoderModel, adam: &mut AdamState) -> Result<()> {
    let mut state = model.state();
    state.iter_mut().for_each(|t| round_f32(&mut t.tensor));
    *model = EncoderModel::from_state(*model.config(), &state)?;
    adam.m.iter_mut().chain(adam.v.iter_mut()).for_each(round_f32);
    Ok(())
}

/// Root-relative Protocol 1 on the dataset's test split, millimeters.
pub fn validation_mpjpe(model: &EncoderModel, data: &Dataset) -> Result<f64> {
    let test = data.test_clips();
    if test.is_empty() {
        return Err(Error::Contract("dataset has no test clips for validation".into()));
    }
    let report = evaluate_clips(model, &test, &data.skeleton, Protocols::One, true)?;
    Ok(report.average.mpjpe_mm.expect("protocol 1 requested"))
}

fn append_log(path: &Path, rows: &[String]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the dataset's training split, validating on its test split
/// after every epoch. With `resume`, continues from the checkpoint's
/// epoch count up to `config.epochs`.
pub fn train(data: &Dataset, config: &TrainConfig, io: &TrainIo, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    if config.encoder.num_joints != data.skeleton.num_joints() {
        return Err(Error::Config(format!(
            "encoder expects {} joints, dataset skeleton has {}",
            config.encoder.num_joints,
            data.skeleton.num_joints()
        )));
    }
    let dataset_hash = data.hash()?;
    let train_clips = data.train_clips();
    let windows = WindowSet::new(
        &train_clips,
        &data.skeleton,
        WindowConfig {
            window: config.encoder.window,
            stride: config.stride,
            augment_flip: config.augment_flip,
            outputs: 2,
        },
    )?;
    if windows.is_empty() {
        return Err(Error::Contract("training split produced no windows".into()));
    }

    let (mut model, mut adam, mut meta) = match resume {
        Some(ck) => {
            if !ck.meta.train_config.same_run_as(config) {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different configuration (only epochs may change)".into(),
                ));
            }
            if ck.meta.dataset_hash != dataset_hash {
                return Err(Error::Config("resume checkpoint was trained on a different dataset".into()));
            }
            if ck.meta.epochs_completed >= config.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already completed {} of {} epochs",
                    ck.meta.epochs_completed, config.epochs
                )));
            }
            let mut meta = ck.meta;
            meta.train_config = config.clone();
            (ck.model, ck.adam, meta)
        }
        None => {
            let mut model = EncoderModel::build(config.encoder, derive_seed(config.seed, &[0xe0]))?;
            let mut adam = AdamState::new(model.parameters());
            canonicalize(&mut model, &mut adam)?;
            model.set_mode(Mode::Eval);
            let initial = validation_mpjpe(&model, data)?;
            let meta = CheckpointMeta {
                kind: "checkpoint".into(),
                train_config: config.clone(),
                epochs_completed: 0,
                lr: config.lr0,
                seed: config.seed,
                adam_step: 0,
                initial_val_mpjpe_mm: initial,
                val_mpjpe_mm: Vec::new(),
                best_val_mpjpe_mm: initial,
                best_epoch: None,
                dataset_hash,
            };
            (model, adam, meta)
        }
    };
    let mut best = Checkpoint {
        model: model.clone(),
        adam: adam.clone(),
        meta: meta.clone(),
    };
    if let Some(path) = io.best_checkpoint.as_deref().filter(|p| p.exists() && meta.epochs_completed > 0) {
        if let Ok(b) = Checkpoint::read(path) {
            best = b;
        }
    }

    let mut history = Vec::new();
    for epoch in meta.epochs_completed..config.epochs {
        let started = Instant::now();
        let lr = config.lr(epoch);
        model.set_mode(Mode::Train);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64]));
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        for (bi, batch) in windows.batches(config.batch_size, derive_seed(config.seed, &[1, epoch as u64])).enumerate() {
            let batch = batch?;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let pred = model.forward_batch_strided(&mut tape, &vars, &batch.inputs, ForwardOptions::TRAIN, &mut dropout_rng)?;
            let loss = total_loss(
                &mut tape,
                pred,
                &batch.targets,
                Cameras::PerSample(&batch.cameras),
                &batch.input2d,
                &data.skeleton,
                &config.weights,
            )?;
            let mut total = loss.breakdown.total;
            if io.inject_nan_at == Some((epoch, bi)) {
                total = f64::NAN;
            }
            if !total.is_finite() {
                return Err(Error::NumericalAbort {
                    epoch,
                    batch: bi,
                    detail: format!("loss is {total}"),
                });
            }
            tape.backward(loss.total)?;
            let grads: Vec<Tensor> = vars
                .0
                .iter()
                .zip(model.parameters())
                .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
                .collect();
            adam_step(model.parameters_mut(), &grads, &mut adam, lr, &config.adam).map_err(|e| match e {
                Error::Domain(detail) => Error::NumericalAbort { epoch, batch: bi, detail },
                other => other,
            })?;
            sums.accumulate(&loss.breakdown.scaled(batch.len() as f64));
            seen += batch.len();
        }
        canonicalize(&mut model, &mut adam)?;
        model.set_mode(Mode::Eval);
        let val = validation_mpjpe(&model, data)?;
        if !val.is_finite() {
            return Err(Error::NumericalAbort {
                epoch,
                batch: 0,
                detail: format!("validation MPJPE is {val}"),
            });
        }
        meta.epochs_completed = epoch + 1;
        meta.lr = lr;
        meta.adam_step = adam.step;
        meta.val_mpjpe_mm.push(val);
        let improved = val < meta.best_val_mpjpe_mm || meta.best_epoch.is_none();
        if improved {
            meta.best_val_mpjpe_mm = val;
            meta.best_epoch = Some(epoch);
        }
        let last = Checkpoint {
            model: model.clone(),
            adam: adam.clone(),
            meta: meta.clone(),
        };
        if improved {
            best = last.clone();
        }
        if let Some(p) = &io.checkpoint {
            last.write(p)?;
        }
        if let (Some(p), true) = (&io.best_checkpoint, improved) {
            best.write(p)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            losses: sums.scaled(1.0 / seen as f64),
            val_mpjpe_mm: val,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.csv_row());
        if let Some(p) = &io.log {
            append_log(p, &[record.csv_row()])?;
        }
        history.push(record);
    }
    let last = Checkpoint {
        model: model.clone(),
        adam,
        meta,
    };
    Ok(TrainOutcome {
        model,
        last,
        best,
        history,
    })
}
