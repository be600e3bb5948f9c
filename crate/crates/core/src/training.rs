//! Supervised training with on-the-fly affine augmentation, patient-grouped
//! k-fold cross-validation, and TTA-based model selection.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use burn::module::{AutodiffModule, Module};
use burn::optim::adaptor::OptimizerAdaptor;
use burn::optim::{Adam, AdamConfig, GradientsParams, Optimizer};
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::PreparedSample;
use crate::error::{Error, Result};
use crate::geometry::{sample_affine, to_matrix, warp, warp_mask, AffineParams, AffineRangeConfig, Interp};
use crate::grid::{BinMask, Image};
use crate::inference::{image_seed, tta_segment, TtaConfig};
use crate::models::{
    images_to_tensor, EvalModel, ModelCard, ModelConfig, Network, TrainBackend, TrainingProvenance,
};
use crate::objectives::{hard_iou, EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub augmentation: AffineRangeConfig,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Single-model TTA used to score each epoch on the validation set.
    pub validation: TtaConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            augmentation: AffineRangeConfig::default(),
            seed: 0,
            patience: 15,
            validation: TtaConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.model.validate()?;
        self.augmentation.validate()?;
        self.validation.validate()
    }
}

/// Batch loss as a differentiable tensor: mean BCE over all pixels plus the
/// soft-IoU loss averaged over images. `probs` and `targets` are `[b, 1, h, w]`.
pub fn combined_loss_tensor<B: Backend>(probs: Tensor<B, 4>, targets: Tensor<B, 4>) -> Tensor<B, 1> {
    let [b, _, _, _] = probs.dims();
    let p = probs.clamp(EPS, 1.0 - EPS);
    let bce = (targets.clone() * p.clone().log()
        + targets.clone().neg().add_scalar(1.0) * p.clone().neg().add_scalar(1.0).log())
    .mean()
    .neg();
    let p = p.reshape([b as i32, -1]);
    let y = targets.reshape([b as i32, -1]);
    let inter = (p.clone() * y.clone()).sum_dim(1);
    let union = p.sum_dim(1) + y.sum_dim(1) - inter.clone();
    let iou = (inter.add_scalar(EPS) / union.add_scalar(EPS)).mean();
    bce + iou.neg().add_scalar(1.0)
}

/// Warps an image (bilinear) and its mask (nearest) by `params`; the identity
/// passes both through untouched.
pub fn augment_pair(image: &Image, mask: &BinMask, params: &AffineParams) -> Result<(Image, BinMask)> {
    if params.is_identity() {
        return Ok((image.clone(), mask.clone()));
    }
    let m = to_matrix(params, image.height());
    Ok((warp(image, &m, Interp::Bilinear, 0.0)?, warp_mask(mask, &m)?))
}

fn masks_to_tensor(masks: &[BinMask], device: &<TrainBackend as Backend>::Device) -> Tensor<TrainBackend, 4> {
    let (h, w) = masks[0].dims();
    let data: Vec<f32> = masks.iter().flat_map(|m| m.data().iter().map(|&v| f32::from(v))).collect();
    Tensor::from_data(TensorData::new(data, [masks.len(), 1, h, w]), device)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

type Adaptor = OptimizerAdaptor<Adam, Network<TrainBackend>, TrainBackend>;

/// Owns a network in training mode and its optimizer state.
pub struct Trainer {
    config: TrainConfig,
    network: Option<Network<TrainBackend>>,
    optimizer: Adaptor,
    device: <TrainBackend as Backend>::Device,
    steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let device = Default::default();
        let network = Network::<TrainBackend>::build(&config.model, config.seed, &device)?;
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => AdamConfig::new().init(),
        };
        Ok(Self {
            config: config.clone(),
            network: Some(network),
            optimizer,
            device,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn network(&self) -> &Network<TrainBackend> {
        self.network.as_ref().expect("network present between steps")
    }

    /// One optimizer step on an already augmented batch; returns the loss.
    pub fn step(&mut self, images: &[&Image], masks: &[BinMask]) -> Result<f64> {
        let x = images_to_tensor::<TrainBackend>(images, &self.device)?;
        let y = masks_to_tensor(masks, &self.device);
        let network = self.network.take().expect("network present between steps");
        let loss = combined_loss_tensor(network.forward(x), y);
        let value = f64::from(loss.clone().into_scalar());
        if !value.is_finite() {
            self.network = Some(network);
            return Err(Error::Diverged(format!(
                "loss became {value} at step {}",
                self.steps + 1
            )));
        }
        let grads = GradientsParams::from_grads(loss.backward(), &network);
        self.network = Some(self.optimizer.step(self.config.learning_rate, network, grads));
        self.steps += 1;
        Ok(value)
    }

    /// One pass over `train` in a seeded order, each sample freshly augmented.
    /// Returns the per-step losses.
    pub fn epoch(&mut self, train: &[&PreparedSample], epoch: usize) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let params = sample_affine(&mut rng, &self.config.augmentation);
                let (im, m) = augment_pair(&train[i].canvas.image, &train[i].canvas.mask, &params)?;
                images.push(im);
                masks.push(m);
            }
            let refs: Vec<&Image> = images.iter().collect();
            losses.push(self.step(&refs, &masks)?);
        }
        Ok(losses)
    }

    /// Evaluation-mode copy of the current parameters.
    pub fn snapshot(&self, provenance: TrainingProvenance) -> EvalModel {
        let network = self.network();
        let card = ModelCard {
            architecture: self.config.model.architecture(),
            config: self.config.model.clone(),
            seed: self.config.seed,
            parameter_count: network.num_params(),
            provenance,
        };
        EvalModel::new(network.valid(), card)
    }
}

/// Mean TTA hard IoU of `model` on `samples`; each image is seeded from
/// `(config.seed, image id)`.
pub fn tta_validation_iou(model: &EvalModel, samples: &[&PreparedSample], config: &TtaConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("empty validation set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let cfg = config.with_seed(image_seed(config.seed, &s.id));
        let out = tta_segment(model, &s.canvas.image, &cfg)?;
        total += hard_iou(&out.mask, &s.canvas.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Best-epoch model of one training run.
pub struct TrainOutcome {
    pub model: EvalModel,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

/// Trains on `train`, scores every epoch by TTA IoU on `val`, and keeps the
/// best epoch (earliest on ties). Stops after `patience` epochs without gain.
pub fn train_one(config: &TrainConfig, train: &[&PreparedSample], val: &[&PreparedSample]) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut trainer = Trainer::new(config)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(EvalModel, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let losses = trainer.epoch(train, epoch)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        step_losses.extend(losses);
        let model = trainer.snapshot(TrainingProvenance {
            epoch: Some(epoch),
            train_patients: Some(train.iter().map(|s| &s.patient_id).collect::<BTreeSet<_>>().len()),
            ..Default::default()
        });
        let val_iou = tta_validation_iou(&model, val, &config.validation)?;
        log::info!("epoch {epoch}: loss {train_loss:.5}, val IoU {val_iou:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_iou,
        });
        if best.as_ref().map_or(true, |(_, _, b)| val_iou > *b) {
            let mut model = model;
            model.card.provenance.val_iou = Some(val_iou);
            best = Some((model, epoch, val_iou));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_val_iou) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_iou,
        history,
        step_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Random near-equal partition of `patients` into `k` validation sets; the
/// first `n mod k` folds get one extra patient.
pub fn make_folds(patients: &BTreeSet<String>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {k}")));
    }
    if k > patients.len() {
        return Err(Error::Validation(format!(
            "{k} folds requested for {} patients",
            patients.len()
        )));
    }
    let mut order: Vec<&String> = patients.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (patients.len() / k, patients.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let validation: BTreeSet<String> = order[start..start + size].iter().map(|s| (*s).clone()).collect();
        let train = patients.difference(&validation).cloned().collect();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(FoldPlan { folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub val_iou: f64,
    pub best_epoch: usize,
    /// Relative to the run directory.
    pub checkpoint: Option<PathBuf>,
}

/// Marker naming the selected fold, written as `definitive.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefinitiveMarker {
    pub architecture: String,
    pub fold: usize,
    pub val_iou: f64,
    pub checkpoint: PathBuf,
}

pub const DEFINITIVE_FILE: &str = "definitive.json";

pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldSummary>,
    pub definitive_fold: usize,
    pub definitive: EvalModel,
}

fn write_epoch_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Trains one model per fold, persists every fold (when `out_dir` is given)
/// and returns the fold with the highest TTA validation IoU as definitive.
pub fn cross_validate(
    config: &TrainConfig,
    samples: &[PreparedSample],
    k: usize,
    out_dir: Option<&Path>,
) -> Result<CvOutcome> {
    config.validate()?;
    let patients: BTreeSet<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let plan = make_folds(&patients, k, config.seed)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&path, e))?;
    }
    let mut summaries = Vec::with_capacity(k);
    let mut best: Option<(usize, f64, EvalModel)> = None;
    for (i, fold) in plan.folds.iter().enumerate() {
        let run = || -> Result<(FoldSummary, EvalModel)> {
            let train: Vec<&PreparedSample> = samples.iter().filter(|s| fold.train.contains(&s.patient_id)).collect();
            let val: Vec<&PreparedSample> =
                samples.iter().filter(|s| fold.validation.contains(&s.patient_id)).collect();
            let fold_config = TrainConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            let mut outcome = train_one(&fold_config, &train, &val)?;
            outcome.model.card.provenance.fold = Some(i);
            let checkpoint = match out_dir {
                Some(dir) => {
                    let fold_dir = dir.join(format!("fold{i}"));
                    let (blob, _) = outcome.model.save(&fold_dir, "checkpoint")?;
                    write_epoch_csv(&fold_dir.join("metrics.csv"), &outcome.history)?;
                    Some(blob.strip_prefix(dir).unwrap_or(&blob).to_path_buf())
                }
                None => None,
            };
            Ok((
                FoldSummary {
                    fold: i,
                    val_iou: outcome.best_val_iou,
                    best_epoch: outcome.best_epoch,
                    checkpoint,
                },
                outcome.model,
            ))
        };
        let (summary, model) = run().map_err(|e| Error::Fold {
            fold: i,
            source: Box::new(e),
        })?;
        log::info!("fold {i}: val IoU {:.4} at epoch {}", summary.val_iou, summary.best_epoch);
        if best.as_ref().map_or(true, |(_, b, _)| summary.val_iou > *b) {
            best = Some((i, summary.val_iou, model));
        }
        summaries.push(summary);
    }
    let (definitive_fold, _, definitive) = best.expect("k >= 2 folds trained");
    if let Some(dir) = out_dir {
        let s = &summaries[definitive_fold];
        let marker = DefinitiveMarker {
            architecture: config.model.architecture().tag().to_owned(),
            fold: definitive_fold,
            val_iou: s.val_iou,
            checkpoint: s.checkpoint.clone().expect("persisted"),
        };
        let path = dir.join(DEFINITIVE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&marker)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("folds.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summaries)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(CvOutcome {
        plan,
        folds: summaries,
        definitive_fold,
        definitive,
    })
}

/// Reads `definitive.json` from a training run directory and loads its checkpoint.
pub fn load_definitive(run_dir: &Path) -> Result<(DefinitiveMarker, EvalModel)> {
    let path = run_dir.join(DEFINITIVE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let marker: DefinitiveMarker = serde_json::from_str(&text)?;
    let checkpoint = if marker.checkpoint.is_absolute() {
        marker.checkpoint.clone()
    } else {
        run_dir.join(&marker.checkpoint)
    };
    let model = EvalModel::load(&checkpoint)?;
    Ok((marker, model))
}
