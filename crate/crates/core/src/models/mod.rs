//! Segmentation backbones behind one predictor interface.

pub mod kernels;
pub mod layers;
pub mod segnext;
pub mod unet;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use burn::backend::{Autodiff, NdArray};
use burn::module::{AutodiffModule, Module};
use burn::record::{BinFileRecorder, FullPrecisionSettings};
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, ProbMap};
use crate::STANDARD_SIDE;
use layers::{squashed_sigmoid, ParamInit};
pub use segnext::{SegNeXt, SegNeXtConfig, SegNeXtTrace};
pub use unet::{UNet, UNetConfig};

/// Backend used for evaluation-mode inference.
pub type InferBackend = NdArray<f32>;
/// Backend used for training (gradient tracking on top of [`InferBackend`]).
pub type TrainBackend = Autodiff<InferBackend>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    SegnextS,
}

impl Architecture {
    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Unet => "unet",
            Architecture::SegnextS => "segnext_s",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Architecture::Unet),
            "segnext_s" | "segnext" => Ok(Architecture::SegnextS),
            other => Err(Error::Validation(format!(
                "unknown architecture {other:?} (expected unet or segnext_s)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelConfig {
    Unet(UNetConfig),
    SegnextS(SegNeXtConfig),
}

impl ModelConfig {
    pub fn default_for(arch: Architecture) -> Self {
        match arch {
            Architecture::Unet => ModelConfig::Unet(UNetConfig::default()),
            Architecture::SegnextS => ModelConfig::SegnextS(SegNeXtConfig::default()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::Unet(_) => Architecture::Unet,
            ModelConfig::SegnextS(_) => Architecture::SegnextS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Unet(c) => c.validate(),
            ModelConfig::SegnextS(c) => c.validate(),
        }
    }
}

#[derive(Module, Debug)]
pub enum Network<B: Backend> {
    Unet(UNet<B>),
    SegnextS(SegNeXt<B>),
}

// Serializes construction so concurrent builds never interleave any global
// backend state.
static BUILD_LOCK: Mutex<()> = Mutex::new(());

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn build_unet<B: Backend>(config: &UNetConfig, seed: u64, device: &B::Device) -> Result<UNet<B>> {
    config.validate()?;
    let _guard = BUILD_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut init = ParamInit::new(init_rng(seed), device);
    Ok(UNet::new(config, &mut init))
}

pub fn build_segnext_s<B: Backend>(
    config: &SegNeXtConfig,
    seed: u64,
    device: &B::Device,
) -> Result<SegNeXt<B>> {
    config.validate()?;
    let _guard = BUILD_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut init = ParamInit::new(init_rng(seed), device);
    Ok(SegNeXt::new(config, &mut init))
}

impl<B: Backend> Network<B> {
    pub fn build(config: &ModelConfig, seed: u64, device: &B::Device) -> Result<Self> {
        Ok(match config {
            ModelConfig::Unet(c) => Network::Unet(build_unet(c, seed, device)?),
            ModelConfig::SegnextS(c) => Network::SegnextS(build_segnext_s(c, seed, device)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Network::Unet(_) => Architecture::Unet,
            Network::SegnextS(_) => Architecture::SegnextS,
        }
    }

    pub fn forward_logits(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        match self {
            Network::Unet(m) => m.forward_logits(x),
            Network::SegnextS(m) => m.forward_logits(x),
        }
    }

    /// `[b, 1, h, w]` images in `[0, 1]` to `[b, 1, h, w]` probabilities in `(0, 1)`.
    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        squashed_sigmoid(self.forward_logits(x))
    }
}

/// Stacks equally sized single-channel images into a `[n, 1, h, w]` tensor.
pub fn images_to_tensor<B: Backend>(images: &[&Image], device: &B::Device) -> Result<Tensor<B, 4>> {
    let (h, w) = images
        .first()
        .map(|im| im.dims())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} with {h}x{w}",
                im.height(),
                im.width()
            )));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::from_data(
        TensorData::new(data, [images.len(), 1, h, w]),
        device,
    ))
}

pub fn tensor_to_maps<B: Backend>(t: Tensor<B, 4>) -> Result<Vec<ProbMap>> {
    let [n, c, h, w] = t.dims();
    if c != 1 {
        return Err(Error::Shape(format!("expected one output channel, got {c}")));
    }
    let values: Vec<f32> = t
        .into_data()
        .convert::<f32>()
        .to_vec()
        .map_err(|e| Error::Shape(format!("{e:?}")))?;
    values
        .chunks(h * w)
        .take(n)
        .map(|chunk| ProbMap::from_vec(h, w, chunk.to_vec()))
        .collect()
}

/// Evaluation-mode segmenter: standardized images in, probability maps out.
pub trait Predictor: Send + Sync {
    fn architecture(&self) -> Architecture;

    /// Every image must be `STANDARD_SIDE × STANDARD_SIDE`.
    fn predict(&self, batch: &[&Image]) -> Result<Vec<ProbMap>>;
}

pub(crate) fn check_standard(batch: &[&Image]) -> Result<()> {
    for im in batch {
        if im.dims() != (STANDARD_SIDE, STANDARD_SIDE) {
            return Err(Error::Shape(format!(
                "model input must be {STANDARD_SIDE}x{STANDARD_SIDE}, got {}x{} (no implicit resizing)",
                im.height(),
                im.width()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub fold: Option<usize>,
    pub epoch: Option<usize>,
    pub val_iou: Option<f64>,
    pub train_patients: Option<usize>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub seed: u64,
    pub parameter_count: usize,
    #[serde(default)]
    pub provenance: TrainingProvenance,
}

/// A network in evaluation mode together with its model card.
///
/// Burn modules are `Send` but not `Sync`; the network sits behind a mutex and
/// each forward call works on a cheap clone (parameter storage is shared), so
/// concurrent predictions do not serialize on the lock.
#[derive(Debug)]
pub struct EvalModel {
    network: Mutex<Network<InferBackend>>,
    pub card: ModelCard,
}

impl EvalModel {
    pub fn new(network: Network<InferBackend>, card: ModelCard) -> Self {
        Self {
            network: Mutex::new(network),
            card,
        }
    }

    pub fn network(&self) -> Network<InferBackend> {
        self.network.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// A freshly initialized (untrained) model.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::<InferBackend>::build(config, seed, &Default::default())?;
        let card = ModelCard {
            architecture: config.architecture(),
            config: config.clone(),
            seed,
            parameter_count: network.num_params(),
            provenance: TrainingProvenance::default(),
        };
        Ok(Self::new(network, card))
    }

    pub fn from_training(network: &Network<TrainBackend>, card: ModelCard) -> Self {
        Self::new(network.valid(), card)
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.json` (model card).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = dir.join(format!("{stem}.bin"));
        let card_path = dir.join(format!("{stem}.json"));
        self.network()
            .save_file(blob.with_extension(""), &recorder())
            .map_err(|e| Error::Checkpoint(format!("saving {}: {e}", blob.display())))?;
        let json = serde_json::to_string_pretty(&self.card)?;
        std::fs::write(&card_path, json).map_err(|e| Error::io(&card_path, e))?;
        Ok((blob, card_path))
    }

    /// Loads a checkpoint written by [`EvalModel::save`]; `path` may name
    /// either the `.bin` blob or the `.json` card.
    pub fn load(path: &Path) -> Result<Self> {
        let card_path = path.with_extension("json");
        let blob = path.with_extension("bin");
        let text = std::fs::read_to_string(&card_path).map_err(|e| Error::io(&card_path, e))?;
        let card: ModelCard = serde_json::from_str(&text)?;
        if card.architecture != card.config.architecture() {
            return Err(Error::Checkpoint(format!(
                "model card {} declares {} but carries a {} config",
                card_path.display(),
                card.architecture,
                card.config.architecture()
            )));
        }
        let device = Default::default();
        let network = Network::<InferBackend>::build(&card.config, card.seed, &device)?;
        if network.num_params() != card.parameter_count {
            return Err(Error::Checkpoint(format!(
                "model card {} config implies {} parameters, card records {}",
                card_path.display(),
                network.num_params(),
                card.parameter_count
            )));
        }
        let network = network
            .load_file(blob.with_extension(""), &recorder(), &device)
            .map_err(|e| Error::Checkpoint(format!("loading {}: {e}", blob.display())))?;
        if network.num_params() != card.parameter_count {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model card ({})",
                network.num_params(),
                card.parameter_count
            )));
        }
        Ok(Self::new(network, card))
    }
}

fn recorder() -> BinFileRecorder<FullPrecisionSettings> {
    BinFileRecorder::new()
}

/// Images per forward call inside [`EvalModel::predict`].
const PREDICT_CHUNK: usize = 4;

impl Predictor for EvalModel {
    fn architecture(&self) -> Architecture {
        self.card.architecture
    }

    fn predict(&self, batch: &[&Image]) -> Result<Vec<ProbMap>> {
        check_standard(batch)?;
        let device = Default::default();
        let network = self.network();
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(PREDICT_CHUNK) {
            let x = images_to_tensor::<InferBackend>(chunk, &device)?;
            out.extend(tensor_to_maps(network.forward(x))?);
        }
        Ok(out)
    }
}
