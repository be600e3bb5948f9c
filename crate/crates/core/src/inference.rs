//! Test-time augmentation for one model and the two-model union ensemble.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{save_mask_png, save_prob_png, PreparedSample};
use crate::error::{Error, Result};
use crate::geometry::{
    invert, sample_affine, to_matrix, warp, AffineParams, AffineRangeConfig, Interp,
};
use crate::grid::{BinMask, Image, ProbMap};
use crate::models::Predictor;

/// How inverse-warped variant maps are reduced to one map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Divide by the number of variants; out-of-view pixels count as 0.
    #[default]
    Uniform,
    /// Divide by the number of variants that kept each pixel in view.
    Coverage,
}

/// How a model's variants turn into its binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// Threshold the averaged map.
    #[default]
    ThresholdThenUnion,
    /// Threshold every variant and take the union across variants.
    PerVariantUnion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    /// Variants per model.
    pub n_variants: usize,
    pub ranges: AffineRangeConfig,
    /// Variant 0 of every model is the identity transform.
    pub include_identity: bool,
    pub threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub combiner: Combiner,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            n_variants: 100,
            ranges: AffineRangeConfig::default(),
            include_identity: true,
            threshold: 0.5,
            seed: 0,
            averaging: Averaging::Uniform,
            combiner: Combiner::ThresholdThenUnion,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_variants == 0 {
            return Err(Error::Validation("TTA needs at least one variant".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Validation(format!(
                "threshold must lie strictly inside (0, 1), got {}",
                self.threshold
            )));
        }
        self.ranges.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Draws `n_models · n_variants` transforms from one stream seeded by
/// `config.seed`; block `m` holds model `m`'s variants.
pub fn sample_variants(config: &TtaConfig, n_models: usize) -> Vec<AffineParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_variants;
    (0..n_models * n)
        .map(|i| {
            if config.include_identity && i % n == 0 {
                AffineParams::IDENTITY
            } else {
                sample_affine(&mut rng, &config.ranges)
            }
        })
        .collect()
}

/// Images per `Predictor::predict` call during TTA.
const VARIANT_CHUNK: usize = 8;

/// Runs `model` on every transformed copy of `image` and maps each prediction
/// back to the input frame (bilinear, fill 0). Identity variants skip both warps.
pub fn inverse_warped_predictions(
    model: &dyn Predictor,
    image: &Image,
    transforms: &[AffineParams],
) -> Result<Vec<ProbMap>> {
    let side = image.height();
    let matrices = transforms
        .iter()
        .map(|t| {
            let m = to_matrix(t, side);
            Ok((m, invert(&m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(transforms.len());
    for (chunk_t, chunk_m) in transforms.chunks(VARIANT_CHUNK).zip(matrices.chunks(VARIANT_CHUNK)) {
        let warped = chunk_t
            .iter()
            .zip(chunk_m)
            .map(|(t, (m, _))| {
                if t.is_identity() {
                    Ok(image.clone())
                } else {
                    warp(image, m, Interp::Bilinear, 0.0)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = warped.iter().collect();
        let preds = model.predict(&refs)?;
        if preds.len() != refs.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} maps for {} inputs",
                preds.len(),
                refs.len()
            )));
        }
        for ((t, (_, inv)), p) in chunk_t.iter().zip(chunk_m).zip(preds) {
            out.push(if t.is_identity() {
                p
            } else {
                warp(&p, inv, Interp::Bilinear, 0.0)?
            });
        }
    }
    Ok(out)
}

/// Fraction of each pixel that stays in view through a forward and inverse warp.
fn coverage(side: usize, transforms: &[AffineParams]) -> Result<Vec<f64>> {
    let ones = Image::filled(side, side, 1.0);
    let mut acc = vec![0.0f64; side * side];
    for t in transforms {
        if t.is_identity() {
            acc.iter_mut().for_each(|a| *a += 1.0);
            continue;
        }
        let m = to_matrix(t, side);
        let back = warp(&warp(&ones, &m, Interp::Bilinear, 0.0)?, &invert(&m)?, Interp::Bilinear, 0.0)?;
        for (a, &v) in acc.iter_mut().zip(back.data()) {
            *a += f64::from(v);
        }
    }
    Ok(acc)
}

/// Reduces variant maps in list order with f64 accumulation.
pub fn average_maps(maps: &[ProbMap], averaging: Averaging, transforms: &[AffineParams]) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("no variant maps to average".into()))?;
    let (h, w) = first.dims();
    let mut sum = vec![0.0f64; h * w];
    for m in maps {
        first.ensure_same_dims(m, "variant maps")?;
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += f64::from(v);
        }
    }
    let values: Vec<f32> = match averaging {
        Averaging::Uniform => {
            let n = maps.len() as f64;
            sum.into_iter().map(|s| (s / n) as f32).collect()
        }
        Averaging::Coverage => {
            let cov = coverage(h, transforms)?;
            sum.into_iter()
                .zip(cov)
                .map(|(s, c)| if c > 1e-9 { (s / c).min(1.0) as f32 } else { 0.0 })
                .collect()
        }
    };
    ProbMap::from_vec(h, w, values)
}

/// One model's TTA result.
#[derive(Clone, Debug, PartialEq)]
pub struct TtaOutput {
    pub prob: ProbMap,
    pub mask: BinMask,
}

/// TTA over an explicit transform list.
pub fn tta_with_transforms(
    model: &dyn Predictor,
    image: &Image,
    transforms: &[AffineParams],
    config: &TtaConfig,
) -> Result<TtaOutput> {
    if transforms.is_empty() {
        return Err(Error::Validation("TTA needs at least one variant".into()));
    }
    let maps = inverse_warped_predictions(model, image, transforms)?;
    let prob = average_maps(&maps, config.averaging, transforms)?;
    let mask = match config.combiner {
        Combiner::ThresholdThenUnion => prob.threshold(config.threshold),
        Combiner::PerVariantUnion => {
            let mut mask = BinMask::filled(image.height(), image.width(), 0);
            for m in &maps {
                mask = mask.union(&m.threshold(config.threshold))?;
            }
            mask
        }
    };
    Ok(TtaOutput { prob, mask })
}

/// Averaged inverse-warped prediction of one model over `config.n_variants`
/// seeded transforms.
pub fn tta_predict(model: &dyn Predictor, image: &Image, config: &TtaConfig) -> Result<ProbMap> {
    config.validate()?;
    let transforms = sample_variants(config, 1);
    Ok(tta_with_transforms(model, image, &transforms, config)?.prob)
}

/// [`tta_predict`] plus the thresholded mask.
pub fn tta_segment(model: &dyn Predictor, image: &Image, config: &TtaConfig) -> Result<TtaOutput> {
    config.validate()?;
    let transforms = sample_variants(config, 1);
    tta_with_transforms(model, image, &transforms, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub final_mask: BinMask,
    /// Averaged maps, U-Net first.
    pub prob_maps: [ProbMap; 2],
    pub masks: [BinMask; 2],
    /// All `2 · n_variants` transforms; the first half went to the U-Net.
    pub transforms: Vec<AffineParams>,
    pub seed: u64,
}

/// Two-model ensemble: each model averages its share of the transforms, is
/// thresholded, and the binary masks are unioned.
pub fn planet_s_predict(
    unet: &dyn Predictor,
    segnext: &dyn Predictor,
    image: &Image,
    config: &TtaConfig,
) -> Result<EnsemblePrediction> {
    config.validate()?;
    let transforms = sample_variants(config, 2);
    let (first, second) = transforms.split_at(config.n_variants);
    let a = tta_with_transforms(unet, image, first, config)?;
    let b = tta_with_transforms(segnext, image, second, config)?;
    Ok(EnsemblePrediction {
        final_mask: a.mask.union(&b.mask)?,
        prob_maps: [a.prob, b.prob],
        masks: [a.mask, b.mask],
        transforms,
        seed: config.seed,
    })
}

/// Seed for one image: the first 8 bytes of `sha256(root_seed ‖ image_id)`.
pub fn image_seed(root_seed: u64, image_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn per_image<T: Send>(
    samples: &[PreparedSample],
    f: impl Fn(&PreparedSample) -> Result<T> + Sync,
) -> Result<Vec<(String, T)>> {
    samples
        .par_iter()
        .map(|s| {
            f(s).map(|v| (s.id.clone(), v)).map_err(|e| Error::Prediction {
                id: s.id.clone(),
                source: Box::new(e),
            })
        })
        .collect()
}

/// Ensemble prediction for every sample, in input order. Each image uses the
/// seed derived from `(config.seed, image id)`.
pub fn predict_dataset(
    unet: &dyn Predictor,
    segnext: &dyn Predictor,
    samples: &[PreparedSample],
    config: &TtaConfig,
) -> Result<Vec<(String, EnsemblePrediction)>> {
    config.validate()?;
    per_image(samples, |s| {
        let cfg = config.with_seed(image_seed(config.seed, &s.id));
        planet_s_predict(unet, segnext, &s.canvas.image, &cfg)
    })
}

/// Single-model TTA for every sample, seeded like [`predict_dataset`].
pub fn tta_dataset(
    model: &dyn Predictor,
    samples: &[PreparedSample],
    config: &TtaConfig,
) -> Result<Vec<(String, TtaOutput)>> {
    config.validate()?;
    per_image(samples, |s| {
        let cfg = config.with_seed(image_seed(config.seed, &s.id));
        tta_segment(model, &s.canvas.image, &cfg)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub image_id: String,
    pub seed: u64,
    pub threshold: f64,
    pub n_variants: usize,
    pub unet_transforms: Vec<AffineParams>,
    pub segnext_transforms: Vec<AffineParams>,
    pub unet_mask_area: usize,
    pub segnext_mask_area: usize,
    pub final_mask_area: usize,
}

impl PredictionSidecar {
    pub fn new(image_id: &str, pred: &EnsemblePrediction, config: &TtaConfig) -> Self {
        let (u, s) = pred.transforms.split_at(pred.transforms.len() / 2);
        Self {
            image_id: image_id.to_owned(),
            seed: pred.seed,
            threshold: config.threshold,
            n_variants: config.n_variants,
            unet_transforms: u.to_vec(),
            segnext_transforms: s.to_vec(),
            unet_mask_area: pred.masks[0].area(),
            segnext_mask_area: pred.masks[1].area(),
            final_mask_area: pred.final_mask.area(),
        }
    }
}

/// Writes `<id>_mask.png`, `<id>_prob_unet.png`, `<id>_prob_segnext_s.png` and
/// `<id>.json` under `dir` (ids may contain `/`). Returns the written paths.
pub fn save_prediction(
    dir: &Path,
    image_id: &str,
    pred: &EnsemblePrediction,
    config: &TtaConfig,
) -> Result<Vec<PathBuf>> {
    let base = dir.join(image_id);
    if let Some(parent) = base.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let with = |suffix: &str| {
        let mut s = base.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    let mask = with("_mask.png");
    let prob_u = with("_prob_unet.png");
    let prob_s = with("_prob_segnext_s.png");
    let sidecar = with(".json");
    save_mask_png(&pred.final_mask, &mask)?;
    save_prob_png(&pred.prob_maps[0], &prob_u)?;
    save_prob_png(&pred.prob_maps[1], &prob_s)?;
    let json = serde_json::to_string_pretty(&PredictionSidecar::new(image_id, pred, config))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(vec![mask, prob_u, prob_s, sidecar])
}
