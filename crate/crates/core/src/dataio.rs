//! Dataset ingestion, geometric standardization to 256×256, patient-level
//! splitting and the synthetic placenta-like dataset generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinMask, Grid, Image};
use crate::objectives::{count_cc, Connectivity};
use crate::{MAX_SLICES_PER_PATIENT, STANDARD_SIDE};

pub const MANIFEST_FILE: &str = "manifest.csv";
/// Smallest accepted side of a source image.
pub const MIN_SOURCE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub patient_id: String,
    pub slice_index: u32,
    pub image: Image,
    pub mask: BinMask,
    /// `(height, width)` of the stored image.
    pub source_size: (usize, usize),
}

/// `<patient_id>/slice<k>`, unique within a dataset.
pub fn sample_id(patient_id: &str, slice_index: u32) -> String {
    format!("{patient_id}/slice{slice_index}")
}

impl ImageSample {
    pub fn id(&self) -> String {
        sample_id(&self.patient_id, self.slice_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub slice_index: u32,
    pub image_path: String,
    pub mask_path: String,
    #[serde(default)]
    pub n_components: Option<usize>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let row: ManifestRow = row.map_err(|e| Error::Load {
            row: i + 1,
            reason: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn min_max_normalize(values: Vec<f32>) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.into_iter().map(|v| (v - lo) / range).collect()
}

fn read_png(path: &Path, row: usize) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::Load {
            row,
            reason: format!("missing file {}", path.display()),
        });
    }
    image::open(path).map_err(|e| Error::Load {
        row,
        reason: format!("{}: {e}", path.display()),
    })
}

fn load_image(path: &Path, row: usize) -> Result<Image> {
    let img = read_png(path, row)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other => other.to_luma32f().into_raw(),
    };
    Image::from_vec(h, w, min_max_normalize(raw))
}

fn load_mask(path: &Path, row: usize) -> Result<BinMask> {
    let img = read_png(path, row)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u16> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw(),
        _ => {
            return Err(Error::Validation(format!(
                "row {row}: mask {} is not single-channel",
                path.display()
            )))
        }
    };
    let levels: BTreeSet<u16> = raw.iter().copied().filter(|&v| v != 0).collect();
    if levels.len() > 1 {
        return Err(Error::Validation(format!(
            "row {row}: mask {} has values {:?} besides 0; expected {{0, max}}",
            path.display(),
            levels
        )));
    }
    BinMask::from_vec(h, w, raw.into_iter().map(|v| u8::from(v != 0)).collect())
}

/// Reads every manifest row (paths relative to `root`), normalizes intensities
/// per image to `[0, 1]`, binarizes masks, and returns samples sorted by
/// `(patient_id, slice_index)`.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<ImageSample>> {
    let rows = read_manifest(manifest)?;
    let mut slices: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        if row.slice_index as usize >= MAX_SLICES_PER_PATIENT {
            return Err(Error::Validation(format!(
                "row {}: slice_index {} outside 0..{MAX_SLICES_PER_PATIENT}",
                i + 1,
                row.slice_index
            )));
        }
        let set = slices.entry(row.patient_id.clone()).or_default();
        if !set.insert(row.slice_index) {
            return Err(Error::Validation(format!(
                "row {}: duplicate slice {} for patient {}",
                i + 1,
                row.slice_index,
                row.patient_id
            )));
        }
        if set.len() > MAX_SLICES_PER_PATIENT {
            return Err(Error::Validation(format!(
                "patient {} has more than {MAX_SLICES_PER_PATIENT} slices",
                row.patient_id
            )));
        }
    }
    let mut samples = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let image = load_image(&root.join(&row.image_path), i + 1)?;
            let mask = load_mask(&root.join(&row.mask_path), i + 1)?;
            if image.dims() != mask.dims() {
                return Err(Error::Validation(format!(
                    "row {}: image is {:?} but mask is {:?}",
                    i + 1,
                    image.dims(),
                    mask.dims()
                )));
            }
            Ok(ImageSample {
                patient_id: row.patient_id.clone(),
                slice_index: row.slice_index,
                source_size: image.dims(),
                image,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| {
        (a.patient_id.as_str(), a.slice_index).cmp(&(b.patient_id.as_str(), b.slice_index))
    });
    Ok(samples)
}

/// [`load_dataset`] on `<root>/manifest.csv`.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<ImageSample>> {
    load_dataset(root, &root.join(MANIFEST_FILE))
}

/// A sample placed on the standard canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub image: Image,
    pub mask: BinMask,
    pub scale_applied: f64,
    pub pad_top: usize,
    pub pad_left: usize,
    pub content_height: usize,
    pub content_width: usize,
}

/// Serializable record of how a sample was mapped onto the canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasGeometry {
    pub source_height: usize,
    pub source_width: usize,
    pub scale_applied: f64,
    pub content_height: usize,
    pub content_width: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Canvas {
    pub fn geometry(&self, source_size: (usize, usize)) -> CanvasGeometry {
        CanvasGeometry {
            source_height: source_size.0,
            source_width: source_size.1,
            scale_applied: self.scale_applied,
            content_height: self.content_height,
            content_width: self.content_width,
            pad_top: self.pad_top,
            pad_bottom: STANDARD_SIDE - self.content_height - self.pad_top,
            pad_left: self.pad_left,
            pad_right: STANDARD_SIDE - self.content_width - self.pad_left,
        }
    }
}

fn resize_image(image: &Image, h: usize, w: usize) -> Image {
    if image.dims() == (h, w) {
        return image.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data().to_vec(),
    )
    .expect("buffer matches grid dims");
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Image::from_vec(h, w, out.into_raw()).expect("resize output dims")
}

fn resize_mask(mask: &BinMask, h: usize, w: usize) -> BinMask {
    if mask.dims() == (h, w) {
        return mask.clone();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
            .expect("buffer matches grid dims");
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Nearest);
    BinMask::from_vec(h, w, out.into_raw()).expect("resize output dims")
}

/// Content size after scaling the longest side to `STANDARD_SIDE`.
pub fn content_dims(height: usize, width: usize) -> (usize, usize, f64) {
    let longest = height.max(width);
    let scale = STANDARD_SIDE as f64 / longest as f64;
    let fit = |side: usize| {
        if side == longest {
            STANDARD_SIDE
        } else {
            ((side as f64 * scale).round() as usize).clamp(1, STANDARD_SIDE)
        }
    };
    (fit(height), fit(width), scale)
}

/// Scales the longest side to 256 (image bilinear, mask nearest) and pads
/// the shorter side with zeros, odd remainder at the bottom/right.
pub fn standardize(sample: &ImageSample) -> Result<Canvas> {
    let (h, w) = sample.image.dims();
    if h < MIN_SOURCE_SIDE || w < MIN_SOURCE_SIDE {
        return Err(Error::Validation(format!(
            "{}: {h}x{w} is below the {MIN_SOURCE_SIDE}x{MIN_SOURCE_SIDE} minimum",
            sample.id()
        )));
    }
    sample.image.ensure_same_dims(&sample.mask, "image vs mask")?;
    let (ch, cw, scale) = content_dims(h, w);
    let content = resize_image(&sample.image, ch, cw);
    let content_mask = resize_mask(&sample.mask, ch, cw);
    let pad_top = (STANDARD_SIDE - ch) / 2;
    let pad_left = (STANDARD_SIDE - cw) / 2;
    let mut image = Image::filled(STANDARD_SIDE, STANDARD_SIDE, 0.0);
    let mut mask = BinMask::filled(STANDARD_SIDE, STANDARD_SIDE, 0);
    for r in 0..ch {
        for c in 0..cw {
            image.set(r + pad_top, c + pad_left, content.get(r, c));
            mask.set(r + pad_top, c + pad_left, content_mask.get(r, c));
        }
    }
    Ok(Canvas {
        image,
        mask,
        scale_applied: scale,
        pad_top,
        pad_left,
        content_height: ch,
        content_width: cw,
    })
}

/// A standardized sample ready for training or inference.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub patient_id: String,
    pub slice_index: u32,
    pub source_size: (usize, usize),
    pub canvas: Canvas,
}

pub fn prepare(samples: &[ImageSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id(),
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                source_size: s.source_size,
                canvas: standardize(s)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn is_test(&self, patient_id: &str) -> bool {
        self.test_patients.contains(patient_id)
    }

    /// Partitions items by the side their patient landed on: `(train, test)`.
    pub fn partition<'a, T>(
        &self,
        items: &'a [T],
        patient_of: impl Fn(&T) -> &str,
    ) -> (Vec<&'a T>, Vec<&'a T>) {
        items.iter().partition(|it| !self.is_test(patient_of(it)))
    }
}

/// Number of test patients for a split: `floor(n · fraction)`, kept within `1..n`.
pub fn test_patient_count(n_patients: usize, test_fraction: f64) -> usize {
    let n = ((n_patients as f64) * test_fraction + 1e-9).floor() as usize;
    n.clamp(1, n_patients - 1)
}

/// Random patient-level split: every slice of a patient lands on one side.
pub fn split_by_patient(samples: &[ImageSample], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let patients: BTreeSet<&str> = samples.iter().map(|s| s.patient_id.as_str()).collect();
    split_patients(patients.into_iter().map(str::to_owned).collect(), test_fraction, seed)
}

/// [`split_by_patient`] on bare patient ids.
pub fn split_patients(patients: BTreeSet<String>, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if patients.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 patients to split, got {}",
            patients.len()
        )));
    }
    let mut order: Vec<String> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_patient_count(order.len(), test_fraction);
    let test_patients = order.drain(..n_test).collect();
    Ok(DatasetSplit {
        train_patients: order.into_iter().collect(),
        test_patients,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// A bent capsule: points within a thickness profile of a circular arc.
#[derive(Clone, Copy, Debug)]
struct ArcBlob {
    cx: f64,
    cy: f64,
    radius: f64,
    start: f64,
    span: f64,
    half_thickness: f64,
}

impl ArcBlob {
    fn half_width_at(&self, u: f64) -> f64 {
        self.half_thickness * (0.7 + 0.3 * (std::f64::consts::PI * u).sin())
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = dx.hypot(dy);
        let mut theta = dy.atan2(dx) - self.start;
        theta = theta.rem_euclid(std::f64::consts::TAU);
        if theta <= self.span {
            let u = theta / self.span;
            return (r - self.radius).abs() <= self.half_width_at(u);
        }
        // rounded caps at both arc ends
        [0.0, self.span].iter().any(|&t| {
            let a = self.start + t;
            let (ex, ey) = (
                self.cx + self.radius * a.cos(),
                self.cy + self.radius * a.sin(),
            );
            (x - ex).hypot(y - ey) <= self.half_width_at(t / self.span)
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct EllipseBlob {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
}

impl EllipseBlob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        u * u + v * v <= 1.0
    }
}

/// Smallest foreground fraction of a generated mask.
pub const SYNTH_MIN_AREA_FRACTION: f64 = 0.012;
/// Minimum pixel gap kept between the two components of a two-blob mask.
const SYNTH_COMPONENT_GAP: f64 = 24.0;
const SYNTH_SLICES: u32 = 5;

struct PatientPose {
    height: usize,
    width: usize,
    base: ArcBlob,
    drift: (f64, f64, f64, f64),
    second: Option<EllipseBlob>,
    texture_phase: f64,
    noise_sd: f64,
}

fn bbox(mask: &BinMask) -> Option<(f64, f64, f64, f64)> {
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) != 0 {
                let (x, y) = (c as f64, r as f64);
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b
}

fn touches_border(mask: &BinMask, margin: usize) -> bool {
    let (h, w) = mask.dims();
    (0..h).any(|r| {
        (0..w).any(|c| {
            mask.get(r, c) != 0 && (r < margin || c < margin || r + margin >= h || c + margin >= w)
        })
    })
}

impl PatientPose {
    fn arc_for_slice(&self, k: u32) -> ArcBlob {
        let t = f64::from(k) - f64::from(SYNTH_SLICES - 1) / 2.0;
        ArcBlob {
            cx: self.base.cx + self.drift.0 * t,
            cy: self.base.cy + self.drift.1 * t,
            start: self.base.start + self.drift.2 * t,
            half_thickness: self.base.half_thickness * (1.0 + self.drift.3 * t),
            ..self.base
        }
    }

    fn masks(&self, k: u32) -> (BinMask, Option<BinMask>) {
        let arc = self.arc_for_slice(k);
        let primary = Grid::from_fn(self.height, self.width, |r, c| {
            u8::from(arc.contains(c as f64, r as f64))
        });
        let secondary = self.second.map(|e| {
            let t = f64::from(k) - 2.0;
            let e = EllipseBlob {
                cx: e.cx + 0.5 * self.drift.0 * t,
                cy: e.cy + 0.5 * self.drift.1 * t,
                ..e
            };
            Grid::from_fn(self.height, self.width, |r, c| {
                u8::from(e.contains(c as f64, r as f64))
            })
        });
        (primary, secondary)
    }
}

fn sample_pose(rng: &mut ChaCha8Rng) -> PatientPose {
    loop {
        let height = rng.gen_range(192..=384usize);
        let width = rng.gen_range(192..=384usize);
        if height.max(width) as f64 > 1.6 * height.min(width) as f64 {
            continue;
        }
        let m = height.min(width) as f64;
        let radius = rng.gen_range(0.35 * m..0.7 * m);
        let span = rng.gen_range(0.8..1.4);
        let start = rng.gen_range(0.0..std::f64::consts::TAU);
        let mid = start + span / 2.0;
        // place the arc midpoint near the image center
        let (mx, my) = (
            width as f64 / 2.0 + rng.gen_range(-0.1..0.1) * m,
            height as f64 / 2.0 + rng.gen_range(-0.1..0.1) * m,
        );
        let base = ArcBlob {
            cx: mx - radius * mid.cos(),
            cy: my - radius * mid.sin(),
            radius,
            start,
            span,
            half_thickness: rng.gen_range(0.06 * m..0.09 * m),
        };
        let drift = (
            rng.gen_range(-0.01..0.01) * m,
            rng.gen_range(-0.01..0.01) * m,
            rng.gen_range(-0.04..0.04),
            rng.gen_range(-0.05..0.05),
        );
        let wants_second = rng.gen_bool(0.3);
        let mut pose = PatientPose {
            height,
            width,
            base,
            drift,
            second: None,
            texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            noise_sd: rng.gen_range(0.03..0.07),
        };
        if wants_second {
            let e = EllipseBlob {
                cx: rng.gen_range(0.15..0.85) * width as f64,
                cy: rng.gen_range(0.15..0.85) * height as f64,
                ax: rng.gen_range(0.07..0.12) * m,
                ay: rng.gen_range(0.05..0.09) * m,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            };
            pose.second = Some(e);
        }
        if pose_is_valid(&pose) {
            return pose;
        }
        if wants_second {
            // fall back to a single component for this draw
            pose.second = None;
            if pose_is_valid(&pose) {
                return pose;
            }
        }
    }
}

fn pose_is_valid(pose: &PatientPose) -> bool {
    let total = (pose.height * pose.width) as f64;
    (0..SYNTH_SLICES).all(|k| {
        let (primary, secondary) = pose.masks(k);
        if touches_border(&primary, 4) || (primary.area() as f64) < SYNTH_MIN_AREA_FRACTION * total {
            return false;
        }
        if count_cc(&primary, Connectivity::Four) != 1 {
            return false;
        }
        match secondary {
            None => true,
            Some(sec) => {
                if touches_border(&sec, 4) {
                    return false;
                }
                let (Some(a), Some(b)) = (bbox(&primary), bbox(&sec)) else {
                    return false;
                };
                let gap = SYNTH_COMPONENT_GAP;
                a.2 + gap < b.0 || b.2 + gap < a.0 || a.3 + gap < b.1 || b.3 + gap < a.1
            }
        }
    })
}

/// One synthetic slice: image intensities in `[0, 1]` and its exact mask.
#[derive(Clone, Debug)]
pub struct SyntheticSlice {
    pub image: Image,
    pub mask: BinMask,
    pub n_components: usize,
}

/// Five slices of one synthetic patient drawn from `rng`.
pub fn synthesize_patient(rng: &mut ChaCha8Rng) -> Vec<SyntheticSlice> {
    let pose = sample_pose(rng);
    let (h, w) = (pose.height, pose.width);
    let body = EllipseBlob {
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        ax: 0.47 * w as f64,
        ay: 0.47 * h as f64,
        angle: 0.0,
    };
    let noise = Normal::new(0.0, pose.noise_sd).expect("positive sd");
    (0..SYNTH_SLICES)
        .map(|k| {
            let (primary, secondary) = pose.masks(k);
            let mask = match &secondary {
                Some(sec) => primary.union(sec).expect("same dims"),
                None => primary,
            };
            let phase = pose.texture_phase + 0.3 * f64::from(k);
            let image = Grid::from_fn(h, w, |r, c| {
                let (x, y) = (c as f64, r as f64);
                let base = if mask.get(r, c) != 0 {
                    0.72 + 0.06 * ((x * 0.05 + phase).sin() * (y * 0.04 - phase).cos())
                } else if body.contains(x, y) {
                    0.32 + 0.05 * ((x + y) * 0.01 + phase).sin()
                } else {
                    0.06
                };
                (base + noise.sample(rng)).clamp(0.0, 1.0) as f32
            });
            let n_components = count_cc(&mask, Connectivity::Eight);
            SyntheticSlice {
                image,
                mask,
                n_components,
            }
        })
        .collect()
}

fn save_png16(image: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| (f64::from(v.clamp(0.0, 1.0)) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
            .expect("buffer matches grid dims");
    buf.save(path)?;
    Ok(())
}

/// Writes a `{0,1}` mask as an 8-bit `{0,255}` PNG.
pub fn save_mask_png(mask: &BinMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer matches grid dims");
    buf.save(path)?;
    Ok(())
}

/// Writes a `[0,1]` field as a 16-bit PNG.
pub fn save_prob_png(map: &Image, path: &Path) -> Result<()> {
    save_png16(map, path)
}

/// Generates `n_patients × 5` slices under `out_root` in the standard
/// layout and writes `manifest.csv`. Output is byte-identical per seed.
pub fn generate_synthetic(n_patients: usize, seed: u64, out_root: &Path) -> Result<Vec<ManifestRow>> {
    if n_patients < 2 {
        return Err(Error::Validation(format!(
            "synthetic dataset needs at least 2 patients, got {n_patients}"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_patients * SYNTH_SLICES as usize);
    for p in 0..n_patients {
        let patient_id = format!("syn{p:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let dir = out_root.join(&patient_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, slice) in synthesize_patient(&mut rng).into_iter().enumerate() {
            let image_rel = format!("{patient_id}/slice{k}.png");
            let mask_rel = format!("{patient_id}/slice{k}_mask.png");
            save_png16(&slice.image, &out_root.join(&image_rel))?;
            save_mask_png(&slice.mask, &out_root.join(&mask_rel))?;
            rows.push(ManifestRow {
                patient_id: patient_id.clone(),
                slice_index: k as u32,
                image_path: image_rel,
                mask_path: mask_rel,
                n_components: Some(slice.n_components),
            });
        }
    }
    write_manifest(&out_root.join(MANIFEST_FILE), &rows)?;
    Ok(rows)
}

/// Paths of the files [`generate_synthetic`] produced, manifest included.
pub fn dataset_files(root: &Path, rows: &[ManifestRow]) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = rows
        .iter()
        .flat_map(|r| [root.join(&r.image_path), root.join(&r.mask_path)])
        .collect();
    files.push(root.join(MANIFEST_FILE));
    files
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> ImageSample {
        let image = Grid::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        let mask = Grid::from_fn(h, w, |r, c| u8::from(r > h / 4 && c > w / 3));
        ImageSample {
            patient_id: "p".into(),
            slice_index: 0,
            source_size: (h, w),
            image,
            mask,
        }
    }

    #[test]
    fn square_input_halves_without_padding() {
        let c = standardize(&sample(512, 512)).unwrap();
        assert_eq!(c.scale_applied, 0.5);
        assert_eq!((c.pad_top, c.pad_left), (0, 0));
        assert_eq!((c.content_height, c.content_width), (256, 256));
    }

    #[test]
    fn acquisition_extreme_pads_odd_remainder_right() {
        let s = sample(384, 287);
        let c = standardize(&s).unwrap();
        // 287 · 256 / 384 = 191.33
        assert_eq!((c.content_height, c.content_width), (256, 191));
        let g = c.geometry(s.source_size);
        assert_eq!((g.pad_left, g.pad_right), (32, 33));
        assert_eq!((g.pad_top, g.pad_bottom), (0, 0));
        for r in 0..256 {
            for col in (0..32).chain(256 - 33..256) {
                assert_eq!(c.image.get(r, col), 0.0);
                assert_eq!(c.mask.get(r, col), 0);
            }
        }
    }

    #[test]
    fn standard_input_is_identity() {
        let s = sample(256, 256);
        let c = standardize(&s).unwrap();
        assert_eq!(c.scale_applied, 1.0);
        assert_eq!(c.image, s.image);
        assert_eq!(c.mask, s.mask);
    }

    #[test]
    fn tiny_input_is_rejected() {
        assert!(matches!(standardize(&sample(7, 40)), Err(Error::Validation(_))));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(test_patient_count(218, 0.2), 43);
        assert_eq!(test_patient_count(10, 0.2), 2);
        assert_eq!(test_patient_count(40, 0.2), 8);
        assert_eq!(test_patient_count(2, 0.2), 1);
    }

    #[test]
    fn split_needs_two_patients() {
        let ids: BTreeSet<String> = ["a".to_string()].into();
        assert!(split_patients(ids, 0.2, 0).is_err());
        let ids: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        assert!(split_patients(ids.clone(), 0.0, 0).is_err());
        assert!(split_patients(ids, 1.0, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let ids: BTreeSet<String> = (0..10).map(|i| format!("p{i}")).collect();
        let a = split_patients(ids.clone(), 0.2, 1).unwrap();
        let b = split_patients(ids.clone(), 0.2, 1).unwrap();
        let c = split_patients(ids, 0.2, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test_patients.len(), 2);
        assert_eq!(c.test_patients.len(), 2);
        assert_ne!(a.test_patients, c.test_patients);
    }

    #[test]
    fn generator_rejects_single_patient() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(1, 0, dir.path()).is_err());
    }
}
