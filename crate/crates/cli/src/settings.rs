//! Flat `key = value` configuration with layered resolution:
//! built-in defaults, then a config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use planet_core::geometry::{AffineRangeConfig, Interval};
use planet_core::inference::{Averaging, Combiner, TtaConfig};
use planet_core::models::{Architecture, ModelConfig, SegNeXtConfig, UNetConfig};
use planet_core::objectives::Connectivity;
use planet_core::training::{OptimizerKind, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("test_fraction", "0.2"),
    ("folds", "5"),
    ("epochs", "100"),
    ("batch_size", "8"),
    ("learning_rate", "0.0001"),
    ("optimizer", "adam"),
    ("patience", "15"),
    ("rotation_deg", "-45,45"),
    ("shift", "0,0.1"),
    ("scale", "0.8,1.0"),
    ("signed_shift", "true"),
    ("n_variants", "100"),
    ("val_n_variants", "100"),
    ("include_identity", "true"),
    ("threshold", "0.5"),
    ("averaging", "uniform"),
    ("combiner", "threshold_then_union"),
    ("connectivity", "8"),
    ("unet_base_width", "64"),
    ("unet_depth", "4"),
    ("segnext_depths", "2,2,4,2"),
    ("segnext_widths", "64,128,320,512"),
    ("segnext_mlp_ratios", "8,8,4,4"),
    ("segnext_decoder_width", "256"),
    ("segnext_strip_kernels", "7,11,21"),
];

/// Fully resolved settings; every known key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` flag.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Settings {
    /// Defaults, overridden by `file` (if any), overridden by `flags`.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let mut settings = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (k, v) in parse_kv(&text).with_context(|| format!("in {}", path.display()))? {
                settings.set(&k, &v)?;
            }
        }
        for (k, v) in flags {
            settings.set(k, v)?;
        }
        settings.train_config(Architecture::Unet)?;
        settings.train_config(Architecture::SegnextS)?;
        settings.tta_config()?;
        settings.test_fraction()?;
        settings.folds()?;
        settings.connectivity()?;
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown setting {key:?}"),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| anyhow!("setting {key} = {raw:?}: {e}"))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| anyhow!("setting {key} = {:?}: {e}", self.get(key)))
            })
            .collect()
    }

    fn interval(&self, key: &str) -> Result<Interval> {
        match self.list::<f64>(key)?.as_slice() {
            [v] => Ok(Interval::point(*v)),
            [lo, hi] => Ok(Interval::new(*lo, *hi)),
            _ => bail!("setting {key} must be `lo,hi` or a single value"),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn test_fraction(&self) -> Result<f64> {
        let f: f64 = self.parse("test_fraction")?;
        if !(f > 0.0 && f < 1.0) {
            bail!("test_fraction must lie in (0, 1), got {f}");
        }
        Ok(f)
    }

    pub fn folds(&self) -> Result<usize> {
        let k: usize = self.parse("folds")?;
        if k < 2 {
            bail!("folds must be at least 2, got {k}");
        }
        Ok(k)
    }

    pub fn connectivity(&self) -> Result<Connectivity> {
        match self.get("connectivity") {
            "4" => Ok(Connectivity::Four),
            "8" => Ok(Connectivity::Eight),
            other => bail!("connectivity must be 4 or 8, got {other:?}"),
        }
    }

    pub fn ranges(&self) -> Result<AffineRangeConfig> {
        let ranges = AffineRangeConfig {
            rotation_deg: self.interval("rotation_deg")?,
            shift: self.interval("shift")?,
            scale: self.interval("scale")?,
            signed_shift: self.parse("signed_shift")?,
        };
        ranges.validate()?;
        Ok(ranges)
    }

    pub fn model_config(&self, arch: Architecture) -> Result<ModelConfig> {
        let config = match arch {
            Architecture::Unet => ModelConfig::Unet(UNetConfig {
                in_channels: 1,
                base_width: self.parse("unet_base_width")?,
                depth: self.parse("unet_depth")?,
            }),
            Architecture::SegnextS => ModelConfig::SegnextS(SegNeXtConfig {
                in_channels: 1,
                depths: self.list("segnext_depths")?,
                widths: self.list("segnext_widths")?,
                mlp_ratios: self.list("segnext_mlp_ratios")?,
                decoder_width: self.parse("segnext_decoder_width")?,
                strip_kernels: self.list("segnext_strip_kernels")?,
            }),
        };
        config.validate()?;
        Ok(config)
    }

    /// TTA settings for test-time prediction.
    pub fn tta_config(&self) -> Result<TtaConfig> {
        let averaging = match self.get("averaging") {
            "uniform" => Averaging::Uniform,
            "coverage" => Averaging::Coverage,
            other => bail!("averaging must be uniform or coverage, got {other:?}"),
        };
        let combiner = match self.get("combiner") {
            "threshold_then_union" => Combiner::ThresholdThenUnion,
            "per_variant_union" => Combiner::PerVariantUnion,
            other => bail!("combiner must be threshold_then_union or per_variant_union, got {other:?}"),
        };
        let config = TtaConfig {
            n_variants: self.parse("n_variants")?,
            ranges: self.ranges()?,
            include_identity: self.parse("include_identity")?,
            threshold: self.parse("threshold")?,
            seed: self.seed()?,
            averaging,
            combiner,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self, arch: Architecture) -> Result<TrainConfig> {
        let optimizer = match self.get("optimizer") {
            "adam" => OptimizerKind::Adam,
            other => bail!("optimizer must be adam, got {other:?}"),
        };
        let validation = TtaConfig {
            n_variants: self.parse("val_n_variants")?,
            ..self.tta_config()?
        };
        let config = TrainConfig {
            model: self.model_config(arch)?,
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            learning_rate: self.parse("learning_rate")?,
            optimizer,
            augmentation: self.ranges()?,
            seed: self.seed()?,
            patience: self.parse("patience")?,
            validation,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 7\nseed = 3 # trailing\n").unwrap();
        let s = Settings::resolve(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(s.get("epochs"), "7");
        assert_eq!(s.get("seed"), "9");
        assert_eq!(s.get("batch_size"), "8");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Settings::resolve(None, &[("epoch".into(), "3".into())]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Settings::resolve(None, &[("threshold".into(), "1.5".into())]).is_err());
        assert!(Settings::resolve(None, &[("epochs".into(), "0".into())]).is_err());
        assert!(Settings::resolve(None, &[("connectivity".into(), "6".into())]).is_err());
    }

    #[test]
    fn defaults_resolve_to_documented_configs() {
        let s = Settings::default();
        let t = s.train_config(Architecture::Unet).unwrap();
        assert_eq!(t.epochs, 100);
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.learning_rate, 1e-4);
        let tta = s.tta_config().unwrap();
        assert_eq!(tta.n_variants, 100);
        assert_eq!(tta.threshold, 0.5);
        assert_eq!(tta.ranges, AffineRangeConfig::default());
    }
}
