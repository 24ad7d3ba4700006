//! Run configuration: one document covering data, synthesis, networks, loss
//! weights, training, baselines, evaluation and the duality trials.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classical::BaselineOptions;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::losses::LossWeights;
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::synthesis::{DatasetCounts, SynthesisConfig};
use crate::tomo::ProjectionGeometry;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Weights for measured data (λ=10, β=10, γ=1).
    Real,
    /// Weights for simulated data (λ=10, β=1, γ=5).
    Synthetic,
    /// Desk-scale run: 64×64 images, 200 artifact + 100 clean training images,
    /// and a generator without normalisation layers.
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Preset::Real),
            "synthetic" => Ok(Preset::Synthetic),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (expected real, synthetic or toy)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Real => "real",
            Preset::Synthetic => "synthetic",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    /// Millimetres per pixel.
    pub pixel_spacing: f64,
    pub num_views: usize,
    pub counts: DatasetCounts,
    /// Directory of clean source images; random phantoms are generated when absent.
    pub source_dir: Option<String>,
}

impl DataConfig {
    pub fn geometry(&self) -> Result<ProjectionGeometry> {
        ProjectionGeometry::parallel(self.image_size, self.num_views, self.pixel_spacing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityConfig {
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub synthesis: SynthesisConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub baseline: BaselineOptions,
    pub eval: EvalOptions,
    pub duality: DualityConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let full_scale = |weights| RunConfig {
            preset,
            seed: 0,
            data: DataConfig {
                image_size: 128,
                pixel_spacing: 2.0,
                num_views: 360,
                counts: DatasetCounts::default(),
                source_dir: None,
            },
            synthesis: SynthesisConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights,
            train: TrainConfig::default(),
            baseline: BaselineOptions::default(),
            eval: EvalOptions::default(),
            duality: DualityConfig { trials: 100 },
        };
        match preset {
            Preset::Real => full_scale(LossWeights::REAL),
            Preset::Synthetic => full_scale(LossWeights::SYNTHETIC),
            Preset::Toy => {
                let mut c = full_scale(LossWeights::TOY);
                c.data = DataConfig {
                    image_size: 64,
                    pixel_spacing: 4.0,
                    num_views: 180,
                    counts: DatasetCounts {
                        train_artifact: 200,
                        train_clean: 100,
                        test_artifact: 50,
                        test_clean: 50,
                    },
                    source_dir: None,
                };
                // Per-sample normalisation discards each image's intensity
                // level, which caps identity fidelity near 32 dB at this scale.
                c.generator = GeneratorConfig {
                    depth: 3,
                    base_channels: 16,
                    norm: false,
                    ..GeneratorConfig::default()
                };
                c.discriminator = DiscriminatorConfig::with_base(16);
                c
            }
        }
    }

    /// Sets the master seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| Error::config(path, e.to_string());
        self.data.geometry().map_err(|e| at("data", e))?;
        if self.data.image_size % self.generator.size_multiple() != 0 {
            return Err(Error::config(
                "data.image_size",
                format!(
                    "must be divisible by {} for a generator of depth {}",
                    self.generator.size_multiple(),
                    self.generator.depth
                ),
            ));
        }
        self.synthesis.spectrum.validate().map_err(|e| at("synthesis.spectrum", e))?;
        self.generator.validate().map_err(|e| at("generator", e))?;
        self.discriminator.validate().map_err(|e| at("discriminator", e))?;
        self.weights.validate().map_err(|e| at("weights", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        if self.train.learning_rate == 0.0 {
            log::warn!("train.learning_rate is 0; parameters will not change");
        }
        Ok(())
    }

    /// Parses a JSON document as an overlay on a preset. The base preset is
    /// `preset` if given, else the document's own `preset` key, else
    /// `synthetic`. Unknown keys and type errors report their key path.
    pub fn from_json_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let Value::Object(map) = &overlay else {
            return Err(Error::config("<document>", "expected a JSON object"));
        };
        let base_preset = match (preset, map.get("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::config("preset", "expected a string")),
            (None, None) => Preset::Synthetic,
        };
        let mut merged = serde_json::to_value(RunConfig::preset(base_preset))?;
        merge(&mut merged, &overlay, "")?;
        if let Value::Object(m) = &mut merged {
            m.insert("preset".into(), serde_json::to_value(base_preset)?);
        }
        let cfg = deserialize_with_path(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<document>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text, preset)
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Recursively overlays `patch` onto `base`; keys absent from `base` are
/// rejected. `null` in the base (optional fields) accepts any value.
fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = join(prefix, k);
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::config(path, "unknown key")),
                }
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

fn deserialize_with_path(merged: Value) -> Result<RunConfig> {
    match serde_json::from_value::<RunConfig>(merged.clone()) {
        Ok(c) => Ok(c),
        Err(e) => {
            // Narrow the failure to the first section that does not parse on its own.
            let Value::Object(map) = &merged else {
                return Err(Error::config("<document>", e.to_string()));
            };
            macro_rules! probe {
                ($key:literal, $ty:ty) => {
                    if let Some(v) = map.get($key) {
                        if let Err(err) = serde_json::from_value::<$ty>(v.clone()) {
                            return Err(Error::config($key, err.to_string()));
                        }
                    }
                };
            }
            probe!("seed", u64);
            probe!("data", DataConfig);
            probe!("synthesis", SynthesisConfig);
            probe!("generator", GeneratorConfig);
            probe!("discriminator", DiscriminatorConfig);
            probe!("weights", LossWeights);
            probe!("train", TrainConfig);
            probe!("baseline", BaselineOptions);
            probe!("eval", EvalOptions);
            probe!("duality", DualityConfig);
            Err(Error::config("<document>", e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_their_weights() {
        let real = RunConfig::preset(Preset::Real);
        assert_eq!((real.weights.lambda, real.weights.beta, real.weights.gamma), (10.0, 10.0, 1.0));
        let syn = RunConfig::preset(Preset::Synthetic);
        assert_eq!((syn.weights.lambda, syn.weights.beta, syn.weights.gamma), (10.0, 1.0, 5.0));
        let toy = RunConfig::preset(Preset::Toy);
        assert_eq!(toy.data.image_size, 64);
        assert_eq!((toy.data.counts.train_artifact, toy.data.counts.train_clean), (200, 100));
        assert_eq!((toy.generator.depth, toy.generator.base_channels), (3, 16));
        assert!(!toy.generator.norm && real.generator.norm);
        for p in [Preset::Real, Preset::Synthetic, Preset::Toy] {
            RunConfig::preset(p).validate().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn overlay_round_trips() {
        let c = RunConfig::from_json_str(r#"{"preset": "toy", "train": {"epochs": 3}, "seed": 4}"#, None).unwrap();
        assert_eq!(c.preset, Preset::Toy);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.seed, 4);
        let echoed = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json_str(&echoed, None).unwrap(), c);
        let forced = RunConfig::from_json_str(r#"{"preset": "toy"}"#, Some(Preset::Real)).unwrap();
        assert_eq!(forced.weights, LossWeights::REAL);
        assert_eq!(forced.preset, Preset::Real);
        let with_dir = RunConfig::from_json_str(r#"{"data": {"source_dir": "/tmp/x"}}"#, None).unwrap();
        assert_eq!(with_dir.data.source_dir.as_deref(), Some("/tmp/x"));
    }

    #[test]
    fn errors_name_the_key_path() {
        let err = RunConfig::from_json_str(r#"{"train": {"epochz": 3}}"#, None).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "train.epochz"), "{err}");
        let err = RunConfig::from_json_str(r#"{"weights": {"beta": "ten"}}"#, None).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "weights"), "{err}");
        let err = RunConfig::from_json_str(r#"{"weights": {"beta": -1}}"#, None).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "weights"), "{err}");
        let err = RunConfig::from_json_str(r#"{"data": {"image_size": 66}}"#, Some(Preset::Toy)).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "data.image_size"), "{err}");
        assert!(RunConfig::from_json_str("[1]", None).is_err());
        assert!(RunConfig::from_json_str("{", None).is_err());
    }
}
