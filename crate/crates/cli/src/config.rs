use std::path::Path;

use anyhow::{Context, Result};
use poredit::diffusion::{GuidanceSpec, SampleMode};
use poredit::lbm::LbmConfig;
use poredit::network::ModelConfig;
use poredit::tiling::NoiseMode;
use poredit::training::{LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Invalid;

/// Learning rate of the desk configuration. The model is far smaller than
/// the reference one and trains for only a few hundred steps.
pub const DESK_LR: f64 = 5e-4;
pub const DESK_STEPS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps after respacing the training schedule.
    pub steps: usize,
    pub mode: SampleMode,
    pub guidance: GuidanceSpec,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            mode: SampleMode::Ancestral,
            guidance: GuidanceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub size: usize,
    pub tile: usize,
    pub overlap: usize,
    pub noise: NoiseMode,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            size: 128,
            tile: 64,
            overlap: 16,
            noise: NoiseMode::Coherent,
        }
    }
}

/// Synthetic training set: `count` GRF volumes with porosities spread
/// evenly over `porosity ± spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub porosity: f64,
    pub spread: f64,
    pub corr_len: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 16,
            size: 64,
            porosity: 0.25,
            spread: 0.05,
            corr_len: 3.0,
        }
    }
}

impl DataConfig {
    pub fn porosity_of(&self, i: usize) -> f64 {
        if self.count <= 1 {
            return self.porosity;
        }
        self.porosity - self.spread + 2.0 * self.spread * i as f64 / (self.count - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
    pub tiling: TilingConfig,
    pub lbm: LbmConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                lr: DESK_LR,
                epochs: 1000,
                max_steps: Some(DESK_STEPS),
                ..TrainConfig::default()
            },
            loss: LossWeights::default(),
            sampler: SamplerConfig::default(),
            tiling: TilingConfig::default(),
            lbm: LbmConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Invalid(format!("file not found: {}", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::from_json(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a possibly partial document. Keys are merged onto the desk
    /// defaults at every depth, so `{"train": {"max_steps": 10}}` keeps the
    /// desk learning rate.
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, user);
        serde_json::from_value(base)
    }

    /// Every range and divisibility rule, checked before any compute.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.lbm.validate()?;
        let bad = |m: String| -> Result<()> { Err(Invalid(m).into()) };
        let s = &self.sampler;
        if s.steps == 0 || s.steps > self.train.diffusion_steps {
            return bad(format!(
                "sampler steps {} must lie in [1, {}]",
                s.steps, self.train.diffusion_steps
            ));
        }
        if let SampleMode::Ddim { eta } = s.mode {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("eta {eta} must lie in [0, 1]"));
            }
        }
        let t = &self.tiling;
        if t.tile != self.model.input_size {
            return bad(format!("tile {} must equal model input {}", t.tile, self.model.input_size));
        }
        if t.overlap >= t.tile || t.size < t.tile {
            return bad(format!(
                "tiling needs overlap < tile <= size, got {} / {} / {}",
                t.overlap, t.tile, t.size
            ));
        }
        let d = &self.data;
        if d.count == 0 || d.size != self.model.input_size {
            return bad(format!(
                "data needs count >= 1 and size equal to model input {}",
                self.model.input_size
            ));
        }
        let (lo, hi) = (d.porosity - d.spread, d.porosity + d.spread);
        if !(d.spread >= 0.0 && lo > 0.0 && hi < 1.0) {
            return bad(format!("data porosity range [{lo}, {hi}] must lie inside (0, 1)"));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_desk_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"max_steps": 1000}, "lbm": {"tau": 0.9}}"#).unwrap();
        let d = RunConfig::default();
        assert_eq!(c.train.max_steps, Some(1000));
        assert_eq!(c.train.lr, DESK_LR);
        assert_eq!(c.train.epochs, d.train.epochs);
        assert_eq!(c.lbm.tau, 0.9);
        assert_eq!(c.lbm.tol, d.lbm.tol);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"depht": 2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"steps": 10, "x": 1}}"#).is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut c = RunConfig::default();
        c.tiling.tile = 32;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.window = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sampler.steps = 5000;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.data.spread = 0.3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn porosity_spread() {
        let d = DataConfig::default();
        assert!((d.porosity_of(0) - 0.2).abs() < 1e-12);
        assert!((d.porosity_of(15) - 0.3).abs() < 1e-12);
    }
}
