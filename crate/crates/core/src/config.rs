//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected, dotted `key=value` overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::PairGuard;
use crate::error::{invalid, Result};
use crate::itb::BackgroundMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub heatmap: HeatmapConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub objects_per_scene: usize,
    pub train_scenes: usize,
    pub held_out_scenes: usize,
    /// Reject lists of exactly two boxes, as the reference pseudocode does.
    pub literal_guard: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    /// Down/up-sampling stages of the block stack (`2·levels + 1` blocks).
    pub levels: usize,
    /// Side of the square pixel patch folded into one latent token.
    pub latent_patch: usize,
    pub tau: f64,
    pub bg_mode: BackgroundMode,
    /// Object crops are resized to `crop_size × crop_size`…
    pub crop_size: usize,
    /// …and embedded with this patch size.
    pub crop_patch: usize,
    pub multiview: bool,
    pub views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Probability of replacing all object codes with the null code.
    pub p_uncond: f64,
    pub rotate_prob: f64,
    /// Shuffle object slots per example so no slot is privileged.
    pub shuffle_objects: bool,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub clip_x0: bool,
    /// DDIM step indices at which gate maps are recorded.
    pub record_steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub grid: usize,
    pub pairs: usize,
    /// Random boxes per synthetic layout; the pair kept from each layout
    /// is the one box selection picks.
    pub boxes_per_layout: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            heatmap: HeatmapConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            objects_per_scene: 3,
            train_scenes: 200,
            held_out_scenes: 20,
            literal_guard: true,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            levels: 2,
            latent_patch: 4,
            tau: crate::itb::DEFAULT_TAU,
            bg_mode: BackgroundMode::ZeroResidual,
            crop_size: 16,
            crop_patch: 4,
            multiview: true,
            views: crate::shape_prior::DEFAULT_VIEWS,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            p_uncond: 0.1,
            rotate_prob: 0.5,
            shuffle_objects: true,
            log_every: 10,
        }
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 5.0,
            clip_x0: true,
            record_steps: vec![0, 24, 49],
        }
    }
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            grid: crate::data::heatmap::DEFAULT_GRID,
            pairs: 10_000,
            boxes_per_layout: 4,
        }
    }
}

impl DataConfig {
    pub fn guard(&self) -> PairGuard {
        if self.literal_guard {
            PairGuard::Literal
        } else {
            PairGuard::Relaxed
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Config> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: Config = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let d = &self.data;
        let fail = |msg: String| Err(invalid(msg));
        if m.dim == 0 || m.dim % 2 != 0 {
            return fail(format!("model.dim must be a positive even number, got {}", m.dim));
        }
        if !(m.tau > 0.0) {
            return fail(format!("model.tau must be positive, got {}", m.tau));
        }
        let stride = m.latent_patch << m.levels;
        if m.latent_patch == 0 || d.width % stride != 0 || d.height % stride != 0 {
            return fail(format!(
                "{}x{} images do not divide into patch {} with {} levels",
                d.width, d.height, m.latent_patch, m.levels
            ));
        }
        if m.crop_patch == 0 || m.crop_size % m.crop_patch != 0 {
            return fail(format!("crop size {} is not divisible by patch {}", m.crop_size, m.crop_patch));
        }
        if m.views == 0 {
            return fail("model.views must be at least 1".into());
        }
        if d.objects_per_scene < 2 {
            return fail("data.objects_per_scene must be at least 2".into());
        }
        let s = &self.schedule;
        if s.steps == 0 || !(0.0 < s.beta_start && s.beta_start < s.beta_end && s.beta_end < 1.0) {
            return fail(format!(
                "schedule needs T > 0 and 0 < beta_start < beta_end < 1, got T={} [{}, {}]",
                s.steps, s.beta_start, s.beta_end
            ));
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.p_uncond) || !(0.0..=1.0).contains(&t.rotate_prob) {
            return fail("train needs batch > 0, lr > 0 and probabilities in [0, 1]".into());
        }
        let sm = &self.sample;
        if sm.steps == 0 || sm.steps > s.steps {
            return fail(format!("sample.steps must lie in 1..={}, got {}", s.steps, sm.steps));
        }
        if !(sm.cfg_scale >= 0.0) {
            return fail(format!("sample.cfg_scale must be non-negative, got {}", sm.cfg_scale));
        }
        if let Some(&bad) = sm.record_steps.iter().find(|&&i| i >= sm.steps) {
            return fail(format!("record step {bad} is outside a {}-step sampler", sm.steps));
        }
        if self.heatmap.grid == 0 {
            return fail("heatmap.grid must be positive".into());
        }
        if self.heatmap.boxes_per_layout < 2 {
            return fail("heatmap.boxes_per_layout must be at least 2".into());
        }
        Ok(())
    }
}
