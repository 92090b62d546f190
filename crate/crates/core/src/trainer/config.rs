use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::ModelConfig;
use crate::priors::PriorSource;

/// Ablation configurations. Each fixes where prior heads (P), recovery
/// blocks (R) and discriminators (D) attach.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Source-only detector.
    Frcnn,
    D5,
    D5r5,
    P5r5,
    #[default]
    P45r45,
    D45,
    P45,
}

impl Mode {
    pub const LADDER: [Mode; 5] = [Mode::Frcnn, Mode::D5, Mode::D5r5, Mode::P5r5, Mode::P45r45];
    pub const ALL: [Mode; 7] = [
        Mode::Frcnn,
        Mode::D5,
        Mode::D5r5,
        Mode::P5r5,
        Mode::P45r45,
        Mode::D45,
        Mode::P45,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Frcnn => "frcnn",
            Mode::D5 => "d5",
            Mode::D5r5 => "d5r5",
            Mode::P5r5 => "p5r5",
            Mode::P45r45 => "p45r45",
            Mode::D45 => "d45",
            Mode::P45 => "p45",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Frcnn => "FRCNN",
            Mode::D5 => "FRCNN+D5",
            Mode::D5r5 => "FRCNN+D5+R5",
            Mode::P5r5 => "FRCNN+P5+R5",
            Mode::P45r45 => "FRCNN+P45+R45",
            Mode::D45 => "FRCNN+D45",
            Mode::P45 => "FRCNN+P45",
        }
    }

    pub fn pen_levels(self) -> Vec<u8> {
        match self {
            Mode::P5r5 => vec![5],
            Mode::P45r45 | Mode::P45 => vec![4, 5],
            _ => vec![],
        }
    }

    pub fn rfrb_levels(self) -> Vec<u8> {
        match self {
            Mode::D5r5 | Mode::P5r5 => vec![5],
            Mode::P45r45 => vec![4, 5],
            _ => vec![],
        }
    }

    pub fn disc_levels(self) -> Vec<u8> {
        match self {
            Mode::D5 | Mode::D5r5 => vec![5],
            Mode::D45 => vec![4, 5],
            _ => vec![],
        }
    }

    /// Whether training reads the target domain at all.
    pub fn uses_target(self) -> bool {
        self != Mode::Frcnn
    }
}

impl std::str::FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['+', '_', '-'], "");
        let key = key.strip_prefix("frcnn").filter(|k| !k.is_empty()).unwrap_or(&key);
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown mode '{s}'")))
    }
}

/// Prior used for source images in the adversarial loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourcePrior {
    /// Estimator run on the clean image.
    #[default]
    Estimated,
    /// Full transmission or zero residue.
    Ideal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f32,
    pub lr_final: f32,
    /// Fraction of iterations run at `lr` before switching to `lr_final`.
    pub lr_drop_at: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lambda_reg: f32,
    pub grl_coeff: f32,
    pub mode: Mode,
    pub seed: u64,
    pub source_prior: SourcePrior,
    pub target_prior: PriorSource,
    /// Evaluate on the validation split every this many iterations (0: only at the end).
    pub eval_interval: usize,
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub eval_iou: f32,
    pub divergence_threshold: f32,
    /// Rescale each parameter tensor's gradient to at most this norm (0: off).
    pub grad_clip: f32,
    /// Train only the prior heads on the adversarial loss, extractor frozen.
    pub pen_only: bool,
    pub widths: [usize; 5],
    pub head_width: usize,
    pub pen_width: usize,
    pub pen_out_channels: usize,
    pub disc_width: usize,
    pub pen_on_corrected: bool,
    pub freeze_early: bool,
    pub stem_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            iterations: 4000,
            lr: 1e-3,
            lr_final: 1e-4,
            lr_drop_at: 5.0 / 7.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_source: 4,
            batch_target: 4,
            lambda_reg: 0.1,
            grl_coeff: 1.0,
            mode: Mode::P45r45,
            seed: 0,
            source_prior: SourcePrior::Estimated,
            target_prior: PriorSource::Estimated,
            eval_interval: 0,
            score_thresh: 0.05,
            nms_iou: 0.5,
            eval_iou: 0.5,
            divergence_threshold: 1e3,
            grad_clip: 10.0,
            pen_only: false,
            widths: m.widths,
            head_width: m.head_width,
            pen_width: m.pen_width,
            pen_out_channels: m.pen_out_channels,
            disc_width: m.disc_width,
            pen_on_corrected: m.pen_on_corrected,
            freeze_early: m.freeze_early,
            stem_seed: m.stem_seed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidArgument(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.lambda_reg >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda_reg));
        }
        if !(self.lr >= 0.0 && self.lr_final >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return bad(format!("lr_drop_at {} outside [0, 1]", self.lr_drop_at));
        }
        if self.batch_source == 0 || (self.mode.uses_target() && self.batch_target == 0) {
            return bad("batch sizes must be positive".into());
        }
        if self.pen_only && self.mode.pen_levels().is_empty() {
            return bad(format!("pen_only needs a mode with prior heads, got {}", self.mode.name()));
        }
        self.model_config(0).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CoreError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            head_width: self.head_width,
            pen_width: self.pen_width,
            pen_out_channels: self.pen_out_channels,
            disc_width: self.disc_width,
            num_classes: num_classes.max(1),
            pen_levels: self.mode.pen_levels(),
            rfrb_levels: self.mode.rfrb_levels(),
            disc_levels: self.mode.disc_levels(),
            grl_coeff: self.grl_coeff,
            pen_on_corrected: self.pen_on_corrected,
            freeze_early: self.freeze_early,
            stem_seed: self.stem_seed,
            ..ModelConfig::default()
        }
    }

    /// Step schedule: `lr`, then `lr_final` from `lr_drop_at · iterations` on.
    pub fn lr_at(&self, iteration: usize) -> f32 {
        let drop = (self.lr_drop_at as f64 * self.iterations as f64).round() as usize;
        if iteration < drop {
            self.lr
        } else {
            self.lr_final
        }
    }
}
