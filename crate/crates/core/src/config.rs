//! Experiment configuration: dimensions, ablation switches, augmentation
//! and optimizer schedule. Serialized as JSON; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{IrnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per input clip.
    pub frames_in: usize,
    /// Trajectory length `T` (slow-path frames).
    pub frames: usize,
    /// Frame side length after augmentation.
    pub size: usize,
    pub num_classes: usize,
    pub confidence_threshold: f64,
    /// Binary map resolution `G`.
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Pooled detection feature width `C` (third-block channels).
    pub channels: usize,
    /// Action representation width `M` (final-block channels).
    pub action_dim: usize,
    pub slow_stem: usize,
    pub slow_width: usize,
    pub fast_stem: usize,
    pub fast_width: usize,
    pub lateral: usize,
    /// Side of the square patch fed to the patch MLP.
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeConfig {
    pub channels: [usize; 3],
    pub bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/sqrt(width / heads)`.
    PerHead,
    /// `1/sqrt(N)` for encoders and `1/sqrt(M)` for decoders.
    SqrtN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKv {
    /// Project the whole `6N` encoding to one `M` token.
    Single,
    /// One `M` token per pair encoding.
    SixTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
    pub attn_scale: AttnScale,
    pub decoder_kv: DecoderKv,
    /// Drops every bias in the encoders and decoders.
    pub bias: bool,
}

/// Which of the six (hand, counterpart) encoders are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMask {
    pub hl_ol: bool,
    pub hl_or: bool,
    pub hl_hr: bool,
    pub hr_or: bool,
    pub hr_ol: bool,
    pub hr_hl: bool,
}

impl PairMask {
    pub const ALL: PairMask = PairMask::from_array([true; 6]);
    pub const NONE: PairMask = PairMask::from_array([false; 6]);

    /// Flags in the fixed pair order
    /// `(HL,OL) (HL,OR) (HL,HR) (HR,OR) (HR,OL) (HR,HL)`.
    pub const fn from_array(a: [bool; 6]) -> Self {
        Self {
            hl_ol: a[0],
            hl_or: a[1],
            hl_hr: a[2],
            hr_or: a[3],
            hr_ol: a[4],
            hr_hl: a[5],
        }
    }

    pub fn to_array(self) -> [bool; 6] {
        [self.hl_ol, self.hl_or, self.hl_hr, self.hr_or, self.hr_ol, self.hr_hl]
    }

    pub fn any(self) -> bool {
        self.to_array().iter().any(|&b| b)
    }

    pub fn count(self) -> usize {
        self.to_array().iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRep {
    /// No action representation: classify the projected encodings.
    None,
    /// Late fusion of projected encodings and `F`.
    Concat,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRep {
    Roi,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajMode {
    /// Middle-frame detections only.
    Middle,
    /// Middle-frame boxes copied to all frames.
    Duplicate,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMask {
    pub pairs: PairMask,
    pub use_decoder: ActionRep,
    pub detection_rep: DetectionRep,
    pub spe_mode: FusionMode,
    pub traj_mode: TrajMode,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self {
            pairs: PairMask::ALL,
            use_decoder: ActionRep::Decoder,
            detection_rep: DetectionRep::Roi,
            spe_mode: FusionMode::Sum,
            traj_mode: TrajMode::Trajectory,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    None,
    Std,
    Scr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub scale_range: [f64; 2],
}

/// No normalization layers anywhere, so plain SGD at lr 0.01 occasionally
/// takes a step large enough to overflow the logits.
pub const DESK_GRAD_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    /// The learning rate is divided by this at every decay epoch.
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global L2 bound on the batch-mean gradient; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
}

impl OptimizerSpec {
    /// Learning rate used during (0-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.decay_factor.powi(decays as i32)
    }

    /// Desk schedule: 20 epochs, lr 0.01 dropped at 12 and 18.
    pub fn desk() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![12, 18],
            decay_factor: 10.0,
            epochs: 20,
            batch_size: 16,
            grad_clip: DESK_GRAD_CLIP,
        }
    }

    /// Long schedule: 24 epochs, lr 0.001 dropped at 10 and 20.
    pub fn epic() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_epochs: vec![10, 20],
            decay_factor: 10.0,
            epochs: 24,
            batch_size: 16,
            grad_clip: DESK_GRAD_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(IrnError::Config("optim.lr must be > 0".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IrnError::Config("optim.decay_epochs must be strictly increasing".into()));
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(IrnError::Config("optim.decay_epochs must be < optim.epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(IrnError::Config("optim.batch_size must be > 0".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(IrnError::Config("optim.decay_factor must be > 0".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(IrnError::Config("optim.grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub spe: SpeConfig,
    pub interaction: InteractionConfig,
    pub ablation: AblationMask,
    pub augment: AugmentConfig,
    pub optim: OptimizerSpec,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: 16-frame 64x64 clips, T=8, C=64, M=128.
    pub fn desk() -> Self {
        Self {
            data: DataConfig {
                frames_in: 16,
                frames: 8,
                size: 64,
                num_classes: 6,
                confidence_threshold: 0.5,
                grid: 64,
            },
            backbone: BackboneConfig {
                channels: 64,
                action_dim: 128,
                slow_stem: 16,
                slow_width: 24,
                fast_stem: 4,
                fast_width: 8,
                lateral: 8,
                patch_size: 16,
            },
            spe: SpeConfig {
                channels: [8, 16, 32],
                bias: true,
            },
            interaction: InteractionConfig {
                heads: 4,
                layers: 3,
                dropout: 0.1,
                ffn_mult: 2,
                attn_scale: AttnScale::PerHead,
                decoder_kv: DecoderKv::SixTokens,
                bias: true,
            },
            ablation: AblationMask::default(),
            augment: AugmentConfig {
                mode: AugmentMode::Scr,
                scale_range: [1.0, 1.3],
            },
            optim: OptimizerSpec::desk(),
            seed: 0,
        }
    }

    /// Full-size dimensions: 32-frame 224x224 clips, C=640, N=5120,
    /// M=2304, 16 heads, long schedule.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.data.frames_in = 32;
        c.data.size = 224;
        c.backbone.channels = 640;
        c.backbone.action_dim = 2304;
        c.backbone.slow_stem = 64;
        c.backbone.slow_width = 256;
        c.backbone.fast_stem = 8;
        c.backbone.fast_width = 32;
        c.backbone.lateral = 64;
        c.interaction.heads = 16;
        c.optim = OptimizerSpec::epic();
        c
    }

    /// `T` after applying the trajectory mode.
    pub fn trajectory_len(&self) -> usize {
        match self.ablation.traj_mode {
            TrajMode::Middle => 1,
            _ => self.data.frames,
        }
    }

    /// Flattened pair-encoding width `N = T x C`.
    pub fn pair_dim(&self) -> usize {
        self.trajectory_len() * self.backbone.channels
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let err = |m: String| Err(IrnError::Config(m));
        if d.frames == 0 || !d.frames_in.is_multiple_of(2 * d.frames) {
            return err(format!(
                "data.frames_in ({}) must be a multiple of 2 x data.frames ({})",
                d.frames_in, d.frames
            ));
        }
        if d.size < 16 || !d.size.is_multiple_of(16) {
            return err(format!("data.size ({}) must be a positive multiple of 16", d.size));
        }
        if d.grid < 8 || !d.grid.is_multiple_of(8) {
            return err(format!("data.grid ({}) must be a positive multiple of 8", d.grid));
        }
        if d.num_classes < 2 {
            return err("data.num_classes must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&d.confidence_threshold) {
            return err("data.confidence_threshold must be in [0,1]".into());
        }
        let i = &self.interaction;
        if i.heads == 0 || !self.backbone.channels.is_multiple_of(i.heads) || !self.backbone.action_dim.is_multiple_of(i.heads) {
            return err(format!(
                "interaction.heads ({}) must divide backbone.channels ({}) and backbone.action_dim ({})",
                i.heads, self.backbone.channels, self.backbone.action_dim
            ));
        }
        if i.layers == 0 {
            return err("interaction.layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&i.dropout) {
            return err("interaction.dropout must be in [0,1)".into());
        }
        if i.ffn_mult == 0 {
            return err("interaction.ffn_mult must be >= 1".into());
        }
        let [lo, hi] = self.augment.scale_range;
        if !(lo >= 1.0 && lo <= hi) {
            return err("augment.scale_range must satisfy 1 <= lo <= hi".into());
        }
        if self.spe.channels.contains(&0) {
            return err("spe.channels must be positive".into());
        }
        if self.backbone.patch_size < 2 {
            return err("backbone.patch_size must be >= 2".into());
        }
        self.optim.validate()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Deserializes and validates.
    pub fn from_value(v: Value) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(s)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        canonical_hash(&self.to_value())
    }

    /// Applies a dotted `key=value` override, e.g. `interaction.heads=4`.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut v = self.to_value();
        apply_override(&mut v, key, value)?;
        Self::from_value(v)
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn canon(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<_> = m.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), canon(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(canon).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&canon(v)).expect("json value serializes")
}

pub fn canonical_hash(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(v).as_bytes()))
}

/// Sets `key` (dotted path) inside `root`. The key must already exist and the
/// new value must have the same JSON type as the old one.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| IrnError::Config(format!("unknown config key `{key}`")))?,
            _ => return Err(IrnError::Config(format!("unknown config key `{key}`"))),
        };
    }
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let compatible = match (&*cur, &parsed) {
        (Value::Number(old), Value::Number(new)) => old.is_f64() || !new.is_f64(),
        (Value::Bool(_), Value::Bool(_))
        | (Value::String(_), Value::String(_))
        | (Value::Array(_), Value::Array(_)) => true,
        _ => false,
    };
    if !compatible {
        return Err(IrnError::Config(format!(
            "type mismatch for `{key}`: expected {}, got `{raw}`",
            json_type(cur)
        )));
    }
    *cur = parsed;
    Ok(())
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
