//! Model and training configuration, with a flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! str_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(
    /// Arrangement of the spatial (SAM) and channel (CAM) attention modules
    /// inside each encoder block.
    Ordering {
        SamOnly => "sam_only",
        CamOnly => "cam_only",
        SamThenCam => "sam_then_cam",
        CamThenSam => "cam_then_sam",
        Parallel => "parallel",
    }
);

str_enum!(
    /// Local-enhancement branch applied to the channel-attention values.
    LocalEnhance {
        DwConv => "dwconv",
        Conv1x1 => "conv1x1",
        Conv3x3 => "conv3x3",
        None => "none",
    }
);

str_enum!(
    FfnVariant {
        Gated => "gated",
        Standard => "standard",
    }
);

str_enum!(
    FusionMethod {
        Concat => "concat",
        Sub => "sub",
        Sum => "sum",
        Product => "product",
    }
);

str_enum!(
    /// Axes along which the bi-temporal cosine similarity is taken.
    ///
    /// Composite options (`height_and_width`, `channel_hw`, `channel_h_w`)
    /// average several separately reduced similarity maps.
    CosineAxis {
        Channel => "channel",
        Height => "height",
        Width => "width",
        HeightXWidth => "height_x_width",
        HeightAndWidth => "height_and_width",
        ChannelHw => "channel_hw",
        ChannelHW => "channel_h_w",
        None => "none",
    }
);

str_enum!(
    /// Which reference caption is the teacher-forcing target in an epoch.
    CaptionPolicy {
        Cycle => "cycle",
        First => "first",
    }
);

str_enum!(
    Precision {
        F32 => "f32",
        F64 => "f64",
    }
);

impl CosineAxis {
    /// Groups of `[N,C,H,W]` axes; each group is reduced jointly and the
    /// resulting maps are averaged.
    pub fn reductions(self) -> &'static [&'static [usize]] {
        match self {
            CosineAxis::Channel => &[&[1]],
            CosineAxis::Height => &[&[2]],
            CosineAxis::Width => &[&[3]],
            CosineAxis::HeightXWidth => &[&[2, 3]],
            CosineAxis::HeightAndWidth => &[&[2], &[3]],
            CosineAxis::ChannelHw => &[&[1], &[2, 3]],
            CosineAxis::ChannelHW => &[&[1], &[2], &[3]],
            CosineAxis::None => &[],
        }
    }
}

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder/decoder feature width C.
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ordering: Ordering,
    pub share_layernorm: bool,
    pub cam_local_enhance: LocalEnhance,
    pub ffn_variant: FfnVariant,
    /// Hidden width of encoder and decoder feed-forward blocks, as a multiple of C.
    pub ffn_ratio: usize,
    /// Spatial side of the encoder feature map.
    pub feature_hw: usize,
    pub image_size: usize,
    /// Backbone output channels C_o.
    pub backbone_dim: usize,
    /// When false, inputs are precomputed `[C_o, H, W]` feature maps.
    pub use_backbone: bool,
    pub fusion_method: FusionMethod,
    pub cosine_axis: CosineAxis,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 1,
            ordering: Ordering::SamThenCam,
            share_layernorm: true,
            cam_local_enhance: LocalEnhance::DwConv,
            ffn_variant: FfnVariant::Gated,
            ffn_ratio: 4,
            feature_hw: 8,
            image_size: 32,
            backbone_dim: 128,
            use_backbone: true,
            fusion_method: FusionMethod::Concat,
            cosine_axis: CosineAxis::Channel,
            max_len: 40,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_dim == 0 || self.heads == 0 {
            return bad("model_dim and heads must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be >= 1".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be >= 1".into());
        }
        if self.ffn_variant == FfnVariant::Gated && (self.ffn_ratio * self.model_dim) % 2 != 0 {
            return bad(format!(
                "gated ConvFFN needs an even hidden width, got {}",
                self.ffn_ratio * self.model_dim
            ));
        }
        if self.feature_hw == 0 || self.backbone_dim == 0 {
            return bad("feature_hw and backbone_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.use_backbone {
            self.backbone_strides()?;
        }
        Ok(())
    }

    /// Number of stride-2 stages the four-stage backbone needs.
    pub fn backbone_strides(&self) -> Result<usize> {
        let hw = self.feature_hw;
        if self.image_size % hw != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of feature_hw {hw}",
                self.image_size
            )));
        }
        let ratio = self.image_size / hw;
        if !ratio.is_power_of_two() || ratio > 16 {
            return Err(Error::Config(format!(
                "image_size / feature_hw = {ratio} must be a power of two no larger than 16"
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model_dim" => self.model_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "ordering" => self.ordering = value.parse()?,
            "share_layernorm" => self.share_layernorm = parse(key, value)?,
            "cam_local_enhance" => self.cam_local_enhance = value.parse()?,
            "ffn_variant" => self.ffn_variant = value.parse()?,
            "ffn_ratio" => self.ffn_ratio = parse(key, value)?,
            "feature_hw" => self.feature_hw = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "backbone_dim" => self.backbone_dim = parse(key, value)?,
            "use_backbone" => self.use_backbone = parse(key, value)?,
            "fusion_method" => self.fusion_method = value.parse()?,
            "cosine_axis" => self.cosine_axis = value.parse()?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("model_dim", self.model_dim.to_string());
        put("heads", self.heads.to_string());
        put("encoder_layers", self.encoder_layers.to_string());
        put("decoder_layers", self.decoder_layers.to_string());
        put("ordering", self.ordering.to_string());
        put("share_layernorm", self.share_layernorm.to_string());
        put("cam_local_enhance", self.cam_local_enhance.to_string());
        put("ffn_variant", self.ffn_variant.to_string());
        put("ffn_ratio", self.ffn_ratio.to_string());
        put("feature_hw", self.feature_hw.to_string());
        put("image_size", self.image_size.to_string());
        put("backbone_dim", self.backbone_dim.to_string());
        put("use_backbone", self.use_backbone.to_string());
        put("fusion_method", self.fusion_method.to_string());
        put("cosine_axis", self.cosine_axis.to_string());
        put("max_len", self.max_len.to_string());
        put("dropout", format_float(self.dropout));
        s
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub caption_policy: CaptionPolicy,
    pub precision: Precision,
    /// Run validation every this many epochs (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_norm: 5.0,
            caption_policy: CaptionPolicy::Cycle,
            precision: Precision::F32,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "caption_policy" => self.caption_policy = value.parse()?,
            "precision" => self.precision = value.parse()?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("learning_rate", format_float(self.learning_rate));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("beta1", format_float(self.beta1));
        put("beta2", format_float(self.beta2));
        put("adam_eps", format_float(self.adam_eps));
        put("seed", self.seed.to_string());
        put("clip_norm", format_float(self.clip_norm));
        put("caption_policy", self.caption_policy.to_string());
        put("precision", self.precision.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }
}

/// Shortest representation that parses back to the same value.
fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

/// Iterates `key = value` lines, skipping blanks and `#` comments.
pub fn kv_pairs(text: &str) -> impl Iterator<Item = Result<(&str, &str)>> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some(match line.split_once('=') {
            Some((k, v)) => Ok((k.trim(), v.trim())),
            None => Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))),
        })
    })
}

/// Parses a combined config file into model and training settings,
/// starting from defaults.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for pair in kv_pairs(text) {
        let (k, v) = pair?;
        if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
    }
    Ok((model, train))
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut model = ModelConfig::default();
    for pair in kv_pairs(text) {
        let (k, v) = pair?;
        if !model.set(k, v)? {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
    }
    Ok(model)
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut train = TrainConfig::default();
    for pair in kv_pairs(text) {
        let (k, v) = pair?;
        if !train.set(k, v)? {
            return Err(Error::Config(format!("unknown train key `{k}`")));
        }
    }
    Ok(train)
}
