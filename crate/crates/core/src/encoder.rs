//! Backbone, semantic-enhanced mapping and the spatial-channel attention
//! encoder, shared by both temporal branches.

use crate::config::{FfnVariant, LocalEnhance, ModelConfig, Ordering};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{
    activate, map_to_tokens, tokens_to_map, Act, BatchNorm2d, ConvBnAct, Ctx, DwConv, Init, LayerNorm, Linear,
    MultiHeadAttention,
};
use crate::params::ParamId;
use crate::scalar::Scalar;

/// Small strided CNN standing in for a pretrained backbone.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<ConvBnAct>,
}

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let strided = cfg.backbone_strides()?;
        let c = cfg.backbone_dim;
        let widths = [(c / 8).max(1), (c / 4).max(1), (c / 2).max(1), c];
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(4);
        for (i, &c_out) in widths.iter().enumerate() {
            let stride = if i < strided { 2 } else { 1 };
            stages.push(ConvBnAct::new(&mut init.sub(&i.to_string()), c_in, c_out, 3, stride, Act::Relu));
            c_in = c_out;
        }
        Ok(Backbone { stages })
    }

    /// `[N,3,S,S]` images to `[N,C_o,H,W]` features.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("backbone", format!("expected [N,3,H,W] images, got {s:?}")));
        }
        let mut y = x;
        for st in &self.stages {
            y = st.forward(cx, y)?;
        }
        Ok(y)
    }
}

/// Positional embedding followed by two 1×1 conv-BN-ReLU layers and a
/// depthwise convolution.
#[derive(Clone, Debug)]
pub struct Sem {
    pub pos: ParamId,
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
    pub dw: DwConv,
}

impl Sem {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c_o: usize, c: usize, hw: usize) -> Self {
        Sem {
            pos: init.normal("pos", &[c_o, hw, hw], 0.02),
            conv1: ConvBnAct::new(&mut init.sub("conv1"), c_o, c, 1, 1, Act::Relu),
            conv2: ConvBnAct::new(&mut init.sub("conv2"), c, c, 1, 1, Act::Relu),
            dw: DwConv::new(&mut init.sub("dw"), c, true),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pos = cx.p(self.pos);
        let ps = cx.g.shape(pos).to_vec();
        let xs = cx.g.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != ps[..] {
            return Err(Error::dim(
                "sem",
                format!("features {xs:?} do not match positional embedding {ps:?}"),
            ));
        }
        let pos = cx.g.reshape(pos, &[1, ps[0], ps[1], ps[2]])?;
        let y = cx.g.add(x, pos)?;
        let y = self.conv1.forward(cx, y)?;
        let y = self.conv2.forward(cx, y)?;
        self.dw.forward(cx, y)
    }
}

/// Multi-head self-attention over the H·W spatial tokens.
#[derive(Clone, Debug)]
pub struct Sam {
    pub attn: MultiHeadAttention,
}

impl Sam {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, heads: usize) -> Self {
        Sam {
            attn: MultiHeadAttention::new(init, c, heads, false),
        }
    }

    /// Returns the mixed output `[N,HW,C]` and weights `[N*h,HW,HW]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, u: Var) -> Result<(Var, Var)> {
        self.attn.forward(cx, u, u, false)
    }
}

#[derive(Clone, Debug)]
pub enum LocalBranch {
    Depthwise { dw: DwConv, bn: BatchNorm2d },
    Dense(ConvBnAct),
    None,
}

impl LocalBranch {
    fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, kind: LocalEnhance) -> Self {
        match kind {
            LocalEnhance::DwConv => LocalBranch::Depthwise {
                dw: DwConv::new(&mut init.sub("dw"), c, false),
                bn: BatchNorm2d::new(&mut init.sub("bn"), c),
            },
            LocalEnhance::Conv1x1 => LocalBranch::Dense(ConvBnAct::new(init, c, c, 1, 1, Act::Gelu)),
            LocalEnhance::Conv3x3 => LocalBranch::Dense(ConvBnAct::new(init, c, c, 3, 1, Act::Gelu)),
            LocalEnhance::None => LocalBranch::None,
        }
    }

    /// Applies the branch to a `[N,C,H,W]` map; `None` when disabled.
    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, m: Var) -> Result<Option<Var>> {
        Ok(match self {
            LocalBranch::Depthwise { dw, bn } => {
                let y = dw.forward(cx, m)?;
                let y = bn.forward(cx, y)?;
                Some(activate(cx, y, Act::Gelu)?)
            }
            LocalBranch::Dense(c) => Some(c.forward(cx, m)?),
            LocalBranch::None => None,
        })
    }
}

/// Channel attention: a C×C map from the cross-covariance of queries and
/// keys, a learnable temperature and a local branch on the values.
#[derive(Clone, Debug)]
pub struct Cam {
    pub qkv: Linear,
    pub alpha: ParamId,
    pub local: LocalBranch,
    pub dim: usize,
}

impl Cam {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, local: LocalEnhance) -> Self {
        Cam {
            qkv: Linear::new(&mut init.sub("qkv"), c, 3 * c, true),
            alpha: init.constant("alpha", &[1], (c as f64).sqrt()),
            local: LocalBranch::new(&mut init.sub("local"), c, local),
            dim: c,
        }
    }

    /// `u` is `[N,HW,C]` on an `h×w` grid. Returns `V'A + local(V') + u`
    /// and the attention `[N,C,C]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, u: Var, h: usize, w: usize) -> Result<(Var, Var)> {
        let c = self.dim;
        let qkv = self.qkv.forward(cx, u)?;
        let q = cx.g.narrow(qkv, 2, 0, c)?;
        let k = cx.g.narrow(qkv, 2, c, c)?;
        let v = cx.g.narrow(qkv, 2, 2 * c, c)?;
        let scores = cx.g.bmm(q, k, true, false)?;
        let alpha = cx.p(self.alpha);
        let scores = cx.g.div_scalar(scores, alpha)?;
        let attn = cx.g.softmax(scores, false)?;
        let mut y = cx.g.bmm(v, attn, false, false)?;
        let vm = tokens_to_map(&mut cx.g, v, h, w)?;
        if let Some(l) = self.local.forward(cx, vm)? {
            let l = map_to_tokens(&mut cx.g, l)?;
            y = cx.g.add(y, l)?;
        }
        let y = cx.g.add(y, u)?;
        Ok((y, attn))
    }
}

/// Feed-forward block with a depthwise convolution on the hidden map.
#[derive(Clone, Debug)]
pub struct ConvFfn {
    pub w1: Linear,
    pub dw: DwConv,
    pub w2: Linear,
    pub variant: FfnVariant,
}

impl ConvFfn {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, c: usize, ratio: usize, variant: FfnVariant) -> Result<Self> {
        let hidden = c * ratio;
        let (dw_c, down) = match variant {
            FfnVariant::Gated => {
                if hidden % 2 != 0 {
                    return Err(Error::Config(format!("gated ConvFFN needs an even hidden width, got {hidden}")));
                }
                (hidden / 2, hidden / 2)
            }
            FfnVariant::Standard => (hidden, hidden),
        };
        Ok(ConvFfn {
            w1: Linear::new(&mut init.sub("w1"), c, hidden, true),
            dw: DwConv::new(&mut init.sub("dw"), dw_c, true),
            w2: Linear::new(&mut init.sub("w2"), down, c, true),
            variant,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, u: Var, h: usize, w: usize) -> Result<Var> {
        let a = self.w1.forward(cx, u)?;
        let a = cx.g.gelu(a)?;
        match self.variant {
            FfnVariant::Gated => {
                let half = self.w1.d_out / 2;
                let l1 = cx.g.narrow(a, 2, 0, half)?;
                let l2 = cx.g.narrow(a, 2, half, half)?;
                self.gate(cx, l1, l2, h, w)
            }
            FfnVariant::Standard => {
                let m = tokens_to_map(&mut cx.g, a, h, w)?;
                let m = self.dw.forward(cx, m)?;
                let t = map_to_tokens(&mut cx.g, m)?;
                self.w2.forward(cx, t)
            }
        }
    }

    /// `(DWConv(l1) ⊙ l2)·W2' + b2'` for token tensors `[N,HW,2C]`.
    pub fn gate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, l1: Var, l2: Var, h: usize, w: usize) -> Result<Var> {
        let m = tokens_to_map(&mut cx.g, l1, h, w)?;
        let m = self.dw.forward(cx, m)?;
        let l1 = map_to_tokens(&mut cx.g, m)?;
        let z = cx.g.mul(l1, l2)?;
        self.w2.forward(cx, z)
    }
}

/// Attention weights produced by one encoder block.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerTrace {
    /// `[N*h, HW, HW]`
    pub sam: Option<Var>,
    /// `[N, C, C]`
    pub cam: Option<Var>,
}

/// One pre-norm block: `x + SAM(LN(x))`, `x + CAM(LN(x))` in the configured
/// arrangement, then `x + ConvFFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ordering: Ordering,
    pub sam: Option<(LayerNorm, Sam)>,
    pub cam: Option<(LayerNorm, Cam)>,
    pub ffn_norm: LayerNorm,
    pub ffn: ConvFfn,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.model_dim;
        let both = matches!(cfg.ordering, Ordering::SamThenCam | Ordering::CamThenSam | Ordering::Parallel);
        let use_sam = both || cfg.ordering == Ordering::SamOnly;
        let use_cam = both || cfg.ordering == Ordering::CamOnly;
        let mut shared: Option<LayerNorm> = None;
        let sam = if use_sam {
            let ln = LayerNorm::new(&mut init.sub("sam_norm"), c);
            if both && cfg.share_layernorm {
                shared = Some(ln.clone());
            }
            Some((ln, Sam::new(&mut init.sub("sam"), c, cfg.heads)))
        } else {
            None
        };
        let cam = if use_cam {
            let ln = match shared {
                Some(ln) => ln,
                None => LayerNorm::new(&mut init.sub("cam_norm"), c),
            };
            Some((ln, Cam::new(&mut init.sub("cam"), c, cfg.cam_local_enhance)))
        } else {
            None
        };
        Ok(EncoderLayer {
            ordering: cfg.ordering,
            sam,
            cam,
            ffn_norm: LayerNorm::new(&mut init.sub("ffn_norm"), c),
            ffn: ConvFfn::new(&mut init.sub("ffn"), c, cfg.ffn_ratio, cfg.ffn_variant)?,
        })
    }

    fn sam_branch<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, tr: &mut LayerTrace) -> Result<Var> {
        let (ln, sam) = self.sam.as_ref().expect("layer has a spatial branch");
        let u = ln.forward(cx, x)?;
        let (y, a) = sam.forward(cx, u)?;
        tr.sam = Some(a);
        cx.drop(y)
    }

    fn cam_branch<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, h: usize, w: usize, tr: &mut LayerTrace) -> Result<Var> {
        let (ln, cam) = self.cam.as_ref().expect("layer has a channel branch");
        let u = ln.forward(cx, x)?;
        let (y, a) = cam.forward(cx, u, h, w)?;
        tr.cam = Some(a);
        cx.drop(y)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, h: usize, w: usize) -> Result<(Var, LayerTrace)> {
        let mut tr = LayerTrace::default();
        let mut x = x;
        match self.ordering {
            Ordering::SamOnly => {
                let s = self.sam_branch(cx, x, &mut tr)?;
                x = cx.g.add(x, s)?;
            }
            Ordering::CamOnly => {
                let c = self.cam_branch(cx, x, h, w, &mut tr)?;
                x = cx.g.add(x, c)?;
            }
            Ordering::SamThenCam => {
                let s = self.sam_branch(cx, x, &mut tr)?;
                x = cx.g.add(x, s)?;
                let c = self.cam_branch(cx, x, h, w, &mut tr)?;
                x = cx.g.add(x, c)?;
            }
            Ordering::CamThenSam => {
                let c = self.cam_branch(cx, x, h, w, &mut tr)?;
                x = cx.g.add(x, c)?;
                let s = self.sam_branch(cx, x, &mut tr)?;
                x = cx.g.add(x, s)?;
            }
            Ordering::Parallel => {
                let s = self.sam_branch(cx, x, &mut tr)?;
                let c = self.cam_branch(cx, x, h, w, &mut tr)?;
                let sc = cx.g.add(s, c)?;
                x = cx.g.add(x, sc)?;
            }
        }
        let u = self.ffn_norm.forward(cx, x)?;
        let f = self.ffn.forward(cx, u, h, w)?;
        let f = cx.drop(f)?;
        let x = cx.g.add(x, f)?;
        Ok((x, tr))
    }
}

/// Per-image encoder: optional backbone, SEM, then E attention blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Option<Backbone>,
    pub sem: Sem,
    pub layers: Vec<EncoderLayer>,
    pub hw: usize,
    pub dim: usize,
}

/// Result of encoding one batch of images.
pub struct Encoded {
    /// `[N, HW, C]`
    pub tokens: Var,
    pub traces: Vec<LayerTrace>,
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = if cfg.use_backbone {
            Some(Backbone::new(&mut init.sub("backbone"), cfg)?)
        } else {
            None
        };
        let sem = Sem::new(&mut init.sub("sem"), cfg.backbone_dim, cfg.model_dim, cfg.feature_hw);
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            layers.push(EncoderLayer::new(&mut init.sub(&format!("layer{i}")), cfg)?);
        }
        Ok(Encoder {
            backbone,
            sem,
            layers,
            hw: cfg.feature_hw,
            dim: cfg.model_dim,
        })
    }

    /// Backbone features, or the input itself when it already holds them.
    pub fn features<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.backbone {
            Some(b) => b.forward(cx, x),
            None => Ok(x),
        }
    }

    /// Encodes `[N,3,S,S]` images (or `[N,C_o,H,W]` features) to tokens.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Encoded> {
        let f = self.features(cx, x)?;
        let m = self.sem.forward(cx, f)?;
        let mut t = map_to_tokens(&mut cx.g, m)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, tr) = layer.forward(cx, t, self.hw, self.hw)?;
            t = y;
            traces.push(tr);
        }
        Ok(Encoded { tokens: t, traces })
    }
}
