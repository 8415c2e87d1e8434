//! Cosine-similarity guided fusion of the two encoded feature maps.

use crate::config::{CosineAxis, FusionMethod, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Act, ConvBnAct, Ctx, Init};
use crate::scalar::Scalar;

pub const COSINE_EPS: f64 = 1e-8;

/// Similarity map of two `[N,C,H,W]` maps for `axis`.
///
/// Reduced axes are kept with extent 1 so the result broadcasts back onto
/// the inputs. `None` for [`CosineAxis::None`].
pub fn cosine_map<T: Scalar>(g: &mut Graph<T>, z1: Var, z2: Var, axis: CosineAxis) -> Result<Option<Var>> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1 != s2 || s1.len() != 4 {
        return Err(Error::dim("cosine_map", format!("{s1:?} vs {s2:?}")));
    }
    let groups = axis.reductions();
    let mut acc: Option<Var> = None;
    for axes in groups {
        let c = g.cosine(z1, z2, axes, COSINE_EPS)?;
        acc = Some(match acc {
            None => c,
            Some(a) => g.add(a, c)?,
        });
    }
    match acc {
        Some(a) if groups.len() > 1 => Ok(Some(g.scale(a, T::of(1.0 / groups.len() as f64))?)),
        other => Ok(other),
    }
}

/// Fusion head: merge, optional 2C→C reduction, and a bottleneck residual
/// block whose shortcut is the merged map.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub method: FusionMethod,
    pub axis: CosineAxis,
    pub reduce: Option<ConvBnAct>,
    pub res: [ConvBnAct; 3],
}

impl Fusion {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.model_dim;
        let reduce = (cfg.fusion_method == FusionMethod::Concat)
            .then(|| ConvBnAct::new(&mut init.sub("reduce"), 2 * c, c, 1, 1, Act::Relu));
        let res = [
            ConvBnAct::new(&mut init.sub("res1"), c, c, 1, 1, Act::Relu),
            ConvBnAct::new(&mut init.sub("res2"), c, c, 3, 1, Act::Relu),
            ConvBnAct::new(&mut init.sub("res3"), c, c, 1, 1, Act::Identity),
        ];
        Fusion {
            method: cfg.fusion_method,
            axis: cfg.cosine_axis,
            reduce,
            res,
        }
    }

    /// The map entering the residual block, before the block itself.
    pub fn merge<T: Scalar>(&self, cx: &mut Ctx<'_, T>, z1: Var, z2: Var) -> Result<Var> {
        let sim = cosine_map(&mut cx.g, z1, z2, self.axis)?;
        let (a, b) = match sim {
            Some(s) => (cx.g.add(z1, s)?, cx.g.add(z2, s)?),
            None => (z1, z2),
        };
        match self.method {
            FusionMethod::Concat => {
                let cat = cx.g.concat(&[a, b], 1)?;
                self.reduce.as_ref().expect("concat fusion has a reduction").forward(cx, cat)
            }
            FusionMethod::Sub => cx.g.sub(a, b),
            FusionMethod::Sum => cx.g.add(a, b),
            FusionMethod::Product => cx.g.mul(a, b),
        }
    }

    /// Fuses two `[N,C,H,W]` maps into one `[N,C,H,W]` map.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, z1: Var, z2: Var) -> Result<Var> {
        let x = self.merge(cx, z1, z2)?;
        let mut y = x;
        for r in &self.res {
            y = r.forward(cx, y)?;
        }
        cx.g.add(y, x)
    }
}
