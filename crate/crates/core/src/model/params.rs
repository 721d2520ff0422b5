use super::ModelConfig;
use crate::blocks::{
    linear_weight, BlockParams, BlockVars, LayerNormVars, LayerNormParams, LeafBinder,
    PackedBinder, ParamBinder, PositionalEncoding,
};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Global branch parameters: 2D embedding, spatial positions and blocks,
/// temporal positions and blocks (token width J*D, one token per frame).
#[derive(Debug, Clone)]
pub struct GimParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub spatial_pe: PositionalEncoding,
    pub spatial_blocks: Vec<BlockParams>,
    pub temporal_pe: PositionalEncoding,
    pub temporal_blocks: Vec<BlockParams>,
}

/// Local branch parameters: optional trajectory embedding (absent when
/// shared with the global branch), trajectory positions and blocks, and the
/// cross-trajectory table and blocks (token width T*D, one token per joint).
#[derive(Debug, Clone)]
pub struct LimParams {
    pub embed: Option<(Tensor, Tensor)>,
    pub ste_pe: PositionalEncoding,
    pub ste_blocks: Vec<BlockParams>,
    pub cte_pe: PositionalEncoding,
    pub cte_blocks: Vec<BlockParams>,
}

/// Fusion head: frame conv 2T -> T over flattened features, then a
/// layer-normed linear reduction D -> 3 per token.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub ln: LayerNormParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Refinement perceptron: two linear layers producing the two candidate
/// confidences.
#[derive(Debug, Clone)]
pub struct RefineParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// The full named-parameter set. Construction order is fixed so that a seed
/// determines every value.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub gim: GimParams,
    pub lim: Option<LimParams>,
    pub head: HeadParams,
    pub refine: Option<RefineParams>,
}

fn blocks_init<R: Rng>(
    rng: &mut R,
    n: usize,
    width: usize,
    heads: usize,
    ratio: usize,
) -> Result<Vec<BlockParams>> {
    (0..n).map(|_| BlockParams::init(rng, width, heads, ratio)).collect()
}

impl ModelParams {
    pub fn init<R: Rng>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let t = config.frames;
        let j = config.joints;

        let gim = GimParams {
            embed_w: linear_weight(rng, 2, d),
            embed_b: Tensor::zeros(vec![d]).with_grad(),
            spatial_pe: PositionalEncoding::init(rng, j, d),
            spatial_blocks: blocks_init(
                rng,
                config.gim_spatial_layers,
                d,
                config.n_heads,
                config.mlp_ratio,
            )?,
            temporal_pe: PositionalEncoding::init(rng, t, j * d),
            temporal_blocks: blocks_init(
                rng,
                config.gim_temporal_layers,
                j * d,
                config.n_heads,
                config.mlp_ratio,
            )?,
        };

        let lim = if config.gim_only {
            None
        } else {
            Some(LimParams {
                embed: (!config.share_traj_embed).then(|| {
                    (linear_weight(rng, 2, d), Tensor::zeros(vec![d]).with_grad())
                }),
                ste_pe: PositionalEncoding::init(rng, t, d),
                ste_blocks: blocks_init(
                    rng,
                    config.ste_layers,
                    d,
                    config.n_heads,
                    config.mlp_ratio,
                )?,
                cte_pe: PositionalEncoding::init(rng, j, t * d),
                cte_blocks: blocks_init(
                    rng,
                    config.cte_layers,
                    t * d,
                    config.cte_heads,
                    config.mlp_ratio,
                )?,
            })
        };

        let conv_w = if config.gim_only {
            // [I | 0]: pass the global branch through unchanged at init.
            let mut w = Tensor::zeros(vec![t, 2 * t]);
            for i in 0..t {
                w.data_mut()[i * 2 * t + i] = 1.0;
            }
            w.with_grad()
        } else {
            let bound = 1.0 / ((2 * t) as f64).sqrt();
            Tensor::uniform(rng, vec![t, 2 * t], -bound, bound).with_grad()
        };
        let head = HeadParams {
            conv_w,
            conv_b: Tensor::zeros(vec![t]).with_grad(),
            ln: LayerNormParams::identity(d),
            out_w: linear_weight(rng, d, 3),
            out_b: Tensor::zeros(vec![3]).with_grad(),
        };

        let refine = config.refine_enabled.then(|| {
            let input = 2 * j * 3;
            let hidden = config.refine_hidden();
            RefineParams {
                w1: linear_weight(rng, input, hidden),
                b1: Tensor::zeros(vec![hidden]).with_grad(),
                w2: linear_weight(rng, hidden, 2),
                b2: Tensor::zeros(vec![2]).with_grad(),
            }
        });

        Ok(ModelParams { config: config.clone(), gim, lim, head, refine })
    }

    /// Every learnable tensor with its stable name, in a fixed order shared
    /// by [`ModelParams::named_mut`] and [`ModelParams::bind`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("gim.embed.w".to_string(), &self.gim.embed_w));
        out.push(("gim.embed.b".to_string(), &self.gim.embed_b));
        self.gim.spatial_pe.push_named("gim.spatial_pe", &mut out);
        for (i, b) in self.gim.spatial_blocks.iter().enumerate() {
            b.push_named(&format!("gim.spatial.{i}"), &mut out);
        }
        self.gim.temporal_pe.push_named("gim.temporal_pe", &mut out);
        for (i, b) in self.gim.temporal_blocks.iter().enumerate() {
            b.push_named(&format!("gim.temporal.{i}"), &mut out);
        }
        if let Some(lim) = &self.lim {
            if let Some((w, b)) = &lim.embed {
                out.push(("lim.embed.w".to_string(), w));
                out.push(("lim.embed.b".to_string(), b));
            }
            lim.ste_pe.push_named("lim.ste_pe", &mut out);
            for (i, b) in lim.ste_blocks.iter().enumerate() {
                b.push_named(&format!("lim.ste.{i}"), &mut out);
            }
            lim.cte_pe.push_named("lim.cte_pe", &mut out);
            for (i, b) in lim.cte_blocks.iter().enumerate() {
                b.push_named(&format!("lim.cte.{i}"), &mut out);
            }
        }
        out.push(("head.conv_w".to_string(), &self.head.conv_w));
        out.push(("head.conv_b".to_string(), &self.head.conv_b));
        self.head.ln.push_named("head.ln", &mut out);
        out.push(("head.out_w".to_string(), &self.head.out_w));
        out.push(("head.out_b".to_string(), &self.head.out_b));
        if let Some(r) = &self.refine {
            out.push(("refine.w1".to_string(), &r.w1));
            out.push(("refine.b1".to_string(), &r.b1));
            out.push(("refine.w2".to_string(), &r.w2));
            out.push(("refine.b2".to_string(), &r.b2));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("gim.embed.w".to_string(), &mut self.gim.embed_w));
        out.push(("gim.embed.b".to_string(), &mut self.gim.embed_b));
        self.gim.spatial_pe.push_named_mut("gim.spatial_pe", &mut out);
        for (i, b) in self.gim.spatial_blocks.iter_mut().enumerate() {
            b.push_named_mut(&format!("gim.spatial.{i}"), &mut out);
        }
        self.gim.temporal_pe.push_named_mut("gim.temporal_pe", &mut out);
        for (i, b) in self.gim.temporal_blocks.iter_mut().enumerate() {
            b.push_named_mut(&format!("gim.temporal.{i}"), &mut out);
        }
        if let Some(lim) = &mut self.lim {
            if let Some((w, b)) = &mut lim.embed {
                out.push(("lim.embed.w".to_string(), w));
                out.push(("lim.embed.b".to_string(), b));
            }
            lim.ste_pe.push_named_mut("lim.ste_pe", &mut out);
            for (i, b) in lim.ste_blocks.iter_mut().enumerate() {
                b.push_named_mut(&format!("lim.ste.{i}"), &mut out);
            }
            lim.cte_pe.push_named_mut("lim.cte_pe", &mut out);
            for (i, b) in lim.cte_blocks.iter_mut().enumerate() {
                b.push_named_mut(&format!("lim.cte.{i}"), &mut out);
            }
        }
        out.push(("head.conv_w".to_string(), &mut self.head.conv_w));
        out.push(("head.conv_b".to_string(), &mut self.head.conv_b));
        self.head.ln.push_named_mut("head.ln", &mut out);
        out.push(("head.out_w".to_string(), &mut self.head.out_w));
        out.push(("head.out_b".to_string(), &mut self.head.out_b));
        if let Some(r) = &mut self.refine {
            out.push(("refine.w1".to_string(), &mut r.w1));
            out.push(("refine.b1".to_string(), &mut r.b1));
            out.push(("refine.w2".to_string(), &mut r.w2));
            out.push(("refine.b2".to_string(), &mut r.b2));
        }
        out
    }

    /// Registers every parameter as a graph leaf. The binding's `reg` list
    /// carries (name, Var) pairs in [`ModelParams::named`] order for gradient
    /// collection.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let mut binder = LeafBinder { reg: Vec::new() };
        let bound = self.bind_with(g, &mut binder).expect("leaf binding cannot fail");
        BoundModel { reg: binder.reg, ..bound }
    }

    /// Binds every parameter to a slice of one flat vector var (in `named()`
    /// order), so one gradient check covers the whole parameter set.
    pub fn bind_packed(&self, g: &mut Graph, theta: Var) -> Result<BoundModel> {
        let mut binder = PackedBinder { theta, offset: 0, reg: Vec::new() };
        let bound = self.bind_with(g, &mut binder)?;
        let expected = g.data(theta).len();
        if binder.offset != expected {
            return Err(crate::error::Error::Shape(format!(
                "packed parameter vector has {expected} values, model needs {}",
                binder.offset
            )));
        }
        Ok(BoundModel { reg: binder.reg, ..bound })
    }

    fn bind_with(&self, g: &mut Graph, binder: &mut dyn ParamBinder) -> Result<BoundModel> {
        let embed_w = binder.leaf(g, "gim.embed.w".to_string(), &self.gim.embed_w)?;
        let embed_b = binder.leaf(g, "gim.embed.b".to_string(), &self.gim.embed_b)?;
        let spatial_pe = self.gim.spatial_pe.bind(g, "gim.spatial_pe", binder)?;
        let spatial_blocks = self
            .gim
            .spatial_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(g, &format!("gim.spatial.{i}"), binder))
            .collect::<Result<Vec<BlockVars>>>()?;
        let temporal_pe = self.gim.temporal_pe.bind(g, "gim.temporal_pe", binder)?;
        let temporal_blocks = self
            .gim
            .temporal_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(g, &format!("gim.temporal.{i}"), binder))
            .collect::<Result<Vec<BlockVars>>>()?;
        let gim =
            GimVars { embed_w, embed_b, spatial_pe, spatial_blocks, temporal_pe, temporal_blocks };

        let lim = match &self.lim {
            None => None,
            Some(lim) => {
                let embed = match &lim.embed {
                    None => None,
                    Some((w, b)) => {
                        let wv = binder.leaf(g, "lim.embed.w".to_string(), w)?;
                        let bv = binder.leaf(g, "lim.embed.b".to_string(), b)?;
                        Some((wv, bv))
                    }
                };
                let ste_pe = lim.ste_pe.bind(g, "lim.ste_pe", binder)?;
                let ste_blocks = lim
                    .ste_blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.bind(g, &format!("lim.ste.{i}"), binder))
                    .collect::<Result<Vec<BlockVars>>>()?;
                let cte_pe = lim.cte_pe.bind(g, "lim.cte_pe", binder)?;
                let cte_blocks = lim
                    .cte_blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.bind(g, &format!("lim.cte.{i}"), binder))
                    .collect::<Result<Vec<BlockVars>>>()?;
                Some(LimVars { embed, ste_pe, ste_blocks, cte_pe, cte_blocks })
            }
        };

        let conv_w = binder.leaf(g, "head.conv_w".to_string(), &self.head.conv_w)?;
        let conv_b = binder.leaf(g, "head.conv_b".to_string(), &self.head.conv_b)?;
        let ln = self.head.ln.bind(g, "head.ln", binder)?;
        let out_w = binder.leaf(g, "head.out_w".to_string(), &self.head.out_w)?;
        let out_b = binder.leaf(g, "head.out_b".to_string(), &self.head.out_b)?;
        let head = HeadVars { conv_w, conv_b, ln, out_w, out_b };

        let refine = match &self.refine {
            None => None,
            Some(r) => Some(RefineVars {
                w1: binder.leaf(g, "refine.w1".to_string(), &r.w1)?,
                b1: binder.leaf(g, "refine.b1".to_string(), &r.b1)?,
                w2: binder.leaf(g, "refine.w2".to_string(), &r.w2)?,
                b2: binder.leaf(g, "refine.b2".to_string(), &r.b2)?,
            }),
        };

        Ok(BoundModel { config: self.config.clone(), gim, lim, head, refine, reg: Vec::new() })
    }

    /// Flattens every parameter into one vector, in `named()` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

}

pub struct GimVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub spatial_pe: Var,
    pub spatial_blocks: Vec<BlockVars>,
    pub temporal_pe: Var,
    pub temporal_blocks: Vec<BlockVars>,
}

pub struct LimVars {
    pub embed: Option<(Var, Var)>,
    pub ste_pe: Var,
    pub ste_blocks: Vec<BlockVars>,
    pub cte_pe: Var,
    pub cte_blocks: Vec<BlockVars>,
}

pub struct HeadVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub ln: LayerNormVars,
    pub out_w: Var,
    pub out_b: Var,
}

pub struct RefineVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// All model parameters registered on one graph, plus the (name, Var) list
/// in stable order.
pub struct BoundModel {
    pub config: ModelConfig,
    pub gim: GimVars,
    pub lim: Option<LimVars>,
    pub head: HeadVars,
    pub refine: Option<RefineVars>,
    pub reg: Vec<(String, Var)>,
}
