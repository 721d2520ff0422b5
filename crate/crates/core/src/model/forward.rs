use super::params::{BoundModel, HeadVars, LimVars, RefineVars};
use super::ModelConfig;
use crate::blocks::{embed, encoder_block, linear, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::tensor::kernels::fmt_shape;

fn expect_shape(g: &Graph, v: Var, want: &[usize], what: &str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::Shape(format!(
            "{what}: got {}, expected {}",
            fmt_shape(g.shape(v)),
            fmt_shape(want)
        )));
    }
    Ok(())
}

/// T x J x C -> J x T x C: each joint's row becomes its trajectory.
pub fn reconstruct_trajectories(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).len() != 3 {
        return Err(Error::Shape(format!(
            "trajectory reconstruction needs rank 3, got {}",
            fmt_shape(g.shape(x))
        )));
    }
    g.permute(x, &[1, 0, 2])
}

/// Spatial stage of the global branch: per-frame joint tokens of width D
/// through the spatial blocks, positions added once before block 1.
pub fn gim_spatial_stage(g: &mut Graph, x2d: Var, m: &BoundModel) -> Result<(Var, Vec<Var>)> {
    let cfg = &m.config;
    expect_shape(g, x2d, &[cfg.frames, cfg.joints, 2], "gim input")?;
    let mut s = embed(g, x2d, m.gim.embed_w, m.gim.embed_b, m.gim.spatial_pe)?;
    let mut weights = Vec::new();
    for b in &m.gim.spatial_blocks {
        let (y, w) = encoder_block(g, s, b)?;
        s = y;
        weights.push(w);
    }
    Ok((s, weights))
}

/// Global branch: spatial encoder over joints per frame, then temporal
/// encoder over whole-frame tokens of width J*D. Returns the T x J x D
/// output plus per-layer attention weights for both stages.
pub fn gim_forward(
    g: &mut Graph,
    x2d: Var,
    m: &BoundModel,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let cfg = &m.config;
    let (s, spatial_w) = gim_spatial_stage(g, x2d, m)?;
    let flat = g.reshape(s, &[cfg.frames, cfg.joints * cfg.model_dim])?;
    let mut t = g.add(flat, m.gim.temporal_pe)?;
    let mut temporal_w = Vec::new();
    for b in &m.gim.temporal_blocks {
        let (y, w) = encoder_block(g, t, b)?;
        t = y;
        temporal_w.push(w);
    }
    let out = g.reshape(t, &[cfg.frames, cfg.joints, cfg.model_dim])?;
    Ok((out, spatial_w, temporal_w))
}

/// Self-trajectory encoder: embedded trajectories [J, T, D], each joint's T
/// tokens processed independently (batched over J); temporal positions added
/// once before block 1. No information crosses joints.
pub fn ste_forward(g: &mut Graph, traj: Var, lim: &LimVars) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(traj).to_vec();
    let pe_shape = g.shape(lim.ste_pe).to_vec();
    if shape.len() != 3 || shape[1] != pe_shape[0] || shape[2] != pe_shape[1] {
        return Err(Error::Shape(format!(
            "ste input {} vs positional table {}",
            fmt_shape(&shape),
            fmt_shape(&pe_shape)
        )));
    }
    let mut s = g.add(traj, lim.ste_pe)?;
    let mut weights = Vec::new();
    for b in &lim.ste_blocks {
        let (y, w) = encoder_block(g, s, b)?;
        s = y;
        weights.push(w);
    }
    Ok((s, weights))
}

/// Cross-trajectory encoder: each joint's whole trajectory flattened into one
/// token of width T*D; J tokens attend to each other. Returns the J x T x D
/// output and the per-layer J x J attention maps.
pub fn cte_forward(g: &mut Graph, traj: Var, lim: &LimVars) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(traj).to_vec();
    let pe_shape = g.shape(lim.cte_pe).to_vec();
    if shape.len() != 3 || shape[0] != pe_shape[0] || shape[1] * shape[2] != pe_shape[1] {
        return Err(Error::Shape(format!(
            "cte input {} vs positional table {}",
            fmt_shape(&shape),
            fmt_shape(&pe_shape)
        )));
    }
    let (j, t, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(traj, &[j, t * d])?;
    let mut c = g.add(flat, lim.cte_pe)?;
    let mut weights = Vec::new();
    for b in &lim.cte_blocks {
        let (y, w) = encoder_block(g, c, b)?;
        c = y;
        weights.push(w);
    }
    let out = g.reshape(c, &[j, t, d])?;
    Ok((out, weights))
}

/// Local branch: reconstruct trajectories, embed, STE, CTE, permute back to
/// T x J x D.
pub fn lim_forward(
    g: &mut Graph,
    x2d: Var,
    m: &BoundModel,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let cfg = &m.config;
    expect_shape(g, x2d, &[cfg.frames, cfg.joints, 2], "lim input")?;
    let lim = m
        .lim
        .as_ref()
        .ok_or_else(|| Error::Config("lim_forward on a gim_only model".into()))?;
    let traj = reconstruct_trajectories(g, x2d)?;
    let (ew, eb) = lim.embed.unwrap_or((m.gim.embed_w, m.gim.embed_b));
    let e = linear(g, traj, ew, eb)?;
    let (s, ste_w) = ste_forward(g, e, lim)?;
    let (c, cte_w) = cte_forward(g, s, lim)?;
    let out = g.permute(c, &[1, 0, 2])?;
    Ok((out, ste_w, cte_w))
}

/// Fusion head: concatenate the two branch outputs along the frame axis
/// (2T x (J*D)), contract back to T frames with the frame conv, then reduce
/// each token to 3D with a layer-normed linear map.
pub fn regression_head(
    g: &mut Graph,
    gim_out: Var,
    lim_out: Var,
    head: &HeadVars,
    cfg: &ModelConfig,
) -> Result<Var> {
    let want = [cfg.frames, cfg.joints, cfg.model_dim];
    expect_shape(g, gim_out, &want, "regression head global input")?;
    expect_shape(g, lim_out, &want, "regression head local input")?;
    let (t, j, d) = (cfg.frames, cfg.joints, cfg.model_dim);
    let cat = g.concat(&[gim_out, lim_out], 0)?;
    let flat = g.reshape(cat, &[2 * t, j * d])?;
    let conv = g.framewise_conv1d(flat, head.conv_w, head.conv_b)?;
    let x = g.reshape(conv, &[t, j, d])?;
    let n = g.layer_norm(x, head.ln.gamma, head.ln.beta, LN_EPS)?;
    linear(g, n, head.out_w, head.out_b)
}

/// Pose refinement: blends the predicted center pose A with the composite
/// candidate B = (reference 2D x/y, predicted depth) using two softmaxed
/// confidences from a two-layer perceptron.
pub fn pose_refine(
    g: &mut Graph,
    pred_seq: Var,
    ref2d: Var,
    refine: &RefineVars,
    cfg: &ModelConfig,
) -> Result<Var> {
    expect_shape(g, pred_seq, &[cfg.frames, cfg.joints, 3], "refine prediction")?;
    expect_shape(g, ref2d, &[cfg.frames, cfg.joints, 2], "refine 2D reference")?;
    let j = cfg.joints;
    let center = cfg.center_frame();

    let a = g.select(pred_seq, 0, center)?; // [J, 3]
    let r2 = g.select(ref2d, 0, center)?; // [J, 2]
    let z = g.narrow(a, 1, 2, 1)?; // predicted depth of A
    let b_cand = g.concat(&[r2, z], 1)?; // [J, 3]

    let af = g.reshape(a, &[1, j * 3])?;
    let bf = g.reshape(b_cand, &[1, j * 3])?;
    let feat = g.concat(&[af, bf], 1)?; // [1, 2*J*3]

    let h = linear(g, feat, refine.w1, refine.b1)?;
    let h = g.gelu(h);
    let logits = linear(g, h, refine.w2, refine.b2)?; // [1, 2]
    let conf = g.softmax(logits, 1)?;
    let ca = g.select(conf, 1, 0)?;
    let ca = g.reshape(ca, &[])?;
    let cb = g.select(conf, 1, 1)?;
    let cb = g.reshape(cb, &[])?;

    let wa = g.mul(a, ca)?;
    let wb = g.mul(b_cand, cb)?;
    g.add(wa, wb)
}

/// Attention weights captured during one forward pass, still as graph vars.
pub struct TraceVars {
    pub spatial: Vec<Var>,
    pub temporal: Vec<Var>,
    pub ste: Vec<Var>,
    pub cte: Vec<Var>,
    pub gim_out: Var,
    pub lim_out: Var,
}

impl TraceVars {
    pub fn materialize(&self, g: &Graph) -> ForwardTrace {
        let grab = |vs: &[Var]| vs.iter().map(|&v| g.tensor(v)).collect::<Vec<Tensor>>();
        let gim_out = g.tensor(self.gim_out);
        let lim_out = g.tensor(self.lim_out);
        let mut shapes = Vec::new();
        shapes.push(("gim_out".to_string(), gim_out.shape().to_vec()));
        shapes.push(("lim_out".to_string(), lim_out.shape().to_vec()));
        for (name, vs) in [
            ("spatial_attn", &self.spatial),
            ("temporal_attn", &self.temporal),
            ("ste_attn", &self.ste),
            ("cte_attn", &self.cte),
        ] {
            for (i, &v) in vs.iter().enumerate() {
                shapes.push((format!("{name}.{i}"), g.shape(v).to_vec()));
            }
        }
        ForwardTrace {
            spatial_attn: grab(&self.spatial),
            temporal_attn: grab(&self.temporal),
            ste_attn: grab(&self.ste),
            cte_attn: grab(&self.cte),
            gim_out,
            lim_out,
            shapes,
        }
    }
}

/// Detached attention maps, branch outputs, and stage shapes from one pass.
///
/// Spatial weights are [T, heads, J, J] per layer; temporal [heads, T, T];
/// trajectory [J, heads, T, T]; cross-trajectory [heads, J, J].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub spatial_attn: Vec<Tensor>,
    pub temporal_attn: Vec<Tensor>,
    pub ste_attn: Vec<Tensor>,
    pub cte_attn: Vec<Tensor>,
    pub gim_out: Tensor,
    pub lim_out: Tensor,
    pub shapes: Vec<(String, Vec<usize>)>,
}

/// Graph-level output of a full forward pass.
pub struct ModelOutput {
    pub seq: Var,
    pub center: Var,
    pub trace: TraceVars,
}

/// Runs the whole model on one clip. `refine_ref` supplies the 2D reference
/// for the refinement candidate B; it defaults to the model input.
pub fn model_forward(
    g: &mut Graph,
    x2d: Var,
    m: &BoundModel,
    refine_ref: Option<Var>,
) -> Result<ModelOutput> {
    let cfg = &m.config;
    expect_shape(g, x2d, &[cfg.frames, cfg.joints, 2], "model input")?;

    let (gim_out, spatial, temporal) = gim_forward(g, x2d, m)?;
    let (lim_out, ste, cte) = if m.lim.is_some() {
        lim_forward(g, x2d, m)?
    } else {
        let zeros = g.leaf(&Tensor::zeros(vec![cfg.frames, cfg.joints, cfg.model_dim]));
        (zeros, Vec::new(), Vec::new())
    };
    let seq = regression_head(g, gim_out, lim_out, &m.head, cfg)?;
    let center = match &m.refine {
        Some(r) => pose_refine(g, seq, refine_ref.unwrap_or(x2d), r, cfg)?,
        None => g.select(seq, 0, cfg.center_frame())?,
    };
    Ok(ModelOutput {
        seq,
        center,
        trace: TraceVars { spatial, temporal, ste, cte, gim_out, lim_out },
    })
}

/// Detached results of [`ModelParams::infer`].
pub struct Inference {
    pub seq: Tensor,
    pub center: Tensor,
    pub trace: ForwardTrace,
}

impl super::ModelParams {
    /// Convenience forward pass on a fresh graph, without gradients.
    pub fn infer(&self, x2d: &Tensor, refine_ref: Option<&Tensor>) -> Result<Inference> {
        x2d.validate_finite("model input")?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x2d);
        let rv = refine_ref.map(|r| g.leaf(r));
        let out = model_forward(&mut g, xv, &bound, rv)?;
        Ok(Inference {
            seq: g.tensor(out.seq),
            center: g.tensor(out.center),
            trace: out.trace.materialize(&g),
        })
    }
}
