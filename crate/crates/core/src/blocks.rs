//! Transformer building blocks: scaled dot-product attention, multi-head
//! attention, the pre-norm encoder block, learnable positional encodings,
//! and token embedding.
//!
//! All forward functions accept optional leading batch dims: a shape of
//! `[..., tokens, width]` runs the same computation independently per batch
//! entry.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

/// Epsilon for every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

/// Positional-table init scale.
const PE_STD: f64 = 0.02;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init.
pub fn linear_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(rng, vec![fan_in, fan_out], -bound, bound).with_grad()
}

fn zero_bias(width: usize) -> Tensor {
    Tensor::zeros(vec![width]).with_grad()
}

/// How parameter tensors become graph vars: ordinary leaves for training and
/// inference, or slices of one packed vector for the end-to-end gradient
/// check. Every binding is recorded as (name, var) in walk order.
pub(crate) trait ParamBinder {
    fn leaf(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Result<Var>;
}

pub(crate) struct LeafBinder {
    pub reg: Vec<(String, Var)>,
}

impl ParamBinder for LeafBinder {
    fn leaf(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Result<Var> {
        let v = g.leaf(t);
        self.reg.push((name, v));
        Ok(v)
    }
}

/// Binds each parameter to a reshaped slice of one flat vector var.
pub(crate) struct PackedBinder {
    pub theta: Var,
    pub offset: usize,
    pub reg: Vec<(String, Var)>,
}

impl ParamBinder for PackedBinder {
    fn leaf(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Result<Var> {
        let n = t.numel();
        let slice = g.narrow(self.theta, 0, self.offset, n)?;
        let v = g.reshape(slice, t.shape())?;
        self.offset += n;
        self.reg.push((name, v));
        Ok(v)
    }
}

// ── Parameter containers ─────────────────────────────────────────────────

/// Affine pair for one layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![width], 1.0).with_grad(),
            beta: Tensor::zeros(vec![width]).with_grad(),
        }
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        prefix: &str,
        binder: &mut dyn ParamBinder,
    ) -> Result<LayerNormVars> {
        let gamma = binder.leaf(g, format!("{prefix}.gamma"), &self.gamma)?;
        let beta = binder.leaf(g, format!("{prefix}.beta"), &self.beta)?;
        Ok(LayerNormVars { gamma, beta })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Projection weights for multi-head attention. `w_q`/`w_k`/`w_v` hold the
/// n_heads stacks of model_dim x head_dim columns side by side; `w_o` maps
/// the concatenated heads back to model_dim.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(rng: &mut R, model_dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || model_dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible by n_heads {n_heads}"
            )));
        }
        let head_dim = model_dim / n_heads;
        Ok(AttentionParams {
            w_q: linear_weight(rng, model_dim, model_dim),
            b_q: zero_bias(model_dim),
            w_k: linear_weight(rng, model_dim, model_dim),
            b_k: zero_bias(model_dim),
            w_v: linear_weight(rng, model_dim, model_dim),
            b_v: zero_bias(model_dim),
            w_o: linear_weight(rng, model_dim, model_dim),
            b_o: zero_bias(model_dim),
            n_heads,
            head_dim,
        })
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (field, t) in [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ] {
            out.push((format!("{prefix}.{field}"), t));
        }
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (field, t) in [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ] {
            out.push((format!("{prefix}.{field}"), t));
        }
    }

    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        prefix: &str,
        binder: &mut dyn ParamBinder,
    ) -> Result<AttentionVars> {
        let grab = |g: &mut Graph, binder: &mut dyn ParamBinder, field: &str, t: &Tensor| {
            binder.leaf(g, format!("{prefix}.{field}"), t)
        };
        Ok(AttentionVars {
            w_q: grab(g, binder, "w_q", &self.w_q)?,
            b_q: grab(g, binder, "b_q", &self.b_q)?,
            w_k: grab(g, binder, "w_k", &self.w_k)?,
            b_k: grab(g, binder, "b_k", &self.b_k)?,
            w_v: grab(g, binder, "w_v", &self.w_v)?,
            b_v: grab(g, binder, "b_v", &self.b_v)?,
            w_o: grab(g, binder, "w_o", &self.w_o)?,
            b_o: grab(g, binder, "b_o", &self.b_o)?,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub n_heads: usize,
    pub head_dim: usize,
}

/// One pre-norm encoder block: attention, two-layer MLP, three layer norms.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln_final: LayerNormParams,
}

impl BlockParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        model_dim: usize,
        n_heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        let hidden = mlp_ratio * model_dim;
        Ok(BlockParams {
            attn: AttentionParams::init(rng, model_dim, n_heads)?,
            w1: linear_weight(rng, model_dim, hidden),
            b1: zero_bias(hidden),
            w2: linear_weight(rng, hidden, model_dim),
            b2: zero_bias(model_dim),
            ln1: LayerNormParams::identity(model_dim),
            ln2: LayerNormParams::identity(model_dim),
            ln_final: LayerNormParams::identity(model_dim),
        })
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.attn.push_named(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
        self.ln1.push_named(&format!("{prefix}.ln1"), out);
        self.ln2.push_named(&format!("{prefix}.ln2"), out);
        self.ln_final.push_named(&format!("{prefix}.ln_final"), out);
    }

    pub(crate) fn push_named_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        self.attn.push_named_mut(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
        self.ln1.push_named_mut(&format!("{prefix}.ln1"), out);
        self.ln2.push_named_mut(&format!("{prefix}.ln2"), out);
        self.ln_final.push_named_mut(&format!("{prefix}.ln_final"), out);
    }

    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        prefix: &str,
        binder: &mut dyn ParamBinder,
    ) -> Result<BlockVars> {
        let attn = self.attn.bind(g, &format!("{prefix}.attn"), binder)?;
        let w1 = binder.leaf(g, format!("{prefix}.w1"), &self.w1)?;
        let b1 = binder.leaf(g, format!("{prefix}.b1"), &self.b1)?;
        let w2 = binder.leaf(g, format!("{prefix}.w2"), &self.w2)?;
        let b2 = binder.leaf(g, format!("{prefix}.b2"), &self.b2)?;
        let ln1 = self.ln1.bind(g, &format!("{prefix}.ln1"), binder)?;
        let ln2 = self.ln2.bind(g, &format!("{prefix}.ln2"), binder)?;
        let ln_final = self.ln_final.bind(g, &format!("{prefix}.ln_final"), binder)?;
        Ok(BlockVars { attn, w1, b1, w2, b2, ln1, ln2, ln_final })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn: AttentionVars,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1: LayerNormVars,
    pub ln2: LayerNormVars,
    pub ln_final: LayerNormVars,
}

/// Learnable positional table: one row per token position.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

impl PositionalEncoding {
    pub fn init<R: Rng>(rng: &mut R, rows: usize, width: usize) -> Self {
        PositionalEncoding { table: Tensor::normal(rng, vec![rows, width], PE_STD).with_grad() }
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.table"), &self.table));
    }

    pub(crate) fn push_named_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.table"), &mut self.table));
    }

    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        prefix: &str,
        binder: &mut dyn ParamBinder,
    ) -> Result<Var> {
        binder.leaf(g, format!("{prefix}.table"), &self.table)
    }
}

// ── Forward functions ────────────────────────────────────────────────────

/// x @ w + b with the bias broadcast over tokens.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let p = g.matmul(x, w)?;
    g.add(p, b)
}

fn swap_last_two(g: &mut Graph, v: Var) -> Result<Var> {
    let r = g.shape(v).len();
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    g.permute(v, &order)
}

/// Scaled dot-product attention: softmax(q kᵀ / sqrt(d_k)) v.
///
/// q: [..., n, d_k], k: [..., m, d_k], v: [..., m, d_v]. Returns the output
/// and the row-stochastic weight matrix [..., n, m] (kept for export).
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, d_k: usize) -> Result<(Var, Var)> {
    let qd = *g.shape(q).last().unwrap_or(&0);
    let kd = *g.shape(k).last().unwrap_or(&0);
    if qd != d_k || kd != d_k {
        return Err(Error::Shape(format!(
            "attention d_k mismatch: q has {qd}, k has {kd}, expected {d_k}"
        )));
    }
    let kt = swap_last_two(g, k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let axis = g.shape(scaled).len() - 1;
    let weights = g.softmax(scaled, axis)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention: per-head attention on projected q/k/v, heads
/// concatenated and passed through the output projection.
///
/// x: [..., tokens, model_dim]. Returns the output and the per-head weights
/// [..., n_heads, tokens, tokens].
pub fn multi_head_attention(g: &mut Graph, x: Var, p: &AttentionVars) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(Error::Shape("multi_head_attention needs [..., tokens, model_dim]".into()));
    }
    let (h, hd) = (p.n_heads, p.head_dim);

    let q = linear(g, x, p.w_q, p.b_q)?;
    let k = linear(g, x, p.w_k, p.b_k)?;
    let v = linear(g, x, p.w_v, p.b_v)?;

    // [..., tokens, H*hd] -> [..., H, tokens, hd]
    let to_heads = |g: &mut Graph, t: Var| -> Result<Var> {
        let mut s = shape[..rank - 1].to_vec();
        s.push(h);
        s.push(hd);
        let r = g.reshape(t, &s)?;
        let rr = s.len();
        let mut order: Vec<usize> = (0..rr).collect();
        order.swap(rr - 3, rr - 2);
        g.permute(r, &order)
    };
    let qh = to_heads(g, q)?;
    let kh = to_heads(g, k)?;
    let vh = to_heads(g, v)?;

    let (oh, weights) = attention(g, qh, kh, vh, hd)?;

    // [..., H, tokens, hd] -> [..., tokens, H*hd]
    let rr = g.shape(oh).len();
    let mut order: Vec<usize> = (0..rr).collect();
    order.swap(rr - 3, rr - 2);
    let om = g.permute(oh, &order)?;
    let mut flat = shape[..rank - 1].to_vec();
    flat.push(h * hd);
    let oc = g.reshape(om, &flat)?;
    let out = linear(g, oc, p.w_o, p.b_o)?;
    Ok((out, weights))
}

/// Pre-norm encoder block applied as three equations per block:
/// x' = MSA(LN(x)) + x; x'' = MLP(LN(x')) + x'; y = LN(x'').
///
/// Returns the output and the block's per-head attention weights.
pub fn encoder_block(g: &mut Graph, x: Var, p: &BlockVars) -> Result<(Var, Var)> {
    let n1 = g.layer_norm(x, p.ln1.gamma, p.ln1.beta, LN_EPS)?;
    let (msa, weights) = multi_head_attention(g, n1, &p.attn)?;
    let x1 = g.add(msa, x)?;

    let n2 = g.layer_norm(x1, p.ln2.gamma, p.ln2.beta, LN_EPS)?;
    let h = linear(g, n2, p.w1, p.b1)?;
    let h = g.gelu(h);
    let mlp = linear(g, h, p.w2, p.b2)?;
    let x2 = g.add(mlp, x1)?;

    let y = g.layer_norm(x2, p.ln_final.gamma, p.ln_final.beta, LN_EPS)?;
    Ok((y, weights))
}

/// Token embedding plus positional rows: x @ w + b + pe[0..tokens].
pub fn embed(g: &mut Graph, x: Var, w: Var, b: Var, pe: Var) -> Result<Var> {
    let shape = g.shape(x);
    let tokens = shape[shape.len() - 2];
    let rows = g.shape(pe)[0];
    if tokens > rows {
        return Err(Error::Shape(format!(
            "token count {tokens} exceeds positional table rows {rows}"
        )));
    }
    let e = linear(g, x, w, b)?;
    let pe_used = if tokens == rows { pe } else { g.narrow(pe, 0, 0, tokens)? };
    g.add(e, pe_used)
}
