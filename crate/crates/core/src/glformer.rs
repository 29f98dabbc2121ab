//! Spatial feature extraction.
//!
//! A stack of attention blocks over node embeddings `[N, D]`, alternating
//! between global blocks (every node attends to every node) and local
//! blocks (attention restricted to adjacency-connected pairs). Attention
//! and the second feed-forward layer are channel-grouped to cut parameter
//! and FLOP counts.

use rand::Rng;
use thiserror::Error;

use crate::data::MaskMatrix;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::ConfigError;

/// Epsilon inside layer-normalization variance.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GlFormerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("local attention block requires an adjacency mask")]
    LocalBlockNeedsMask,
    #[error("mask covers {mask_n} nodes but the input has {input_n}")]
    MaskSizeMismatch { mask_n: usize, input_n: usize },
    #[error("{got} block params for a {expected}-block pattern")]
    PatternMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlFormerConfig {
    /// Attention blocks in the stack (L_S).
    pub n_blocks: usize,
    /// Channel width (D).
    pub embed_dim: usize,
    /// Heads per grouped attention (h).
    pub heads: usize,
    /// Channel groups for attention (G^M).
    pub mha_groups: usize,
    /// Channel groups for the second feed-forward layer (G^F).
    pub ffn_groups: usize,
    /// Feed-forward hidden width (D').
    pub hidden_dim: usize,
    /// Global/local kind per block, length `n_blocks`.
    pub pattern: Vec<BlockKind>,
}

impl GlFormerConfig {
    /// Conventional alternating pattern: global, local, global, local, ...
    pub fn alternating_pattern(n_blocks: usize) -> Vec<BlockKind> {
        (0..n_blocks)
            .map(|i| {
                if i % 2 == 0 {
                    BlockKind::Global
                } else {
                    BlockKind::Local
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.embed_dim;
        if d == 0 || self.heads == 0 || self.mha_groups == 0 || self.ffn_groups == 0 {
            return Err(ConfigError(format!(
                "embed_dim {d}, heads {}, mha_groups {}, ffn_groups {} must all be >= 1",
                self.heads, self.mha_groups, self.ffn_groups
            )));
        }
        if self.hidden_dim == 0 {
            return Err(ConfigError("hidden_dim must be >= 1".into()));
        }
        if d % self.mha_groups != 0 {
            return Err(ConfigError(format!(
                "embed_dim {d} not divisible by mha_groups {}",
                self.mha_groups
            )));
        }
        if (d / self.mha_groups) % self.heads != 0 {
            return Err(ConfigError(format!(
                "group width {} (embed_dim {d} / mha_groups {}) not divisible by heads {}",
                d / self.mha_groups,
                self.mha_groups,
                self.heads
            )));
        }
        if d % self.ffn_groups != 0 {
            return Err(ConfigError(format!(
                "embed_dim {d} not divisible by ffn_groups {}",
                self.ffn_groups
            )));
        }
        if self.hidden_dim % self.ffn_groups != 0 {
            return Err(ConfigError(format!(
                "hidden_dim {} not divisible by ffn_groups {}",
                self.hidden_dim, self.ffn_groups
            )));
        }
        if self.pattern.len() != self.n_blocks {
            return Err(ConfigError(format!(
                "pattern has {} entries for {} blocks",
                self.pattern.len(),
                self.n_blocks
            )));
        }
        Ok(())
    }
}

/// One attention head: projections `[D_g, D_g/h]` applied to the group's
/// channel slice, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// The heads acting on one attention channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMhaParams {
    pub heads: Vec<HeadParams>,
}

/// One attention block: grouped attention, feed-forward with grouped
/// second layer, and the two layer-norms around the residual sums.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockParams {
    pub mha_groups: Vec<GroupMhaParams>,
    /// First feed-forward layer `[D, D']` with bias `[D']`, ungrouped.
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    /// Second layer per group: `[D'/G^F, D/G^F]` with bias `[D/G^F]`.
    pub ffn_w2: Vec<Tensor>,
    pub ffn_b2: Vec<Tensor>,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl AttentionBlockParams {
    pub fn init<R: Rng>(config: &GlFormerConfig, rng: &mut R) -> AttentionBlockParams {
        let d = config.embed_dim;
        let dg = d / config.mha_groups;
        let dk = dg / config.heads;
        let dp = config.hidden_dim;
        let head_bound = 1.0 / (dg as f64).sqrt();
        let mha_groups = (0..config.mha_groups)
            .map(|_| GroupMhaParams {
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        wq: Tensor::uniform(&[dg, dk], head_bound, rng),
                        wk: Tensor::uniform(&[dg, dk], head_bound, rng),
                        wv: Tensor::uniform(&[dg, dk], head_bound, rng),
                    })
                    .collect(),
            })
            .collect();
        let gf = config.ffn_groups;
        AttentionBlockParams {
            mha_groups,
            ffn_w1: Tensor::uniform(&[d, dp], 1.0 / (d as f64).sqrt(), rng),
            ffn_b1: Tensor::zeros(&[dp]),
            ffn_w2: (0..gf)
                .map(|_| Tensor::uniform(&[dp / gf, d / gf], 1.0 / ((dp / gf) as f64).sqrt(), rng))
                .collect(),
            ffn_b2: (0..gf).map(|_| Tensor::zeros(&[d / gf])).collect(),
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        for g in &self.mha_groups {
            for h in &g.heads {
                f(&h.wq);
                f(&h.wk);
                f(&h.wv);
            }
        }
        f(&self.ffn_w1);
        f(&self.ffn_b1);
        for w in &self.ffn_w2 {
            f(w);
        }
        for b in &self.ffn_b2 {
            f(b);
        }
        f(&self.ln1_gamma);
        f(&self.ln1_beta);
        f(&self.ln2_gamma);
        f(&self.ln2_beta);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for g in &mut self.mha_groups {
            for h in &mut g.heads {
                f(&mut h.wq);
                f(&mut h.wk);
                f(&mut h.wv);
            }
        }
        f(&mut self.ffn_w1);
        f(&mut self.ffn_b1);
        for w in &mut self.ffn_w2 {
            f(w);
        }
        for b in &mut self.ffn_b2 {
            f(b);
        }
        f(&mut self.ln1_gamma);
        f(&mut self.ln1_beta);
        f(&mut self.ln2_gamma);
        f(&mut self.ln2_beta);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAttentionBlock {
        let mha_groups = self
            .mha_groups
            .iter()
            .map(|g| BoundGroupMha {
                heads: g
                    .heads
                    .iter()
                    .map(|h| BoundHead {
                        wq: tape.leaf(h.wq.clone(), trainable),
                        wk: tape.leaf(h.wk.clone(), trainable),
                        wv: tape.leaf(h.wv.clone(), trainable),
                    })
                    .collect(),
            })
            .collect();
        BoundAttentionBlock {
            mha_groups,
            ffn_w1: tape.leaf(self.ffn_w1.clone(), trainable),
            ffn_b1: tape.leaf(self.ffn_b1.clone(), trainable),
            ffn_w2: self
                .ffn_w2
                .iter()
                .map(|w| tape.leaf(w.clone(), trainable))
                .collect(),
            ffn_b2: self
                .ffn_b2
                .iter()
                .map(|b| tape.leaf(b.clone(), trainable))
                .collect(),
            ln1_gamma: tape.leaf(self.ln1_gamma.clone(), trainable),
            ln1_beta: tape.leaf(self.ln1_beta.clone(), trainable),
            ln2_gamma: tape.leaf(self.ln2_gamma.clone(), trainable),
            ln2_beta: tape.leaf(self.ln2_beta.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Debug, Clone)]
pub struct BoundGroupMha {
    pub heads: Vec<BoundHead>,
}

#[derive(Debug, Clone)]
pub struct BoundAttentionBlock {
    pub mha_groups: Vec<BoundGroupMha>,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Vec<Var>,
    pub ffn_b2: Vec<Var>,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Learned additive position table, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    pub w: Tensor,
}

impl PositionalEncoding {
    pub fn init<R: Rng>(n_nodes: usize, embed_dim: usize, rng: &mut R) -> PositionalEncoding {
        PositionalEncoding {
            w: Tensor::uniform(&[n_nodes, embed_dim], 0.1, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        f(&self.w);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.w);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.w.clone(), trainable)
    }
}

/// Full spatial extractor: position table plus the block stack.
#[derive(Debug, Clone, PartialEq)]
pub struct GlFormerParams {
    pub pe: PositionalEncoding,
    pub blocks: Vec<AttentionBlockParams>,
}

impl GlFormerParams {
    pub fn init<R: Rng>(config: &GlFormerConfig, n_nodes: usize, rng: &mut R) -> GlFormerParams {
        GlFormerParams {
            pe: PositionalEncoding::init(n_nodes, config.embed_dim, rng),
            blocks: (0..config.n_blocks)
                .map(|_| AttentionBlockParams::init(config, rng))
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        self.pe.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        self.pe.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGlFormer {
        BoundGlFormer {
            pe: self.pe.bind(tape, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundGlFormer {
    pub pe: Var,
    pub blocks: Vec<BoundAttentionBlock>,
}

/// Adds the learned position table to `[N, D]` features.
pub fn positional_encode(tape: &mut Tape, h: Var, pe: Var) -> Result<Var, TensorError> {
    if tape.shape(h) != tape.shape(pe) {
        return Err(TensorError::ShapeMismatch {
            op: "positional_encode",
            lhs: tape.shape(h).to_vec(),
            rhs: tape.shape(pe).to_vec(),
        });
    }
    tape.add(h, pe)
}

/// Multi-head scaled dot-product self-attention over `[N, D_g]`.
///
/// Per head: scores `Q K^T / sqrt(D_g/h)`, optionally masked so that
/// disallowed pairs get exactly zero attention, then row-softmax and a
/// weighted sum of `V`. Head outputs concatenate back to `D_g`; there is
/// no output projection.
pub fn mha(
    tape: &mut Tape,
    h: Var,
    heads: &[BoundHead],
    mask: Option<&MaskMatrix>,
) -> Result<Var, GlFormerError> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "mha",
            msg: format!("expected [N, D] input, got {shape:?}"),
        }
        .into());
    }
    let (n, dg) = (shape[0], shape[1]);
    if heads.is_empty() || dg % heads.len() != 0 {
        return Err(TensorError::Invalid {
            op: "mha",
            msg: format!("width {dg} not divisible by {} heads", heads.len()),
        }
        .into());
    }
    if let Some(m) = mask {
        if m.n() != n {
            return Err(GlFormerError::MaskSizeMismatch {
                mask_n: m.n(),
                input_n: n,
            });
        }
    }
    let dk = dg / heads.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.matmul(h, head.wq)?;
        let k = tape.matmul(h, head.wk)?;
        let v = tape.matmul(h, head.wv)?;
        let kt = tape.transpose2(k)?;
        let raw = tape.matmul(q, kt)?;
        let mut scores = tape.scale(raw, scale)?;
        if let Some(m) = mask {
            scores = tape.mask_fill(scores, m.as_bools())?;
        }
        let attn = tape.softmax_rows(scores)?;
        outputs.push(tape.matmul(attn, v)?);
    }
    Ok(tape.concat_last(&outputs)?)
}

/// Grouped attention: slices `[N, D]` into `G^M` channel groups, runs
/// [`mha`] on each with its own heads, and concatenates the results.
pub fn l_mha(
    tape: &mut Tape,
    h: Var,
    groups: &[BoundGroupMha],
    mask: Option<&MaskMatrix>,
) -> Result<Var, GlFormerError> {
    let d = *tape.shape(h).last().unwrap_or(&0);
    let g = groups.len();
    if g == 0 || d % g != 0 {
        return Err(TensorError::Invalid {
            op: "l_mha",
            msg: format!("width {d} not divisible by {g} groups"),
        }
        .into());
    }
    let dg = d / g;
    let mut parts = Vec::with_capacity(g);
    for (j, group) in groups.iter().enumerate() {
        let slice = tape.narrow(h, 1, j * dg, dg)?;
        parts.push(mha(tape, slice, &group.heads, mask)?);
    }
    Ok(tape.concat_last(&parts)?)
}

/// Feed-forward with grouped second layer: `relu(h W1 + b1)` expands to
/// `D'` ungrouped, then each `D'/G^F` slice maps through its own
/// `[D'/G^F, D/G^F]` weights back to a `D/G^F` slice of the output.
pub fn l_ffn(
    tape: &mut Tape,
    h: Var,
    w1: Var,
    b1: Var,
    w2: &[Var],
    b2: &[Var],
) -> Result<Var, GlFormerError> {
    let pre = tape.matmul(h, w1)?;
    let biased = tape.add(pre, b1)?;
    let hidden = tape.relu(biased)?;
    let dp = *tape.shape(hidden).last().unwrap();
    let g = w2.len();
    if g == 0 || w2.len() != b2.len() || dp % g != 0 {
        return Err(TensorError::Invalid {
            op: "l_ffn",
            msg: format!(
                "hidden width {dp} with {} weight group(s) and {} bias group(s)",
                w2.len(),
                b2.len()
            ),
        }
        .into());
    }
    let per = dp / g;
    let mut parts = Vec::with_capacity(g);
    for j in 0..g {
        let slice = tape.narrow(hidden, 1, j * per, per)?;
        let proj = tape.matmul(slice, w2[j])?;
        parts.push(tape.add(proj, b2[j])?);
    }
    Ok(tape.concat_last(&parts)?)
}

/// One attention block, post-norm residual composition:
/// `u = LN1(h + attention(h)); out = LN2(u + ffn(u))`.
/// Local blocks mask attention by adjacency; global blocks attend freely.
pub fn attention_block(
    tape: &mut Tape,
    h: Var,
    block: &BoundAttentionBlock,
    kind: BlockKind,
    mask: Option<&MaskMatrix>,
) -> Result<Var, GlFormerError> {
    let attn_mask = match kind {
        BlockKind::Global => None,
        BlockKind::Local => Some(mask.ok_or(GlFormerError::LocalBlockNeedsMask)?),
    };
    let attended = l_mha(tape, h, &block.mha_groups, attn_mask)?;
    let sum1 = tape.add(h, attended)?;
    let u = tape.layer_norm(sum1, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
    let ff = l_ffn(tape, u, block.ffn_w1, block.ffn_b1, &block.ffn_w2, &block.ffn_b2)?;
    let sum2 = tape.add(u, ff)?;
    Ok(tape.layer_norm(sum2, block.ln2_gamma, block.ln2_beta, LN_EPS)?)
}

/// Full spatial extraction: adds positional encoding, then applies the
/// blocks in pattern order. `h` is `[N, D]`; so is the result.
pub fn gl_former(
    tape: &mut Tape,
    h: Var,
    bound: &BoundGlFormer,
    pattern: &[BlockKind],
    mask: Option<&MaskMatrix>,
) -> Result<Var, GlFormerError> {
    if bound.blocks.len() != pattern.len() {
        return Err(GlFormerError::PatternMismatch {
            got: bound.blocks.len(),
            expected: pattern.len(),
        });
    }
    let mut cur = positional_encode(tape, h, bound.pe)?;
    for (block, &kind) in bound.blocks.iter().zip(pattern) {
        cur = attention_block(tape, cur, block, kind, mask)?;
    }
    Ok(cur)
}
