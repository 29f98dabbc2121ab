//! Full forecasting model: embedding, temporal extraction, spatial
//! extraction, and the output head, stacked serially.
//!
//! `[N, P, F]` inputs are embedded pointwise to `[N, P, D]`, compressed
//! by the temporal stack to `[N, D]`, refined by the attention stack to
//! another `[N, D]`, and the sum of the two feeds a two-layer head that
//! emits `[N, L]` forecasts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::data::{MaskMatrix, TargetMode};
use crate::glformer::{
    gl_former, BlockKind, BoundGlFormer, GlFormerConfig, GlFormerError, GlFormerParams,
};
use crate::ltcn::{ltcn_extract, BoundLtcn, LtcnConfig, LtcnParams};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::ConfigError;

/// Magic bytes opening a model checkpoint.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LCTS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spatial(#[from] GlFormerError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input has {got} feature(s), the embedding expects {expected}")]
    FeatureMismatch { got: usize, expected: usize },
    #[error(
        "input covers {got} node(s) but the positional encoding is sized for {expected}; \
         the model is bound to the dataset it was built for"
    )]
    NodeMismatch { got: usize, expected: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn checkpoint_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Nodes in the dataset (N); fixes the positional-encoding height.
    pub n_nodes: usize,
    /// Input features per step (F).
    pub in_features: usize,
    /// History window length (P).
    pub history_len: usize,
    /// Forecast horizon (Q).
    pub horizon: usize,
    /// Multi-step emits all Q steps; single-step only the Q-th.
    pub mode: TargetMode,
    pub ltcn: LtcnConfig,
    pub glformer: GlFormerConfig,
    /// Hidden width of the output head (D_h).
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Output columns: the horizon for multi-step, 1 for single-step.
    pub fn out_len(&self) -> usize {
        match self.mode {
            TargetMode::MultiStep => self.horizon,
            TargetMode::SingleStep => 1,
        }
    }

    /// Customary head width: 512 for multi-step, D for single-step.
    pub fn default_head_hidden(mode: TargetMode, embed_dim: usize) -> usize {
        match mode {
            TargetMode::MultiStep => 512,
            TargetMode::SingleStep => embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_nodes == 0 || self.in_features == 0 {
            return Err(ConfigError(format!(
                "n_nodes {} and in_features {} must be >= 1",
                self.n_nodes, self.in_features
            )));
        }
        if self.history_len == 0 || self.horizon == 0 || self.head_hidden == 0 {
            return Err(ConfigError(format!(
                "history_len {}, horizon {}, head_hidden {} must all be >= 1",
                self.history_len, self.horizon, self.head_hidden
            )));
        }
        self.ltcn.validate()?;
        self.glformer.validate()?;
        if self.ltcn.embed_dim != self.glformer.embed_dim {
            return Err(ConfigError(format!(
                "temporal width {} differs from spatial width {}",
                self.ltcn.embed_dim, self.glformer.embed_dim
            )));
        }
        let rf = self.ltcn.receptive_field();
        if rf < self.history_len {
            return Err(ConfigError(format!(
                "receptive field {rf} is smaller than history_len {}; \
                 the final step cannot see the whole window (need 1 + (K-1)*sum(dilations) >= P)",
                self.history_len
            )));
        }
        Ok(())
    }

    /// Canonical key=value text used inside checkpoints.
    pub fn to_config_text(&self) -> String {
        let dilations = self
            .ltcn
            .dilations
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let pattern = self
            .glformer
            .pattern
            .iter()
            .map(|k| match k {
                BlockKind::Global => "global",
                BlockKind::Local => "local",
            })
            .collect::<Vec<_>>()
            .join(",");
        let mode = match self.mode {
            TargetMode::MultiStep => "multi",
            TargetMode::SingleStep => "single",
        };
        format!(
            "n_nodes={}\nin_features={}\nhistory_len={}\nhorizon={}\nmode={mode}\n\
             head_hidden={}\nltcn.n_layers={}\nltcn.embed_dim={}\nltcn.kernel_size={}\n\
             ltcn.dilations={dilations}\nltcn.groups={}\nltcn.se_reduction={}\n\
             glformer.n_blocks={}\nglformer.embed_dim={}\nglformer.heads={}\n\
             glformer.mha_groups={}\nglformer.ffn_groups={}\nglformer.hidden_dim={}\n\
             glformer.pattern={pattern}\n",
            self.n_nodes,
            self.in_features,
            self.history_len,
            self.horizon,
            self.head_hidden,
            self.ltcn.n_layers,
            self.ltcn.embed_dim,
            self.ltcn.kernel_size,
            self.ltcn.groups,
            self.ltcn.se_reduction,
            self.glformer.n_blocks,
            self.glformer.embed_dim,
            self.glformer.heads,
            self.glformer.mha_groups,
            self.glformer.ffn_groups,
            self.glformer.hidden_dim,
        )
    }

    pub fn from_config_text(text: &str) -> Result<ModelConfig, ModelError> {
        let mut map = std::collections::BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                checkpoint_err(format!("config line {}: no '=' in {line:?}", ln + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            map.get(key)
                .ok_or_else(|| checkpoint_err(format!("config missing key {key:?}")))
        };
        let get_usize = |key: &str| -> Result<usize, ModelError> {
            get(key)?
                .parse()
                .map_err(|e| checkpoint_err(format!("config key {key:?}: {e}")))
        };
        let mode = match get("mode")?.as_str() {
            "multi" => TargetMode::MultiStep,
            "single" => TargetMode::SingleStep,
            other => {
                return Err(checkpoint_err(format!(
                    "config mode must be multi or single, got {other:?}"
                )))
            }
        };
        let dilations = get("ltcn.dilations")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| checkpoint_err(format!("ltcn.dilations entry {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pattern = get("glformer.pattern")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| match s.trim() {
                "global" => Ok(BlockKind::Global),
                "local" => Ok(BlockKind::Local),
                other => Err(checkpoint_err(format!(
                    "glformer.pattern entry must be global or local, got {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelConfig {
            n_nodes: get_usize("n_nodes")?,
            in_features: get_usize("in_features")?,
            history_len: get_usize("history_len")?,
            horizon: get_usize("horizon")?,
            mode,
            head_hidden: get_usize("head_hidden")?,
            ltcn: LtcnConfig {
                n_layers: get_usize("ltcn.n_layers")?,
                embed_dim: get_usize("ltcn.embed_dim")?,
                kernel_size: get_usize("ltcn.kernel_size")?,
                dilations,
                groups: get_usize("ltcn.groups")?,
                se_reduction: get_usize("ltcn.se_reduction")?,
            },
            glformer: GlFormerConfig {
                n_blocks: get_usize("glformer.n_blocks")?,
                embed_dim: get_usize("glformer.embed_dim")?,
                heads: get_usize("glformer.heads")?,
                mha_groups: get_usize("glformer.mha_groups")?,
                ffn_groups: get_usize("glformer.ffn_groups")?,
                hidden_dim: get_usize("glformer.hidden_dim")?,
                pattern,
            },
        })
    }
}

/// Pointwise embedding: `[D, F, 1]` convolution weights plus bias `[D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl EmbeddingParams {
    pub fn init<R: Rng>(in_features: usize, embed_dim: usize, rng: &mut R) -> EmbeddingParams {
        let bound = 1.0 / (in_features as f64).sqrt();
        EmbeddingParams {
            w: Tensor::uniform(&[embed_dim, in_features, 1], bound, rng),
            b: Tensor::uniform(&[embed_dim], bound, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEmbedding {
        BoundEmbedding {
            w: tape.leaf(self.w.clone(), trainable),
            b: tape.leaf(self.b.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEmbedding {
    pub w: Var,
    pub b: Var,
}

/// Two-layer output head: `[D, D_h]`, `[D_h]`, `[D_h, L]`, `[L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl OutputHeadParams {
    pub fn init<R: Rng>(
        embed_dim: usize,
        hidden: usize,
        out_len: usize,
        rng: &mut R,
    ) -> OutputHeadParams {
        let b1s = 1.0 / (embed_dim as f64).sqrt();
        let b2s = 1.0 / (hidden as f64).sqrt();
        OutputHeadParams {
            w1: Tensor::uniform(&[embed_dim, hidden], b1s, rng),
            b1: Tensor::uniform(&[hidden], b1s, rng),
            w2: Tensor::uniform(&[hidden, out_len], b2s, rng),
            b2: Tensor::uniform(&[out_len], b2s, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundOutputHead {
        BoundOutputHead {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundOutputHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightCtsModel {
    config: ModelConfig,
    pub embedding: EmbeddingParams,
    pub ltcn: LtcnParams,
    pub glformer: GlFormerParams,
    pub head: OutputHeadParams,
    mask: Option<MaskMatrix>,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embedding: BoundEmbedding,
    pub ltcn: BoundLtcn,
    pub glformer: BoundGlFormer,
    pub head: BoundOutputHead,
}

impl BoundModel {
    /// Tape variables of every parameter, in registration order; index i
    /// here corresponds to the i-th tensor seen by `visit_params`.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding.w, self.embedding.b];
        for layer in &self.ltcn.layers {
            for conv in [&layer.o, &layer.g] {
                out.extend_from_slice(&conv.weights);
                if let Some(bs) = &conv.biases {
                    out.extend_from_slice(bs);
                }
            }
        }
        out.push(self.ltcn.se.w1);
        out.push(self.ltcn.se.w2);
        out.push(self.glformer.pe);
        for block in &self.glformer.blocks {
            for group in &block.mha_groups {
                for head in &group.heads {
                    out.push(head.wq);
                    out.push(head.wk);
                    out.push(head.wv);
                }
            }
            out.push(block.ffn_w1);
            out.push(block.ffn_b1);
            out.extend_from_slice(&block.ffn_w2);
            out.extend_from_slice(&block.ffn_b2);
            out.push(block.ln1_gamma);
            out.push(block.ln1_beta);
            out.push(block.ln2_gamma);
            out.push(block.ln2_beta);
        }
        out.push(self.head.w1);
        out.push(self.head.b1);
        out.push(self.head.w2);
        out.push(self.head.b2);
        out
    }
}

impl LightCtsModel {
    /// Validates the configuration and draws fresh parameters. A mask is
    /// mandatory when the block pattern contains local blocks.
    pub fn init<R: Rng>(
        config: ModelConfig,
        mask: Option<MaskMatrix>,
        rng: &mut R,
    ) -> Result<LightCtsModel, ConfigError> {
        config.validate()?;
        let has_local = config.glformer.pattern.contains(&BlockKind::Local);
        match &mask {
            None if has_local => {
                return Err(ConfigError(
                    "block pattern contains local attention but no adjacency mask was given"
                        .into(),
                ))
            }
            Some(m) if m.n() != config.n_nodes => {
                return Err(ConfigError(format!(
                    "mask covers {} nodes, model is configured for {}",
                    m.n(),
                    config.n_nodes
                )))
            }
            _ => {}
        }
        let d = config.ltcn.embed_dim;
        Ok(LightCtsModel {
            embedding: EmbeddingParams::init(config.in_features, d, rng),
            ltcn: LtcnParams::init(&config.ltcn, true, rng),
            glformer: GlFormerParams::init(&config.glformer, config.n_nodes, rng),
            head: OutputHeadParams::init(d, config.head_hidden, config.out_len(), rng),
            mask,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mask(&self) -> Option<&MaskMatrix> {
        self.mask.as_ref()
    }

    /// Visits every parameter tensor exactly once, in the fixed
    /// registration order shared by `bind`, the optimizer, the profiler,
    /// and checkpoints.
    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        self.embedding.visit(f);
        self.ltcn.visit(f);
        self.glformer.visit(f);
        self.head.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        self.embedding.visit_mut(f);
        self.ltcn.visit_mut(f);
        self.glformer.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Total scalar parameters.
    pub fn n_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |t| total += t.numel());
        total
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            embedding: self.embedding.bind(tape, trainable),
            ltcn: self.ltcn.bind(tape, trainable),
            glformer: self.glformer.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Pointwise embedding `[N, P, F] -> [N, P, D]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
    ) -> Result<Var, ModelError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Invalid {
                op: "embed",
                msg: format!("expected [N, P, F] input, got {shape:?}"),
            }
            .into());
        }
        if shape[2] != self.config.in_features {
            return Err(ModelError::FeatureMismatch {
                got: shape[2],
                expected: self.config.in_features,
            });
        }
        Ok(tape.dilated_causal_conv1d(x, bound.embedding.w, Some(bound.embedding.b), 1)?)
    }

    /// Full forward pass `[N, P, F] -> [N, L]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
    ) -> Result<Var, ModelError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() == 3 && shape[0] != self.config.n_nodes {
            return Err(ModelError::NodeMismatch {
                got: shape[0],
                expected: self.config.n_nodes,
            });
        }
        let embedded = self.embed(tape, bound, x)?;
        let h_t = ltcn_extract(tape, embedded, &bound.ltcn, &self.config.ltcn.dilations)?;
        let h_s = gl_former(
            tape,
            h_t,
            &bound.glformer,
            &self.config.glformer.pattern,
            self.mask.as_ref(),
        )?;
        let fused = tape.add(h_s, h_t)?;
        let z1 = tape.matmul(fused, bound.head.w1)?;
        let z1b = tape.add(z1, bound.head.b1)?;
        let hidden = tape.relu(z1b)?;
        let z2 = tape.matmul(hidden, bound.head.w2)?;
        Ok(tape.add(z2, bound.head.b2)?)
    }

    // ── checkpoints ──────────────────────────────────────────────────
    //
    // magic "LCTS", u32 version, u32 config_len + config text, u8 mask
    // flag (+ u32 n and n*n bytes when set), u32 n_params, then per
    // tensor: u32 ndim, ndim u32 dims, numel f64 LE values, in
    // registration order.

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.to_config_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        match &self.mask {
            Some(m) => {
                w.write_all(&[1u8])?;
                w.write_all(&(m.n() as u32).to_le_bytes())?;
                let bytes: Vec<u8> = m.as_bools().iter().map(|&b| b as u8).collect();
                w.write_all(&bytes)?;
            }
            None => w.write_all(&[0u8])?,
        }
        let mut count = 0u32;
        self.visit_params(&mut |_| count += 1);
        w.write_all(&count.to_le_bytes())?;
        let mut io_err = None;
        self.visit_params(&mut |t| {
            if io_err.is_some() {
                return;
            }
            let res = (|| -> std::io::Result<()> {
                w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            })();
            if let Err(e) = res {
                io_err = Some(e);
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LightCtsModel, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_full(&mut r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(checkpoint_err(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(checkpoint_err(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_len = read_u32(&mut r, "config length")? as usize;
        let mut text = vec![0u8; config_len];
        read_full(&mut r, &mut text, "config text")?;
        let text = String::from_utf8(text)
            .map_err(|e| checkpoint_err(format!("config text not utf-8: {e}")))?;
        let config = ModelConfig::from_config_text(&text)?;
        config.validate()?;
        let mut flag = [0u8; 1];
        read_full(&mut r, &mut flag, "mask flag")?;
        let mask = if flag[0] == 1 {
            let n = read_u32(&mut r, "mask size")? as usize;
            let mut bytes = vec![0u8; n * n];
            read_full(&mut r, &mut bytes, "mask bits")?;
            Some(mask_from_bytes(n, &bytes)?)
        } else {
            None
        };
        // Build a skeleton with the right shapes, then overwrite every
        // tensor from the file in registration order.
        let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = LightCtsModel::init(config, mask, &mut seed_rng)?;
        let n_params = read_u32(&mut r, "parameter count")? as usize;
        let mut expected = 0;
        model.visit_params(&mut |_| expected += 1);
        if n_params != expected {
            return Err(checkpoint_err(format!(
                "file stores {n_params} tensors, model has {expected}"
            )));
        }
        let mut read_err: Option<ModelError> = None;
        let mut index = 0usize;
        model.visit_params_mut(&mut |t| {
            if read_err.is_some() {
                return;
            }
            let res = (|| -> Result<(), ModelError> {
                let ndim = read_u32(&mut r, "tensor rank")? as usize;
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(read_u32(&mut r, "tensor dim")? as usize);
                }
                if dims != t.shape() {
                    return Err(checkpoint_err(format!(
                        "tensor {index} has shape {dims:?}, model expects {:?}",
                        t.shape()
                    )));
                }
                for v in t.data_mut().iter_mut() {
                    let mut b = [0u8; 8];
                    read_full(&mut r, &mut b, "tensor data")?;
                    *v = f64::from_le_bytes(b);
                }
                Ok(())
            })();
            if let Err(e) = res {
                read_err = Some(e);
            }
            index += 1;
        });
        if let Some(e) = read_err {
            return Err(e);
        }
        Ok(model)
    }
}

fn mask_from_bytes(n: usize, bytes: &[u8]) -> Result<MaskMatrix, ModelError> {
    // Reconstruct through the adjacency path so the diagonal invariant
    // is preserved; off-diagonal truths become weight-1 edges.
    let mut adj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            match bytes[i * n + j] {
                0 => {}
                1 => adj[i * n + j] = 1.0,
                other => {
                    return Err(checkpoint_err(format!(
                        "mask byte ({i},{j}) is {other}, expected 0 or 1"
                    )))
                }
            }
            if i == j && bytes[i * n + j] == 0 {
                return Err(checkpoint_err(format!(
                    "mask diagonal ({i},{i}) is 0; self-connections are required"
                )));
            }
        }
    }
    Ok(MaskMatrix::from_adjacency(&[adj], n, 0.0))
}

fn read_full(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), ModelError> {
    let mut filled = 0;
    while filled < buf.len() {
        let got = r.read(&mut buf[filled..])?;
        if got == 0 {
            return Err(checkpoint_err(format!(
                "file truncated while reading {what}"
            )));
        }
        filled += got;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_full(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Mean absolute error between same-shaped prediction and truth.
pub fn mae_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var, TensorError> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(truth).to_vec(),
        });
    }
    let diff = tape.sub(pred, truth)?;
    let mag = tape.abs(diff)?;
    tape.mean_all(mag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_nodes: 3,
            in_features: 1,
            history_len: 4,
            horizon: 2,
            mode: TargetMode::MultiStep,
            ltcn: LtcnConfig {
                n_layers: 2,
                embed_dim: 4,
                kernel_size: 2,
                dilations: vec![1, 2],
                groups: 2,
                se_reduction: 2,
            },
            glformer: GlFormerConfig {
                n_blocks: 2,
                embed_dim: 4,
                heads: 1,
                mha_groups: 2,
                ffn_groups: 2,
                hidden_dim: 8,
                pattern: vec![BlockKind::Global, BlockKind::Local],
            },
            head_hidden: 8,
        }
    }

    #[test]
    fn validate_rejects_width_mismatch() {
        let mut c = tiny_config();
        c.glformer.embed_dim = 8;
        let err = c.validate().unwrap_err();
        assert!(err.0.contains("width"), "got: {err}");
    }

    #[test]
    fn validate_rejects_short_receptive_field() {
        let mut c = tiny_config();
        c.history_len = 10; // rf = 1 + 1*(1+2) = 4 < 10
        let err = c.validate().unwrap_err();
        assert!(err.0.contains("receptive field"), "got: {err}");
    }

    #[test]
    fn init_requires_mask_for_local_blocks() {
        let c = tiny_config();
        let err = LightCtsModel::init(c, None, &mut rng(0)).unwrap_err();
        assert!(err.0.contains("mask"), "got: {err}");
    }

    #[test]
    fn init_rejects_wrong_mask_size() {
        let c = tiny_config();
        let err =
            LightCtsModel::init(c, Some(MaskMatrix::all_true(5)), &mut rng(0)).unwrap_err();
        assert!(err.0.contains("mask covers 5"), "got: {err}");
    }

    #[test]
    fn forward_output_shape_multi_and_single() {
        for (mode, want) in [(TargetMode::MultiStep, 2), (TargetMode::SingleStep, 1)] {
            let mut c = tiny_config();
            c.mode = mode;
            let model =
                LightCtsModel::init(c, Some(MaskMatrix::all_true(3)), &mut rng(1)).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::uniform(&[3, 4, 1], 1.0, &mut rng(2)), false);
            let bound = model.bind(&mut tape, false);
            let y = model.forward(&mut tape, &bound, x).unwrap();
            assert_eq!(tape.shape(y), &[3, want]);
        }
    }

    #[test]
    fn forward_rejects_node_mismatch_naming_positional_encoding() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(3))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5, 4, 1]), false);
        let bound = model.bind(&mut tape, false);
        let err = model.forward(&mut tape, &bound, x).unwrap_err();
        assert!(
            err.to_string().contains("positional encoding"),
            "got: {err}"
        );
    }

    #[test]
    fn forward_rejects_feature_mismatch() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(4))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 4, 2]), false);
        let bound = model.bind(&mut tape, false);
        assert!(matches!(
            model.forward(&mut tape, &bound, x),
            Err(ModelError::FeatureMismatch { got: 2, expected: 1 })
        ));
    }

    #[test]
    fn embed_identity_weights_pass_input_through() {
        let mut c = tiny_config();
        c.in_features = 4; // F = D so identity is possible
        let mut model =
            LightCtsModel::init(c, Some(MaskMatrix::all_true(3)), &mut rng(5)).unwrap();
        let mut w = Tensor::zeros(&[4, 4, 1]);
        for i in 0..4 {
            let off = w.offset(&[i, i, 0]);
            w.data_mut()[off] = 1.0;
        }
        model.embedding.w = w;
        model.embedding.b = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[3, 4, 4], 1.0, &mut rng(6)), false);
        let bound = model.bind(&mut tape, false);
        let e = model.embed(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(x).data());
    }

    #[test]
    fn embed_zero_input_broadcasts_bias() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(7))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 4, 1]), false);
        let bound = model.bind(&mut tape, false);
        let e = model.embed(&mut tape, &bound, x).unwrap();
        for row in tape.value(e).data().chunks(4) {
            assert_eq!(row, model.embedding.b.data());
        }
    }

    #[test]
    fn constant_bias_head_gives_constant_output() {
        let mut model =
            LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(8))
                .unwrap();
        model.head.w1 = Tensor::zeros(&[4, 8]);
        model.head.b1 = Tensor::zeros(&[8]);
        model.head.w2 = Tensor::zeros(&[8, 2]);
        model.head.b2 = Tensor::full(&[2], 7.25);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[3, 4, 1], 1.0, &mut rng(9)), false);
        let bound = model.bind(&mut tape, false);
        let y = model.forward(&mut tape, &bound, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.25));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(10))
            .unwrap();
        let input = Tensor::uniform(&[3, 4, 1], 1.0, &mut rng(11));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), false);
            let bound = model.bind(&mut tape, false);
            let y = model.forward(&mut tape, &bound, x).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn all_true_mask_equals_no_mask_on_global_pattern() {
        let mut c = tiny_config();
        c.glformer.pattern = vec![BlockKind::Global, BlockKind::Global];
        let with_mask =
            LightCtsModel::init(c.clone(), Some(MaskMatrix::all_true(3)), &mut rng(12)).unwrap();
        let without = LightCtsModel::init(c, None, &mut rng(12)).unwrap();
        let input = Tensor::uniform(&[3, 4, 1], 1.0, &mut rng(13));
        let run = |m: &LightCtsModel| {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone(), false);
            let bound = m.bind(&mut tape, false);
            let y = m.forward(&mut tape, &bound, x).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(&with_mask), run(&without));
    }

    #[test]
    fn mae_loss_hand_values() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let truth = tape.leaf(Tensor::new(vec![2], vec![2.0, 4.0]).unwrap(), false);
        let loss = mae_loss(&mut tape, pred, truth).unwrap();
        assert_eq!(tape.value(loss).item(), 3.0);
        let same = mae_loss(&mut tape, truth, truth).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn mae_loss_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        assert!(mae_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn config_text_roundtrips() {
        let c = tiny_config();
        let text = c.to_config_text();
        let back = ModelConfig::from_config_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bound_vars_match_visit_order() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(15))
            .unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let vars = bound.vars();
        let mut i = 0;
        model.visit_params(&mut |t| {
            assert_eq!(tape.value(vars[i]).shape(), t.shape(), "tensor {i}");
            assert_eq!(tape.value(vars[i]).data(), t.data(), "tensor {i}");
            i += 1;
        });
        assert_eq!(i, vars.len());
    }

    #[test]
    fn registration_count_is_stable() {
        let model = LightCtsModel::init(tiny_config(), Some(MaskMatrix::all_true(3)), &mut rng(14))
            .unwrap();
        let mut names = 0;
        model.visit_params(&mut |_| names += 1);
        // embedding 2, ltcn layers 2 * (2 branches * (2 weights + 2 biases)),
        // se 2, pe 1, blocks 2 * (2 groups * 3 + w1,b1 + 2*w2 + 2*b2 + 4 ln),
        // head 4
        assert_eq!(names, 2 + 2 * 8 + 2 + 1 + 2 * 16 + 4);
        let mut total = 0;
        model.visit_params(&mut |t| total += t.numel());
        assert_eq!(total, model.n_params());
    }
}
