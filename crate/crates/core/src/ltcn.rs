//! Temporal feature extraction.
//!
//! A stack of gated, shuffled-group, dilated causal convolution layers
//! turns `[N, P, D]` node embeddings into temporal features. The stack's
//! per-layer outputs are compressed by keeping only the final time step
//! of each layer and summing them, then recalibrated channel-wise by a
//! squeeze-and-excitation gate, producing `[N, D]`.

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::ConfigError;

#[derive(Debug, Clone, PartialEq)]
pub struct LtcnConfig {
    /// Gated layers in the stack (L_T).
    pub n_layers: usize,
    /// Channel width (D).
    pub embed_dim: usize,
    /// Convolution kernel size (K).
    pub kernel_size: usize,
    /// Dilation per layer; length must equal `n_layers`.
    pub dilations: Vec<usize>,
    /// Channel groups per convolution (G^T).
    pub groups: usize,
    /// Squeeze-and-excitation bottleneck ratio (r).
    pub se_reduction: usize,
}

impl LtcnConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.embed_dim;
        let g = self.groups;
        if self.n_layers == 0 {
            return Err(ConfigError("n_layers must be >= 1".into()));
        }
        if d == 0 || g == 0 || self.kernel_size == 0 || self.se_reduction == 0 {
            return Err(ConfigError(format!(
                "embed_dim {d}, groups {g}, kernel_size {}, se_reduction {} must all be >= 1",
                self.kernel_size, self.se_reduction
            )));
        }
        if self.dilations.len() != self.n_layers {
            return Err(ConfigError(format!(
                "dilations has {} entries for {} layers",
                self.dilations.len(),
                self.n_layers
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(ConfigError("dilations must all be >= 1".into()));
        }
        if d % g != 0 {
            return Err(ConfigError(format!(
                "embed_dim {d} not divisible by groups {g}"
            )));
        }
        if (d / g) % g != 0 {
            return Err(ConfigError(format!(
                "per-group width {} (embed_dim {d} / groups {g}) not divisible by groups {g}, \
                 so the channel shuffle cannot spread each group over all groups",
                d / g
            )));
        }
        if d % self.se_reduction != 0 {
            return Err(ConfigError(format!(
                "embed_dim {d} not divisible by se_reduction {}",
                self.se_reduction
            )));
        }
        Ok(())
    }

    /// Steps of history visible to the final output position:
    /// `1 + (K-1) * sum(dilations)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// One grouped convolution: per-group weights `[D/G, D/G, K]`, optional
/// per-group biases `[D/G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConvParams {
    pub weights: Vec<Tensor>,
    pub biases: Option<Vec<Tensor>>,
}

impl GroupConvParams {
    pub fn init<R: Rng>(
        embed_dim: usize,
        groups: usize,
        kernel_size: usize,
        bias: bool,
        rng: &mut R,
    ) -> GroupConvParams {
        let dg = embed_dim / groups;
        let bound = 1.0 / ((dg * kernel_size) as f64).sqrt();
        let weights = (0..groups)
            .map(|_| Tensor::uniform(&[dg, dg, kernel_size], bound, rng))
            .collect();
        let biases =
            bias.then(|| (0..groups).map(|_| Tensor::uniform(&[dg], bound, rng)).collect());
        GroupConvParams { weights, biases }
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        for w in &self.weights {
            f(w);
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                f(b);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for w in &mut self.weights {
            f(w);
        }
        if let Some(bs) = &mut self.biases {
            for b in bs {
                f(b);
            }
        }
    }

    /// Loads the parameters onto a tape, in the same order as `visit`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGroupConv {
        let weights = self
            .weights
            .iter()
            .map(|w| tape.leaf(w.clone(), trainable))
            .collect();
        let biases = self
            .biases
            .as_ref()
            .map(|bs| bs.iter().map(|b| tape.leaf(b.clone(), trainable)).collect());
        BoundGroupConv { weights, biases }
    }
}

#[derive(Debug, Clone)]
pub struct BoundGroupConv {
    pub weights: Vec<Var>,
    pub biases: Option<Vec<Var>>,
}

/// Gated layer: two parallel grouped convolutions, one squashed by tanh
/// and one by sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcnLayerParams {
    pub branch_o: GroupConvParams,
    pub branch_g: GroupConvParams,
}

impl LtcnLayerParams {
    pub fn init<R: Rng>(config: &LtcnConfig, bias: bool, rng: &mut R) -> LtcnLayerParams {
        LtcnLayerParams {
            branch_o: GroupConvParams::init(
                config.embed_dim,
                config.groups,
                config.kernel_size,
                bias,
                rng,
            ),
            branch_g: GroupConvParams::init(
                config.embed_dim,
                config.groups,
                config.kernel_size,
                bias,
                rng,
            ),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        self.branch_o.visit(f);
        self.branch_g.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        self.branch_o.visit_mut(f);
        self.branch_g.visit_mut(f);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLtcnLayer {
        BoundLtcnLayer {
            o: self.branch_o.bind(tape, trainable),
            g: self.branch_g.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLtcnLayer {
    pub o: BoundGroupConv,
    pub g: BoundGroupConv,
}

/// Squeeze-and-excitation gate: `w1` is `[D/r, D]`, `w2` is `[D, D/r]`,
/// no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl SeParams {
    pub fn init<R: Rng>(embed_dim: usize, reduction: usize, rng: &mut R) -> SeParams {
        let hidden = embed_dim / reduction;
        SeParams {
            w1: Tensor::uniform(&[hidden, embed_dim], 1.0 / (embed_dim as f64).sqrt(), rng),
            w2: Tensor::uniform(&[embed_dim, hidden], 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        f(&self.w1);
        f(&self.w2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        f(&mut self.w1);
        f(&mut self.w2);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundSe {
        BoundSe {
            w1: tape.leaf(self.w1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSe {
    pub w1: Var,
    pub w2: Var,
}

/// Full temporal extractor: the layer stack plus the SE gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcnParams {
    pub layers: Vec<LtcnLayerParams>,
    pub se: SeParams,
}

impl LtcnParams {
    pub fn init<R: Rng>(config: &LtcnConfig, bias: bool, rng: &mut R) -> LtcnParams {
        LtcnParams {
            layers: (0..config.n_layers)
                .map(|_| LtcnLayerParams::init(config, bias, rng))
                .collect(),
            se: SeParams::init(config.embed_dim, config.se_reduction, rng),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        for layer in &self.layers {
            layer.visit(f);
        }
        self.se.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        self.se.visit_mut(f);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLtcn {
        BoundLtcn {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            se: self.se.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLtcn {
    pub layers: Vec<BoundLtcnLayer>,
    pub se: BoundSe,
}

/// Channel shuffle: viewing the last axis as a `G x (D/G)` grid, emits
/// its transpose, so `out[..., j] = in[..., (j mod G) * (D/G) + j / G]`.
/// Consecutive channels of the output come from distinct groups.
pub fn group_shuffle(tape: &mut Tape, h: Var, groups: usize) -> Result<Var, TensorError> {
    let d = *tape.shape(h).last().unwrap_or(&0);
    if groups == 0 || d % groups != 0 {
        return Err(TensorError::Invalid {
            op: "group_shuffle",
            msg: format!("channel count {d} not divisible by groups {groups}"),
        });
    }
    let per = d / groups;
    let perm: Vec<usize> = (0..d).map(|j| (j % groups) * per + j / groups).collect();
    tape.permute_last(h, &perm)
}

/// Shuffled-group dilated causal convolution: shuffles channels, splits
/// them into the weight set's groups, convolves each block on its own
/// weights, and concatenates the blocks back together.
pub fn sgtcn(
    tape: &mut Tape,
    h: Var,
    conv: &BoundGroupConv,
    dilation: usize,
) -> Result<Var, TensorError> {
    let groups = conv.weights.len();
    let d = *tape.shape(h).last().unwrap_or(&0);
    if groups == 0 || d % groups != 0 {
        return Err(TensorError::Invalid {
            op: "sgtcn",
            msg: format!("channel count {d} not divisible by groups {groups}"),
        });
    }
    let per = d / groups;
    let shuffled = group_shuffle(tape, h, groups)?;
    let mut parts = Vec::with_capacity(groups);
    for (j, &w) in conv.weights.iter().enumerate() {
        let block = tape.narrow(shuffled, tape.shape(shuffled).len() - 1, j * per, per)?;
        let bias = conv.biases.as_ref().map(|bs| bs[j]);
        parts.push(tape.dilated_causal_conv1d(block, w, bias, dilation)?);
    }
    tape.concat_last(&parts)
}

/// Gated temporal layer: `tanh(sgtcn_o(h)) * sigmoid(sgtcn_g(h))`.
/// Outputs lie strictly inside (-1, 1).
pub fn ltcn_layer(
    tape: &mut Tape,
    h: Var,
    layer: &BoundLtcnLayer,
    dilation: usize,
) -> Result<Var, TensorError> {
    let o = sgtcn(tape, h, &layer.o, dilation)?;
    let g = sgtcn(tape, h, &layer.g, dilation)?;
    let to = tape.tanh(o)?;
    let sg = tape.sigmoid(g)?;
    tape.mul(to, sg)
}

/// Runs the whole gated stack, returning every layer's output in order.
pub fn ltcn_stack(
    tape: &mut Tape,
    h: Var,
    layers: &[BoundLtcnLayer],
    dilations: &[usize],
) -> Result<Vec<Var>, TensorError> {
    if layers.len() != dilations.len() {
        return Err(TensorError::Invalid {
            op: "ltcn_stack",
            msg: format!(
                "{} layers but {} dilations",
                layers.len(),
                dilations.len()
            ),
        });
    }
    let mut outputs = Vec::with_capacity(layers.len());
    let mut cur = h;
    for (layer, &d) in layers.iter().zip(dilations) {
        cur = ltcn_layer(tape, cur, layer, d)?;
        outputs.push(cur);
    }
    Ok(outputs)
}

/// Keeps only the final time step of each layer output and sums them:
/// `[N, P, D]` per layer collapses to one `[N, D]`.
pub fn last_shot_compress(tape: &mut Tape, layer_outputs: &[Var]) -> Result<Var, TensorError> {
    if layer_outputs.is_empty() {
        return Err(TensorError::Invalid {
            op: "last_shot_compress",
            msg: "no layer outputs".into(),
        });
    }
    let first_shape = tape.shape(layer_outputs[0]).to_vec();
    if first_shape.len() != 3 {
        return Err(TensorError::Invalid {
            op: "last_shot_compress",
            msg: format!("expected [N, P, D] outputs, got {first_shape:?}"),
        });
    }
    for &o in layer_outputs {
        if tape.shape(o) != first_shape {
            return Err(TensorError::ShapeMismatch {
                op: "last_shot_compress",
                lhs: first_shape,
                rhs: tape.shape(o).to_vec(),
            });
        }
    }
    let (n, p, d) = (first_shape[0], first_shape[1], first_shape[2]);
    let mut acc: Option<Var> = None;
    for &o in layer_outputs {
        let last = tape.narrow(o, 1, p - 1, 1)?;
        let flat = tape.reshape(last, &[n, d])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, flat)?,
            None => flat,
        });
    }
    Ok(acc.expect("non-empty checked above"))
}

/// Channel recalibration: pools `[N, D]` over nodes to a length-D
/// descriptor, squeezes it through the bottleneck, and scales every row
/// of the input by the resulting sigmoid gate.
pub fn se_recalibrate(tape: &mut Tape, h: Var, se: &BoundSe) -> Result<Var, TensorError> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "se_recalibrate",
            msg: format!("expected [N, D] input, got {shape:?}"),
        });
    }
    let d = shape[1];
    let pooled = tape.mean_rows(h)?;
    let row = tape.reshape(pooled, &[1, d])?;
    let w1t = tape.transpose2(se.w1)?;
    let squeezed = tape.matmul(row, w1t)?;
    let active = tape.relu(squeezed)?;
    let w2t = tape.transpose2(se.w2)?;
    let expanded = tape.matmul(active, w2t)?;
    let gate = tape.sigmoid(expanded)?;
    let gate_vec = tape.reshape(gate, &[d])?;
    tape.mul(h, gate_vec)
}

/// Full temporal extraction: gated stack, last-step compression, SE
/// recalibration. `h` is `[N, P, D]`; the result is `[N, D]`.
pub fn ltcn_extract(
    tape: &mut Tape,
    h: Var,
    bound: &BoundLtcn,
    dilations: &[usize],
) -> Result<Var, TensorError> {
    let outputs = ltcn_stack(tape, h, &bound.layers, dilations)?;
    let compressed = last_shot_compress(tape, &outputs)?;
    se_recalibrate(tape, compressed, &bound.se)
}
