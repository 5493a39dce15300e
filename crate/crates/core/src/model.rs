//! The conditional noise predictor: a four-level conv encoder/decoder with skip
//! connections, a sinusoidal time embedding injected at every level, and a
//! mean-pooled prompt embedding concatenated at the bottleneck.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{compose_weight, AttachmentPoint, CompositionSpec};
use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 64;
pub const PROMPT_LEN: usize = 8;

/// Unconditional (∅) token; also pads every prompt to [`PROMPT_LEN`].
pub const NULL: u8 = 0;
/// The fixed rare token bound to the training content.
pub const V_STAR: u8 = 1;
/// First style-slot token; slot `k` is `STYLE_BASE + k`.
pub const STYLE_BASE: u8 = 8;
pub const MAX_STYLE_SLOTS: u8 = 16;

pub fn style_token(slot: u8) -> Result<u8> {
    if slot >= MAX_STYLE_SLOTS {
        return Err(Error::InvalidArgument(format!(
            "style slot {slot} out of range (max {})",
            MAX_STYLE_SLOTS - 1
        )));
    }
    Ok(STYLE_BASE + slot)
}

/// A NULL-padded prompt of [`PROMPT_LEN`] token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens([u8; PROMPT_LEN]);

impl PromptTokens {
    pub fn null() -> Self {
        PromptTokens([NULL; PROMPT_LEN])
    }

    /// Builds a prompt from its non-NULL prefix.
    pub fn new(ids: &[u8]) -> Result<Self> {
        if ids.len() > PROMPT_LEN {
            return Err(Error::InvalidArgument(format!(
                "prompt has {} tokens, max {PROMPT_LEN}",
                ids.len()
            )));
        }
        let mut out = [NULL; PROMPT_LEN];
        for (slot, &id) in out.iter_mut().zip(ids) {
            if id == NULL || id as usize >= VOCAB_SIZE {
                return Err(Error::UnknownToken(id));
            }
            *slot = id;
        }
        Ok(PromptTokens(out))
    }

    pub fn ids(&self) -> &[u8; PROMPT_LEN] {
        &self.0
    }

    /// The non-NULL prefix.
    pub fn tokens(&self) -> &[u8] {
        let len = self.0.iter().position(|&t| t == NULL).unwrap_or(PROMPT_LEN);
        &self.0[..len]
    }

    pub fn is_null(&self) -> bool {
        self.0.iter().all(|&t| t == NULL)
    }

    /// `self` with `token` appended after the last non-NULL id.
    pub fn append(&self, token: u8) -> Result<Self> {
        let mut ids = self.tokens().to_vec();
        ids.push(token);
        PromptTokens::new(&ids)
    }

    /// `c_style(c)`: the prompt with style slot `slot` appended.
    pub fn with_style(&self, slot: u8) -> Result<Self> {
        self.append(style_token(slot)?)
    }
}

impl std::fmt::Display for PromptTokens {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.tokens().iter().map(|t| t.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl std::str::FromStr for PromptTokens {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split_whitespace()
            .map(|t| {
                t.parse::<u8>()
                    .map_err(|_| Error::InvalidArgument(format!("bad token id `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        PromptTokens::new(&ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Feature channels at 32, 16, 8 and 4 pixels (for a 32-pixel input).
    pub channels: [usize; 4],
    pub time_dim: usize,
    pub token_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: [16, 32, 32, 64],
            time_dim: 64,
            token_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.channels.contains(&0) || self.token_dim == 0 {
            return Err(Error::Config("channel and token sizes must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }
}

/// A weight-bearing layer; convs store their kernel as `[C_out, C_in * 9]`.
#[derive(Clone, Debug)]
struct WeightLayer {
    name: String,
    weight: Param,
    bias: Param,
}

#[derive(Clone, Debug)]
struct Norm {
    name: String,
    gamma: Param,
    beta: Param,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: ModelConfig,
    layers: Vec<WeightLayer>,
    norms: Vec<Norm>,
    token_embedding: Param,
    index: HashMap<String, usize>,
}

const BLOCKS: [&str; 7] = ["enc0", "enc1", "enc2", "mid", "dec2", "dec1", "dec0"];

impl Denoiser {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, c1, c2, c3] = config.channels;
        let (td, e) = (config.time_dim, config.token_dim);
        // (name, out, in); convs have in = C_in * 9.
        let mut shapes: Vec<(String, usize, usize)> = vec![
            ("time.0".into(), td, td / 2),
            ("time.1".into(), td, td),
            ("in".into(), c0, 3 * 9),
            ("enc0".into(), c0, c0 * 9),
            ("down0".into(), c1, c0 * 9),
            ("enc1".into(), c1, c1 * 9),
            ("down1".into(), c2, c1 * 9),
            ("enc2".into(), c2, c2 * 9),
            ("down2".into(), c3, c2 * 9),
            ("mid".into(), c3, (c3 + e) * 9),
            ("dec2".into(), c2, (c3 + c2) * 9),
            ("dec1".into(), c1, (c2 + c1) * 9),
            ("dec0".into(), c0, (c1 + c0) * 9),
            ("out".into(), 3, c0 * 9),
        ];
        let block_channels = [c0, c1, c2, c3, c2, c1, c0];
        for (b, c) in BLOCKS.iter().zip(block_channels) {
            shapes.push((format!("{b}.time"), c, td));
        }
        let mut layers = Vec::new();
        for (name, m, n) in shapes {
            let mut std = (1.0 / n as f64).sqrt() as f32;
            if name == "out" {
                std *= 0.1;
            }
            let weight = Tensor::randn([m, n], &mut rng).scale(std);
            layers.push(WeightLayer {
                name,
                weight: Param::new(weight, true),
                bias: Param::new(Tensor::zeros([m]), true),
            });
        }
        let norms = BLOCKS
            .iter()
            .zip(block_channels)
            .map(|(b, c)| Norm {
                name: format!("{b}.norm"),
                gamma: Param::new(Tensor::full([c], 1.0), true),
                beta: Param::new(Tensor::zeros([c]), true),
            })
            .collect();
        let token_embedding = Param::new(Tensor::randn([VOCAB_SIZE, e], &mut rng), true);
        let index = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        Ok(Denoiser {
            config,
            layers,
            norms,
            token_embedding,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every linear and conv layer, as the `m x n` matrix a LoRA delta must match.
    pub fn attachment_points(&self) -> Vec<AttachmentPoint> {
        self.layers
            .iter()
            .map(|l| AttachmentPoint {
                name: l.name.clone(),
                out_dim: l.weight.value.dim(0),
                in_dim: l.weight.value.dim(1),
            })
            .collect()
    }

    /// Base weights `θ_0` by stable name.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.name), &l.weight));
            out.push((format!("{}.bias", l.name), &l.bias));
        }
        for n in &self.norms {
            out.push((format!("{}.gamma", n.name), &n.gamma));
            out.push((format!("{}.beta", n.name), &n.beta));
        }
        out.push(("token_embedding".into(), &self.token_embedding));
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(self.norms.iter_mut().flat_map(|n| [&mut n.gamma, &mut n.beta]))
            .chain(std::iter::once(&mut self.token_embedding))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        let id = self
            .named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.id())?;
        self.params_mut().find(|p| p.id() == id)
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Marks `θ_0` trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.params_mut().for_each(|p| p.trainable = trainable);
    }

    /// Mean of the token embeddings over all [`PROMPT_LEN`] positions.
    pub fn embed_prompt(&self, prompt: &PromptTokens) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let table = tape.param(&self.token_embedding);
        let v = self.embed(&mut tape, table, std::slice::from_ref(prompt))?;
        tape.value(v).clone().reshape([self.config.token_dim])
    }

    fn embed(&self, tape: &mut Tape, table: Var, prompts: &[PromptTokens]) -> Result<Var> {
        let ids = prompts
            .iter()
            .map(|p| {
                p.ids()
                    .iter()
                    .map(|&t| {
                        if t as usize >= VOCAB_SIZE {
                            Err(Error::UnknownToken(t))
                        } else {
                            Ok(t as usize)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        tape.embed_mean(table, ids)
    }

    fn layer(&self, name: &str) -> &WeightLayer {
        &self.layers[self.index[name]]
    }

    fn bind(&self, tape: &mut Tape, name: &str, comp: &CompositionSpec) -> Result<(Var, Var)> {
        let l = self.layer(name);
        let w0 = tape.param(&l.weight);
        let w = compose_weight(tape, name, w0, comp)?;
        Ok((w, tape.param(&l.bias)))
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var, comp: &CompositionSpec) -> Result<Var> {
        let (w, b) = self.bind(tape, name, comp)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, b)
    }

    fn conv(
        &self,
        tape: &mut Tape,
        name: &str,
        x: Var,
        stride: usize,
        comp: &CompositionSpec,
    ) -> Result<Var> {
        let (w, b) = self.bind(tape, name, comp)?;
        tape.conv2d_3x3(x, w, Some(b), stride)
    }

    /// conv → + time projection → layernorm → SiLU.
    fn block(
        &self,
        tape: &mut Tape,
        name: &str,
        x: Var,
        temb: Var,
        comp: &CompositionSpec,
    ) -> Result<Var> {
        let y = self.conv(tape, name, x, 1, comp)?;
        let tp = self.linear(tape, &format!("{name}.time"), temb, comp)?;
        let y = tape.add_channel_bias(y, tp)?;
        let norm = &self.norms[BLOCKS.iter().position(|b| *b == name).expect("known block")];
        let (g, b) = (tape.param(&norm.gamma), tape.param(&norm.beta));
        let y = tape.layernorm(y, g, b)?;
        Ok(tape.silu(y))
    }

    fn time_features(&self, ts: &[usize]) -> Tensor {
        let half = self.config.time_dim / 4;
        let width = 2 * half;
        let mut data = vec![0.0f32; ts.len() * width];
        for (row, &t) in data.chunks_mut(width).zip(ts) {
            for i in 0..half {
                let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
                let arg = t as f64 * freq;
                row[i] = arg.sin() as f32;
                row[half + i] = arg.cos() as f32;
            }
        }
        Tensor::new([ts.len(), width], data).expect("sized above")
    }

    /// `ε_θ(x, c, t)` for a batch. `x` is `[N, 3, S, S]`; `ts` and `prompts` have length N.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        ts: &[usize],
        prompts: &[PromptTokens],
        comp: &CompositionSpec,
    ) -> Result<Var> {
        let s = self.config.image_size;
        let n = ts.len();
        let xs = tape.value(x).shape();
        if xs != [n, 3, s, s] || prompts.len() != n {
            return Err(Error::BadShape {
                op: "denoiser",
                msg: format!(
                    "input {xs:?} with {n} timesteps and {} prompts, expected [{n}, 3, {s}, {s}]",
                    prompts.len()
                ),
            });
        }
        comp.validate(&self.attachment_points())?;
        let tf = tape.constant(self.time_features(ts));
        let h = self.linear(tape, "time.0", tf, comp)?;
        let h = tape.silu(h);
        let h = self.linear(tape, "time.1", h, comp)?;
        let temb = tape.silu(h);

        let h0 = self.conv(tape, "in", x, 1, comp)?;
        let e0 = self.block(tape, "enc0", h0, temb, comp)?;
        let e0 = tape.add(e0, h0)?;
        let d1 = self.conv(tape, "down0", e0, 2, comp)?;
        let e1 = self.block(tape, "enc1", d1, temb, comp)?;
        let e1 = tape.add(e1, d1)?;
        let d2 = self.conv(tape, "down1", e1, 2, comp)?;
        let e2 = self.block(tape, "enc2", d2, temb, comp)?;
        let e2 = tape.add(e2, d2)?;
        let d3 = self.conv(tape, "down2", e2, 2, comp)?;

        let table = tape.param(&self.token_embedding);
        let p = self.embed(tape, table, prompts)?;
        let side = s / 8;
        let pb = tape.broadcast_spatial(p, side, side)?;
        let cat = tape.concat_channels(d3, pb)?;
        let m = self.block(tape, "mid", cat, temb, comp)?;
        let m = tape.add(m, d3)?;

        let u = tape.upsample2x(m)?;
        let u = tape.concat_channels(u, e2)?;
        let u = self.block(tape, "dec2", u, temb, comp)?;
        let u = tape.upsample2x(u)?;
        let u = tape.concat_channels(u, e1)?;
        let u = self.block(tape, "dec1", u, temb, comp)?;
        let u = tape.upsample2x(u)?;
        let u = tape.concat_channels(u, e0)?;
        let u = self.block(tape, "dec0", u, temb, comp)?;
        self.conv(tape, "out", u, 1, comp)
    }

    /// Inference over a batch without gradient bookkeeping.
    pub fn predict_batch(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        prompts: &[PromptTokens],
        comp: &CompositionSpec,
    ) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, x, ts, prompts, comp)?;
        Ok(tape.value(out).clone())
    }

    /// `ε̂` for one image. `x_t` may be `[3, S, S]` or `[1, 3, S, S]`; the output has the same shape.
    pub fn predict_noise(
        &self,
        x_t: &Tensor,
        prompt: &PromptTokens,
        t: usize,
        comp: &CompositionSpec,
    ) -> Result<Tensor> {
        let shape = x_t.shape().to_vec();
        let s = self.config.image_size;
        let x = x_t.clone().reshape([1, 3, s, s])?;
        self.predict_batch(&x, &[t], std::slice::from_ref(prompt), comp)?
            .reshape(shape)
    }

    /// Base weights as raw tensors for persistence.
    pub(crate) fn set_param_values(&mut self, mut values: HashMap<String, Tensor>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.shape().to_vec()))
            .collect();
        for (name, shape) in &names {
            let v = values
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if v.shape() != shape.as_slice() {
                return Err(Error::Layer {
                    layer: name.clone(),
                    msg: format!("shape {:?} does not match model {:?}", v.shape(), shape),
                });
            }
            let p = self.param_mut(name).expect("listed above");
            p.grad = Tensor::zeros(shape.clone());
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}
