//! Pretraining of the base denoiser, joint content/style adapter training from
//! one pair, and the single-image adapter baseline.

use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, CompositionSpec};
use crate::autodiff::{AdamW, Param, Tape, Tensor, Var};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Denoiser, PromptTokens};
use crate::pairgen::Category;

#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub category: Category,
    pub style: String,
    pub variant_seed: u64,
    pub palette_seed: u64,
    pub slot: u8,
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub x_content: Tensor,
    pub x_style: Tensor,
    pub c_content: PromptTokens,
    pub c_style: PromptTokens,
    pub meta: PairMeta,
}

impl TrainingPair {
    pub fn new(
        x_content: Tensor,
        x_style: Tensor,
        c_content: PromptTokens,
        c_style: PromptTokens,
        meta: PairMeta,
    ) -> Result<Self> {
        if x_content.shape() != x_style.shape() {
            return Err(Error::shape("training pair", x_content.shape(), x_style.shape()));
        }
        if c_style != c_content.with_style(meta.slot)? {
            return Err(Error::InvalidArgument(format!(
                "c_style `{c_style}` is not c_content `{c_content}` with style slot {}",
                meta.slot
            )));
        }
        Ok(TrainingPair {
            x_content,
            x_style,
            c_content,
            c_style,
            meta,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    /// Content-only steps before the joint phase.
    pub warmup_steps: usize,
    pub joint_steps: usize,
    pub baseline_steps: usize,
    pub rank: usize,
    /// Independent `(t, ε)` draws per loss evaluation.
    pub draws: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            warmup_steps: 200,
            joint_steps: 400,
            baseline_steps: 400,
            rank: 4,
            draws: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joint_steps == 0 || self.draws == 0 || self.rank == 0 {
            return Err(Error::Config(
                "train.joint_steps, train.draws and train.rank must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A batch of `(t, ε)` draws, `t` uniform on `[1, T]`.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(rng: &mut impl Rng, n: usize, image: &[usize], s: &NoiseSchedule) -> Self {
        let ts = (0..n).map(|_| rng.random_range(1..=s.steps())).collect();
        let mut shape = vec![n];
        shape.extend_from_slice(image);
        NoiseDraw {
            ts,
            eps: Tensor::randn(shape, rng),
        }
    }
}

/// Noisy copies of `x0` at each draw's timestep, stacked along the batch axis.
fn noisy_batch(x0: &Tensor, draw: &NoiseDraw, s: &NoiseSchedule) -> Result<Tensor> {
    let parts = draw
        .ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let eps = draw.eps.slice_outer(i, 1)?.reshape(x0.shape().to_vec())?;
            forward_diffuse(x0, t, &eps, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    let mut shape = vec![draw.ts.len()];
    shape.extend_from_slice(x0.shape());
    Tensor::stack_outer(&refs)?.reshape(shape)
}

/// `mean_i w_{t_i} ‖ε_i − ε̂_i‖²` averaged over elements.
fn weighted_mse(tape: &mut Tape, pred: Var, draw: &NoiseDraw, s: &NoiseSchedule) -> Result<Var> {
    let target = tape.constant(draw.eps.clone());
    if draw.ts.iter().all(|&t| s.loss_weight(t) == 1.0) {
        return tape.mse(pred, target);
    }
    let per = draw.eps.numel() / draw.ts.len();
    let w = Tensor::from_fn(draw.eps.shape().to_vec(), |i| s.loss_weight(draw.ts[i / per]) as f32);
    let w = tape.constant(w);
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let wsq = tape.mul(sq, w)?;
    let total = tape.sum(wsq);
    Ok(tape.scalar_mul(total, 1.0 / draw.eps.numel() as f32))
}

fn denoise_loss(
    tape: &mut Tape,
    model: &Denoiser,
    x0: &Tensor,
    prompt: &PromptTokens,
    comp: &CompositionSpec,
    draw: &NoiseDraw,
    s: &NoiseSchedule,
) -> Result<Var> {
    let x_t = noisy_batch(x0, draw, s)?;
    let x = tape.constant(x_t);
    let prompts = vec![*prompt; draw.ts.len()];
    let pred = model.forward(tape, x, &draw.ts, &prompts, comp)?;
    weighted_mse(tape, pred, draw, s)
}

/// Content reconstruction with only the content adapters attached.
pub fn loss_content(
    tape: &mut Tape,
    pair: &TrainingPair,
    model: &Denoiser,
    content: &AdapterSet,
    draw: &NoiseDraw,
    s: &NoiseSchedule,
) -> Result<Var> {
    let comp = CompositionSpec::single(content, 1.0);
    denoise_loss(tape, model, &pair.x_content, &pair.c_content, &comp, draw, s)
}

/// Style reconstruction through `θ_0 + sg[Δθ_content] + Δθ_style`.
pub fn loss_combined(
    tape: &mut Tape,
    pair: &TrainingPair,
    model: &Denoiser,
    content: &AdapterSet,
    style: &AdapterSet,
    draw: &NoiseDraw,
    s: &NoiseSchedule,
) -> Result<Var> {
    let comp = CompositionSpec::base()
        .with_stop_grad(content, 1.0)
        .with(style, 1.0);
    denoise_loss(tape, model, &pair.x_style, &pair.c_style, &comp, draw, s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss_content: f32,
    /// Absent during warmup.
    pub loss_combined: Option<f32>,
}

/// Per-step losses; written as CSV `step,loss_content,loss_combined`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<LossRow>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_content,loss_combined\n");
        for r in &self.rows {
            let comb = r.loss_combined.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{}", r.step, r.loss_content, comb);
        }
        out
    }

    /// Mean of the first / last `k` values of the selected column.
    pub fn head_tail_means(&self, k: usize, pick: impl Fn(&LossRow) -> Option<f32>) -> (f32, f32) {
        let vals: Vec<f32> = self.rows.iter().filter_map(&pick).collect();
        let k = k.min(vals.len()).max(1);
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
        (mean(&vals[..k.min(vals.len())]), mean(&vals[vals.len().saturating_sub(k)..]))
    }
}

fn check_loss(v: f32, context: &'static str, step: usize) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context, step })
    }
}

fn frozen_copy(model: &Denoiser) -> Denoiser {
    let mut base = model.clone();
    base.set_trainable(false);
    base
}

#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub content: AdapterSet,
    pub style: AdapterSet,
    pub curve: LossCurve,
}

/// Content-only warmup, then joint steps on `L_content + L_combined` with
/// independent draws per loss. The base weights are never modified.
pub fn train_pair(
    pair: &TrainingPair,
    model: &Denoiser,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
) -> Result<PairOutcome> {
    cfg.validate()?;
    let base = frozen_copy(model);
    let (mut content, mut style) =
        AdapterSet::orthogonal_pair(&base.attachment_points(), cfg.rank, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A12);
    let mut opt_c = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut opt_s = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let image = pair.x_content.shape().to_vec();
    let mut curve = LossCurve::default();
    for step in 0..cfg.warmup_steps + cfg.joint_steps {
        let joint = step >= cfg.warmup_steps;
        let mut tape = Tape::new();
        let dc = NoiseDraw::sample(&mut rng, cfg.draws, &image, s);
        let lc = loss_content(&mut tape, pair, &base, &content, &dc, s)?;
        let lc_val = check_loss(tape.value(lc).item(), "train_pair", step)?;
        let (total, lcomb_val) = if joint {
            let ds = NoiseDraw::sample(&mut rng, cfg.draws, &image, s);
            let ls = loss_combined(&mut tape, pair, &base, &content, &style, &ds, s)?;
            let v = check_loss(tape.value(ls).item(), "train_pair", step)?;
            (tape.add(lc, ls)?, Some(v))
        } else {
            (lc, None)
        };
        let grads = tape.backward(total)?;
        content.zero_grad();
        style.zero_grad();
        grads.accumulate(content.params_mut());
        opt_c.step(content.params_mut());
        if joint {
            grads.accumulate(style.params_mut());
            opt_s.step(style.params_mut());
        }
        curve.rows.push(LossRow {
            step,
            loss_content: lc_val,
            loss_combined: lcomb_val,
        });
        if step % 50 == 0 {
            debug!("pair step {step}: content {lc_val:.4} combined {lcomb_val:?}");
        }
    }
    content.scale = 1.0;
    style.scale = 1.0;
    Ok(PairOutcome {
        content,
        style,
        curve,
    })
}

/// Standard single-image adapter on `x_style` with the plain diffusion loss;
/// both `A` and `B` train.
pub fn train_baseline_db_lora(
    x_style: &Tensor,
    c_style: &PromptTokens,
    model: &Denoiser,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
) -> Result<(AdapterSet, LossCurve)> {
    cfg.validate()?;
    let base = frozen_copy(model);
    let mut set = AdapterSet::baseline(&base.attachment_points(), cfg.rank, cfg.seed ^ 0xBA5E)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDB10);
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut curve = LossCurve::default();
    for step in 0..cfg.baseline_steps {
        let mut tape = Tape::new();
        let draw = NoiseDraw::sample(&mut rng, cfg.draws, x_style.shape(), s);
        let comp = CompositionSpec::single(&set, 1.0);
        let l = denoise_loss(&mut tape, &base, x_style, c_style, &comp, &draw, s)?;
        let v = check_loss(tape.value(l).item(), "train_baseline", step)?;
        let grads = tape.backward(l)?;
        set.zero_grad();
        grads.accumulate(set.params_mut());
        opt.step(set.params_mut());
        curve.rows.push(LossRow {
            step,
            loss_content: v,
            loss_combined: None,
        });
    }
    Ok((set, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Probability of replacing a prompt with ∅.
    pub uncond_prob: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch: 16,
            lr: 2e-3,
            warmup_steps: 100,
            uncond_prob: 0.1,
            seed: 0,
        }
    }
}

/// Linear warmup then cosine decay to a tenth of the peak rate.
fn lr_at(cfg: &PretrainConfig, step: usize) -> f32 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f32 / cfg.warmup_steps as f32;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f32;
    let p = (step - cfg.warmup_steps) as f32 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * p).cos()))
}

/// Trains `θ_0` on `(image, prompt)` examples with the diffusion objective.
/// Returns per-step mean losses.
pub fn pretrain(
    model: &mut Denoiser,
    data: &[(Tensor, PromptTokens)],
    cfg: &PretrainConfig,
    s: &NoiseSchedule,
) -> Result<Vec<f32>> {
    if data.is_empty() || cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::Config("pretraining needs data, batch > 0 and steps > 0".into()));
    }
    model.set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr).with_weight_decay(0.0);
    let image = data[0].0.shape().to_vec();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let prompts: Vec<PromptTokens> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f32>() < cfg.uncond_prob {
                    PromptTokens::null()
                } else {
                    data[i].1
                }
            })
            .collect();
        let draw = NoiseDraw::sample(&mut rng, cfg.batch, &image, s);
        let x_t = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let eps = draw.eps.slice_outer(k, 1)?.reshape(image.clone())?;
                forward_diffuse(&data[i].0, draw.ts[k], &eps, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = x_t.iter().collect();
        let mut shape = vec![cfg.batch];
        shape.extend_from_slice(&image);
        let batch = Tensor::stack_outer(&refs)?.reshape(shape)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let pred = model.forward(&mut tape, x, &draw.ts, &prompts, &CompositionSpec::base())?;
        let l = weighted_mse(&mut tape, pred, &draw, s)?;
        let v = check_loss(tape.value(l).item(), "pretrain", step)?;
        let grads = tape.backward(l)?;
        model.params_mut().for_each(Param::zero_grad);
        grads.accumulate(model.params_mut());
        opt.lr = lr_at(cfg, step);
        opt.step(model.params_mut());
        losses.push(v);
        if step % 250 == 0 || step + 1 == cfg.steps {
            info!("pretrain step {step}/{}: loss {v:.4}", cfg.steps);
        }
    }
    model.set_trainable(false);
    Ok(losses)
}

/// Mean diffusion loss over a fixed set of draws; a pure function of its inputs.
pub fn validation_loss(
    model: &Denoiser,
    data: &[(Tensor, PromptTokens)],
    seed: u64,
    s: &NoiseSchedule,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for (x0, prompt) in data {
        let draw = NoiseDraw::sample(&mut rng, 4, x0.shape(), s);
        let mut tape = Tape::no_grad();
        let l = denoise_loss(&mut tape, model, x0, prompt, &CompositionSpec::base(), &draw, s)?;
        total += tape.value(l).item() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
