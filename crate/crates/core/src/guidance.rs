//! Classifier-free guidance, style guidance, multi-style blending, and the
//! scheduled plain-CFG warm start.
//!
//! Every guided prediction is evaluated in one canonical form,
//!
//! `ε(∅)·(1 − λ_cfg) + ε(c)·(λ_cfg − Σλ_i) + Σ λ_i·ε_i(c_i)`,
//!
//! with the style sums taken in sorted order per element. Algebraically this is
//! `ε(∅) + λ_cfg(ε(c) − ε(∅)) + Σ λ_i(ε_i(c_i) − ε(c))`; evaluating it this way
//! makes the reductions between CFG, style guidance and blending hold bit for
//! bit rather than to rounding.

use crate::adapters::{AdapterSet, CompositionSpec};
use crate::autodiff::Tensor;
use crate::diffusion::Predictor;
use crate::error::{Error, Result};
use crate::model::{Denoiser, PromptTokens};

/// The noise-prediction calls guidance needs.
pub trait NoiseModel {
    /// Base-model predictions for each prompt at the same `x_t`, `t`.
    fn base_eps(&self, x_t: &Tensor, t: usize, prompts: &[PromptTokens]) -> Result<Vec<Tensor>>;

    /// Prediction with `adapters` applied at scale `alpha`, one per prompt.
    fn adapted_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        prompts: &[PromptTokens],
        adapters: &AdapterSet,
        alpha: f32,
    ) -> Result<Vec<Tensor>>;
}

fn split_batch(out: Tensor, n: usize, shape: &[usize]) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| out.slice_outer(i, 1)?.reshape(shape.to_vec()))
        .collect()
}

impl Denoiser {
    fn batched(&self, x_t: &Tensor, t: usize, prompts: &[PromptTokens], comp: &CompositionSpec) -> Result<Vec<Tensor>> {
        let s = self.config().image_size;
        let n = prompts.len();
        let x = x_t.clone().reshape([1, 3, s, s])?;
        let refs = vec![&x; n];
        let batch = Tensor::stack_outer(&refs)?;
        let out = self.predict_batch(&batch, &vec![t; n], prompts, comp)?;
        split_batch(out, n, x_t.shape())
    }
}

impl NoiseModel for Denoiser {
    fn base_eps(&self, x_t: &Tensor, t: usize, prompts: &[PromptTokens]) -> Result<Vec<Tensor>> {
        self.batched(x_t, t, prompts, &CompositionSpec::base())
    }

    fn adapted_eps(
        &self,
        x_t: &Tensor,
        t: usize,
        prompts: &[PromptTokens],
        adapters: &AdapterSet,
        alpha: f32,
    ) -> Result<Vec<Tensor>> {
        self.batched(x_t, t, prompts, &CompositionSpec::single(adapters, alpha))
    }
}

/// One style-guidance term `λ_i (ε_i(c_i) − ε(c))`.
#[derive(Clone, Copy, Debug)]
pub struct StyleTerm<'a> {
    pub adapters: &'a AdapterSet,
    pub prompt: PromptTokens,
    pub strength: f32,
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig<'a> {
    pub cfg_scale: f32,
    /// The content prompt `c`.
    pub prompt: PromptTokens,
    pub styles: Vec<StyleTerm<'a>>,
    /// Plain CFG for inference steps `i < switch_step`.
    pub switch_step: usize,
}

impl<'a> GuidanceConfig<'a> {
    pub fn cfg(prompt: PromptTokens, cfg_scale: f32) -> Self {
        GuidanceConfig {
            cfg_scale,
            prompt,
            styles: Vec::new(),
            switch_step: 0,
        }
    }

    pub fn with_style(mut self, adapters: &'a AdapterSet, prompt: PromptTokens, strength: f32) -> Self {
        self.styles.push(StyleTerm {
            adapters,
            prompt,
            strength,
        });
        self
    }

    pub fn with_switch_step(mut self, k: usize) -> Self {
        self.switch_step = k;
        self
    }
}

/// `ε(∅)·(1 − λ) + ε(c)·(λ − Σλ_i) + Σ_sorted λ_i·ε_i`.
pub fn combine(uncond: &Tensor, cond: &Tensor, cfg_scale: f32, styles: &[(f32, &Tensor)]) -> Result<Tensor> {
    if uncond.shape() != cond.shape() {
        return Err(Error::shape("guidance", uncond.shape(), cond.shape()));
    }
    for (_, e) in styles {
        if e.shape() != cond.shape() {
            return Err(Error::shape("guidance", cond.shape(), e.shape()));
        }
    }
    let mut lambdas: Vec<f32> = styles.iter().map(|s| s.0).collect();
    lambdas.sort_by(f32::total_cmp);
    let style_total: f32 = lambdas.iter().sum();
    let (wu, wc) = (1.0 - cfg_scale, cfg_scale - style_total);
    let mut terms = vec![0.0f32; styles.len()];
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .enumerate()
        .map(|(i, (&u, &c))| {
            let mut v = u * wu + c * wc;
            if !styles.is_empty() {
                for (slot, (l, e)) in terms.iter_mut().zip(styles) {
                    *slot = l * e.data()[i];
                }
                terms.sort_by(f32::total_cmp);
                v += terms.iter().sum::<f32>();
            }
            v
        })
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// `ε(∅) + λ_cfg (ε(c) − ε(∅))` with the base model.
pub fn cfg_predict(model: &impl NoiseModel, x_t: &Tensor, c: &PromptTokens, t: usize, cfg_scale: f32) -> Result<Tensor> {
    let e = model.base_eps(x_t, t, &[PromptTokens::null(), *c])?;
    combine(&e[0], &e[1], cfg_scale, &[])
}

/// Multi-style blend; with no styles this is [`cfg_predict`]. `ε(∅)` and `ε(c)`
/// are evaluated once and shared by every term.
pub fn blend_predict(model: &impl NoiseModel, cfg: &GuidanceConfig, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let e = model.base_eps(x_t, t, &[PromptTokens::null(), cfg.prompt])?;
    let style_eps = cfg
        .styles
        .iter()
        .map(|st| Ok(model.adapted_eps(x_t, t, &[st.prompt], st.adapters, 1.0)?.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<(f32, &Tensor)> = cfg
        .styles
        .iter()
        .zip(&style_eps)
        .map(|(st, e)| (st.strength, e))
        .collect();
    combine(&e[0], &e[1], cfg.cfg_scale, &terms)
}

/// Single-style guidance: `ε_0(∅) + λ_cfg(ε_0(c) − ε_0(∅)) + λ_style(ε_style(c_style) − ε_0(c))`.
#[allow(clippy::too_many_arguments)]
pub fn style_guidance_predict(
    model: &impl NoiseModel,
    style: &AdapterSet,
    x_t: &Tensor,
    c: &PromptTokens,
    c_style: &PromptTokens,
    t: usize,
    cfg_scale: f32,
    style_scale: f32,
) -> Result<Tensor> {
    let cfg = GuidanceConfig::cfg(*c, cfg_scale).with_style(style, *c_style, style_scale);
    blend_predict(model, &cfg, x_t, t)
}

/// CFG for steps before the switch, the full blend afterwards.
pub fn scheduled_predict(
    model: &impl NoiseModel,
    step: usize,
    n_steps: usize,
    cfg: &GuidanceConfig,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    if step >= n_steps || cfg.switch_step > n_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} / switch {} outside a {n_steps}-step schedule",
            cfg.switch_step
        )));
    }
    if step < cfg.switch_step {
        cfg_predict(model, x_t, &cfg.prompt, t, cfg.cfg_scale)
    } else {
        blend_predict(model, cfg, x_t, t)
    }
}

/// CFG on the adapted model `θ_0 + α·Δθ` with the style prompt: the LoRA-scale
/// alternative to style guidance.
pub fn lora_scale_predict(
    model: &impl NoiseModel,
    style: &AdapterSet,
    alpha: f32,
    x_t: &Tensor,
    c_style: &PromptTokens,
    t: usize,
    cfg_scale: f32,
) -> Result<Tensor> {
    let e = model.adapted_eps(x_t, t, &[PromptTokens::null(), *c_style], style, alpha)?;
    combine(&e[0], &e[1], cfg_scale, &[])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferenceMode {
    /// Scheduled style guidance / blending per the config.
    StyleGuidance,
    /// CFG with the first style's adapters scaled by `alpha`, its prompt as condition.
    LoraScale { alpha: f32 },
}

/// Adapts a guidance config to the sampler's [`Predictor`] interface.
pub struct GuidedPredictor<'a, M: NoiseModel> {
    pub model: &'a M,
    pub config: &'a GuidanceConfig<'a>,
    pub mode: InferenceMode,
    pub n_steps: usize,
}

impl<M: NoiseModel> Predictor for GuidedPredictor<'_, M> {
    fn predict(&self, x_t: &Tensor, t: usize, step: usize) -> Result<Tensor> {
        match self.mode {
            InferenceMode::StyleGuidance => {
                scheduled_predict(self.model, step, self.n_steps, self.config, x_t, t)
            }
            InferenceMode::LoraScale { alpha } => {
                if step < self.config.switch_step {
                    return cfg_predict(self.model, x_t, &self.config.prompt, t, self.config.cfg_scale);
                }
                let st = self.config.styles.first().ok_or_else(|| {
                    Error::InvalidArgument("LoRA-scale inference needs one style".into())
                })?;
                lora_scale_predict(self.model, st.adapters, alpha, x_t, &st.prompt, t, self.config.cfg_scale)
            }
        }
    }
}

/// A predictor that evaluates the base model alone on one prompt (no guidance);
/// used for inversion.
pub struct ConditionalPredictor<'a> {
    pub model: &'a Denoiser,
    pub prompt: PromptTokens,
}

impl Predictor for ConditionalPredictor<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, _step: usize) -> Result<Tensor> {
        self.model.predict_noise(x_t, &self.prompt, t, &CompositionSpec::base())
    }
}
