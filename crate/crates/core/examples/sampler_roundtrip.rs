//! Noise schedule, forward diffusion, and DDIM sampling and inversion with an
//! untrained denoiser.
//!
//! cargo run --release --example sampler_roundtrip

use pairlora::adapters::CompositionSpec;
use pairlora::diffusion::{ddim_invert, forward_diffuse, initial_noise, sample, sample_from, NoiseSchedule, SamplerConfig, ScheduleKind};
use pairlora::guidance::ConditionalPredictor;
use pairlora::model::{Denoiser, ModelConfig};
use pairlora::pairgen::{gen_content, Category, ContentSpec};

fn main() -> pairlora::Result<()> {
    let s = NoiseSchedule::new(1000, ScheduleKind::LinearBeta)?;
    println!("alpha_bar[1] = {:.6}, alpha_bar[T] = {:.6}", s.alpha_bar(1), s.alpha_bar(s.steps()));

    let model = Denoiser::new(ModelConfig::default(), 0)?;
    println!("denoiser with {} parameters", model.num_params());
    let x0 = gen_content(&ContentSpec::new(Category::Landscape, 3, 4));
    let eps = initial_noise(&[3, 32, 32], 1);
    let x_t = forward_diffuse(&x0, 500, &eps, &s)?;
    let pred = model.predict_noise(&x_t, &Category::Landscape.prompt(), 500, &CompositionSpec::base())?;
    println!("untrained noise prediction error at t=500: {:.3}", pred.sub(&eps)?.norm());

    let sampler = SamplerConfig { num_inference_steps: 20 };
    let c = ConditionalPredictor { model: &model, prompt: Category::Landscape.prompt() };
    let a = sample(&c, &[3, 32, 32], 42, &sampler, &s)?;
    let b = sample(&c, &[3, 32, 32], 42, &sampler, &s)?;
    println!("same seed, same sample: {}", a == b);

    let latent = ddim_invert(&x0, 600, &c, &sampler, &s)?;
    let back = sample_from(&c, latent, 600, &sampler, &s)?;
    // Inversion reuses the prediction at the lower timestep, so it is only
    // approximate unless the predictor is locally constant.
    println!("invert to t=600 and back: max abs error {:.2e}", back.max_abs_diff(&x0)?);
    Ok(())
}
