//! Style guidance on a trained model: the guidance identities, a seed x
//! strength sweep, LoRA-scale inference for comparison, and a two-style blend.
//! Run `pretrain_base` and `customize_pair` first.
//!
//! cargo run --release --example style_guidance -- work

use std::path::PathBuf;

use pairlora::config::RunConfig;
use pairlora::diffusion::{forward_diffuse, initial_noise};
use pairlora::guidance::{cfg_predict, lora_scale_predict, style_guidance_predict, GuidanceConfig, blend_predict};
use pairlora::pairgen::{gen_content, Category, ContentSpec};
use pairlora::pipeline::{self, StyleInput, BASELINE_ADAPTER, BASE_CHECKPOINT, STYLE_ADAPTER};

fn main() -> pairlora::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "work".into()));
    let cfg = RunConfig::default();
    let base = work.join("base").join(BASE_CHECKPOINT);
    let style_path = work.join("lora").join(STYLE_ADAPTER);
    let model = pipeline::load_base(&base)?;
    let style = pipeline::load_lora(&style_path)?;
    let s = cfg.schedule.build()?;

    let c = Category::Face.prompt();
    let c_style = c.with_style(cfg.data.style_slot)?;
    let x0 = gen_content(&ContentSpec::new(Category::Face, 5, 6));
    let x_t = forward_diffuse(&x0, 400, &initial_noise(&[3, 32, 32], 0), &s)?;
    let lcfg = cfg.guidance.cfg_scale;
    let plain = cfg_predict(&model, &x_t, &c, 400, lcfg)?;
    let zero = style_guidance_predict(&model, &style, &x_t, &c, &c_style, 400, lcfg, 0.0)?;
    println!("style strength 0 equals CFG bit for bit: {}", zero == plain);
    let full = style_guidance_predict(&model, &style, &x_t, &c, &c_style, 400, lcfg, lcfg)?;
    let lora = lora_scale_predict(&model, &style, 1.0, &x_t, &c_style, 400, lcfg)?;
    println!("at strength = cfg scale, style guidance vs LoRA-scale prediction differ by {:.4}", full.sub(&lora)?.norm());
    let one = GuidanceConfig::cfg(c, lcfg).with_style(&style, c_style, 3.0);
    let sg = style_guidance_predict(&model, &style, &x_t, &c, &c_style, 400, lcfg, 3.0)?;
    println!("one-style blend equals style guidance: {}", blend_predict(&model, &one, &x_t, 400)? == sg);

    let cols = pipeline::sweep_cmd(&cfg, &base, Category::Face, &style, cfg.data.style_slot, &[0.0, 1.0, 2.0, 3.0], &[0, 1, 2], &work.join("sweep"))?;
    println!("sweep: {cols} strengths per seed in {}", work.join("sweep").display());

    let styles = vec![
        StyleInput { adapters: style.clone(), slot: cfg.data.style_slot, strength: 2.0 },
        StyleInput { adapters: pipeline::load_lora(&work.join("lora").join(BASELINE_ADAPTER))?, slot: 1, strength: 1.0 },
    ];
    pipeline::sample_cmd(&cfg, &base, Category::Face, &styles, &[0, 1, 2], &work.join("blend"))?;
    println!("blend of two styles in {}", work.join("blend").display());
    Ok(())
}
