//! Trains the content and style adapters on the pair (and the single-image
//! baseline), then compares denoising error on the style image.
//! Run `pretrain_base` first.
//!
//! cargo run --release --example customize_pair -- work

use std::path::PathBuf;

use pairlora::adapters::CompositionSpec;
use pairlora::config::RunConfig;
use pairlora::diffusion::{forward_diffuse, initial_noise};
use pairlora::pipeline::{self, Manifest, BASELINE_ADAPTER, BASE_CHECKPOINT, CONTENT_ADAPTER, STYLE_ADAPTER};

fn main() -> pairlora::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "work".into()));
    let cfg = RunConfig::default();
    let (data, base, lora) = (work.join("data"), work.join("base").join(BASE_CHECKPOINT), work.join("lora"));
    pipeline::customize(&cfg, &data, &base, &lora, true)?;

    let model = pipeline::load_base(&base)?;
    let content = pipeline::load_lora(&lora.join(CONTENT_ADAPTER))?;
    let style = pipeline::load_lora(&lora.join(STYLE_ADAPTER))?;
    let baseline = pipeline::load_lora(&lora.join(BASELINE_ADAPTER))?;
    let pair = Manifest::load(&data)?.pair(&data)?;
    let s = cfg.schedule.build()?;
    let both = CompositionSpec::single(&content, 1.0).with(&style, 1.0);
    let rows = [
        ("base", CompositionSpec::base()),
        ("content + style", both),
        ("baseline", CompositionSpec::single(&baseline, 1.0)),
    ];
    for (name, comp) in rows {
        let mut err = 0.0;
        for (k, t) in [50usize, 200, 400, 600].into_iter().enumerate() {
            let eps = initial_noise(&[3, 32, 32], k as u64);
            let x_t = forward_diffuse(&pair.x_style, t, &eps, &s)?;
            err += model.predict_noise(&x_t, &pair.c_style, t, &comp)?.sub(&eps)?.norm() / 4.0;
        }
        println!("{name:>16}: mean noise error on the style image {err:.3}");
    }
    Ok(())
}
