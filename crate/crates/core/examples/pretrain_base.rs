//! Writes the corpus and training pair, then pretrains the base denoiser.
//! The step count is an optional second argument (default from config).
//!
//! cargo run --release --example pretrain_base -- work 4000

use std::path::PathBuf;

use pairlora::config::RunConfig;
use pairlora::pipeline::{gen_pairs, pretrain_cmd};

fn main() -> pairlora::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "work".into()));
    let mut overrides = Vec::new();
    if let Some(steps) = args.next() {
        overrides.push(format!("pretrain.steps={steps}"));
    }
    let cfg = RunConfig::from_toml("", &overrides)?;
    let manifest = gen_pairs(&cfg, &work.join("data"))?;
    println!("{} manifest entries", manifest.entries.len());
    let summary = pretrain_cmd(&cfg, &work.join("data"), &work.join("base"))?;
    let k = summary.losses.len().min(100);
    let head: f32 = summary.losses[..k].iter().sum::<f32>() / k as f32;
    let tail: f32 = summary.losses[summary.losses.len() - k..].iter().sum::<f32>() / k as f32;
    println!("training loss {head:.4} -> {tail:.4}, validation {:.4}", summary.validation_loss);
    Ok(())
}
