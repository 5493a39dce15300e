//! Edits an existing PNG: DDIM-inverts it with the base model and samples it
//! back with style guidance. Without an input path, a procedural image is
//! written and used. Run `pretrain_base` and `customize_pair` first.
//!
//! cargo run --release --example invert_edit -- work [input.png]

use std::path::PathBuf;

use pairlora::config::RunConfig;
use pairlora::evaluation::perceptual_distance;
use pairlora::io::{load_png, save_png};
use pairlora::pairgen::{gen_content, Category, ContentSpec};
use pairlora::pipeline::{self, StyleInput, BASE_CHECKPOINT, STYLE_ADAPTER};

fn main() -> pairlora::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "work".into()));
    let input = match args.next() {
        Some(p) => PathBuf::from(p),
        None => {
            let p = work.join("edit_input.png");
            save_png(&gen_content(&ContentSpec::new(Category::Face, 2024, 11)), &p)?;
            p
        }
    };
    let cfg = RunConfig::default();
    let base = work.join("base").join(BASE_CHECKPOINT);
    let original = load_png(&input)?;
    let out = work.join("edit");
    let plain = pipeline::invert_edit_cmd(&cfg, &base, &input, Category::Face, None, &out.join("plain"))?;
    let style = StyleInput {
        adapters: pipeline::load_lora(&work.join("lora").join(STYLE_ADAPTER))?,
        slot: cfg.data.style_slot,
        strength: cfg.guidance.style_scale,
    };
    let styled = pipeline::invert_edit_cmd(&cfg, &base, &input, Category::Face, Some(&style), &out.join("styled"))?;
    println!("reconstruction distance to input {:.4}", perceptual_distance(&plain, &original)?);
    println!("styled edit distance to reconstruction {:.4}", perceptual_distance(&styled, &plain)?);
    println!("before/after grids in {}", out.display());
    Ok(())
}
