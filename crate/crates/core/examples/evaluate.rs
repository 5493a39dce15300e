//! Held-out evaluation of the pair-trained style adapter against the
//! single-image baseline: tradeoff curves, Pareto comparison, diversity and
//! style guidance vs LoRA scale. Run `pretrain_base` and `customize_pair` first.
//!
//! cargo run --release --example evaluate -- work

use std::path::PathBuf;

use pairlora::config::RunConfig;
use pairlora::pipeline::{self, BASELINE_ADAPTER, BASE_CHECKPOINT, STYLE_ADAPTER};

fn main() -> pairlora::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "work".into()));
    let cfg = RunConfig::default();
    let lora = work.join("lora");
    let outcome = pipeline::eval_cmd(
        &cfg,
        &work.join("base").join(BASE_CHECKPOINT),
        &lora.join(STYLE_ADAPTER),
        &lora.join(BASELINE_ADAPTER),
        &work.join("eval"),
    )?;
    for a in outcome.report.aggregate(cfg.eval.bootstrap, cfg.eval.seed)? {
        if cfg.eval.strengths.contains(&a.strength) {
            println!(
                "{:<18} {:<16} {:>4}  to GT style {:.4}  to content {:.4}",
                a.split, a.method, a.strength, a.mean_gt, a.mean_content
            );
        }
    }
    for (split, v) in &outcome.pareto {
        let (ours, theirs) = outcome.diversity_means(split);
        println!("{split}: baseline points dominated {:.2}, diversity {ours:.4} vs {theirs:.4}", v.fraction);
    }
    println!(
        "style guidance closer to content than LoRA scale: {:.2} of items (lambda = alpha * cfg), {:.2} (lambda = alpha)",
        outcome.guidance_win_rate(),
        outcome.guidance_win_rate_unscaled()
    );
    Ok(())
}
