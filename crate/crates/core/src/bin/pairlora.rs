use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pairlora::config::RunConfig;
use pairlora::pairgen::Category;
use pairlora::pipeline::{self, StyleInput};

#[derive(Parser)]
#[command(version, about = "Pair-trained style adapters and style guidance for a toy diffusion model")]
struct Cli {
    /// TOML config file; defaults are used for anything it omits.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Base {
    /// Base model checkpoint.
    #[arg(long, value_name = "FILE")]
    base: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pretraining corpus and the training pair.
    GenPairs {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base denoiser on the corpus.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train content and style adapters on the pair.
    Customize {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also train the single-image adapter baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Generate images, optionally with one style.
    Sample {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        style: Option<PathBuf>,
        /// Style strength; defaults to `guidance.style_scale`.
        #[arg(long)]
        strength: Option<f32>,
        #[arg(long, default_value = "face")]
        category: Category,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seed x strength grid for one style.
    Sweep {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        style: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        strengths: Vec<f32>,
        #[arg(long, default_value = "face")]
        category: Category,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend several styles, each `ADAPTER:SLOT:STRENGTH`.
    Blend {
        #[command(flatten)]
        base: Base,
        #[arg(long = "style", required = true, value_name = "ADAPTER:SLOT:STRENGTH")]
        styles: Vec<String>,
        #[arg(long, default_value = "face")]
        category: Category,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert a PNG and resample it with style guidance.
    InvertEdit {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        style: Option<PathBuf>,
        #[arg(long)]
        strength: Option<f32>,
        #[arg(long, default_value = "face")]
        category: Category,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare pair-trained adapters against the baseline on held-out images.
    Eval {
        #[command(flatten)]
        base: Base,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_blend(spec: &str, default_slot: u8) -> pairlora::Result<StyleInput> {
    let bad = || pairlora::Error::InvalidArgument(format!("bad style `{spec}`, expected ADAPTER:SLOT:STRENGTH"));
    let mut parts = spec.rsplitn(3, ':');
    let strength = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let (slot, path) = match (parts.next(), parts.next()) {
        (Some(slot), Some(path)) => (slot.parse().map_err(|_| bad())?, path),
        (Some(path), None) => (default_slot, path),
        _ => return Err(bad()),
    };
    Ok(StyleInput {
        adapters: pipeline::load_lora(&PathBuf::from(path))?,
        slot,
        strength,
    })
}

fn run(cli: Cli) -> pairlora::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let slot = cfg.data.style_slot;
    let single = |style: Option<PathBuf>, strength: Option<f32>| -> pairlora::Result<Option<StyleInput>> {
        style
            .map(|p| {
                Ok(StyleInput {
                    adapters: pipeline::load_lora(&p)?,
                    slot,
                    strength: strength.unwrap_or(cfg.guidance.style_scale),
                })
            })
            .transpose()
    };
    match cli.command {
        Command::GenPairs { out } => {
            pipeline::gen_pairs(&cfg, &out)?;
        }
        Command::Pretrain { data, out } => {
            let summary = pipeline::pretrain_cmd(&cfg, &data, &out)?;
            println!("validation loss {:.6}", summary.validation_loss);
        }
        Command::Customize {
            base,
            data,
            out,
            baseline,
        } => pipeline::customize(&cfg, &data, &base.base, &out, baseline)?,
        Command::Sample {
            base,
            style,
            strength,
            category,
            seeds,
            out,
        } => {
            let styles: Vec<StyleInput> = single(style, strength)?.into_iter().collect();
            pipeline::sample_cmd(&cfg, &base.base, category, &styles, &seeds, &out)?;
        }
        Command::Sweep {
            base,
            style,
            strengths,
            category,
            seeds,
            out,
        } => {
            let set = pipeline::load_lora(&style)?;
            pipeline::sweep_cmd(&cfg, &base.base, category, &set, slot, &strengths, &seeds, &out)?;
        }
        Command::Blend {
            base,
            styles,
            category,
            seeds,
            out,
        } => {
            let styles = styles
                .iter()
                .map(|s| parse_blend(s, slot))
                .collect::<pairlora::Result<Vec<_>>>()?;
            pipeline::sample_cmd(&cfg, &base.base, category, &styles, &seeds, &out)?;
        }
        Command::InvertEdit {
            base,
            input,
            style,
            strength,
            category,
            out,
        } => {
            let st = single(style, strength)?;
            pipeline::invert_edit_cmd(&cfg, &base.base, &input, category, st.as_ref(), &out)?;
        }
        Command::Eval {
            base,
            style,
            baseline,
            out,
        } => {
            let outcome = pipeline::eval_cmd(&cfg, &base.base, &style, &baseline, &out)?;
            for (split, v) in &outcome.pareto {
                println!("{split}: baseline points dominated {:.2}", v.fraction);
            }
            println!(
                "style guidance closer to content than LoRA scale on {:.2} of items",
                outcome.guidance_win_rate()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                pairlora::Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
