//! The end-to-end commands: dataset generation, pretraining, pair
//! customization, sampling, sweeps, blending, real-image editing and
//! evaluation. Each writes its resolved config next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::adapters::AdapterSet;
use crate::autodiff::Tensor;
use crate::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use crate::config::RunConfig;
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_content, curve, edit_from_latent, eval_style_content, invert, invert_items, matched_diversity,
    pareto_compare, ContentComparison, DiversityMatch, ParetoVerdict, StrengthAxis, SweepReport, SweepSpec,
};
use crate::guidance::{GuidanceConfig, GuidedPredictor, InferenceMode};
use crate::io::{grid, load_png, png_bytes, save_png, write_text};
use crate::model::{Denoiser, PromptTokens};
use crate::pairgen::{corpus_specs, gen_content, gen_eval_set, make_pair, Category};
use crate::training::{
    pretrain, train_baseline_db_lora, train_pair, validation_loss, PairMeta, TrainingPair,
};

pub const MANIFEST: &str = "manifest.tsv";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const CONTENT_ADAPTER: &str = "content.lora";
pub const STYLE_ADAPTER: &str = "style.lora";
pub const BASELINE_ADAPTER: &str = "baseline.lora";

const MANIFEST_HEADER: &str = "role\tcategory\tvariant_seed\tpalette_seed\tstyle\tslot\tcontent\tstyled";
const VALIDATION_ITEMS: usize = 64;
const VALIDATION_SEED: u64 = 0x5EED;

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn record_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    info!("resolved config:\n{}", cfg.to_toml());
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
        ))
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub enum ManifestEntry {
    /// A pretraining image with its plain prompt.
    Corpus {
        category: Category,
        variant_seed: u64,
        palette_seed: u64,
        content: PathBuf,
    },
    Pair {
        meta: PairMeta,
        content: PathBuf,
        styled: PathBuf,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            let _ = match e {
                ManifestEntry::Corpus {
                    category,
                    variant_seed,
                    palette_seed,
                    content,
                } => writeln!(
                    out,
                    "corpus\t{category}\t{variant_seed}\t{palette_seed}\t-\t-\t{}\t-",
                    content.display()
                ),
                ManifestEntry::Pair { meta, content, styled } => writeln!(
                    out,
                    "pair\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    meta.category,
                    meta.variant_seed,
                    meta.palette_seed,
                    meta.style,
                    meta.slot,
                    content.display(),
                    styled.display()
                ),
            };
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format("manifest header missing".into()));
        }
        let entries = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 2));
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 8 {
                    return Err(bad("expected 8 tab-separated fields"));
                }
                let category: Category = f[1].parse().map_err(|_| bad("bad category"))?;
                let variant_seed = f[2].parse().map_err(|_| bad("bad variant_seed"))?;
                let palette_seed = f[3].parse().map_err(|_| bad("bad palette_seed"))?;
                match f[0] {
                    "corpus" => Ok(ManifestEntry::Corpus {
                        category,
                        variant_seed,
                        palette_seed,
                        content: PathBuf::from(f[6]),
                    }),
                    "pair" => Ok(ManifestEntry::Pair {
                        meta: PairMeta {
                            category,
                            style: f[4].to_string(),
                            variant_seed,
                            palette_seed,
                            slot: f[5].parse().map_err(|_| bad("bad slot"))?,
                        },
                        content: PathBuf::from(f[6]),
                        styled: PathBuf::from(f[7]),
                    }),
                    _ => Err(bad("unknown role")),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Manifest { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The corpus as `(image, prompt)` examples, read from `dir`.
    pub fn corpus(&self, dir: &Path) -> Result<Vec<(Tensor, PromptTokens)>> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                ManifestEntry::Corpus { category, content, .. } => Some((category, content)),
                ManifestEntry::Pair { .. } => None,
            })
            .map(|(c, p)| Ok((load_png(&dir.join(p))?, c.prompt())))
            .collect()
    }

    /// The first training pair, read from `dir`.
    pub fn pair(&self, dir: &Path) -> Result<TrainingPair> {
        let (meta, content, styled) = self
            .entries
            .iter()
            .find_map(|e| match e {
                ManifestEntry::Pair { meta, content, styled } => Some((meta, content, styled)),
                ManifestEntry::Corpus { .. } => None,
            })
            .ok_or_else(|| Error::Format(format!("{}: no training pair", dir.join(MANIFEST).display())))?;
        let c_content = meta.category.content_prompt();
        TrainingPair::new(
            load_png(&dir.join(content))?,
            load_png(&dir.join(styled))?,
            c_content,
            c_content.with_style(meta.slot)?,
            meta.clone(),
        )
    }
}

/// Writes the pretraining corpus and the training pair under `out`.
pub fn gen_pairs(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    mkdir(&out.join("corpus"))?;
    mkdir(&out.join("pair"))?;
    record_config(cfg, out)?;
    let size = cfg.model.image_size;
    let mut manifest = Manifest::default();
    for (i, spec) in corpus_specs(cfg.data.corpus_size, cfg.data.corpus_seed, size).iter().enumerate() {
        let rel = PathBuf::from(format!("corpus/{i:05}.png"));
        save_png(&gen_content(spec), &out.join(&rel))?;
        manifest.entries.push(ManifestEntry::Corpus {
            category: spec.category,
            variant_seed: spec.variant_seed,
            palette_seed: spec.palette_seed,
            content: rel,
        });
    }
    let pair = make_pair(&cfg.data.pair_spec(size), &cfg.data.transform, cfg.data.style_slot)?;
    let (content, styled) = (PathBuf::from("pair/content.png"), PathBuf::from("pair/style.png"));
    save_png(&pair.x_content, &out.join(&content))?;
    save_png(&pair.x_style, &out.join(&styled))?;
    manifest.entries.push(ManifestEntry::Pair {
        meta: pair.meta,
        content,
        styled,
    });
    write_text(&out.join(MANIFEST), &manifest.to_tsv())?;
    info!("wrote {} entries to {}", manifest.entries.len(), out.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub losses: Vec<f32>,
    pub validation_loss: f64,
}

/// Validation examples: the first corpus images.
fn validation_set(data: &[(Tensor, PromptTokens)]) -> &[(Tensor, PromptTokens)] {
    &data[..data.len().min(VALIDATION_ITEMS)]
}

pub fn pretrain_cmd(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PretrainSummary> {
    let data = Manifest::load(dataset)?.corpus(dataset)?;
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let mut model = Denoiser::new(cfg.model.clone(), cfg.pretrain.seed)?;
    let losses = pretrain(&mut model, &data, &cfg.pretrain, &s)?;
    save_model(&model, &out.join(BASE_CHECKPOINT))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.6}");
    }
    write_text(&out.join("pretrain_loss.csv"), &csv)?;
    let val = validation_loss(&model, validation_set(&data), VALIDATION_SEED, &s)?;
    write_text(&out.join("validation_loss.txt"), &format!("{val:.9}\n"))?;
    Ok(PretrainSummary {
        losses,
        validation_loss: val,
    })
}

/// Recomputes the validation loss of a saved base model.
pub fn revalidate(cfg: &RunConfig, dataset: &Path, base: &Path) -> Result<f64> {
    let data = Manifest::load(dataset)?.corpus(dataset)?;
    let model = load_base(base)?;
    validation_loss(&model, validation_set(&data), VALIDATION_SEED, &cfg.schedule.build()?)
}

pub fn load_base(path: &Path) -> Result<Denoiser> {
    require(path)?;
    load_model(path)
}

pub fn load_lora(path: &Path) -> Result<AdapterSet> {
    require(path)?;
    load_adapter(path)
}

/// Trains content and style adapters (and optionally the baseline) on the
/// dataset's pair.
pub fn customize(cfg: &RunConfig, dataset: &Path, base: &Path, out: &Path, baseline: bool) -> Result<()> {
    let model = load_base(base)?;
    let pair = Manifest::load(dataset)?.pair(dataset)?;
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let outcome = train_pair(&pair, &model, &cfg.train, &s)?;
    save_adapter(&outcome.content, &out.join(CONTENT_ADAPTER))?;
    save_adapter(&outcome.style, &out.join(STYLE_ADAPTER))?;
    write_text(&out.join("pair_loss.csv"), &outcome.curve.to_csv())?;
    if baseline {
        let (set, curve) = train_baseline_db_lora(&pair.x_style, &pair.c_style, &model, &cfg.train, &s)?;
        save_adapter(&set, &out.join(BASELINE_ADAPTER))?;
        write_text(&out.join("baseline_loss.csv"), &curve.to_csv())?;
    }
    Ok(())
}

/// One style for sampling: adapters, style slot and strength.
pub struct StyleInput {
    pub adapters: AdapterSet,
    pub slot: u8,
    pub strength: f32,
}

fn guidance_for<'a>(cfg: &RunConfig, prompt: PromptTokens, styles: &'a [StyleInput]) -> Result<GuidanceConfig<'a>> {
    let mut g = GuidanceConfig::cfg(prompt, cfg.guidance.cfg_scale).with_switch_step(cfg.guidance.switch_step);
    for st in styles {
        g = g.with_style(&st.adapters, prompt.with_style(st.slot)?, st.strength);
    }
    Ok(g)
}

fn generate(model: &Denoiser, cfg: &RunConfig, g: &GuidanceConfig, seed: u64, s: &NoiseSchedule) -> Result<Tensor> {
    let pred = GuidedPredictor {
        model,
        config: g,
        mode: InferenceMode::StyleGuidance,
        n_steps: cfg.guidance.num_inference_steps,
    };
    sample(&pred, &model.config().image_shape(), seed, &cfg.guidance.sampler(), s)
}

/// Generates one image per seed (with any number of blended styles) and a
/// grid with one row per seed. Returns the PNG bytes of each image.
pub fn sample_cmd(
    cfg: &RunConfig,
    base: &Path,
    category: Category,
    styles: &[StyleInput],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<Vec<u8>>> {
    let model = load_base(base)?;
    for st in styles {
        st.adapters.check_compatible(&model.attachment_points())?;
    }
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let g = guidance_for(cfg, category.prompt(), styles)?;
    let mut images = Vec::with_capacity(seeds.len());
    let mut bytes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let img = generate(&model, cfg, &g, seed, &s)?;
        let b = png_bytes(&img)?;
        std::fs::write(out.join(format!("seed{seed}.png")), &b).map_err(|e| Error::io(out, e))?;
        bytes.push(b);
        images.push(img);
    }
    save_png(&grid(&images, 1)?, &out.join("grid.png"))?;
    Ok(bytes)
}

/// Seed x strength grid for one style. Returns the number of columns.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cmd(
    cfg: &RunConfig,
    base: &Path,
    category: Category,
    style: &AdapterSet,
    slot: u8,
    strengths: &[f32],
    seeds: &[u64],
    out: &Path,
) -> Result<usize> {
    let model = load_base(base)?;
    style.check_compatible(&model.attachment_points())?;
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let c = category.prompt();
    let mut images = Vec::new();
    for &seed in seeds {
        for &lambda in strengths {
            let g = GuidanceConfig::cfg(c, cfg.guidance.cfg_scale)
                .with_style(style, c.with_style(slot)?, lambda)
                .with_switch_step(cfg.guidance.switch_step);
            let img = generate(&model, cfg, &g, seed, &s)?;
            save_png(&img, &out.join(format!("seed{seed}_s{lambda}.png")))?;
            images.push(img);
        }
    }
    save_png(&grid(&images, strengths.len())?, &out.join("grid.png"))?;
    Ok(strengths.len())
}

/// Inverts an external image to the configured depth with the base model,
/// then samples it back with style guidance.
pub fn invert_edit_cmd(
    cfg: &RunConfig,
    base: &Path,
    input: &Path,
    category: Category,
    style: Option<&StyleInput>,
    out: &Path,
) -> Result<Tensor> {
    let model = load_base(base)?;
    let img = load_png(input)?;
    let shape = model.config().image_shape();
    if img.shape() != shape {
        return Err(Error::Image {
            path: input.to_path_buf(),
            msg: format!("expected a {}x{} image, got {:?}", shape[1], shape[2], img.shape()),
        });
    }
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let gs = cfg.guidance.generation();
    let c = category.prompt();
    let latent = invert(&model, &img, &c, &gs, &s)?;
    let styles: Vec<StyleInput> = Vec::new();
    let g = match style {
        Some(st) => guidance_for(cfg, c, std::slice::from_ref(st))?,
        None => guidance_for(cfg, c, &styles)?,
    };
    let edited = edit_from_latent(&model, &latent, &g, InferenceMode::StyleGuidance, &gs, &s)?;
    save_png(&edited, &out.join("edited.png"))?;
    save_png(&grid(&[img, edited.clone()], 2)?, &out.join("before_after.png"))?;
    Ok(edited)
}

pub const EVAL_SPLITS: [&str; 2] = ["same-category", "different-category"];
pub const OURS: &str = "pair";
pub const BASELINE: &str = "baseline";
pub const OURS_LORA_SCALE: &str = "pair-lora-scale";
pub const LORA_SCALES: [f32; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: SweepReport,
    pub pareto: Vec<(String, ParetoVerdict)>,
    pub diversity: Vec<DiversityMatch>,
    /// Style guidance at `λ = α·λ_cfg` against LoRA scale `α`, per item.
    pub content: Vec<ContentComparison>,
    /// The same comparison at `λ = α`.
    pub content_unscaled: Vec<ContentComparison>,
}

impl EvalOutcome {
    /// Fraction of baseline points dominated, for one split.
    pub fn pareto_fraction(&self, split: &str) -> Option<f64> {
        self.pareto.iter().find(|(s, _)| s == split).map(|(_, v)| v.fraction)
    }

    /// `(ours, baseline)` mean diversity over matched points of one split.
    pub fn diversity_means(&self, split: &str) -> (f64, f64) {
        let m: Vec<&DiversityMatch> = self.diversity.iter().filter(|d| d.split == split).collect();
        let n = m.len().max(1) as f64;
        (
            m.iter().map(|d| d.ours_diversity).sum::<f64>() / n,
            m.iter().map(|d| d.baseline_diversity).sum::<f64>() / n,
        )
    }

    /// Fraction of items where style guidance stays closer to content than LoRA scale.
    pub fn guidance_win_rate(&self) -> f64 {
        win_rate(&self.content)
    }

    pub fn guidance_win_rate_unscaled(&self) -> f64 {
        win_rate(&self.content_unscaled)
    }
}

fn win_rate(rows: &[ContentComparison]) -> f64 {
    let wins = rows.iter().filter(|c| c.first < c.second).count();
    wins as f64 / rows.len().max(1) as f64
}

/// Style-guidance strengths `λ = α·λ_cfg` for each of [`LORA_SCALES`].
pub fn cfg_scaled_strengths(cfg_scale: f32) -> Vec<f32> {
    LORA_SCALES.iter().map(|a| a * cfg_scale).collect()
}

/// Sweeps both methods over held-out items of both splits and writes the
/// reports under `out`.
pub fn eval_cmd(
    cfg: &RunConfig,
    base: &Path,
    style: &Path,
    baseline: &Path,
    out: &Path,
) -> Result<EvalOutcome> {
    let model = load_base(base)?;
    let ours = load_lora(style)?;
    let theirs = load_lora(baseline)?;
    let points = model.attachment_points();
    ours.check_compatible(&points)?;
    theirs.check_compatible(&points)?;
    mkdir(out)?;
    record_config(cfg, out)?;
    let s = cfg.schedule.build()?;
    let gs = cfg.eval_generation();
    let spec = cfg.data.pair_spec(cfg.model.image_size);
    let set = gen_eval_set(&spec, &cfg.data.transform, cfg.eval.n_same, cfg.eval.n_diff)?;
    let scaled = cfg_scaled_strengths(cfg.guidance.cfg_scale);
    let mut ours_grid = cfg.eval.strengths.clone();
    for m in LORA_SCALES.iter().chain(&scaled) {
        if !ours_grid.contains(m) {
            ours_grid.push(*m);
        }
    }
    let mut lora_grid = vec![0.0];
    lora_grid.extend(LORA_SCALES);
    let slot = cfg.data.style_slot;
    let mut report = SweepReport::default();
    for (split, items) in EVAL_SPLITS.iter().zip([&set.same_category, &set.different_category]) {
        if items.is_empty() {
            continue;
        }
        info!("eval: inverting {} {split} items", items.len());
        let latents = invert_items(&model, items, &gs, &s)?;
        let runs = [
            (OURS, &ours, ours_grid.as_slice(), StrengthAxis::StyleGuidance),
            (BASELINE, &theirs, cfg.eval.strengths.as_slice(), StrengthAxis::StyleGuidance),
            (OURS_LORA_SCALE, &ours, lora_grid.as_slice(), StrengthAxis::LoraScale),
        ];
        for (method, adapters, strengths, axis) in runs {
            info!("eval: {split} / {method}");
            let spec = SweepSpec {
                split,
                method,
                adapters,
                style_slot: slot,
                strengths,
                axis,
            };
            report.merge(eval_style_content(&model, items, &latents, &spec, &gs, &s)?);
        }
    }
    let aggs = report.aggregate(cfg.eval.bootstrap, cfg.eval.seed)?;
    let on_grid = |split: &str, method: &str| {
        curve(&aggs, split, method)
            .into_iter()
            .filter(|p| p.strength > 0.0 && cfg.eval.strengths.contains(&p.strength))
            .collect::<Vec<_>>()
    };
    let mut pareto = Vec::new();
    let mut diversity = Vec::new();
    let mut content = Vec::new();
    let mut content_unscaled = Vec::new();
    for split in EVAL_SPLITS {
        if !report.rows.iter().any(|r| r.split == split) {
            continue;
        }
        pareto.push((split.to_string(), pareto_compare(&on_grid(split, OURS), &on_grid(split, BASELINE))));
        let grid_aggs: Vec<_> = aggs
            .iter()
            .filter(|a| cfg.eval.strengths.contains(&a.strength))
            .cloned()
            .collect();
        diversity.extend(matched_diversity(&grid_aggs, split, OURS, BASELINE)?);
        content.extend(compare_content(&report, split, (OURS, &scaled), (OURS_LORA_SCALE, &LORA_SCALES))?);
        content_unscaled.extend(compare_content(&report, split, (OURS, &LORA_SCALES), (OURS_LORA_SCALE, &LORA_SCALES))?);
    }
    let outcome = EvalOutcome {
        report,
        pareto,
        diversity,
        content,
        content_unscaled,
    };
    write_eval_reports(&outcome, cfg, out)?;
    Ok(outcome)
}

fn write_eval_reports(o: &EvalOutcome, cfg: &RunConfig, out: &Path) -> Result<()> {
    write_text(&out.join("rows.csv"), &o.report.rows_csv())?;
    write_text(&out.join("summary.csv"), &o.report.summary_csv(cfg.eval.bootstrap, cfg.eval.seed)?)?;
    let mut p = String::from("split,baseline_strength,baseline_distance_to_content,baseline_distance_to_gt_style,dominated\n");
    for (split, v) in &o.pareto {
        for (pt, hit) in &v.dominated {
            let _ = writeln!(
                p,
                "{split},{},{:.6},{:.6},{hit}",
                pt.strength, pt.distance_to_content, pt.distance_to_gt_style
            );
        }
    }
    write_text(&out.join("pareto.csv"), &p)?;
    let mut d = String::from(
        "split,baseline_strength,baseline_distance_to_gt_style,baseline_diversity,pair_strength,pair_distance_to_gt_style,pair_diversity\n",
    );
    for m in &o.diversity {
        let _ = writeln!(
            d,
            "{},{},{:.6},{:.6},{},{:.6},{:.6}",
            m.split, m.baseline_strength, m.baseline_gt, m.baseline_diversity, m.ours_strength, m.ours_gt, m.ours_diversity
        );
    }
    write_text(&out.join("diversity.csv"), &d)?;
    let mut c = String::from(
        "split,item,variant_seed,lora_scale_distance_to_content,style_guidance_distance_to_content,style_guidance_unscaled_distance_to_content\n",
    );
    for (r, q) in o.content.iter().zip(&o.content_unscaled) {
        let _ = writeln!(
            c,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.split, r.item, r.variant_seed, r.second, r.first, q.first
        );
    }
    write_text(&out.join("guidance_vs_lora_scale.csv"), &c)?;
    let mut v = String::new();
    for (split, p) in &o.pareto {
        let (ours, theirs) = o.diversity_means(split);
        let _ = writeln!(
            v,
            "{split}: pareto fraction {:.3}, diversity pair {ours:.4} vs baseline {theirs:.4}",
            p.fraction
        );
    }
    let _ = writeln!(
        v,
        "style guidance closer to content than LoRA scale on {:.3} of items (lambda = alpha * cfg), {:.3} (lambda = alpha)",
        o.guidance_win_rate(),
        o.guidance_win_rate_unscaled()
    );
    write_text(&out.join("verdict.txt"), &v)
}
