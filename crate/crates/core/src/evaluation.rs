//! Perceptual-distance proxy, style/content sweeps, diversity, and Pareto
//! comparison of sweep curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::Tensor;
use crate::diffusion::{ddim_invert, sample_from, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::guidance::{ConditionalPredictor, GuidanceConfig, GuidedPredictor, InferenceMode};
use crate::model::{Denoiser, PromptTokens};
use crate::pairgen::{Category, EvalItem};

const PROJ_DIM: usize = 128;
const LEVELS: usize = 3;

/// Fixed, seeded multi-scale random projection of an image.
///
/// For each level of an average-pool pyramid, the raw pixels and the
/// horizontal/vertical finite differences form two blocks. Each block is
/// projected by its own Gaussian matrix and unit-normalized; the concatenation
/// is normalized again. The map is odd, so `embed(-x) = -embed(x)`.
pub struct PerceptualEmbedder {
    size: usize,
    /// Per block: a `PROJ_DIM x len` matrix, row-major.
    projections: Vec<Vec<f32>>,
}

fn pool2(img: &[f64], c: usize, s: usize) -> Vec<f64> {
    let h = s / 2;
    let mut out = vec![0.0; c * h * h];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..h {
                let at = |dy: usize, dx: usize| img[ch * s * s + (2 * y + dy) * s + 2 * x + dx];
                out[ch * h * h + y * h + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

fn gradients(img: &[f64], c: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * c * s * (s - 1));
    for ch in 0..c {
        let p = &img[ch * s * s..(ch + 1) * s * s];
        for y in 0..s {
            for x in 0..s - 1 {
                out.push(p[y * s + x + 1] - p[y * s + x]);
            }
        }
        for y in 0..s - 1 {
            for x in 0..s {
                out.push(p[(y + 1) * s + x] - p[y * s + x]);
            }
        }
    }
    out
}

fn block_lengths(size: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = size;
    for _ in 0..LEVELS {
        out.push(3 * s * s);
        out.push(2 * 3 * s * (s - 1));
        s /= 2;
    }
    out
}

impl PerceptualEmbedder {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        if size < 1 << LEVELS || !size.is_multiple_of(1 << (LEVELS - 1)) {
            return Err(Error::InvalidArgument(format!(
                "embedder needs a size divisible by {} and at least {}, got {size}",
                1 << (LEVELS - 1),
                1 << LEVELS
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = block_lengths(size)
            .into_iter()
            .map(|len| {
                Tensor::<f32>::randn([PROJ_DIM, len], &mut rng).into_data()
            })
            .collect();
        Ok(PerceptualEmbedder { size, projections })
    }

    /// The shared embedder for 32-pixel images.
    pub fn default_32() -> &'static PerceptualEmbedder {
        static E: OnceLock<PerceptualEmbedder> = OnceLock::new();
        E.get_or_init(|| PerceptualEmbedder::new(32, 0xD15C).expect("valid size"))
    }

    pub fn embed(&self, img: &Tensor) -> Result<Vec<f64>> {
        let s = self.size;
        if img.shape() != [3, s, s] {
            return Err(Error::BadShape {
                op: "perceptual_embed",
                msg: format!("expected [3, {s}, {s}], got {:?}", img.shape()),
            });
        }
        let mut level: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let mut blocks = Vec::with_capacity(2 * LEVELS);
        let mut side = s;
        for l in 0..LEVELS {
            let grad = gradients(&level, 3, side);
            let next = if l + 1 < LEVELS { pool2(&level, 3, side) } else { Vec::new() };
            blocks.push(std::mem::replace(&mut level, next));
            blocks.push(grad);
            side /= 2;
        }
        let mut out = Vec::with_capacity(PROJ_DIM * blocks.len());
        for (block, proj) in blocks.iter().zip(&self.projections) {
            let mut v: Vec<f64> = proj
                .chunks(block.len())
                .map(|row| row.iter().zip(block).map(|(&p, &x)| p as f64 * x).sum())
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            out.extend(v);
        }
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            out.iter_mut().for_each(|x| *x /= n);
        }
        Ok(out)
    }

    /// `1 − cos(embed(a), embed(b))`, in `[0, 2]`.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::shape("perceptual_distance", a.shape(), b.shape()));
        }
        if a == b {
            return Ok(0.0);
        }
        let (ea, eb) = (self.embed(a)?, self.embed(b)?);
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        Ok((1.0 - dot).clamp(0.0, 2.0))
    }
}

/// Proxy perceptual distance for 32-pixel images (other sizes get a fresh embedder).
pub fn perceptual_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("perceptual_distance", a.shape(), b.shape()));
    }
    match a.shape() {
        [3, 32, 32] => PerceptualEmbedder::default_32().distance(a, b),
        [3, s, _] => PerceptualEmbedder::new(*s, 0xD15C)?.distance(a, b),
        other => Err(Error::BadShape {
            op: "perceptual_distance",
            msg: format!("expected [3, S, S], got {other:?}"),
        }),
    }
}

/// Mean pairwise distance within one group (unordered pairs, no self-pairs).
pub fn group_diversity(images: &[&Tensor]) -> Result<Option<f64>> {
    if images.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += perceptual_distance(images[i], images[j])?;
            count += 1;
        }
    }
    Ok(Some(total / count as f64))
}

/// Mean over groups of the mean pairwise distance; groups smaller than two are skipped.
pub fn diversity<K: Ord + std::fmt::Debug>(groups: &BTreeMap<K, Vec<&Tensor>>) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for (k, imgs) in groups {
        match group_diversity(imgs)? {
            Some(v) => vals.push(v),
            None => warn!("diversity: skipping group {k:?} with {} image(s)", imgs.len()),
        }
    }
    if vals.is_empty() {
        return Ok(None);
    }
    Ok(Some(vals.iter().sum::<f64>() / vals.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strengths: Vec<f32>,
    pub n_same: usize,
    pub n_diff: usize,
    /// Inversion depth as a fraction of `T`.
    pub invert_depth: f64,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strengths: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            n_same: 10,
            n_diff: 10,
            invert_depth: 0.6,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

/// Sampler settings shared by every generation in a sweep.
#[derive(Clone, Debug)]
pub struct GenerationSettings {
    pub cfg_scale: f32,
    pub switch_step: usize,
    pub invert_depth: f64,
    pub sampler: SamplerConfig,
}

impl GenerationSettings {
    pub fn depth_t(&self, s: &NoiseSchedule) -> usize {
        ((self.invert_depth * s.steps() as f64).round() as usize).min(s.steps())
    }
}

/// `x0` inverted with the base model and prompt `c`.
pub fn invert(model: &Denoiser, x0: &Tensor, c: &PromptTokens, gs: &GenerationSettings, s: &NoiseSchedule) -> Result<Tensor> {
    let pred = ConditionalPredictor { model, prompt: *c };
    ddim_invert(x0, gs.depth_t(s), &pred, &gs.sampler, s)
}

/// Samples from an inverted latent with the given guidance, clamped to `[-1, 1]`.
pub fn edit_from_latent(
    model: &Denoiser,
    latent: &Tensor,
    guidance: &GuidanceConfig,
    mode: InferenceMode,
    gs: &GenerationSettings,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let pred = GuidedPredictor {
        model,
        config: guidance,
        mode,
        n_steps: gs.sampler.num_inference_steps,
    };
    Ok(sample_from(&pred, latent.clone(), gs.depth_t(s), &gs.sampler, s)?.clamp(-1.0, 1.0))
}

/// How the style strength of a sweep is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StrengthAxis {
    /// Strength is `λ_style` under style guidance.
    StyleGuidance,
    /// Strength is the LoRA scale `α` under plain CFG.
    LoraScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub split: String,
    pub method: String,
    pub strength: f32,
    pub item: usize,
    pub variant_seed: u64,
    pub category: Category,
    pub distance_to_gt_style: f64,
    pub distance_to_content: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub split: String,
    pub method: String,
    pub strength: f32,
    pub n: usize,
    pub mean_gt: f64,
    pub ci_gt: (f64, f64),
    pub mean_content: f64,
    pub ci_content: (f64, f64),
    pub diversity: Option<f64>,
}

/// Generated images of one sweep, keyed by `(split, method, strength bits)`.
type ImageKey = (String, String, u32);

#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    images: BTreeMap<ImageKey, Vec<(Category, Tensor)>>,
}

/// Everything one sweep needs besides the model.
pub struct SweepSpec<'a> {
    pub split: &'a str,
    pub method: &'a str,
    pub adapters: &'a AdapterSet,
    pub style_slot: u8,
    pub strengths: &'a [f32],
    pub axis: StrengthAxis,
}

impl SweepReport {
    pub fn merge(&mut self, other: SweepReport) {
        self.rows.extend(other.rows);
        self.images.extend(other.images);
    }

    pub fn images(&self, split: &str, method: &str, strength: f32) -> Option<&[(Category, Tensor)]> {
        self.images
            .get(&(split.to_string(), method.to_string(), strength.to_bits()))
            .map(Vec::as_slice)
    }

    /// Diversity of the generations at one grid point, grouped by prompt.
    pub fn diversity_at(&self, split: &str, method: &str, strength: f32) -> Result<Option<f64>> {
        let Some(imgs) = self.images(split, method, strength) else {
            return Ok(None);
        };
        let mut groups: BTreeMap<Category, Vec<&Tensor>> = BTreeMap::new();
        for (c, img) in imgs {
            groups.entry(*c).or_default().push(img);
        }
        diversity(&groups)
    }

    /// Per `(split, method, strength)` means with bootstrap 95% intervals.
    pub fn aggregate(&self, resamples: usize, seed: u64) -> Result<Vec<Aggregate>> {
        let mut keys: Vec<(String, String, f32)> = Vec::new();
        for r in &self.rows {
            let k = (r.split.clone(), r.method.clone(), r.strength);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.iter()
            .map(|(split, method, strength)| {
                let sel: Vec<&SweepRow> = self
                    .rows
                    .iter()
                    .filter(|r| &r.split == split && &r.method == method && r.strength == *strength)
                    .collect();
                let gt: Vec<f64> = sel.iter().map(|r| r.distance_to_gt_style).collect();
                let ct: Vec<f64> = sel.iter().map(|r| r.distance_to_content).collect();
                Ok(Aggregate {
                    split: split.clone(),
                    method: method.clone(),
                    strength: *strength,
                    n: sel.len(),
                    mean_gt: mean(&gt),
                    ci_gt: bootstrap_ci(&gt, resamples, seed),
                    mean_content: mean(&ct),
                    ci_content: bootstrap_ci(&ct, resamples, seed ^ 1),
                    diversity: self.diversity_at(split, method, *strength)?,
                })
            })
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from(
            "split,method,strength,item,variant_seed,category,distance_to_gt_style,distance_to_content\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6}",
                r.split,
                r.method,
                r.strength,
                r.item,
                r.variant_seed,
                r.category,
                r.distance_to_gt_style,
                r.distance_to_content
            );
        }
        out
    }

    pub fn summary_csv(&self, resamples: usize, seed: u64) -> Result<String> {
        let mut out = String::from(
            "split,method,strength,n,mean_distance_to_gt_style,ci_low_gt,ci_high_gt,mean_distance_to_content,ci_low_content,ci_high_content,diversity\n",
        );
        for a in self.aggregate(resamples, seed)? {
            let div = a.diversity.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                a.split, a.method, a.strength, a.n, a.mean_gt, a.ci_gt.0, a.ci_gt.1, a.mean_content,
                a.ci_content.0, a.ci_content.1, div
            );
        }
        Ok(out)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(v: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if v.is_empty() || resamples == 0 {
        let m = mean(v);
        return (m, m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Inverted latents for each item with the base model and its plain prompt.
pub fn invert_items(
    model: &Denoiser,
    items: &[EvalItem],
    gs: &GenerationSettings,
    s: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    items
        .iter()
        .map(|it| invert(model, &it.content, &it.spec.category.prompt(), gs, s))
        .collect()
}

/// For each held-out item and strength, edits the item's inverted latent and
/// records the distance to its ground-truth styled image and to the content
/// reference: the plain-CFG edit of the same latent with prompt `c`.
pub fn eval_style_content(
    model: &Denoiser,
    items: &[EvalItem],
    latents: &[Tensor],
    spec: &SweepSpec,
    gs: &GenerationSettings,
    s: &NoiseSchedule,
) -> Result<SweepReport> {
    if latents.len() != items.len() {
        return Err(Error::InvalidArgument(format!(
            "{} latents for {} items",
            latents.len(),
            items.len()
        )));
    }
    let mut report = SweepReport::default();
    for (i, (it, latent)) in items.iter().zip(latents).enumerate() {
        let c = it.spec.category.prompt();
        let c_style = c.with_style(spec.style_slot)?;
        let render = |strength: f32| -> Result<Tensor> {
            let (guidance, mode) = match spec.axis {
                StrengthAxis::StyleGuidance => (
                    GuidanceConfig::cfg(c, gs.cfg_scale)
                        .with_style(spec.adapters, c_style, strength)
                        .with_switch_step(gs.switch_step),
                    InferenceMode::StyleGuidance,
                ),
                StrengthAxis::LoraScale => (
                    GuidanceConfig::cfg(c, gs.cfg_scale)
                        .with_style(spec.adapters, c_style, 0.0)
                        .with_switch_step(gs.switch_step),
                    InferenceMode::LoraScale { alpha: strength },
                ),
            };
            edit_from_latent(model, latent, &guidance, mode, gs, s)
        };
        let plain = GuidanceConfig::cfg(c, gs.cfg_scale).with_switch_step(gs.switch_step);
        let reference = edit_from_latent(model, latent, &plain, InferenceMode::StyleGuidance, gs, s)?;
        for &strength in spec.strengths {
            let out = if strength == 0.0 && spec.axis == StrengthAxis::StyleGuidance {
                reference.clone()
            } else {
                render(strength)?
            };
            report.rows.push(SweepRow {
                split: spec.split.to_string(),
                method: spec.method.to_string(),
                strength,
                item: i,
                variant_seed: it.spec.variant_seed,
                category: it.spec.category,
                distance_to_gt_style: perceptual_distance(&out, &it.gt_style)?,
                distance_to_content: perceptual_distance(&out, &reference)?,
            });
            report
                .images
                .entry((spec.split.to_string(), spec.method.to_string(), strength.to_bits()))
                .or_default()
                .push((it.spec.category, out));
        }
    }
    Ok(report)
}

/// A point on a strength sweep curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub strength: f32,
    pub distance_to_content: f64,
    pub distance_to_gt_style: f64,
}

pub fn curve(aggs: &[Aggregate], split: &str, method: &str) -> Vec<CurvePoint> {
    aggs.iter()
        .filter(|a| a.split == split && a.method == method)
        .map(|a| CurvePoint {
            strength: a.strength,
            distance_to_content: a.mean_content,
            distance_to_gt_style: a.mean_gt,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoVerdict {
    /// For each baseline point, whether some point of ours dominates it.
    pub dominated: Vec<(CurvePoint, bool)>,
    pub fraction: f64,
}

/// A baseline point is dominated when some point of ours is strictly closer to
/// the ground-truth style at an equal or lower distance to content.
pub fn pareto_compare(ours: &[CurvePoint], baseline: &[CurvePoint]) -> ParetoVerdict {
    let dominated: Vec<(CurvePoint, bool)> = baseline
        .iter()
        .map(|b| {
            let hit = ours.iter().any(|o| {
                o.distance_to_gt_style < b.distance_to_gt_style
                    && o.distance_to_content <= b.distance_to_content
            });
            (*b, hit)
        })
        .collect();
    let fraction = if dominated.is_empty() {
        0.0
    } else {
        dominated.iter().filter(|d| d.1).count() as f64 / dominated.len() as f64
    };
    ParetoVerdict { dominated, fraction }
}

/// A baseline grid point paired with the point of ours nearest in mean
/// distance to the ground-truth style.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityMatch {
    pub split: String,
    pub baseline_strength: f32,
    pub baseline_gt: f64,
    pub baseline_diversity: f64,
    pub ours_strength: f32,
    pub ours_gt: f64,
    pub ours_diversity: f64,
}

pub fn matched_diversity(
    aggs: &[Aggregate],
    split: &str,
    ours: &str,
    baseline: &str,
) -> Result<Vec<DiversityMatch>> {
    let pick = |method: &str| -> Vec<&Aggregate> {
        aggs.iter()
            .filter(|a| a.split == split && a.method == method && a.strength > 0.0)
            .collect()
    };
    let (ours_pts, base_pts) = (pick(ours), pick(baseline));
    let mut out = Vec::new();
    for b in base_pts {
        let o = ours_pts
            .iter()
            .min_by(|x, y| {
                (x.mean_gt - b.mean_gt)
                    .abs()
                    .total_cmp(&(y.mean_gt - b.mean_gt).abs())
            })
            .ok_or_else(|| Error::InvalidArgument(format!("no `{ours}` points in split `{split}`")))?;
        match (b.diversity, o.diversity) {
            (Some(bd), Some(od)) => out.push(DiversityMatch {
                split: split.to_string(),
                baseline_strength: b.strength,
                baseline_gt: b.mean_gt,
                baseline_diversity: bd,
                ours_strength: o.strength,
                ours_gt: o.mean_gt,
                ours_diversity: od,
            }),
            _ => warn!("no diversity at {baseline} {} in `{split}`; point skipped", b.strength),
        }
    }
    Ok(out)
}

/// Per-item mean distance to content over a strength grid, for two methods
/// whose grids are matched index by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentComparison {
    pub split: String,
    pub item: usize,
    pub variant_seed: u64,
    pub first: f64,
    pub second: f64,
}

pub fn compare_content(
    report: &SweepReport,
    split: &str,
    first: (&str, &[f32]),
    second: (&str, &[f32]),
) -> Result<Vec<ContentComparison>> {
    if first.1.len() != second.1.len() || first.1.is_empty() {
        return Err(Error::InvalidArgument("matched grids must have equal, non-zero length".into()));
    }
    let mean_for = |method: &str, grid: &[f32], item: usize| -> Result<f64> {
        let vals: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.split == split && r.method == method && r.item == item && grid.contains(&r.strength))
            .map(|r| r.distance_to_content)
            .collect();
        if vals.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "`{method}` has {} of {} grid points for item {item} in `{split}`",
                vals.len(),
                grid.len()
            )));
        }
        Ok(mean(&vals))
    };
    let mut items: Vec<(usize, u64)> = report
        .rows
        .iter()
        .filter(|r| r.split == split && r.method == first.0)
        .map(|r| (r.item, r.variant_seed))
        .collect();
    items.dedup();
    items.sort();
    items.dedup();
    items
        .into_iter()
        .map(|(item, variant_seed)| {
            Ok(ContentComparison {
                split: split.to_string(),
                item,
                variant_seed,
                first: mean_for(first.0, first.1, item)?,
                second: mean_for(second.0, second.1, item)?,
            })
        })
        .collect()
}
