//! Procedural content images, deterministic style filters, and the paired
//! training / held-out splits built from them.
//!
//! Category tokens: face = 3, animal = 4, landscape = 5.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{PromptTokens, V_STAR};
use crate::training::{PairMeta, TrainingPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Face,
    Animal,
    Landscape,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Face, Category::Animal, Category::Landscape];

    pub fn token(self) -> u8 {
        match self {
            Category::Face => 3,
            Category::Animal => 4,
            Category::Landscape => 5,
        }
    }

    pub fn from_token(t: u8) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.token() == t)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Face => "face",
            Category::Animal => "animal",
            Category::Landscape => "landscape",
        }
    }

    /// The plain prompt `c`.
    pub fn prompt(self) -> PromptTokens {
        PromptTokens::new(&[self.token()]).expect("category tokens are valid")
    }

    /// `c_content`: the category followed by `V*`.
    pub fn content_prompt(self) -> PromptTokens {
        PromptTokens::new(&[self.token(), V_STAR]).expect("category tokens are valid")
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ContentSpec {
    pub category: Category,
    pub variant_seed: u64,
    pub palette_seed: u64,
    pub size: usize,
}

impl ContentSpec {
    pub fn new(category: Category, variant_seed: u64, palette_seed: u64) -> Self {
        ContentSpec {
            category,
            variant_seed,
            palette_seed,
            size: 32,
        }
    }
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage of a shape given its signed distance in pixels (negative inside).
fn cover(sd: f32) -> f32 {
    1.0 - smoothstep(-0.75, 0.75, sd)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(a: [f32; 3], b: [f32; 3], w: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * w)
}

fn shade(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// An RGB canvas in `[0, 1]` with `(x, y)` in pixel units.
struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize, bg: impl Fn(f32, f32) -> [f32; 3]) -> Self {
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                px.push(bg(x as f32 + 0.5, y as f32 + 0.5));
            }
        }
        Canvas { size, px }
    }

    /// Paints `color(x, y)` with coverage from the signed distance `sd(x, y)`.
    fn paint(&mut self, sd: impl Fn(f32, f32) -> f32, color: impl Fn(f32, f32) -> [f32; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let w = cover(sd(fx, fy));
                if w > 0.0 {
                    let i = y * self.size + x;
                    self.px[i] = mix(self.px[i], color(fx, fy), w);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor {
        let n = self.size * self.size;
        let mut data = vec![0.0f32; 3 * n];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c].clamp(0.0, 1.0) * 2.0 - 1.0;
            }
        }
        Tensor::new([3, self.size, self.size], data).expect("sized above")
    }
}

/// Approximate signed distance to an axis-aligned ellipse, rotated by `angle`.
fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, angle: f32) -> impl Fn(f32, f32) -> f32 {
    let (s, c) = angle.sin_cos();
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let k = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
        (k - 1.0) * rx.min(ry)
    }
}

fn triangle(p: [(f32, f32); 3]) -> impl Fn(f32, f32) -> f32 {
    move |x, y| {
        let mut d = f32::MIN;
        let area = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[1].1 - p[0].1) * (p[2].0 - p[0].0);
        let sign = if area >= 0.0 { 1.0 } else { -1.0 };
        for i in 0..3 {
            let (a, b) = (p[i], p[(i + 1) % 3]);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let len = (ex * ex + ey * ey).sqrt().max(1e-6);
            // Outward distance to the edge line.
            let dist = -sign * (ex * (y - a.1) - ey * (x - a.0)) / len;
            d = d.max(dist);
        }
        d
    }
}

struct Palette {
    rng: ChaCha8Rng,
}

impl Palette {
    fn hue(&mut self) -> f32 {
        self.rng.random::<f32>()
    }

    fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.rng.random::<f32>()
    }
}

fn render_face(s: f32, v: &mut ChaCha8Rng, pal: &mut Palette, size: usize) -> Tensor {
    let bg_top = hsv(pal.hue(), pal.range(0.2, 0.5), pal.range(0.7, 0.95));
    let bg_bot = shade(bg_top, 0.85);
    let mut cv = Canvas::new(size, |_, y| mix(bg_top, bg_bot, y / (32.0 * s)));
    let skin = hsv(pal.range(0.03, 0.11), pal.range(0.3, 0.6), pal.range(0.55, 0.95));
    let hair = hsv(pal.range(0.0, 0.12), pal.range(0.3, 0.8), pal.range(0.1, 0.45));
    let cx = s * (16.0 + v.random_range(-3.0..3.0));
    let cy = s * (17.0 + v.random_range(-2.0..2.0));
    let rx = s * v.random_range(7.5..10.0);
    let ry = s * v.random_range(9.5..12.0);
    let tilt = v.random_range(-0.2..0.2);
    // Shoulders.
    let shirt = hsv(pal.hue(), pal.range(0.4, 0.8), pal.range(0.3, 0.8));
    cv.paint(ellipse(cx, cy + ry + 6.0 * s, rx * 1.6, 6.0 * s, 0.0), |_, y| {
        shade(shirt, 1.1 - 0.3 * (y / (32.0 * s)))
    });
    cv.paint(ellipse(cx, cy - ry * 0.25, rx * 1.08, ry * 0.9, tilt), |_, _| hair);
    cv.paint(ellipse(cx, cy, rx, ry, tilt), |x, y| {
        let d = ((x - cx + 0.3 * rx).powi(2) + (y - cy + 0.3 * ry).powi(2)).sqrt() / (rx + ry);
        shade(skin, 1.15 - 0.5 * d)
    });
    let fringe = v.random_range(0.45..0.7);
    cv.paint(ellipse(cx, cy - ry * 0.85, rx * 0.95, ry * fringe * 0.5, tilt), |_, _| hair);
    let eye_y = cy - ry * 0.1;
    let eye_dx = rx * v.random_range(0.35..0.5);
    let eye = shade(hsv(pal.hue(), 0.6, 0.4), 0.6);
    for sx in [-1.0, 1.0] {
        cv.paint(ellipse(cx + sx * eye_dx, eye_y, 1.3 * s, 1.0 * s, 0.0), |_, _| eye);
    }
    let mouth = hsv(0.98, 0.6, 0.55);
    let my = cy + ry * v.random_range(0.4..0.55);
    cv.paint(ellipse(cx, my, rx * 0.35, 0.9 * s, 0.0), |_, _| mouth);
    cv.into_tensor()
}

fn render_animal(s: f32, v: &mut ChaCha8Rng, pal: &mut Palette, size: usize) -> Tensor {
    let sky = hsv(pal.hue(), pal.range(0.1, 0.4), pal.range(0.75, 0.95));
    let ground = hsv(pal.range(0.2, 0.4), pal.range(0.3, 0.6), pal.range(0.35, 0.65));
    let horizon = s * v.random_range(19.0..24.0);
    let mut cv = Canvas::new(size, |_, y| {
        if y < horizon {
            shade(sky, 1.0 - 0.15 * y / horizon)
        } else {
            shade(ground, 1.0 - 0.3 * (y - horizon) / (32.0 * s - horizon + 1.0))
        }
    });
    let fur = hsv(pal.range(0.02, 0.14), pal.range(0.3, 0.8), pal.range(0.3, 0.9));
    let facing = if v.random_bool(0.5) { 1.0 } else { -1.0 };
    let bx = s * (16.0 + v.random_range(-3.0..3.0));
    let by = s * (20.0 + v.random_range(-2.0..2.0));
    let brx = s * v.random_range(8.0..10.5);
    let bry = s * v.random_range(4.5..6.0);
    let tail_a = v.random_range(-1.2..-0.5) * facing;
    let tx = bx - facing * brx * 1.05;
    cv.paint(ellipse(tx, by - bry * 0.8, s * 4.0, s * 1.1, tail_a), |_, _| shade(fur, 0.8));
    for k in [-0.6, -0.2, 0.25, 0.6] {
        let lx = bx + k * brx;
        cv.paint(ellipse(lx, by + bry + 1.5 * s, 1.2 * s, 3.0 * s, 0.0), |_, _| shade(fur, 0.75));
    }
    cv.paint(ellipse(bx, by, brx, bry, 0.0), |x, y| {
        shade(fur, 1.15 - 0.4 * ((y - by + bry) / (2.0 * bry)) - 0.05 * ((x - bx) / brx))
    });
    let hx = bx + facing * brx * 0.95;
    let hy = by - bry * v.random_range(0.9..1.4);
    let hr = s * v.random_range(3.8..5.0);
    let ear = v.random_range(2.5..4.0) * s;
    for ex in [-0.6, 0.55] {
        let base = hx + ex * hr;
        cv.paint(
            triangle([
                (base - 1.6 * s, hy - hr * 0.5),
                (base + 1.6 * s, hy - hr * 0.5),
                (base + 0.3 * s * facing, hy - hr - ear),
            ]),
            |_, _| shade(fur, 0.7),
        );
    }
    cv.paint(ellipse(hx, hy, hr, hr * 0.9, 0.0), |x, y| {
        shade(fur, 1.1 - 0.3 * ((x - hx).abs() + (y - hy).abs()) / (2.0 * hr))
    });
    cv.paint(ellipse(hx + facing * hr * 0.35, hy - hr * 0.15, 0.9 * s, 0.9 * s, 0.0), |_, _| {
        [0.05, 0.05, 0.05]
    });
    cv.paint(ellipse(hx + facing * hr * 0.95, hy + hr * 0.15, 0.9 * s, 0.7 * s, 0.0), |_, _| {
        [0.15, 0.08, 0.08]
    });
    cv.into_tensor()
}

fn render_landscape(s: f32, v: &mut ChaCha8Rng, pal: &mut Palette, size: usize) -> Tensor {
    let sky_hue = pal.hue();
    let sky_top = hsv(sky_hue, pal.range(0.4, 0.8), pal.range(0.55, 0.85));
    let sky_bot = hsv(sky_hue + pal.range(-0.1, 0.1), pal.range(0.1, 0.4), pal.range(0.85, 1.0));
    let horizon = s * v.random_range(14.0..21.0);
    let mut cv = Canvas::new(size, |_, y| mix(sky_top, sky_bot, (y / horizon).min(1.0)));
    let sun = hsv(pal.range(0.05, 0.16), pal.range(0.5, 0.9), 1.0);
    let sx = s * v.random_range(5.0..27.0);
    let sy = s * v.random_range(4.0..10.0);
    let sr = s * v.random_range(2.5..4.0);
    cv.paint(ellipse(sx, sy, sr, sr, 0.0), |_, _| sun);
    let mountain = hsv(pal.range(0.55, 0.8), pal.range(0.2, 0.5), pal.range(0.3, 0.6));
    let n_peaks = v.random_range(1..=3);
    for _ in 0..n_peaks {
        let px = s * v.random_range(2.0..30.0);
        let w = s * v.random_range(7.0..13.0);
        let h = s * v.random_range(6.0..12.0);
        cv.paint(
            triangle([(px - w, horizon + 1.0), (px + w, horizon + 1.0), (px, horizon - h)]),
            |_, y| shade(mountain, 0.8 + 0.4 * (y - horizon + h) / (h + 1.0)),
        );
    }
    let grass = hsv(pal.range(0.18, 0.38), pal.range(0.4, 0.8), pal.range(0.35, 0.7));
    let amp = s * v.random_range(0.5..2.5);
    let freq = v.random_range(0.1..0.3) / s;
    #[allow(clippy::approx_constant)]
    let phase = v.random_range(0.0..6.28);
    let bottom = 32.0 * s;
    cv.paint(
        move |x, y| horizon + amp * (freq * x + phase).sin() - y,
        |_, y| shade(grass, 1.1 - 0.45 * (y - horizon) / (bottom - horizon)),
    );
    if v.random_bool(0.7) {
        let tx = s * v.random_range(4.0..28.0);
        let ty = horizon + s * v.random_range(2.0..6.0);
        let trunk = [0.35, 0.22, 0.12];
        cv.paint(ellipse(tx, ty, 0.8 * s, 3.0 * s, 0.0), |_, _| trunk);
        let leaves = shade(grass, 0.65);
        cv.paint(ellipse(tx, ty - 4.0 * s, 2.8 * s, 3.5 * s, 0.0), |x, y| {
            shade(leaves, 1.2 - 0.3 * ((x - tx) + (y - ty + 7.0 * s)) / (6.0 * s))
        });
    }
    cv.into_tensor()
}

/// The procedural content image for `spec`: `[3, size, size]` in `[-1, 1]`.
pub fn gen_content(spec: &ContentSpec) -> Tensor {
    let mut v = ChaCha8Rng::seed_from_u64(spec.variant_seed);
    let mut pal = Palette {
        rng: ChaCha8Rng::seed_from_u64(spec.palette_seed ^ 0x5A5A_5A5A),
    };
    let s = spec.size as f32 / 32.0;
    match spec.category {
        Category::Face => render_face(s, &mut v, &mut pal, spec.size),
        Category::Animal => render_animal(s, &mut v, &mut pal, spec.size),
        Category::Landscape => render_landscape(s, &mut v, &mut pal, spec.size),
    }
}

/// Quantizes every channel to `n` evenly spaced levels over `[-1, 1]`.
pub fn posterize(img: &Tensor, n: u32) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("posterize needs N >= 2, got {n}")));
    }
    let k = (n - 1) as f64;
    Ok(img.map(|x| {
        let q = (((x as f64).clamp(-1.0, 1.0) + 1.0) / 2.0 * k).round() / k;
        (q * 2.0 - 1.0) as f32
    }))
}

fn channels(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::BadShape {
            op,
            msg: format!("expected [3, H, W], got {:?}", img.shape()),
        }),
    }
}

/// Replaces pixels close to the corner colour with a flat colour of the given hue.
pub fn flatten_background(img: &Tensor, hue: f32) -> Result<Tensor> {
    let (h, w) = channels(img, "flatten_background")?;
    let n = h * w;
    let d = img.data();
    let corners = [0, w - 1, (h - 1) * w, n - 1];
    let reference: Vec<f32> = (0..3)
        .map(|c| corners.iter().map(|&i| d[c * n + i]).sum::<f32>() / 4.0)
        .collect();
    let flat = hsv(hue, 0.55, 0.9).map(|v| v * 2.0 - 1.0);
    let mut out = d.to_vec();
    for i in 0..n {
        let dist = (0..3)
            .map(|c| (d[c * n + i] - reference[c]).powi(2))
            .sum::<f32>()
            .sqrt();
        let wgt = 1.0 - smoothstep(0.2, 0.45, dist);
        for c in 0..3 {
            out[c * n + i] = d[c * n + i] + (flat[c] - d[c * n + i]) * wgt;
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Darkens pixels whose Sobel gradient magnitude (on luminance) exceeds `threshold`.
pub fn outline_overlay(img: &Tensor, threshold: f32) -> Result<Tensor> {
    let (h, w) = channels(img, "outline_overlay")?;
    let n = h * w;
    let d = img.data();
    let lum: Vec<f32> = (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect();
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = d.to_vec();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            let mag = (gx * gx + gy * gy).sqrt() / 8.0;
            let m = smoothstep(threshold, threshold * 1.5, mag);
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                out[c * n + i] += (-0.9 - out[c * n + i]) * m;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StyleTransform {
    Posterize { levels: u32 },
    FlattenBackground { hue: f32 },
    OutlineOverlay { threshold: f32 },
}

impl Default for StyleTransform {
    fn default() -> Self {
        StyleTransform::Posterize { levels: 8 }
    }
}

impl StyleTransform {
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        match *self {
            StyleTransform::Posterize { levels } => posterize(img, levels),
            StyleTransform::FlattenBackground { hue } => flatten_background(img, hue),
            StyleTransform::OutlineOverlay { threshold } => outline_overlay(img, threshold),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StyleTransform::Posterize { .. } => "posterize",
            StyleTransform::FlattenBackground { .. } => "flatten-background",
            StyleTransform::OutlineOverlay { .. } => "outline-overlay",
        }
    }
}

impl std::fmt::Display for StyleTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StyleTransform::Posterize { levels } => write!(f, "posterize:{levels}"),
            StyleTransform::FlattenBackground { hue } => write!(f, "flatten-background:{hue}"),
            StyleTransform::OutlineOverlay { threshold } => write!(f, "outline-overlay:{threshold}"),
        }
    }
}

impl std::str::FromStr for StyleTransform {
    type Err = Error;

    /// `kind[:param]`, e.g. `posterize:8`, `flatten-background:0.6`, `outline-overlay:0.12`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let bad = || Error::InvalidArgument(format!("bad style transform `{s}`"));
        let num = |default: f32| -> Result<f32> {
            arg.map_or(Ok(default), |a| a.parse::<f32>().map_err(|_| bad()))
        };
        match kind {
            "posterize" => {
                let levels = arg.map_or(Ok(8), |a| a.parse::<u32>().map_err(|_| bad()))?;
                if levels < 2 {
                    return Err(bad());
                }
                Ok(StyleTransform::Posterize { levels })
            }
            "flatten-background" => Ok(StyleTransform::FlattenBackground { hue: num(0.6)? }),
            "outline-overlay" => Ok(StyleTransform::OutlineOverlay { threshold: num(0.12)? }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for StyleTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StyleTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One paired training instance: `x_style = transform(x_content)`.
pub fn make_pair(spec: &ContentSpec, transform: &StyleTransform, slot: u8) -> Result<TrainingPair> {
    let x_content = gen_content(spec);
    let x_style = transform.apply(&x_content)?;
    let c_content = spec.category.content_prompt();
    let c_style = c_content.with_style(slot)?;
    TrainingPair::new(
        x_content,
        x_style,
        c_content,
        c_style,
        PairMeta {
            category: spec.category,
            style: transform.to_string(),
            variant_seed: spec.variant_seed,
            palette_seed: spec.palette_seed,
            slot,
        },
    )
}

/// A held-out content image with its exact styled counterpart.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub spec: ContentSpec,
    pub content: Tensor,
    pub gt_style: Tensor,
}

#[derive(Clone, Debug)]
pub struct EvalSet {
    pub same_category: Vec<EvalItem>,
    pub different_category: Vec<EvalItem>,
}

fn eval_item(spec: ContentSpec, transform: &StyleTransform) -> Result<EvalItem> {
    let content = gen_content(&spec);
    let gt_style = transform.apply(&content)?;
    Ok(EvalItem {
        spec,
        content,
        gt_style,
    })
}

/// Held-out seeds: same category as `train` for the first split, the other
/// categories (alternating) for the second. No spec equals `train`.
pub fn gen_eval_set(
    train: &ContentSpec,
    transform: &StyleTransform,
    n_same: usize,
    n_diff: usize,
) -> Result<EvalSet> {
    if n_same == 0 && n_diff == 0 {
        return Err(Error::InvalidArgument("eval set must not be empty".into()));
    }
    let base = train.variant_seed.wrapping_mul(1_000_003).wrapping_add(0xE7A1);
    let mut same = Vec::with_capacity(n_same);
    let mut k = 0u64;
    while same.len() < n_same {
        k += 1;
        let seed = base.wrapping_add(k);
        let spec = ContentSpec {
            variant_seed: seed,
            palette_seed: seed ^ 0xC0FFEE,
            ..*train
        };
        if spec != *train {
            same.push(eval_item(spec, transform)?);
        }
    }
    let others: Vec<Category> = Category::ALL
        .into_iter()
        .filter(|&c| c != train.category)
        .collect();
    let different = (0..n_diff)
        .map(|i| {
            let seed = base.wrapping_add(10_000 + i as u64);
            let spec = ContentSpec {
                category: others[i % others.len()],
                variant_seed: seed,
                palette_seed: seed ^ 0xC0FFEE,
                size: train.size,
            };
            eval_item(spec, transform)
        })
        .collect::<Result<_>>()?;
    Ok(EvalSet {
        same_category: same,
        different_category: different,
    })
}

/// Round-robin over the categories with seeds derived from `seed`.
pub fn corpus_specs(n: usize, seed: u64, size: usize) -> Vec<ContentSpec> {
    (0..n)
        .map(|i| {
            let v = seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64);
            ContentSpec {
                category: Category::ALL[i % 3],
                variant_seed: v,
                palette_seed: v.rotate_left(17) ^ 0xABCD,
                size,
            }
        })
        .collect()
}
