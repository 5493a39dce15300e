//! Noise schedules, the forward process, and the deterministic (eta = 0) DDIM
//! sampler together with its inversion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    loss_weight: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `steps` training timesteps; `alpha_bar[0] == 1`.
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 timesteps, got {steps}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => (1..=steps)
                .map(|t| {
                    let frac = (t - 1) as f64 / (steps - 1) as f64;
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * frac
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            alpha_bar,
            loss_weight: vec![1.0; steps + 1],
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn loss_weight(&self, t: usize) -> f64 {
        self.loss_weight[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`
pub fn forward_diffuse<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "forward_diffuse", |x, e| {
        T::of(a * x.to_f64().unwrap() + b * e.to_f64().unwrap())
    })
}

/// Moves `x` from timestep `from` to `to` along the deterministic trajectory implied by `eps`.
fn ddim_transfer<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    from: usize,
    to: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (ab_from, ab_to) = (s.alpha_bar(from), s.alpha_bar(to));
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    x.zip_map(eps, "ddim_step", |xv, ev| {
        let (xv, ev) = (xv.to_f64().unwrap(), ev.to_f64().unwrap());
        let x0 = (xv - sb * ev) / sa;
        T::of(ta * x0 + tb * ev)
    })
}

/// One deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t(t)?;
    if t <= t_prev {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}"
        )));
    }
    ddim_transfer(x_t, eps_hat, t, t_prev, s)
}

/// Noise prediction consumed by the sampler. `step` indexes the full inference grid.
pub trait Predictor {
    fn predict(&self, x_t: &Tensor, t: usize, step: usize) -> Result<Tensor>;
}

impl<F> Predictor for F
where
    F: Fn(&Tensor, usize, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize, step: usize) -> Result<Tensor> {
        self(x_t, t, step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_inference_steps: 50,
        }
    }
}

impl SamplerConfig {
    /// Uniform grid `[T, ..., 0]` of `num_inference_steps + 1` timesteps.
    pub fn timesteps(&self, s: &NoiseSchedule) -> Result<Vec<usize>> {
        let (n, t) = (self.num_inference_steps, s.steps());
        if n == 0 || n > t {
            return Err(Error::InvalidArgument(format!(
                "num_inference_steps must be in [1, {t}], got {n}"
            )));
        }
        Ok((0..=n).map(|i| ((n - i) * t + n / 2) / n).collect())
    }
}

fn check_finite(eps: &Tensor, context: &'static str, step: usize) -> Result<()> {
    if eps.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context, step })
    }
}

/// Seeded Gaussian `x_T` of the given image shape.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Full generation from seeded noise; output clamped to `[-1, 1]`.
pub fn sample(
    predictor: &impl Predictor,
    shape: &[usize],
    seed: u64,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = initial_noise(shape, seed);
    Ok(sample_from(predictor, x_t, s.steps(), cfg, s)?.clamp(-1.0, 1.0))
}

/// Denoises `x_start` (at timestep `start_t`) to 0 without clamping. The path is
/// `start_t` followed by every grid timestep below it. The trajectory is carried
/// in f64; the predictor sees it rounded to f32.
pub fn sample_from(
    predictor: &impl Predictor,
    x_start: Tensor,
    start_t: usize,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(start_t)?;
    let grid = cfg.timesteps(s)?;
    let first = grid.iter().position(|&t| t < start_t).unwrap_or(grid.len());
    let mut x = x_start.cast::<f64>();
    let mut t = start_t;
    // The step index of the start point is that of the grid step it replaces.
    let mut step = first.saturating_sub(1);
    for &t_prev in &grid[first..] {
        let eps = predictor.predict(&x.cast(), t, step)?;
        check_finite(&eps, "sample", step)?;
        x = ddim_step(&x, &eps.cast(), t, t_prev, s)?;
        t = t_prev;
        step += 1;
    }
    Ok(x.cast())
}

/// Runs the DDIM recurrence upward from `x0` to `target_t`, visiting the grid
/// timesteps below `target_t`.
pub fn ddim_invert(
    x0: &Tensor,
    target_t: usize,
    predictor: &impl Predictor,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(target_t)?;
    let grid = cfg.timesteps(s)?;
    let path: Vec<(usize, usize)> = grid
        .iter()
        .enumerate()
        .rev()
        .filter(|&(_, &t)| t < target_t)
        .map(|(i, &t)| (i, t))
        .collect();
    if path.is_empty() {
        return Ok(x0.clone());
    }
    let mut x = x0.cast::<f64>();
    let ends: Vec<usize> = path.iter().skip(1).map(|&(_, t)| t).chain([target_t]).collect();
    for (&(step, t), &t_next) in path.iter().zip(&ends) {
        let eps = predictor.predict(&x.cast(), t, step)?;
        check_finite(&eps, "ddim_invert", step)?;
        x = ddim_transfer(&x, &eps.cast(), t, t_next, s)?;
    }
    Ok(x.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, ScheduleKind::LinearBeta).unwrap()
    }

    #[test]
    fn rejects_tiny_schedule() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn both_kinds_start_at_one_and_decrease() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(1000, kind).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bars().iter().all(|&a| a > 0.0));
            assert!((1..=1000).all(|t| s.loss_weight(t) > 0.0));
        }
    }

    #[test]
    fn linear_terminal_alpha_bar_matches_independent_product() {
        let s = schedule();
        // Independent evaluation: log-sum of (1 - beta_t) with beta evaluated directly.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let expected = log_sum.exp();
        assert!(expected < 0.01);
        assert!((s.alpha_bar(1000) - expected).abs() / expected < 1e-9);
        assert!(s.alpha_bar(1000) < 0.01);
    }

    #[test]
    fn forward_t0_is_identity_and_quarter_alpha_halves() {
        let s = schedule();
        let x0 = Tensor::from_fn([1, 3, 4, 4], |i| (i as f32 * 0.37).sin());
        let eps = Tensor::from_fn([1, 3, 4, 4], |i| (i as f32 * 0.11).cos());
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        // Find the timestep whose alpha_bar is closest to 0.25 and check the formula with zero noise.
        let t = (0..=1000)
            .min_by(|&a, &b| {
                (s.alpha_bar(a) - 0.25)
                    .abs()
                    .partial_cmp(&(s.alpha_bar(b) - 0.25).abs())
                    .unwrap()
            })
            .unwrap();
        let out = forward_diffuse(&x0, t, &Tensor::zeros([1, 3, 4, 4]), &s).unwrap();
        let k = s.alpha_bar(t).sqrt() as f32;
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - k * x).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let s = schedule();
        let err = forward_diffuse(&Tensor::<f32>::zeros([2]), 3, &Tensor::zeros([3]), &s).unwrap_err();
        assert!(err.to_string().contains("forward_diffuse"));
    }

    #[test]
    fn ddim_step_rejects_non_decreasing() {
        let s = schedule();
        let x = Tensor::<f32>::zeros([2]);
        assert!(ddim_step(&x, &x, 10, 10, &s).is_err());
        assert!(ddim_step(&x, &x, 10, 20, &s).is_err());
    }

    #[test]
    fn ddim_step_with_zero_eps_rescales() {
        let s = schedule();
        let x = Tensor::from_fn([6], |i| i as f32 - 2.5);
        let out = ddim_step(&x, &Tensor::zeros([6]), 700, 300, &s).unwrap();
        let k = (s.alpha_bar(300).sqrt() / s.alpha_bar(700).sqrt()) as f32;
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - k * v).abs() <= 1e-6 * k * v.abs().max(1.0));
        }
    }

    #[test]
    fn timesteps_uniform_grid() {
        let s = schedule();
        let grid = SamplerConfig::default().timesteps(&s).unwrap();
        assert_eq!(grid.len(), 51);
        assert_eq!(grid[0], 1000);
        assert_eq!(grid[1], 980);
        assert_eq!(*grid.last().unwrap(), 0);
        assert!(SamplerConfig { num_inference_steps: 1001 }.timesteps(&s).is_err());
    }

    #[test]
    fn zero_predictor_inversion_is_rescaling() {
        let s = schedule();
        let x0 = Tensor::from_fn([1, 1, 3, 3], |i| i as f32 * 0.2 - 0.8);
        let zero = |x: &Tensor, _: usize, _: usize| Ok(Tensor::zeros(x.shape().to_vec()));
        let cfg = SamplerConfig::default();
        let inv = ddim_invert(&x0, 600, &zero, &cfg, &s).unwrap();
        let k = s.alpha_bar(600).sqrt() as f32;
        for (o, v) in inv.data().iter().zip(x0.data()) {
            assert!((o - k * v).abs() < 1e-6);
        }
        assert_eq!(ddim_invert(&x0, 0, &zero, &cfg, &s).unwrap(), x0);
    }

    #[test]
    fn nan_prediction_aborts_with_step() {
        let s = schedule();
        let bad = |x: &Tensor, _: usize, step: usize| {
            let v = if step == 3 { f32::NAN } else { 0.0 };
            Ok(Tensor::full(x.shape().to_vec(), v))
        };
        let err = sample(&bad, &[1, 1, 2, 2], 0, &SamplerConfig::default(), &s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3, .. }), "{err}");
    }

    #[test]
    fn oracle_noise_inverts_forward() {
        let s = schedule();
        let x0 = Tensor::from_fn([1, 3, 8, 8], |i| ((i * 7919) % 200) as f32 / 100.0 - 1.0);
        let eps = initial_noise(&[1, 3, 8, 8], 11);
        let xt = forward_diffuse(&x0, 500, &eps, &s).unwrap();
        let back = ddim_step(&xt, &eps, 500, 0, &s).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-5);
    }

    #[test]
    fn chained_oracle_steps_reconstruct() {
        let s = schedule();
        let x0 = Tensor::from_fn([1, 3, 8, 8], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
        let eps = initial_noise(&[1, 3, 8, 8], 5);
        // x_T is built in f64: rounding it to f32 alone costs ulp / sqrt(ab_T) ~ 2e-5.
        let xt = forward_diffuse(&x0.cast::<f64>(), 1000, &eps.cast(), &s).unwrap();
        let mut x = xt;
        let grid = SamplerConfig::default().timesteps(&s).unwrap();
        for w in grid.windows(2) {
            x = ddim_step(&x, &eps.cast(), w[0], w[1], &s).unwrap();
        }
        let err = x.cast::<f32>().max_abs_diff(&x0).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn forward_variance_preserved() {
        let s = schedule();
        let n = 10_000;
        let x0 = initial_noise(&[n], 1);
        let eps = initial_noise(&[n], 2);
        for t in [100, 500, 900] {
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let m = xt.mean() as f64;
            let var = xt.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = schedule();
        let pred = |x: &Tensor, t: usize, _: usize| Ok(x.scale(0.3 + t as f32 * 1e-4));
        let cfg = SamplerConfig::default();
        let a = sample(&pred, &[1, 3, 4, 4], 9, &cfg, &s).unwrap();
        let b = sample(&pred, &[1, 3, 4, 4], 9, &cfg, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs() <= 1.0);
    }
}
