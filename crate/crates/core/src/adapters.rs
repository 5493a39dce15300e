//! Low-rank adapters `ΔW = B·A`, their orthogonal initialization, and scaled,
//! optionally stop-gradient composition onto base weights.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterRole {
    Content,
    Style,
    /// Single-image LoRA with trainable `A`.
    Baseline,
}

impl std::fmt::Display for AdapterRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterRole::Content => "content",
            AdapterRole::Style => "style",
            AdapterRole::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for AdapterRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(AdapterRole::Content),
            "style" => Ok(AdapterRole::Style),
            "baseline" => Ok(AdapterRole::Baseline),
            _ => Err(Error::InvalidArgument(format!("unknown adapter role `{s}`"))),
        }
    }
}

/// A layer an adapter may attach to, seen as an `out_dim x in_dim` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttachmentPoint {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Clone, Debug)]
pub struct LoraLayer {
    /// `r x n`
    pub a: Param,
    /// `m x r`
    pub b: Param,
}

impl LoraLayer {
    pub fn rank(&self) -> usize {
        self.a.value.dim(0)
    }

    pub fn out_dim(&self) -> usize {
        self.b.value.dim(0)
    }

    pub fn in_dim(&self) -> usize {
        self.a.value.dim(1)
    }

    pub fn delta(&self) -> Tensor {
        self.b.value.matmul(&self.a.value).expect("B and A conform")
    }

    fn zero_b(m: usize, a: Tensor) -> Self {
        let r = a.dim(0);
        LoraLayer {
            a: Param::new(a, false),
            b: Param::new(Tensor::zeros([m, r]), true),
        }
    }
}

/// `k` orthonormal rows in `R^n`: the leading columns of the Q factor of a
/// seeded Gaussian `n x k` matrix, by modified Gram-Schmidt with one
/// re-orthogonalization pass, in f64.
pub fn orthonormal_rows(k: usize, n: usize, seed: u64) -> Result<Tensor> {
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} orthonormal rows in dimension {n}"
        )));
    }
    let g = Tensor::<f64>::randn([k, n], &mut ChaCha8Rng::seed_from_u64(seed));
    let mut rows: Vec<Vec<f64>> = g.data().chunks(n).map(|r| r.to_vec()).collect();
    for i in 0..k {
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = rows.split_at_mut(i);
                let q = &head[j];
                let v = &mut tail[0];
                let d: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|x| *x /= norm);
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new([k, n], data)
}

/// Content and style adapters for one `m x n` layer whose `2r` A-rows come
/// from one random orthonormal basis; both B start at zero.
pub fn init_orthogonal_pair(m: usize, n: usize, r: usize, seed: u64) -> Result<(LoraLayer, LoraLayer)> {
    if r == 0 || 2 * r > n {
        return Err(Error::InvalidArgument(format!(
            "orthogonal pair needs 0 < 2r <= n, got r={r}, n={n}"
        )));
    }
    let q = orthonormal_rows(2 * r, n, seed)?;
    let content = q.slice_outer(0, r)?;
    let style = q.slice_outer(r, r)?;
    Ok((LoraLayer::zero_b(m, content), LoraLayer::zero_b(m, style)))
}

/// Standard single adapter: orthonormal `A` (trainable), zero `B`.
pub fn init_standard(m: usize, n: usize, r: usize, seed: u64) -> Result<LoraLayer> {
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!(
            "adapter rank must be in [1, {n}], got {r}"
        )));
    }
    let mut l = LoraLayer::zero_b(m, orthonormal_rows(r, n, seed)?);
    l.a.trainable = true;
    Ok(l)
}

/// Per-layer seed: a SplitMix64 step over `(seed, index)`.
fn layer_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One role's adapters over every attachment point of a model.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub role: AdapterRole,
    /// Default inference scale `α`.
    pub scale: f32,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl AdapterSet {
    pub fn orthogonal_pair(
        points: &[AttachmentPoint],
        rank: usize,
        seed: u64,
    ) -> Result<(AdapterSet, AdapterSet)> {
        let mut content = AdapterSet::empty(AdapterRole::Content);
        let mut style = AdapterSet::empty(AdapterRole::Style);
        for (i, p) in points.iter().enumerate() {
            let (c, s) = init_orthogonal_pair(p.out_dim, p.in_dim, rank, layer_seed(seed, i))
                .map_err(|e| Error::Layer {
                    layer: p.name.clone(),
                    msg: e.to_string(),
                })?;
            content.layers.insert(p.name.clone(), c);
            style.layers.insert(p.name.clone(), s);
        }
        Ok((content, style))
    }

    pub fn baseline(points: &[AttachmentPoint], rank: usize, seed: u64) -> Result<AdapterSet> {
        let mut set = AdapterSet::empty(AdapterRole::Baseline);
        for (i, p) in points.iter().enumerate() {
            let l = init_standard(p.out_dim, p.in_dim, rank, layer_seed(seed, i)).map_err(|e| {
                Error::Layer {
                    layer: p.name.clone(),
                    msg: e.to_string(),
                }
            })?;
            set.layers.insert(p.name.clone(), l);
        }
        Ok(set)
    }

    pub fn empty(role: AdapterRole) -> Self {
        AdapterSet {
            role,
            scale: 1.0,
            layers: BTreeMap::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.layers.values().next().map_or(0, LoraLayer::rank)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.values_mut().flat_map(|l| [&mut l.a, &mut l.b])
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    /// Errors unless the set covers exactly `points` with matching dims.
    pub fn check_compatible(&self, points: &[AttachmentPoint]) -> Result<()> {
        for p in points {
            let l = self.layers.get(&p.name).ok_or_else(|| Error::Layer {
                layer: p.name.clone(),
                msg: format!("{} adapter has no entry for this layer", self.role),
            })?;
            check_dims(&p.name, l, p.out_dim, p.in_dim)?;
        }
        if let Some(extra) = self.layers.keys().find(|k| !points.iter().any(|p| &p.name == *k)) {
            return Err(Error::Layer {
                layer: extra.clone(),
                msg: "model has no such layer".into(),
            });
        }
        Ok(())
    }
}

fn check_dims(name: &str, l: &LoraLayer, m: usize, n: usize) -> Result<()> {
    let (r, bs, as_) = (l.rank(), l.b.value.shape(), l.a.value.shape());
    if bs != [m, r] || as_ != [r, n] {
        return Err(Error::Layer {
            layer: name.to_string(),
            msg: format!("adapter B {bs:?} · A {as_:?} does not fit weight [{m}, {n}]"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterTerm<'a> {
    pub set: &'a AdapterSet,
    pub scale: f32,
    /// Contribute to the forward value only (`sg[·]`).
    pub stop_grad: bool,
}

/// Adapters applied on top of the base weights: `W0 + Σ α_i B_i A_i`.
#[derive(Clone, Debug, Default)]
pub struct CompositionSpec<'a> {
    pub terms: Vec<AdapterTerm<'a>>,
}

impl<'a> CompositionSpec<'a> {
    /// No adapters: the base model.
    pub fn base() -> Self {
        CompositionSpec { terms: Vec::new() }
    }

    /// A single set at scale `α`.
    pub fn single(set: &'a AdapterSet, scale: f32) -> Self {
        CompositionSpec::base().with(set, scale)
    }

    pub fn with(mut self, set: &'a AdapterSet, scale: f32) -> Self {
        self.terms.push(AdapterTerm {
            set,
            scale,
            stop_grad: false,
        });
        self
    }

    pub fn with_stop_grad(mut self, set: &'a AdapterSet, scale: f32) -> Self {
        self.terms.push(AdapterTerm {
            set,
            scale,
            stop_grad: true,
        });
        self
    }

    pub fn validate(&self, points: &[AttachmentPoint]) -> Result<()> {
        for term in &self.terms {
            for (name, l) in &term.set.layers {
                let p = points.iter().find(|p| &p.name == name).ok_or_else(|| Error::Layer {
                    layer: name.clone(),
                    msg: "model has no such layer".into(),
                })?;
                check_dims(name, l, p.out_dim, p.in_dim)?;
            }
        }
        Ok(())
    }
}

/// Records `W0 + Σ α_i B_i A_i` for `layer` on the tape. Terms with `α = 0`
/// are skipped, so an all-zero composition returns `w0` itself.
pub(crate) fn compose_weight(tape: &mut Tape, layer: &str, w0: Var, comp: &CompositionSpec) -> Result<Var> {
    let mut w = w0;
    for term in &comp.terms {
        if term.scale == 0.0 {
            continue;
        }
        let Some(l) = term.set.layers.get(layer) else {
            continue;
        };
        let ws = tape.value(w0).shape();
        check_dims(layer, l, ws[0], ws[1])?;
        let (b, a) = if term.stop_grad {
            (tape.stop_grad(&l.b), tape.stop_grad(&l.a))
        } else {
            (tape.param(&l.b), tape.param(&l.a))
        };
        let mut d = tape.matmul(b, a)?;
        if term.scale != 1.0 {
            d = tape.scalar_mul(d, term.scale);
        }
        w = tape.add(w, d)?;
    }
    Ok(w)
}

/// The composed weight for `layer` as a plain matrix.
pub fn effective_weight(w0: &Tensor, layer: &str, comp: &CompositionSpec) -> Result<Tensor> {
    if w0.shape().len() != 2 {
        return Err(Error::BadShape {
            op: "effective_weight",
            msg: format!("weight must be a matrix, got {:?}", w0.shape()),
        });
    }
    let mut tape = Tape::no_grad();
    let w = tape.constant(w0.clone());
    let out = compose_weight(&mut tape, layer, w, comp)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev_from(a: &Tensor, b: &Tensor, target: &Tensor) -> f64 {
        let (a, b) = (a.cast::<f64>(), b.cast::<f64>());
        let prod = a.matmul(&b.transpose().unwrap()).unwrap();
        prod.max_abs_diff(&target.cast()).unwrap()
    }

    #[test]
    fn orthogonal_pair_rows_are_orthonormal() {
        for (m, n, r) in [(16, 27, 4), (64, 864, 4), (8, 8, 4)] {
            let (c, s) = init_orthogonal_pair(m, n, r, 42).unwrap();
            let eye = Tensor::eye(r);
            assert!(max_dev_from(&c.a.value, &c.a.value, &eye) < 1e-6);
            assert!(max_dev_from(&s.a.value, &s.a.value, &eye) < 1e-6);
            assert!(max_dev_from(&c.a.value, &s.a.value, &Tensor::zeros([r, r])) < 1e-6);
            assert_eq!(c.delta(), Tensor::zeros([m, n]));
            assert_eq!(s.delta(), Tensor::zeros([m, n]));
            assert!(!c.a.trainable && !s.a.trainable && c.b.trainable);
        }
    }

    #[test]
    fn rank_too_large_is_rejected() {
        assert!(init_orthogonal_pair(4, 7, 4, 0).is_err());
        assert!(init_orthogonal_pair(4, 8, 4, 0).is_ok());
    }

    #[test]
    fn distinct_layers_get_distinct_bases() {
        let pts = [
            AttachmentPoint { name: "a".into(), out_dim: 3, in_dim: 10 },
            AttachmentPoint { name: "b".into(), out_dim: 3, in_dim: 10 },
        ];
        let (c, _) = AdapterSet::orthogonal_pair(&pts, 2, 7).unwrap();
        assert_ne!(c.layers["a"].a.value, c.layers["b"].a.value);
        let (c2, _) = AdapterSet::orthogonal_pair(&pts, 2, 7).unwrap();
        assert_eq!(c.layers["a"].a.value, c2.layers["a"].a.value);
    }

    fn filled_pair() -> (AdapterSet, AdapterSet, Tensor) {
        let pts = [AttachmentPoint { name: "w".into(), out_dim: 3, in_dim: 6 }];
        let (mut c, mut s) = AdapterSet::orthogonal_pair(&pts, 2, 1).unwrap();
        c.layers.get_mut("w").unwrap().b.value = Tensor::from_fn([3, 2], |i| i as f32 * 0.3 - 0.4);
        s.layers.get_mut("w").unwrap().b.value = Tensor::from_fn([3, 2], |i| 0.5 - i as f32 * 0.2);
        let w0 = Tensor::from_fn([3, 6], |i| (i as f32).cos());
        (c, s, w0)
    }

    #[test]
    fn effective_weight_cases() {
        let (c, s, w0) = filled_pair();
        let zero = CompositionSpec::base().with(&c, 0.0).with(&s, 0.0);
        assert_eq!(effective_weight(&w0, "w", &zero).unwrap(), w0);
        let one = effective_weight(&w0, "w", &CompositionSpec::single(&s, 1.0)).unwrap();
        assert_eq!(one, w0.add(&s.layers["w"].delta()).unwrap());
        // Collinearity in α at 0, 0.5, 1.
        let at = |a: f32| effective_weight(&w0, "w", &CompositionSpec::single(&c, a)).unwrap();
        let (w_0, w_h, w_1) = (at(0.0), at(0.5), at(1.0));
        for i in 0..w0.numel() {
            let mid = 0.5 * (w_0.data()[i] + w_1.data()[i]);
            assert!((w_h.data()[i] - mid).abs() < 1e-6);
        }
    }

    #[test]
    fn stop_grad_forward_matches_plain_sum_with_zero_content_grad() {
        let (c, s, w0) = filled_pair();
        let plain = effective_weight(&w0, "w", &CompositionSpec::base().with(&c, 1.0).with(&s, 1.0)).unwrap();
        let comp = CompositionSpec::base().with_stop_grad(&c, 1.0).with(&s, 1.0);
        let mut tape = Tape::new();
        let w = tape.constant(w0.clone());
        let we = compose_weight(&mut tape, "w", w, &comp).unwrap();
        assert_eq!(tape.value(we), &plain);
        let x = tape.constant(Tensor::from_fn([6, 2], |i| i as f32 * 0.1));
        let y = tape.matmul(we, x).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt_param(c.layers["w"].b.id()).is_none());
        assert!(g.wrt_param(s.layers["w"].b.id()).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn content_delta_ignores_orthogonal_inputs() {
        let (c, s, _) = filled_pair();
        // A style row is orthogonal to the content row space.
        let v = s.layers["w"].a.value.slice_outer(0, 1).unwrap().reshape([6, 1]).unwrap();
        let out = c.layers["w"].delta().matmul(&v).unwrap();
        assert!(out.max_abs() < 1e-6);
    }

    #[test]
    fn mismatched_dims_name_the_layer() {
        let (c, _, _) = filled_pair();
        let err = effective_weight(&Tensor::zeros([4, 6]), "w", &CompositionSpec::single(&c, 1.0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("`w`"), "{err}");
        let pts = [AttachmentPoint { name: "w".into(), out_dim: 3, in_dim: 7 }];
        assert!(c.check_compatible(&pts).unwrap_err().to_string().contains("`w`"));
    }
}
