//! Composite objective: inverse-frequency weighted soft Dice, cross-entropy
//! and a boundary-restricted one-vs-rest binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::pointwise::softmax_channels;
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const BOUNDARY_RADIUS: usize = 3;
pub const BOUNDARY_COEFF: f64 = 0.5;

/// Integer class ids laid out `(B, D, H, W)`, W fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 4],
    data: Vec<u32>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(dims: [usize; 4], data: Vec<u32>, num_classes: usize) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(
                "label_volume",
                format!("{dims:?} needs {n} labels, got {}", data.len()),
            ));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::arg(
                "label_volume",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(Self {
            dims,
            data,
            num_classes,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn voxels_per_sample(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.data {
            c[l as usize] += 1;
        }
        c
    }

    /// Concatenate single-sample (or any) volumes along the batch axis.
    pub fn stack(items: &[&LabelVolume]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::arg("stack_labels", "no volumes"))?;
        let mut data = Vec::new();
        let mut b = 0;
        for it in items {
            if it.dims[1..] != first.dims[1..] || it.num_classes != first.num_classes {
                return Err(Error::shape("stack_labels", "volumes differ in extents or class count"));
            }
            b += it.dims[0];
            data.extend_from_slice(&it.data);
        }
        let [_, d, h, w] = first.dims;
        Self::new([b, d, h, w], data, first.num_classes)
    }

    /// Labels as a `(B, 1, D, H, W)` real tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [b, d, h, w] = self.dims;
        Tensor::from_fn(vec![b, 1, d, h, w], |i| T::of(self.data[i] as f64))
    }
}

/// `w_c = |Ω| / (N · max(count_c, 1))` over every voxel of the batch.
pub fn class_weights(labels: &LabelVolume) -> Vec<f64> {
    let n = labels.num_classes as f64;
    let total = labels.data.len() as f64;
    labels
        .counts()
        .into_iter()
        .map(|c| total / (n * c.max(1) as f64))
        .collect()
}

/// Voxels within Chebyshev distance `radius` of a class boundary, per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask {
    pub dims: [usize; 4],
    pub data: Vec<bool>,
}

impl BoundaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Voxels with at least one 26-connected in-volume neighbour of another class.
pub fn raw_boundary(labels: &LabelVolume) -> Vec<bool> {
    let [b, d, h, w] = labels.dims;
    let vol = d * h * w;
    let mut out = vec![false; b * vol];
    let l = &labels.data;
    for bi in 0..b {
        let base = bi * vol;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = base + (z * h + y) * w + x;
                    let me = l[i];
                    'scan: for nz in z.saturating_sub(1)..(z + 2).min(d) {
                        for ny in y.saturating_sub(1)..(y + 2).min(h) {
                            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                                if l[base + (nz * h + ny) * w + nx] != me {
                                    out[i] = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Raw boundary dilated by a `(2r+1)^3` max filter (separable, zero outside).
pub fn boundary_mask(labels: &LabelVolume, radius: usize) -> BoundaryMask {
    let [b, d, h, w] = labels.dims;
    let mut m = raw_boundary(labels);
    let mut tmp = vec![false; m.len()];
    for (len, stride) in [(d, h * w), (h, w), (w, 1)] {
        let vol = d * h * w;
        for bi in 0..b {
            for i in 0..vol {
                let pos = (i / stride) % len;
                let start = i - pos * stride;
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                tmp[bi * vol + i] = (lo..=hi).any(|p| m[bi * vol + start + p * stride]);
            }
        }
        std::mem::swap(&mut m, &mut tmp);
    }
    BoundaryMask {
        dims: labels.dims,
        data: m,
    }
}

fn check_pair<T: Real>(op: &'static str, logits: &Tensor<T>, labels: &LabelVolume) -> Result<[usize; 5]> {
    let dims = logits.dims5()?;
    let [b, c, d, h, w] = dims;
    if [b, d, h, w] != labels.dims || c != labels.num_classes {
        return Err(Error::shape(
            op,
            format!(
                "logits {:?} vs labels {:?} with {} classes",
                logits.shape(),
                labels.dims,
                labels.num_classes
            ),
        ));
    }
    Ok(dims)
}

fn check_weights(op: &'static str, weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::arg(op, format!("need {n} positive finite class weights, got {weights:?}")));
    }
    Ok(())
}

/// `dL/dz = p ⊙ (g − Σ_c p_c g_c)` per voxel.
fn softmax_pullback<T: Real>(p: &Tensor<T>, gp: &[f64], scale: f64) -> Tensor<T> {
    let [b, c, d, h, w] = p.dims5().expect("softmax output is rank 5");
    let vol = d * h * w;
    let pd = p.data();
    let mut out = vec![T::zero(); pd.len()];
    for bi in 0..b {
        let base = bi * c * vol;
        for i in 0..vol {
            let dot: f64 = (0..c).map(|k| pd[base + k * vol + i].f64() * gp[base + k * vol + i]).sum();
            for k in 0..c {
                let j = base + k * vol + i;
                out[j] = T::of(scale * pd[j].f64() * (gp[j] - dot));
            }
        }
    }
    Tensor::new(p.shape().to_vec(), out).expect("same shape")
}

struct DiceStats {
    inter: Vec<f64>,
    psum: Vec<f64>,
    gsum: Vec<f64>,
}

fn dice_stats<T: Real>(p: &Tensor<T>, labels: &LabelVolume) -> DiceStats {
    let [b, c, ..] = p.dims5().expect("rank 5");
    let vol = labels.voxels_per_sample();
    let pd = p.data();
    let mut s = DiceStats {
        inter: vec![0.0; c],
        psum: vec![0.0; c],
        gsum: vec![0.0; c],
    };
    for bi in 0..b {
        for k in 0..c {
            let row = &pd[(bi * c + k) * vol..(bi * c + k + 1) * vol];
            s.psum[k] += row.iter().map(|v| v.f64()).sum::<f64>();
        }
        for i in 0..vol {
            let y = labels.data[bi * vol + i] as usize;
            s.inter[y] += pd[(bi * c + y) * vol + i].f64();
            s.gsum[y] += 1.0;
        }
    }
    s
}

/// Per-class soft Dice losses `1 - (2I + ε) / (P + G + ε)` from logits.
pub fn dice_per_class<T: Real>(logits: &Tensor<T>, labels: &LabelVolume) -> Result<Vec<f64>> {
    check_pair("dice_loss", logits, labels)?;
    let p = softmax_channels(logits)?;
    let s = dice_stats(&p, labels);
    Ok((0..labels.num_classes)
        .map(|k| 1.0 - (2.0 * s.inter[k] + DICE_EPS) / (s.psum[k] + s.gsum[k] + DICE_EPS))
        .collect())
}

/// `Σ_c w_c d_c / Σ_c w_c` as a scalar tape node.
pub fn dice_loss<'t, T: Real>(logits: Var<'t, T>, labels: &LabelVolume, weights: &[f64]) -> Result<Var<'t, T>> {
    let z = logits.value();
    let [b, c, ..] = check_pair("dice_loss", &z, labels)?;
    check_weights("dice_loss", weights, c)?;
    let p = softmax_channels(&z)?;
    let s = dice_stats(&p, labels);
    let wsum: f64 = weights.iter().sum();
    let value: f64 = (0..c)
        .map(|k| weights[k] * (1.0 - (2.0 * s.inter[k] + DICE_EPS) / (s.psum[k] + s.gsum[k] + DICE_EPS)))
        .sum::<f64>()
        / wsum;
    let labels = labels.clone();
    let weights = weights.to_vec();
    Ok(logits.tape().custom(
        "dice_loss",
        &[logits],
        Tensor::scalar(T::of(value)),
        0,
        Box::new(move |g, _| {
            let vol = labels.voxels_per_sample();
            let mut gp = vec![0.0; p.numel()];
            for bi in 0..b {
                for k in 0..c {
                    let den = s.psum[k] + s.gsum[k] + DICE_EPS;
                    let num = 2.0 * s.inter[k] + DICE_EPS;
                    let coef = weights[k] / wsum;
                    for i in 0..vol {
                        let y = (labels.data[bi * vol + i] as usize == k) as u8 as f64;
                        gp[(bi * c + k) * vol + i] = -coef * (2.0 * y * den - num) / (den * den);
                    }
                }
            }
            Ok(vec![Some(softmax_pullback(&p, &gp, g.item().f64()))])
        }),
    ))
}

/// Weighted cross-entropy `Σ_r w_{y_r} (-log p_{y_r}) / Σ_r w_{y_r}`.
pub fn ce_loss<'t, T: Real>(logits: Var<'t, T>, labels: &LabelVolume, weights: &[f64]) -> Result<Var<'t, T>> {
    let z = logits.value();
    let [b, c, ..] = check_pair("ce_loss", &z, labels)?;
    check_weights("ce_loss", weights, c)?;
    let vol = labels.voxels_per_sample();
    let zd = z.data();
    let mut num = 0.0;
    let mut den = 0.0;
    for bi in 0..b {
        for i in 0..vol {
            let y = labels.data[bi * vol + i] as usize;
            let at = |k: usize| zd[(bi * c + k) * vol + i].f64();
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
            num += weights[y] * (lse - at(y));
            den += weights[y];
        }
    }
    let labels = labels.clone();
    let weights = weights.to_vec();
    let p = softmax_channels(&z)?;
    Ok(logits.tape().custom(
        "ce_loss",
        &[logits],
        Tensor::scalar(T::of(num / den)),
        0,
        Box::new(move |g, _| {
            let scale = g.item().f64() / den;
            let pd = p.data();
            let mut out = vec![T::zero(); pd.len()];
            for bi in 0..b {
                for i in 0..vol {
                    let y = labels.data[bi * vol + i] as usize;
                    for k in 0..c {
                        let j = (bi * c + k) * vol + i;
                        let t = if k == y { 1.0 } else { 0.0 };
                        out[j] = T::of(scale * weights[y] * (pd[j].f64() - t));
                    }
                }
            }
            Ok(vec![Some(Tensor::new(p.shape().to_vec(), out)?)])
        }),
    ))
}

/// Mask-restricted, class-weighted one-vs-rest BCE on softmax probabilities,
/// divided by `max(|M|, 1)`. `log(1 - p_c)` is evaluated as a log-sum-exp
/// over the other classes to stay finite for saturated logits.
pub fn boundary_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &LabelVolume,
    mask: &BoundaryMask,
    weights: &[f64],
) -> Result<Var<'t, T>> {
    let z = logits.value();
    let [b, c, ..] = check_pair("boundary_loss", &z, labels)?;
    check_weights("boundary_loss", weights, c)?;
    if mask.dims != labels.dims {
        return Err(Error::shape("boundary_loss", "mask extents differ from labels"));
    }
    let vol = labels.voxels_per_sample();
    let norm = mask.count().max(1) as f64;
    let zd = z.data();
    let mut total = 0.0;
    let mut zv = vec![0.0; c];
    for bi in 0..b {
        for i in 0..vol {
            if !mask.data[bi * vol + i] {
                continue;
            }
            for (k, v) in zv.iter_mut().enumerate() {
                *v = zd[(bi * c + k) * vol + i].f64();
            }
            let y = labels.data[bi * vol + i] as usize;
            let lse = log_sum_exp(&zv, None);
            for k in 0..c {
                let nll = if k == y {
                    lse - zv[k]
                } else {
                    lse - log_sum_exp(&zv, Some(k))
                };
                total += weights[k] * nll;
            }
        }
    }
    let labels = labels.clone();
    let mask = mask.clone();
    let weights = weights.to_vec();
    let z = z.clone();
    Ok(logits.tape().custom(
        "boundary_loss",
        &[logits],
        Tensor::scalar(T::of(total / norm)),
        0,
        Box::new(move |g, _| {
            let scale = g.item().f64() / norm;
            let zd = z.data();
            let mut out = vec![T::zero(); zd.len()];
            let mut zv = vec![0.0; c];
            let mut p = vec![0.0; c];
            let wsum: f64 = weights.iter().sum();
            for bi in 0..b {
                for i in 0..vol {
                    if !mask.data[bi * vol + i] {
                        continue;
                    }
                    for (k, v) in zv.iter_mut().enumerate() {
                        *v = zd[(bi * c + k) * vol + i].f64();
                    }
                    let lse = log_sum_exp(&zv, None);
                    for k in 0..c {
                        p[k] = (zv[k] - lse).exp();
                    }
                    let y = labels.data[bi * vol + i] as usize;
                    // Σ_c w_c p_k, minus w_y at k = y, minus the rest-softmax
                    // terms of every negative class c at k != c.
                    let mut gk: Vec<f64> = p.iter().map(|&pk| wsum * pk).collect();
                    gk[y] -= weights[y];
                    for cc in (0..c).filter(|&cc| cc != y) {
                        let rest = log_sum_exp(&zv, Some(cc));
                        for k in (0..c).filter(|&k| k != cc) {
                            gk[k] -= weights[cc] * (zv[k] - rest).exp();
                        }
                    }
                    for k in 0..c {
                        out[(bi * c + k) * vol + i] = T::of(scale * gk[k]);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(z.shape().to_vec(), out)?)])
        }),
    ))
}

fn log_sum_exp(z: &[f64], skip: Option<usize>) -> f64 {
    let keep = |k: &usize| Some(*k) != skip;
    let m = (0..z.len()).filter(keep).map(|k| z[k]).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (0..z.len()).filter(keep).map(|k| (z[k] - m).exp()).sum::<f64>().ln()
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub dice: f64,
    pub ce: f64,
    pub boundary: f64,
    pub total: f64,
}

impl LossParts {
    pub fn combine(dice: f64, ce: f64, boundary: f64) -> Self {
        Self {
            dice,
            ce,
            boundary,
            total: dice + ce + BOUNDARY_COEFF * boundary,
        }
    }
}

/// `dice + ce + 0.5 * boundary` with per-batch class weights and mask.
pub fn total_loss<'t, T: Real>(logits: Var<'t, T>, labels: &LabelVolume) -> Result<(Var<'t, T>, LossParts)> {
    let w = class_weights(labels);
    let mask = boundary_mask(labels, BOUNDARY_RADIUS);
    let dice = dice_loss(logits, labels, &w)?;
    let ce = ce_loss(logits, labels, &w)?;
    let bdry = boundary_loss(logits, labels, &mask, &w)?;
    let total = dice.add(ce)?.add(bdry.mul_scalar(BOUNDARY_COEFF))?;
    let parts = LossParts {
        dice: dice.value().item().f64(),
        ce: ce.value().item().f64(),
        boundary: bdry.value().item().f64(),
        total: total.value().item().f64(),
    };
    Ok((total, parts))
}

/// Hard Dice per class on label volumes; a class absent from both scores 1.
pub fn hard_dice(pred: &LabelVolume, target: &LabelVolume) -> Result<Vec<f64>> {
    if pred.dims != target.dims || pred.num_classes != target.num_classes {
        return Err(Error::shape("evaluate_dice", "prediction and target differ in shape"));
    }
    let n = target.num_classes;
    let mut inter = vec![0usize; n];
    let (pc, tc) = (pred.counts(), target.counts());
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        if p == t {
            inter[p as usize] += 1;
        }
    }
    Ok((0..n)
        .map(|k| {
            let den = pc[k] + tc[k];
            if den == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / den as f64
            }
        })
        .collect())
}

/// Mean hard Dice over classes `1..N`.
pub fn foreground_dice(per_class: &[f64]) -> f64 {
    let fg = &per_class[1.min(per_class.len())..];
    if fg.is_empty() {
        return 1.0;
    }
    fg.iter().sum::<f64>() / fg.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn halves(n: usize) -> LabelVolume {
        let data = (0..n * n * n).map(|i| (i / (n * n) >= n / 2) as u32).collect();
        LabelVolume::new([1, n, n, n], data, 2).unwrap()
    }

    #[test]
    fn weights_formula() {
        assert_eq!(class_weights(&halves(4)), vec![1.0, 1.0]);
        let l = LabelVolume::new([1, 1, 1, 4], vec![0, 0, 0, 1], 2).unwrap();
        let w = class_weights(&l);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);
        let mut data = vec![0u32; 100];
        data.extend(vec![2u32; 50]);
        data.extend(vec![3u32; 50]);
        let l = LabelVolume::new([1, 1, 1, 200], data, 4).unwrap();
        let w = class_weights(&l);
        assert_eq!(w[1], 50.0);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_examples() {
        let single = LabelVolume::new([1, 4, 4, 4], vec![1; 64], 2).unwrap();
        assert_eq!(boundary_mask(&single, 3).count(), 0);
        assert_eq!(boundary_mask(&halves(4), 3).count(), 64);
        let r1 = boundary_mask(&halves(16), 1);
        let r3 = boundary_mask(&halves(16), 3);
        assert_eq!(raw_boundary(&halves(16)).iter().filter(|&&b| b).count(), 2 * 256);
        assert_eq!(r1.count(), 4 * 256);
        assert_eq!(r3.count(), 8 * 256);
        assert!(r1.data.iter().zip(&r3.data).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn uniform_logits_closed_forms() {
        let labels = halves(4);
        let tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(vec![1, 2, 4, 4, 4]));
        let w = class_weights(&labels);
        let d = dice_loss(z, &labels, &w).unwrap().value().item();
        assert!((d - 0.5).abs() < 1e-6);
        let l4 = LabelVolume::new([1, 1, 2, 2], vec![0, 1, 2, 3], 4).unwrap();
        let z4 = tape.constant(Tensor::<f64>::zeros(vec![1, 4, 1, 2, 2]));
        let ce = ce_loss(z4, &l4, &[1.0, 2.0, 3.0, 4.0]).unwrap().value().item();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels = halves(4);
        let z = Tensor::<f64>::from_fn(vec![1, 2, 4, 4, 4], |j| {
            let (k, i) = (j / 64, j % 64);
            if labels.data()[i] as usize == k {
                30.0
            } else {
                -30.0
            }
        });
        let tape = Tape::new();
        let (_, parts) = total_loss(tape.constant(z), &labels).unwrap();
        assert!(parts.dice <= 1e-4 && parts.ce <= 1e-4 && parts.boundary <= 1e-3);
        assert!(parts.total <= 2e-3);
        assert_eq!(LossParts::combine(0.2, 0.3, 0.4).total, 0.2 + 0.3 + 0.5 * 0.4);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let labels = LabelVolume::new([1, 2, 2, 2], vec![0; 8], 2).unwrap();
        let mask = boundary_mask(&labels, 3);
        let tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::from_fn(vec![1, 2, 2, 2, 2], |i| i as f64));
        assert_eq!(boundary_loss(z, &labels, &mask, &[1.0, 1.0]).unwrap().value().item(), 0.0);
    }

    #[test]
    fn hard_dice_cases() {
        let t = halves(4);
        assert_eq!(hard_dice(&t, &t).unwrap(), vec![1.0, 1.0]);
        let flipped = LabelVolume::new([1, 4, 4, 4], t.data().iter().map(|&l| 1 - l).collect(), 2).unwrap();
        assert_eq!(hard_dice(&flipped, &t).unwrap(), vec![0.0, 0.0]);
        let zeros = LabelVolume::new([1, 1, 1, 2], vec![0, 0], 3).unwrap();
        assert_eq!(hard_dice(&zeros, &zeros).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn label_validation() {
        assert!(LabelVolume::new([1, 1, 1, 2], vec![0, 2], 2).is_err());
        assert!(LabelVolume::new([1, 1, 1, 3], vec![0, 1], 2).is_err());
    }
}
