//! Synthetic ellipsoid phantoms standing in for real scans at desk scale.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::tensor::Tensor;

/// Axis-aligned ellipsoid in voxel coordinates `(d, h, w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class: u32,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
    pub noise: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn clipped(&self, extents: [usize; 3]) -> bool {
        (0..3).any(|a| self.center[a] - self.radii[a] < 0.0 || self.center[a] + self.radii[a] > (extents[a] - 1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub num_classes: usize,
    pub background_intensity: f64,
    pub background_noise: f64,
    pub primitives: Vec<Ellipsoid>,
    /// Per-phantom random shift of each center, as a fraction of the extent.
    pub center_jitter: f64,
    /// Per-phantom random relative change of each radius.
    pub radius_jitter: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// One centered ellipsoid of class 1 on a noisy background.
    pub fn single(size: usize, seed: u64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        let r = size as f64;
        Self {
            extents: [size; 3],
            num_classes: 2,
            background_intensity: 0.0,
            background_noise: 0.1,
            primitives: vec![Ellipsoid {
                class: 1,
                center: [c; 3],
                radii: [0.28 * r, 0.22 * r, 0.25 * r],
                intensity: 1.0,
                noise: 0.1,
            }],
            center_jitter: 0.08,
            radius_jitter: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&n| n == 0 || n % 16 != 0) {
            return Err(Error::Config(format!("phantom extents {:?} must be multiples of 16", self.extents)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("phantoms need at least two classes".into()));
        }
        for p in &self.primitives {
            if p.class == 0 || p.class as usize >= self.num_classes {
                return Err(Error::Config(format!("primitive class {} outside 1..{}", p.class, self.num_classes)));
            }
            if p.radii.iter().any(|&r| !(r > 0.0)) || p.noise < 0.0 {
                return Err(Error::Config(format!("invalid primitive {p:?}")));
            }
        }
        if self.background_noise < 0.0 || self.center_jitter < 0.0 || !(0.0..1.0).contains(&self.radius_jitter) {
            return Err(Error::Config("noise and jitter must be non-negative, radius jitter below 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// `(1, 1, D, H, W)` intensities.
    pub volume: Tensor<f32>,
    /// `(1, D, H, W)` labels.
    pub labels: LabelVolume,
    /// The jittered primitives actually drawn, in paint order.
    pub primitives: Vec<Ellipsoid>,
}

/// Paints primitives in order (later ones overwrite earlier ones) onto a
/// background of class 0.
pub fn paint_labels(extents: [usize; 3], primitives: &[Ellipsoid]) -> Vec<u32> {
    let [d, h, w] = extents;
    let mut labels = vec![0u32; d * h * w];
    for p in primitives {
        let lo = |a: usize| (p.center[a] - p.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize, n: usize| ((p.center[a] + p.radii[a]).ceil().max(0.0) as usize).min(n - 1);
        for z in lo(0)..=hi(0, d) {
            for y in lo(1)..=hi(1, h) {
                for x in lo(2)..=hi(2, w) {
                    if p.contains([z as f64, y as f64, x as f64]) {
                        labels[(z * h + y) * w + x] = p.class;
                    }
                }
            }
        }
    }
    labels
}

pub fn generate_phantoms(spec: &PhantomSpec, n: usize) -> Result<Vec<Phantom>> {
    spec.validate()?;
    let [d, h, w] = spec.extents;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let prims: Vec<Ellipsoid> = spec
            .primitives
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for a in 0..3 {
                    let shift = spec.center_jitter * spec.extents[a] as f64;
                    if shift > 0.0 {
                        q.center[a] += rng.gen_range(-shift..=shift);
                    }
                    if spec.radius_jitter > 0.0 {
                        q.radii[a] *= 1.0 + rng.gen_range(-spec.radius_jitter..=spec.radius_jitter);
                    }
                }
                q
            })
            .collect();
        for p in &prims {
            if p.clipped(spec.extents) {
                warn!("phantom {i}: primitive of class {} extends past the volume and is clipped", p.class);
            }
        }
        let labels = paint_labels(spec.extents, &prims);
        let mut counts = vec![0usize; spec.num_classes];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        if let Some(missing) = (0..spec.num_classes).find(|&c| counts[c] == 0) {
            return Err(Error::Config(format!("phantom {i} has no voxels of class {missing}")));
        }

        let normal = |mean: f64, sd: f64| Normal::new(mean, sd).map_err(|e| Error::Config(e.to_string()));
        let bg = normal(spec.background_intensity, spec.background_noise)?;
        let fg: Vec<Normal<f64>> = prims.iter().map(|p| normal(p.intensity, p.noise)).collect::<Result<_>>()?;
        let class_dist = |c: u32| prims.iter().rposition(|p| p.class == c).map(|k| &fg[k]).unwrap_or(&bg);
        let data: Vec<f32> = labels.iter().map(|&c| class_dist(c).sample(&mut rng) as f32).collect();
        out.push(Phantom {
            volume: Tensor::new(vec![1, 1, d, h, w], data)?,
            labels: LabelVolume::new([1, d, h, w], labels, spec.num_classes)?,
            primitives: prims,
        });
    }
    Ok(out)
}
