//! Multi-scale skip router: every encoder skip is aligned to a common width,
//! resampled to the decoder stage's extents and blended with per-voxel
//! softmax weights over the four source stages.

use crate::autograd::{concat, Ctx, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{aux, voxels, Conv3d, Cost, Extents};
use crate::params::Registry;
use crate::tensor::Real;

/// Source of a decoder stage's skip connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipSource {
    Router,
    /// Encoder stage output `E(i)`, 1-based.
    Encoder(usize),
    Stem,
}

/// Skip sources for decoder stages 1-4.
pub fn skip_plan(cfg: &ModelConfig) -> [SkipSource; 4] {
    use SkipSource::*;
    if cfg.ablations.no_router {
        [Encoder(3), Encoder(2), Encoder(1), Stem]
    } else {
        [Router, Router, Encoder(1), Stem]
    }
}

#[derive(Clone, Debug)]
pub struct SkipRouter {
    pub width: usize,
    pub align: Vec<Conv3d>,
    pub ctrl1: Conv3d,
    pub ctrl2: Conv3d,
}

/// Per-stage routing output.
pub struct Routed<'t, T: Real> {
    /// `[B, width, ...]` convex blend of the aligned skips.
    pub fused: Var<'t, T>,
    /// `[B, 4, ...]` routing weights.
    pub alpha: Var<'t, T>,
}

impl SkipRouter {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = cfg.router_width;
        let m = cfg.encoder_widths.len();
        Self {
            width: w,
            align: cfg
                .encoder_widths
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv3d::pointwise(format!("router.align{}", i + 1), c, w))
                .collect(),
            ctrl1: Conv3d::pointwise("router.ctrl1", m * w, w),
            ctrl2: Conv3d::pointwise("router.ctrl2", w, m),
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        for a in &self.align {
            a.register(reg)?;
        }
        self.ctrl1.register(reg)?;
        self.ctrl2.register(reg)
    }

    /// Projects `E(1)..E(4)` to the router width. Computed once per forward
    /// pass and shared by both routed decoder stages.
    pub fn align<'t, T: Real>(&self, cx: Ctx<'t, T>, skips: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if skips.len() != self.align.len() {
            return Err(Error::arg(
                "skip_align",
                format!("expected {} skips, got {}", self.align.len(), skips.len()),
            ));
        }
        skips.iter().zip(&self.align).map(|(&e, a)| a.forward(cx, e)).collect()
    }

    pub fn route<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        aligned: &[Var<'t, T>],
        target: Extents,
    ) -> Result<Routed<'t, T>> {
        let resampled: Vec<Var<'t, T>> = aligned.iter().map(|a| a.resample(target)).collect::<Result<_>>()?;
        let stacked = concat(&resampled)?;
        let h = self.ctrl1.forward(cx, stacked)?.silu();
        let alpha = self.ctrl2.forward(cx, h)?.softmax_channels()?;
        let mut fused: Option<Var<'t, T>> = None;
        for (i, e) in resampled.iter().enumerate() {
            let term = e.mul(alpha.slice_channels(i, i + 1)?)?;
            fused = Some(match fused {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        let fused = fused.ok_or_else(|| Error::arg("route", "no skips to route"))?;
        Ok(Routed { fused, alpha })
    }

    pub fn align_cost(&self, batch: usize, skips: &[Extents]) -> Cost {
        self.align.iter().zip(skips).map(|(a, &e)| Cost::macs(a.macs(batch, e))).sum()
    }

    pub fn route_cost(&self, batch: usize, skips: &[Extents], target: Extents) -> Cost {
        let v = batch * voxels(target);
        let m = self.align.len();
        let resample: usize = skips.iter().filter(|&&e| e != target).count() * self.width * v * aux::RESAMPLE;
        Cost::macs(self.ctrl1.macs(batch, target) + self.ctrl2.macs(batch, target))
            + Cost::aux(resample + v * self.width * aux::SILU + v * m * aux::SOFTMAX + 2 * m * self.width * v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::{init_params, InitScheme};
    use crate::tensor::Tensor;

    #[test]
    fn router_budget() {
        let mut reg = Registry::default();
        SkipRouter::new(&ModelConfig::brats()).register(&mut reg).unwrap();
        assert_eq!(reg.count_prefix("router"), 24644);
    }

    #[test]
    fn plans() {
        let cfg = ModelConfig::toy();
        assert_eq!(
            skip_plan(&cfg),
            [SkipSource::Router, SkipSource::Router, SkipSource::Encoder(1), SkipSource::Stem]
        );
        let mut ab = cfg.ablations;
        ab.no_router = true;
        assert!(!skip_plan(&cfg.with_ablations(ab)).contains(&SkipSource::Router));
    }

    #[test]
    fn zero_controller_gives_mean() {
        let cfg = ModelConfig::toy();
        let router = SkipRouter::new(&cfg);
        let mut reg = Registry::default();
        router.register(&mut reg).unwrap();
        let mut store = init_params::<f64>(&reg, InitScheme::Perturbed, 1).unwrap();
        store.set("router.ctrl2.weight", Tensor::zeros(vec![4, 64, 1, 1, 1])).unwrap();
        store.set("router.ctrl2.bias", Tensor::zeros(vec![4])).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let skips: Vec<_> = [(8, 8), (16, 4), (32, 2), (64, 1)]
            .iter()
            .map(|&(c, n)| tape.constant(Tensor::from_fn(vec![1, c, n, n, n], |i| (i as f64 * 0.11).cos())))
            .collect();
        let aligned = router.align(cx, &skips).unwrap();
        let r = router.route(cx, &aligned, [4, 4, 4]).unwrap();
        assert!(r.alpha.value().data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let mut mean = Tensor::<f64>::zeros(vec![1, 64, 4, 4, 4]);
        for a in &aligned {
            let up = a.resample([4, 4, 4]).unwrap().value();
            for (m, &u) in mean.data_mut().iter_mut().zip(up.data()) {
                *m += 0.25 * u;
            }
        }
        assert!(r.fused.value().max_abs_diff(&mean) < 1e-12);
    }
}
