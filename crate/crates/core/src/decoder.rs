//! Decoder: transposed-conv upsampling, anchor-relative position bias, skip
//! fusion, three-path gated processing and the segmentation head.

use crate::autograd::{concat, Ctx, Var};
use crate::config::{HeadMode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    aux, voxels, Conv3d, ConvNormAct, ConvTranspose3d, Cost, Extents, FeatureConv, SeBlock,
};
use crate::params::Registry;
use crate::router::{skip_plan, SkipSource};
use crate::tensor::{Real, Tensor};

/// Normalized coordinate ramp `i / n` for one axis.
pub fn coordinate_ramp<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::of(i as f64 / n as f64)).collect()
}

/// Anchor-relative offset maps `[B, K, D, H, W]` from anchors `[B, K, 3]`:
/// `P_k[d,h,w] = (d/D - s_d) + (h/H - s_h) + (w/W - s_w)`.
///
/// Built from three per-anchor 1D ramps; no `3K`-channel intermediate exists.
pub fn position_maps<T: Real>(anchors: &Tensor<T>, ext: Extents) -> Result<Tensor<T>> {
    let shape = anchors.shape();
    let &[b, k, 3] = shape else {
        return Err(Error::shape("position_bias", format!("anchors must be [B, K, 3], got {shape:?}")));
    };
    if ext.contains(&0) {
        return Err(Error::shape("position_bias", format!("empty extents {ext:?}")));
    }
    let [d, h, w] = ext;
    let (rd, rh, rw) = (coordinate_ramp::<T>(d), coordinate_ramp::<T>(h), coordinate_ramp::<T>(w));
    let vol = d * h * w;
    let s = anchors.data();
    let mut out = vec![T::zero(); b * k * vol];
    let mut ah = vec![T::zero(); h];
    let mut aw = vec![T::zero(); w];
    for (bk, map) in out.chunks_mut(vol).enumerate() {
        let a = &s[bk * 3..bk * 3 + 3];
        for (y, v) in ah.iter_mut().enumerate() {
            *v = rh[y] - a[1];
        }
        for (x, v) in aw.iter_mut().enumerate() {
            *v = rw[x] - a[2];
        }
        for z in 0..d {
            let az = rd[z] - a[0];
            for y in 0..h {
                let base = az + ah[y];
                let row = &mut map[(z * h + y) * w..(z * h + y + 1) * w];
                for (o, &ax) in row.iter_mut().zip(&aw) {
                    *o = base + ax;
                }
            }
        }
    }
    Tensor::new(vec![b, k, d, h, w], out)
}

/// Differentiable wrapper around [`position_maps`]. Each map is affine in its
/// anchor with coefficient `-1` per axis, so every anchor coordinate receives
/// minus the summed upstream gradient of its map.
pub fn position_bias<'t, T: Real>(anchors: Var<'t, T>, ext: Extents) -> Result<Var<'t, T>> {
    let value = position_maps(&anchors.value(), ext)?;
    let vol = voxels(ext);
    Ok(anchors.tape().custom(
        "position_bias",
        &[anchors],
        value,
        0,
        Box::new(move |g, _| {
            let [b, k, ..] = g.dims5()?;
            let sums: Vec<T> = g.data().chunks(vol).map(|c| -c.iter().copied().sum::<T>()).collect();
            let data = sums.iter().flat_map(|&s| [s, s, s]).collect();
            Ok(vec![Some(Tensor::new(vec![b, k, 3], data)?)])
        }),
    ))
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    Transposed(ConvTranspose3d),
    Pointwise(Conv3d),
}

impl Upsampler {
    fn register(&self, reg: &mut Registry) -> Result<()> {
        match self {
            Upsampler::Transposed(c) => c.register(reg),
            Upsampler::Pointwise(c) => c.register(reg),
        }
    }

    fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Upsampler::Transposed(c) => c.forward(cx, x),
            Upsampler::Pointwise(c) => c.forward(cx, x),
        }
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        match self {
            Upsampler::Transposed(c) => c.out_extents(e),
            Upsampler::Pointwise(c) => c.out_extents(e),
        }
    }

    fn macs(&self, batch: usize, e: Extents) -> u64 {
        match self {
            Upsampler::Transposed(c) => c.macs(batch, e),
            Upsampler::Pointwise(c) => c.macs(batch, e),
        }
    }
}

/// Per-stage diagnostics.
pub struct StageOutput<'t, T: Real> {
    pub out: Var<'t, T>,
    /// `[B, 3, ...]` path weights.
    pub pi: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub index: usize,
    pub cin: usize,
    pub cout: usize,
    pub source: SkipSource,
    pub up: Upsampler,
    pub spb: Option<Conv3d>,
    pub skip_proj: Conv3d,
    pub fuse: Conv3d,
    pub gate: Conv3d,
    pub paths: [ConvNormAct; 3],
    pub se: SeBlock,
}

impl DecoderStage {
    pub fn new(cfg: &ModelConfig, index: usize) -> Result<Self> {
        if !(1..=4).contains(&index) {
            return Err(Error::Config(format!("decoder stage index {index} out of 1..=4")));
        }
        let widths = cfg.decoder_widths();
        let cout = widths[index - 1];
        let cin = if index == 1 { widths[0] } else { widths[index - 2] };
        let p = format!("decoder.stage{index}");
        let up = if index == 4 && cfg.head_mode == HeadMode::HeadRestores {
            Upsampler::Pointwise(Conv3d::pointwise(format!("{p}.up"), cin, cout))
        } else {
            Upsampler::Transposed(ConvTranspose3d::new(format!("{p}.up"), cin, cout, 2, 2))
        };
        let source = skip_plan(cfg)[index - 1];
        let src_width = match source {
            SkipSource::Router => cfg.router_width,
            SkipSource::Encoder(i) => cfg.encoder_widths[i - 1],
            SkipSource::Stem => cfg.stem_channels,
        };
        let g = cfg.norm_groups;
        Ok(Self {
            index,
            cin,
            cout,
            source,
            up,
            spb: (!cfg.ablations.no_anchors)
                .then(|| Conv3d::pointwise(format!("decoder.spb{index}"), cfg.anchors, cout)),
            skip_proj: Conv3d::pointwise(format!("{p}.skip_proj"), src_width, cout),
            fuse: Conv3d::pointwise(format!("{p}.fuse"), 2 * cout, cout),
            gate: Conv3d::pointwise(format!("{p}.gate"), cout, 3),
            paths: [
                ConvNormAct::new(
                    &format!("{p}.path1"),
                    FeatureConv::Dense(Conv3d::depthwise(format!("{p}.path1.conv"), cout, 3)),
                    g,
                )?,
                ConvNormAct::new(
                    &format!("{p}.path2"),
                    FeatureConv::new(format!("{p}.path2.conv"), cout, cout, 3, 1, 1, cfg.ghost())?,
                    g,
                )?,
                ConvNormAct::new(
                    &format!("{p}.path3"),
                    FeatureConv::Dense(Conv3d::pointwise(format!("{p}.path3.conv"), cout, cout)),
                    g,
                )?,
            ],
            se: SeBlock::new(format!("{p}.se"), cout),
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.up.register(reg)?;
        if let Some(s) = &self.spb {
            s.register(reg)?;
        }
        self.skip_proj.register(reg)?;
        self.fuse.register(reg)?;
        self.gate.register(reg)?;
        for p in &self.paths {
            p.register(reg)?;
        }
        self.se.register(reg)
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        self.up.out_extents(e)
    }

    /// `Σ_p π_p F_p(x)` followed by SE.
    pub fn gated<'t, T: Real>(&self, cx: Ctx<'t, T>, din: Var<'t, T>) -> Result<StageOutput<'t, T>> {
        let pi = self.gate.forward(cx, din)?.softmax_channels()?;
        let mut acc: Option<Var<'t, T>> = None;
        for (p, path) in self.paths.iter().enumerate() {
            let term = path.forward(cx, din)?.mul(pi.slice_channels(p, p + 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        let mixed = acc.ok_or_else(|| Error::arg("decoder_stage", "no paths"))?;
        Ok(StageOutput {
            out: self.se.forward(cx, mixed)?,
            pi,
        })
    }

    /// `source` is the unprojected skip feature (routed blend, `E(i)` or the
    /// stem output); it is projected to this stage's width and resampled to
    /// the upsampled extents.
    pub fn forward<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        x: Var<'t, T>,
        source: Var<'t, T>,
        anchors: Option<Var<'t, T>>,
    ) -> Result<StageOutput<'t, T>> {
        let mut u = self.up.forward(cx, x)?;
        let [_, _, d, h, w] = u.dims5()?;
        match (&self.spb, anchors) {
            (Some(proj), Some(s)) => {
                let bias = proj.forward(cx, position_bias(s, [d, h, w])?)?;
                u = u.add(bias)?;
            }
            (None, _) => {}
            (Some(_), None) => {
                return Err(Error::arg(
                    "decoder_stage",
                    format!("stage {} uses position bias but received no anchors", self.index),
                ))
            }
        }
        let skip = self.skip_proj.forward(cx, source)?.resample([d, h, w])?;
        let din = self.fuse.forward(cx, concat(&[u, skip])?)?;
        self.gated(cx, din)
    }

    /// Position maps, their projection and the addition onto the upsampled features.
    pub fn spb_cost(&self, batch: usize, input: Extents) -> Cost {
        let e = self.out_extents(input);
        let v = batch * voxels(e);
        match &self.spb {
            Some(s) => Cost::aux(v * s.cin * 2 + v * self.cout) + Cost::macs(s.macs(batch, e)),
            None => Cost::default(),
        }
    }

    /// Everything in the stage except the position bias.
    pub fn cost(&self, batch: usize, input: Extents, source: Extents) -> Cost {
        let e = self.out_extents(input);
        let v = batch * voxels(e);
        let n = v * self.cout;
        let mut c = Cost::macs(self.up.macs(batch, input));
        c += Cost::macs(self.skip_proj.macs(batch, source));
        if source != e {
            c += Cost::aux(n * aux::RESAMPLE);
        }
        c += Cost::macs(self.fuse.macs(batch, e) + self.gate.macs(batch, e)) + Cost::aux(3 * v * aux::SOFTMAX);
        for p in &self.paths {
            c += p.cost(batch, e);
        }
        c += Cost::aux(6 * n) + self.se.cost(batch, e);
        c
    }
}

/// Pointwise classifier followed by the resolution-restoring transposed conv.
#[derive(Clone, Debug)]
pub struct Head {
    pub proj: Conv3d,
    pub up: ConvTranspose3d,
}

impl Head {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (k, s) = match cfg.head_mode {
            HeadMode::HeadRestores => (2, 2),
            HeadMode::StagesRestore => (1, 1),
        };
        let n = cfg.num_classes;
        Self {
            proj: Conv3d::pointwise("decoder.head.proj", cfg.stem_channels, n),
            up: ConvTranspose3d::new("decoder.head.up", n, n, k, s),
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.proj.register(reg)?;
        self.up.register(reg)
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.proj.forward(cx, x)?;
        self.up.forward(cx, y)
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        self.up.out_extents(e)
    }

    pub fn cost(&self, batch: usize, input: Extents) -> Cost {
        Cost::macs(self.proj.macs(batch, input) + self.up.macs(batch, input))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::{init_params, InitScheme};

    #[test]
    fn hand_examples() {
        let s = Tensor::<f64>::zeros(vec![1, 1, 3]);
        let p = position_maps(&s, [2, 2, 2]).unwrap();
        assert_eq!(p.data()[0], 0.0);
        assert_eq!(p.data()[7], 1.5);
        let s = Tensor::<f64>::full(vec![1, 1, 3], 0.5);
        let p = position_maps(&s, [2, 2, 2]).unwrap();
        assert_eq!(p.data()[4 + 1], -0.5);
    }

    #[test]
    fn maps_differ_with_anchors() {
        let a = Tensor::<f64>::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::<f64>::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.7]).unwrap();
        let (pa, pb) = (position_maps(&a, [2, 3, 4]).unwrap(), position_maps(&b, [2, 3, 4]).unwrap());
        assert_eq!(&pa.data()[..24], &pb.data()[..24]);
        assert!(pa.data()[24..].iter().zip(&pb.data()[24..]).all(|(x, y)| (x - y - 0.1).abs() < 1e-12));
    }

    #[test]
    fn stage_shapes_and_uniform_gate() {
        let cfg = ModelConfig::toy();
        let stage = DecoderStage::new(&cfg, 2).unwrap();
        assert_eq!((stage.cin, stage.cout), (64, 32));
        let mut reg = Registry::default();
        stage.register(&mut reg).unwrap();
        let mut store = init_params::<f64>(&reg, InitScheme::Perturbed, 8).unwrap();
        store.set("decoder.stage2.gate.weight", Tensor::zeros(vec![3, 32, 1, 1, 1])).unwrap();
        store.set("decoder.stage2.gate.bias", Tensor::zeros(vec![3])).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(vec![1, 64, 2, 2, 2], |i| (i as f64 * 0.7).sin()));
        let src = tape.constant(Tensor::from_fn(vec![1, 64, 4, 4, 4], |i| (i as f64 * 0.3).cos()));
        let s = tape.constant(Tensor::full(vec![1, 8, 3], 0.25));
        let out = stage.forward(cx, x, src, Some(s)).unwrap();
        assert_eq!(out.out.shape(), vec![1, 32, 4, 4, 4]);
        assert!(out.pi.value().data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn head_restores_extents() {
        let cfg = ModelConfig::toy();
        assert_eq!(Head::new(&cfg).out_extents([16; 3]), [32; 3]);
        let cfg = cfg.with_head_mode(HeadMode::StagesRestore);
        assert_eq!(Head::new(&cfg).out_extents([32; 3]), [32; 3]);
        let s4 = DecoderStage::new(&cfg, 4).unwrap();
        assert_eq!(s4.out_extents([16; 3]), [32; 3]);
    }
}
