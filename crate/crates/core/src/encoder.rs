//! Four-stage encoder: FiLM-conditioned ghost convolution, texture-routed
//! detail/smooth blending, channel recalibration and max pooling.

use crate::autograd::{Ctx, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{aux, voxels, Conv3d, ConvNormAct, Cost, Extents, FeatureConv, FilmGenerator, GroupNorm, SeBlock};
use crate::params::Registry;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub index: usize,
    pub cin: usize,
    pub cout: usize,
    pub conv: FeatureConv,
    pub norm: GroupNorm,
    pub film: Option<FilmGenerator>,
    pub detail: ConvNormAct,
    pub smooth: Conv3d,
    pub se: SeBlock,
    pub pool: bool,
}

impl EncoderStage {
    pub fn new(cfg: &ModelConfig, index: usize) -> Result<Self> {
        if !(1..=4).contains(&index) {
            return Err(Error::Config(format!("encoder stage index {index} out of 1..=4")));
        }
        let cin = if index == 1 {
            cfg.stem_channels
        } else {
            cfg.encoder_widths[index - 2]
        };
        let cout = cfg.encoder_widths[index - 1];
        let p = format!("encoder.stage{index}");
        Ok(Self {
            index,
            cin,
            cout,
            conv: FeatureConv::new(format!("{p}.ghost"), cin, cout, 3, 1, 1, cfg.ghost())?,
            norm: GroupNorm::new(format!("{p}.norm"), cout, cfg.norm_groups)?,
            film: (!cfg.ablations.no_anchors).then(|| FilmGenerator::new(format!("{p}.film"), cout, cfg.anchors)),
            detail: ConvNormAct::new(
                &format!("{p}.detail"),
                FeatureConv::Dense(Conv3d::depthwise(format!("{p}.detail.conv"), cout, 3)),
                cfg.norm_groups,
            )?,
            smooth: Conv3d::pointwise(format!("{p}.smooth"), cout, cout),
            se: SeBlock::new(format!("{p}.se"), cout),
            pool: index < 4,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.conv.register(reg)?;
        self.norm.register(reg)?;
        if let Some(f) = &self.film {
            f.register(reg)?;
        }
        self.detail.register(reg)?;
        self.smooth.register(reg)?;
        self.se.register(reg)
    }

    /// Ghost conv, norm and (when anchors are present) FiLM modulation.
    pub fn condition<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        x: Var<'t, T>,
        anchors: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let g = self.norm.forward(cx, self.conv.forward(cx, x)?)?;
        match (&self.film, anchors) {
            (Some(film), Some(s)) => film.modulate(cx, g, s),
            (None, _) => Ok(g),
            (Some(_), None) => Err(Error::arg(
                "encoder_stage",
                format!("stage {} is FiLM-conditioned but received no anchors", self.index),
            )),
        }
    }

    /// `t * detail + (1 - t) * smooth` with a single-channel `t`.
    pub fn blend<'t, T: Real>(&self, cx: Ctx<'t, T>, f: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
        let zd = self.detail.forward(cx, f)?;
        let zs = self.smooth.forward(cx, f)?;
        zd.mul(t)?.add(zs.mul(t.rsub_scalar(1.0))?)
    }

    /// Returns the pre-pool skip `E_i` and the tensor fed to the next stage.
    pub fn forward<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        x: Var<'t, T>,
        anchors: Option<Var<'t, T>>,
        texture: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let f = self.condition(cx, x, anchors)?;
        let [_, _, d, h, w] = f.dims5()?;
        let t = texture.resample([d, h, w])?;
        let e = self.se.forward(cx, self.blend(cx, f, t)?)?;
        let next = if self.pool { e.maxpool3d()? } else { e };
        Ok((e, next))
    }

    pub fn cost(&self, batch: usize, input: Extents, texture: Extents) -> Cost {
        let e = self.conv.out_extents(input);
        let n = batch * self.cout * voxels(e);
        let v = batch * voxels(e);
        let mut c = Cost::macs(self.conv.macs(batch, input)) + Cost::aux(n * aux::NORM);
        if let Some(f) = &self.film {
            c += f.cost(batch, e);
        }
        if texture != e {
            c += Cost::aux(v * aux::RESAMPLE);
        }
        c += self.detail.cost(batch, e) + Cost::macs(self.smooth.macs(batch, e)) + Cost::aux(v + 3 * n);
        c += self.se.cost(batch, e);
        if self.pool {
            c += Cost::aux(n / 8 * aux::POOL);
        }
        c
    }
}

pub struct EncoderOutputs<'t, T: Real> {
    /// Pre-pool stage outputs `E(1)..E(4)`.
    pub skips: Vec<Var<'t, T>>,
    pub bottleneck: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            stages: (1..=4).map(|i| EncoderStage::new(cfg, i)).collect::<Result<_>>()?,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.stages.iter().try_for_each(|s| s.register(reg))
    }

    pub fn forward<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        x: Var<'t, T>,
        anchors: Option<Var<'t, T>>,
        texture: Var<'t, T>,
    ) -> Result<EncoderOutputs<'t, T>> {
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for s in &self.stages {
            let (e, next) = s.forward(cx, h, anchors, texture)?;
            skips.push(e);
            h = next;
        }
        Ok(EncoderOutputs { skips, bottleneck: h })
    }

    /// Extents of `E(1)..E(4)` for a given stem-output extent.
    pub fn skip_extents(stem: Extents) -> [Extents; 4] {
        let half = |e: Extents| e.map(|n| n / 2);
        let e1 = stem;
        let e2 = half(e1);
        let e3 = half(e2);
        [e1, e2, e3, half(e3)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::{init_params, InitScheme};
    use crate::tensor::Tensor;

    #[test]
    fn skip_ladder_and_bottleneck() {
        let cfg = ModelConfig::toy();
        let enc = Encoder::new(&cfg).unwrap();
        let mut reg = Registry::default();
        enc.register(&mut reg).unwrap();
        let store = init_params::<f64>(&reg, InitScheme::Perturbed, 2).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(vec![1, 8, 16, 16, 16], |i| ((i % 13) as f64 - 6.0) / 6.0));
        let t = tape.constant(Tensor::full(vec![1, 1, 16, 16, 16], 0.3));
        let s = tape.constant(Tensor::full(vec![1, 8, 3], 0.5));
        let out = enc.forward(cx, x, Some(s), t).unwrap();
        let shapes: Vec<Vec<usize>> = out.skips.iter().map(|v| v.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 8, 16, 16, 16],
                vec![1, 16, 8, 8, 8],
                vec![1, 32, 4, 4, 4],
                vec![1, 64, 2, 2, 2]
            ]
        );
        assert_eq!(out.bottleneck.id(), out.skips[3].id());
        assert_eq!(Encoder::skip_extents([16; 3]), [[16; 3], [8; 3], [4; 3], [2; 3]]);
    }

    #[test]
    fn blend_endpoints() {
        let cfg = ModelConfig::toy();
        let stage = EncoderStage::new(&cfg, 2).unwrap();
        let mut reg = Registry::default();
        stage.register(&mut reg).unwrap();
        let store = init_params::<f64>(&reg, InitScheme::Perturbed, 4).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let f = tape.constant(Tensor::from_fn(vec![1, 16, 4, 4, 4], |i| (i as f64 * 0.3).sin()));
        let ones = tape.constant(Tensor::ones(vec![1, 1, 4, 4, 4]));
        let zeros = tape.constant(Tensor::zeros(vec![1, 1, 4, 4, 4]));
        let zd = stage.detail.forward(cx, f).unwrap().value();
        let zs = stage.smooth.forward(cx, f).unwrap().value();
        assert_eq!(*stage.blend(cx, f, ones).unwrap().value(), *zd);
        assert_eq!(*stage.blend(cx, f, zeros).unwrap().value(), *zs);
    }

    #[test]
    fn film_requires_anchors() {
        let cfg = ModelConfig::toy();
        let stage = EncoderStage::new(&cfg, 1).unwrap();
        let mut reg = Registry::default();
        stage.register(&mut reg).unwrap();
        let store = init_params::<f64>(&reg, InitScheme::Standard, 4).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 8, 4, 4, 4]));
        assert!(stage.condition(Ctx::new(&tape, &store), x, None).is_err());
    }
}
