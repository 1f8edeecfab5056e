//! End-to-end network assembly.

use crate::autograd::{Ctx, Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{DecoderStage, Head};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::nn::Conv3d;
use crate::params::{init_params, InitScheme, ParamStore, Registry};
use crate::priors::{unit_texture, AnchorDetector, Lspm, Stem};
use crate::router::{SkipRouter, SkipSource};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct LightMedSeg {
    pub config: ModelConfig,
    pub stem: Stem,
    pub detector: Option<AnchorDetector>,
    pub lspm: Option<Lspm>,
    pub encoder: Encoder,
    pub router: Option<SkipRouter>,
    pub bottleneck: Conv3d,
    pub decoder: Vec<DecoderStage>,
    pub head: Head,
}

/// Logits plus the intermediate signals that structural checks inspect.
pub struct ModelOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    pub stem: Var<'t, T>,
    pub anchors: Option<Var<'t, T>>,
    pub texture: Var<'t, T>,
    pub lspm_gate: Option<Var<'t, T>>,
    pub lspm_alpha: Option<Var<'t, T>>,
    pub skips: Vec<Var<'t, T>>,
    pub router_alpha: Vec<Var<'t, T>>,
    pub decoder_pi: Vec<Var<'t, T>>,
}

impl LightMedSeg {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ab = config.ablations;
        let bw = config.encoder_widths[3];
        Ok(Self {
            stem: Stem::new(&config)?,
            detector: (!ab.no_anchors).then(|| AnchorDetector::new(&config)).transpose()?,
            lspm: (!ab.no_lspm).then(|| Lspm::new(&config)).transpose()?,
            encoder: Encoder::new(&config)?,
            router: (!ab.no_router).then(|| SkipRouter::new(&config)),
            bottleneck: Conv3d::pointwise("decoder.bottleneck", bw, config.decoder_widths()[0]),
            decoder: (1..=4).map(|j| DecoderStage::new(&config, j)).collect::<Result<_>>()?,
            head: Head::new(&config),
            config,
        })
    }

    pub fn registry(&self) -> Result<Registry> {
        let mut reg = Registry::default();
        self.stem.register(&mut reg)?;
        if let Some(d) = &self.detector {
            d.register(&mut reg)?;
        }
        if let Some(l) = &self.lspm {
            l.register(&mut reg)?;
        }
        self.encoder.register(&mut reg)?;
        if let Some(r) = &self.router {
            r.register(&mut reg)?;
        }
        self.bottleneck.register(&mut reg)?;
        for s in &self.decoder {
            s.register(&mut reg)?;
        }
        self.head.register(&mut reg)?;
        Ok(reg)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.registry()?.scalar_count())
    }

    pub fn init_params<T: Real>(&self, scheme: InitScheme, seed: u64) -> Result<ParamStore<T>> {
        init_params(&self.registry()?, scheme, seed)
    }

    /// Checks that `store` holds exactly this model's parameters with matching shapes.
    pub fn check_store<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let reg = self.registry()?;
        for spec in reg.specs() {
            let v = store.value(&spec.name)?;
            if v.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "check_store",
                    format!("`{}` is {:?}, model expects {:?}", spec.name, v.shape(), spec.shape),
                ));
            }
        }
        if store.len() != reg.specs().count() {
            let extra: Vec<&str> = store.names().filter(|n| reg.get(n).is_none()).collect();
            return Err(Error::Registration(format!("store has unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<ModelOutput<'t, T>> {
        let shape = x.shape();
        self.config.check_input(&shape)?;
        let f0 = self.stem.forward(cx, x)?;
        let [b, _, d, h, w] = f0.dims5()?;
        let anchors = self.detector.as_ref().map(|det| det.forward(cx, x)).transpose()?;
        let (texture, features, lspm_gate, lspm_alpha) = match &self.lspm {
            Some(l) => {
                let o = l.forward(cx, f0)?;
                (o.texture, o.mixed, Some(o.gate), Some(o.alpha))
            }
            None => (cx.constant(unit_texture(b, [d, h, w])), f0, None, None),
        };
        let enc = self.encoder.forward(cx, features, anchors, texture)?;
        let aligned = match &self.router {
            Some(r) => Some(r.align(cx, &enc.skips)?),
            None => None,
        };

        let mut hcur = self.bottleneck.forward(cx, enc.bottleneck)?;
        let mut router_alpha = Vec::new();
        let mut decoder_pi = Vec::with_capacity(4);
        for stage in &self.decoder {
            let [_, _, d, h, w] = hcur.dims5()?;
            let target = stage.out_extents([d, h, w]);
            let source = match stage.source {
                SkipSource::Router => {
                    let (Some(r), Some(al)) = (&self.router, &aligned) else {
                        return Err(Error::Config(format!(
                            "decoder stage {} is routed but the router is disabled",
                            stage.index
                        )));
                    };
                    let routed = r.route(cx, al, target)?;
                    router_alpha.push(routed.alpha);
                    routed.fused
                }
                SkipSource::Encoder(i) => enc.skips[i - 1],
                SkipSource::Stem => f0,
            };
            let out = stage.forward(cx, hcur, source, anchors)?;
            decoder_pi.push(out.pi);
            hcur = out.out;
        }
        let logits = self.head.forward(cx, hcur)?;
        let ls = logits.shape();
        if ls[2..] != shape[2..] || ls[1] != self.config.num_classes {
            return Err(Error::shape(
                "model_forward",
                format!("logits {ls:?} do not match input {shape:?}"),
            ));
        }
        Ok(ModelOutput {
            logits,
            stem: f0,
            anchors,
            texture,
            lspm_gate,
            lspm_alpha,
            skips: enc.skips,
            router_alpha,
            decoder_pi,
        })
    }

    /// Inference-only forward pass returning the logits tensor.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, store);
        let out = self.forward(cx, tape.constant(x.clone()))?;
        let v = out.logits.value();
        drop(out);
        Ok((*v).clone())
    }

    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<LabelVolume> {
        argmax_labels(&self.logits(store, x)?)
    }
}

/// Per-voxel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<LabelVolume> {
    let [b, c, d, h, w] = logits.dims5()?;
    let vol = d * h * w;
    let x = logits.data();
    let mut labels = Vec::with_capacity(b * vol);
    for bi in 0..b {
        let base = bi * c * vol;
        for i in 0..vol {
            let mut best = 0;
            let mut best_v = x[base + i];
            for k in 1..c {
                let v = x[base + k * vol + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            labels.push(best as u32);
        }
    }
    LabelVolume::new([b, d, h, w], labels, c)
}
