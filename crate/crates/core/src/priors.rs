//! Front end: the patch-embedding stem, the global anchor detector and the
//! local structural prior module (texture map, complexity gate, expert mix).

use crate::autograd::{Ctx, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::kernels::conv::ConvGeom;
use crate::nn::{aux, voxels, Conv3d, ConvNormAct, Cost, Extents, FeatureConv, GroupNorm, Linear};
use crate::params::Registry;
use crate::tensor::{Real, Tensor};

/// Stride-2 ghost convolution to the stem width, then group norm.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: FeatureConv,
    pub norm: GroupNorm,
}

impl Stem {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            conv: FeatureConv::new("stem.ghost", cfg.in_channels, cfg.stem_channels, 3, 2, 1, cfg.ghost())?,
            norm: GroupNorm::new("stem.norm", cfg.stem_channels, cfg.norm_groups)?,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.conv.register(reg)?;
        self.norm.register(reg)
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(cx, x)?;
        self.norm.forward(cx, y)
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        self.conv.out_extents(e)
    }

    pub fn cost(&self, batch: usize, input: Extents) -> Cost {
        let n = batch * self.conv.cout() * voxels(self.out_extents(input));
        Cost::macs(self.conv.macs(batch, input)) + Cost::aux(n * aux::NORM)
    }
}

/// Three strided conv stages, global pooling and a two-layer MLP emitting
/// `K` sigmoid-bounded `(d, h, w)` coordinates per sample.
#[derive(Clone, Debug)]
pub struct AnchorDetector {
    pub anchors: usize,
    pub stages: Vec<ConvNormAct>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AnchorDetector {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(3);
        let mut cin = cfg.in_channels;
        for (i, &w) in cfg.detector_widths.iter().enumerate() {
            let name = format!("anchors.stage{}", i + 1);
            let conv = Conv3d::new(format!("{name}.conv"), cin, w, 3, ConvGeom::new(2, 1, 1));
            stages.push(ConvNormAct::new(&name, FeatureConv::Dense(conv), cfg.norm_groups)?);
            cin = w;
        }
        Ok(Self {
            anchors: cfg.anchors,
            stages,
            fc1: Linear::new("anchors.fc1", cin, cfg.detector_hidden, true),
            fc2: Linear::new("anchors.fc2", cfg.detector_hidden, 3 * cfg.anchors, true),
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        for s in &self.stages {
            s.register(reg)?;
        }
        self.fc1.register(reg)?;
        self.fc2.register(reg)
    }

    /// Returns anchors shaped `[B, K, 3]`.
    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = x.dims5()?[0];
        let mut h = x;
        for s in &self.stages {
            h = s.forward(cx, h)?;
        }
        let v = self.fc1.forward(cx, h.gap3d()?)?.silu();
        self.fc2.forward(cx, v)?.sigmoid().reshape(vec![b, self.anchors, 3])
    }

    pub fn cost(&self, batch: usize, input: Extents) -> Cost {
        let mut e = input;
        let mut total = Cost::default();
        for s in &self.stages {
            total += s.cost(batch, e);
            e = s.out_extents(e);
        }
        let last = self.fc1.nin;
        total
            + Cost::aux(batch * last * voxels(e))
            + Cost::macs(self.fc1.macs(batch) + self.fc2.macs(batch))
            + Cost::aux(batch * (self.fc1.nout * aux::SILU + self.fc2.nout * aux::SIGMOID))
    }
}

/// Everything the structural prior module emits.
pub struct LspmOutput<'t, T: Real> {
    /// `[B, 1, ...]` in `[0, 1]`, high where local texture is strong.
    pub texture: Var<'t, T>,
    /// Expert-mixed features, same shape as the stem output.
    pub mixed: Var<'t, T>,
    /// `[B, 1, ...]` complexity gate.
    pub gate: Var<'t, T>,
    /// `[B, 2, ...]` per-voxel expert weights.
    pub alpha: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Lspm {
    pub smoother: ConvNormAct,
    pub texture_proj: Conv3d,
    pub gate1: ConvNormAct,
    pub gate2: ConvNormAct,
    pub gate_proj: Conv3d,
    pub alpha: Conv3d,
    pub expert1: Conv3d,
    pub expert2: Conv3d,
}

impl Lspm {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.stem_channels;
        let g = cfg.norm_groups;
        let wide = 2 * c;
        let dense3 = |name: &str, cin, cout| {
            FeatureConv::Dense(Conv3d::new(format!("{name}.conv"), cin, cout, 3, ConvGeom::same(3)))
        };
        Ok(Self {
            smoother: ConvNormAct::new(
                "lspm.texture.smooth",
                FeatureConv::Dense(Conv3d::depthwise("lspm.texture.smooth.conv", c, 5)),
                g,
            )?,
            texture_proj: Conv3d::pointwise("lspm.texture.proj", c, 1),
            gate1: ConvNormAct::new("lspm.gate.stage1", dense3("lspm.gate.stage1", c, wide), g)?,
            gate2: ConvNormAct::new("lspm.gate.stage2", dense3("lspm.gate.stage2", wide, wide), g)?,
            gate_proj: Conv3d::pointwise("lspm.gate.proj", wide, 1),
            alpha: Conv3d::pointwise("lspm.mix.alpha", 1, 2),
            expert1: Conv3d::pointwise("lspm.mix.expert1", c, c),
            expert2: Conv3d::pointwise("lspm.mix.expert2", c, c),
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.smoother.register(reg)?;
        self.texture_proj.register(reg)?;
        self.gate1.register(reg)?;
        self.gate2.register(reg)?;
        self.gate_proj.register(reg)?;
        self.alpha.register(reg)?;
        self.expert1.register(reg)?;
        self.expert2.register(reg)
    }

    pub fn texture<'t, T: Real>(&self, cx: Ctx<'t, T>, f0: Var<'t, T>) -> Result<Var<'t, T>> {
        let smooth = self.smoother.forward(cx, f0)?;
        let residual = smooth.sub(f0)?.abs();
        Ok(self.texture_proj.forward(cx, residual)?.sigmoid())
    }

    /// Returns the gate `G` and the expert weights `alpha` (`[B, 2, ...]`).
    pub fn gate<'t, T: Real>(&self, cx: Ctx<'t, T>, f0: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let h = self.gate1.forward(cx, f0)?;
        let h = self.gate2.forward(cx, h)?;
        let g = self.gate_proj.forward(cx, h)?.sigmoid();
        let alpha = self.alpha.forward(cx, g)?.softmax_channels()?;
        Ok((g, alpha))
    }

    pub fn mix<'t, T: Real>(&self, cx: Ctx<'t, T>, f0: Var<'t, T>, alpha: Var<'t, T>) -> Result<Var<'t, T>> {
        let z1 = self.expert1.forward(cx, f0)?;
        let z2 = self.expert2.forward(cx, f0)?;
        let a1 = alpha.slice_channels(0, 1)?;
        let a2 = alpha.slice_channels(1, 2)?;
        z1.mul(a1)?.add(z2.mul(a2)?)
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, f0: Var<'t, T>) -> Result<LspmOutput<'t, T>> {
        let texture = self.texture(cx, f0)?;
        let (gate, alpha) = self.gate(cx, f0)?;
        let mixed = self.mix(cx, f0, alpha)?;
        Ok(LspmOutput {
            texture,
            mixed,
            gate,
            alpha,
        })
    }

    /// Costs of the texture, gate and mixing branches at stem extents.
    pub fn branch_costs(&self, batch: usize, e: Extents) -> [Cost; 3] {
        let v = batch * voxels(e);
        let c = self.expert1.cin;
        let texture = self.smoother.cost(batch, e)
            + Cost::aux(2 * c * v)
            + Cost::macs(self.texture_proj.macs(batch, e))
            + Cost::aux(v * aux::SIGMOID);
        let gate = self.gate1.cost(batch, e)
            + self.gate2.cost(batch, e)
            + Cost::macs(self.gate_proj.macs(batch, e))
            + Cost::aux(v * aux::SIGMOID);
        let mix = Cost::macs(self.alpha.macs(batch, e) + self.expert1.macs(batch, e) + self.expert2.macs(batch, e))
            + Cost::aux(2 * v * aux::SOFTMAX + 3 * c * v);
        [texture, gate, mix]
    }
}

/// Stand-in texture map when the prior module is ablated: identically one.
pub fn unit_texture<T: Real>(batch: usize, e: Extents) -> Tensor<T> {
    Tensor::ones(vec![batch, 1, e[0], e[1], e[2]])
}
