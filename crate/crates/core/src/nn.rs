//! Named building blocks shared across the network.
//!
//! A block stores its dotted parameter prefix and geometry only; values live
//! in a [`ParamStore`](crate::params::ParamStore) and are bound to the tape
//! on each forward pass.

use crate::autograd::{Ctx, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::{conv_out_len, ConvGeom};
use crate::params::{Init, Registry};
use crate::tensor::Real;

pub type Extents = [usize; 3];

pub fn voxels(e: Extents) -> usize {
    e.iter().product()
}

/// Per-element operation counts used for the non-MAC side of the cost model.
pub mod aux {
    pub const NORM: usize = 6;
    pub const SILU: usize = 4;
    pub const SIGMOID: usize = 3;
    pub const ELEMENTWISE: usize = 1;
    pub const SOFTMAX: usize = 5;
    /// Eight weighted corner reads per output element.
    pub const RESAMPLE: usize = 16;
    /// Seven comparisons per pooled output element.
    pub const POOL: usize = 7;
}

/// Multiply-accumulates plus auxiliary (normalization, activation,
/// resampling, pooling and elementwise) operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub aux: u64,
}

impl Cost {
    pub fn macs(macs: u64) -> Self {
        Self { macs, aux: 0 }
    }

    pub fn aux(ops: usize) -> Self {
        Self {
            macs: 0,
            aux: ops as u64,
        }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            aux: self.aux + o.aux,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub geom: ConvGeom,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, geom: ConvGeom) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            geom,
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, ConvGeom::pointwise())
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, k: usize) -> Self {
        Self::new(name, channels, channels, k, ConvGeom::same(k).with_groups(channels))
    }

    fn fan_in(&self) -> usize {
        self.cin / self.geom.groups * self.k.pow(3)
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        let k = self.k;
        reg.add(
            format!("{}.weight", self.name),
            vec![self.cout, self.cin / self.geom.groups, k, k, k],
            Init::FanIn(self.fan_in()),
        )?;
        reg.add(format!("{}.bias", self.name), vec![self.cout], Init::FanIn(self.fan_in()))
    }

    pub fn params(&self) -> usize {
        self.cout * self.fan_in() + self.cout
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        x.conv3d(w, Some(b), self.geom)
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        e.map(|n| conv_out_len(n, self.k, self.geom.stride, self.geom.pad).unwrap_or(0))
    }

    pub fn macs(&self, batch: usize, input: Extents) -> u64 {
        (batch * self.cout * voxels(self.out_extents(input)) * self.fan_in()) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose3d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        let k = self.k;
        let fan_in = self.cout * k.pow(3);
        reg.add(
            format!("{}.weight", self.name),
            vec![self.cin, self.cout, k, k, k],
            Init::FanIn(fan_in),
        )?;
        reg.add(format!("{}.bias", self.name), vec![self.cout], Init::FanIn(fan_in))
    }

    pub fn params(&self) -> usize {
        self.cin * self.cout * self.k.pow(3) + self.cout
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        x.conv_transpose3d(w, Some(b), self.stride)
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        e.map(|n| (n - 1) * self.stride + self.k)
    }

    pub fn macs(&self, batch: usize, input: Extents) -> u64 {
        (batch * self.cin * self.cout * self.k.pow(3) * voxels(input)) as u64
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} norm groups"
            )));
        }
        Ok(Self {
            name: name.into(),
            channels,
            groups,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        reg.add(format!("{}.gamma", self.name), vec![self.channels], Init::Ones)?;
        reg.add(format!("{}.beta", self.name), vec![self.channels], Init::Zeros)
    }

    pub fn params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = cx.param(&format!("{}.gamma", self.name))?;
        let b = cx.param(&format!("{}.beta", self.name))?;
        x.group_norm(self.groups, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub nin: usize,
    pub nout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, nin: usize, nout: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            nin,
            nout,
            bias,
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        reg.add(
            format!("{}.weight", self.name),
            vec![self.nout, self.nin],
            Init::FanIn(self.nin),
        )?;
        if self.bias {
            reg.add(format!("{}.bias", self.name), vec![self.nout], Init::FanIn(self.nin))?;
        }
        Ok(())
    }

    pub fn params(&self) -> usize {
        self.nout * self.nin + if self.bias { self.nout } else { 0 }
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(cx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.linear(w, b)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (batch * self.nin * self.nout) as u64
    }
}

/// Ghost convolution with ratio 2: a dense primary convolution produces half
/// of the output channels and a depthwise convolution over those primary
/// features synthesizes the other half. No normalization inside.
#[derive(Clone, Debug)]
pub struct GhostConv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub primary: Conv3d,
    pub cheap: Conv3d,
}

impl GhostConv3d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let name = name.into();
        if cout % 2 != 0 {
            return Err(Error::Config(format!(
                "ghost block `{name}` needs an even output width, got {cout}"
            )));
        }
        let half = cout / 2;
        Ok(Self {
            primary: Conv3d::new(format!("{name}.primary"), cin, half, k, ConvGeom::new(stride, pad, 1)),
            cheap: Conv3d::new(
                format!("{name}.cheap"),
                half,
                half,
                k,
                ConvGeom::new(1, k / 2, half),
            ),
            name,
            cin,
            cout,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.primary.register(reg)?;
        self.cheap.register(reg)
    }

    pub fn params(&self) -> usize {
        self.primary.params() + self.cheap.params()
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = x.dims5()?[1];
        if c != self.cin {
            return Err(Error::shape(
                "ghost_conv",
                format!("`{}` expects {} channels, got {c}", self.name, self.cin),
            ));
        }
        let p = self.primary.forward(cx, x)?;
        let g = self.cheap.forward(cx, p)?;
        crate::autograd::concat(&[p, g])
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        self.primary.out_extents(e)
    }

    pub fn macs(&self, batch: usize, input: Extents) -> u64 {
        let mid = self.primary.out_extents(input);
        self.primary.macs(batch, input) + self.cheap.macs(batch, mid)
    }
}

/// A spatial convolution that is either a ghost block or, for the
/// dense-convolution ablation, a plain convolution of identical geometry.
#[derive(Clone, Debug)]
pub enum FeatureConv {
    Ghost(GhostConv3d),
    Dense(Conv3d),
}

impl FeatureConv {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        ghost: bool,
    ) -> Result<Self> {
        Ok(if ghost {
            FeatureConv::Ghost(GhostConv3d::new(name, cin, cout, k, stride, pad)?)
        } else {
            FeatureConv::Dense(Conv3d::new(name, cin, cout, k, ConvGeom::new(stride, pad, 1)))
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        match self {
            FeatureConv::Ghost(g) => g.register(reg),
            FeatureConv::Dense(c) => c.register(reg),
        }
    }

    pub fn params(&self) -> usize {
        match self {
            FeatureConv::Ghost(g) => g.params(),
            FeatureConv::Dense(c) => c.params(),
        }
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            FeatureConv::Ghost(g) => g.forward(cx, x),
            FeatureConv::Dense(c) => c.forward(cx, x),
        }
    }

    pub fn cout(&self) -> usize {
        match self {
            FeatureConv::Ghost(g) => g.cout,
            FeatureConv::Dense(c) => c.cout,
        }
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        match self {
            FeatureConv::Ghost(g) => g.out_extents(e),
            FeatureConv::Dense(c) => c.out_extents(e),
        }
    }

    pub fn macs(&self, batch: usize, input: Extents) -> u64 {
        match self {
            FeatureConv::Ghost(g) => g.macs(batch, input),
            FeatureConv::Dense(c) => c.macs(batch, input),
        }
    }
}

/// Conv (or ghost) block followed by group norm and SiLU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: FeatureConv,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(name: &str, conv: FeatureConv, groups: usize) -> Result<Self> {
        let channels = conv.cout();
        Ok(Self {
            conv,
            norm: GroupNorm::new(format!("{name}.norm"), channels, groups)?,
        })
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.conv.register(reg)?;
        self.norm.register(reg)
    }

    pub fn params(&self) -> usize {
        self.conv.params() + self.norm.params()
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(cx, x)?;
        Ok(self.norm.forward(cx, y)?.silu())
    }

    pub fn out_extents(&self, e: Extents) -> Extents {
        self.conv.out_extents(e)
    }

    pub fn cost(&self, batch: usize, input: Extents) -> Cost {
        let n = batch * self.conv.cout() * voxels(self.out_extents(input));
        Cost::macs(self.conv.macs(batch, input)) + Cost::aux(n * (aux::NORM + aux::SILU))
    }
}

pub fn se_bottleneck(channels: usize) -> usize {
    (channels / 8).max(4)
}

/// Squeeze-and-excitation: `x * sigmoid(W2 silu(W1 gap(x)))`, bias-free.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub name: String,
    pub channels: usize,
    pub bottleneck: usize,
    fc1: Linear,
    fc2: Linear,
}

impl SeBlock {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let b = se_bottleneck(channels);
        Self {
            fc1: Linear::new(format!("{name}.fc1"), channels, b, false),
            fc2: Linear::new(format!("{name}.fc2"), b, channels, false),
            name,
            channels,
            bottleneck: b,
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        self.fc1.register(reg)?;
        self.fc2.register(reg)
    }

    pub fn params(&self) -> usize {
        self.fc1.params() + self.fc2.params()
    }

    /// Per-channel gates in `(0, 1)`, shaped `[B, C]`.
    pub fn gates<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [_, c, ..] = x.dims5()?;
        if c != self.channels {
            return Err(Error::shape(
                "se_refine",
                format!("`{}` expects {} channels, got {c}", self.name, self.channels),
            ));
        }
        let s = x.gap3d()?;
        let h = self.fc1.forward(cx, s)?.silu();
        Ok(self.fc2.forward(cx, h)?.sigmoid())
    }

    pub fn forward<'t, T: Real>(&self, cx: Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [b, c, ..] = x.dims5()?;
        let g = self.gates(cx, x)?.reshape(vec![b, c, 1, 1, 1])?;
        x.mul(g)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        self.fc1.macs(batch) + self.fc2.macs(batch)
    }

    /// Pooling, gating activations and the channel rescale count as auxiliary.
    pub fn cost(&self, batch: usize, ext: Extents) -> Cost {
        let n = batch * self.channels * voxels(ext);
        let gates = batch * (self.bottleneck * aux::SILU + self.channels * aux::SIGMOID);
        Cost::macs(self.macs(batch)) + Cost::aux(2 * n * aux::ELEMENTWISE + gates)
    }
}

/// Bias-free linear maps from the flattened anchor vector to one scale and one
/// shift per channel.
#[derive(Clone, Debug)]
pub struct FilmGenerator {
    pub name: String,
    pub channels: usize,
    pub anchors: usize,
}

impl FilmGenerator {
    pub fn new(name: impl Into<String>, channels: usize, anchors: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            anchors,
        }
    }

    pub fn register(&self, reg: &mut Registry) -> Result<()> {
        let shape = vec![self.channels, 3 * self.anchors];
        reg.add(format!("{}.gamma", self.name), shape.clone(), Init::Zeros)?;
        reg.add(format!("{}.beta", self.name), shape, Init::Zeros)
    }

    pub fn params(&self) -> usize {
        2 * self.channels * 3 * self.anchors
    }

    /// `anchors` is `[B, K, 3]`; flattening is anchor-major, axis-minor.
    /// Returns `(gamma, beta)`, each `[B, C]`.
    pub fn params_for<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        anchors: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = anchors.shape();
        let (&[b, k, 3], true) = (&shape[..], shape.get(1) == Some(&self.anchors)) else {
            return Err(Error::shape(
                "film_params",
                format!("`{}` expects [B, {}, 3] anchors, got {shape:?}", self.name, self.anchors),
            ));
        };
        let flat = anchors.reshape(vec![b, 3 * k])?;
        let wg = cx.param(&format!("{}.gamma", self.name))?;
        let wb = cx.param(&format!("{}.beta", self.name))?;
        Ok((flat.linear(wg, None)?, flat.linear(wb, None)?))
    }

    /// `(1 + gamma) * x + beta` with per-channel broadcast.
    pub fn modulate<'t, T: Real>(
        &self,
        cx: Ctx<'t, T>,
        x: Var<'t, T>,
        anchors: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let [b, c, ..] = x.dims5()?;
        let (g, beta) = self.params_for(cx, anchors)?;
        let scale = g.add_scalar(1.0).reshape(vec![b, c, 1, 1, 1])?;
        let shift = beta.reshape(vec![b, c, 1, 1, 1])?;
        x.mul(scale)?.add(shift)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (2 * batch * self.channels * 3 * self.anchors) as u64
    }

    pub fn cost(&self, batch: usize, ext: Extents) -> Cost {
        Cost::macs(self.macs(batch)) + Cost::aux(2 * batch * self.channels * voxels(ext))
    }
}
