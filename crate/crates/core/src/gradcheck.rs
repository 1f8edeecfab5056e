//! Central finite-difference gradient checks in double precision.
//!
//! A checked function maps bound parameters and leaf inputs to a tensor of
//! any shape; non-scalar outputs are reduced to `Σ out ⊙ R` with a fixed
//! random `R`, so every output element contributes to the probed gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{concat, Ctx, Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{position_bias, DecoderStage};
use crate::encoder::EncoderStage;
use crate::error::Result;
use crate::kernels::conv::ConvGeom;
use crate::loss::{boundary_loss, boundary_mask, ce_loss, class_weights, dice_loss, total_loss, LabelVolume};
use crate::model::LightMedSeg;
use crate::params::{init_params, InitScheme, ParamStore, Registry};
use crate::phantom::{generate_phantoms, PhantomSpec};
use crate::priors::{AnchorDetector, Lspm, Stem};
use crate::router::SkipRouter;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    /// Entries probed per tensor; tensors at most this large are probed fully.
    pub probes: usize,
    /// Lower bound of the relative-error denominator; gradients below it are
    /// compared with absolute tolerance `tol * floor`.
    pub floor: f64,
    pub seed: u64,
}

impl FdOptions {
    pub fn new(tol: f64, seed: u64) -> Self {
        Self {
            step: 5e-5,
            tol,
            probes: 12,
            floor: 1e-6,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub label: String,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl FdReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.tensors.is_empty() && self.tensors.iter().all(|t| t.max_rel <= self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }

    pub fn summary(&self) -> String {
        let worst = self.worst().map(|t| t.name.as_str()).unwrap_or("-");
        format!(
            "{} {:<28} max rel {:.3e} (tol {:.0e}, {} tensors, worst {worst})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.label,
            self.max_rel(),
            self.tol,
            self.tensors.len()
        )
    }
}

fn weights_for(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn scalarize<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    if out.shape().is_empty() {
        return Ok(out);
    }
    let r = out.tape().constant(weights_for(&out.shape(), seed));
    Ok(out.mul(r)?.sum())
}

/// Checks `d f / d θ` for every parameter in `store` and every input.
pub fn check_gradients<F>(
    label: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: FdOptions,
    f: F,
) -> Result<FdReport>
where
    F: for<'t> Fn(Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(Ctx::new(&tape, store), &vars)?;
        Ok(scalarize(out, opts.seed)?.value().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = scalarize(f(Ctx::new(&tape, store), &vars)?, opts.seed)?;
    let grads = tape.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = vars.iter().map(|v| grads.of(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |n: usize| -> Vec<usize> {
        if n <= opts.probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.probes).into_vec()
        }
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
    let mut tensors = Vec::new();

    let mut work = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        if !store.get(&name).is_some_and(|p| p.trainable) {
            continue;
        }
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(store.value(&name).unwrap().shape()));
        let idx = pick(analytic.numel());
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &idx {
            let orig = work.value(&name)?.data()[i];
            work.data_mut(&name)?[i] = orig + opts.step;
            let fp = eval(&work, inputs)?;
            work.data_mut(&name)?[i] = orig - opts.step;
            let fm = eval(&work, inputs)?;
            work.data_mut(&name)?[i] = orig;
            let num = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i];
            max_rel = max_rel.max(rel(a, num));
            max_abs = max_abs.max((a - num).abs());
        }
        tensors.push(TensorCheck {
            name,
            probes: idx.len(),
            max_rel,
            max_abs,
        });
    }

    let mut work_inputs = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        let idx = pick(g.numel());
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &idx {
            let orig = work_inputs[k].data()[i];
            work_inputs[k].data_mut()[i] = orig + opts.step;
            let fp = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig - opts.step;
            let fm = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * opts.step);
            let a = g.data()[i];
            max_rel = max_rel.max(rel(a, num));
            max_abs = max_abs.max((a - num).abs());
        }
        tensors.push(TensorCheck {
            name: format!("input{k}"),
            probes: idx.len(),
            max_rel,
            max_abs,
        });
    }
    Ok(FdReport {
        label: label.to_string(),
        tol: opts.tol,
        tensors,
    })
}

/// Uniform `(-1, 1)` tensor from a seeded generator.
pub fn random_tensor(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_labels(dims: [usize; 4], classes: usize, rng: &mut impl Rng) -> LabelVolume {
    let n = dims.iter().product();
    let mut data: Vec<u32> = (0..n).map(|_| rng.gen_range(0..classes as u32)).collect();
    for (c, slot) in data.iter_mut().take(classes).enumerate() {
        *slot = c as u32;
    }
    LabelVolume::new(dims, data, classes).expect("labels in range")
}

/// Kernel-level checks with every operand as a differentiable input.
pub fn primitive_suite(o: FdOptions) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let empty = ParamStore::<f64>::default();
    let mut r = |shape: &[usize]| random_tensor(shape.to_vec(), &mut rng);
    let mut out = Vec::new();

    let conv_in = [r(&[2, 4, 5, 4, 6]), r(&[3, 4, 3, 3, 3]), r(&[3])];
    out.push(check_gradients("conv3d", &empty, &conv_in, o, |_, v| {
        v[0].conv3d(v[1], Some(v[2]), ConvGeom::new(2, 1, 1))
    })?);
    let dw_in = [r(&[1, 4, 5, 5, 5]), r(&[4, 1, 3, 3, 3]), r(&[4])];
    out.push(check_gradients("depthwise conv3d", &empty, &dw_in, o, |_, v| {
        v[0].conv3d(v[1], Some(v[2]), ConvGeom::same(3).with_groups(4))
    })?);
    let grp_in = [r(&[1, 4, 4, 4, 4]), r(&[6, 2, 3, 3, 3]), r(&[6])];
    out.push(check_gradients("grouped conv3d", &empty, &grp_in, o, |_, v| {
        v[0].conv3d(v[1], Some(v[2]), ConvGeom::new(1, 1, 2))
    })?);
    let ct_in = [r(&[2, 3, 2, 3, 2]), r(&[3, 2, 2, 2, 2]), r(&[2])];
    out.push(check_gradients("conv_transpose3d", &empty, &ct_in, o, |_, v| {
        v[0].conv_transpose3d(v[1], Some(v[2]), 2)
    })?);
    out.push(check_gradients("maxpool3d", &empty, &[r(&[1, 2, 4, 4, 6])], o, |_, v| v[0].maxpool3d())?);
    out.push(check_gradients("gap3d", &empty, &[r(&[2, 3, 3, 2, 4])], o, |_, v| v[0].gap3d())?);
    let gn_in = [r(&[2, 8, 3, 3, 2]), r(&[8]), r(&[8])];
    out.push(check_gradients("group_norm", &empty, &gn_in, o, |_, v| v[0].group_norm(4, v[1], v[2]))?);
    out.push(check_gradients("trilinear resample", &empty, &[r(&[1, 2, 3, 2, 5])], o, |_, v| {
        v[0].resample([5, 4, 3])
    })?);
    out.push(check_gradients("softmax", &empty, &[r(&[2, 4, 2, 3, 2])], o, |_, v| v[0].softmax_channels())?);
    out.push(check_gradients("silu/sigmoid/abs", &empty, &[r(&[1, 3, 2, 2, 3])], o, |_, v| {
        v[0].silu().add(v[0].sigmoid())?.add(v[0].abs())
    })?);
    let bc_in = [r(&[2, 3, 2, 2, 2]), r(&[2, 1, 2, 2, 2]), r(&[1, 3, 1, 1, 1])];
    out.push(check_gradients("broadcast arithmetic", &empty, &bc_in, o, |_, v| {
        v[0].mul(v[1])?.sub(v[2])?.add(v[1].rsub_scalar(2.0))?.mul_scalar(0.7).add_scalar(0.1).mean().add(v[0].sum())
    })?);
    let lin_in = [r(&[3, 5]), r(&[4, 5]), r(&[4])];
    out.push(check_gradients("linear", &empty, &lin_in, o, |_, v| v[0].linear(v[1], Some(v[2])))?);
    let cat_in = [r(&[1, 2, 2, 2, 2]), r(&[1, 3, 2, 2, 2])];
    out.push(check_gradients("concat/slice/reshape", &empty, &cat_in, o, |_, v| {
        concat(&[v[0], v[1]])?.slice_channels(1, 4)?.reshape(vec![1, 3, 8])
    })?);
    let anchors = Tensor::from_fn(vec![2, 3, 3], |_| rng.gen_range(0.0..1.0));
    out.push(check_gradients("position bias", &empty, &[anchors], o, |_, v| position_bias(v[0], [3, 4, 5]))?);
    Ok(out)
}

fn block_store(register: impl FnOnce(&mut Registry) -> Result<()>, seed: u64) -> Result<ParamStore<f64>> {
    let mut reg = Registry::default();
    register(&mut reg)?;
    init_params(&reg, InitScheme::Perturbed, seed)
}

/// Composite-block and loss checks.
pub fn block_suite(o: FdOptions) -> Result<Vec<FdReport>> {
    let cfg = ModelConfig::toy();
    let seed = o.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = Vec::new();

    let stem = Stem::new(&cfg)?;
    let store = block_store(|r| stem.register(r), seed)?;
    let x = random_tensor(vec![1, 1, 8, 8, 8], &mut rng);
    out.push(check_gradients("stem", &store, &[x], o, |cx, v| stem.forward(cx, v[0]))?);

    // 16^3 keeps the last detector stage at 2^3, so its norm groups hold
    // more than two values and gradients stay well above rounding noise.
    let det = AnchorDetector::new(&cfg)?;
    let store = block_store(|r| det.register(r), seed)?;
    let x = random_tensor(vec![1, 1, 16, 16, 16], &mut rng);
    out.push(check_gradients("anchor detector", &store, &[x], o, |cx, v| det.forward(cx, v[0]))?);

    let lspm = Lspm::new(&cfg)?;
    let store = block_store(|r| lspm.register(r), seed)?;
    let f0 = random_tensor(vec![1, 8, 4, 4, 4], &mut rng);
    out.push(check_gradients("lspm", &store, &[f0], o, |cx, v| {
        let o = lspm.forward(cx, v[0])?;
        concat(&[o.mixed, o.texture, o.gate])
    })?);

    let stage = EncoderStage::new(&cfg, 2)?;
    let store = block_store(|r| stage.register(r), seed)?;
    let ins = [
        random_tensor(vec![1, 8, 4, 4, 4], &mut rng),
        Tensor::from_fn(vec![1, 8, 3], |_| rng.gen_range(0.0..1.0)),
        Tensor::from_fn(vec![1, 1, 8, 8, 8], |_| rng.gen_range(0.0..1.0)),
    ];
    out.push(check_gradients("encoder stage", &store, &ins, o, |cx, v| {
        let (e, pooled) = stage.forward(cx, v[0], Some(v[1]), v[2])?;
        Ok(e.sum().add(pooled.mul_scalar(0.5).sum())?.add(e.mul(e)?.mean())?)
    })?);

    let router = SkipRouter::new(&cfg);
    let store = block_store(|r| router.register(r), seed)?;
    let skips = [
        random_tensor(vec![1, 8, 8, 8, 8], &mut rng),
        random_tensor(vec![1, 16, 4, 4, 4], &mut rng),
        random_tensor(vec![1, 32, 2, 2, 2], &mut rng),
        random_tensor(vec![1, 64, 1, 1, 1], &mut rng),
    ];
    out.push(check_gradients("skip router", &store, &skips, o, |cx, v| {
        let aligned = router.align(cx, v)?;
        router.route(cx, &aligned, [2, 2, 2]).map(|r| r.fused)
    })?);

    let dec = DecoderStage::new(&cfg, 2)?;
    let store = block_store(|r| dec.register(r), seed)?;
    let ins = [
        random_tensor(vec![1, 64, 1, 2, 2], &mut rng),
        random_tensor(vec![1, 64, 2, 4, 4], &mut rng),
        Tensor::from_fn(vec![1, 8, 3], |_| rng.gen_range(0.0..1.0)),
    ];
    out.push(check_gradients("decoder stage", &store, &ins, o, |cx, v| {
        dec.forward(cx, v[0], v[1], Some(v[2])).map(|s| s.out)
    })?);

    let empty = ParamStore::<f64>::default();
    let labels = random_labels([1, 2, 2, 2], 2, &mut rng);
    let logits = random_tensor(vec![1, 2, 2, 2, 2], &mut rng).map(|v| 2.0 * v);
    let w = class_weights(&labels);
    let mask = boundary_mask(&labels, 3);
    out.push(check_gradients("dice loss", &empty, &[logits.clone()], o, |_, v| dice_loss(v[0], &labels, &w))?);
    out.push(check_gradients("cross-entropy loss", &empty, &[logits.clone()], o, |_, v| ce_loss(v[0], &labels, &w))?);
    out.push(check_gradients("boundary loss", &empty, &[logits], o, |_, v| boundary_loss(v[0], &labels, &mask, &w))?);
    let labels3 = random_labels([2, 2, 3, 2], 3, &mut rng);
    let logits3 = random_tensor(vec![2, 3, 2, 3, 2], &mut rng).map(|v| 3.0 * v);
    out.push(check_gradients("total loss (3 classes)", &empty, &[logits3], o, |_, v| {
        total_loss(v[0], &labels3).map(|(l, _)| l)
    })?);
    Ok(out)
}

/// End-to-end check of the composite loss through the whole network.
///
/// `size` is rounded up to the nearest multiple of 16, the smallest extent
/// for which the four-level pyramid is integral.
pub fn model_check(size: usize, config: ModelConfig, o: FdOptions) -> Result<FdReport> {
    let seed = o.seed;
    let size = size.max(1).div_ceil(16) * 16;
    let model = LightMedSeg::new(config)?;
    let store = model.init_params::<f64>(InitScheme::Perturbed, seed)?;
    let mut spec = PhantomSpec::single(size, seed);
    spec.num_classes = model.config.num_classes;
    let ph = generate_phantoms(&spec, 1)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config.in_channels;
    let x = Tensor::from_fn(vec![1, c, size, size, size], |i| {
        ph.volume.data()[i % ph.volume.numel()] as f64 + 0.1 * rng.gen_range(-1.0..1.0)
    });
    let labels = ph.labels;
    check_gradients(&format!("full model {size}^3"), &store, &[], o, |cx, _| {
        let out = model.forward(cx, cx.constant(x.clone()))?;
        total_loss(out.logits, &labels).map(|(l, _)| l)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let empty = ParamStore::<f64>::default();
        let x = Tensor::from_fn(vec![1, 1, 1, 1, 4], |i| i as f64 * 0.3 + 0.1);
        let ok = check_gradients("square", &empty, &[x.clone()], FdOptions::new(1e-6, 0), |_, v| v[0].mul(v[0])).unwrap();
        assert!(ok.passed(), "{}", ok.summary());
        let bad = check_gradients("broken", &empty, &[x], FdOptions::new(1e-6, 0), |_, v| {
            let y = v[0].value().map(|a| a * a);
            Ok(v[0].tape().custom("broken", &[v[0]], y, 0, Box::new(|g, _| Ok(vec![Some(g.clone())]))))
        })
        .unwrap();
        assert!(!bad.passed());
    }
}
