//! Randomized kernel-vs-oracle cases; each returns the worst scaled error.

use super::*;
use lms_core::kernels::{conv3d, conv_transpose3d, group_norm, maxpool3d, trilinear_resample, ConvGeom, GN_EPS};
use lms_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 120;
pub const TOL_F32: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-10;

/// Worst error over [`CASES`] shapes drawn from a fixed seed.
pub fn sweep(mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..CASES).map(|_| case(&mut rng)).fold(0.0, f64::max)
}

pub fn conv_case<T: Real>(rng: &mut ChaCha8Rng, depthwise: bool) -> f64 {
    let groups = if depthwise { rng.gen_range(1..=4) } else { *[1, 1, 2].get(rng.gen_range(0..3)).unwrap() };
    let k = [1, 2, 3][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2 + usize::from(k == 2));
    let cin = if depthwise { groups } else { groups * rng.gen_range(1..=3) };
    let cout = if depthwise { groups } else { groups * rng.gen_range(1..=3) };
    let ext: Vec<usize> = (0..3).map(|_| rng.gen_range(k.max(1)..=6)).collect();
    let xs = [rng.gen_range(1..=2), cin, ext[0], ext[1], ext[2]];
    let ws = [cout, cin / groups, k, k, k];
    let x = random::<T>(&xs, rng);
    let w = random::<T>(&ws, rng);
    let b = random::<T>(&[cout], rng);
    let got = conv3d(&x, &w, Some(&b), ConvGeom::new(stride, pad, groups)).unwrap();
    let (want, os) = super::conv3d(&to_f64(&x), &xs, &to_f64(&w), &ws, Some(&to_f64(&b)), stride, pad, groups);
    assert_eq!(got.shape(), &os[..]);
    max_scaled_err(&to_f64(&got), &want)
}

pub fn conv_t_case<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=k.max(2));
    let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let xs = [rng.gen_range(1..=2), cin, rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let ws = [cin, cout, k, k, k];
    let x = random::<T>(&xs, rng);
    let w = random::<T>(&ws, rng);
    let b = random::<T>(&[cout], rng);
    let got = conv_transpose3d(&x, &w, Some(&b), stride).unwrap();
    let (want, os) = super::conv_transpose3d(&to_f64(&x), &xs, &to_f64(&w), &ws, Some(&to_f64(&b)), stride);
    assert_eq!(got.shape(), &os[..]);
    max_scaled_err(&to_f64(&got), &want)
}

pub fn pool_case<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [rng.gen_range(1..=2), rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3)];
    // Coarse values make ties common so the first-wins rule is exercised.
    let x = Tensor::<T>::from_fn(xs.to_vec(), |_| T::of(rng.gen_range(0..4) as f64 * 0.5));
    let (got, idx) = maxpool3d(&x).unwrap();
    let (want, os) = super::maxpool3d(&to_f64(&x), &xs);
    assert_eq!(got.shape(), &os[..]);
    let data = x.data();
    for (o, &i) in idx.iter().enumerate() {
        assert_eq!(data[i].f64(), want[o]);
    }
    max_scaled_err(&to_f64(&got), &want)
}

pub fn gn_case<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let groups = rng.gen_range(1..=4);
    let c = groups * rng.gen_range(1..=3);
    let xs = [rng.gen_range(1..=2), c, rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let x = random::<T>(&xs, rng).map(|v| v * T::of(3.0) + T::of(0.5));
    let gamma = random::<T>(&[c], rng);
    let beta = random::<T>(&[c], rng);
    let (got, _) = group_norm(&x, groups, &gamma, &beta, GN_EPS).unwrap();
    let want = super::group_norm(&to_f64(&x), &xs, groups, &to_f64(&gamma), &to_f64(&beta), GN_EPS);
    max_scaled_err(&to_f64(&got), &want)
}

pub fn trilinear_case<T: Real>(rng: &mut ChaCha8Rng) -> f64 {
    let xs = [1, rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5)];
    let target = [rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8)];
    let x = random::<T>(&xs, rng);
    let got = trilinear_resample(&x, target).unwrap();
    let want = super::trilinear(&to_f64(&x), &xs, target);
    assert_eq!(&got.shape()[2..], &target[..]);
    max_scaled_err(&to_f64(&got), &want)
}

