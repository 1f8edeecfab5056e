//! Trilinear resampling with half-pixel centres (`align_corners = false`).
//!
//! Source coordinate for output index `i` is `(i + 0.5) * n / n' - 0.5`,
//! clamped to `[0, n - 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn axis_taps<T: Real>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: T::of(c - lo as f64),
            }
        })
        .collect()
}

fn check<T: Real>(x: &Tensor<T>, target: [usize; 3]) -> Result<[usize; 5]> {
    let dims = x.dims5()?;
    if target.iter().any(|&t| t == 0) || dims[2..].iter().any(|&n| n == 0) {
        return Err(Error::shape(
            "trilinear_resample",
            format!("extents must be positive, got {:?} -> {:?}", &dims[2..], target),
        ));
    }
    Ok(dims)
}

pub fn trilinear_resample<T: Real>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = check(x, target)?;
    if [d, h, w] == target {
        return Ok(x.clone());
    }
    let [td, th, tw] = target;
    let (ad, ah, aw) = (axis_taps::<T>(d, td), axis_taps::<T>(h, th), axis_taps::<T>(w, tw));
    let (vin, vout) = (d * h * w, td * th * tw);
    let xd = x.data();
    let one = T::one();
    let mut out = Vec::with_capacity(b * c * vout);
    for p in 0..b * c {
        let src = &xd[p * vin..][..vin];
        let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
        for tz in &ad {
            for ty in &ah {
                for tx in &aw {
                    let (fz, fy, fx) = (tz.frac, ty.frac, tx.frac);
                    let c00 = at(tz.lo, ty.lo, tx.lo) * (one - fx) + at(tz.lo, ty.lo, tx.hi) * fx;
                    let c01 = at(tz.lo, ty.hi, tx.lo) * (one - fx) + at(tz.lo, ty.hi, tx.hi) * fx;
                    let c10 = at(tz.hi, ty.lo, tx.lo) * (one - fx) + at(tz.hi, ty.lo, tx.hi) * fx;
                    let c11 = at(tz.hi, ty.hi, tx.lo) * (one - fx) + at(tz.hi, ty.hi, tx.hi) * fx;
                    let c0 = c00 * (one - fy) + c01 * fy;
                    let c1 = c10 * (one - fy) + c11 * fy;
                    out.push(c0 * (one - fz) + c1 * fz);
                }
            }
        }
    }
    Tensor::new(vec![b, c, td, th, tw], out)
}

pub fn trilinear_resample_backward<T: Real>(
    input_shape: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [_, _, d, h, w] = [
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    ];
    let [_, _, td, th, tw] = gy.dims5()?;
    if [d, h, w] == [td, th, tw] {
        return Ok(gy.clone());
    }
    let (ad, ah, aw) = (axis_taps::<T>(d, td), axis_taps::<T>(h, th), axis_taps::<T>(w, tw));
    let (vin, vout) = (d * h * w, td * th * tw);
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let gxd = gx.data_mut();
    let one = T::one();
    for (p, gp) in gy.data().chunks(vout).enumerate() {
        let dst = &mut gxd[p * vin..][..vin];
        let mut it = gp.iter();
        for tz in &ad {
            for ty in &ah {
                for tx in &aw {
                    let g = *it.next().expect("gradient length");
                    for (z, wz) in [(tz.lo, one - tz.frac), (tz.hi, tz.frac)] {
                        for (y, wy) in [(ty.lo, one - ty.frac), (ty.hi, ty.frac)] {
                            for (x, wx) in [(tx.lo, one - tx.frac), (tx.hi, tx.frac)] {
                                let i = (z * h + y) * w + x;
                                dst[i] = dst[i] + g * wz * wy * wx;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}
