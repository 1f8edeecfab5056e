//! Brute-force reference implementations used as test oracles.
//!
//! Every function here is written for clarity over speed and shares no code
//! with the library kernels.

#![allow(dead_code)]

use lms_core::loss::LabelVolume;
use lms_core::phantom::Ellipsoid;
use lms_core::{Real, Tensor};
use rand::Rng;

pub mod cases;

pub fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

pub fn random<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-1.0..1.0)))
}

/// Largest `|a - b| / max(1, |b|)` over paired entries.
pub fn max_scaled_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn idx5(s: &[usize], b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
    (((b * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w
}

/// Cross-correlation with zero padding; weights `[Cout, Cin/groups, k, k, k]`.
pub fn conv3d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    let cout_g = cout / groups;
    let od = |n: usize| (n + 2 * pad - k) / stride + 1;
    let os = vec![xs[0], cout, od(xs[2]), od(xs[3]), od(xs[4])];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..os[0] {
        for co in 0..cout {
            let g = co / cout_g;
            for z in 0..os[2] {
                for y in 0..os[3] {
                    for xx in 0..os[4] {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..cin_g {
                            let c = g * cin_g + ci;
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= xs[2] as isize
                                            || iy >= xs[3] as isize
                                            || ix >= xs[4] as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[idx5(xs, b, c, iz as usize, iy as usize, ix as usize)];
                                        let wv = w[idx5(ws, co, ci, kz, ky, kx)];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[idx5(&os, b, co, z, y, xx)] = acc;
                    }
                }
            }
        }
    }
    (out, os)
}

/// Scatter form of the transposed convolution; weights `[Cin, Cout, k, k, k]`.
pub fn conv_transpose3d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (cin, cout, k) = (ws[0], ws[1], ws[2]);
    let od = |n: usize| (n - 1) * stride + k;
    let os = vec![xs[0], cout, od(xs[2]), od(xs[3]), od(xs[4])];
    let mut out = vec![0.0; os.iter().product()];
    for b in 0..xs[0] {
        for co in 0..cout {
            let bv = bias.map_or(0.0, |b| b[co]);
            for z in 0..os[2] {
                for y in 0..os[3] {
                    for xx in 0..os[4] {
                        out[idx5(&os, b, co, z, y, xx)] = bv;
                    }
                }
            }
        }
        for ci in 0..cin {
            for z in 0..xs[2] {
                for y in 0..xs[3] {
                    for xx in 0..xs[4] {
                        let v = x[idx5(xs, b, ci, z, y, xx)];
                        for co in 0..cout {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let o = idx5(&os, b, co, z * stride + kz, y * stride + ky, xx * stride + kx);
                                        out[o] += v * w[idx5(ws, ci, co, kz, ky, kx)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, os)
}

/// 2x2x2 stride-2 max pool; ties resolve to the first element in scan order.
pub fn maxpool3d(x: &[f64], xs: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let os = vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2, xs[4] / 2];
    let mut out = Vec::with_capacity(os.iter().product());
    for b in 0..os[0] {
        for c in 0..os[1] {
            for z in 0..os[2] {
                for y in 0..os[3] {
                    for xx in 0..os[4] {
                        let mut best = f64::NEG_INFINITY;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let v = x[idx5(xs, b, c, 2 * z + dz, 2 * y + dy, 2 * xx + dx)];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                        }
                        out.push(best);
                    }
                }
            }
        }
    }
    (out, os)
}

/// Two-pass group normalization with per-channel affine parameters.
pub fn group_norm(x: &[f64], xs: &[usize], groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let cg = xs[1] / groups;
    let vol: usize = xs[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    for b in 0..xs[0] {
        for g in 0..groups {
            let members: Vec<usize> = (g * cg..(g + 1) * cg)
                .flat_map(|c| (0..vol).map(move |v| (b * xs[1] + c) * vol + v))
                .collect();
            let n = members.len() as f64;
            let mean = members.iter().map(|&i| x[i]).sum::<f64>() / n;
            let var = members.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
            for &i in &members {
                let c = (i / vol) % xs[1];
                out[i] = (x[i] - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
            }
        }
    }
    out
}

/// Trilinear resampling, half-pixel centres, clamped at the border, written as
/// an explicit weighted sum over the eight surrounding corners.
pub fn trilinear(x: &[f64], xs: &[usize], target: [usize; 3]) -> Vec<f64> {
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0).min((src - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(src - 1), c - lo as f64)
    };
    let mut out = Vec::new();
    for b in 0..xs[0] {
        for c in 0..xs[1] {
            for z in 0..target[0] {
                for y in 0..target[1] {
                    for xx in 0..target[2] {
                        let az = coord(z, xs[2], target[0]);
                        let ay = coord(y, xs[3], target[1]);
                        let ax = coord(xx, xs[4], target[2]);
                        let mut acc = 0.0;
                        for cz in 0..2 {
                            for cy in 0..2 {
                                for cx in 0..2 {
                                    let (iz, wz) = if cz == 0 { (az.0, 1.0 - az.2) } else { (az.1, az.2) };
                                    let (iy, wy) = if cy == 0 { (ay.0, 1.0 - ay.2) } else { (ay.1, ay.2) };
                                    let (ix, wx) = if cx == 0 { (ax.0, 1.0 - ax.2) } else { (ax.1, ax.2) };
                                    acc += wz * wy * wx * x[idx5(xs, b, c, iz, iy, ix)];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Anchor offset maps evaluated voxel by voxel:
/// `(d/D - s_d) + (h/H - s_h) + (w/W - s_w)`.
pub fn position_maps(anchors: &[f64], b: usize, k: usize, ext: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = ext;
    let mut out = Vec::with_capacity(b * k * d * h * w);
    for bi in 0..b {
        for ki in 0..k {
            let s = &anchors[(bi * k + ki) * 3..][..3];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        out.push((z as f64 / d as f64 - s[0]) + (y as f64 / h as f64 - s[1]) + (x as f64 / w as f64 - s[2]));
                    }
                }
            }
        }
    }
    out
}

/// Softmax over the channel axis of a `[B, C, ...]` tensor.
pub fn softmax_channels(x: &[f64], xs: &[usize]) -> Vec<f64> {
    let vol: usize = xs[2..].iter().product();
    let c = xs[1];
    let mut out = vec![0.0; x.len()];
    for b in 0..xs[0] {
        for v in 0..vol {
            let at = |k: usize| (b * c + k) * vol + v;
            let m = (0..c).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (x[at(k)] - m).exp()).sum();
            for k in 0..c {
                out[at(k)] = (x[at(k)] - m).exp() / z;
            }
        }
    }
    out
}

fn voxel(labels: &LabelVolume, b: usize, z: isize, y: isize, x: isize) -> Option<u32> {
    let [_, d, h, w] = labels.dims();
    if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
        return None;
    }
    Some(labels.data()[((b * d + z as usize) * h + y as usize) * w + x as usize])
}

/// Voxels with a 26-neighbour of a different class.
pub fn raw_boundary(labels: &LabelVolume) -> Vec<bool> {
    let [bs, d, h, w] = labels.dims();
    let mut out = Vec::with_capacity(labels.data().len());
    for b in 0..bs {
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let me = voxel(labels, b, z, y, x).unwrap();
                    let mut hit = false;
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                if let Some(v) = voxel(labels, b, z + dz, y + dy, x + dx) {
                                    hit |= v != me;
                                }
                            }
                        }
                    }
                    out.push(hit);
                }
            }
        }
    }
    out
}

/// Voxels within Chebyshev distance `radius` of a raw-boundary voxel, by
/// exhaustive pairwise search.
pub fn chebyshev_mask(labels: &LabelVolume, radius: usize) -> Vec<bool> {
    let [bs, d, h, w] = labels.dims();
    let raw = raw_boundary(labels);
    let vol = d * h * w;
    let coords = |i: usize| [(i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize];
    let mut out = vec![false; raw.len()];
    for b in 0..bs {
        let seeds: Vec<[isize; 3]> = (0..vol).filter(|&i| raw[b * vol + i]).map(coords).collect();
        for i in 0..vol {
            let p = coords(i);
            out[b * vol + i] = seeds.iter().any(|s| (0..3).map(|a| (s[a] - p[a]).abs()).max().unwrap() <= radius as isize);
        }
    }
    out
}

/// Label of every voxel by scanning the primitives in order (last wins).
pub fn ellipsoid_labels(extents: [usize; 3], primitives: &[Ellipsoid]) -> Vec<u32> {
    let mut out = Vec::with_capacity(extents.iter().product());
    for z in 0..extents[0] {
        for y in 0..extents[1] {
            for x in 0..extents[2] {
                let p = [z as f64, y as f64, x as f64];
                let mut label = 0;
                for e in primitives {
                    let r: f64 = (0..3).map(|a| ((p[a] - e.center[a]) / e.radii[a]).powi(2)).sum();
                    if r <= 1.0 {
                        label = e.class;
                    }
                }
                out.push(label);
            }
        }
    }
    out
}

pub fn random_labels(dims: [usize; 4], classes: usize, rng: &mut impl Rng) -> LabelVolume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0..classes as u32)).collect();
    LabelVolume::new(dims, data, classes).unwrap()
}
