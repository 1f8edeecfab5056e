//! Direct 3D convolution kernels (cross-correlation, zero padding) and the
//! stride-`k` transposed convolution used for upsampling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }

    /// Stride 1, no padding, single group.
    pub const fn pointwise() -> Self {
        Self::new(1, 0, 1)
    }

    /// Stride 1 with padding that preserves extents for an odd kernel.
    pub const fn same(k: usize) -> Self {
        Self::new(1, k / 2, 1)
    }

    pub const fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }
}

pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub k: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn macs(&self) -> u64 {
        (self.b * self.cout * self.out.iter().product::<usize>() * self.cin_g * self.k.pow(3)) as u64
    }

    fn vin(&self) -> usize {
        self.inp.iter().product()
    }

    fn vout(&self) -> usize {
        self.out.iter().product()
    }
}

pub(crate) fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<ConvDims> {
    const OP: &str = "conv3d";
    let [b, cin, d, h, wd] = x.dims5()?;
    let [cout, cin_g, k, k1, k2] = w.dims5().map_err(|_| {
        Error::shape(OP, format!("kernel must be rank 5, got {:?}", w.shape()))
    })?;
    if geom.stride < 1 || k < 1 {
        return Err(Error::arg(OP, "stride and kernel size must be at least 1"));
    }
    if k != k1 || k != k2 {
        return Err(Error::shape(OP, format!("kernel must be cubic, got {:?}", w.shape())));
    }
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(Error::shape(
            OP,
            format!(
                "channels in={cin} out={cout} not divisible by groups={}",
                geom.groups
            ),
        ));
    }
    if cin / geom.groups != cin_g {
        return Err(Error::shape(
            OP,
            format!(
                "input has {cin} channels, kernel expects {} per group x {} groups",
                cin_g, geom.groups
            ),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias shape {:?}, expected [{cout}]", bias.shape()),
            ));
        }
    }
    let mut out = [0; 3];
    for (o, n) in out.iter_mut().zip([d, h, wd]) {
        *o = conv_out_len(n, k, geom.stride, geom.pad).ok_or_else(|| {
            Error::shape(
                OP,
                format!("extent {n} with pad {} too small for kernel {k}", geom.pad),
            )
        })?;
    }
    Ok(ConvDims {
        b,
        cin,
        cout,
        cin_g,
        cout_g: cout / geom.groups,
        k,
        inp: [d, h, wd],
        out,
        geom,
    })
}

/// Output positions `o` in `[0, out)` whose tap `o * stride + off - pad` lands
/// inside `[0, len)`.
#[inline]
fn tap_range(out: usize, len: usize, off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let dm = conv_dims(x, w, bias, geom)?;
    Ok(conv3d_unchecked(x, w, bias, &dm))
}

pub(crate) fn conv3d_unchecked<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dm: &ConvDims,
) -> Tensor<T> {
    let ConvDims {
        b,
        cin,
        cout,
        cin_g,
        cout_g,
        k,
        inp: [_, ih_n, iw_n],
        out: [od_n, oh_n, ow_n],
        geom: ConvGeom { stride: s, pad: p, .. },
        ..
    } = *dm;
    let (vin, vout, k3) = (dm.vin(), dm.vout(), k * k * k);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); b * cout * vout];
    out.par_chunks_mut(vout.max(1))
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            if let Some(bias) = bias {
                plane.fill(bias.data()[co]);
            }
            let g = co / cout_g;
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                let xin = &xd[(bi * cin + ci) * vin..][..vin];
                let wbase = (co * cin_g + cil) * k3;
                for kd in 0..k {
                    let (d0, d1) = tap_range(od_n, dm.inp[0], kd, s, p);
                    for kh in 0..k {
                        let (h0, h1) = tap_range(oh_n, ih_n, kh, s, p);
                        for kw in 0..k {
                            let (w0, w1) = tap_range(ow_n, iw_n, kw, s, p);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = wd[wbase + (kd * k + kh) * k + kw];
                            for od in d0..d1 {
                                let id = od * s + kd - p;
                                for oh in h0..h1 {
                                    let ih = oh * s + kh - p;
                                    let orow = &mut plane[(od * oh_n + oh) * ow_n..][w0..w1];
                                    let xrow = &xin[(id * ih_n + ih) * iw_n..][..iw_n];
                                    if s == 1 {
                                        axpy(orow, wv, &xrow[w0 + kw - p..]);
                                    } else {
                                        for (j, o) in orow.iter_mut().enumerate() {
                                            *o = *o + wv * xrow[(w0 + j) * s + kw - p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![b, cout, od_n, oh_n, ow_n], out).expect("conv3d output shape")
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    geom: ConvGeom,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let dm = conv_dims(x, w, None, geom)?;
    if gy.shape() != [dm.b, dm.cout, dm.out[0], dm.out[1], dm.out[2]] {
        return Err(Error::shape(
            "conv3d_backward",
            format!("output gradient shape {:?}", gy.shape()),
        ));
    }
    Ok(ConvGrads {
        input: need[0].then(|| conv3d_grad_input(w, gy, &dm)),
        weight: need[1].then(|| conv3d_grad_weight(x, gy, &dm)),
        bias: need[2].then(|| channel_sums(gy, dm.b, dm.cout)),
    })
}

pub(crate) fn channel_sums<T: Real>(gy: &Tensor<T>, b: usize, c: usize) -> Tensor<T> {
    let plane = gy.numel() / (b * c).max(1);
    let gd = gy.data();
    Tensor::from_fn(vec![c], |co| {
        (0..b).fold(T::zero(), |acc, bi| {
            acc + gd[(bi * c + co) * plane..][..plane]
                .iter()
                .fold(T::zero(), |a, &v| a + v)
        })
    })
}

fn conv3d_grad_input<T: Real>(w: &Tensor<T>, gy: &Tensor<T>, dm: &ConvDims) -> Tensor<T> {
    let ConvDims {
        b,
        cin,
        cout,
        cin_g,
        cout_g,
        k,
        inp: [id_n, ih_n, iw_n],
        out: [od_n, oh_n, ow_n],
        geom: ConvGeom { stride: s, pad: p, .. },
    } = *dm;
    let (vin, vout, k3) = (dm.vin(), dm.vout(), k * k * k);
    let (gd, wd) = (gy.data(), w.data());
    let mut gx = vec![T::zero(); b * cin * vin];
    gx.par_chunks_mut(vin.max(1))
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, ci) = (idx / cin, idx % cin);
            let g = ci / cin_g;
            let cil = ci - g * cin_g;
            for co in g * cout_g..(g + 1) * cout_g {
                let gyp = &gd[(bi * cout + co) * vout..][..vout];
                let wbase = (co * cin_g + cil) * k3;
                for kd in 0..k {
                    let (d0, d1) = tap_range(od_n, id_n, kd, s, p);
                    for kh in 0..k {
                        let (h0, h1) = tap_range(oh_n, ih_n, kh, s, p);
                        for kw in 0..k {
                            let (w0, w1) = tap_range(ow_n, iw_n, kw, s, p);
                            if w0 >= w1 {
                                continue;
                            }
                            let wv = wd[wbase + (kd * k + kh) * k + kw];
                            for od in d0..d1 {
                                let id = od * s + kd - p;
                                for oh in h0..h1 {
                                    let ih = oh * s + kh - p;
                                    let grow = &gyp[(od * oh_n + oh) * ow_n..][w0..w1];
                                    let xrow = &mut plane[(id * ih_n + ih) * iw_n..][..iw_n];
                                    if s == 1 {
                                        axpy(&mut xrow[w0 + kw - p..], wv, grow);
                                    } else {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            let iw = (w0 + j) * s + kw - p;
                                            xrow[iw] = xrow[iw] + wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![b, cin, id_n, ih_n, iw_n], gx).expect("conv3d grad shape")
}

fn conv3d_grad_weight<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, dm: &ConvDims) -> Tensor<T> {
    let ConvDims {
        b,
        cin,
        cout,
        cin_g,
        cout_g,
        k,
        inp: [id_n, ih_n, iw_n],
        out: [od_n, oh_n, ow_n],
        geom: ConvGeom { stride: s, pad: p, .. },
    } = *dm;
    let (vin, vout, k3) = (dm.vin(), dm.vout(), k * k * k);
    let (gd, xd) = (gy.data(), x.data());
    let mut gw = vec![T::zero(); cout * cin_g * k3];
    gw.par_chunks_mut((cin_g * k3).max(1))
        .enumerate()
        .for_each(|(co, wchunk)| {
            let g = co / cout_g;
            for cil in 0..cin_g {
                let ci = g * cin_g + cil;
                for kd in 0..k {
                    let (d0, d1) = tap_range(od_n, id_n, kd, s, p);
                    for kh in 0..k {
                        let (h0, h1) = tap_range(oh_n, ih_n, kh, s, p);
                        for kw in 0..k {
                            let (w0, w1) = tap_range(ow_n, iw_n, kw, s, p);
                            let mut acc = T::zero();
                            if w0 < w1 {
                                for bi in 0..b {
                                    let gyp = &gd[(bi * cout + co) * vout..][..vout];
                                    let xin = &xd[(bi * cin + ci) * vin..][..vin];
                                    for od in d0..d1 {
                                        let id = od * s + kd - p;
                                        for oh in h0..h1 {
                                            let ih = oh * s + kh - p;
                                            let grow = &gyp[(od * oh_n + oh) * ow_n..][w0..w1];
                                            let xrow = &xin[(id * ih_n + ih) * iw_n..][..iw_n];
                                            if s == 1 {
                                                acc = acc + dot(grow, &xrow[w0 + kw - p..]);
                                            } else {
                                                for (j, &gv) in grow.iter().enumerate() {
                                                    acc = acc + gv * xrow[(w0 + j) * s + kw - p];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                            wchunk[cil * k3 + (kd * k + kh) * k + kw] = acc;
                        }
                    }
                }
            }
        });
    Tensor::new(vec![cout, cin_g, k, k, k], gw).expect("conv3d kernel grad shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTDims {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvTDims {
    /// Every input voxel scatters `k^3` taps into each output channel.
    pub fn macs(&self) -> u64 {
        (self.b * self.cin * self.cout * self.k.pow(3) * self.inp.iter().product::<usize>()) as u64
    }
}

pub(crate) fn conv_transpose_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<ConvTDims> {
    const OP: &str = "convtranspose3d";
    let [b, cin, d, h, wd] = x.dims5()?;
    let [wcin, cout, k, k1, k2] = w.dims5()?;
    if stride < 1 || k < 1 {
        return Err(Error::arg(OP, "stride and kernel size must be at least 1"));
    }
    if k != k1 || k != k2 {
        return Err(Error::shape(OP, format!("kernel must be cubic, got {:?}", w.shape())));
    }
    if wcin != cin {
        return Err(Error::shape(
            OP,
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    if d == 0 || h == 0 || wd == 0 {
        return Err(Error::arg(OP, "input extents must be positive"));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(OP, format!("bias shape {:?}", bias.shape())));
        }
    }
    let up = |n: usize| (n - 1) * stride + k;
    Ok(ConvTDims {
        b,
        cin,
        cout,
        k,
        stride,
        inp: [d, h, wd],
        out: [up(d), up(h), up(wd)],
    })
}

/// Transposed convolution with kernel `[Cin, Cout, k, k, k]`, no padding.
/// Output extents are `(n - 1) * stride + k`; for `k == stride == 2` that is
/// exactly `2n`.
pub fn conv_transpose3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let dm = conv_transpose_dims(x, w, bias, stride)?;
    Ok(conv_transpose3d_unchecked(x, w, bias, &dm))
}

pub(crate) fn conv_transpose3d_unchecked<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    dm: &ConvTDims,
) -> Tensor<T> {
    let ConvTDims {
        b,
        cin,
        cout,
        k,
        stride: s,
        inp: [id_n, ih_n, iw_n],
        out: [od_n, oh_n, ow_n],
    } = *dm;
    let vin = id_n * ih_n * iw_n;
    let vout = od_n * oh_n * ow_n;
    let k3 = k * k * k;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); b * cout * vout];
    out.par_chunks_mut(vout)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            if let Some(bias) = bias {
                plane.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let xin = &xd[(bi * cin + ci) * vin..][..vin];
                let wbase = (ci * cout + co) * k3;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wd[wbase + (kd * k + kh) * k + kw];
                            for id in 0..id_n {
                                let od = id * s + kd;
                                for ih in 0..ih_n {
                                    let oh = ih * s + kh;
                                    let xrow = &xin[(id * ih_n + ih) * iw_n..][..iw_n];
                                    let orow = &mut plane[(od * oh_n + oh) * ow_n..][..ow_n];
                                    for (iw, &xv) in xrow.iter().enumerate() {
                                        let o = &mut orow[iw * s + kw];
                                        *o = *o + wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![b, cout, od_n, oh_n, ow_n], out).expect("convtranspose3d output shape")
}

pub fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let dm = conv_transpose_dims(x, w, None, stride)?;
    let ConvTDims {
        b,
        cin,
        cout,
        k,
        stride: s,
        inp: [id_n, ih_n, iw_n],
        out: [od_n, oh_n, ow_n],
    } = dm;
    if gy.shape() != [b, cout, od_n, oh_n, ow_n] {
        return Err(Error::shape(
            "convtranspose3d_backward",
            format!("output gradient shape {:?}", gy.shape()),
        ));
    }
    let vin = id_n * ih_n * iw_n;
    let vout = od_n * oh_n * ow_n;
    let k3 = k * k * k;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());

    let input = need[0].then(|| {
        let mut gx = vec![T::zero(); b * cin * vin];
        gx.par_chunks_mut(vin).enumerate().for_each(|(idx, plane)| {
            let (bi, ci) = (idx / cin, idx % cin);
            for co in 0..cout {
                let gyp = &gd[(bi * cout + co) * vout..][..vout];
                let wbase = (ci * cout + co) * k3;
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wd[wbase + (kd * k + kh) * k + kw];
                            for id in 0..id_n {
                                let od = id * s + kd;
                                for ih in 0..ih_n {
                                    let oh = ih * s + kh;
                                    let grow = &gyp[(od * oh_n + oh) * ow_n..][..ow_n];
                                    let xrow = &mut plane[(id * ih_n + ih) * iw_n..][..iw_n];
                                    for (iw, xv) in xrow.iter_mut().enumerate() {
                                        *xv = *xv + wv * grow[iw * s + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Tensor::new(vec![b, cin, id_n, ih_n, iw_n], gx).expect("grad shape")
    });

    let weight = need[1].then(|| {
        let mut gw = vec![T::zero(); cin * cout * k3];
        gw.par_chunks_mut(k3).enumerate().for_each(|(idx, wchunk)| {
            let (ci, co) = (idx / cout, idx % cout);
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let mut acc = T::zero();
                        for bi in 0..b {
                            let xin = &xd[(bi * cin + ci) * vin..][..vin];
                            let gyp = &gd[(bi * cout + co) * vout..][..vout];
                            for id in 0..id_n {
                                let od = id * s + kd;
                                for ih in 0..ih_n {
                                    let oh = ih * s + kh;
                                    let xrow = &xin[(id * ih_n + ih) * iw_n..][..iw_n];
                                    let grow = &gyp[(od * oh_n + oh) * ow_n..][..ow_n];
                                    for (iw, &xv) in xrow.iter().enumerate() {
                                        acc = acc + xv * grow[iw * s + kw];
                                    }
                                }
                            }
                        }
                        wchunk[(kd * k + kh) * k + kw] = acc;
                    }
                }
            }
        });
        Tensor::new(vec![cin, cout, k, k, k], gw).expect("grad shape")
    });

    Ok(ConvGrads {
        input,
        weight,
        bias: need[2].then(|| channel_sums(gy, b, cout)),
    })
}
