//! Elementwise maps, broadcasting arithmetic, channel softmax, dense layers
//! and channel concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Output shape of equal-rank numpy-style broadcasting.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "broadcast",
            format!("rank mismatch {a:?} vs {b:?}"),
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(
                "broadcast",
                format!("incompatible shapes {a:?} vs {b:?}"),
            )),
        })
        .collect()
}

/// For each output element, the linear index into an input of `shape`
/// broadcast to `out`.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

pub fn binary<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let (ia, ib) = (broadcast_index(a.shape(), &out), broadcast_index(b.shape(), &out));
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(out, data)
}

/// Sum `g` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let idx = broadcast_index(shape, g.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    let od = out.data_mut();
    for (&i, &v) in idx.iter().zip(g.data()) {
        od[i] = od[i] + v;
    }
    out
}

/// Softmax over axis 1 of a rank >= 2 tensor, max-shifted.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("softmax", "need a channel axis"));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let v: usize = x.shape()[2..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        let base = bi * c * v;
        for r in 0..v {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xd[base + ch * v + r]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * v + r] - m).exp();
                out[base + ch * v + r] = e;
                s = s + e;
            }
            for ch in 0..c {
                out[base + ch * v + r] = out[base + ch * v + r] / s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Real>(p: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (p.shape()[0], p.shape()[1]);
    let v: usize = p.shape()[2..].iter().product();
    let (pd, gd) = (p.data(), gy.data());
    let mut gx = vec![T::zero(); pd.len()];
    for bi in 0..b {
        let base = bi * c * v;
        for r in 0..v {
            let mut dot = T::zero();
            for ch in 0..c {
                dot = dot + pd[base + ch * v + r] * gd[base + ch * v + r];
            }
            for ch in 0..c {
                let i = base + ch * v + r;
                gx[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(p.shape().to_vec(), gx).expect("softmax grad")
}

/// `v[B, N] -> v W^T + b` with `W[M, N]`.
pub fn linear<T: Real>(v: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (bn, n, m) = linear_dims(v, w, b)?;
    let (vd, wd) = (v.data(), w.data());
    let mut out = Vec::with_capacity(bn * m);
    for bi in 0..bn {
        let row = &vd[bi * n..][..n];
        for o in 0..m {
            let acc = super::conv::dot(row, &wd[o * n..][..n]);
            out.push(match b {
                Some(b) => acc + b.data()[o],
                None => acc,
            });
        }
    }
    Tensor::new(vec![bn, m], out)
}

pub(crate) fn linear_dims<T: Real>(
    v: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let (&[bn, n], &[m, wn]) = (v.shape(), w.shape()) else {
        return Err(Error::shape(
            "linear",
            format!("expected [B,N] x [M,N], got {:?} x {:?}", v.shape(), w.shape()),
        ));
    };
    if n != wn {
        return Err(Error::shape(
            "linear",
            format!("input width {n} vs weight width {wn}"),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::shape("linear", format!("bias shape {:?}", b.shape())));
        }
    }
    Ok((bn, n, m))
}

/// Gradients of [`linear`] for `(input, weight, bias)`.
pub fn linear_backward<T: Real>(
    v: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bn, n) = (v.shape()[0], v.shape()[1]);
    let m = w.shape()[0];
    let (vd, wd, gd) = (v.data(), w.data(), gy.data());
    let mut gv = vec![T::zero(); bn * n];
    let mut gw = vec![T::zero(); m * n];
    let mut gb = vec![T::zero(); m];
    for bi in 0..bn {
        for o in 0..m {
            let g = gd[bi * m + o];
            gb[o] = gb[o] + g;
            super::conv::axpy(&mut gv[bi * n..][..n], g, &wd[o * n..][..n]);
            super::conv::axpy(&mut gw[o * n..][..n], g, &vd[bi * n..][..n]);
        }
    }
    (
        Tensor::new(vec![bn, n], gv).expect("linear grad"),
        Tensor::new(vec![m, n], gw).expect("linear grad"),
        Tensor::new(vec![m], gb).expect("linear grad"),
    )
}

/// Concatenate rank-5 tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat", "nothing to concatenate"))?;
    let [b, _, d, h, w] = first.dims5()?;
    let v = d * h * w;
    let mut c_total = 0;
    for p in parts {
        let [pb, pc, pd, ph, pw] = p.dims5()?;
        if (pb, pd, ph, pw) != (b, d, h, w) {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        c_total += pc;
    }
    let mut data = Vec::with_capacity(b * c_total * v);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[bi * pc * v..(bi + 1) * pc * v]);
        }
    }
    Tensor::new(vec![b, c_total, d, h, w], data)
}

/// Channels `[start, end)` of a rank-5 tensor.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims5()?;
    if start >= end || end > c {
        return Err(Error::arg(
            "slice_channels",
            format!("range {start}..{end} outside {c} channels"),
        ));
    }
    let v = d * h * w;
    let mut data = Vec::with_capacity(b * (end - start) * v);
    for bi in 0..b {
        data.extend_from_slice(&x.data()[(bi * c + start) * v..(bi * c + end) * v]);
    }
    Tensor::new(vec![b, end - start, d, h, w], data)
}

pub(crate) fn unslice_channels<T: Real>(
    g: &Tensor<T>,
    input_shape: &[usize],
    start: usize,
) -> Tensor<T> {
    let (b, c) = (input_shape[0], input_shape[1]);
    let v: usize = input_shape[2..].iter().product();
    let k = g.shape()[1];
    let mut out = Tensor::zeros(input_shape.to_vec());
    let od = out.data_mut();
    for bi in 0..b {
        od[(bi * c + start) * v..(bi * c + start + k) * v]
            .copy_from_slice(&g.data()[bi * k * v..(bi + 1) * k * v]);
    }
    out
}
