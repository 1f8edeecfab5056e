use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 2x2x2 max pooling with stride 2.
///
/// Returns the pooled volume and, per output voxel, the linear input index of
/// the selected element. Ties go to the first element in window order.
pub fn maxpool3d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, d, h, w] = x.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::arg(
            "maxpool3d",
            format!("extents ({d}, {h}, {w}) must be even"),
        ));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for bc in 0..b * c {
        let base = bc * d * h * w;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = base + ((2 * zd) * h + 2 * zh) * w + 2 * zw;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            for kw in 0..2 {
                                let i = base + ((2 * zd + kd) * h + 2 * zh + kh) * w + 2 * zw + kw;
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, od, oh, ow], out)?, arg))
}

pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape.to_vec());
    let gd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        gd[i] = gd[i] + g;
    }
    gx
}

/// Spatial mean per `(batch, channel)`, returned as `[B, C]`.
pub fn gap3d<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = x.dims5()?;
    let v = d * h * w;
    if v == 0 {
        return Err(Error::shape("gap3d", "empty spatial extent"));
    }
    let inv = T::one() / T::of(v as f64);
    let data = x
        .data()
        .chunks(v)
        .map(|p| p.iter().fold(T::zero(), |a, &x| a + x) * inv)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn gap3d_backward<T: Real>(input_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let v: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::of(v as f64);
    let mut data = Vec::with_capacity(v * gy.numel());
    for &g in gy.data() {
        data.extend(std::iter::repeat(g * inv).take(v));
    }
    Tensor::new(input_shape.to_vec(), data).expect("gap grad shape")
}
