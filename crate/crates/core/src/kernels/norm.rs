use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const GN_EPS: f64 = 1e-5;

/// Saved statistics of a group-normalization forward pass.
pub struct GroupNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    const OP: &str = "groupnorm";
    let [b, c, d, h, w] = x.dims5()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::arg(
            OP,
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            OP,
            format!("affine shapes {:?}/{:?}, expected [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    let v = d * h * w;
    let cg = c / groups;
    let n = cg * v;
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    let mut rstd = Vec::with_capacity(b * groups);
    let eps = T::of(eps);
    let inv_n = T::one() / T::of(n as f64);
    for bg in 0..b * groups {
        let span = bg * n..(bg + 1) * n;
        let seg = &xd[span.clone()];
        let mean = seg.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
        let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let g0 = (bg % groups) * cg;
        for (j, (xh, o)) in xhat[span.clone()]
            .iter_mut()
            .zip(&mut out[span])
            .enumerate()
        {
            let ch = g0 + j / v;
            *xh = (seg[j] - mean) * r;
            *o = *xh * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((
        Tensor::new(vec![b, c, d, h, w], out)?,
        GroupNormCache {
            xhat: Tensor::new(vec![b, c, d, h, w], xhat)?,
            rstd,
        },
    ))
}

/// Returns gradients for `(input, gamma, beta)`.
pub fn group_norm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    groups: usize,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = cache.xhat.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let cg = c / groups;
    let n = cg * v;
    let (xh, g) = (cache.xhat.data(), gy.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let span = (bi * c + ch) * v..(bi * c + ch + 1) * v;
            for (&gv, &xv) in g[span.clone()].iter().zip(&xh[span]) {
                dgamma[ch] = dgamma[ch] + gv * xv;
                dbeta[ch] = dbeta[ch] + gv;
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    let inv_n = T::one() / T::of(n as f64);
    for bg in 0..b * groups {
        let g0 = (bg % groups) * cg;
        let base = bg * n;
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..n {
            let dxh = g[base + j] * gamma.data()[g0 + j / v];
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = sum_dxh_xh + dxh * xh[base + j];
        }
        let (m1, m2) = (sum_dxh * inv_n, sum_dxh_xh * inv_n);
        let r = cache.rstd[bg];
        for j in 0..n {
            let dxh = g[base + j] * gamma.data()[g0 + j / v];
            dx[base + j] = r * (dxh - m1 - xh[base + j] * m2);
        }
    }
    (
        Tensor::new(shape, dx).expect("gn grad"),
        Tensor::new(vec![c], dgamma).expect("gn grad"),
        Tensor::new(vec![c], dbeta).expect("gn grad"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_group() {
        let x = Tensor::from_fn(vec![2, 8, 3, 3, 3], |i| ((i * 37 % 101) as f64) * 0.1 - 2.0);
        let (y, _) = group_norm(&x, 4, &Tensor::ones(vec![8]), &Tensor::zeros(vec![8]), GN_EPS).unwrap();
        let n = 2 * 27;
        for seg in y.data().chunks(n) {
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_input_yields_beta() {
        let x = Tensor::<f32>::full(vec![1, 8, 2, 2, 2], 3.0);
        let (y, _) = group_norm(&x, 4, &Tensor::ones(vec![8]), &Tensor::full(vec![8], 5.0), GN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn indivisible_channels_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 6, 2, 2, 2]);
        let r = group_norm(&x, 4, &Tensor::ones(vec![6]), &Tensor::zeros(vec![6]), GN_EPS);
        assert!(matches!(r, Err(Error::Argument { .. })));
    }
}
