use crate::autograd;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each token over the last (channel) axis to zero mean and unit
/// variance (biased estimator), then applies `gamma` and `beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm over {c} channels with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let eps = T::from_f64(eps);
    let inv_c = T::from_f64(1.0 / c as f64);
    let rows = x.len() / c;
    let mut normed = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        inv_std.push(r);
        normed.extend(row.iter().map(|&v| (v - mean) * r));
    }
    let out: Vec<T> = normed
        .chunks(c)
        .flat_map(|row| {
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&n, (&g, &b))| n * g + b)
        })
        .collect();
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    let shape = x.shape().to_vec();
    let gamma_d = gamma.detach();
    Ok(autograd::record(out, &[x, gamma, beta], move |g| {
        let mut dx = Vec::with_capacity(g.len());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ((grow, nrow), &r) in g.data().chunks(c).zip(normed.chunks(c)).zip(&inv_std) {
            let mut mean_d = T::zero();
            let mut mean_dn = T::zero();
            for j in 0..c {
                let d = grow[j] * gamma_d.data()[j];
                mean_d = mean_d + d;
                mean_dn = mean_dn + d * nrow[j];
                dgamma[j] = dgamma[j] + grow[j] * nrow[j];
                dbeta[j] = dbeta[j] + grow[j];
            }
            mean_d = mean_d * inv_c;
            mean_dn = mean_dn * inv_c;
            for j in 0..c {
                let d = grow[j] * gamma_d.data()[j];
                dx.push(r * (d - mean_d - nrow[j] * mean_dn));
            }
        }
        vec![
            Tensor::from_parts(shape.clone(), dx),
            Tensor::from_parts(vec![c], dgamma),
            Tensor::from_parts(vec![c], dbeta),
        ]
    }))
}
