use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autograd;
use crate::tensor::{Scalar, Tensor};

/// Exact GELU, `x · Φ(x)` with `Φ(x) = ½(1 + erf(x/√2))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(FRAC_1_SQRT_2);
    let out = x.map_raw(|v| v * half * (T::one() + (v * inv_sqrt2).erf()));
    let input = x.detach();
    autograd::record(out, &[x], move |g| {
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * PI).sqrt());
        let data = input
            .data()
            .iter()
            .zip(g.data())
            .map(|(&v, &gv)| {
                let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                gv * (cdf + v * pdf)
            })
            .collect();
        vec![Tensor::from_parts(input.shape().to_vec(), data)]
    })
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().expect("rank >= 1");
    let mut data = x.to_vec();
    for row in data.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), data);
    let probs = out.detach();
    autograd::record(out, &[x], move |g| {
        let mut gx = Vec::with_capacity(g.len());
        for (p, gr) in probs.data().chunks(c).zip(g.data().chunks(c)) {
            let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            gx.extend(p.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
        }
        vec![Tensor::from_parts(probs.shape().to_vec(), gx)]
    })
}
