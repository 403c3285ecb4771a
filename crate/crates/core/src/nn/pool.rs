use crate::autograd;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Input range `[⌊i·len/P⌋, ⌈(i+1)·len/P⌉)` covered by output bin `i`.
pub fn pool_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

/// Adaptive average pooling of `[n, c, h, w]` to `[n, c, P, P]`.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "pool input must be [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    if size == 0 {
        return Err(Error::config("pool size must be >= 1"));
    }
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * size * size);
    for plane in x.data().chunks(h * w) {
        for i in 0..size {
            let (r0, r1) = pool_bin(i, h, size);
            for j in 0..size {
                let (c0, c1) = pool_bin(j, w, size);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::from_f64(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, size, size], out);
    let in_shape = x.shape().to_vec();
    Ok(autograd::record(out, &[x], move |g| {
        let mut dx = vec![T::zero(); planes * h * w];
        for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(size * size)) {
            for i in 0..size {
                let (r0, r1) = pool_bin(i, h, size);
                for j in 0..size {
                    let (c0, c1) = pool_bin(j, w, size);
                    let share = gplane[i * size + j] / T::from_f64(((r1 - r0) * (c1 - c0)) as f64);
                    for r in r0..r1 {
                        for v in &mut dplane[r * w + c0..r * w + c1] {
                            *v = *v + share;
                        }
                    }
                }
            }
        }
        vec![Tensor::from_parts(in_shape.clone(), dx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_size_matches() {
        let x = Tensor::<f64>::rand_uniform(&[1, 2, 7, 7], 1, -1.0, 1.0).unwrap();
        assert_eq!(adaptive_avg_pool(&x, 7).unwrap(), x);
    }

    #[test]
    fn halving_averages_2x2_blocks() {
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 14, 14], 2, -1.0, 1.0).unwrap();
        let y = adaptive_avg_pool(&x, 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let block = [
                    x.at(&[0, 0, 2 * i, 2 * j]),
                    x.at(&[0, 0, 2 * i + 1, 2 * j]),
                    x.at(&[0, 0, 2 * i, 2 * j + 1]),
                    x.at(&[0, 0, 2 * i + 1, 2 * j + 1]),
                ];
                let mean = block.iter().sum::<f64>() / 4.0;
                assert!((y.at(&[0, 0, i, j]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        for (h, w, p) in [(5, 9, 7), (3, 3, 7), (14, 10, 4), (1, 1, 2)] {
            let x = Tensor::<f64>::full(&[1, 1, h, w], 2.5).unwrap();
            let y = adaptive_avg_pool(&x, p).unwrap();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn bins_cover_input() {
        assert_eq!(pool_bin(0, 3, 7), (0, 1));
        assert_eq!(pool_bin(6, 3, 7), (2, 3));
        assert_eq!(pool_bin(1, 10, 3), (3, 7));
    }
}
