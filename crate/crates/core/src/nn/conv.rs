use crate::autograd;
use crate::error::{Error, Result};
use crate::macs;
use crate::tensor::{gemm, gemm_nt, gemm_tn, Scalar, Tensor};

/// Square-kernel 2-D convolution geometry with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let p = Conv2dParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// Overlapping patch embedding: kernel `2S−1`, stride `S`, padding `S−1`.
    pub fn overlapping_patch(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("patch stride must be >= 1"));
        }
        Self::new(in_channels, out_channels, 2 * stride - 1, stride, stride - 1, 1)
    }

    /// Non-overlapping patches: kernel `S`, stride `S`, no padding.
    pub fn plain_patch(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, stride, stride, 0, 1)
    }

    pub fn depthwise3x3(channels: usize) -> Result<Self> {
        Self::new(channels, channels, 3, 1, 1, channels)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, co, g) = (self.in_channels, self.out_channels, self.groups);
        if c == 0 || co == 0 || g == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::config(format!("conv parameters must be positive: {self:?}")));
        }
        if c % g != 0 || co % g != 0 {
            return Err(Error::config(format!("channels {c}->{co} not divisible by groups {g}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn param_count(&self) -> u64 {
        let [a, b, c, d] = self.weight_shape();
        (a * b * c * d + self.out_channels) as u64
    }

    /// Output extent along one spatial axis, or `None` when the kernel does
    /// not fit inside the padded input.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn patch_len(&self, k: usize) -> usize {
        self.cin_g * k * k
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls the receptive fields of one group of one sample into
/// `[cin_g·k·k, oh·ow]`. Padded taps are stored as zeros so every multiply
/// of the dense product is executed.
fn im2col<T: Scalar>(x: &[T], geo: &Geometry, p: &Conv2dParams, cols: &mut [T]) {
    let (k, s, pad) = (p.kernel, p.stride, p.padding as isize);
    let positions = geo.positions();
    for c in 0..geo.cin_g {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * positions..][..positions];
                for oy in 0..geo.oh {
                    let iy = (oy * s + ki) as isize - pad;
                    for ox in 0..geo.ow {
                        let ix = (ox * s + kj) as isize - pad;
                        row[oy * geo.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < geo.h && (ix as usize) < geo.w
                        {
                            plane[iy as usize * geo.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], geo: &Geometry, p: &Conv2dParams, dx: &mut [T]) {
    let (k, s, pad) = (p.kernel, p.stride, p.padding as isize);
    let positions = geo.positions();
    for c in 0..geo.cin_g {
        let plane = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * positions..][..positions];
                for oy in 0..geo.oh {
                    let iy = (oy * s + ki) as isize - pad;
                    if iy < 0 || iy as usize >= geo.h {
                        continue;
                    }
                    for ox in 0..geo.ow {
                        let ix = (ox * s + kj) as isize - pad;
                        if ix >= 0 && (ix as usize) < geo.w {
                            let dst = &mut plane[iy as usize * geo.w + ix as usize];
                            *dst = *dst + row[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_inputs<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &Conv2dParams,
) -> Result<Geometry> {
    p.validate()?;
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(format!(
            "conv2d input must be [n,c,h,w], got {:?}",
            x.shape()
        )));
    };
    if c != p.in_channels {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {c}",
            p.in_channels
        )));
    }
    if weight.shape() != p.weight_shape() {
        return Err(Error::shape(format!(
            "conv2d weight {:?}, expected {:?}",
            weight.shape(),
            p.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [p.out_channels] {
            return Err(Error::shape(format!(
                "conv2d bias {:?}, expected [{}]",
                b.shape(),
                p.out_channels
            )));
        }
    }
    let (Some(oh), Some(ow)) = (p.output_extent(h), p.output_extent(w)) else {
        return Err(Error::shape(format!(
            "kernel {} larger than padded input {h}x{w} (padding {})",
            p.kernel, p.padding
        )));
    };
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        cin_g: c / p.groups,
        cout_g: p.out_channels / p.groups,
    })
}

/// Grouped 2-D convolution, `[n, c, h, w] → [n, c′, h_out, w_out]`, with
/// `h_out = ⌊(h + 2p − k)/s⌋ + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: &Conv2dParams,
) -> Result<Tensor<T>> {
    let geo = check_conv_inputs(x, weight, bias, params)?;
    let p = *params;
    let (g, k) = (p.groups, p.kernel);
    let kp = geo.patch_len(k);
    let positions = geo.positions();
    let in_plane = geo.h * geo.w;
    let mut out = vec![T::zero(); geo.n * p.out_channels * positions];
    let mut cols = vec![T::zero(); kp * positions];
    let mut executed = 0u64;
    for b in 0..geo.n {
        for gi in 0..g {
            let xs = &x.data()[(b * p.in_channels + gi * geo.cin_g) * in_plane..][..geo.cin_g * in_plane];
            im2col(xs, &geo, &p, &mut cols);
            let ws = &weight.data()[gi * geo.cout_g * kp..][..geo.cout_g * kp];
            let os = &mut out[(b * p.out_channels + gi * geo.cout_g) * positions..][..geo.cout_g * positions];
            executed += gemm(ws, &cols, geo.cout_g, kp, positions, os);
        }
    }
    macs::record(executed);
    if let Some(bias) = bias {
        for plane in 0..geo.n * p.out_channels {
            let bv = bias.data()[plane % p.out_channels];
            for v in &mut out[plane * positions..(plane + 1) * positions] {
                *v = *v + bv;
            }
        }
    }
    let out = Tensor::from_parts(vec![geo.n, p.out_channels, geo.oh, geo.ow], out);

    let (xd, wd) = (x.detach(), weight.detach());
    let has_bias = bias.is_some();
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(autograd::record(out, &inputs, move |gout| {
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wd.len()];
        let mut cols = vec![T::zero(); kp * positions];
        let mut dcols = vec![T::zero(); kp * positions];
        for b in 0..geo.n {
            for gi in 0..g {
                let xoff = (b * p.in_channels + gi * geo.cin_g) * in_plane;
                im2col(&xd.data()[xoff..][..geo.cin_g * in_plane], &geo, &p, &mut cols);
                let go = &gout.data()[(b * p.out_channels + gi * geo.cout_g) * positions..][..geo.cout_g * positions];
                gemm_nt(
                    go,
                    &cols,
                    geo.cout_g,
                    positions,
                    kp,
                    &mut dw[gi * geo.cout_g * kp..][..geo.cout_g * kp],
                );
                dcols.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(
                    &wd.data()[gi * geo.cout_g * kp..][..geo.cout_g * kp],
                    go,
                    geo.cout_g,
                    kp,
                    positions,
                    &mut dcols,
                );
                col2im(&dcols, &geo, &p, &mut dx[xoff..][..geo.cin_g * in_plane]);
            }
        }
        let mut grads = vec![
            Tensor::from_parts(xd.shape().to_vec(), dx),
            Tensor::from_parts(wd.shape().to_vec(), dw),
        ];
        if has_bias {
            let mut db = vec![T::zero(); p.out_channels];
            for (plane, chunk) in gout.data().chunks(positions).enumerate() {
                let acc = &mut db[plane % p.out_channels];
                *acc = chunk.iter().fold(*acc, |a, &v| a + v);
            }
            grads.push(Tensor::from_parts(vec![p.out_channels], db));
        }
        grads
    }))
}

/// 3×3 depthwise convolution with padding 1; spatial size is preserved.
pub fn depthwise_conv3x3<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let c = *weight.shape().first().unwrap_or(&0);
    if x.rank() != 4 || x.shape()[1] != c || weight.shape() != [c, 1, 3, 3] {
        return Err(Error::shape(format!(
            "depthwise conv: input {:?} with weight {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    conv2d(x, weight, bias, &Conv2dParams::depthwise3x3(c)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes_from_table() {
        let p = Conv2dParams::overlapping_patch(3, 64, 4).unwrap();
        assert_eq!((p.kernel, p.padding), (7, 3));
        assert_eq!(p.output_extent(224), Some(56));
        let p = Conv2dParams::overlapping_patch(64, 128, 2).unwrap();
        assert_eq!(p.output_extent(56), Some(28));
    }

    #[test]
    fn identity_1x1() {
        let x = Tensor::<f64>::rand_uniform(&[2, 3, 4, 5], 1, -1.0, 1.0).unwrap();
        let p = Conv2dParams::new(3, 3, 1, 1, 0, 1).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 4] = 1.0;
        }
        let w = Tensor::from_f64s(&[3, 3, 1, 1], &w).unwrap();
        assert_eq!(conv2d(&x, &w, None, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_3x3() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let p = Conv2dParams::new(1, 1, 3, 1, 0, 1).unwrap();
        let y = conv2d(&x, &w, None, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let p = Conv2dParams::new(1, 1, 5, 1, 1, 1).unwrap();
        assert!(matches!(conv2d(&x, &w, None, &p), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn group_divisibility() {
        assert!(Conv2dParams::new(6, 4, 3, 1, 1, 4).is_err());
        assert!(Conv2dParams::new(4, 6, 3, 1, 1, 4).is_err());
        assert!(Conv2dParams::new(4, 8, 3, 1, 1, 4).is_ok());
    }

    #[test]
    fn depthwise_impulse_is_identity() {
        let c = 4;
        let x = Tensor::<f64>::rand_uniform(&[1, c, 8, 8], 2, -1.0, 1.0).unwrap();
        let mut w = vec![0.0; c * 9];
        for i in 0..c {
            w[i * 9 + 4] = 1.0;
        }
        let w = Tensor::from_f64s(&[c, 1, 3, 3], &w).unwrap();
        let b = Tensor::zeros(&[c]).unwrap();
        let y = depthwise_conv3x3(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[1, c, 8, 8]);
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let c = 3;
        let x = Tensor::<f64>::rand_uniform(&[2, c, 5, 6], 3, -1.0, 1.0).unwrap();
        let w = Tensor::rand_uniform(&[c, 1, 3, 3], 4, -1.0, 1.0).unwrap();
        let b = Tensor::rand_uniform(&[c], 5, -1.0, 1.0).unwrap();
        let y = depthwise_conv3x3(&x, &w, Some(&b)).unwrap();
        let p = Conv2dParams::new(c, c, 3, 1, 1, c).unwrap();
        let z = conv2d(&x, &w, Some(&b), &p).unwrap();
        assert!(y.max_abs_diff(&z).unwrap() < 1e-12);
        let bad = Tensor::zeros(&[c + 1, 1, 3, 3]).unwrap();
        assert!(depthwise_conv3x3(&x, &bad, None).is_err());
    }
}
