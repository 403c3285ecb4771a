//! Multi-head attention with spatially reduced keys and values.
//!
//! Queries always come from every input token. Keys and values come from a
//! reduced copy of the feature map:
//!
//! * SRA: a stride-`R` `R×R` convolution plus layer norm, giving
//!   `(h/R)·(w/R)` tokens. `R = 1` skips the reduction.
//! * Linear SRA: adaptive average pooling to exactly `P×P` tokens, optionally
//!   refined by a 1×1 convolution, layer norm and GELU.

use crate::config::AttentionKind;
use crate::error::{Error, Result};
use crate::macs;
use crate::nn::{
    adaptive_avg_pool, gelu, map_to_tokens, softmax_lastdim, tokens_to_map, Conv2d, Conv2dParams, Initializer,
    LayerNorm, Linear, Module,
};
use crate::tensor::{Scalar, Tensor};

/// Query/key/value/output projections, all `c → c` with bias.
#[derive(Clone)]
pub struct AttentionProjections<T: Scalar> {
    /// MAC-counter scope for the two attention products.
    pub core: String,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionProjections<T> {
    pub fn new(name: &str, channels: usize, init: &mut Initializer) -> Result<Self> {
        Ok(AttentionProjections {
            core: format!("{name}.core"),
            q: Linear::new(format!("{name}.q"), channels, channels, init)?,
            k: Linear::new(format!("{name}.k"), channels, channels, init)?,
            v: Linear::new(format!("{name}.v"), channels, channels, init)?,
            out: Linear::new(format!("{name}.proj"), channels, channels, init)?,
        })
    }
}

impl<T: Scalar> Module<T> for AttentionProjections<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Clone)]
pub enum KvReduction<T: Scalar> {
    None,
    Conv {
        ratio: usize,
        conv: Conv2d<T>,
        norm: LayerNorm<T>,
    },
    Pool {
        size: usize,
        refine: Option<(Conv2d<T>, LayerNorm<T>)>,
    },
}

impl<T: Scalar> KvReduction<T> {
    pub fn kind(&self) -> AttentionKind {
        match self {
            KvReduction::None => AttentionKind::Sra { reduction_ratio: 1 },
            KvReduction::Conv { ratio, .. } => AttentionKind::Sra {
                reduction_ratio: *ratio,
            },
            KvReduction::Pool { size, .. } => AttentionKind::LinearSra { pool_size: *size },
        }
    }
}

/// Attention weights for one encoder block.
#[derive(Clone)]
pub struct SpatialReductionAttention<T: Scalar> {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub proj: AttentionProjections<T>,
    pub reduction: KvReduction<T>,
}

impl<T: Scalar> SpatialReductionAttention<T> {
    pub fn new(
        name: &str,
        channels: usize,
        heads: usize,
        kind: AttentionKind,
        pool_refine: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let proj = AttentionProjections::new(name, channels, init)?;
        let reduction = match kind {
            AttentionKind::Sra { reduction_ratio: 0 } | AttentionKind::LinearSra { pool_size: 0 } => {
                return Err(Error::config("attention reduction size must be >= 1"))
            }
            AttentionKind::Sra { reduction_ratio: 1 } => KvReduction::None,
            AttentionKind::Sra { reduction_ratio: r } => KvReduction::Conv {
                ratio: r,
                conv: Conv2d::new(
                    format!("{name}.sr"),
                    Conv2dParams::new(channels, channels, r, r, 0, 1)?,
                    init,
                )?,
                norm: LayerNorm::new(format!("{name}.norm"), channels)?,
            },
            AttentionKind::LinearSra { pool_size } => KvReduction::Pool {
                size: pool_size,
                refine: if pool_refine {
                    Some((
                        Conv2d::new(
                            format!("{name}.sr"),
                            Conv2dParams::new(channels, channels, 1, 1, 0, 1)?,
                            init,
                        )?,
                        LayerNorm::new(format!("{name}.norm"), channels)?,
                    ))
                } else {
                    None
                },
            },
        };
        Ok(SpatialReductionAttention {
            name: name.to_string(),
            channels,
            heads,
            proj,
            reduction,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.reduction.kind()
    }

    /// Key/value source tokens `[n, t_kv, c]` for an `h×w` input.
    pub fn reduce_kv(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        match &self.reduction {
            KvReduction::None => {
                check_tokens(x, h, w, self.channels)?;
                Ok(x.clone())
            }
            KvReduction::Conv { ratio, conv, norm } => {
                if !h.is_multiple_of(*ratio) || !w.is_multiple_of(*ratio) {
                    return Err(Error::shape(format!(
                        "{}: {h}x{w} map is not divisible by reduction ratio {ratio}",
                        self.name
                    )));
                }
                let map = tokens_to_map(x, h, w)?;
                norm.forward(&map_to_tokens(&conv.forward(&map)?)?)
            }
            KvReduction::Pool { size, refine } => {
                let pooled = adaptive_avg_pool(&tokens_to_map(x, h, w)?, *size)?;
                match refine {
                    Some((conv, norm)) => Ok(gelu(&norm.forward(&map_to_tokens(&conv.forward(&pooled)?)?)?)),
                    None => map_to_tokens(&pooled),
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        match self.kind() {
            AttentionKind::Sra { reduction_ratio } => sra_forward(x, h, w, reduction_ratio, self),
            AttentionKind::LinearSra { pool_size } => linear_sra_forward(x, h, w, pool_size, self),
        }
    }

    /// Forward pass that also returns attention probabilities `[n, N, t_q, t_kv]`.
    pub fn forward_with_weights(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        check_tokens(x, h, w, self.channels)?;
        let kv = self.reduce_kv(x, h, w)?;
        mha_with_weights(x, &kv, &kv, self.heads, &self.proj)
    }
}

impl<T: Scalar> Module<T> for SpatialReductionAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.proj.visit(f);
        match &self.reduction {
            KvReduction::None | KvReduction::Pool { refine: None, .. } => {}
            KvReduction::Conv { conv, norm, .. }
            | KvReduction::Pool {
                refine: Some((conv, norm)),
                ..
            } => {
                conv.visit(f);
                norm.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.proj.visit_mut(f);
        match &mut self.reduction {
            KvReduction::None | KvReduction::Pool { refine: None, .. } => {}
            KvReduction::Conv { conv, norm, .. }
            | KvReduction::Pool {
                refine: Some((conv, norm)),
                ..
            } => {
                conv.visit_mut(f);
                norm.visit_mut(f);
            }
        }
    }
}

fn check_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize, c: usize) -> Result<()> {
    match *x.shape() {
        [_, t, xc] if t == h * w && xc == c => Ok(()),
        _ => Err(Error::shape(format!(
            "expected [n, {}, {c}] tokens for a {h}x{w} map, got {:?}",
            h * w,
            x.shape()
        ))),
    }
}

/// `[n, t, c]` → `[n·N, t, d]`.
fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let [n, t, c] = *x.shape() else { unreachable!() };
    let d = c / heads;
    x.reshape(&[n, t, heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * heads, t, d])
}

/// Multi-head scaled dot-product attention with projections:
/// `out(concat_h softmax(q_h k_hᵀ / √d) v_h)`.
pub fn mha<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    proj: &AttentionProjections<T>,
) -> Result<Tensor<T>> {
    Ok(mha_with_weights(q, k, v, heads, proj)?.0)
}

/// [`mha`], also returning the attention probabilities `[n, N, t_q, t_kv]`.
pub fn mha_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    proj: &AttentionProjections<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[n, tq, c], &[nk, tkv, ck], &[nv, tv, cv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::shape("attention inputs must be [n, t, c]"));
    };
    if nk != n || nv != n || tv != tkv || ck != c || cv != c {
        return Err(Error::shape(format!(
            "attention inputs disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide {c} channels")));
    }
    let d = c / heads;
    let qh = split_heads(&proj.q.forward(q)?, heads)?;
    let kh = split_heads(&proj.k.forward(k)?, heads)?;
    let vh = split_heads(&proj.v.forward(v)?, heads)?;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let (probs, ctx) = macs::scope(&proj.core, || -> Result<_> {
        let scores = qh.scale(scale).bmm(&kh.permute(&[0, 2, 1])?)?;
        let probs = softmax_lastdim(&scores);
        let ctx = probs.bmm(&vh)?;
        Ok((probs, ctx))
    })?;
    let merged = ctx
        .reshape(&[n, heads, tq, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, tq, c])?;
    let out = proj.out.forward(&merged)?;
    Ok((out, probs.reshape(&[n, heads, tq, tkv])?))
}

/// Spatial-reduction attention with reduction ratio `R`.
pub fn sra_forward<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    reduction_ratio: usize,
    attn: &SpatialReductionAttention<T>,
) -> Result<Tensor<T>> {
    let expected = AttentionKind::Sra { reduction_ratio };
    if attn.kind() != expected {
        return Err(Error::config(format!(
            "{}: weights are for {}, not {expected}",
            attn.name,
            attn.kind()
        )));
    }
    check_tokens(x, h, w, attn.channels)?;
    let kv = attn.reduce_kv(x, h, w)?;
    mha(x, &kv, &kv, attn.heads, &attn.proj)
}

/// Linear spatial-reduction attention with a fixed `P×P` key/value grid.
pub fn linear_sra_forward<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    pool_size: usize,
    attn: &SpatialReductionAttention<T>,
) -> Result<Tensor<T>> {
    let expected = AttentionKind::LinearSra { pool_size };
    if attn.kind() != expected {
        return Err(Error::config(format!(
            "{}: weights are for {}, not {expected}",
            attn.name,
            attn.kind()
        )));
    }
    check_tokens(x, h, w, attn.channels)?;
    let kv = attn.reduce_kv(x, h, w)?;
    mha(x, &kv, &kv, attn.heads, &attn.proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(c: usize) -> Tensor<f64> {
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * (c + 1)] = 1.0;
        }
        Tensor::from_f64s(&[c, c], &eye).unwrap()
    }

    fn attn(c: usize, heads: usize, kind: AttentionKind, seed: u64) -> SpatialReductionAttention<f64> {
        SpatialReductionAttention::new("attn", c, heads, kind, true, &mut Initializer::with_std(seed, 0.3)).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut p = AttentionProjections::<f64>::new("a", 4, &mut Initializer::new(0)).unwrap();
        for l in [&mut p.q, &mut p.k, &mut p.v, &mut p.out] {
            l.weight = identity(4);
        }
        let q = Tensor::rand_uniform(&[1, 1, 4], 1, -1.0, 1.0).unwrap();
        let v = Tensor::rand_uniform(&[1, 1, 4], 2, -1.0, 1.0).unwrap();
        let out = mha(&q, &v, &v, 1, &p).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let p = AttentionProjections::<f64>::new("a", 4, &mut Initializer::with_std(3, 0.5)).unwrap();
        let q = Tensor::rand_uniform(&[1, 3, 4], 1, -1.0, 1.0).unwrap();
        let row = Tensor::<f64>::rand_uniform(&[1, 1, 4], 2, -1.0, 1.0).unwrap();
        let k = Tensor::stack_batch(&[row.clone(), row.clone(), row.clone(), row.clone(), row]).unwrap();
        let k = k.reshape(&[1, 5, 4]).unwrap();
        let (_, probs) = mha_with_weights(&q, &k, &k, 2, &p).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.2).abs() < 1e-6));
    }

    #[test]
    fn heads_must_divide_channels() {
        let p = AttentionProjections::<f64>::new("a", 4, &mut Initializer::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 2, 4]).unwrap();
        assert!(matches!(mha(&x, &x, &x, 3, &p), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ratio_one_is_plain_attention() {
        let a = attn(8, 2, AttentionKind::Sra { reduction_ratio: 1 }, 1);
        let x = Tensor::rand_uniform(&[1, 16, 8], 4, -1.0, 1.0).unwrap();
        let y = sra_forward(&x, 4, 4, 1, &a).unwrap();
        let z = mha(&x, &x, &x, 2, &a.proj).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn kv_token_counts() {
        let x = Tensor::<f64>::rand_uniform(&[1, 64, 4], 5, -1.0, 1.0).unwrap();
        let a2 = attn(4, 1, AttentionKind::Sra { reduction_ratio: 2 }, 1);
        assert_eq!(a2.reduce_kv(&x, 8, 8).unwrap().shape(), &[1, 16, 4]);
        assert_eq!(sra_forward(&x, 8, 8, 2, &a2).unwrap().shape(), &[1, 64, 4]);
        let a4 = attn(4, 1, AttentionKind::Sra { reduction_ratio: 4 }, 1);
        assert_eq!(a4.reduce_kv(&x, 8, 8).unwrap().shape(), &[1, 4, 4]);
        let li = attn(4, 1, AttentionKind::LinearSra { pool_size: 7 }, 1);
        for (h, w) in [(8, 8), (7, 7), (3, 5), (16, 4)] {
            let x = Tensor::rand_uniform(&[1, h * w, 4], 6, -1.0, 1.0).unwrap();
            assert_eq!(li.reduce_kv(&x, h, w).unwrap().shape(), &[1, 49, 4]);
        }
    }

    #[test]
    fn sra_requires_divisible_map() {
        let a = attn(4, 1, AttentionKind::Sra { reduction_ratio: 2 }, 1);
        let x = Tensor::rand_uniform(&[1, 15, 4], 5, -1.0, 1.0).unwrap();
        assert!(matches!(sra_forward(&x, 3, 5, 2, &a), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn wrong_kind_rejected() {
        let a = attn(4, 1, AttentionKind::Sra { reduction_ratio: 2 }, 1);
        let x = Tensor::rand_uniform(&[1, 16, 4], 5, -1.0, 1.0).unwrap();
        assert!(linear_sra_forward(&x, 4, 4, 7, &a).is_err());
        assert!(sra_forward(&x, 4, 4, 4, &a).is_err());
    }

    #[test]
    fn constant_input_linear_sra() {
        let c = 4;
        let li = attn(c, 2, AttentionKind::LinearSra { pool_size: 7 }, 2);
        let token = Tensor::<f64>::rand_uniform(&[1, 1, c], 9, -1.0, 1.0).unwrap();
        let x = Tensor::stack_batch(&vec![token; 196])
            .unwrap()
            .reshape(&[1, 196, c])
            .unwrap();
        let (out, probs) = li.forward_with_weights(&x, 14, 14).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 49.0).abs() < 1e-12));
        let first = &out.data()[..c];
        for tok in out.data().chunks(c) {
            for (a, b) in tok.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_stage1_linear_sra_shape() {
        let li: SpatialReductionAttention<f32> = SpatialReductionAttention::new(
            "a",
            8,
            1,
            AttentionKind::LinearSra { pool_size: 7 },
            true,
            &mut Initializer::new(0),
        )
        .unwrap();
        let x = Tensor::rand_uniform(&[1, 56 * 56, 8], 1, -1.0, 1.0).unwrap();
        assert_eq!(li.reduce_kv(&x, 56, 56).unwrap().shape(), &[1, 49, 8]);
        assert_eq!(linear_sra_forward(&x, 56, 56, 7, &li).unwrap().shape(), &[1, 3136, 8]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for kind in [
            AttentionKind::Sra { reduction_ratio: 2 },
            AttentionKind::LinearSra { pool_size: 3 },
        ] {
            let a = attn(8, 2, kind, 4);
            let x = Tensor::rand_uniform(&[2, 36, 8], 3, -2.0, 2.0).unwrap();
            let (_, probs) = a.forward_with_weights(&x, 6, 6).unwrap();
            let tkv = *probs.shape().last().unwrap();
            for row in probs.data().chunks(tkv) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
