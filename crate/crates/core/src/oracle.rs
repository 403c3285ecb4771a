//! Naive-loop reference implementations and a randomized equivalence suite.
//!
//! Every reference works on plain `f64` buffers with explicit index
//! arithmetic and shares no code with the optimized kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{KvReduction, SpatialReductionAttention};
use crate::config::AttentionKind;
use crate::error::Result;
use crate::nn::{adaptive_avg_pool, conv2d, Conv2dParams, Initializer, Module, LAYER_NORM_EPS};
use crate::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-6;

/// Direct convolution of a `[n, c_in, h, w]` input with `[c_out, c_in/g, k, k]`
/// weights. Returns the output and its shape.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Adaptive average pooling of `[n, c, h, w]` to `P×P`.
pub fn avg_pool_ref(x: &[f64], [n, c, h, w]: [usize; 4], p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c * p * p);
    for plane in 0..n * c {
        for i in 0..p {
            let (r0, r1) = (i * h / p, ((i + 1) * h).div_ceil(p));
            for j in 0..p {
                let (c0, c1) = (j * w / p, ((j + 1) * w).div_ceil(p));
                let mut acc = 0.0;
                for r in r0..r1 {
                    for col in c0..c1 {
                        acc += x[plane * h * w + r * w + col];
                    }
                }
                out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

/// Row-wise `x W + b` with `W` stored `[c_in, c_out]`.
pub fn linear_ref(x: &[f64], c_in: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let rows = x.len() / c_in;
    let mut out = vec![0.0; rows * c_out];
    for r in 0..rows {
        for o in 0..c_out {
            let mut acc = bias[o];
            for i in 0..c_in {
                acc += x[r * c_in + i] * weight[i * c_out + o];
            }
            out[r * c_out + o] = acc;
        }
    }
    out
}

pub fn layer_norm_ref(x: &[f64], c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gamma[i] + beta[i]);
        }
    }
    out
}

pub fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `[n, t, c]` tokens to `[n, c, h, w]`.
fn tokens_to_planes(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for t in 0..h * w {
            for ch in 0..c {
                out[(b * c + ch) * h * w + t] = x[(b * h * w + t) * c + ch];
            }
        }
    }
    out
}

fn planes_to_tokens(x: &[f64], n: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..t {
                out[(b * t + i) * c + ch] = x[(b * c + ch) * t + i];
            }
        }
    }
    out
}

/// Multi-head attention with per-head loops. `q_src` is `[n, t_q, c]`,
/// `kv_src` is `[n, t_kv, c]`; weights follow the `Linear` layout.
pub fn attention_ref(
    q_src: &[f64],
    kv_src: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    attn: &SpatialReductionAttention<f64>,
) -> Vec<f64> {
    let p = &attn.proj;
    let q = linear_ref(q_src, c, p.q.weight.data(), p.q.bias.data());
    let k = linear_ref(kv_src, c, p.k.weight.data(), p.k.bias.data());
    let v = linear_ref(kv_src, c, p.v.weight.data(), p.v.bias.data());
    let tq = q_src.len() / (n * c);
    let tkv = kv_src.len() / (n * c);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx = vec![0.0; n * tq * c];
    let mut scores = vec![0.0; tkv];
    for b in 0..n {
        for hd in 0..heads {
            for i in 0..tq {
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += q[(b * tq + i) * c + hd * d + e] * k[(b * tkv + j) * c + hd * d + e];
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for e in 0..d {
                    let mut acc = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        acc += s / z * v[(b * tkv + j) * c + hd * d + e];
                    }
                    ctx[(b * tq + i) * c + hd * d + e] = acc;
                }
            }
        }
    }
    linear_ref(&ctx, c, p.out.weight.data(), p.out.bias.data())
}

/// Reference for either attention variant on `[n, h·w, c]` tokens.
pub fn sra_ref(x: &[f64], n: usize, h: usize, w: usize, attn: &SpatialReductionAttention<f64>) -> Vec<f64> {
    let c = attn.channels;
    let planes = tokens_to_planes(x, n, h, w, c);
    let kv = match &attn.reduction {
        KvReduction::None => x.to_vec(),
        KvReduction::Conv { ratio, conv, norm } => {
            let (m, [_, _, oh, ow]) = conv2d_ref(
                &planes,
                [n, c, h, w],
                conv.weight.data(),
                c,
                *ratio,
                Some(conv.bias.data()),
                *ratio,
                0,
                1,
            );
            layer_norm_ref(
                &planes_to_tokens(&m, n, oh * ow, c),
                c,
                norm.gamma.data(),
                norm.beta.data(),
            )
        }
        KvReduction::Pool { size, refine } => {
            let pooled = avg_pool_ref(&planes, [n, c, h, w], *size);
            let t = size * size;
            match refine {
                None => planes_to_tokens(&pooled, n, t, c),
                Some((conv, norm)) => {
                    let (m, _) = conv2d_ref(
                        &pooled,
                        [n, c, *size, *size],
                        conv.weight.data(),
                        c,
                        1,
                        Some(conv.bias.data()),
                        1,
                        0,
                        1,
                    );
                    layer_norm_ref(&planes_to_tokens(&m, n, t, c), c, norm.gamma.data(), norm.beta.data())
                        .into_iter()
                        .map(gelu_ref)
                        .collect()
                }
            }
        }
    };
    attention_ref(x, &kv, n, c, attn.heads, attn)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyResult {
    pub family: &'static str,
    pub cases: usize,
    pub max_abs_err: f64,
    pub failures: Vec<String>,
}

impl FamilyResult {
    fn new(family: &'static str) -> Self {
        FamilyResult {
            family,
            cases: 0,
            max_abs_err: 0.0,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, label: String, got: &[f64], want: &[f64]) {
        self.cases += 1;
        let err = if got.len() == want.len() {
            got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        self.max_abs_err = self.max_abs_err.max(err);
        if err.is_nan() || err > ORACLE_TOL {
            self.failures.push(format!("{label}: max abs err {err:.3e}"));
        }
    }

    fn error(&mut self, label: String, e: impl std::fmt::Display) {
        self.cases += 1;
        self.failures.push(format!("{label}: {e}"));
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub seed: u64,
    pub families: Vec<FamilyResult>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(FamilyResult::passed)
    }

    pub fn family(&self, name: &str) -> Option<&FamilyResult> {
        self.families.iter().find(|f| f.family == name)
    }
}

fn randomize(attn: &mut SpatialReductionAttention<f64>, rng: &mut ChaCha8Rng) {
    attn.visit_mut(&mut |_, t| {
        let data: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        *t = Tensor::from_vec(t.shape(), data).expect("same shape");
    });
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv_case(rng: &mut ChaCha8Rng, res: &mut FamilyResult) {
    let groups = rng.random_range(1..=3usize);
    let cin = groups * rng.random_range(1..=2usize);
    let cout = groups * rng.random_range(1..=2usize);
    let k = rng.random_range(1..=4usize);
    let stride = rng.random_range(1..=3usize);
    let pad = rng.random_range(0..k);
    let n = rng.random_range(1..=2usize);
    let h = rng.random_range(k.saturating_sub(2 * pad).max(1)..=9);
    let w = rng.random_range(k.saturating_sub(2 * pad).max(1)..=9);
    let label = format!("n={n} c={cin}->{cout} g={groups} k={k} s={stride} p={pad} {h}x{w}");
    let x = uniform(rng, n * cin * h * w);
    let wt = uniform(rng, cout * (cin / groups) * k * k);
    let with_bias = rng.random_bool(0.5);
    let b = uniform(rng, cout);
    let (want, shape) = conv2d_ref(
        &x,
        [n, cin, h, w],
        &wt,
        cout,
        k,
        with_bias.then_some(b.as_slice()),
        stride,
        pad,
        groups,
    );
    let run = || -> Result<Tensor<f64>> {
        let params = Conv2dParams::new(cin, cout, k, stride, pad, groups)?;
        let xt = Tensor::from_vec(&[n, cin, h, w], x.clone())?;
        let wt = Tensor::from_vec(&params.weight_shape(), wt.clone())?;
        let bt = Tensor::from_vec(&[cout], b.clone())?;
        conv2d(&xt, &wt, with_bias.then_some(&bt), &params)
    };
    match run() {
        Ok(t) if t.shape() == shape => res.record(label, t.data(), &want),
        Ok(t) => res.error(label, format!("shape {:?}, reference {shape:?}", t.shape())),
        Err(e) => res.error(label, e),
    }
}

fn attention_case(rng: &mut ChaCha8Rng, linear: bool, res: &mut FamilyResult) {
    let heads = rng.random_range(1..=3usize);
    let c = heads * rng.random_range(1..=4usize);
    let n = rng.random_range(1..=2usize);
    let (kind, h, w) = if linear {
        let p = rng.random_range(1..=4usize);
        (
            AttentionKind::LinearSra { pool_size: p },
            rng.random_range(1..=9usize),
            rng.random_range(1..=9usize),
        )
    } else {
        let r = rng.random_range(1..=3usize);
        (
            AttentionKind::Sra { reduction_ratio: r },
            r * rng.random_range(1..=3usize),
            r * rng.random_range(1..=3usize),
        )
    };
    let refine = rng.random_bool(0.5);
    let label = format!("n={n} c={c} heads={heads} {kind} refine={refine} {h}x{w}");
    let mut attn = match SpatialReductionAttention::<f64>::new("attn", c, heads, kind, refine, &mut Initializer::new(0))
    {
        Ok(a) => a,
        Err(e) => return res.error(label, e),
    };
    randomize(&mut attn, rng);
    let x = uniform(rng, n * h * w * c);
    let want = sra_ref(&x, n, h, w, &attn);
    let got = Tensor::from_vec(&[n, h * w, c], x).and_then(|xt| attn.forward(&xt, h, w));
    match got {
        Ok(t) => res.record(label, t.data(), &want),
        Err(e) => res.error(label, e),
    }
}

fn pool_case(rng: &mut ChaCha8Rng, res: &mut FamilyResult) {
    let n = rng.random_range(1..=2usize);
    let c = rng.random_range(1..=3usize);
    let h = rng.random_range(1..=12usize);
    let w = rng.random_range(1..=12usize);
    let p = rng.random_range(1..=8usize);
    let label = format!("n={n} c={c} {h}x{w} -> {p}x{p}");
    let x = uniform(rng, n * c * h * w);
    let want = avg_pool_ref(&x, [n, c, h, w], p);
    match Tensor::from_vec(&[n, c, h, w], x).and_then(|t| adaptive_avg_pool(&t, p)) {
        Ok(t) => res.record(label, t.data(), &want),
        Err(e) => res.error(label, e),
    }
}

/// Runs `cases` randomized comparisons for each of conv2d, SRA, linear SRA
/// and adaptive pooling.
pub fn run_suite(seed: u64, cases: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = FamilyResult::new("conv2d");
    let mut sra = FamilyResult::new("sra");
    let mut lin = FamilyResult::new("linear_sra");
    let mut pool = FamilyResult::new("adaptive_pool");
    for _ in 0..cases {
        conv_case(&mut rng, &mut conv);
        attention_case(&mut rng, false, &mut sra);
        attention_case(&mut rng, true, &mut lin);
        pool_case(&mut rng, &mut pool);
    }
    OracleReport {
        seed,
        families: vec![conv, sra, lin, pool],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_ref_by_hand() {
        // 1x1x2x2 input, 1x1x2x2 kernel of ones, no padding: the sum.
        let (out, shape) = conv2d_ref(
            &[1.0, 2.0, 3.0, 4.0],
            [1, 1, 2, 2],
            &[1.0; 4],
            1,
            2,
            Some(&[0.5]),
            1,
            0,
            1,
        );
        assert_eq!(shape, [1, 1, 1, 1]);
        assert_eq!(out, [10.5]);
    }

    #[test]
    fn pool_ref_by_hand() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(avg_pool_ref(&x, [1, 1, 3, 3], 1), [4.0]);
        // 3 -> 2 bins overlap on the middle row/column
        assert_eq!(avg_pool_ref(&x, [1, 1, 3, 3], 2), [2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(5, 8);
        for f in &report.families {
            assert_eq!(f.cases, 8);
            assert!(f.passed(), "{}: {:?}", f.family, f.failures);
        }
    }
}
