//! Dense row-major tensors with tape-recorded operations.

use std::fmt;
use std::sync::Arc;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{self, TapeLink};
use crate::error::{Error, Result};
use crate::macs;

/// On-disk element type tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Element type of a [`Tensor`].
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Fill rule for [`Tensor::new`].
///
/// `SeededUniform` draws from ChaCha8 seeded with `seed`, so the buffer is
/// identical on every run and platform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    Constant(f64),
    SeededUniform { seed: u64, low: f64, high: f64 },
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("shape must have at least one extent"));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::shape(format!("element count of {shape:?} overflows")))?;
    }
    Ok(n)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) link: Option<TapeLink<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor<{}>{:?} {:?}", T::DTYPE, self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, "...")?;
        }
        if let Some(link) = &self.link {
            write!(f, " @node{}", link.id)?;
        }
        Ok(())
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    /// Value equality: shape and every element. Tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], init: Init) -> Result<Self> {
        let n = checked_numel(shape)?;
        let data = match init {
            Init::Zero => vec![T::zero(); n],
            Init::Constant(v) => vec![T::from_f64(v); n],
            Init::SeededUniform { seed, low, high } => {
                if low.is_nan() || high.is_nan() || low >= high {
                    return Err(Error::shape(format!("empty uniform range [{low}, {high})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Uniform::new(low, high).expect("range checked above");
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, Init::Zero)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, Init::Constant(value))
    }

    pub fn rand_uniform(shape: &[usize], seed: u64, low: f64, high: f64) -> Result<Self> {
        Self::new(shape, Init::SeededUniform { seed, low, high })
    }

    /// Normal(mean, std) samples drawn from a caller-owned generator.
    pub fn rand_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R, mean: f64, std: f64) -> Result<Self> {
        let n = checked_numel(shape)?;
        let dist = Normal::new(mean, std).map_err(|e| Error::shape(format!("normal({mean}, {std}): {e}")))?;
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            link: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let offset: usize = index
            .iter()
            .zip(strides(&self.shape))
            .zip(&self.shape)
            .map(|((&i, s), &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum();
        self.data[offset]
    }

    pub fn is_tracked(&self) -> bool {
        self.link.is_some()
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            link: None,
        }
    }

    /// Copy with one flat element replaced. The result is untracked.
    pub fn with_element(&self, offset: usize, value: T) -> Self {
        let mut data = self.data.to_vec();
        data[offset] = value;
        Self::from_parts(self.shape.clone(), data)
    }

    /// Sample `i` of the leading (batch) axis, keeping a batch extent of 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let n = self.shape[0];
        if i >= n {
            return Err(Error::shape(format!("batch index {i} out of range {n}")));
        }
        let per = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self::from_parts(shape, self.data[i * per..(i + 1) * per].to_vec()))
    }

    /// Concatenates tensors along the leading axis. The result is untracked.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batch needs at least one tensor"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(format!("stack_batch: {:?} vs {:?}", t.shape, first.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self::from_parts(shape, data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    fn expect_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_raw(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_parts(self.shape.clone(), data)
    }

    pub(crate) fn map_raw(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_raw(&self, other: &Self) -> Self {
        self.zip_raw(other, |a, b| a + b)
    }

    pub(crate) fn reshaped_raw(&self, shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            link: None,
        }
    }

    // ---- differentiable operations ----

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "add")?;
        let out = self.zip_raw(other, |a, b| a + b);
        Ok(autograd::record(out, &[self, other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "sub")?;
        let out = self.zip_raw(other, |a, b| a - b);
        Ok(autograd::record(out, &[self, other], |g| {
            vec![g.clone(), g.map_raw(|v| -v)]
        }))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.expect_same_shape(other, "mul")?;
        let out = self.zip_raw(other, |a, b| a * b);
        let (a, b) = (self.detach(), other.detach());
        Ok(autograd::record(out, &[self, other], move |g| {
            vec![g.zip_raw(&b, |g, b| g * b), g.zip_raw(&a, |g, a| g * a)]
        }))
    }

    pub fn scale(&self, s: T) -> Self {
        let out = self.map_raw(|v| v * s);
        autograd::record(out, &[self], move |g| vec![g.map_raw(|v| v * s)])
    }

    /// Adds `bias` (shape `[c]`) to every row of a tensor whose last extent is `c`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let c = *self.shape.last().expect("rank >= 1");
        if bias.shape != [c] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last extent {c} of {:?}",
                bias.shape, self.shape
            )));
        }
        let mut data = self.data.to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(bias.data.iter()) {
                *v = *v + b;
            }
        }
        let out = Self::from_parts(self.shape.clone(), data);
        Ok(autograd::record(out, &[self, bias], move |g| {
            let mut gb = vec![T::zero(); c];
            for row in g.data.chunks(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            vec![g.clone(), Tensor::from_parts(vec![c], gb)]
        }))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape(format!("matmul: {:?} x {:?}", self.shape, other.shape))),
        };
        let mut out = vec![T::zero(); m * n];
        gemm_counted(&self.data, &other.data, m, k, n, &mut out);
        let out = Self::from_parts(vec![m, n], out);
        let (a, b) = (self.detach(), other.detach());
        Ok(autograd::record(out, &[self, other], move |g| {
            let mut ga = vec![T::zero(); m * k];
            gemm_nt(&g.data, &b.data, m, n, k, &mut ga);
            let mut gb = vec![T::zero(); k * n];
            gemm_tn(&a.data, &g.data, m, k, n, &mut gb);
            vec![Tensor::from_parts(vec![m, k], ga), Tensor::from_parts(vec![k, n], gb)]
        }))
    }

    /// Batched matrix product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        let (bt, m, k, n) = match (self.shape.as_slice(), other.shape.as_slice()) {
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(Error::shape(format!("bmm: {:?} x {:?}", self.shape, other.shape))),
        };
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            gemm_counted(
                &self.data[i * m * k..(i + 1) * m * k],
                &other.data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Self::from_parts(vec![bt, m, n], out);
        let (a, b) = (self.detach(), other.detach());
        Ok(autograd::record(out, &[self, other], move |g| {
            let mut ga = vec![T::zero(); bt * m * k];
            let mut gb = vec![T::zero(); bt * k * n];
            for i in 0..bt {
                let gi = &g.data[i * m * n..(i + 1) * m * n];
                gemm_nt(
                    gi,
                    &b.data[i * k * n..(i + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
                gemm_tn(
                    &a.data[i * m * k..(i + 1) * m * k],
                    gi,
                    m,
                    k,
                    n,
                    &mut gb[i * k * n..(i + 1) * k * n],
                );
            }
            vec![
                Tensor::from_parts(vec![bt, m, k], ga),
                Tensor::from_parts(vec![bt, k, n], gb),
            ]
        }))
    }

    /// Same buffer, new extents. Element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        let out = self.reshaped_raw(shape);
        let in_shape = self.shape.clone();
        Ok(autograd::record(out, &[self], move |g| vec![g.reshaped_raw(&in_shape)]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let out = permute_raw(self, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(autograd::record(out, &[self], move |g| vec![permute_raw(g, &inverse)]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Self {
        let s: T = self.data.iter().copied().sum();
        let shape = self.shape.clone();
        autograd::record(Self::scalar(s), &[self], move |g| {
            let v = g.data[0];
            vec![Tensor::from_parts(shape.clone(), vec![v; shape.iter().product()])]
        })
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() || self.rank() < 2 {
            return Err(Error::shape(format!("mean_axis({axis}) on shape {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let inv = T::from_f64(1.0 / len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let in_shape = self.shape.clone();
        let out = Self::from_parts(shape, out);
        Ok(autograd::record(out, &[self], move |g| {
            let mut gi = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &g.data[o * inner..(o + 1) * inner];
                for a in 0..len {
                    for (dst, &v) in gi[(o * len + a) * inner..(o * len + a + 1) * inner].iter_mut().zip(src) {
                        *dst = v * inv;
                    }
                }
            }
            vec![Tensor::from_parts(in_shape.clone(), gi)]
        }))
    }
}

fn permute_raw<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = axes.len();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..t.len() {
        out.push(t.data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// `out += a · b` for row-major `a: [m, k]`, `b: [k, n]`, reporting the
/// executed multiplies to the MAC counter.
pub(crate) fn gemm_counted<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let executed = gemm(a, b, m, k, n, out);
    macs::record(executed);
}

/// `out += a · b`; returns the number of scalar multiplies performed.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) -> u64 {
    let mut executed = 0u64;
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
            executed += n as u64;
        }
    }
    executed
}

/// `out += a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let dot: T = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            out[i * n + j] = out[i * n + j] + dot;
        }
    }
}

/// `out += aᵀ · b` for `a: [m, k]`, `b: [m, n]`, producing `[k, n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o = *o + av * bv;
            }
        }
    }
}
