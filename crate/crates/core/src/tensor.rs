//! Dense row-major tensors and the math kernels shared by the inference
//! engine and the gradient tape.
//!
//! Values are 32-bit floats during training and inference; every kernel is
//! also instantiable at 64 bits, which the finite-difference gradient checks
//! rely on. Broadcasting is not implemented except where an operation
//! explicitly declares it (the softmax mask may omit leading batch dims).

use crate::error::{Error, Result};
use std::cell::Cell;
use std::fmt;

/// Additive mask value standing in for -inf. Large enough in magnitude to
/// survive row-max subtraction and underflow to exactly 0 after exp, small
/// enough to stay finite in f32.
pub const MASK_NEG_INF: f32 = -1.0e30;

/// Scores at or below this are treated as masked when detecting fully-masked
/// softmax rows. Real attention scores never get anywhere near it.
pub const MASK_THRESHOLD: f32 = -1.0e29;

/// Scalar element type: f32 for training/inference, f64 for gradient checks.
pub trait Element:
    Copy
    + PartialEq
    + PartialOrd
    + Default
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f32(self) -> f32;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn mask_neg_inf() -> Self {
        Self::from_f32(MASK_NEG_INF)
    }
    fn mask_threshold() -> Self {
        Self::from_f32(MASK_THRESHOLD)
    }
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxv(self, other: Self) -> Self {
                if self >= other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Dense n-dimensional array, row-major, contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub type Tensor64 = Tensor<f64>;

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; n],
        }
    }

    pub fn filled(shape: &[usize], v: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[E] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn at2(&self, i: usize, j: usize) -> E {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, b: usize, i: usize, j: usize) -> E {
        debug_assert_eq!(self.rank(), 3);
        self.data[(b * self.shape[1] + i) * self.shape[2] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: E) {
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn set3(&mut self, b: usize, i: usize, j: usize, v: E) {
        debug_assert_eq!(self.rank(), 3);
        self.data[(b * self.shape[1] + i) * self.shape[2] + j] = v;
    }

    /// Rows `start..start+len` of a 2-D tensor, as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() != 2 || start + len > self.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows {}..{} of {:?}",
                start,
                start + len,
                self.shape
            )));
        }
        let w = self.shape[1];
        Tensor::new(
            vec![len, w],
            self.data[start * w..(start + len) * w].to_vec(),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Self {
        debug_assert_eq!(self.rank(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, ctx: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }

    pub fn add_inplace(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale_inplace(&mut self, c: E) {
        for v in self.data.iter_mut() {
            *v = *v * c;
        }
    }
}

/// Counter for multiply-accumulate operations executed by the inference
/// engine. One MAC is one `acc += a * b`. Only dot-product-structured work is
/// counted (projections, attention scores and context, feed-forward, logits
/// head, adapter deltas); norms, rotations, softmax and GELU are not.
#[derive(Default)]
pub struct MacCounter {
    count: Cell<u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.count.set(self.count.get() + n);
    }

    pub fn get(&self) -> u64 {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }
}

fn check2(t: &Tensor<impl Element>, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects rank 2, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check3(t: &Tensor<impl Element>, what: &str) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects rank 3, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a[m,k] @ b[k,n] -> [m,n]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check2(a, "matmul lhs")?;
    check2(b, "matmul rhs")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents {k} vs {k2}"
        )));
    }
    let mut out = vec![E::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] @ b[n,k]^T -> [m,n]` (rows of both operands are contiguous, so
/// this is the fast path for attention scores and the tied output head).
pub fn matmul_bt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check2(a, "matmul_bt lhs")?;
    check2(b, "matmul_bt rhs")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (n, k2) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_bt inner extents {k} vs {k2}"
        )));
    }
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = E::ZERO;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k]^T @ b[m,n] -> [k,n]`.
pub fn matmul_at<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check2(a, "matmul_at lhs")?;
    check2(b, "matmul_at rhs")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (m2, n) = (b.dim(0), b.dim(1));
    if m != m2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul_at outer extents {m} vs {m2}"
        )));
    }
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

fn bmm_impl<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(&Tensor<E>, &Tensor<E>) -> Result<Tensor<E>>,
    what: &str,
) -> Result<Tensor<E>> {
    check3(a, what)?;
    check3(b, what)?;
    if a.dim(0) != b.dim(0) {
        return Err(Error::ShapeMismatch(format!(
            "{what} batch extents {} vs {}",
            a.dim(0),
            b.dim(0)
        )));
    }
    let batch = a.dim(0);
    let (am, ak) = (a.dim(1), a.dim(2));
    let (bm, bk) = (b.dim(1), b.dim(2));
    let mut out_data = Vec::new();
    let mut out_dims = (0, 0);
    for bi in 0..batch {
        let av = Tensor::new(
            vec![am, ak],
            a.data()[bi * am * ak..(bi + 1) * am * ak].to_vec(),
        )?;
        let bv = Tensor::new(
            vec![bm, bk],
            b.data()[bi * bm * bk..(bi + 1) * bm * bk].to_vec(),
        )?;
        let r = f(&av, &bv)?;
        out_dims = (r.dim(0), r.dim(1));
        out_data.extend_from_slice(r.data());
    }
    Tensor::new(vec![batch, out_dims.0, out_dims.1], out_data)
}

/// Batched `a[b,m,k] @ b[b,k,n] -> [b,m,n]`.
pub fn bmm<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    bmm_impl(a, b, matmul, "bmm")
}

/// Batched `a[b,m,k] @ b[b,n,k]^T -> [b,m,n]`.
pub fn bmm_bt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    bmm_impl(a, b, matmul_bt, "bmm_bt")
}

/// Batched `a[b,m,k]^T @ b[b,m,n] -> [b,k,n]`.
pub fn bmm_at<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    bmm_impl(a, b, matmul_at, "bmm_at")
}

fn mask_alignment<E: Element>(x: &Tensor<E>, mask: &Tensor<E>) -> Result<usize> {
    let n = *x.shape().last().unwrap();
    let mn = *mask.shape().last().unwrap();
    if mn != n || mask.len() % n != 0 || x.len() % mask.len() != 0 {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not align with {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    Ok(mask.len() / n)
}

/// Softmax over the last axis with an optional additive mask. The mask must
/// match the trailing dims of `x`; leading batch dims may be omitted and are
/// broadcast. Masked positions come out exactly 0. Numerically stabilized by
/// row-max subtraction; each row is normalized with an f64 accumulator so row
/// sums land well inside 1e-6 of 1.
pub fn softmax_rows<E: Element>(x: &Tensor<E>, mask: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let n = match x.shape().last() {
        Some(&n) if n > 0 => n,
        _ => return Err(Error::ShapeMismatch("softmax over empty rows".into())),
    };
    let mask_rows = match mask {
        Some(m) => mask_alignment(x, m)?,
        None => 0,
    };
    let rows = x.len() / n;
    let mut out = vec![E::ZERO; x.len()];
    let mut scores = vec![E::ZERO; n];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        match mask {
            Some(m) => {
                let mr = &m.data()[(r % mask_rows) * n..(r % mask_rows + 1) * n];
                for j in 0..n {
                    scores[j] = xr[j] + mr[j];
                }
            }
            None => scores.copy_from_slice(xr),
        }
        let mut rowmax = scores[0];
        for &s in &scores[1..] {
            rowmax = rowmax.maxv(s);
        }
        if rowmax <= E::mask_threshold() {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0f64;
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            let e = (scores[j] - rowmax).exp();
            orow[j] = e;
            sum += e.to_f64();
        }
        for o in orow.iter_mut() {
            *o = E::from_f64(o.to_f64() / sum);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Log-softmax over the last axis, no mask. Used for scoring.
pub fn log_softmax_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = match x.shape().last() {
        Some(&n) if n > 0 => n,
        _ => return Err(Error::ShapeMismatch("log_softmax over empty rows".into())),
    };
    let rows = x.len() / n;
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mut rowmax = xr[0];
        for &s in &xr[1..] {
            rowmax = rowmax.maxv(s);
        }
        let mut sum = 0.0f64;
        for &s in xr {
            sum += (s - rowmax).exp().to_f64();
        }
        let lse = E::from_f64(sum.ln());
        let orow = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            orow[j] = xr[j] - rowmax - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub const RMS_EPS: f64 = 1.0e-8;

/// RMS normalization over the last axis with a per-column gain; gain-only,
/// no bias, no mean-centering.
pub fn rms_norm<E: Element>(x: &Tensor<E>, gain: &Tensor<E>) -> Result<Tensor<E>> {
    let d = *x.shape().last().ok_or_else(|| {
        Error::ShapeMismatch("rms_norm over scalar".into())
    })?;
    if gain.shape() != [d] {
        return Err(Error::ShapeMismatch(format!(
            "rms_norm gain {:?} vs width {d}",
            gain.shape()
        )));
    }
    let rows = x.len() / d;
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut ms = E::ZERO;
        for &v in xr {
            ms += v * v;
        }
        let inv = E::ONE / (ms / E::from_f64(d as f64) + E::from_f64(RMS_EPS)).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = xr[j] * inv * gain.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// GELU activation, tanh approximation.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<E: Element>(v: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    half * v * (E::ONE + (c * (v + a * v * v * v)).tanh())
}

pub(crate) fn gelu_grad_scalar<E: Element>(v: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let t = (c * (v + a * v * v * v)).tanh();
    half * (E::ONE + t) + half * v * (E::ONE - t * t) * c * (E::ONE + three * a * v * v)
}

/// Gather embedding rows for a token sequence.
pub fn embed<E: Element>(tokens: &[u32], table: &Tensor<E>) -> Result<Tensor<E>> {
    check2(table, "embed table")?;
    let (vocab, d) = (table.dim(0), table.dim(1));
    let mut out = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::VocabOutOfRange { token: t, vocab });
        }
        out.extend_from_slice(table.row(t as usize));
    }
    Tensor::new(vec![tokens.len(), d], out)
}

/// Mean negative log-likelihood of `targets` under `logits[t,V]`.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, targets: &[u32]) -> Result<E> {
    check2(logits, "cross_entropy logits")?;
    let (t, vocab) = (logits.dim(0), logits.dim(1));
    if t != targets.len() || t == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy rows {t} vs targets {}",
            targets.len()
        )));
    }
    let logp = log_softmax_rows(logits)?;
    let mut sum = E::ZERO;
    for (i, &tok) in targets.iter().enumerate() {
        if tok as usize >= vocab {
            return Err(Error::VocabOutOfRange { token: tok, vocab });
        }
        sum += logp.at2(i, tok as usize);
    }
    Ok(-sum / E::from_f64(t as f64))
}
