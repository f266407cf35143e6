//! Minimal reverse-mode gradient engine over whole tensors.
//!
//! A [`Tape`] records every executed operation in issue order, which is a
//! topological order because an op can only reference earlier node ids.
//! [`Tape::backward`] walks the record in reverse, applying one
//! vector-Jacobian rule per op and accumulating gradients additively across
//! fan-out. Gradients are returned keyed by parameter name; leaves created
//! without a name are constants and receive none.

use crate::error::{Error, Result};
use crate::tensor::{
    bmm, bmm_at, bmm_bt, gelu_grad_scalar, gelu_scalar, matmul, matmul_at, matmul_bt,
    softmax_rows, Element, Tensor, RMS_EPS,
};
use std::collections::BTreeMap;

pub type NodeId = usize;
pub type Gradients<E> = BTreeMap<String, Tensor<E>>;

enum Op<E: Element> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// `a @ b^T`
    MatmulBt { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    /// batched `a @ b^T`
    BmmBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: E },
    Gelu { a: NodeId },
    RmsNorm { x: NodeId, gain: NodeId },
    SoftmaxRows { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
    Gather { table: NodeId, ids: Vec<u32> },
    ConcatRows { parts: Vec<NodeId> },
    /// concat two rank-3 tensors along axis 1
    ConcatMid { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, start: usize, len: usize },
    /// `[t, h*dh] -> [h, t, dh]`
    SplitHeads { a: NodeId, heads: usize },
    /// `[h, t, dh] -> [t, h*dh]`
    MergeHeads { a: NodeId },
    /// pairwise rotation of `[h, t, dh]` rows; cos/sin indexed `[t][dh/2]`
    Rope { a: NodeId, cos: Vec<E>, sin: Vec<E> },
    Sum { a: NodeId },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    param: Option<String>,
}

/// Ordered record of executed operations; owned by exactly one training step.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        self.nodes.len() - 1
    }

    /// Constant leaf: participates in the graph but accumulates no gradient.
    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf: its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<E>) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].param = Some(name.to_string());
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatmulBt { a, b }))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = bmm(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Bmm { a, b }))
    }

    pub fn bmm_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = bmm_bt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::BmmBt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut v = self.value(a).clone();
        v.add_inplace(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        self.push(v, Op::Gelu { a })
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let v = crate::tensor::rms_norm(self.value(x), self.value(gain))?;
        Ok(self.push(v, Op::RmsNorm { x, gain }))
    }

    /// The mask only shapes the forward weights; masked entries come out as
    /// exact zeros, so the VJP needs no record of it.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&Tensor<E>>) -> Result<NodeId> {
        let v = softmax_rows(self.value(x), mask)?;
        Ok(self.push(v, Op::SoftmaxRows { x }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let nll = crate::tensor::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let v = crate::tensor::embed(ids, self.value(table))?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let w = self.value(parts[0]).dim(1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.dim(1) != w {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows width {w} vs {:?}",
                    t.shape()
                )));
            }
            rows += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, w], data)?;
        Ok(self.push(
            v,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_mid(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) {
            return Err(Error::ShapeMismatch(format!(
                "concat_mid {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (h, t1, t2, dh) = (ta.dim(0), ta.dim(1), tb.dim(1), ta.dim(2));
        let mut data = Vec::with_capacity((t1 + t2) * h * dh);
        for hh in 0..h {
            data.extend_from_slice(&ta.data()[hh * t1 * dh..(hh + 1) * t1 * dh]);
            data.extend_from_slice(&tb.data()[hh * t2 * dh..(hh + 1) * t2 * dh]);
        }
        let v = Tensor::new(vec![h, t1 + t2, dh], data)?;
        Ok(self.push(v, Op::ConcatMid { a, b }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { a, start, len }))
    }

    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || t.dim(1) % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "split_heads {:?} into {heads}",
                t.shape()
            )));
        }
        let (rows, d) = (t.dim(0), t.dim(1));
        let dh = d / heads;
        let mut data = vec![E::ZERO; rows * d];
        for hh in 0..heads {
            for r in 0..rows {
                let src = &t.data()[r * d + hh * dh..r * d + (hh + 1) * dh];
                data[(hh * rows + r) * dh..(hh * rows + r + 1) * dh].copy_from_slice(src);
            }
        }
        let v = Tensor::new(vec![heads, rows, dh], data)?;
        Ok(self.push(v, Op::SplitHeads { a, heads }))
    }

    pub fn merge_heads(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "merge_heads expects rank 3, got {:?}",
                t.shape()
            )));
        }
        let (heads, rows, dh) = (t.dim(0), t.dim(1), t.dim(2));
        let mut data = vec![E::ZERO; heads * rows * dh];
        for hh in 0..heads {
            for r in 0..rows {
                let src = &t.data()[(hh * rows + r) * dh..(hh * rows + r + 1) * dh];
                data[r * heads * dh + hh * dh..r * heads * dh + (hh + 1) * dh].copy_from_slice(src);
            }
        }
        let v = Tensor::new(vec![rows, heads * dh], data)?;
        Ok(self.push(v, Op::MergeHeads { a }))
    }

    /// Rotate dimension pairs of `[h, t, dh]` rows by per-row angles given as
    /// flattened `[t][dh/2]` cosine/sine tables.
    pub fn rope(&mut self, a: NodeId, cos: Vec<E>, sin: Vec<E>) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "rope expects rank 3, got {:?}",
                t.shape()
            )));
        }
        let (_h, rows, dh) = (t.dim(0), t.dim(1), t.dim(2));
        let half = dh / 2;
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(Error::ShapeMismatch("rope table size".into()));
        }
        let v = rope_apply(t, &cos, &sin, false);
        Ok(self.push(v, Op::Rope { a, cos, sin }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = E::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum { a })
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively; a
    /// tape can be walked backward once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::TraceConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::LossNotScalar);
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::filled(self.value(loss).shape(), E::ONE));
        let mut out: Gradients<E> = BTreeMap::new();
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(name) = &self.nodes[id].param {
                match out.get_mut(name) {
                    Some(acc) => acc.add_inplace(&g)?,
                    None => {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let da = matmul_bt(&g, self.value(*b))?;
                    let db = matmul_at(self.value(*a), &g)?;
                    add_grad(&mut grads[*a], da)?;
                    add_grad(&mut grads[*b], db)?;
                }
                Op::MatmulBt { a, b } => {
                    let da = matmul(&g, self.value(*b))?;
                    let db = matmul_at(&g, self.value(*a))?;
                    add_grad(&mut grads[*a], da)?;
                    add_grad(&mut grads[*b], db)?;
                }
                Op::Bmm { a, b } => {
                    let da = bmm_bt(&g, self.value(*b))?;
                    let db = bmm_at(self.value(*a), &g)?;
                    add_grad(&mut grads[*a], da)?;
                    add_grad(&mut grads[*b], db)?;
                }
                Op::BmmBt { a, b } => {
                    let da = bmm(&g, self.value(*b))?;
                    let db = bmm_at(&g, self.value(*a))?;
                    add_grad(&mut grads[*a], da)?;
                    add_grad(&mut grads[*b], db)?;
                }
                Op::Add { a, b } => {
                    add_grad(&mut grads[*a], g.clone())?;
                    add_grad(&mut grads[*b], g)?;
                }
                Op::Mul { a, b } => {
                    let da = elementwise_mul(&g, self.value(*b));
                    let db = elementwise_mul(&g, self.value(*a));
                    add_grad(&mut grads[*a], da)?;
                    add_grad(&mut grads[*b], db)?;
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    add_grad(&mut grads[*a], g.map(|v| v * c))?;
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let da = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                            .collect(),
                    )?;
                    add_grad(&mut grads[*a], da)?;
                }
                Op::RmsNorm { x, gain } => {
                    let (dx, dgain) = rms_norm_vjp(self.value(*x), self.value(*gain), &g)?;
                    add_grad(&mut grads[*x], dx)?;
                    add_grad(&mut grads[*gain], dgain)?;
                }
                Op::SoftmaxRows { x } => {
                    let w = &self.nodes[id].value;
                    let n = *w.shape().last().unwrap();
                    let rows = w.len() / n;
                    let mut dx = vec![E::ZERO; w.len()];
                    for r in 0..rows {
                        let wr = &w.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut dot = E::ZERO;
                        for j in 0..n {
                            dot += wr[j] * gr[j];
                        }
                        for j in 0..n {
                            dx[r * n + j] = wr[j] * (gr[j] - dot);
                        }
                    }
                    add_grad(&mut grads[*x], Tensor::new(w.shape().to_vec(), dx)?)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let probs = softmax_rows(lv, None)?;
                    let t = targets.len();
                    let scale = g.item() / E::from_f64(t as f64);
                    let mut dl = probs;
                    for (i, &tok) in targets.iter().enumerate() {
                        let v = dl.at2(i, tok as usize) - E::ONE;
                        dl.set2(i, tok as usize, v);
                    }
                    dl.scale_inplace(scale);
                    add_grad(&mut grads[*logits], dl)?;
                }
                Op::Gather { table, ids } => {
                    let tbl = self.value(*table);
                    let d = tbl.dim(1);
                    let mut dt = Tensor::zeros(&[tbl.dim(0), d]);
                    for (i, &tok) in ids.iter().enumerate() {
                        let dst = dt.row_mut(tok as usize);
                        let src = &g.data()[i * d..(i + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    add_grad(&mut grads[*table], dt)?;
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(p).dim(0);
                        let dg = g.slice_rows(start, rows)?;
                        start += rows;
                        add_grad(&mut grads[p], dg)?;
                    }
                }
                Op::ConcatMid { a, b } => {
                    let (h, t1, dh) = {
                        let ta = self.value(*a);
                        (ta.dim(0), ta.dim(1), ta.dim(2))
                    };
                    let t2 = self.value(*b).dim(1);
                    let mut da = vec![E::ZERO; h * t1 * dh];
                    let mut db = vec![E::ZERO; h * t2 * dh];
                    for hh in 0..h {
                        let base = hh * (t1 + t2) * dh;
                        da[hh * t1 * dh..(hh + 1) * t1 * dh]
                            .copy_from_slice(&g.data()[base..base + t1 * dh]);
                        db[hh * t2 * dh..(hh + 1) * t2 * dh]
                            .copy_from_slice(&g.data()[base + t1 * dh..base + (t1 + t2) * dh]);
                    }
                    add_grad(&mut grads[*a], Tensor::new(vec![h, t1, dh], da)?)?;
                    add_grad(&mut grads[*b], Tensor::new(vec![h, t2, dh], db)?)?;
                }
                Op::SliceRows { a, start, len } => {
                    let src = self.value(*a);
                    let w = src.dim(1);
                    let mut da = Tensor::zeros(&[src.dim(0), w]);
                    da.data_mut()[start * w..(start + len) * w].copy_from_slice(g.data());
                    add_grad(&mut grads[*a], da)?;
                }
                Op::SplitHeads { a, heads } => {
                    let (heads, rows, dh) = (*heads, g.dim(1), g.dim(2));
                    let d = heads * dh;
                    let mut da = vec![E::ZERO; rows * d];
                    for hh in 0..heads {
                        for r in 0..rows {
                            let src = &g.data()[(hh * rows + r) * dh..(hh * rows + r + 1) * dh];
                            da[r * d + hh * dh..r * d + (hh + 1) * dh].copy_from_slice(src);
                        }
                    }
                    add_grad(&mut grads[*a], Tensor::new(vec![rows, d], da)?)?;
                }
                Op::MergeHeads { a } => {
                    let src = self.value(*a);
                    let (heads, rows, dh) = (src.dim(0), src.dim(1), src.dim(2));
                    let d = heads * dh;
                    let mut da = vec![E::ZERO; heads * rows * dh];
                    for hh in 0..heads {
                        for r in 0..rows {
                            let gsrc = &g.data()[r * d + hh * dh..r * d + (hh + 1) * dh];
                            da[(hh * rows + r) * dh..(hh * rows + r + 1) * dh]
                                .copy_from_slice(gsrc);
                        }
                    }
                    add_grad(&mut grads[*a], Tensor::new(vec![heads, rows, dh], da)?)?;
                }
                Op::Rope { a, cos, sin } => {
                    // rotation is orthogonal: the VJP rotates by the negated angle
                    let da = rope_apply(&g, cos, sin, true);
                    add_grad(&mut grads[*a], da)?;
                }
                Op::Sum { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    add_grad(&mut grads[*a], Tensor::filled(&shape, g.item()))?;
                }
            }
        }
        Ok(out)
    }
}

fn rms_norm_vjp<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    g: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let n = *x.shape().last().unwrap();
    let rows = x.len() / n;
    let nf = E::from_f64(n as f64);
    let eps = E::from_f64(RMS_EPS);
    let mut dx = vec![E::ZERO; x.len()];
    let mut dgain = vec![E::ZERO; n];
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let gr = &g.data()[r * n..(r + 1) * n];
        let mut ms = E::ZERO;
        for &v in xr {
            ms += v * v;
        }
        let rms = (ms / nf + eps).sqrt();
        // u = cotangent routed through the gain; dot couples the norm term
        let mut dot = E::ZERO;
        for j in 0..n {
            dot += gr[j] * gain.data()[j] * xr[j];
        }
        let r3 = rms * rms * rms;
        for j in 0..n {
            let u = gr[j] * gain.data()[j];
            dx[r * n + j] = u / rms - xr[j] * dot / (nf * r3);
            dgain[j] += gr[j] * xr[j] / rms;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![n], dgain)?,
    ))
}

fn elementwise_mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    )
    .expect("same shapes")
}

fn add_grad<E: Element>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) -> Result<()> {
    match slot {
        Some(t) => t.add_inplace(&delta),
        None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

pub(crate) fn rope_apply<E: Element>(
    x: &Tensor<E>,
    cos: &[E],
    sin: &[E],
    invert: bool,
) -> Tensor<E> {
    let (h, rows, dh) = (x.dim(0), x.dim(1), x.dim(2));
    let half = dh / 2;
    let mut out = x.data().to_vec();
    for hh in 0..h {
        for r in 0..rows {
            let base = (hh * rows + r) * dh;
            for i in 0..half {
                let (c, mut s) = (cos[r * half + i], sin[r * half + i]);
                if invert {
                    s = -s;
                }
                let x0 = out[base + 2 * i];
                let x1 = out[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tensor::new(vec![h, rows, dh], out).expect("shape preserved")
}

/// Report from a central-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences, one
/// coordinate at a time. `f` must be deterministic; it returns the loss and
/// the analytic gradients at the given parameter values. Relative error uses
/// a 1e-6 denominator floor so exactly-zero gradients compare cleanly.
pub fn finite_diff_check<F>(
    f: &F,
    params: &BTreeMap<String, Tensor<f64>>,
    step: f64,
) -> Result<FdReport>
where
    F: Fn(&BTreeMap<String, Tensor<f64>>) -> Result<(f64, Gradients<f64>)>,
{
    let (center_loss, analytic) = f(params)?;
    if !center_loss.is_finite() {
        return Err(Error::NonFinite("finite_diff_check center loss".into()));
    }
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for (name, value) in params {
        let zero = Tensor::<f64>::zeros(value.shape());
        let ana = analytic.get(name).unwrap_or(&zero);
        for i in 0..value.len() {
            let mut up = params.clone();
            up.get_mut(name).unwrap().data_mut()[i] += step;
            let (lu, _) = f(&up)?;
            let mut dn = params.clone();
            dn.get_mut(name).unwrap().data_mut()[i] -= step;
            let (ld, _) = f(&dn)?;
            if !lu.is_finite() || !ld.is_finite() {
                return Err(Error::NonFinite(format!("finite_diff_check at {name}[{i}]")));
            }
            let num = (lu - ld) / (2.0 * step);
            let a = ana.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper asserting the spec tolerance.
pub fn assert_grads_match<F>(f: &F, params: &BTreeMap<String, Tensor<f64>>)
where
    F: Fn(&BTreeMap<String, Tensor<f64>>) -> Result<(f64, Gradients<f64>)>,
{
    let report = finite_diff_check(f, params, 1e-4).expect("finite_diff_check failed");
    assert!(
        report.max_rel_err < 1e-4,
        "gradient mismatch at {}[{}]: analytic {} vs numeric {} (rel {})",
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.max_rel_err
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand64(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_square_gives_two_x() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::filled(&[2], 1.0));
        let c = tape.leaf(Tensor::filled(&[2], 3.0));
        let prod = tape.mul(w, c).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["w"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::filled(&[1], 1.0));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TraceConsumed)));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::filled(&[2], 1.0));
        assert!(matches!(tape.backward(w), Err(Error::LossNotScalar)));
    }

    #[test]
    fn fanout_accumulates_additively() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::filled(&[3], 2.0));
        let twice = tape.add(w, w).unwrap();
        let loss = tape.sum(twice);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[2.0, 2.0, 2.0]);
    }

    /// Check one primitive: builds loss = sum(out * c) with a random
    /// constant cotangent so transpose mistakes cannot cancel out.
    fn check_primitive<B>(shapes: &[(&str, Vec<usize>)], seed: u64, build: B)
    where
        B: Fn(&mut Tape<f64>, &BTreeMap<String, NodeId>) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: BTreeMap<String, Tensor<f64>> = shapes
            .iter()
            .map(|(n, s)| (n.to_string(), rand64(s, &mut rng)))
            .collect();
        // cotangent tensor fixed across evaluations
        let cot_seed = seed ^ 0xc0c0;
        let f = |p: &BTreeMap<String, Tensor<f64>>| {
            let mut tape = Tape::<f64>::new();
            let ids: BTreeMap<String, NodeId> = p
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(n, t.clone())))
                .collect();
            let out = build(&mut tape, &ids);
            let mut crng = ChaCha8Rng::seed_from_u64(cot_seed);
            let cot = tape.leaf(rand64(tape.value(out).shape(), &mut crng));
            let prod = tape.mul(out, cot)?;
            let loss = tape.sum(prod);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), g))
        };
        assert_grads_match(&f, &params);
    }

    #[test]
    fn grad_matmul() {
        check_primitive(&[("a", vec![3, 4]), ("b", vec![4, 2])], 1, |t, p| {
            t.matmul(p["a"], p["b"]).unwrap()
        });
    }

    #[test]
    fn grad_matmul_bt() {
        check_primitive(&[("a", vec![3, 4]), ("b", vec![5, 4])], 2, |t, p| {
            t.matmul_bt(p["a"], p["b"]).unwrap()
        });
    }

    #[test]
    fn grad_bmm() {
        check_primitive(&[("a", vec![2, 3, 4]), ("b", vec![2, 4, 2])], 3, |t, p| {
            t.bmm(p["a"], p["b"]).unwrap()
        });
    }

    #[test]
    fn grad_bmm_bt() {
        check_primitive(&[("a", vec![2, 3, 4]), ("b", vec![2, 5, 4])], 4, |t, p| {
            t.bmm_bt(p["a"], p["b"]).unwrap()
        });
    }

    #[test]
    fn grad_add_mul_scale() {
        check_primitive(&[("a", vec![2, 3]), ("b", vec![2, 3])], 5, |t, p| {
            let s = t.add(p["a"], p["b"]).unwrap();
            let m = t.mul(s, p["a"]).unwrap();
            t.scale(m, 0.7)
        });
    }

    #[test]
    fn grad_gelu() {
        check_primitive(&[("a", vec![2, 5])], 6, |t, p| t.gelu(p["a"]));
    }

    #[test]
    fn grad_rms_norm() {
        check_primitive(&[("x", vec![3, 4]), ("g", vec![4])], 7, |t, p| {
            t.rms_norm(p["x"], p["g"]).unwrap()
        });
    }

    #[test]
    fn grad_softmax_with_mask() {
        let mut mask = Tensor::<f64>::zeros(&[3, 4]);
        mask.set2(0, 3, crate::tensor::MASK_NEG_INF as f64);
        mask.set2(2, 0, crate::tensor::MASK_NEG_INF as f64);
        check_primitive(&[("x", vec![3, 4])], 8, move |t, p| {
            let sc = t.scale(p["x"], 2.0);
            t.softmax_rows(sc, Some(&mask)).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let targets = vec![1u32, 0, 3];
        check_primitive(&[("x", vec![3, 4])], 9, move |t, p| {
            t.cross_entropy(p["x"], &targets).unwrap()
        });
    }

    #[test]
    fn grad_gather() {
        let ids = vec![2u32, 0, 2];
        check_primitive(&[("table", vec![4, 3])], 10, move |t, p| {
            t.gather(p["table"], &ids).unwrap()
        });
    }

    #[test]
    fn grad_concat_and_slice() {
        check_primitive(&[("a", vec![2, 3]), ("b", vec![3, 3])], 11, |t, p| {
            let c = t.concat_rows(&[p["a"], p["b"]]).unwrap();
            t.slice_rows(c, 1, 3).unwrap()
        });
    }

    #[test]
    fn grad_concat_mid() {
        check_primitive(&[("a", vec![2, 2, 3]), ("b", vec![2, 4, 3])], 12, |t, p| {
            t.concat_mid(p["a"], p["b"]).unwrap()
        });
    }

    #[test]
    fn grad_split_merge_heads() {
        check_primitive(&[("x", vec![3, 6])], 13, |t, p| {
            let s = t.split_heads(p["x"], 2).unwrap();
            t.merge_heads(s).unwrap()
        });
    }

    #[test]
    fn grad_rope() {
        let rows = 3;
        let half = 2;
        let cos: Vec<f64> = (0..rows * half).map(|i| ((i as f64) * 0.3).cos()).collect();
        let sin: Vec<f64> = (0..rows * half).map(|i| ((i as f64) * 0.3).sin()).collect();
        check_primitive(&[("x", vec![2, 3, 4])], 14, move |t, p| {
            t.rope(p["x"], cos.clone(), sin.clone()).unwrap()
        });
    }

    #[test]
    fn split_then_merge_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand64(&[4, 6], &mut rng);
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(x.clone());
        let s = tape.split_heads(id, 3).unwrap();
        let m = tape.merge_heads(s).unwrap();
        assert_eq!(tape.value(m).data(), x.data());
    }
}
