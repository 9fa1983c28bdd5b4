//! Forward operations. Each differentiable op records an [`Op`] carrying its
//! parent handles plus whatever forward context the chain rule needs (saved
//! softmax outputs, layer-norm statistics, median positions...). The
//! matching derivative lives in `backward.rs`.

use std::rc::Rc;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Recorded operation. Parents are held by handle, so a graph keeps its
/// inputs alive until `backward` severs it.
pub(crate) enum Op<F: Scalar> {
    Add(Tensor<F>, Tensor<F>),
    Sub(Tensor<F>, Tensor<F>),
    Mul(Tensor<F>, Tensor<F>),
    Neg(Tensor<F>),
    Scale(Tensor<F>, F),
    AddScalar(Tensor<F>),
    Exp(Tensor<F>),
    Ln(Tensor<F>),
    Abs(Tensor<F>),
    Gelu(Tensor<F>),
    Clamp(Tensor<F>, F, F),
    /// 2-D matrix product `[m,k]·[k,n]`.
    Matmul(Tensor<F>, Tensor<F>),
    /// Batched `[..,m,k]·[..,k,n]`.
    BmmNN(Tensor<F>, Tensor<F>),
    /// Batched `[..,m,k]·[..,n,k]ᵀ`.
    BmmNT(Tensor<F>, Tensor<F>),
    /// `[a,b,c,d] -> [a,c,b,d]`.
    SwapAxes12(Tensor<F>),
    Reshape(Tensor<F>),
    /// `[B, rest..] + [rest..]`, broadcast over the leading axis.
    AddBcastBatch(Tensor<F>, Tensor<F>),
    /// `[.., H] op [..]`: the right operand is broadcast along the last axis.
    SubBcastLast(Tensor<F>, Tensor<F>),
    MulBcastLast(Tensor<F>, Tensor<F>),
    DivBcastLast(Tensor<F>, Tensor<F>),
    /// Multiply / divide by a single-element tensor (itself differentiable).
    MulScalarNode(Tensor<F>, Tensor<F>),
    DivScalarNode(Tensor<F>, Tensor<F>),
    /// Add a constant `[r, c]` table, broadcast over leading batch dims.
    AddConstRows(Tensor<F>),
    SumAll(Tensor<F>),
    MeanAll(Tensor<F>),
    SumLast(Tensor<F>),
    /// Population variance over the last axis.
    VarLast(Tensor<F>),
    /// Median over the last axis; saves, per row, the one or two source
    /// positions the value came from (both entries equal for odd length).
    MedianLast(Tensor<F>, Vec<[usize; 2]>),
    SoftmaxLast(Tensor<F>),
    LayerNorm {
        x: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    /// Mean masked next-token cross-entropy, fused for numerical stability.
    CrossEntropy {
        logits: Tensor<F>,
        probs: Vec<F>,
        targets: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
        n_valid: usize,
    },
    /// Row lookup `table[ids[i], :]`; the embedding op.
    GatherRows(Tensor<F>, Rc<Vec<usize>>),
    /// Contiguous row slice of a 2-D tensor starting at a fixed offset.
    SliceRows(Tensor<F>, usize),
}

impl<F: Scalar> Op<F> {
    pub(crate) fn parents(&self) -> Vec<Tensor<F>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | BmmNN(a, b) | BmmNT(a, b)
            | AddBcastBatch(a, b) | SubBcastLast(a, b) | MulBcastLast(a, b)
            | DivBcastLast(a, b) | MulScalarNode(a, b) | DivScalarNode(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Abs(a) | Gelu(a)
            | Clamp(a, _, _) | SwapAxes12(a) | Reshape(a) | AddConstRows(a) | SumAll(a)
            | MeanAll(a) | SumLast(a) | VarLast(a) | MedianLast(a, _) | SoftmaxLast(a)
            | GatherRows(a, _) | SliceRows(a, _) => vec![a.clone()],
            LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            CrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Shape of everything but the last axis.
fn outer_shape(shape: &[usize]) -> &[usize] {
    &shape[..shape.len().saturating_sub(1)]
}

impl<F: Scalar> Tensor<F> {
    fn unary(&self, data: Vec<F>, op: Op<F>) -> Tensor<F> {
        Tensor::make(data, self.shape().to_vec(), self.requires_grad(), Some(op))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || other.requires_grad(),
            Some(Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || other.requires_grad(),
            Some(Op::Sub(self.clone(), other.clone())),
        ))
    }

    /// Elementwise product. Multiplying by a constant tensor (noise draws,
    /// loss masks, dropout masks) routes gradient only through `self`.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || other.requires_grad(),
            Some(Op::Mul(self.clone(), other.clone())),
        ))
    }

    pub fn neg(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&a| -a).collect();
        self.unary(data, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a * c).collect();
        self.unary(data, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a + c).collect();
        self.unary(data, Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a.exp()).collect();
        self.unary(data, Op::Exp(self.clone()))
    }

    /// Natural log. The whole input must be strictly positive; probability
    /// arguments are expected to arrive epsilon-shifted.
    pub fn ln(&self) -> Result<Tensor<F>> {
        if self.data().iter().any(|&a| a <= F::zero()) {
            return Err(Error::Numeric("ln: non-positive input".into()));
        }
        let data = self.data().iter().map(|&a| a.ln()).collect();
        Ok(self.unary(data, Op::Ln(self.clone())))
    }

    pub fn abs(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&a| a.abs()).collect();
        self.unary(data, Op::Abs(self.clone()))
    }

    /// GELU with the tanh approximation (the usual transformer activation).
    pub fn gelu(&self) -> Tensor<F> {
        let c0 = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c1 = F::of(0.044_715);
        let half = F::of(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        self.unary(data, Op::Gelu(self.clone()))
    }

    /// Clamp to `[lo, hi]`. Gradient passes through strictly interior values.
    pub fn clamp(&self, lo: F, hi: F) -> Result<Tensor<F>> {
        if !(lo <= hi) {
            return Err(Error::Config(format!("clamp: lo {lo} > hi {hi}")));
        }
        let data = self.data().iter().map(|&a| a.max(lo).min(hi)).collect();
        Ok(self.unary(data, Op::Clamp(self.clone(), lo, hi)))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![F::zero(); m * n];
        matmul_kernel(self.data(), other.data(), &mut out, m, k, n);
        Ok(Tensor::make(
            out,
            vec![m, n],
            self.requires_grad() || other.requires_grad(),
            Some(Op::Matmul(self.clone(), other.clone())),
        ))
    }

    /// Batched matmul `[..,m,k]·[..,k,n]`; leading dims must match exactly.
    pub fn bmm(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() < 2
            || other.ndim() != self.ndim()
            || self.shape()[..self.ndim() - 2] != other.shape()[..other.ndim() - 2]
            || self.shape()[self.ndim() - 1] != other.shape()[other.ndim() - 2]
        {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let nd = self.ndim();
        let (m, k) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let n = other.shape()[nd - 1];
        let batch = numel_of(&self.shape()[..nd - 2]);
        let mut out = vec![F::zero(); batch * m * n];
        for b in 0..batch {
            matmul_kernel(
                &self.data()[b * m * k..(b + 1) * m * k],
                &other.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape()[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor::make(
            out,
            shape,
            self.requires_grad() || other.requires_grad(),
            Some(Op::BmmNN(self.clone(), other.clone())),
        ))
    }

    /// Batched `self · otherᵀ`: `[..,m,k]·[..,n,k] -> [..,m,n]` (attention
    /// scores).
    pub fn bmm_nt(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() < 2
            || other.ndim() != self.ndim()
            || self.shape()[..self.ndim() - 2] != other.shape()[..other.ndim() - 2]
            || self.shape()[self.ndim() - 1] != other.shape()[other.ndim() - 1]
        {
            return Err(Error::shape(
                "bmm_nt",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let nd = self.ndim();
        let (m, k) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let n = other.shape()[nd - 2];
        let batch = numel_of(&self.shape()[..nd - 2]);
        let mut out = vec![F::zero(); batch * m * n];
        for b in 0..batch {
            let a = &self.data()[b * m * k..(b + 1) * m * k];
            let bm = &other.data()[b * n * k..(b + 1) * n * k];
            let o = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for kk in 0..k {
                        acc = acc + a[i * k + kk] * bm[j * k + kk];
                    }
                    o[i * n + j] = acc;
                }
            }
        }
        let mut shape = self.shape()[..nd - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor::make(
            out,
            shape,
            self.requires_grad() || other.requires_grad(),
            Some(Op::BmmNT(self.clone(), other.clone())),
        ))
    }

    /// `[a,b,c,d] -> [a,c,b,d]` (head split/merge in attention).
    pub fn swap_axes12(&self) -> Result<Tensor<F>> {
        if self.ndim() != 4 {
            return Err(Error::shape("swap_axes12", format!("{:?} is not 4-d", self.shape())));
        }
        let s = self.shape().to_vec();
        let data = swap12_kernel(self.data(), s[0], s[1], s[2], s[3]);
        Ok(Tensor::make(
            data,
            vec![s[0], s[2], s[1], s[3]],
            self.requires_grad(),
            Some(Op::SwapAxes12(self.clone())),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::make(
            self.data().to_vec(),
            shape.to_vec(),
            self.requires_grad(),
            Some(Op::Reshape(self.clone())),
        ))
    }

    /// `[B, rest..] + [rest..]` broadcast over the leading axis (positional
    /// embeddings onto a batch).
    pub fn add_bcast_batch(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ndim() < 1 || &self.shape()[1..] != other.shape() {
            return Err(Error::shape(
                "add_bcast_batch",
                format!("{:?} + {:?}", self.shape(), other.shape()),
            ));
        }
        let inner = other.numel();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + other.data()[i % inner.max(1)])
            .collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || other.requires_grad(),
            Some(Op::AddBcastBatch(self.clone(), other.clone())),
        ))
    }

    fn bcast_last(
        &self,
        other: &Tensor<F>,
        op_name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Tensor<F>> {
        if self.ndim() < 1 || outer_shape(self.shape()) != other.shape() {
            return Err(Error::shape(
                op_name,
                format!("{:?} with per-row {:?}", self.shape(), other.shape()),
            ));
        }
        let h = *self.shape().last().unwrap();
        if h == 0 {
            return Err(Error::shape(op_name, "empty last axis"));
        }
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, other.data()[i / h]))
            .collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || other.requires_grad(),
            Some(op),
        ))
    }

    /// `[.., H] - [..]`, the per-row value broadcast along the last axis.
    pub fn sub_bcast_last(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.bcast_last(
            other,
            "sub_bcast_last",
            |a, b| a - b,
            Op::SubBcastLast(self.clone(), other.clone()),
        )
    }

    pub fn mul_bcast_last(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.bcast_last(
            other,
            "mul_bcast_last",
            |a, b| a * b,
            Op::MulBcastLast(self.clone(), other.clone()),
        )
    }

    pub fn div_bcast_last(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if other.data().iter().any(|&b| b == F::zero()) {
            return Err(Error::Numeric("div_bcast_last: zero divisor".into()));
        }
        self.bcast_last(
            other,
            "div_bcast_last",
            |a, b| a / b,
            Op::DivBcastLast(self.clone(), other.clone()),
        )
    }

    /// Multiply every element by a single-element tensor (e.g. the learnable
    /// noise scale α); gradient flows into both operands.
    pub fn mul_scalar_node(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_scalar_node", format!("scalar side {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|&a| a * sv).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || s.requires_grad(),
            Some(Op::MulScalarNode(self.clone(), s.clone())),
        ))
    }

    pub fn div_scalar_node(&self, s: &Tensor<F>) -> Result<Tensor<F>> {
        if s.numel() != 1 {
            return Err(Error::shape("div_scalar_node", format!("scalar side {:?}", s.shape())));
        }
        let sv = s.data()[0];
        if sv == F::zero() {
            return Err(Error::Numeric("div_scalar_node: zero divisor".into()));
        }
        let data = self.data().iter().map(|&a| a / sv).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad() || s.requires_grad(),
            Some(Op::DivScalarNode(self.clone(), s.clone())),
        ))
    }

    /// Add a constant `[r, c]` table to a `[.., r, c]` tensor, broadcast over
    /// the leading dims (the additive causal mask).
    pub fn add_const_rows(&self, table: &[F], r: usize, c: usize) -> Result<Tensor<F>> {
        if self.ndim() < 2
            || self.shape()[self.ndim() - 2] != r
            || self.shape()[self.ndim() - 1] != c
            || table.len() != r * c
        {
            return Err(Error::shape(
                "add_const_rows",
                format!("{:?} + const [{r}, {c}]", self.shape()),
            ));
        }
        let rc = r * c;
        let data = self.data().iter().enumerate().map(|(i, &a)| a + table[i % rc]).collect();
        Ok(Tensor::make(
            data,
            self.shape().to_vec(),
            self.requires_grad(),
            Some(Op::AddConstRows(self.clone())),
        ))
    }

    pub fn sum_all(&self) -> Tensor<F> {
        let mut acc = F::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::make(vec![acc], Vec::new(), self.requires_grad(), Some(Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Result<Tensor<F>> {
        if self.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let mut acc = F::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let n = F::of(self.numel() as f64);
        Ok(Tensor::make(
            vec![acc / n],
            Vec::new(),
            self.requires_grad(),
            Some(Op::MeanAll(self.clone())),
        ))
    }

    fn check_last_axis(&self, op: &'static str) -> Result<usize> {
        if self.ndim() < 1 {
            return Err(Error::shape(op, "scalar has no last axis"));
        }
        let h = *self.shape().last().unwrap();
        if h == 0 {
            return Err(Error::shape(op, "empty last axis"));
        }
        Ok(h)
    }

    pub fn sum_last(&self) -> Result<Tensor<F>> {
        let h = self.check_last_axis("sum_last")?;
        let rows = self.numel() / h;
        let mut out = vec![F::zero(); rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = F::zero();
            for &v in &self.data()[r * h..(r + 1) * h] {
                acc = acc + v;
            }
            *o = acc;
        }
        Ok(Tensor::make(
            out,
            outer_shape(self.shape()).to_vec(),
            self.requires_grad(),
            Some(Op::SumLast(self.clone())),
        ))
    }

    /// Population variance over the last axis (divides by the axis length).
    pub fn var_last(&self) -> Result<Tensor<F>> {
        let h = self.check_last_axis("var_last")?;
        let rows = self.numel() / h;
        let hn = F::of(h as f64);
        let mut out = vec![F::zero(); rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data()[r * h..(r + 1) * h];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / hn;
            let mut acc = F::zero();
            for &v in row {
                let d = v - mean;
                acc = acc + d * d;
            }
            *o = acc / hn;
        }
        Ok(Tensor::make(
            out,
            outer_shape(self.shape()).to_vec(),
            self.requires_grad(),
            Some(Op::VarLast(self.clone())),
        ))
    }

    /// Median over the last axis. Even lengths take the mean of the two
    /// middle order statistics; the gradient routes half to each source
    /// position (all of it to the single middle position for odd lengths).
    pub fn median_last(&self) -> Result<Tensor<F>> {
        let h = self.check_last_axis("median_last")?;
        let rows = self.numel() / h;
        let mut out = vec![F::zero(); rows];
        let mut picks = Vec::with_capacity(rows);
        let mut idx: Vec<usize> = Vec::with_capacity(h);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data()[r * h..(r + 1) * h];
            idx.clear();
            idx.extend(0..h);
            // Finite data (engine invariant) plus an index tiebreak makes
            // this a deterministic total order.
            idx.sort_unstable_by(|&a, &b| {
                row[a].partial_cmp(&row[b]).expect("finite").then(a.cmp(&b))
            });
            if h % 2 == 1 {
                let m = idx[h / 2];
                *o = row[m];
                picks.push([m, m]);
            } else {
                let lo = idx[h / 2 - 1];
                let hi = idx[h / 2];
                *o = (row[lo] + row[hi]) * F::of(0.5);
                picks.push([lo, hi]);
            }
        }
        Ok(Tensor::make(
            out,
            outer_shape(self.shape()).to_vec(),
            self.requires_grad(),
            Some(Op::MedianLast(self.clone(), picks)),
        ))
    }

    /// Row-wise softmax over the last axis, with the usual max-shift. The
    /// shift is constant with respect to the graph, which changes nothing:
    /// softmax is shift-invariant.
    pub fn softmax_last(&self) -> Result<Tensor<F>> {
        let h = self.check_last_axis("softmax_last")?;
        let rows = self.numel() / h;
        let mut out = vec![F::zero(); rows * h];
        for r in 0..rows {
            let row = &self.data()[r * h..(r + 1) * h];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max(v);
            }
            let o = &mut out[r * h..(r + 1) * h];
            let mut denom = F::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *oi = e;
                denom = denom + e;
            }
            for oi in o.iter_mut() {
                *oi = *oi / denom;
            }
        }
        Ok(Tensor::make(
            out,
            self.shape().to_vec(),
            self.requires_grad(),
            Some(Op::SoftmaxLast(self.clone())),
        ))
    }

    /// Layer normalization over the last axis with learnable `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
        let h = self.check_last_axis("layer_norm")?;
        if gamma.shape() != [h] || beta.shape() != [h] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma {:?} beta {:?} for width {h}", gamma.shape(), beta.shape()),
            ));
        }
        let rows = self.numel() / h;
        let hn = F::of(h as f64);
        let mut out = vec![F::zero(); rows * h];
        let mut xhat = vec![F::zero(); rows * h];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &self.data()[r * h..(r + 1) * h];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / hn;
            let mut var = F::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / hn;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..h {
                let xh = (row[i] - mean) * istd;
                xhat[r * h + i] = xh;
                out[r * h + i] = gamma.data()[i] * xh + beta.data()[i];
            }
        }
        Ok(Tensor::make(
            out,
            self.shape().to_vec(),
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            Some(Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            }),
        ))
    }

    /// Mean next-token cross-entropy over the rows where `mask` is true.
    /// `self` is interpreted as `[.., V]` logits flattened to rows.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor<F>> {
        let v = self.check_last_axis("cross_entropy")?;
        let rows = self.numel() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Config(format!("cross_entropy: target id {t} >= vocab {v}")));
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(Error::Degenerate("cross_entropy: empty loss mask".into()));
        }
        let mut probs = vec![F::zero(); rows * v];
        let mut loss = F::zero();
        for r in 0..rows {
            let row = &self.data()[r * v..(r + 1) * v];
            let mut mx = row[0];
            for &z in row {
                mx = mx.max(z);
            }
            let mut denom = F::zero();
            let p = &mut probs[r * v..(r + 1) * v];
            for (pi, &z) in p.iter_mut().zip(row) {
                let e = (z - mx).exp();
                *pi = e;
                denom = denom + e;
            }
            for pi in p.iter_mut() {
                *pi = *pi / denom;
            }
            if mask[r] {
                // lse - z_t, computed against the same shifted values.
                loss = loss + denom.ln() + mx - row[targets[r]];
            }
        }
        let loss = loss / F::of(n_valid as f64);
        Ok(Tensor::make(
            vec![loss],
            Vec::new(),
            self.requires_grad(),
            Some(Op::CrossEntropy {
                logits: self.clone(),
                probs,
                targets: Rc::new(targets.to_vec()),
                mask: Rc::new(mask.to_vec()),
                n_valid,
            }),
        ))
    }

    /// Embedding lookup: `table[ids[i], :]` stacked into `[N, H]`.
    pub fn gather_rows(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
        if table.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", table.shape())));
        }
        let (v, h) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Config(format!("gather_rows: id {bad} >= table rows {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&table.data()[i * h..(i + 1) * h]);
        }
        Ok(Tensor::make(
            out,
            vec![ids.len(), h],
            table.requires_grad(),
            Some(Op::GatherRows(table.clone(), Rc::new(ids.to_vec()))),
        ))
    }

    /// Rows `[start, start+len)` of a 2-D tensor (positional table prefix).
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<F>> {
        if self.ndim() != 2 {
            return Err(Error::shape("slice_rows", format!("{:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows [{start}, {}) of {r}", start + len),
            ));
        }
        Ok(Tensor::make(
            self.data()[start * c..(start + len) * c].to_vec(),
            vec![len, c],
            self.requires_grad(),
            Some(Op::SliceRows(self.clone(), start)),
        ))
    }
}

/// `c += a · b`, row-major, ikj loop order so the inner loop runs along
/// contiguous rows of `b` and `c`.
fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == F::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
}

pub(crate) fn swap12_kernel<F: Scalar>(data: &[F], d0: usize, d1: usize, d2: usize, d3: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let src = ((a * d1 + b) * d2 + c) * d3;
                let dst = ((a * d2 + c) * d1 + b) * d3;
                out[dst..dst + d3].copy_from_slice(&data[src..src + d3]);
            }
        }
    }
    out
}

/// Transposed GEMM helpers for the backward pass.
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    // a: [m,k], b: [n,k] -> a · bᵀ: [m,n]
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = F::zero();
            for kk in 0..k {
                acc = acc + a[i * k + kk] * b[j * k + kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    // a: [k,m], b: [k,n] -> aᵀ · b: [m,n]
    let mut out = vec![F::zero(); m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            if aki == F::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aki * brow[j];
            }
        }
    }
    out
}

pub(crate) fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_kernel(a, b, &mut out, m, k, n);
    out
}

pub(crate) use swap12_kernel as swap12;
