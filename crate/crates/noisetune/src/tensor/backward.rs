//! Reverse-mode differentiation.
//!
//! `backward` consumes the graph: ops are severed as nodes are processed, so
//! intermediates free eagerly and a second call on the same graph would see
//! only leaves. Each loss therefore gets exactly one backward call — the
//! trainer builds a fresh graph per micro-batch, which also keeps gradient
//! accumulation across micro-batches trivially correct (leaf gradients add).

use std::collections::HashMap;

use super::ops::{matmul_nn, matmul_nt, matmul_tn, swap12, Op};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<F: Scalar> Tensor<F> {
    /// Reverse pass from a scalar root. Accumulates `d(root)/d(leaf)` into
    /// every reachable leaf created with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::Config(
                "backward on a constant graph (no differentiable leaves)".into(),
            ));
        }

        // Reachable differentiable subgraph, keyed by node id. Creation
        // order is a topological order: operands exist before results, so
        // descending id order is a valid reverse sweep.
        let mut nodes: HashMap<u64, Tensor<F>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.insert(t.inner.id, t.clone()).is_some() {
                continue;
            }
            if let Some(op) = t.inner.op.borrow().as_ref() {
                for p in op.parents() {
                    if p.requires_grad() && !nodes.contains_key(&p.inner.id) {
                        stack.push(p);
                    }
                }
            }
        }

        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.inner.id, vec![F::one()]);

        for id in order {
            let node = nodes.get(&id).expect("collected").clone();
            let g = match grads.remove(&id) {
                Some(g) => g,
                None => continue,
            };
            let op = node.inner.op.borrow_mut().take(); // sever as we go
            match op {
                None => {
                    if node.requires_grad() {
                        node.accumulate_grad(&g);
                    }
                }
                Some(op) => propagate(&op, &g, &node, &mut grads),
            }
        }
        Ok(())
    }
}

fn add_into<F: Scalar>(grads: &mut HashMap<u64, Vec<F>>, parent: &Tensor<F>, contrib: Vec<F>) {
    if !parent.requires_grad() {
        return;
    }
    debug_assert_eq!(contrib.len(), parent.numel());
    grads
        .entry(parent.inner.id)
        .and_modify(|g| {
            for (gi, ci) in g.iter_mut().zip(&contrib) {
                *gi = *gi + *ci;
            }
        })
        .or_insert(contrib);
}

#[allow(clippy::too_many_lines)]
fn propagate<F: Scalar>(op: &Op<F>, g: &[F], node: &Tensor<F>, grads: &mut HashMap<u64, Vec<F>>) {
    match op {
        Op::Add(a, b) => {
            add_into(grads, a, g.to_vec());
            add_into(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(grads, a, g.to_vec());
            add_into(grads, b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            add_into(grads, a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect());
            add_into(grads, b, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect());
        }
        Op::Neg(a) => add_into(grads, a, g.iter().map(|&v| -v).collect()),
        Op::Scale(a, c) => add_into(grads, a, g.iter().map(|&v| v * *c).collect()),
        Op::AddScalar(a) => add_into(grads, a, g.to_vec()),
        Op::Exp(a) => {
            // d exp = exp, already sitting in the node's output.
            add_into(grads, a, g.iter().zip(node.data()).map(|(&gv, &y)| gv * y).collect());
        }
        Op::Ln(a) => {
            add_into(grads, a, g.iter().zip(a.data()).map(|(&gv, &x)| gv / x).collect());
        }
        Op::Abs(a) => {
            let contrib = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| {
                    if x > F::zero() {
                        gv
                    } else if x < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                })
                .collect();
            add_into(grads, a, contrib);
        }
        Op::Gelu(a) => {
            let c0 = F::of(0.797_884_560_802_865_4);
            let c1 = F::of(0.044_715);
            let half = F::of(0.5);
            let three = F::of(3.0);
            let contrib = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| {
                    let u = c0 * (x + c1 * x * x * x);
                    let t = u.tanh();
                    let du = c0 * (F::one() + three * c1 * x * x);
                    gv * (half * (F::one() + t) + half * x * (F::one() - t * t) * du)
                })
                .collect();
            add_into(grads, a, contrib);
        }
        Op::Clamp(a, lo, hi) => {
            let contrib = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &x)| if x > *lo && x < *hi { gv } else { F::zero() })
                .collect();
            add_into(grads, a, contrib);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            add_into(grads, a, matmul_nt(g, b.data(), m, n, k));
            add_into(grads, b, matmul_tn(a.data(), g, k, m, n));
        }
        Op::BmmNN(a, b) => {
            let nd = a.ndim();
            let (m, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
            let n = b.shape()[nd - 1];
            let batch = a.numel() / (m * k);
            let mut da = vec![F::zero(); a.numel()];
            let mut db = vec![F::zero(); b.numel()];
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
                da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&matmul_nt(gs, bsl, m, n, k));
                db[bi * k * n..(bi + 1) * k * n].copy_from_slice(&matmul_tn(asl, gs, k, m, n));
            }
            add_into(grads, a, da);
            add_into(grads, b, db);
        }
        Op::BmmNT(a, b) => {
            // c = a · bᵀ with a [..,m,k], b [..,n,k].
            let nd = a.ndim();
            let (m, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
            let n = b.shape()[nd - 2];
            let batch = a.numel() / (m * k);
            let mut da = vec![F::zero(); a.numel()];
            let mut db = vec![F::zero(); b.numel()];
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = &b.data()[bi * n * k..(bi + 1) * n * k];
                // da = g · b ; db = gᵀ · a
                da[bi * m * k..(bi + 1) * m * k].copy_from_slice(&matmul_nn(gs, bsl, m, n, k));
                db[bi * n * k..(bi + 1) * n * k].copy_from_slice(&matmul_tn(gs, asl, n, m, k));
            }
            add_into(grads, a, da);
            add_into(grads, b, db);
        }
        Op::SwapAxes12(a) => {
            let s = node.shape();
            add_into(grads, a, swap12(g, s[0], s[1], s[2], s[3]));
        }
        Op::Reshape(a) => add_into(grads, a, g.to_vec()),
        Op::AddBcastBatch(a, p) => {
            add_into(grads, a, g.to_vec());
            let inner = p.numel().max(1);
            let mut dp = vec![F::zero(); p.numel()];
            for (i, &gv) in g.iter().enumerate() {
                dp[i % inner] = dp[i % inner] + gv;
            }
            add_into(grads, p, dp);
        }
        Op::SubBcastLast(a, m) => {
            add_into(grads, a, g.to_vec());
            let h = *a.shape().last().unwrap();
            let mut dm = vec![F::zero(); m.numel()];
            for (i, &gv) in g.iter().enumerate() {
                dm[i / h] = dm[i / h] - gv;
            }
            add_into(grads, m, dm);
        }
        Op::MulBcastLast(a, m) => {
            let h = *a.shape().last().unwrap();
            let da = g
                .iter()
                .enumerate()
                .map(|(i, &gv)| gv * m.data()[i / h])
                .collect();
            add_into(grads, a, da);
            let mut dm = vec![F::zero(); m.numel()];
            for (i, &gv) in g.iter().enumerate() {
                dm[i / h] = dm[i / h] + gv * a.data()[i];
            }
            add_into(grads, m, dm);
        }
        Op::DivBcastLast(a, m) => {
            let h = *a.shape().last().unwrap();
            let da = g
                .iter()
                .enumerate()
                .map(|(i, &gv)| gv / m.data()[i / h])
                .collect();
            add_into(grads, a, da);
            let mut dm = vec![F::zero(); m.numel()];
            for (i, &gv) in g.iter().enumerate() {
                let mv = m.data()[i / h];
                dm[i / h] = dm[i / h] - gv * a.data()[i] / (mv * mv);
            }
            add_into(grads, m, dm);
        }
        Op::MulScalarNode(a, s) => {
            let sv = s.data()[0];
            add_into(grads, a, g.iter().map(|&gv| gv * sv).collect());
            let mut ds = F::zero();
            for (&gv, &av) in g.iter().zip(a.data()) {
                ds = ds + gv * av;
            }
            add_into(grads, s, vec![ds]);
        }
        Op::DivScalarNode(a, s) => {
            let sv = s.data()[0];
            add_into(grads, a, g.iter().map(|&gv| gv / sv).collect());
            let mut ds = F::zero();
            for (&gv, &av) in g.iter().zip(a.data()) {
                ds = ds - gv * av / (sv * sv);
            }
            add_into(grads, s, vec![ds]);
        }
        Op::AddConstRows(a) => add_into(grads, a, g.to_vec()),
        Op::SumAll(a) => add_into(grads, a, vec![g[0]; a.numel()]),
        Op::MeanAll(a) => {
            let c = g[0] / F::of(a.numel() as f64);
            add_into(grads, a, vec![c; a.numel()]);
        }
        Op::SumLast(a) => {
            let h = *a.shape().last().unwrap();
            let da = (0..a.numel()).map(|i| g[i / h]).collect();
            add_into(grads, a, da);
        }
        Op::VarLast(a) => {
            let h = *a.shape().last().unwrap();
            let hn = F::of(h as f64);
            let two = F::of(2.0);
            let rows = a.numel() / h;
            let mut da = vec![F::zero(); a.numel()];
            for r in 0..rows {
                let row = &a.data()[r * h..(r + 1) * h];
                let mut mean = F::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean / hn;
                for i in 0..h {
                    da[r * h + i] = g[r] * two * (row[i] - mean) / hn;
                }
            }
            add_into(grads, a, da);
        }
        Op::MedianLast(a, picks) => {
            let h = *a.shape().last().unwrap();
            let half = F::of(0.5);
            let mut da = vec![F::zero(); a.numel()];
            for (r, pick) in picks.iter().enumerate() {
                // Odd lengths store the same index twice: two halves add to g.
                da[r * h + pick[0]] = da[r * h + pick[0]] + half * g[r];
                da[r * h + pick[1]] = da[r * h + pick[1]] + half * g[r];
            }
            add_into(grads, a, da);
        }
        Op::SoftmaxLast(a) => {
            let h = *a.shape().last().unwrap();
            let rows = a.numel() / h;
            let y = node.data();
            let mut da = vec![F::zero(); a.numel()];
            for r in 0..rows {
                let ys = &y[r * h..(r + 1) * h];
                let gs = &g[r * h..(r + 1) * h];
                let mut dot = F::zero();
                for (yv, gv) in ys.iter().zip(gs) {
                    dot = dot + *yv * *gv;
                }
                for i in 0..h {
                    da[r * h + i] = ys[i] * (gs[i] - dot);
                }
            }
            add_into(grads, a, da);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let h = *x.shape().last().unwrap();
            let hn = F::of(h as f64);
            let rows = x.numel() / h;
            let mut dx = vec![F::zero(); x.numel()];
            let mut dgamma = vec![F::zero(); h];
            let mut dbeta = vec![F::zero(); h];
            for r in 0..rows {
                let gs = &g[r * h..(r + 1) * h];
                let xh = &xhat[r * h..(r + 1) * h];
                let istd = inv_std[r];
                let mut m1 = F::zero(); // mean of g*gamma
                let mut m2 = F::zero(); // mean of g*gamma*xhat
                for i in 0..h {
                    let gy = gs[i] * gamma.data()[i];
                    m1 = m1 + gy;
                    m2 = m2 + gy * xh[i];
                    dgamma[i] = dgamma[i] + gs[i] * xh[i];
                    dbeta[i] = dbeta[i] + gs[i];
                }
                m1 = m1 / hn;
                m2 = m2 / hn;
                for i in 0..h {
                    let gy = gs[i] * gamma.data()[i];
                    dx[r * h + i] = istd * (gy - m1 - xh[i] * m2);
                }
            }
            add_into(grads, x, dx);
            add_into(grads, gamma, dgamma);
            add_into(grads, beta, dbeta);
        }
        Op::CrossEntropy { logits, probs, targets, mask, n_valid } => {
            let v = *logits.shape().last().unwrap();
            let rows = logits.numel() / v;
            let w = g[0] / F::of(*n_valid as f64);
            let mut dl = vec![F::zero(); logits.numel()];
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let ps = &probs[r * v..(r + 1) * v];
                let ds = &mut dl[r * v..(r + 1) * v];
                for i in 0..v {
                    ds[i] = ps[i] * w;
                }
                ds[targets[r]] = ds[targets[r]] - w;
            }
            add_into(grads, logits, dl);
        }
        Op::GatherRows(table, ids) => {
            let h = table.shape()[1];
            let mut dt = vec![F::zero(); table.numel()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..h {
                    dt[id * h + j] = dt[id * h + j] + g[i * h + j];
                }
            }
            add_into(grads, table, dt);
        }
        Op::SliceRows(a, start) => {
            let c = a.shape()[1];
            let mut da = vec![F::zero(); a.numel()];
            da[start * c..start * c + g.len()].copy_from_slice(g);
            add_into(grads, a, da);
        }
    }
}
