//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every forward op appends a node holding its output
//! value, parent handles, and whatever intermediates the backward pass needs.
//! [`Graph::backward`] walks the tape in reverse topological order (which is
//! simply reverse insertion order) and accumulates gradients into every node
//! that requires them. A graph can be differentiated once; building ops or
//! calling backward on a consumed graph is an error.

use crate::error::{Error, Result};
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// Batch-norm variance stabilizer.
pub const BN_EPS: f64 = 1e-5;

/// Probabilities below this are clamped inside `log`, so entropy terms stay
/// finite when softmax underflows to zero.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    SoftmaxRows {
        z: Var,
    },
    Log {
        x: Var,
    },
    MulScalar {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    ElementwiseMul {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; backward visits them in exact reverse order.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    spent: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            spent: false,
        }
    }

    /// Register an input tensor. Gradients accumulate into it during
    /// backward iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Register a constant (gradient never tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent backward pass w.r.t. `v`, if any was
    /// accumulated there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Saved batch statistics (mean, biased variance) of a
    /// `batchnorm_train` node. Used to update running statistics during
    /// pretraining.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.spent {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = mm_nn(ta.data(), tb.data(), m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, rg))
    }

    /// Elementwise addition of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// `x[m,n] + b[n]`, bias broadcast across rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (tx, tb) = (self.value(x), self.value(b));
        if !tx.is_matrix() || tb.shape() != [tx.cols()] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        let rg = self.needs_grad(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias { x, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x }, rg))
    }

    /// Normalize `x[m,n]` per feature with the batch's own mean/variance,
    /// then apply the affine `gamma[n]`, `beta[n]`. Backward differentiates
    /// through the batch statistics (full Jacobian).
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_train",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        if m < 2 {
            return Err(Error::BatchTooSmall {
                op: "batchnorm_train",
                min: 2,
                got: m,
            });
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_train",
                lhs: tg.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let xd = tx.data();
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                mean[j] += xd[i * n + j];
            }
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        let mut var = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let d = xd[i * n + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let xhat = (xd[i * n + j] - mean[j]) * inv_std[j];
                out[i * n + j] = g[j] * xhat + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
            },
            rg,
        ))
    }

    /// Normalize `x[m,n]` with supplied running statistics (treated as
    /// constants), then apply the affine.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_eval",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        if running_mean.len() != n || running_var.len() != n {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_eval",
                lhs: vec![running_mean.len(), running_var.len()],
                rhs: vec![n],
            });
        }
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_eval",
                lhs: tg.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let xd = tx.data();
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (xd[i * n + j] - running_mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = g[j] * xhat[i * n + j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a matrix, numerically stabilized by the row max.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        self.check_live()?;
        let tz = self.value(z);
        if !tz.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: tz.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tz.rows(), tz.cols());
        let zd = tz.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &zd[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        let rg = self.needs_grad(&[z]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows { z }, rg))
    }

    /// Elementwise `ln(max(x, LOG_CLAMP))`. The clamp keeps entropy terms
    /// finite when probabilities underflow; it only affects values below
    /// 1e-12.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| v.max(LOG_CLAMP).ln()).collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Log { x }, rg))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| v * c).collect();
        let shape = tx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulScalar { x, c }, rg))
    }

    /// Sum of all entries, as a `[1]` scalar tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    /// Column means of `x[m,n]`, as a `[1,n]` row vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let tx = self.value(x);
        if !tx.is_matrix() || tx.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let xd = tx.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xd[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows { x }, rg))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "elementwise_mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ElementwiseMul { a, b }, rg))
    }

    /// Accumulate d(loss)/d(node) into every node that requires grad, then
    /// mark the graph consumed. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).unwrap())
            })
            .collect();

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                if let Some(g) = &self.grads[i] {
                    if !g.all_finite() {
                        return Err(Error::NonFinite("gradient".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if nodes[a.0].requires_grad {
                    let da = mm_nt(gout, tb.data(), m, n, k);
                    add_into(grads, *a, &da);
                }
                if nodes[b.0].requires_grad {
                    let db = mm_tn(ta.data(), gout, m, k, n);
                    add_into(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                add_into(grads, *a, gout);
                add_into(grads, *b, gout);
            }
            Op::AddBias { x, b } => {
                add_into(grads, *x, gout);
                if nodes[b.0].requires_grad {
                    let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j];
                        }
                    }
                    add_into(grads, *b, &db);
                }
            }
            Op::Relu { x } => {
                let xd = nodes[x.0].value.data();
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                ..
            } => {
                let tx = &nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                let xd = tx.data();
                let g = nodes[gamma.0].value.data();

                if nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let xhat = (xd[i * n + j] - mean[j]) * inv_std[j];
                            dg[j] += gout[i * n + j] * xhat;
                        }
                    }
                    add_into(grads, *gamma, &dg);
                }
                if nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j];
                        }
                    }
                    add_into(grads, *beta, &db);
                }
                if nodes[x.0].requires_grad {
                    // Full Jacobian through the batch statistics.
                    let mf = m as f64;
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xc = 0.0;
                        let mut sum_xc = 0.0;
                        for i in 0..m {
                            let dxhat = gout[i * n + j] * g[j];
                            let xc = xd[i * n + j] - mean[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xc += dxhat * xc;
                            sum_xc += xc;
                        }
                        let istd = inv_std[j];
                        let dvar = sum_dxhat_xc * (-0.5) * istd * istd * istd;
                        let dmu = -istd * sum_dxhat + dvar * (-2.0 / mf) * sum_xc;
                        for i in 0..m {
                            let dxhat = gout[i * n + j] * g[j];
                            let xc = xd[i * n + j] - mean[j];
                            dx[i * n + j] = dxhat * istd + dvar * 2.0 * xc / mf + dmu / mf;
                        }
                    }
                    add_into(grads, *x, &dx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let tx = &nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                let g = nodes[gamma.0].value.data();
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gout[i * n + j] * g[j] * inv_std[j];
                        }
                    }
                    add_into(grads, *x, &dx);
                }
                if nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gout[i * n + j] * xhat[i * n + j];
                        }
                    }
                    add_into(grads, *gamma, &dg);
                }
                if nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gout[i * n + j];
                        }
                    }
                    add_into(grads, *beta, &db);
                }
            }
            Op::SoftmaxRows { z } => {
                if nodes[z.0].requires_grad {
                    let p = nodes[idx].value.data();
                    let (m, n) = (nodes[idx].value.rows(), nodes[idx].value.cols());
                    let mut dz = vec![0.0; m * n];
                    for i in 0..m {
                        let prow = &p[i * n..(i + 1) * n];
                        let grow = &gout[i * n..(i + 1) * n];
                        let inner: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..n {
                            dz[i * n + j] = prow[j] * (grow[j] - inner);
                        }
                    }
                    add_into(grads, *z, &dz);
                }
            }
            Op::Log { x } => {
                let xd = nodes[x.0].value.data();
                let dx: Vec<f64> = gout
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > LOG_CLAMP { g / v } else { 0.0 })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::MulScalar { x, c } => {
                let dx: Vec<f64> = gout.iter().map(|&g| g * c).collect();
                add_into(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![gout[0]; nodes[x.0].value.numel()];
                add_into(grads, *x, &dx);
            }
            Op::MeanRows { x } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let mf = m as f64;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gout[j] / mf;
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::ElementwiseMul { a, b } => {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    let da: Vec<f64> = gout.iter().zip(bd).map(|(&g, &v)| g * v).collect();
                    add_into(grads, *a, &da);
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    let db: Vec<f64> = gout.iter().zip(ad).map(|(&g, &v)| g * v).collect();
                    add_into(grads, *b, &db);
                }
            }
        }
    }
}
