use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied by the implementor.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    RepeatRows {
        input: Var,
        times: usize,
    },
    SumAll(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Batch statistics observed by a train-mode batch normalization node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the estimator used for running statistics.
    pub var_unbiased: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias of length {} for {n} columns", b.len()),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(self.value(bias).data()) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// Elementwise `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + width > n {
            return Err(TensorError::shape(
                "slice_cols",
                format!("columns {start}..{} out of {n}", start + width),
            ));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let value = Tensor::matrix(m, width, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { input: a, start }, rg))
    }

    /// Repeats each row `times` times consecutively: row `i` of the input
    /// becomes rows `i*times .. (i+1)*times` of the output.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, TensorError> {
        let (m, n) = self.value(a).dims2("repeat_rows")?;
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n * times);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(src.row(i));
            }
        }
        let value = Tensor::matrix(m * times, n, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RepeatRows { input: a, times }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Train-mode batch normalization over the rows of `x`, using the biased
    /// batch variance for normalization.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        let (m, n) = self.value(x).dims2("batch_norm")?;
        if m < 2 {
            return Err(TensorError::DegenerateBatch { rows: m });
        }
        self.check_affine(gamma, beta, n)?;
        let xv = self.value(x);
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (mu, &v) in mean.iter_mut().zip(xv.row(i)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; n];
        for i in 0..m {
            for ((s, &v), &mu) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let var_unbiased: Vec<f64> = var.iter().map(|s| s / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / m as f64 + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (_, n) = self.value(x).dims2("batch_norm")?;
        self.check_affine(gamma, beta, n)?;
        if running_mean.len() != n || running_var.len() != n {
            return Err(TensorError::shape("batch_norm", "running statistics width"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, n: usize) -> Result<(), TensorError> {
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(TensorError::shape(
                "batch_norm",
                format!("gamma/beta must have length {n}"),
            ));
        }
        Ok(())
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Tensor) {
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            let xr = xhat.row_mut(i);
            for j in 0..xr.len() {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_mut(i);
            for j in 0..or.len() {
                or[j] = g[j] * xhat.row(i)[j] + b[j];
            }
        }
        (xhat, out)
    }

    /// Records a caller-computed forward value whose backward pass is `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// A graph can be differentiated once; record a fresh graph for the next
    /// step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 || !lv.item().is_finite() {
            return Err(TensorError::BadLoss(format!("{:?}", lv.data())));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn input_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>, TensorError> {
        let node = &self.nodes[idx];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, g.matmul_nt(self.value(*b))?));
                }
                if self.rg(*b) {
                    v.push((*b, self.value(*a).matmul_tn(g)?));
                }
                v
            }
            Op::AddBias(x, bias) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for i in 0..g.rows() {
                    for (s, &v) in gb.iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb)?;
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)),
                (*b, g.zip_map(self.value(*a), |gv, av| gv * av)),
            ],
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            )],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |gv, y| gv * y))],
            Op::Ln(a) => vec![(*a, g.zip_map(self.value(*a), |gv, x| gv / x))],
            Op::Square(a) => vec![(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x))],
            Op::Abs(a) => vec![(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            )],
            Op::SliceCols { input, start } => {
                let src = self.value(*input);
                let mut full = Tensor::zeros(src.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    full.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                vec![(*input, full)]
            }
            Op::RepeatRows { input, times } => {
                let src = self.value(*input);
                let mut acc = Tensor::zeros(src.shape());
                for i in 0..src.rows() {
                    let dst = acc.row_mut(i);
                    for r in 0..*times {
                        for (d, &v) in dst.iter_mut().zip(g.row(i * times + r)) {
                            *d += v;
                        }
                    }
                }
                vec![(*input, acc)]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.batch_norm_grads(*input, *gamma, *beta, xhat, inv_std, *train, g)?,
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&values, &node.value, g);
                if gs.len() != inputs.len() {
                    return Err(TensorError::shape(
                        op.name(),
                        format!("{} gradients for {} inputs", gs.len(), inputs.len()),
                    ));
                }
                for (gi, vi) in gs.iter().zip(&values) {
                    if gi.shape() != vi.shape() {
                        return Err(TensorError::shape(op.name(), "gradient shape mismatch"));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_grads(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: &Tensor,
        inv_std: &[f64],
        train: bool,
        g: &Tensor,
    ) -> Result<Vec<(Var, Tensor)>, TensorError> {
        let (m, n) = g.dims2("batch_norm")?;
        let gam = self.value(gamma).data();
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                dgamma[j] += g.row(i)[j] * xhat.row(i)[j];
                dbeta[j] += g.row(i)[j];
            }
        }
        let mut dx = Tensor::zeros(&[m, n]);
        if train {
            // dxhat = g * gamma; dx = inv_std/m * (m dxhat - sum dxhat - xhat * sum(dxhat xhat))
            let mf = m as f64;
            for j in 0..n {
                let sum_dxhat = dbeta[j] * gam[j];
                let sum_dxhat_xhat = dgamma[j] * gam[j];
                for i in 0..m {
                    let dxhat = g.row(i)[j] * gam[j];
                    dx.row_mut(i)[j] = inv_std[j] / mf
                        * (mf * dxhat - sum_dxhat - xhat.row(i)[j] * sum_dxhat_xhat);
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    dx.row_mut(i)[j] = g.row(i)[j] * gam[j] * inv_std[j];
                }
            }
        }
        let gshape = self.value(gamma).shape().to_vec();
        let bshape = self.value(beta).shape().to_vec();
        Ok(vec![
            (input, dx),
            (gamma, Tensor::new(gshape, dgamma)?),
            (beta, Tensor::new(bshape, dbeta)?),
        ])
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        // loss = sum(W v) => dL/dW[i][j] = v[j] for every row i
        let mut g = Graph::new();
        let w = g.variable(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::matrix(3, 1, vec![0.2, -1.0, 4.0]).unwrap());
        let wv = g.matmul(w, v).unwrap();
        let loss = g.sum(wv);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[0.2, -1.0, 4.0, 0.2, -1.0, 4.0]);
        assert_eq!(grads.wrt(v).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_dead_region_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![-3.0, 2.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.backward(y).err(), Some(TensorError::BackwardTwice));
    }

    #[test]
    fn unreached_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.variable(Tensor::zeros(&[2, 2]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::BadLoss(_))));
    }

    #[test]
    fn repeat_rows_accumulates_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let r = g.repeat_rows(x, 3).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let sq = g.square(r);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0, 12.0]);
    }
}
