use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Tanh(usize),
    Mean(Vec<usize>),
    Gather { table: usize, ids: Vec<usize> },
    StackRows(Vec<usize>),
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Tanh(a) | Op::Sum(a) => vec![*a],
            Op::Mean(xs) | Op::StackRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive ops in execution order so that gradients can be
/// replayed in reverse. A fresh tape is built for every forward call.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Input)
    }

    /// A differentiable leaf holding a copy of the parameter's values.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.detached(), Op::Param)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::from_vec(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    /// Adds a `1×n` bias to every row of an `m×n` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != n {
            return Err(Error::Dimension(format!("bias {br}x{bc} for {m}x{n} input")));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let t = Tensor::from_vec(m, n, out)?;
        Ok(self.push(t, Op::AddBias(x.0, bias.0)))
    }

    /// `input · weight + bias`, bias broadcast over rows.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = self.matmul(input, weight)?;
        self.add_bias(z, bias)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.tanh()).collect();
        let t = Tensor::from_vec(v.rows(), v.cols(), data).unwrap();
        self.push(t, Op::Tanh(x.0))
    }

    /// Elementwise arithmetic mean of equally shaped values.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty list".into()))?;
        let shape = self.value(*first).shape();
        let mut acc = vec![0.0; shape.0 * shape.1];
        for &x in xs {
            let v = self.value(x);
            if v.shape() != shape {
                return Err(Error::Dimension(format!(
                    "mean of {:?} with {:?}",
                    shape,
                    v.shape()
                )));
            }
            acc.iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        let k = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let t = Tensor::from_vec(shape.0, shape.1, acc)?;
        Ok(self.push(t, Op::Mean(xs.iter().map(|v| v.0).collect())))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Index(format!(
                "row {bad} of a {}-row table",
                tv.rows()
            )));
        }
        let t = tv.gather_rows(ids);
        Ok(self.push(
            t,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Vertical concatenation of equally wide values.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("stack of an empty list".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(Error::Dimension(format!(
                    "stacking {} cols onto {cols}",
                    v.cols()
                )));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let t = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(t, Op::StackRows(xs.iter().map(|v| v.0).collect())))
    }

    /// Sum of all entries, as a 1×1 value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, max-subtracted.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.shape();
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "{} targets for {b} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {bad} with {c} classes")));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - row[t];
        }
        let loss = total / b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a {}x{} value; a scalar is required",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].needs_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.shape();
                let n = nodes[*b].value.cols();
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                acc(*a, &mut |buf| matmul_a_bt_acc(g, bv, buf, m, k, n));
                acc(*b, &mut |buf| matmul_at_b_acc(av, g, buf, m, k, n));
            }
            Op::AddBias(x, bias) => {
                let n = nodes[*bias].value.cols();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv));
                acc(*bias, &mut |buf| {
                    for row in g.chunks(n.max(1)) {
                        buf.iter_mut().zip(row).for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = nodes[idx].value.data();
                acc(*x, &mut |buf| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Mean(xs) => {
                let scale = 1.0 / xs.len() as f64;
                for &x in xs {
                    acc(x, &mut |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * scale)
                    });
                }
            }
            Op::Gather { table, ids } => {
                let cols = nodes[*table].value.cols();
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * cols..(r + 1) * cols];
                        buf[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, gv)| *o += gv);
                    }
                });
            }
            Op::StackRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x].value.len();
                    let part = &g[offset..offset + len];
                    acc(x, &mut |buf| {
                        buf.iter_mut().zip(part).for_each(|(o, gv)| *o += gv)
                    });
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += gv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[*logits].value.cols();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * c..(r + 1) * c];
                        for (j, (o, p)) in buf[r * c..(r + 1) * c].iter_mut().zip(row).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *o += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Result of a reverse sweep: one gradient per recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// ∂loss/∂v. Values the loss does not depend on get a zero tensor.
    pub fn wrt(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(r, c, g.clone()).unwrap(),
            None => Tensor::zeros(r, c),
        }
    }
}
