use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of recorded operations.
///
/// Every backward rule below is written in terms of these same primitives,
/// so a gradient produced by [`Tape::grad`] is itself a node on the tape and
/// can be differentiated again.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Exp,
    Log,
    Sqrt,
    Reciprocal,
    Abs,
    /// Sum of all elements to a scalar.
    Sum,
    /// Scalar broadcast to a shape.
    Expand(Vec<usize>),
    /// `[b, n] -> [1, n]`
    SumRows,
    /// `[1, n] -> [b, n]`
    BroadcastRows(usize),
    /// `[b, n] -> [b, 1]`
    SumCols,
    /// `[b, 1] -> [b, n]`
    BroadcastCols(usize),
    /// Row-wise softmax of a 2-D tensor.
    Softmax,
    /// Mean over rows of `logsumexp(z) - z[label]`.
    SoftmaxCrossEntropy(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Pad {
        axis: usize,
        start: usize,
        total: usize,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Reshape,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Primitive,
    inputs: Vec<Var>,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order.
#[derive(Default, Debug)]
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

    /// Records a leaf. Constants and differentiable inputs are both leaves;
    /// which ones receive gradients is decided at [`Tape::grad`] time.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Primitive::Leaf,
            inputs: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.var(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn primitive(&self, v: Var) -> &Primitive {
        &self.nodes[v.0].op
    }

    fn push(&mut self, op: Primitive, inputs: Vec<Var>, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, inputs });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Applies `op` to `inputs`, recording the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Primitive::Leaf => {
                return Err(TensorError::Invalid("leaves are created with Tape::var".into()))
            }
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            Primitive::Concat { .. } => inputs.len(),
            _ => 1,
        };
        if inputs.len() != arity || arity == 0 {
            return Err(TensorError::Invalid(format!(
                "{op:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let x = &self.nodes[inputs[0].0].value;
        let (value, name) = match &op {
            Primitive::Leaf => unreachable!(),
            Primitive::MatMul => (x.matmul(self.value(inputs[1]))?, "matmul"),
            Primitive::Transpose => (x.transpose()?, "transpose"),
            Primitive::Add => (x.zip_map(self.value(inputs[1]), "add", |a, b| a + b)?, "add"),
            Primitive::Sub => (x.zip_map(self.value(inputs[1]), "sub", |a, b| a - b)?, "sub"),
            Primitive::Mul => (x.zip_map(self.value(inputs[1]), "mul", |a, b| a * b)?, "mul"),
            Primitive::Scale(c) => (x.map(|v| v * c), "scale"),
            Primitive::AddScalar(c) => (x.map(|v| v + c), "add_scalar"),
            Primitive::Relu => (x.map(|v| if v > 0.0 { v } else { 0.0 }), "relu"),
            Primitive::Exp => (x.map(f64::exp), "exp"),
            Primitive::Log => (x.map(f64::ln), "log"),
            Primitive::Sqrt => (x.map(f64::sqrt), "sqrt"),
            Primitive::Reciprocal => (x.map(|v| 1.0 / v), "reciprocal"),
            Primitive::Abs => (x.map(f64::abs), "abs"),
            Primitive::Sum => (Tensor::scalar(x.sum()), "sum"),
            Primitive::Expand(shape) => {
                if x.len() != 1 {
                    return Err(TensorError::Invalid(format!(
                        "expand needs a single-element input, got {:?}",
                        x.shape()
                    )));
                }
                (Tensor::full(shape.clone(), x.item()), "expand")
            }
            Primitive::SumRows => {
                let (b, n) = x.dims2()?;
                let mut out = vec![0.0; n];
                for r in 0..b {
                    for (o, v) in out.iter_mut().zip(&x.data()[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                (Tensor::new(vec![1, n], out)?, "sum_rows")
            }
            Primitive::BroadcastRows(b) => {
                let n = match x.shape() {
                    [1, n] | [n] => *n,
                    s => {
                        return Err(TensorError::Invalid(format!(
                            "broadcast_rows needs [1, n] or [n], got {s:?}"
                        )))
                    }
                };
                let mut out = Vec::with_capacity(b * n);
                for _ in 0..*b {
                    out.extend_from_slice(x.data());
                }
                (Tensor::new(vec![*b, n], out)?, "broadcast_rows")
            }
            Primitive::SumCols => {
                let (b, n) = x.dims2()?;
                let out = (0..b).map(|r| x.data()[r * n..(r + 1) * n].iter().sum()).collect();
                (Tensor::new(vec![b, 1], out)?, "sum_cols")
            }
            Primitive::BroadcastCols(n) => {
                let (b, one) = x.dims2()?;
                if one != 1 {
                    return Err(TensorError::Invalid(format!(
                        "broadcast_cols needs [b, 1], got {:?}",
                        x.shape()
                    )));
                }
                let out = (0..b).flat_map(|r| std::iter::repeat(x.data()[r]).take(*n)).collect();
                (Tensor::new(vec![b, *n], out)?, "broadcast_cols")
            }
            Primitive::Softmax => (softmax_rows(x)?, "softmax"),
            Primitive::SoftmaxCrossEntropy(labels) => {
                (Tensor::scalar(softmax_cross_entropy(x, labels)?), "softmax_cross_entropy")
            }
            Primitive::Slice { axis, start, end } => (x.slice_axis(*axis, *start, *end)?, "slice"),
            Primitive::Pad { axis, start, total } => (x.pad_axis(*axis, *start, *total)?, "pad"),
            Primitive::Concat { axis, sizes } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                if parts.iter().map(|p| p.shape().get(*axis).copied()).collect::<Option<Vec<_>>>()
                    != Some(sizes.clone())
                {
                    return Err(TensorError::Invalid("concat sizes do not match inputs".into()));
                }
                (Tensor::concat_axis(&parts, *axis)?, "concat")
            }
            Primitive::Reshape => {
                return Err(TensorError::Invalid("use Tape::reshape".into()));
            }
        };
        self.push(op, inputs.to_vec(), value, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Reciprocal, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Expand(shape.to_vec()), &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumRows, &[a])
    }
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.apply(Primitive::BroadcastRows(rows), &[a])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumCols, &[a])
    }
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        self.apply(Primitive::BroadcastCols(cols), &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(Primitive::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }
    pub fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        self.apply(Primitive::Pad { axis, start, total }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let sizes = parts
            .iter()
            .map(|p| {
                self.shape(*p).get(axis).copied().ok_or_else(|| {
                    TensorError::Invalid(format!("concat axis {axis} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(Primitive::Concat { axis, sizes }, parts)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        self.push(Primitive::Reshape, vec![a], value, "reshape")
    }

    // ---- composites -------------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.reciprocal(b)?;
        self.mul(a, r)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Inner product of two same-shape tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Column means of a `[b, n]` tensor, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (b, _) = self.value(a).dims2()?;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / b as f64)
    }

    /// Biased (population) column variance of a `[b, n]` tensor, shape `[1, n]`.
    pub fn variance_rows(&mut self, a: Var) -> Result<Var> {
        let (b, _) = self.value(a).dims2()?;
        let mu = self.mean_rows(a)?;
        let mu_b = self.broadcast_rows(mu, b)?;
        let centered = self.sub(a, mu_b)?;
        let sq = self.square(centered)?;
        self.mean_rows(sq)
    }

    /// `x @ w`, plus a row-broadcast bias when given.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let rows = self.value(y).dims2()?.0;
                let bb = self.broadcast_rows(b, rows)?;
                self.add(y, bb)
            }
        }
    }

    // ---- reverse mode ----------------------------------------------------

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// The returned handles are nodes on this tape: they can enter further
    /// computation and be differentiated again. Inputs that `output` does not
    /// depend on get a zero leaf.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(TensorError::Invalid(format!(
                "gradient requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let end = output.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] && self.nodes[i].inputs.iter().any(|v| needs[v.0]) {
                needs[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if needs[output.0] {
            let seed = Tensor::full(self.shape(output).to_vec(), 1.0);
            adjoint[output.0] = Some(self.var(seed));
        }
        for i in (0..end).rev() {
            if !needs[i] || self.nodes[i].op == Primitive::Leaf {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let want: Vec<bool> = inputs.iter().map(|v| needs[v.0]).collect();
            let contributions = self.backward_rule(Var(i), g, &inputs, &want)?;
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(*w).to_vec());
                    Ok(self.var(zeros))
                }
            })
            .collect()
    }

    /// Gradient values only.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(output, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn backward_rule(&mut self, out: Var, g: Var, inputs: &[Var], want: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[out.0].op.clone();
        let a = inputs[0];
        let one = |v: Var| Ok(vec![Some(v)]);
        match op {
            Primitive::Leaf => Ok(vec![]),
            Primitive::MatMul => {
                let b = inputs[1];
                let da = if want[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let db = if want[1] {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }
            Primitive::Transpose => one(self.transpose(g)?),
            Primitive::Add => Ok(vec![Some(g), Some(g)]),
            Primitive::Sub => {
                let db = if want[1] { Some(self.neg(g)?) } else { None };
                Ok(vec![Some(g), db])
            }
            Primitive::Mul => {
                let b = inputs[1];
                let da = if want[0] { Some(self.mul(g, b)?) } else { None };
                let db = if want[1] { Some(self.mul(g, a)?) } else { None };
                Ok(vec![da, db])
            }
            Primitive::Scale(c) => one(self.scale(g, c)?),
            Primitive::AddScalar(_) => one(g),
            Primitive::Relu => {
                // Subgradient at 0 is 0.
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.var(mask);
                one(self.mul(g, m)?)
            }
            Primitive::Exp => one(self.mul(g, out)?),
            Primitive::Log => {
                let r = self.reciprocal(a)?;
                one(self.mul(g, r)?)
            }
            Primitive::Sqrt => {
                let r = self.reciprocal(out)?;
                let t = self.mul(g, r)?;
                one(self.scale(t, 0.5)?)
            }
            Primitive::Reciprocal => {
                let sq = self.mul(out, out)?;
                let t = self.mul(g, sq)?;
                one(self.neg(t)?)
            }
            Primitive::Abs => {
                let sign = self.value(a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.var(sign);
                one(self.mul(g, s)?)
            }
            Primitive::Sum => {
                let shape = self.shape(a).to_vec();
                one(self.expand(g, &shape)?)
            }
            Primitive::Expand(_) => {
                let s = self.sum(g)?;
                let shape = self.shape(a).to_vec();
                one(self.reshape(s, &shape)?)
            }
            Primitive::SumRows => {
                let b = self.value(a).dims2()?.0;
                one(self.broadcast_rows(g, b)?)
            }
            Primitive::BroadcastRows(_) => {
                let s = self.sum_rows(g)?;
                let shape = self.shape(a).to_vec();
                one(self.reshape(s, &shape)?)
            }
            Primitive::SumCols => {
                let n = self.value(a).dims2()?.1;
                one(self.broadcast_cols(g, n)?)
            }
            Primitive::BroadcastCols(_) => one(self.sum_cols(g)?),
            Primitive::Softmax => {
                // ds = s * (g - rowsum(g * s))
                let n = self.value(out).dims2()?.1;
                let gs = self.mul(g, out)?;
                let rs = self.sum_cols(gs)?;
                let rb = self.broadcast_cols(rs, n)?;
                let centered = self.sub(g, rb)?;
                one(self.mul(out, centered)?)
            }
            Primitive::SoftmaxCrossEntropy(labels) => {
                let (b, c) = self.value(a).dims2()?;
                let mut onehot = Tensor::zeros(vec![b, c]);
                for (r, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[r * c + y] = 1.0;
                }
                let y = self.var(onehot);
                let p = self.softmax(a)?;
                let diff = self.sub(p, y)?;
                let ge = self.expand(g, &[b, c])?;
                let t = self.mul(ge, diff)?;
                one(self.scale(t, 1.0 / b as f64)?)
            }
            Primitive::Slice { axis, start, .. } => {
                let total = self.shape(a)[axis];
                one(self.pad(g, axis, start, total)?)
            }
            Primitive::Pad { axis, start, .. } => {
                let width = self.shape(a)[axis];
                one(self.slice(g, axis, start, start + width)?)
            }
            Primitive::Concat { axis, sizes } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for (k, size) in sizes.iter().enumerate() {
                    out.push(if want[k] {
                        Some(self.slice(g, axis, offset, offset + size)?)
                    } else {
                        None
                    });
                    offset += size;
                }
                Ok(out)
            }
            Primitive::Reshape => {
                let shape = self.shape(a).to_vec();
                one(self.reshape(g, &shape)?)
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (b, c) = x.dims2()?;
    let mut out = vec![0.0; b * c];
    for r in 0..b {
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let dst = &mut out[r * c..(r + 1) * c];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(vec![b, c], out)
}

fn softmax_cross_entropy(x: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = x.dims2()?;
    if labels.len() != b {
        return Err(TensorError::Invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(TensorError::Invalid("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TensorError::Invalid(format!("label {y} out of range for {c} classes")));
        }
        let row = &x.data()[r * c..(r + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}
