use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::norm::{batch_norm_backward, batch_norm_forward, BnCache, BnMode};
use super::{Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside this module and recorded on the tape.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op only supplies the vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// One entry per input; `None` for inputs that receive no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        cache: BnCache<T>,
    },
    GlobalAvgPool(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it; backward walks the tape in exact reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.clear_grad());
    }

    fn push(&mut self, op: Op<T>, mut value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|i| self.nodes[i.0].value.requires_grad()),
        };
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward accumulates a gradient into it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t.with_requires_grad(true))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let t = self.value(a);
        Tensor::from_vec(t.shape(), t.data().iter().map(|&x| f(x)).collect())
    }

    fn rank(&self, op: &'static str, v: Var, expected: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != expected {
            return Err(TensorError::Rank {
                op,
                expected,
                shape: s.to_vec(),
            });
        }
        Ok(s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.map(a, |x| x * c)?;
        self.push(Op::Scale(a, c), v)
    }

    /// `x[N×K] + b[K]`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.rank("add_bias", x, 2)?.to_vec();
        let sb = self.shape(b).to_vec();
        if sb != [s[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: s,
                rhs: sb,
            });
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(s[1])
            .flat_map(|row| row.iter().zip(bias).map(|(&r, &c)| r + c))
            .collect();
        let v = Tensor::from_vec(&s, data)?;
        self.push(Op::AddBias(x, b), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_count(t.numel());
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.rank("matmul", a, 2)?.to_vec();
        let sb = self.rank("matmul", b, 2)?.to_vec();
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let v = Tensor::from_vec(&[sa[0], sb[1]], data)?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.rank("transpose", a, 2)?.to_vec();
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let v = Tensor::from_vec(&[s[1], s[0]], data)?;
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape(a), v)
    }

    /// Fully-connected layer: `x[N×in] · w[out×in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() })?;
        self.push(Op::Relu(a), v)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.rank("conv2d", input, 4)?.to_vec();
        let sk = self.rank("conv2d", kernel, 4)?.to_vec();
        let geom = ConvGeometry::new(&si, &sk, stride, padding)?;
        let data = conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let v = Tensor::from_vec(&geom.output_shape(), data)?;
        self.push(Op::Conv2d { input, kernel, geom }, v)
    }

    pub fn batch_norm2d(&mut self, x: Var, scale: Var, shift: Var, eps: T, mode: BnMode<'_, T>) -> Result<Var> {
        let sx = self.rank("batch_norm2d", x, 4)?.to_vec();
        for p in [scale, shift] {
            if self.shape(p) != [sx[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm2d",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (data, cache) = batch_norm_forward(
            self.value(x).data(),
            &sx,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
            mode,
        )?;
        let v = Tensor::from_vec(&sx, data)?;
        self.push(Op::BatchNorm { x, scale, shift, cache }, v)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.rank("global_avg_pool", x, 4)?.to_vec();
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_count(hw);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_vec(&[s[0], s[1]], data)?;
        self.push(Op::GlobalAvgPool(x), v)
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            output,
        )
    }

    /// Reverse pass from a scalar node. Gradients accumulate into every
    /// leaf that requires grad; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Err(TensorError::NoGradPath);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, contribution) in self.vjp(i, &g) {
                if self.nodes[input.0].value.requires_grad() {
                    accumulate(&mut grads[input.0], contribution);
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(tb).map(|(&gi, &y)| gi * y).collect()),
                    (*b, g.iter().zip(ta).map(|(&gi, &x)| gi * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::AddBias(x, b) => {
                let k = val(*b).numel();
                let mut gb = vec![T::zero(); k];
                for row in g.chunks(k) {
                    gb.iter_mut().zip(row).for_each(|(s, &r)| *s += r);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / T::from_count(n); n])]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(val(*b).data(), k, n);
                let at = transpose_raw(val(*a).data(), m, k);
                vec![(*a, matmul_raw(g, &bt, m, n, k)), (*b, matmul_raw(&at, g, k, m, n))]
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                vec![(*a, transpose_raw(g, s[0], s[1]))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(*a).data();
                let mask = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*a, mask)]
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = conv2d_backward(val(*input).data(), val(*kernel).data(), g, geom);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::BatchNorm { x, scale, shift, cache } => {
                let (gx, gs, gb) = batch_norm_backward(g, val(*x).shape(), val(*scale).data(), cache);
                vec![(*x, gx), (*scale, gs), (*shift, gb)]
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_count(hw);
                let out = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect();
                vec![(*a, out)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                op.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, v)| gi.map(|gi| (*v, gi)))
                    .collect()
            }
        }
    }
}
