use rand::Rng;

use super::tensor::{broadcast_offsets, broadcast_shape, Tensor};
use super::TensorError;

/// Batch-norm numerical epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-average update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Which statistics a batch-norm call normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch; optionally fold
    /// them into the running averages.
    Batch { update_running: bool },
    /// Normalize with the stored running averages.
    Running,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Clamp { x: Var, min: f64, max: f64 },
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Matmul(Var, Var),
    Conv1d { x: Var, w: Var, bias: Option<Var>, dilation: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<f64> },
    NormLast(Var),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Clamp { .. } => "clamp",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Matmul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d_dilated",
            Op::BatchNorm { .. } => "batchnorm_1d",
            Op::Dropout { .. } => "dropout",
            Op::NormLast(..) => "euclidean_norm_lastaxis",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of executed operations.
///
/// Nodes are pushed in execution order, so the node vector is always a
/// topological order of the computation; `backward` walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Dot product with four independent accumulators; fixed summation order
/// for a given length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last root(s) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::Shape {
            op: op_name,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        Ok((out, sa, sb))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (out_shape, sa, sb) = self.binary(a, b, op.name())?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(i, j)| f(va[*i], vb[*j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if let Some(i) = self.value(b).data().iter().position(|v| *v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("denominator element {i} is zero"),
            });
        }
        self.elementwise(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a + c).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::MulScalar(x, c), rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sums over `axis`; with `keepdim` the axis is kept with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| f(*a)).collect();
        let t = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Var {
        self.unary(x, Op::Clamp { x, min, max }, |a| a.clamp(min, max))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(i) = self.value(x).data().iter().position(|v| *v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative argument at element {i}"),
            });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                axpy(va[i * k + p], &vb[p * m..(p + 1) * m], row);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Matmul(a, b), rg))
    }

    /// Dilated 1-D convolution without padding, channels-last.
    ///
    /// `x: [batch, len, c_in]`, `w: [kernel, c_in, c_out]`, `bias: [c_out]`;
    /// output `[batch, len − dilation·(kernel − 1), c_out]`. Every output
    /// element accumulates its terms in the same order regardless of the
    /// input length.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || dilation == 0 {
            return Err(TensorError::Shape {
                op: "conv1d_dilated",
                left: sx,
                right: sw,
            });
        }
        let (batch, len, c_in) = (sx[0], sx[1], sx[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        let span = dilation * (kernel - 1) + 1;
        if len < span {
            return Err(TensorError::Contract(format!(
                "conv1d_dilated: input length {len} shorter than receptive field {span}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::Shape {
                    op: "conv1d_dilated",
                    left: vec![c_out],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let out_len = len - span + 1;
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![0.0; batch * out_len * c_out];
        for b in 0..batch {
            for t in 0..out_len {
                let row = &mut out[(b * out_len + t) * c_out..(b * out_len + t + 1) * c_out];
                if let Some(bv) = bias {
                    row.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for kk in 0..kernel {
                    let xrow = &vx[(b * len + t + kk * dilation) * c_in..][..c_in];
                    for (ci, xv) in xrow.iter().enumerate() {
                        axpy(*xv, &vw[(kk * c_in + ci) * c_out..][..c_out], row);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[batch, out_len, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
            },
            rg,
        ))
    }

    /// Batch normalization over every axis but the last (channel) axis.
    pub fn batchnorm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning,
        mode: BnMode,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(TensorError::Shape {
                op: "batchnorm_1d",
                left: sx,
                right: self.shape(gamma).to_vec(),
            });
        }
        let vx = self.value(x).data();
        let rows = vx.len() / c;
        let (mean, var, batch_stats) = match mode {
            BnMode::Batch { .. } => {
                if rows < 2 {
                    return Err(TensorError::Contract(
                        "batchnorm_1d: batch statistics need at least two rows".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&vx[r * c..(r + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(&vx[r * c..(r + 1) * c]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            BnMode::Running => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                let h = (vx[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + bta[ch];
            }
        }
        if let BnMode::Batch { update_running: true } = mode {
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for ch in 0..c {
                running.mean[ch] = (1.0 - BN_MOMENTUM) * running.mean[ch] + BN_MOMENTUM * mean[ch];
                running.var[ch] = (1.0 - BN_MOMENTUM) * running.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes with probability `p` and scales survivors by
    /// `1/(1−p)` when `train` is set; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn euclidean_norm_lastaxis(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| TensorError::Contract("euclidean_norm_lastaxis on a scalar".into()))?;
        let vx = self.value(x).data();
        let out: Vec<f64> = vx
            .chunks_exact(d.max(1))
            .map(|row| row.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&sx[..sx.len() - 1], out)?, Op::NormLast(x), rg))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(TensorError::Contract(format!(
                "narrow: range {start}..{} out of bounds for axis {axis} of {sx:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Gathers the given positions along `axis` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || indices.iter().any(|i| *i >= sx[axis]) {
            return Err(TensorError::Contract(format!(
                "index_select: index out of bounds for axis {axis} of {sx:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&src[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Adds d(root)/d(v) into the stored gradient of every reachable node
    /// that requires gradients; calling it again accumulates.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let out_val = node.value.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        // Reduce a broadcast gradient onto an input's shape.
        let reduce_into = |buf: &mut [f64], in_shape: &[usize], grads: &mut dyn Iterator<Item = f64>| {
            if in_shape == out_shape {
                buf.iter_mut().zip(grads).for_each(|(b, v)| *b += v);
            } else {
                let offs = broadcast_offsets(out_shape, in_shape);
                for (o, v) in offs.iter().zip(grads) {
                    buf[*o] += v;
                }
            }
        };
        let operands = |a: Var, b: Var| -> (Vec<usize>, Vec<usize>) {
            let sa = self.nodes[a.0].value.shape();
            let sb = self.nodes[b.0].value.shape();
            (broadcast_offsets(out_shape, sa), broadcast_offsets(out_shape, sb))
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                send(*a, &mut |buf| reduce_into(buf, &sa, &mut g.iter().copied()));
                send(*b, &mut |buf| reduce_into(buf, &sb, &mut g.iter().copied()));
            }
            Op::Sub(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                send(*a, &mut |buf| reduce_into(buf, &sa, &mut g.iter().copied()));
                send(*b, &mut |buf| reduce_into(buf, &sb, &mut g.iter().map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (oa, ob) = operands(*a, *b);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                send(*a, &mut |buf| {
                    reduce_into(buf, &sa, &mut g.iter().zip(&ob).map(|(gv, j)| gv * vb[*j]))
                });
                send(*b, &mut |buf| {
                    reduce_into(buf, &sb, &mut g.iter().zip(&oa).map(|(gv, j)| gv * va[*j]))
                });
            }
            Op::Div(a, b) => {
                let (oa, ob) = operands(*a, *b);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                send(*a, &mut |buf| {
                    reduce_into(buf, &sa, &mut g.iter().zip(&ob).map(|(gv, j)| gv / vb[*j]))
                });
                send(*b, &mut |buf| {
                    reduce_into(
                        buf,
                        &sb,
                        &mut g
                            .iter()
                            .zip(oa.iter().zip(&ob))
                            .map(|(gv, (i, j))| -gv * va[*i] / (vb[*j] * vb[*j])),
                    )
                });
            }
            Op::AddScalar(x) => send(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, v)| *b += v)),
            Op::MulScalar(x, c) => send(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, v)| *b += c * v)),
            Op::SumAll(x) => send(*x, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                send(*x, &mut |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                buf[(o * n + k) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    send(*v, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            buf[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    });
                    offset += n;
                }
            }
            Op::Clamp { x, min, max } => {
                let vx = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        if *xv >= *min && *xv <= *max {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *b += gv;
                        } else if *xv < 0.0 {
                            *b -= gv;
                        }
                    }
                });
            }
            Op::Sqrt(x) => send(*x, &mut |buf| {
                for ((b, gv), y) in buf.iter_mut().zip(g).zip(out_val) {
                    if *y > 0.0 {
                        *b += 0.5 * gv / y;
                    }
                }
            }),
            Op::Square(x) => {
                let vx = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        *b += 2.0 * xv * gv;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                send(*x, &mut |buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(vx) {
                        if *xv > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                send(*a, &mut |buf| {
                    for i in 0..n {
                        for p in 0..k {
                            buf[i * k + p] += dot(&g[i * m..(i + 1) * m], &vb[p * m..(p + 1) * m]);
                        }
                    }
                });
                send(*b, &mut |buf| {
                    for i in 0..n {
                        for p in 0..k {
                            axpy(va[i * k + p], &g[i * m..(i + 1) * m], &mut buf[p * m..(p + 1) * m]);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
            } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (batch, len, c_in) = (sx[0], sx[1], sx[2]);
                let (kernel, c_out) = (sw[0], sw[2]);
                let out_len = out_shape[1];
                let vx = self.value(*x).data();
                let vw = self.value(*w).data();
                let d = *dilation;
                send(*x, &mut |buf| {
                    for b in 0..batch {
                        for t in 0..out_len {
                            let grow = &g[(b * out_len + t) * c_out..][..c_out];
                            for kk in 0..kernel {
                                let dst = &mut buf[(b * len + t + kk * d) * c_in..][..c_in];
                                for (ci, dv) in dst.iter_mut().enumerate() {
                                    *dv += dot(grow, &vw[(kk * c_in + ci) * c_out..][..c_out]);
                                }
                            }
                        }
                    }
                });
                send(*w, &mut |buf| {
                    for b in 0..batch {
                        for t in 0..out_len {
                            let grow = &g[(b * out_len + t) * c_out..][..c_out];
                            for kk in 0..kernel {
                                let xrow = &vx[(b * len + t + kk * d) * c_in..][..c_in];
                                for (ci, xv) in xrow.iter().enumerate() {
                                    axpy(*xv, grow, &mut buf[(kk * c_in + ci) * c_out..][..c_out]);
                                }
                            }
                        }
                    }
                });
                if let Some(bv) = bias {
                    send(*bv, &mut |buf| {
                        for row in g.chunks_exact(c_out) {
                            buf.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        sum_g[ch] += g[r * c + ch];
                        sum_gx[ch] += g[r * c + ch] * xhat[r * c + ch];
                    }
                }
                send(*gamma, &mut |buf| buf.iter_mut().zip(&sum_gx).for_each(|(b, v)| *b += v));
                send(*beta, &mut |buf| buf.iter_mut().zip(&sum_g).for_each(|(b, v)| *b += v));
                send(*x, &mut |buf| {
                    let n = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            let scale = gm[ch] * inv_std[ch];
                            buf[i] += if *batch_stats {
                                scale * (g[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => send(*x, &mut |buf| {
                for ((b, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                    *b += gv * m;
                }
            }),
            Op::NormLast(x) => {
                let vx = self.value(*x).data();
                let d = self.shape(*x).last().copied().unwrap_or(1).max(1);
                send(*x, &mut |buf| {
                    for (r, (gv, nv)) in g.iter().zip(out_val).enumerate() {
                        if *nv > 0.0 {
                            for j in 0..d {
                                buf[r * d + j] += gv * vx[r * d + j] / nv;
                            }
                        }
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                send(*x, &mut |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let m = indices.len();
                send(*x, &mut |buf| {
                    for o in 0..outer {
                        for (k, &i) in indices.iter().enumerate() {
                            let src = &g[(o * m + k) * inner..(o * m + k + 1) * inner];
                            let dst = &mut buf[(o * n + i) * inner..(o * n + i + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::Reshape(x) => send(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, v)| *b += v)),
        }
    }
}
