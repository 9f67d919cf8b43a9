//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Leaves are
//! registered with [`Graph::leaf`] (or [`Graph::param`] for trainable
//! tensors); every op applied to an input that requires a gradient is
//! appended to the tape, and [`Graph::backward`] replays the tape in reverse.
//!
//! Broadcasting is deliberately absent: apart from the scalar factor carried
//! by [`OpKind::Scale`], every elementwise op requires identical shapes.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownKind(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset() first")]
    BackwardTwice,
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major n-dimensional array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {n} values but data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    /// Marks the tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Internal constructor for op outputs; finiteness is checked by the caller.
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Every operation the graph knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[M,K]x[K,N]`, `[B,M,K]x[K,N]` or batched `[B,M,K]x[B,K,N]`.
    MatMul,
    Add,
    Mul,
    Scale(f64),
    /// Swaps the last two dimensions.
    Transpose,
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    /// Inputs: x `[.., D]`, gain `[D]`, bias `[D]`.
    LayerNorm {
        eps: f64,
    },
    Gelu,
    /// Gathers rows of a 2-D table.
    EmbeddingGather(Vec<usize>),
    Mean,
    Sum,
    Log,
    Exp,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SoftmaxLastDim => "softmax-lastdim",
            OpKind::LogSoftmaxLastDim => "log-softmax-lastdim",
            OpKind::LayerNorm { .. } => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::EmbeddingGather(_) => "embedding-gather",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            OpKind::Scale(s) => write!(f, "scale({s})"),
            OpKind::Reshape(s) => write!(f, "reshape({})", join(s)),
            OpKind::Concat { axis } => write!(f, "concat({axis})"),
            OpKind::Slice { axis, start, end } => write!(f, "slice({axis},{start},{end})"),
            OpKind::LayerNorm { eps } => write!(f, "layernorm({eps})"),
            OpKind::EmbeddingGather(idx) => write!(f, "embedding-gather({})", join(idx)),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name` or `name(arg,arg,..)`, e.g. `slice(1,0,4)` or `scale(0.5)`.
impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let unknown = || TensorError::UnknownKind(s.to_string());
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(&s[open + 1..s.len() - 1])),
            Some(_) => return Err(unknown()),
            None => (s, None),
        };
        let ints = |a: Option<&str>| -> Result<Vec<usize>> {
            let a = a.ok_or_else(unknown)?;
            if a.trim().is_empty() {
                return Ok(Vec::new());
            }
            a.split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| unknown()))
                .collect()
        };
        let float = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(unknown)?
                .trim()
                .parse::<f64>()
                .map_err(|_| unknown())
        };
        let kind = match (name, args) {
            ("matmul", None) => OpKind::MatMul,
            ("add", None) => OpKind::Add,
            ("mul", None) => OpKind::Mul,
            ("transpose", None) => OpKind::Transpose,
            ("softmax-lastdim", None) => OpKind::SoftmaxLastDim,
            ("log-softmax-lastdim", None) => OpKind::LogSoftmaxLastDim,
            ("gelu", None) => OpKind::Gelu,
            ("mean", None) => OpKind::Mean,
            ("sum", None) => OpKind::Sum,
            ("log", None) => OpKind::Log,
            ("exp", None) => OpKind::Exp,
            ("layernorm", None) => OpKind::LayerNorm { eps: 1e-5 },
            ("layernorm", a) => OpKind::LayerNorm { eps: float(a)? },
            ("scale", a) => OpKind::Scale(float(a)?),
            ("reshape", a) => OpKind::Reshape(ints(a)?),
            ("embedding-gather", a) => OpKind::EmbeddingGather(ints(a)?),
            ("concat", a) => match ints(a)?.as_slice() {
                [axis] => OpKind::Concat { axis: *axis },
                _ => return Err(unknown()),
            },
            ("slice", a) => match ints(a)?.as_slice() {
                [axis, start, end] => OpKind::Slice {
                    axis: *axis,
                    start: *start,
                    end: *end,
                },
                _ => return Err(unknown()),
            },
            _ => return Err(unknown()),
        };
        Ok(kind)
    }
}

/// Handle to a value owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
    /// Per-row statistics saved by layernorm for its backward rule.
    saved: Vec<f64>,
}

/// Gradients of every trainable leaf after a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Value store plus tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    tape: Vec<usize>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Registers a leaf; it is trainable iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.push(t, None, Vec::new(), requires_grad, Vec::new())
    }

    /// Registers a copy of `t` as a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of ops recorded for backward.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    /// Op kinds on the tape in execution order.
    pub fn tape_kinds(&self) -> Vec<&OpKind> {
        self.tape
            .iter()
            .filter_map(|&i| self.nodes[i].op.as_ref())
            .collect()
    }

    /// Clears leaf gradients so that backward may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<OpKind>,
        inputs: Vec<Var>,
        requires_grad: bool,
        saved: Vec<f64>,
    ) -> Var {
        let id = self.nodes.len();
        if op.is_some() && requires_grad {
            self.tape.push(id);
        }
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            saved,
        });
        Var(id)
    }

    /// Applies `kind` to `inputs`, recording it on the tape when any input is trainable.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (value, saved) = self.forward(&kind, inputs)?;
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(kind.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(kind), inputs.to_vec(), requires_grad, saved))
    }

    fn arity(kind: &OpKind, inputs: &[Var]) -> Result<()> {
        let want = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        match want {
            Some(n) if inputs.len() != n => Err(mismatch(
                "arity",
                format!("{} takes {n} inputs, got {}", kind.name(), inputs.len()),
            )),
            None if inputs.is_empty() => Err(mismatch("concat", "no inputs")),
            _ => Ok(()),
        }
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Vec<f64>)> {
        Self::arity(kind, inputs)?;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let dims = matmul_dims(&a.shape, &b.shape)?;
                let mut c = vec![0.0; dims.batch * dims.m * dims.n];
                dims.for_each_batch(|ai, bi, ci| {
                    gemm(
                        dims.m,
                        dims.k,
                        dims.n,
                        &a.data[ai..],
                        false,
                        &b.data[bi..],
                        false,
                        &mut c[ci..],
                        0.0,
                    )
                });
                Tensor::raw(dims.out_shape.clone(), c)
            }
            OpKind::Add | OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape != b.shape {
                    return Err(mismatch(
                        kind.name(),
                        format!("{:?} vs {:?}", a.shape, b.shape),
                    ));
                }
                let data = if *kind == OpKind::Add {
                    a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()
                } else {
                    a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect()
                };
                Tensor::raw(a.shape.clone(), data)
            }
            OpKind::Scale(s) => {
                let a = val(0);
                Tensor::raw(a.shape.clone(), a.data.iter().map(|x| x * s).collect())
            }
            OpKind::Transpose => {
                let a = val(0);
                let r = a.shape.len();
                if r < 2 {
                    return Err(mismatch("transpose", format!("rank {r} < 2")));
                }
                let (rows, cols) = (a.shape[r - 2], a.shape[r - 1]);
                let mut shape = a.shape.clone();
                shape.swap(r - 2, r - 1);
                Tensor::raw(shape, transpose_blocks(&a.data, rows, cols))
            }
            OpKind::Reshape(shape) => {
                let a = val(0);
                let n: usize = shape.iter().product();
                if shape.is_empty() || shape.contains(&0) || n != a.data.len() {
                    return Err(mismatch("reshape", format!("{:?} -> {:?}", a.shape, shape)));
                }
                Tensor::raw(shape.clone(), a.data.clone())
            }
            OpKind::Concat { axis } => {
                let first = &val(0).shape;
                if *axis >= first.len() {
                    return Err(mismatch(
                        "concat",
                        format!("axis {axis} for rank {}", first.len()),
                    ));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = &val(i).shape;
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(first)
                            .enumerate()
                            .all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(mismatch("concat", format!("{first:?} vs {s:?}")));
                    }
                    total += s[*axis];
                }
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = val(i);
                        let chunk = t.shape[*axis] * inner;
                        data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                Tensor::raw(shape, data)
            }
            OpKind::Slice { axis, start, end } => {
                let a = val(0);
                if *axis >= a.shape.len() || start >= end || *end > a.shape[*axis] {
                    return Err(mismatch(
                        "slice",
                        format!("{start}..{end} on axis {axis} of {:?}", a.shape),
                    ));
                }
                let outer: usize = a.shape[..*axis].iter().product();
                let inner: usize = a.shape[axis + 1..].iter().product();
                let len = a.shape[*axis];
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    data.extend_from_slice(&a.data[base + start * inner..base + end * inner]);
                }
                let mut shape = a.shape.clone();
                shape[*axis] = end - start;
                Tensor::raw(shape, data)
            }
            OpKind::SoftmaxLastDim | OpKind::LogSoftmaxLastDim => {
                let a = val(0);
                let d = *a.shape.last().unwrap();
                let mut data = a.data.clone();
                let log = *kind == OpKind::LogSoftmaxLastDim;
                for row in data.chunks_mut(d) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    if log {
                        let lz = z.ln() + max;
                        row.iter_mut().for_each(|x| *x -= lz);
                    } else {
                        row.iter_mut().for_each(|x| *x = (*x - max).exp() / z);
                    }
                }
                Tensor::raw(a.shape.clone(), data)
            }
            OpKind::LayerNorm { eps } => {
                let (x, g, b) = (val(0), val(1), val(2));
                let d = *x.shape.last().unwrap();
                if g.shape != [d] || b.shape != [d] {
                    return Err(mismatch(
                        "layernorm",
                        format!("x {:?}, gain {:?}, bias {:?}", x.shape, g.shape, b.shape),
                    ));
                }
                if *eps < 0.0 {
                    return Err(mismatch("layernorm", "negative eps"));
                }
                let rows = x.data.len() / d;
                let mut out = vec![0.0; x.data.len()];
                let mut saved = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &x.data[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        out[r * d + j] = (row[j] - mean) * rstd * g.data[j] + b.data[j];
                    }
                    saved.push(rstd);
                }
                return Ok((Tensor::raw(x.shape.clone(), out), saved));
            }
            OpKind::Gelu => {
                let a = val(0);
                Tensor::raw(a.shape.clone(), a.data.iter().map(|&x| gelu(x)).collect())
            }
            OpKind::EmbeddingGather(idx) => {
                let t = val(0);
                if t.shape.len() != 2 {
                    return Err(mismatch("embedding-gather", format!("table {:?}", t.shape)));
                }
                if idx.is_empty() {
                    return Err(mismatch("embedding-gather", "no indices"));
                }
                let (v, d) = (t.shape[0], t.shape[1]);
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    if i >= v {
                        return Err(mismatch(
                            "embedding-gather",
                            format!("index {i} out of range for {v} rows"),
                        ));
                    }
                    data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
                }
                Tensor::raw(vec![idx.len(), d], data)
            }
            OpKind::Mean | OpKind::Sum => {
                let a = val(0);
                let s: f64 = a.data.iter().sum();
                let s = if *kind == OpKind::Mean {
                    s / a.data.len() as f64
                } else {
                    s
                };
                Tensor::raw(vec![1], vec![s])
            }
            OpKind::Log => {
                let a = val(0);
                Tensor::raw(a.shape.clone(), a.data.iter().map(|x| x.ln()).collect())
            }
            OpKind::Exp => {
                let a = val(0);
                Tensor::raw(a.shape.clone(), a.data.iter().map(|x| x.exp()).collect())
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every trainable leaf receives a gradient (zeros when the loss does not
    /// depend on it); the same gradients are also stored on the leaf tensors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for ti in (0..self.tape.len()).rev() {
            let id = self.tape[ti];
            if id > loss.0 {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop(id, &gout, &mut grads)?;
            // keep the gradient of the loss itself retrievable
            if id == loss.0 {
                grads[id] = Some(gout);
            }
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                node.value.grad = Some(g.clone());
                out.grads.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    fn backprop(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let kind = node.op.as_ref().expect("tape holds op nodes only");
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;

        // Accumulates `f(slot)` into input i's gradient buffer.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let dims = matmul_dims(&a.shape, &b.shape)?;
                if wants(0) {
                    acc(grads, inputs[0], a.data.len(), |ga| {
                        dims.for_each_batch(|ai, bi, ci| {
                            // dA = dC . B^T
                            gemm(
                                dims.m,
                                dims.n,
                                dims.k,
                                &gout[ci..],
                                false,
                                &b.data[bi..],
                                true,
                                &mut ga[ai..],
                                1.0,
                            )
                        })
                    });
                }
                if wants(1) {
                    acc(grads, inputs[1], b.data.len(), |gb| {
                        // dB = A^T . dC
                        dims.for_each_batch(|ai, bi, ci| {
                            gemm(
                                dims.k,
                                dims.m,
                                dims.n,
                                &a.data[ai..],
                                true,
                                &gout[ci..],
                                false,
                                &mut gb[bi..],
                                1.0,
                            )
                        })
                    });
                }
            }
            OpKind::Add => {
                for i in 0..2 {
                    if wants(i) {
                        acc(grads, inputs[i], gout.len(), |g| {
                            g.iter_mut().zip(gout).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            OpKind::Mul => {
                for i in 0..2 {
                    if wants(i) {
                        let other = &val(1 - i).data;
                        acc(grads, inputs[i], gout.len(), |g| {
                            for ((x, y), o) in g.iter_mut().zip(gout).zip(other) {
                                *x += y * o;
                            }
                        });
                    }
                }
            }
            OpKind::Scale(s) => {
                if wants(0) {
                    acc(grads, inputs[0], gout.len(), |g| {
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y * s)
                    });
                }
            }
            OpKind::Transpose => {
                if wants(0) {
                    let a = val(0);
                    let r = a.shape.len();
                    // gout has the transposed layout: [.., cols, rows]
                    let back = transpose_blocks(gout, a.shape[r - 1], a.shape[r - 2]);
                    acc(grads, inputs[0], gout.len(), |g| {
                        g.iter_mut().zip(&back).for_each(|(x, y)| *x += y)
                    });
                }
            }
            OpKind::Reshape(_) => {
                if wants(0) {
                    acc(grads, inputs[0], gout.len(), |g| {
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y)
                    });
                }
            }
            OpKind::Concat { axis } => {
                let first = &val(0).shape;
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total: usize = node.value.shape[*axis];
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let t = val(i);
                    let chunk = t.shape[*axis] * inner;
                    if wants(i) {
                        acc(grads, inputs[i], t.data.len(), |g| {
                            for o in 0..outer {
                                let src = o * total * inner + offset;
                                for j in 0..chunk {
                                    g[o * chunk + j] += gout[src + j];
                                }
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            OpKind::Slice { axis, start, end } => {
                if wants(0) {
                    let a = val(0);
                    let outer: usize = a.shape[..*axis].iter().product();
                    let inner: usize = a.shape[axis + 1..].iter().product();
                    let len = a.shape[*axis];
                    let chunk = (end - start) * inner;
                    acc(grads, inputs[0], a.data.len(), |g| {
                        for o in 0..outer {
                            let dst = o * len * inner + start * inner;
                            for j in 0..chunk {
                                g[dst + j] += gout[o * chunk + j];
                            }
                        }
                    });
                }
            }
            OpKind::SoftmaxLastDim => {
                if wants(0) {
                    let y = &node.value.data;
                    let d = *node.value.shape.last().unwrap();
                    acc(grads, inputs[0], y.len(), |g| {
                        for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
            }
            OpKind::LogSoftmaxLastDim => {
                if wants(0) {
                    let y = &node.value.data;
                    let d = *node.value.shape.last().unwrap();
                    acc(grads, inputs[0], y.len(), |g| {
                        for ((gr, yr), dr) in g.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                            let total: f64 = dr.iter().sum();
                            for j in 0..d {
                                gr[j] += dr[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
            }
            OpKind::LayerNorm { .. } => {
                let (x, gain) = (val(0), val(1));
                let d = *x.shape.last().unwrap();
                let rows = x.data.len() / d;
                let mut xhat = vec![0.0; x.data.len()];
                for r in 0..rows {
                    let row = &x.data[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * node.saved[r];
                    }
                }
                if wants(0) {
                    acc(grads, inputs[0], x.data.len(), |g| {
                        for r in 0..rows {
                            let o = r * d;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dxh = gout[o + j] * gain.data[j];
                                m1 += dxh;
                                m2 += dxh * xhat[o + j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let dxh = gout[o + j] * gain.data[j];
                                g[o + j] += node.saved[r] * (dxh - m1 - xhat[o + j] * m2);
                            }
                        }
                    });
                }
                if wants(1) {
                    acc(grads, inputs[1], d, |g| {
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] += gout[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if wants(2) {
                    acc(grads, inputs[2], d, |g| {
                        for r in 0..rows {
                            for j in 0..d {
                                g[j] += gout[r * d + j];
                            }
                        }
                    });
                }
            }
            OpKind::Gelu => {
                if wants(0) {
                    let a = &val(0).data;
                    acc(grads, inputs[0], a.len(), |g| {
                        for ((x, y), v) in g.iter_mut().zip(gout).zip(a) {
                            *x += y * gelu_grad(*v);
                        }
                    });
                }
            }
            OpKind::EmbeddingGather(idx) => {
                if wants(0) {
                    let t = val(0);
                    let d = t.shape[1];
                    acc(grads, inputs[0], t.data.len(), |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                g[i * d + j] += gout[r * d + j];
                            }
                        }
                    });
                }
            }
            OpKind::Mean | OpKind::Sum => {
                if wants(0) {
                    let n = val(0).data.len();
                    let s = if *kind == OpKind::Mean {
                        gout[0] / n as f64
                    } else {
                        gout[0]
                    };
                    acc(grads, inputs[0], n, |g| g.iter_mut().for_each(|x| *x += s));
                }
            }
            OpKind::Log => {
                if wants(0) {
                    let a = &val(0).data;
                    acc(grads, inputs[0], a.len(), |g| {
                        for ((x, y), v) in g.iter_mut().zip(gout).zip(a) {
                            *x += y / v;
                        }
                    });
                }
            }
            OpKind::Exp => {
                if wants(0) {
                    let e = &node.value.data;
                    acc(grads, inputs[0], e.len(), |g| {
                        for ((x, y), v) in g.iter_mut().zip(gout).zip(e) {
                            *x += y * v;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(OpKind::Scale(s), &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxLastDim, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmaxLastDim, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::LayerNorm { eps: 1e-5 }, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::EmbeddingGather(idx), &[table])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    /// Picks `x[r, cols[r]]` for each listed row `r` of a 2-D tensor, as an `[n, 1]` tensor.
    pub fn pick(&mut self, x: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("pick", format!("{shape:?} is not 2-D")));
        }
        let cols = shape[1];
        if let Some(&(r, c)) = picks.iter().find(|(r, c)| *r >= shape[0] || *c >= cols) {
            return Err(mismatch("pick", format!("({r},{c}) outside {shape:?}")));
        }
        let flat = self.reshape(x, vec![shape[0] * cols, 1])?;
        self.gather(flat, picks.iter().map(|&(r, c)| r * cols + c).collect())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn transpose_blocks(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatMulDims {
    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            f(
                b * self.m * self.k,
                b * self.k * self.n,
                b * self.m * self.n,
            );
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let bad = || mismatch("matmul", format!("{a:?} x {b:?}"));
    match (a.len(), b.len()) {
        // a shared right operand is one gemm over the flattened leading dims
        (2, 2) | (3, 2) => {
            let (rows, k) = (a[..a.len() - 1].iter().product::<usize>(), a[a.len() - 1]);
            if b[0] != k {
                return Err(bad());
            }
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(b[1]);
            Ok(MatMulDims {
                batch: 1,
                m: rows,
                k,
                n: b[1],
                out_shape,
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(bad());
            }
            Ok(MatMulDims {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: b[2],
                out_shape: vec![a[0], a[1], b[2]],
            })
        }
        _ => Err(bad()),
    }
}

/// `c = op(a) . op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the assertion above bounds every strided access of the three operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maximum relative error between reverse-mode and central-difference gradients.
///
/// `f` builds a scalar loss from the parameter handles it is given. Each
/// coordinate contributes `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(TensorError::Invalid(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if params.iter().all(|p| p.numel() == 0) {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).data[0].is_finite() {
        return Err(TensorError::NonFinite("finite_diff_check objective".into()));
    }
    let grads = g.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("finite_diff_check objective".into()))
        }
    };

    let mut work: Vec<Tensor> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.requires_grad = false;
            p
        })
        .collect();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param leaf has a gradient");
        for j in 0..work[pi].numel() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
