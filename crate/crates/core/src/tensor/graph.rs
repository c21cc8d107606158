use std::collections::BTreeMap;
use std::ops::Deref;

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Deref for Value<'_> {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Pick(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Reshape(Var),
    BilinearRows(Var, Var),
}

struct Node<'p> {
    value: Value<'p>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Gradients accumulated by [`Graph::backward`], keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|g| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(dst) => {
                for (d, g) in dst.iter_mut().zip(grad) {
                    *d += g;
                }
            }
            None => {
                self.grads.insert(id, grad.to_vec());
            }
        }
    }

    /// Adds `other` into `self`, parameter by parameter in id order.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A single-threaded computation graph. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_nodes: BTreeMap<ParamId, Var>,
    param_grads: Gradients,
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    train: bool,
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store, for standalone computations.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            param_grads: Gradients::new(),
            leaf_grads: BTreeMap::new(),
            train: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'p>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor {
            shape: vec![r, c],
            data: self.value(v).to_vec(),
        }
    }

    /// A constant input that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(Value::Owned(t.data), r, c, Op::Leaf, false)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(Value::Owned(data), rows, cols, Op::Leaf, false)
    }

    /// An input leaf whose gradient is tracked and available through
    /// [`Graph::grad`] after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(Value::Owned(t.data), r, c, Op::Leaf, requires_grad)
    }

    /// Brings a stored parameter into the graph without copying it. Repeated
    /// calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id);
        let (r, c) = t.matrix_dims();
        let needs_grad = !store.is_frozen(id);
        let v = self.push(Value::Borrowed(t.data()), r, c, Op::Param(id), needs_grad);
        self.param_nodes.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Value::Owned(data), r, c, op, ng)
    }

    pub fn try_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.try_add(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.try_sub(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.try_mul(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `a [r, c] + b` where `b` is `[1, c]`, `[r, 1]` or `[1, 1]`.
    pub fn try_add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        if !((br == 1 || br == r) && (bc == 1 || bc == c)) {
            return Err(Error::Shape {
                op: "add_broadcast",
                left: vec![r, c],
                right: vec![br, bc],
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let bi = if br == 1 { 0 } else { i };
                let bj = if bc == 1 { 0 } else { j };
                data.push(av[i * c + j] + bv[bi * bc + bj]);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Value::Owned(data), r, c, Op::AddBroadcast(a, b), ng))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        self.try_add_broadcast(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, c, Op::Scale(a, factor), ng)
    }

    pub fn try_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Value::Owned(out), m, n, Op::MatMul(a, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.try_matmul(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), c, r, Op::Transpose(a), ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, c, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, c, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, c, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardization followed by an affine map; `gain` and `bias`
    /// are `[1, d]`.
    pub fn try_layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, d) {
                let (pr, pc) = self.shape(p);
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![r, d],
                    right: vec![pr, pc],
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Value::Owned(out),
            r,
            d,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        self.try_layer_norm(x, gain, bias).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.rows(parts[0]);
        for &p in parts {
            if self.rows(p) != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![r, self.cols(parts[0])],
                    right: vec![self.rows(p), self.cols(p)],
                });
            }
        }
        let c: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.cols(p);
                data.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Value::Owned(data), r, c, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.try_concat_cols(parts).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.cols(parts[0]);
        for &p in parts {
            if self.cols(p) != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![self.rows(parts[0]), c],
                    right: vec![self.rows(p), self.cols(p)],
                });
            }
        }
        let r: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut data = Vec::with_capacity(r * c);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(Value::Owned(data), r, c, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.try_concat_rows(parts).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "column slice {start}+{len} out of {c}");
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, len, Op::SliceCols(a, start), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "row slice {start}+{len} out of {r}");
        let data = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), len, c, Op::SliceRows(a, start), ng)
    }

    /// Row gather; `None` yields a zero row. Used for embedding lookup,
    /// where backward only touches the selected rows.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for idx in index {
            match idx {
                Some(i) => {
                    assert!(*i < r, "gather index {i} out of {r} rows");
                    data.extend_from_slice(&av[i * c..(i + 1) * c]);
                }
                None => data.extend(std::iter::repeat(0.0).take(c)),
            }
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), index.len(), c, Op::GatherRows(a, index.to_vec()), ng)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &index)
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), r, c, Op::Dropout(a, mask), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(vec![s]), 1, 1, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Value::Owned(vec![s]), 1, 1, Op::Mean(a), ng)
    }

    /// Selects entries by flat row-major index into a `[1, k]` row.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Var {
        let av = self.value(a);
        let data = flat.iter().map(|&i| av[i]).collect();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), 1, flat.len(), Op::Pick(a, flat.to_vec()), ng)
    }

    /// Column-wise max over consecutive row segments; segment `s` covers
    /// rows `offsets[s]..offsets[s] + lens[s]`.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for &(start, len) in segments {
            assert!(len > 0 && start + len <= r, "bad segment {start}+{len} of {r}");
            for j in 0..c {
                let mut best = start;
                for i in start + 1..start + len {
                    if av[i * c + j] > av[best * c + j] {
                        best = i;
                    }
                }
                data.push(av[best * c + j]);
                argmax.push(best * c + j);
            }
        }
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), segments.len(), c, Op::SegmentMax(a, argmax), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape [{r}, {c}] -> [{rows}, {cols}]");
        let data = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(Value::Owned(data), rows, cols, Op::Reshape(a), ng)
    }

    /// For `t [n, k*d]` and `g [n, d]`, `out[i, r] = sum_j t[i, r*d + j] * g[i, j]`.
    pub fn bilinear_rows(&mut self, t: Var, g: Var) -> Var {
        let (n, kd) = self.shape(t);
        let (n2, d) = self.shape(g);
        assert_eq!(n, n2, "bilinear_rows row mismatch");
        assert_eq!(kd % d, 0, "bilinear_rows width mismatch");
        let k = kd / d;
        let tv = self.value(t);
        let gv = self.value(g);
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let grow = &gv[i * d..(i + 1) * d];
            for r in 0..k {
                let trow = &tv[i * kd + r * d..i * kd + (r + 1) * d];
                data[i * k + r] = trow.iter().zip(grow).map(|(a, b)| a * b).sum();
            }
        }
        let ng = self.ng(&[t, g]);
        self.push(Value::Owned(data), n, k, Op::BilinearRows(t, g), ng)
    }

    /// Linear layer `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_broadcast(xw, b)
    }

    /// Back-propagates from a scalar loss, accumulating into parameter and
    /// input gradients. Calling it again without [`Graph::zero_grad`] adds
    /// to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &grad, &mut grads);
            match self.nodes[idx].op {
                Op::Param(id) => self.param_grads.accumulate(id, &grad),
                Op::Leaf => {
                    let slot = self
                        .leaf_grads
                        .entry(idx)
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    for (d, g) in slot.iter_mut().zip(&grad) {
                        *d += g;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.param_grads = Gradients::new();
        self.leaf_grads.clear();
    }

    /// Gradient of an input leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if let Op::Param(id) = self.nodes[v.0].op {
            return self.param_grads.get(id);
        }
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param_grads(&self) -> &Gradients {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Gradients {
        self.param_grads
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let y: &[f64] = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                self.acc(grads, *b, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                self.acc(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dy));
                let (br, bc) = self.shape(*b);
                self.acc(grads, *b, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let bi = if br == 1 { 0 } else { i };
                            let bj = if bc == 1 { 0 } else { j };
                            g[bi * bc + bj] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * f));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA += dY B^T, dB += A^T dY
                self.acc(grads, *a, |g| gemm(m, n, k, dy, (n, 1), bv, (1, n), g, 1.0));
                self.acc(grads, *b, |g| gemm(k, m, n, av, (1, k), dy, (n, 1), g, 1.0));
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, |g| {
                    // y is [rows, cols] = a^T, a is [cols, rows]
                    for i in 0..rows {
                        for j in 0..cols {
                            g[j * rows + i] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / av[i];
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i];
                }
            }),
            Op::SoftmaxRows(a) => self.acc(grads, *a, |g| {
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dr = &dy[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        g[i * cols + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => self.acc(grads, *a, |g| {
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dr = &dy[i * cols..(i + 1) * cols];
                    let total: f64 = dr.iter().sum();
                    for j in 0..cols {
                        g[i * cols + j] += dr[j] - yr[j].exp() * total;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = cols;
                self.acc(grads, *x, |g| {
                    for i in 0..rows {
                        let dr = &dy[i * d..(i + 1) * d];
                        let hr = &xhat[i * d..(i + 1) * d];
                        let dh: Vec<f64> = (0..d).map(|j| dr[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            g[i * d + j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                self.acc(grads, *gain, |g| {
                    for i in 0..rows {
                        for j in 0..d {
                            g[j] += dy[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.acc(grads, *bias, |g| {
                    for i in 0..rows {
                        for j in 0..d {
                            g[j] += dy[i * d + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.cols(p);
                    self.acc(grads, p, |g| {
                        for i in 0..rows {
                            for j in 0..pc {
                                g[i * pc + j] += dy[i * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.rows(p) * cols;
                    self.acc(grads, p, |g| add_into(g, &dy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.cols(*a);
                self.acc(grads, *a, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * ac + start + j] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                self.acc(grads, *a, |g| {
                    add_into(&mut g[start * cols..(start + rows) * cols], dy);
                });
            }
            Op::GatherRows(a, index) => self.acc(grads, *a, |g| {
                for (out_row, idx) in index.iter().enumerate() {
                    if let Some(i) = idx {
                        add_into(
                            &mut g[i * cols..(i + 1) * cols],
                            &dy[out_row * cols..(out_row + 1) * cols],
                        );
                    }
                }
            }),
            Op::Dropout(a, mask) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * mask[i];
                }
            }),
            Op::Sum(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mean(a) => self.acc(grads, *a, |g| {
                let n = g.len() as f64;
                g.iter_mut().for_each(|v| *v += dy[0] / n)
            }),
            Op::Pick(a, flat) => self.acc(grads, *a, |g| {
                for (k, &i) in flat.iter().enumerate() {
                    g[i] += dy[k];
                }
            }),
            Op::SegmentMax(a, argmax) => self.acc(grads, *a, |g| {
                for (k, &i) in argmax.iter().enumerate() {
                    g[i] += dy[k];
                }
            }),
            Op::Reshape(a) => self.acc(grads, *a, |g| add_into(g, dy)),
            Op::BilinearRows(t, gm) => {
                let (n, kd) = self.shape(*t);
                let d = self.cols(*gm);
                let k = kd / d;
                let (tv, gv) = (self.value(*t), self.value(*gm));
                self.acc(grads, *t, |g| {
                    for i in 0..n {
                        for r in 0..k {
                            let dyv = dy[i * k + r];
                            for j in 0..d {
                                g[i * kd + r * d + j] += dyv * gv[i * d + j];
                            }
                        }
                    }
                });
                self.acc(grads, *gm, |g| {
                    for i in 0..n {
                        for r in 0..k {
                            let dyv = dy[i * k + r];
                            for j in 0..d {
                                g[i * d + j] += dyv * tv[i * kd + r * d + j];
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
        f(slot);
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c = a * b + beta * c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given dimensions
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
