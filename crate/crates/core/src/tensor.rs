//! Dense f64 tensors and a small reverse-mode autodiff tape.
//!
//! Every layer in the network is expressed as a composition of the ops on
//! [`Graph`]. Parameters live in a [`ParamStore`]; a forward pass borrows the
//! store immutably and [`Graph::backward`] accumulates parameter gradients
//! into a [`Gradients`] buffer, so many samples can be accumulated before one
//! optimizer step.

use rand::Rng;

use crate::error::{IrnError, Result};

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(IrnError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(IrnError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs);
        assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    }
    // SAFETY: bounds of every operand were checked above; matrixmultiply only
    // touches elements inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

/// Named learnable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial padding behaviour of [`Graph::conv3d`]. Time is always zero-padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Out-of-range rows/columns read the nearest edge cell.
    ReplicateSpatial,
}

/// Geometry of a 3D convolution over `[batch, time, height, width, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pad_mode: PadMode,
}

impl Conv3dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            pad_mode: PadMode::Zero,
        }
    }

    pub fn stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    /// Rows of the unfolded weight matrix.
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(IrnError::Shape(format!(
                    "conv axis {a}: input {} (pad {}) smaller than kernel {}",
                    input[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// One output row of [`Graph::gather_rows`]: a weighted sum of input rows.
pub type GatherRow = Vec<(usize, f64)>;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<GatherRow>),
    MeanRowGroups(Var, usize),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv3dSpec,
        in_dims: [usize; 4],
        cols: Vec<f64>,
    },
    CrossEntropy(Var, usize, Vec<f64>),
    DotConst(Var, Vec<f64>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Forward tape. Build with the op methods, then call [`Graph::backward`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    training: bool,
}

impl<'a> Graph<'a> {
    /// A tape in evaluation mode (dropout disabled).
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn training(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m,k] x [k,n]`; leading axes of `a` are folded into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(IrnError::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] x b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(IrnError::Shape(format!(
                "matmul_nt {:?} x {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), 1, k, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulNt(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(IrnError::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.len() != n {
            return Err(IrnError::Shape(format!(
                "bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut t = xv.clone();
        for row in t.data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// Elementwise sum of equally sized tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let mut t = first.clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            if pv.len() != t.len() {
                return Err(IrnError::Shape(format!(
                    "sum {:?} + {:?}",
                    t.shape(),
                    pv.shape()
                )));
            }
            t.data.iter_mut().zip(pv.data()).for_each(|(a, b)| *a += b);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Sum(parts.to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(IrnError::Shape(format!(
                "mul_const {:?} with {} values",
                xv.shape(),
                c.len()
            )));
        }
        let data = xv.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.cols();
        for row in t.data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Columns `start..start+len` of a tensor viewed as `[rows, cols]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(IrnError::Shape(format!(
                "slice_cols {start}..{} of {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor {
            shape: vec![r, len],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    /// Concatenates `[rows, c_i]` tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(IrnError::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor {
            shape: vec![r, total],
            data,
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks `[r_i, cols]` tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(IrnError::Shape("concat_rows column mismatch".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor {
            shape: vec![data.len() / c.max(1), c],
            data,
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > xv.rows() {
            return Err(IrnError::Shape(format!(
                "slice_rows {start}..{} of {}",
                start + len,
                xv.rows()
            )));
        }
        let t = Tensor {
            shape: vec![len, c],
            data: xv.data()[start * c..(start + len) * c].to_vec(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows(x, start), rg))
    }

    /// Output row `i` is `sum_j w_j * x[row_j]`; an empty plan row is zero.
    pub fn gather_rows(&mut self, x: Var, plan: Vec<GatherRow>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; plan.len() * c];
        for (out, entries) in data.chunks_mut(c.max(1)).zip(&plan) {
            for &(src, w) in entries {
                if src >= r {
                    return Err(IrnError::Shape(format!("gather row {src} of {r}")));
                }
                out.iter_mut()
                    .zip(&xv.data()[src * c..(src + 1) * c])
                    .for_each(|(o, v)| *o += w * v);
            }
        }
        let t = Tensor {
            shape: vec![plan.len(), c],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, plan), rg))
    }

    /// Averages consecutive groups of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if group == 0 || r % group != 0 {
            return Err(IrnError::Shape(format!("{r} rows in groups of {group}")));
        }
        let g = r / group;
        let mut data = vec![0.0; g * c];
        for (i, row) in xv.data().chunks(c).enumerate() {
            let out = &mut data[(i / group) * c..(i / group + 1) * c];
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor {
            shape: vec![g, c],
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanRowGroups(x, group), rg))
    }

    /// 3D convolution over channels-last `x[b, t, h, w, c_in]` with weights
    /// `w[kt*kh*kw*c_in, c_out]` and optional bias `[c_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() != 5 || shape[4] != spec.in_channels {
            return Err(IrnError::Shape(format!(
                "conv3d input {:?}, expected [b,t,h,w,{}]",
                shape, spec.in_channels
            )));
        }
        let wv = self.value(w);
        if wv.len() != spec.patch_len() * spec.out_channels {
            return Err(IrnError::Shape(format!(
                "conv3d weight {:?} for spec {:?}",
                wv.shape(),
                spec
            )));
        }
        let in_dims = [shape[0], shape[1], shape[2], shape[3]];
        let out = spec.output_dims([shape[1], shape[2], shape[3]])?;
        let cols = im2col(xv.data(), in_dims, &spec, out);
        let rows = in_dims[0] * out.iter().product::<usize>();
        let k = spec.patch_len();
        let co = spec.out_channels;
        let mut data = vec![0.0; rows * co];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(co) {
                row.copy_from_slice(bv);
            }
        }
        gemm(rows, k, co, &cols, k, 1, wv.data(), co, 1, 1.0, &mut data);
        let t = Tensor {
            shape: vec![in_dims[0], out[0], out[1], out[2], co],
            data,
        };
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        // The unfolded input is only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv3d {
                x,
                w,
                b,
                spec,
                in_dims,
                cols,
            },
            rg,
        ))
    }

    /// Softmax cross-entropy of a single logit row against `label`; `[1]` output.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(IrnError::Shape(format!(
                "label {label} for {} logits",
                lv.len()
            )));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data()[label] - max - z.ln());
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![loss],
            },
            Op::CrossEntropy(logits, label, probs),
            rg,
        ))
    }

    /// `sum_i x_i * c_i` as a `[1]` scalar.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(IrnError::Shape("dot_const length mismatch".into()));
        }
        let s = xv.data().iter().zip(&c).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
            },
            Op::DotConst(x, c),
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut adj, grads);
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                grads.grads[id.0]
                    .data
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let da = acc(adj, *a, m * k);
                    gemm(m, n, k, g, n, 1, bv.data(), 1, n, 1.0, da);
                }
                if self.rg(*b) {
                    let db = acc(adj, *b, k * n);
                    gemm(k, m, n, av.data(), 1, k, g, n, 1, 1.0, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.rg(*a) {
                    let da = acc(adj, *a, m * k);
                    gemm(m, n, k, g, n, 1, bv.data(), k, 1, 1.0, da);
                }
                if self.rg(*b) {
                    let db = acc(adj, *b, n * k);
                    gemm(n, m, k, g, 1, n, av.data(), k, 1, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(acc(adj, *v, g.len()), g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    add_into(acc(adj, *x, g.len()), g);
                }
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let db = acc(adj, *b, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if self.rg(*p) {
                        add_into(acc(adj, *p, g.len()), g);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    let dx = acc(adj, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::MulConst(x, c) => {
                if self.rg(*x) {
                    let dx = acc(adj, *x, g.len());
                    for ((d, v), m) in dx.iter_mut().zip(g).zip(c) {
                        *d += v * m;
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let dx = acc(adj, *x, g.len());
                    for ((d, v), inp) in dx.iter_mut().zip(g).zip(xv) {
                        if *inp > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.rg(*x) {
                    let y = node.value.as_ref().unwrap();
                    let c = y.cols();
                    let dx = acc(adj, *x, g.len());
                    for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    add_into(acc(adj, *x, g.len()), g);
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let c = self.value(*x).cols();
                    let len = node.value.as_ref().unwrap().cols();
                    let dx = acc(adj, *x, self.value(*x).len());
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut dr[*start..*start + len], gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.as_ref().unwrap().cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let dp = acc(adj, *p, self.value(*p).len());
                        for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(dr, &gr[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.rg(*p) {
                        add_into(acc(adj, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let c = self.value(*x).cols();
                    let dx = acc(adj, *x, self.value(*x).len());
                    add_into(&mut dx[start * c..start * c + g.len()], g);
                }
            }
            Op::GatherRows(x, plan) => {
                if self.rg(*x) {
                    let c = self.value(*x).cols();
                    let dx = acc(adj, *x, self.value(*x).len());
                    for (gr, entries) in g.chunks(c.max(1)).zip(plan) {
                        for &(src, w) in entries {
                            dx[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, v)| *d += w * v);
                        }
                    }
                }
            }
            Op::MeanRowGroups(x, group) => {
                if self.rg(*x) {
                    let c = self.value(*x).cols();
                    let inv = 1.0 / *group as f64;
                    let dx = acc(adj, *x, self.value(*x).len());
                    for (i, dr) in dx.chunks_mut(c).enumerate() {
                        let gr = &g[(i / group) * c..(i / group + 1) * c];
                        dr.iter_mut().zip(gr).for_each(|(d, v)| *d += inv * v);
                    }
                }
            }
            Op::Conv3d {
                x,
                w,
                b,
                spec,
                in_dims,
                cols,
            } => {
                let k = spec.patch_len();
                let co = spec.out_channels;
                let rows = g.len() / co;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = acc(adj, *b, co);
                        for row in g.chunks(co) {
                            add_into(db, row);
                        }
                    }
                }
                if self.rg(*w) {
                    let dw = acc(adj, *w, k * co);
                    gemm(k, rows, co, cols, 1, k, g, co, 1, 1.0, dw);
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![0.0; rows * k];
                    gemm(rows, co, k, g, co, 1, wv, 1, co, 0.0, &mut dcols);
                    let out_shape = node.value.as_ref().unwrap().shape();
                    let out = [out_shape[1], out_shape[2], out_shape[3]];
                    let dx = acc(adj, *x, self.value(*x).len());
                    col2im(&dcols, *in_dims, spec, out, dx);
                }
            }
            Op::CrossEntropy(logits, label, probs) => {
                if self.rg(*logits) {
                    let dl = acc(adj, *logits, probs.len());
                    for (j, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let y = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - y);
                    }
                }
            }
            Op::DotConst(x, c) => {
                if self.rg(*x) {
                    let dx = acc(adj, *x, c.len());
                    dx.iter_mut().zip(c).for_each(|(d, v)| *d += g[0] * v);
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Maps an output coordinate plus kernel offset to an input index along one
/// axis, honouring the padding mode. `None` reads as zero.
#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, len: usize, replicate: bool) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else if replicate {
        Some(pos.clamp(0, len as isize - 1) as usize)
    } else {
        None
    }
}

fn im2col(x: &[f64], in_dims: [usize; 4], spec: &Conv3dSpec, out: [usize; 3]) -> Vec<f64> {
    let [batch, t, h, w] = in_dims;
    let c = spec.in_channels;
    let [kt, kh, kw] = spec.kernel;
    let k = spec.patch_len();
    let rep = spec.pad_mode == PadMode::ReplicateSpatial;
    let rows = batch * out.iter().product::<usize>();
    let mut cols = vec![0.0; rows * k];
    let mut r = 0;
    for bi in 0..batch {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let row = &mut cols[r * k..(r + 1) * k];
                    let mut off = 0;
                    for dt in 0..kt {
                        let it = source_index(ot, dt, spec.stride[0], spec.padding[0], t, false);
                        for dh in 0..kh {
                            let ih = source_index(oh, dh, spec.stride[1], spec.padding[1], h, rep);
                            for dw in 0..kw {
                                let iw = source_index(ow, dw, spec.stride[2], spec.padding[2], w, rep);
                                if let (Some(it), Some(ih), Some(iw)) = (it, ih, iw) {
                                    let src = (((bi * t + it) * h + ih) * w + iw) * c;
                                    row[off..off + c].copy_from_slice(&x[src..src + c]);
                                }
                                off += c;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], in_dims: [usize; 4], spec: &Conv3dSpec, out: [usize; 3], dx: &mut [f64]) {
    let [batch, t, h, w] = in_dims;
    let c = spec.in_channels;
    let [kt, kh, kw] = spec.kernel;
    let k = spec.patch_len();
    let rep = spec.pad_mode == PadMode::ReplicateSpatial;
    let mut r = 0;
    for bi in 0..batch {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let row = &dcols[r * k..(r + 1) * k];
                    let mut off = 0;
                    for dt in 0..kt {
                        let it = source_index(ot, dt, spec.stride[0], spec.padding[0], t, false);
                        for dh in 0..kh {
                            let ih = source_index(oh, dh, spec.stride[1], spec.padding[1], h, rep);
                            for dw in 0..kw {
                                let iw = source_index(ow, dw, spec.stride[2], spec.padding[2], w, rep);
                                if let (Some(it), Some(ih), Some(iw)) = (it, ih, iw) {
                                    let dst = (((bi * t + it) * h + ih) * w + iw) * c;
                                    add_into(&mut dx[dst..dst + c], &row[off..off + c]);
                                }
                                off += c;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}
