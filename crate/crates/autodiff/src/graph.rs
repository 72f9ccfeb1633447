//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends one node holding its output value. Shapes are row-major
//! and most ops accept a leading batch dimension. Parameters are copied into
//! the tape when first referenced, so a graph never aliases the store it was
//! built from.

use std::collections::HashMap;

use crate::tensor::{numel, ParameterStore, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        // None when shapes are identical.
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: f64,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    MaxPoolRows {
        x: usize,
        rows: usize,
        cols: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Gather {
        table: usize,
        cols: usize,
        indices: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
        batch: usize,
        m: usize,
        n: usize,
    },
    Conv1d {
        x: usize,
        k: usize,
        batch: usize,
        cin: usize,
        cout: usize,
        width: usize,
        time: usize,
        dilation: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        outer: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LocalDense {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
        hours: usize,
        cin: usize,
        cout: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    SumSquares {
        x: usize,
    },
    Pinball {
        pred: usize,
        target: Vec<f64>,
        q: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    track_branches: bool,
    branch_hash: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn dim_err(msg: String) -> TensorError {
    TensorError::Dimension(msg)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(128),
            params: HashMap::new(),
            param_order: Vec::new(),
            track_branches: false,
            branch_hash: FNV_OFFSET,
        }
    }

    /// Enables fingerprinting of every discrete branch taken in the forward
    /// pass (relu masks, maxpool winners, pinball signs). Two evaluations
    /// with equal fingerprints lie on the same smooth piece.
    pub fn track_branches(&mut self, on: bool) {
        self.track_branches = on;
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    fn mix_branch(&mut self, bit: u64) {
        self.branch_hash ^= bit;
        self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } | Op::Binary { a, b, .. } => {
                vec![*a, *b]
            }
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::MaxPoolRows { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumSquares { x } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Conv1d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LocalDense { x, w, b, .. } => vec![*x, *w, *b],
            Op::Pinball { pred, .. } => vec![*pred],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as a leaf. It participates in differentiation only if
    /// the tensor was marked with `with_grad`.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let requires_grad = t.requires_grad();
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(dim_err(format!(
                "constant of shape {shape:?} given {} values",
                values.len()
            )));
        }
        self.push(shape, values, Op::Leaf, "constant")
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, "param")?;
        self.nodes[v.0].requires_grad = true;
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    // ---------------------------------------------------------------- ops

    /// `a [.., m, k] · b [k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm_nn(self.value(a), self.value(b), &mut out, rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(shape, out, Op::MatMul { a: a.0, b: b.0, rows, k, n }, "matmul")
    }

    /// Batched product `a [b, m, k] · b [b, k, n]`, or against `b [b, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err(format!("bmm {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err(format!("bmm inner dims {sa:?} x {sb:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_s = &av[bi * m * k..(bi + 1) * m * k];
            let b_s = &bv[bi * k * n..(bi + 1) * k * n];
            let o_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(a_s, b_s, o_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, o_s, m, k, n);
            }
        }
        self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            "bmm",
        )
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let (shape, out, maps) = if sa == sb {
            let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
            (sa, out, None)
        } else {
            let (shape, ma, mb) = broadcast_maps(&sa, &sb)?;
            let out: Vec<f64> = ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect();
            (shape, out, Some((ma, mb)))
        };
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        self.push(shape, out, Op::Binary { kind, a: a.0, b: b.0, maps }, name)
    }

    /// Elementwise sum; shapes of equal rank broadcast over size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Adds `b [n]` to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if numel(&sb) != n {
            return Err(dim_err(format!("bias {sb:?} for input {sx:?}")));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(r, c)| r + c))
            .collect();
        self.push(sx, out, Op::AddBias { x: x.0, b: b.0 }, "add_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, s }, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        if self.track_branches {
            let mut acc = 0u64;
            for (i, &v) in self.value(x).iter().enumerate() {
                if v > 0.0 {
                    acc = acc.wrapping_mul(31).wrapping_add(i as u64 + 1);
                }
            }
            self.mix_branch(acc);
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x: x.0 }, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid { x: x.0 }, "sigmoid")
    }

    /// Softmax along the last dimension, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| dim_err("softmax of a scalar".into()))?;
        if cols == 0 {
            return Err(dim_err("softmax over empty rows".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::Softmax { x: x.0, cols }, "softmax")
    }

    /// Column-wise max over the row axis: `[.., r, c] -> [.., 1, c]`.
    /// Ties route to the first maximal row.
    pub fn maxpool_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err(format!("maxpool needs rank >= 2, got {shape:?}")));
        }
        let rows = shape[shape.len() - 2];
        let cols = shape[shape.len() - 1];
        if rows == 0 || cols == 0 {
            return Err(dim_err(format!("maxpool over empty input {shape:?}")));
        }
        let batch = numel(&shape) / (rows * cols);
        let xv = self.value(x);
        let mut out = vec![0.0; batch * cols];
        let mut argmax = vec![0usize; batch * cols];
        for bi in 0..batch {
            let base = bi * rows * cols;
            for c in 0..cols {
                let mut best = xv[base + c];
                let mut best_r = 0;
                for r in 1..rows {
                    let v = xv[base + r * cols + c];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out[bi * cols + c] = best;
                argmax[bi * cols + c] = best_r;
            }
        }
        if self.track_branches {
            let acc = argmax.iter().fold(0u64, |h, &r| h.wrapping_mul(131).wrapping_add(r as u64));
            self.mix_branch(acc);
        }
        let mut out_shape = shape;
        let l = out_shape.len();
        out_shape[l - 2] = 1;
        self.push(out_shape, out, Op::MaxPoolRows { x: x.0, rows, cols, argmax }, "maxpool")
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err(format!("concat axis {axis} for shape {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(dim_err(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner.max(1);
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                outer,
                widths,
            },
            "concat",
        )
    }

    /// Row lookup `table [n, c]` at `indices` giving `[indices.len(), c]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err(format!("embedding table must be 2-D, got {s:?}")));
        }
        let (n, cols) = (s[0], s[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= n {
                return Err(dim_err(format!("index {i} out of range for {n} rows")));
            }
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        self.push(
            vec![indices.len(), cols],
            out,
            Op::Gather {
                table: table.0,
                cols,
                indices: indices.to_vec(),
            },
            "gather",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(dim_err(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push(shape, out, Op::Reshape { x: x.0 }, "reshape")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err(format!("transpose of rank-{} tensor", shape.len())));
        }
        let l = shape.len();
        let (m, n) = (shape[l - 2], shape[l - 1]);
        let batch = numel(&shape) / (m * n).max(1);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let base = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = xv[base + i * n + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.swap(l - 2, l - 1);
        self.push(out_shape, out, Op::Transpose { x: x.0, batch, m, n }, "transpose")
    }

    /// Causal dilated convolution. `x` is `[cin, t]` or `[b, cin, t]`,
    /// kernels are `[cout, cin, width]`; the output keeps the time length
    /// through left zero-padding of `(width - 1) * dilation`. The last kernel
    /// tap multiplies the current step.
    pub fn conv1d_causal(&mut self, x: Var, kernels: Var, dilation: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, cin, time) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(dim_err(format!("conv input must be rank 2 or 3, got {sx:?}"))),
        };
        if sk.len() != 3 || sk[1] != cin {
            return Err(dim_err(format!("kernels {sk:?} for input channels {cin}")));
        }
        if dilation == 0 || sk[2] == 0 || time == 0 {
            return Err(dim_err("conv needs width, dilation and time >= 1".into()));
        }
        let (cout, width) = (sk[0], sk[2]);
        let xv = self.value(x);
        let kv = self.value(kernels);
        let mut out = vec![0.0; batch * cout * time];
        for b in 0..batch {
            for co in 0..cout {
                let o = &mut out[(b * cout + co) * time..(b * cout + co + 1) * time];
                for ci in 0..cin {
                    let xs = &xv[(b * cin + ci) * time..(b * cin + ci + 1) * time];
                    for w in 0..width {
                        let shift = (width - 1 - w) * dilation;
                        if shift >= time {
                            continue;
                        }
                        let kw = kv[(co * cin + ci) * width + w];
                        for (ot, xt) in o[shift..].iter_mut().zip(xs) {
                            *ot += kw * xt;
                        }
                    }
                }
            }
        }
        let shape = if sx.len() == 2 { vec![cout, time] } else { vec![batch, cout, time] };
        self.push(
            shape,
            out,
            Op::Conv1d {
                x: x.0,
                k: kernels.0,
                batch,
                cin,
                cout,
                width,
                time,
                dilation,
            },
            "conv1d",
        )
    }

    /// Batch normalization over axis 1. `[n, c]` normalizes across rows,
    /// `[b, c, t]` across batch and time. Train mode uses batch statistics and
    /// folds them into `stats` with momentum; eval mode uses `stats` only.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err(format!("batchnorm needs rank >= 2, got {shape:?}")));
        }
        let outer = shape[0];
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        if numel(self.shape(gamma)) != channels || numel(self.shape(beta)) != channels {
            return Err(dim_err(format!("batchnorm affine params for {channels} channels")));
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(dim_err(format!("running stats for {channels} channels")));
        }
        let train = mode == Mode::Train;
        if train && outer < 2 {
            return Err(TensorError::Usage(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let count = (outer * inner) as f64;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; channels];
        for c in 0..channels {
            let (mean, var) = if train {
                let mut s = 0.0;
                for o in 0..outer {
                    let base = (o * channels + c) * inner;
                    s += xv[base..base + inner].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut ss = 0.0;
                for o in 0..outer {
                    let base = (o * channels + c) * inner;
                    ss += xv[base..base + inner].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = ss / count;
                stats.mean[c] = BATCHNORM_MOMENTUM * stats.mean[c] + (1.0 - BATCHNORM_MOMENTUM) * mean;
                stats.var[c] = BATCHNORM_MOMENTUM * stats.var[c] + (1.0 - BATCHNORM_MOMENTUM) * var;
                (mean, var)
            } else {
                (stats.mean[c], stats.var[c])
            };
            let is = 1.0 / (var + BATCHNORM_EPS).sqrt();
            inv_std[c] = is;
            for o in 0..outer {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
                train,
            },
            "batchnorm",
        )
    }

    /// Per-position dense map with unshared weights:
    /// `x [b, h, cin]`, `w [h, cin, cout]`, `bias [h, cout]` -> `[b, h, cout]`.
    pub fn local_dense(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[1] || sw[1] != sx[2] {
            return Err(dim_err(format!("local dense {sx:?} with weights {sw:?}")));
        }
        let (batch, hours, cin, cout) = (sx[0], sx[1], sx[2], sw[2]);
        if sb != [hours, cout] {
            return Err(dim_err(format!("local dense bias {sb:?}, want [{hours}, {cout}]")));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let mut out = vec![0.0; batch * hours * cout];
        for b in 0..batch {
            for h in 0..hours {
                let o = &mut out[(b * hours + h) * cout..(b * hours + h + 1) * cout];
                o.copy_from_slice(&bv[h * cout..(h + 1) * cout]);
                let xr = &xv[(b * hours + h) * cin..(b * hours + h + 1) * cin];
                gemm_nn(xr, &wv[h * cin * cout..(h + 1) * cin * cout], o, 1, cin, cout);
            }
        }
        self.push(
            vec![batch, hours, cout],
            out,
            Op::LocalDense {
                x: x.0,
                w: w.0,
                b: bias.0,
                batch,
                hours,
                cin,
                cout,
            },
            "local_dense",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(dim_err("mean of empty tensor".into()));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { x: x.0 }, "mean")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|v| v * v).sum();
        self.push(vec![1], vec![s], Op::SumSquares { x: x.0 }, "sum_squares")
    }

    /// Mean pinball loss `max(q e, (q - 1) e)` with `e = target - pred`, one
    /// quantile level per element.
    pub fn pinball(&mut self, pred: Var, target: &[f64], q: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.len() != q.len() || pv.is_empty() {
            return Err(dim_err(format!(
                "pinball over {} predictions, {} targets, {} levels",
                pv.len(),
                target.len(),
                q.len()
            )));
        }
        let mut total = 0.0;
        let mut signs = 0u64;
        for i in 0..pv.len() {
            let e = target[i] - pv[i];
            total += (q[i] * e).max((q[i] - 1.0) * e);
            if e > 0.0 {
                signs = signs.wrapping_mul(31).wrapping_add(i as u64 + 1);
            }
        }
        let loss = total / pv.len() as f64;
        if self.track_branches {
            self.mix_branch(signs);
        }
        self.push(
            vec![1],
            vec![loss],
            Op::Pinball {
                pred: pred.0,
                target: target.to_vec(),
                q: q.to_vec(),
            },
            "pinball",
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_order.clone();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if self.needs(a) {
                    let ga = slot(grads, a, rows * k);
                    gemm_nt_acc(g, &self.nodes[b].value, ga, rows, n, k);
                }
                if self.needs(b) {
                    let gb = slot(grads, b, k * n);
                    gemm_tn_acc(&self.nodes[a].value, g, gb, rows, k, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                if self.needs(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if transpose_b {
                            // b stored [n, k]: ga = g · b
                            gemm_nn_acc(gs, bs, gas, m, n, k);
                        } else {
                            gemm_nt_acc(gs, bs, gas, m, n, k);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if transpose_b {
                            // gb [n, k] = gᵀ · a
                            gemm_tn_acc(gs, as_, gbs, m, n, k);
                        } else {
                            gemm_tn_acc(as_, gs, gbs, m, k, n);
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, maps } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (la, lb) = (av.len(), bv.len());
                match maps {
                    None => {
                        if self.needs(a) {
                            let ga = slot(grads, a, la);
                            for j in 0..g.len() {
                                ga[j] += match kind {
                                    BinKind::Add | BinKind::Sub => g[j],
                                    BinKind::Mul => g[j] * bv[j],
                                };
                            }
                        }
                        if self.needs(b) {
                            let gb = slot(grads, b, lb);
                            for j in 0..g.len() {
                                gb[j] += match kind {
                                    BinKind::Add => g[j],
                                    BinKind::Sub => -g[j],
                                    BinKind::Mul => g[j] * av[j],
                                };
                            }
                        }
                    }
                    Some((ma, mb)) => {
                        if self.needs(a) {
                            let ga = slot(grads, a, la);
                            for j in 0..g.len() {
                                ga[ma[j]] += match kind {
                                    BinKind::Add | BinKind::Sub => g[j],
                                    BinKind::Mul => g[j] * bv[mb[j]],
                                };
                            }
                        }
                        if self.needs(b) {
                            let gb = slot(grads, b, lb);
                            for j in 0..g.len() {
                                gb[mb[j]] += match kind {
                                    BinKind::Add => g[j],
                                    BinKind::Sub => -g[j],
                                    BinKind::Mul => g[j] * av[ma[j]],
                                };
                            }
                        }
                    }
                }
            }
            &Op::AddBias { x, b } => {
                if self.needs(x) {
                    let gx = slot(grads, x, g.len());
                    add_into(gx, g);
                }
                if self.needs(b) {
                    let n = self.nodes[b].value.len();
                    let gb = slot(grads, b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Scale { x, s } => {
                let gx = slot(grads, x, g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += s * v;
                }
            }
            &Op::Relu { x } => {
                let xv = &self.nodes[x].value;
                let gx = slot(grads, x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
            &Op::Sigmoid { x } => {
                let y = &node.value;
                let gx = slot(grads, x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            &Op::Softmax { x, cols } => {
                let y = &node.value;
                let gx = slot(grads, x, g.len());
                for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::MaxPoolRows { x, rows, cols, argmax } => {
                let (rows, cols) = (*rows, *cols);
                let n = self.nodes[*x].value.len();
                let gx = slot(grads, *x, n);
                for (j, &r) in argmax.iter().enumerate() {
                    let (bi, c) = (j / cols, j % cols);
                    gx[bi * rows * cols + r * cols + c] += g[j];
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
                ..
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(widths) {
                    if self.needs(inp) {
                        let gi = slot(grads, inp, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            add_into(&mut gi[o * w..(o + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { table, cols, indices } => {
                let n = self.nodes[*table].value.len();
                let gt = slot(grads, *table, n);
                for (r, &idx) in indices.iter().enumerate() {
                    add_into(&mut gt[idx * cols..(idx + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            &Op::Reshape { x } => {
                let gx = slot(grads, x, g.len());
                add_into(gx, g);
            }
            &Op::Transpose { x, batch, m, n } => {
                let gx = slot(grads, x, g.len());
                for bi in 0..batch {
                    let base = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gx[base + i * n + j] += g[base + j * m + i];
                        }
                    }
                }
            }
            &Op::Conv1d {
                x,
                k,
                batch,
                cin,
                cout,
                width,
                time,
                dilation,
            } => {
                let xv = &self.nodes[x].value;
                let kv = &self.nodes[k].value;
                if self.needs(x) {
                    let gx = slot(grads, x, batch * cin * time);
                    for b in 0..batch {
                        for co in 0..cout {
                            let go = &g[(b * cout + co) * time..(b * cout + co + 1) * time];
                            for ci in 0..cin {
                                let gxs = &mut gx[(b * cin + ci) * time..(b * cin + ci + 1) * time];
                                for w in 0..width {
                                    let shift = (width - 1 - w) * dilation;
                                    if shift >= time {
                                        continue;
                                    }
                                    let kw = kv[(co * cin + ci) * width + w];
                                    for (d, &gt) in gxs[..time - shift].iter_mut().zip(&go[shift..]) {
                                        *d += kw * gt;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(k) {
                    let gk = slot(grads, k, cout * cin * width);
                    for b in 0..batch {
                        for co in 0..cout {
                            let go = &g[(b * cout + co) * time..(b * cout + co + 1) * time];
                            for ci in 0..cin {
                                let xs = &xv[(b * cin + ci) * time..(b * cin + ci + 1) * time];
                                for w in 0..width {
                                    let shift = (width - 1 - w) * dilation;
                                    if shift >= time {
                                        continue;
                                    }
                                    let s: f64 = go[shift..].iter().zip(xs).map(|(a, b)| a * b).sum();
                                    gk[(co * cin + ci) * width + w] += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let gv = &self.nodes[*gamma].value;
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    add_into(slot(grads, *gamma, channels), &sum_gx);
                }
                if self.needs(*beta) {
                    add_into(slot(grads, *beta, channels), &sum_g);
                }
                if self.needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            let scale = gv[c] * inv_std[c];
                            for i in base..base + inner {
                                gx[i] += if *train {
                                    scale * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            &Op::LocalDense {
                x,
                w,
                b,
                batch,
                hours,
                cin,
                cout,
            } => {
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                if self.needs(x) {
                    let gx = slot(grads, x, batch * hours * cin);
                    for bi in 0..batch {
                        for h in 0..hours {
                            let go = &g[(bi * hours + h) * cout..(bi * hours + h + 1) * cout];
                            let gxr = &mut gx[(bi * hours + h) * cin..(bi * hours + h + 1) * cin];
                            gemm_nt_acc(go, &wv[h * cin * cout..(h + 1) * cin * cout], gxr, 1, cout, cin);
                        }
                    }
                }
                if self.needs(w) {
                    let gw = slot(grads, w, hours * cin * cout);
                    for bi in 0..batch {
                        for h in 0..hours {
                            let go = &g[(bi * hours + h) * cout..(bi * hours + h + 1) * cout];
                            let xr = &xv[(bi * hours + h) * cin..(bi * hours + h + 1) * cin];
                            gemm_tn_acc(xr, go, &mut gw[h * cin * cout..(h + 1) * cin * cout], 1, cin, cout);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, hours * cout);
                    for row in g.chunks(hours * cout) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Sum { x } => {
                let n = self.nodes[x].value.len();
                let gx = slot(grads, x, n);
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Mean { x } => {
                let n = self.nodes[x].value.len();
                let gx = slot(grads, x, n);
                let s = g[0] / n as f64;
                for d in gx.iter_mut() {
                    *d += s;
                }
            }
            &Op::SumSquares { x } => {
                let xv = &self.nodes[x].value;
                let gx = slot(grads, x, xv.len());
                for (d, &v) in gx.iter_mut().zip(xv) {
                    *d += 2.0 * v * g[0];
                }
            }
            Op::Pinball { pred, target, q } => {
                let pv = &self.nodes[*pred].value;
                let n = pv.len();
                let gp = slot(grads, *pred, n);
                let s = g[0] / n as f64;
                for j in 0..n {
                    let e = target[j] - pv[j];
                    gp[j] += if e > 0.0 { -q[j] * s } else { (1.0 - q[j]) * s };
                }
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of every parameter bound in the graph into the
    /// store. Parameters the loss does not reach receive zeros.
    pub fn apply_to(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, v) in &self.params {
            let t = store.get_mut(name)?;
            let g = match self.wrt(*v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out[m, n] += a[m, k] · b[k, n]` (out assumed pre-initialized).
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_acc(a, b, out, m, k, n)
}

fn gemm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (ov, bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov += av * bv;
            }
        }
    }
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (ov, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// Same-rank broadcasting: every dim pair must match or contain a 1.
fn broadcast_maps(sa: &[usize], sb: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if sa.len() != sb.len() {
        return Err(dim_err(format!("cannot broadcast {sa:?} with {sb:?}")));
    }
    let mut out = Vec::with_capacity(sa.len());
    for (&x, &y) in sa.iter().zip(sb) {
        if x != y && x != 1 && y != 1 {
            return Err(dim_err(format!("cannot broadcast {sa:?} with {sb:?}")));
        }
        out.push(x.max(y));
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; s.len()];
        let mut acc = 1;
        for d in (0..s.len()).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (st_a, st_b) = (strides(sa), strides(sb));
    let total = numel(&out);
    let mut ma = Vec::with_capacity(total);
    let mut mb = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        ma.push(idx.iter().zip(&st_a).map(|(i, s)| i * s).sum());
        mb.push(idx.iter().zip(&st_b).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, ma, mb))
}
