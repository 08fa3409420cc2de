//! The tape: node storage, forward op constructors, and the backward sweep.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Operation record. Variants carry whatever forward state the backward pass
/// needs (softmax outputs, attention weights, row norms, ...) so backward
/// never recomputes a nonlinearity.
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    /// Broadcast-add a 1xC row to every row of `a`.
    AddRow {
        a: TensorId,
        row: TensorId,
    },
    /// Add a TxC table to `a` (rows = reps * T), tiled down the rows.
    AddTiled {
        a: TensorId,
        table: TensorId,
        reps: usize,
    },
    /// Multiply each row r of `a` by col[r, 0].
    MulCol {
        a: TensorId,
        col: TensorId,
    },
    /// Subtract col[r, 0] from each element of row r.
    SubCol {
        a: TensorId,
        col: TensorId,
    },
    Gelu(TensorId),
    Relu(TensorId),
    Square(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// Per-row mean over columns: RxC -> Rx1.
    RowMean(TensorId),
    /// Column sums: RxC -> 1xC.
    ColSum(TensorId),
    /// Mean over consecutive groups of `group` rows: RxC -> (R/group)xC.
    PoolRows {
        a: TensorId,
        group: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows {
        a: TensorId,
        out: Array2<f64>,
    },
    /// Sum over rows of -log softmax(logits)[label]. Scalar output.
    CrossEntropySum {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    /// Mean over rows of KL(softmax(p) || softmax(q)). Scalar output.
    KlSoftmax {
        p: TensorId,
        q: TensorId,
        sp: Array2<f64>,
        sq: Array2<f64>,
    },
    /// Multi-head self-attention over `seqs` sequences of `seq_len` rows.
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        seqs: usize,
        seq_len: usize,
        heads: usize,
        weights: Vec<Array2<f64>>,
    },
    /// Row-wise v / (||v|| + eps).
    L2NormRows {
        a: TensorId,
        eps: f64,
        norms: Vec<f64>,
    },
    /// Row-wise log sum exp: RxC -> Rx1.
    LogsumexpRows(TensorId),
    /// Per group of `group` rows: scores[i, j] = q_i . k_j within the group.
    GroupScores {
        q: TensorId,
        k: TensorId,
        group: usize,
    },
    /// Identity forward, gradient scaled by -lambda on the way back.
    GradientReversal {
        a: TensorId,
        lambda: f64,
    },
    StopGradient,
    ConcatCols(TensorId, TensorId),
    SliceCols {
        a: TensorId,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<TensorId>),
    SliceRows {
        a: TensorId,
        start: usize,
        end: usize,
    },
    /// Row r comes from `on` where mask[r], else from `off`.
    SelectRows {
        on: TensorId,
        off: TensorId,
        mask: Vec<bool>,
    },
    /// Row r is a[r] where keep[r], else the broadcast 1xC `fill` row.
    FillRows {
        a: TensorId,
        fill: TensorId,
        keep: Vec<bool>,
    },
    /// out[g*k + j] = parts[j] row g, for k parts of equal row count.
    InterleaveRows(Vec<TensorId>),
    /// Trilinear upsampling of a cubic grid; rows are voxels in z-major
    /// raster order (row = z*side^2 + y*side + x), cols are channels.
    UpsampleTrilinear {
        a: TensorId,
        in_side: usize,
        out_side: usize,
    },
    /// Patch rows (block^3 cells, channel-major cols) rearranged into voxel
    /// rows (cols = channels) of one cubic grid. Pure permutation.
    VoxelizeRows {
        a: TensorId,
        channels: usize,
        side: usize,
        block: usize,
    },
    /// Scalar min(exp(a), cap). Gradient is zero where the cap binds.
    ExpClamped {
        a: TensorId,
        cap: f64,
    },
    /// Multiply every element of `a` by the scalar node `s` (1x1).
    MulScalarNode {
        a: TensorId,
        s: TensorId,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Flat computation tape. Build forward with the op methods, then call
/// [`Tape::backward`] once on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation; never allocates a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar convenience accessor; panics if the node is not 1x1.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    /// Accumulated gradient, if any adjoint reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn accumulate(&mut self, id: TensorId, delta: Array2<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn dims(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    // ---- elementwise and broadcast arithmetic ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.dims(a), self.dims(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.dims(a), self.dims(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.dims(a), self.dims(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise a / b. Caller guarantees b is bounded away from zero.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.dims(a), self.dims(b), "div: shape mismatch");
        let v = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (_, ka) = self.dims(a);
        let (kb, _) = self.dims(b);
        assert_eq!(ka, kb, "matmul: inner dims {} vs {}", ka, kb);
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (_, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row: row must be 1x{}", c);
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow { a, row }, rg)
    }

    /// a has reps * T rows; table is TxC and is added to each block of T rows.
    pub fn add_tiled(&mut self, a: TensorId, table: TensorId, reps: usize) -> TensorId {
        let (r, c) = self.dims(a);
        let (t, tc) = self.dims(table);
        assert_eq!(c, tc, "add_tiled: col mismatch");
        assert_eq!(r, t * reps, "add_tiled: rows {} != {} * {}", r, reps, t);
        let mut v = self.value(a).clone();
        for rep in 0..reps {
            let mut block = v.slice_mut(s![rep * t..(rep + 1) * t, ..]);
            block += &self.nodes[table.0].value;
        }
        let rg = self.rg(a) || self.rg(table);
        self.push(v, Op::AddTiled { a, table, reps }, rg)
    }

    pub fn mul_col(&mut self, a: TensorId, col: TensorId) -> TensorId {
        let (r, _) = self.dims(a);
        assert_eq!(self.dims(col), (r, 1), "mul_col: col must be {}x1", r);
        let v = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::MulCol { a, col }, rg)
    }

    pub fn sub_col(&mut self, a: TensorId, col: TensorId) -> TensorId {
        let (r, _) = self.dims(a);
        assert_eq!(self.dims(col), (r, 1), "sub_col: col must be {}x1", r);
        let v = self.value(a) - self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::SubCol { a, col }, rg)
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(gelu_fwd);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let out = softmax_rows_of(self.value(a));
        let rg = self.rg(a);
        self.push(out.clone(), Op::SoftmaxRows { a, out }, rg)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn row_mean(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.dims(a);
        let mut v = Array2::zeros((r, 1));
        for (i, row) in self.value(a).axis_iter(Axis(0)).enumerate() {
            v[[i, 0]] = row.sum() / c as f64;
        }
        let rg = self.rg(a);
        self.push(v, Op::RowMean(a), rg)
    }

    pub fn col_sum(&mut self, a: TensorId) -> TensorId {
        let v = self
            .value(a)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .into_dimensionality()
            .expect("col_sum shape");
        let rg = self.rg(a);
        self.push(v, Op::ColSum(a), rg)
    }

    /// Mean over each consecutive group of `group` rows.
    pub fn pool_rows(&mut self, a: TensorId, group: usize) -> TensorId {
        let (r, c) = self.dims(a);
        assert!(group > 0 && r % group == 0, "pool_rows: {} rows / {}", r, group);
        let out_rows = r / group;
        let mut v = Array2::zeros((out_rows, c));
        for q in 0..out_rows {
            let block = self.value(a).slice(s![q * group..(q + 1) * group, ..]);
            let mean = block.sum_axis(Axis(0)) / group as f64;
            v.row_mut(q).assign(&mean);
        }
        let rg = self.rg(a);
        self.push(v, Op::PoolRows { a, group }, rg)
    }

    pub fn logsumexp_rows(&mut self, a: TensorId) -> TensorId {
        let (r, _) = self.dims(a);
        let mut v = Array2::zeros((r, 1));
        for (i, row) in self.value(a).axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            v[[i, 0]] = m + s.ln();
        }
        let rg = self.rg(a);
        self.push(v, Op::LogsumexpRows(a), rg)
    }

    // ---- normalization ----

    /// Row-wise layer norm with per-column affine (gamma, beta are 1xC).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c), "layer_norm: gamma shape");
        assert_eq!(self.dims(beta), (1, c), "layer_norm: beta shape");
        let mut xhat = Array2::zeros((r, c));
        let mut rstd = vec![0.0; r];
        for (i, row) in self.value(x).axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for (j, &v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * rs;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise v / (||v||_2 + eps).
    pub fn l2_normalize_rows(&mut self, a: TensorId, eps: f64) -> TensorId {
        let (r, _) = self.dims(a);
        let mut norms = vec![0.0; r];
        let mut v = self.value(a).clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
            norms[i] = n;
            row.mapv_inplace(|x| x / (n + eps));
        }
        let rg = self.rg(a);
        self.push(v, Op::L2NormRows { a, eps, norms }, rg)
    }

    // ---- losses ----

    /// Sum over rows of the softmax cross entropy against integer labels.
    pub fn cross_entropy_sum(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let (r, k) = self.dims(logits);
        assert_eq!(labels.len(), r, "cross_entropy_sum: {} labels for {} rows", labels.len(), r);
        assert!(labels.iter().all(|&y| y < k), "cross_entropy_sum: label out of range");
        let probs = softmax_rows_of(self.value(logits));
        let mut loss = 0.0;
        for (i, row) in self.value(logits).axis_iter(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        let v = Array2::from_elem((1, 1), loss);
        let rg = self.rg(logits);
        self.push(
            v,
            Op::CrossEntropySum {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of KL(softmax(p) || softmax(q)).
    pub fn kl_softmax(&mut self, p: TensorId, q: TensorId) -> TensorId {
        assert_eq!(self.dims(p), self.dims(q), "kl_softmax: shape mismatch");
        let sp = softmax_rows_of(self.value(p));
        let sq = softmax_rows_of(self.value(q));
        let r = sp.nrows();
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..sp.ncols() {
                total += sp[[i, j]] * (sp[[i, j]].ln() - sq[[i, j]].ln());
            }
        }
        let v = Array2::from_elem((1, 1), total / r as f64);
        let rg = self.rg(p) || self.rg(q);
        self.push(v, Op::KlSoftmax { p, q, sp, sq }, rg)
    }

    // ---- attention ----

    /// Multi-head self-attention. q, k, v are (seqs * seq_len) x d with the
    /// head dimension packed into columns; scores are scaled by 1/sqrt(d/heads).
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        seqs: usize,
        heads: usize,
    ) -> TensorId {
        let (r, d) = self.dims(q);
        assert_eq!(self.dims(k), (r, d), "attention: k shape");
        assert_eq!(self.dims(v), (r, d), "attention: v shape");
        assert!(r % seqs == 0, "attention: rows not divisible by seqs");
        assert!(d % heads == 0, "attention: dim not divisible by heads");
        let seq_len = r / seqs;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((r, d));
        let mut weights = Vec::with_capacity(seqs * heads);
        for si in 0..seqs {
            let rows = s![si * seq_len..(si + 1) * seq_len, ..];
            let qv = self.value(q).slice(rows);
            let kv = self.value(k).slice(rows);
            let vv = self.value(v).slice(rows);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = qv.slice(cols);
                let kh = kv.slice(cols);
                let vh = vv.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                let attn = softmax_rows_of(&scores);
                let oh = attn.dot(&vh);
                out.slice_mut(s![si * seq_len..(si + 1) * seq_len, h * dh..(h + 1) * dh])
                    .assign(&oh);
                weights.push(attn);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seqs,
                seq_len,
                heads,
                weights,
            },
            rg,
        )
    }

    /// Per group of `group` rows: out[i, j] = q_row(i) . k_row(j), both rows
    /// taken within the group. Output is (rows)x(group).
    pub fn group_scores(&mut self, q: TensorId, k: TensorId, group: usize) -> TensorId {
        let (r, d) = self.dims(q);
        assert_eq!(self.dims(k), (r, d), "group_scores: k shape");
        assert!(group > 0 && r % group == 0, "group_scores: {} rows / {}", r, group);
        let mut out = Array2::zeros((r, group));
        for g in 0..r / group {
            let rows = s![g * group..(g + 1) * group, ..];
            let qg = self.value(q).slice(rows);
            let kg = self.value(k).slice(rows);
            out.slice_mut(s![g * group..(g + 1) * group, ..])
                .assign(&qg.dot(&kg.t()));
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(out, Op::GroupScores { q, k, group }, rg)
    }

    // ---- gradient routing ----

    /// Identity forward; backward multiplies the adjoint by -lambda.
    pub fn gradient_reversal(&mut self, a: TensorId, lambda: f64) -> TensorId {
        let v = self.value(a).clone();
        let rg = self.rg(a);
        self.push(v, Op::GradientReversal { a, lambda }, rg)
    }

    /// Identity forward; no adjoint flows past this node.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    // ---- structural ops ----

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(self.value(a));
        v.slice_mut(s![.., ca..]).assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let (_, c) = self.dims(a);
        assert!(start < end && end <= c, "slice_cols: {}..{} of {}", start, end, c);
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { a, start, end }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let c = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut v = Array2::zeros((total, c));
        let mut at = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows: col mismatch");
            v.slice_mut(s![at..at + r, ..]).assign(self.value(p));
            at += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let (r, _) = self.dims(a);
        assert!(start < end && end <= r, "slice_rows: {}..{} of {}", start, end, r);
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows { a, start, end }, rg)
    }

    /// Row r of the output is on[r] where mask[r] is true, else off[r].
    pub fn select_rows(&mut self, on: TensorId, off: TensorId, mask: &[bool]) -> TensorId {
        let (r, _) = self.dims(on);
        assert_eq!(self.dims(on), self.dims(off), "select_rows: shape mismatch");
        assert_eq!(mask.len(), r, "select_rows: mask length");
        let mut v = self.value(off).clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let src = self.nodes[on.0].value.row(i).to_owned();
                v.row_mut(i).assign(&src);
            }
        }
        let rg = self.rg(on) || self.rg(off);
        self.push(
            v,
            Op::SelectRows {
                on,
                off,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Row r keeps a[r] where keep[r], else is replaced by the 1xC fill row.
    pub fn fill_rows(&mut self, a: TensorId, fill: TensorId, keep: &[bool]) -> TensorId {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(fill), (1, c), "fill_rows: fill must be 1x{}", c);
        assert_eq!(keep.len(), r, "fill_rows: keep length");
        let mut v = self.value(a).clone();
        for (i, &kp) in keep.iter().enumerate() {
            if !kp {
                let src = self.nodes[fill.0].value.row(0).to_owned();
                v.row_mut(i).assign(&src);
            }
        }
        let rg = self.rg(a) || self.rg(fill);
        self.push(
            v,
            Op::FillRows {
                a,
                fill,
                keep: keep.to_vec(),
            },
            rg,
        )
    }

    /// Interleave k equal-height parts: out[g*k + j] = parts[j] row g.
    pub fn interleave_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "interleave_rows: empty");
        let (r, c) = self.dims(parts[0]);
        for &p in parts {
            assert_eq!(self.dims(p), (r, c), "interleave_rows: shape mismatch");
        }
        let k = parts.len();
        let mut v = Array2::zeros((r * k, c));
        for (j, &p) in parts.iter().enumerate() {
            for g in 0..r {
                let src = self.nodes[p.0].value.row(g).to_owned();
                v.row_mut(g * k + j).assign(&src);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::InterleaveRows(parts.to_vec()), rg)
    }

    /// Trilinear upsampling of a cubic voxel grid stored rows = voxels
    /// (z-major raster), cols = channels. Half-pixel-centered sampling.
    pub fn upsample_trilinear(&mut self, a: TensorId, in_side: usize, out_side: usize) -> TensorId {
        let (r, c) = self.dims(a);
        assert_eq!(r, in_side.pow(3), "upsample_trilinear: rows != in_side^3");
        assert!(out_side >= in_side, "upsample_trilinear: shrinking not supported");
        let mut v = Array2::zeros((out_side.pow(3), c));
        {
            let src = self.value(a);
            for_each_trilinear_tap(in_side, out_side, |dst_row, src_row, w| {
                let contrib = &src.row(src_row) * w;
                let mut dst = v.row_mut(dst_row);
                dst += &contrib;
            });
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::UpsampleTrilinear {
                a,
                in_side,
                out_side,
            },
            rg,
        )
    }

    /// Rearranges one grid's patch rows into voxel rows: input rows are the
    /// (side/block)^3 cells in z-major order with cols laid out channel-major
    /// then z-major within the cell (col = c*block^3 + bz*block^2 + by*block
    /// + bx); output rows are the side^3 voxels in z-major order, cols are
    /// channels. Inverse of the patchify layout, as a differentiable node.
    pub fn voxelize_rows(
        &mut self,
        a: TensorId,
        channels: usize,
        side: usize,
        block: usize,
    ) -> TensorId {
        let (r, c) = self.dims(a);
        assert!(side % block == 0, "voxelize_rows: side {} % block {}", side, block);
        let g = side / block;
        assert_eq!(r, g * g * g, "voxelize_rows: rows != (side/block)^3");
        assert_eq!(c, channels * block.pow(3), "voxelize_rows: cols != channels * block^3");
        let mut v = Array2::zeros((side.pow(3), channels));
        {
            let b3 = block.pow(3);
            let src = self.value(a);
            for_each_voxel_cell(side, block, |voxel, cell, off| {
                for ch in 0..channels {
                    v[[voxel, ch]] = src[[cell, ch * b3 + off]];
                }
            });
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::VoxelizeRows {
                a,
                channels,
                side,
                block,
            },
            rg,
        )
    }

    /// Scalar min(exp(a), cap) for a 1x1 node.
    pub fn exp_clamped(&mut self, a: TensorId, cap: f64) -> TensorId {
        assert_eq!(self.dims(a), (1, 1), "exp_clamped: scalar only");
        let e = self.scalar(a).exp();
        let v = Array2::from_elem((1, 1), e.min(cap));
        let rg = self.rg(a);
        self.push(v, Op::ExpClamped { a, cap }, rg)
    }

    /// Multiply every element of a by the 1x1 scalar node s.
    pub fn mul_scalar_node(&mut self, a: TensorId, sid: TensorId) -> TensorId {
        assert_eq!(self.dims(sid), (1, 1), "mul_scalar_node: s must be 1x1");
        let sv = self.scalar(sid);
        let v = self.value(a) * sv;
        let rg = self.rg(a) || self.rg(sid);
        self.push(v, Op::MulScalarNode { a, s: sid }, rg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Gradients accumulate into every
    /// reachable node with `requires_grad`; constants and anything behind a
    /// stop-gradient are skipped entirely.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.dims(loss), (1, 1), "backward: loss must be scalar");
        self.accumulate(loss, Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, delta) in contribs {
                self.accumulate(target, delta);
            }
        }
    }

    /// Per-op adjoint propagation: returns (parent, gradient contribution).
    fn node_backward(&self, i: usize, g: &Array2<f64>) -> Vec<(TensorId, Array2<f64>)> {
        let val = |id: TensorId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
            Op::Div(a, b) => {
                let bv = val(*b);
                let da = g / bv;
                let db = -(g * val(*a)) / (bv * bv);
                vec![(*a, da), (*b, db)]
            }
            Op::Matmul(a, b) => {
                let da = g.dot(&val(*b).t());
                let db = val(*a).t().dot(g);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddRow { a, row } => {
                let drow = g
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dimensionality()
                    .expect("add_row grad shape");
                vec![(*a, g.clone()), (*row, drow)]
            }
            Op::AddTiled { a, table, reps } => {
                let (t, c) = self.nodes[table.0].value.dim();
                let mut dt = Array2::zeros((t, c));
                for rep in 0..*reps {
                    dt += &g.slice(s![rep * t..(rep + 1) * t, ..]);
                }
                vec![(*a, g.clone()), (*table, dt)]
            }
            Op::MulCol { a, col } => {
                let da = g * val(*col);
                let dcol = (g * val(*a))
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .into_dimensionality()
                    .expect("mul_col grad shape");
                vec![(*a, da), (*col, dcol)]
            }
            Op::SubCol { a, col } => {
                let dcol = -g
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .into_dimensionality()
                    .expect("sub_col grad shape");
                vec![(*a, g.clone()), (*col, dcol)]
            }
            Op::Gelu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(val(*a))
                    .map_collect(|&gi, &x| gi * gelu_bwd(x));
                vec![(*a, da)]
            }
            Op::Relu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(val(*a))
                    .map_collect(|&gi, &x| if x > 0.0 { gi } else { 0.0 });
                vec![(*a, da)]
            }
            Op::Square(a) => vec![(*a, 2.0 * (g * val(*a)))],
            Op::SumAll(a) => {
                let da = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                vec![(*a, da)]
            }
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                let da = Array2::from_elem(val(*a).dim(), g[[0, 0]] / n);
                vec![(*a, da)]
            }
            Op::RowMean(a) => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                for i in 0..r {
                    da.row_mut(i).fill(g[[i, 0]] / c as f64);
                }
                vec![(*a, da)]
            }
            Op::ColSum(a) => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                for i in 0..r {
                    for j in 0..c {
                        da[[i, j]] = g[[0, j]];
                    }
                }
                vec![(*a, da)]
            }
            Op::PoolRows { a, group } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                for row in 0..r {
                    let src = g.row(row / group);
                    let mut dst = da.row_mut(row);
                    dst.assign(&(&src / *group as f64));
                }
                vec![(*a, da)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = xhat.dim();
                let gv = val(*gamma);
                let mut dx = Array2::zeros((r, c));
                let dxhat = g * gv;
                for i in 0..r {
                    let dxh = dxhat.row(i);
                    let xh = xhat.row(i);
                    let m1 = dxh.sum() / c as f64;
                    let m2 = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[[i, j]] = rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                    }
                }
                let dgamma = (g * xhat)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dimensionality()
                    .expect("ln dgamma shape");
                let dbeta = g
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0))
                    .into_dimensionality()
                    .expect("ln dbeta shape");
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::SoftmaxRows { a, out } => {
                let (r, c) = out.dim();
                let mut da = Array2::zeros((r, c));
                for i in 0..r {
                    let p = out.row(i);
                    let gi = g.row(i);
                    let dot = p.iter().zip(gi.iter()).map(|(&pv, &gv)| pv * gv).sum::<f64>();
                    for j in 0..c {
                        da[[i, j]] = p[j] * (gi[j] - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::CrossEntropySum {
                logits,
                labels,
                probs,
            } => {
                let mut da = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    da[[i, y]] -= 1.0;
                }
                da *= g[[0, 0]];
                vec![(*logits, da)]
            }
            Op::KlSoftmax { p, q, sp, sq } => {
                let (r, c) = sp.dim();
                let gs = g[[0, 0]] / r as f64;
                let mut dp = Array2::zeros((r, c));
                let mut dq = Array2::zeros((r, c));
                for i in 0..r {
                    let mut kl = 0.0;
                    for j in 0..c {
                        kl += sp[[i, j]] * (sp[[i, j]].ln() - sq[[i, j]].ln());
                    }
                    for j in 0..c {
                        let aij = sp[[i, j]].ln() - sq[[i, j]].ln();
                        dp[[i, j]] = gs * sp[[i, j]] * (aij - kl);
                        dq[[i, j]] = gs * (sq[[i, j]] - sp[[i, j]]);
                    }
                }
                vec![(*p, dp), (*q, dq)]
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                seq_len,
                heads,
                weights,
            } => {
                let (r, d) = val(*q).dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Array2::zeros((r, d));
                let mut dk = Array2::zeros((r, d));
                let mut dv = Array2::zeros((r, d));
                for si in 0..*seqs {
                    let rows = s![si * seq_len..(si + 1) * seq_len, ..];
                    for h in 0..*heads {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let attn = &weights[si * heads + h];
                        let qh = val(*q).slice(rows).slice_move(cols);
                        let kh = val(*k).slice(rows).slice_move(cols);
                        let vh = val(*v).slice(rows).slice_move(cols);
                        let gh = g
                            .slice(s![si * seq_len..(si + 1) * seq_len, h * dh..(h + 1) * dh])
                            .to_owned();
                        // out = attn @ v
                        let dvh = attn.t().dot(&gh);
                        let dattn = gh.dot(&vh.t());
                        // softmax backward per row
                        let mut dscores = Array2::zeros((*seq_len, *seq_len));
                        for i in 0..*seq_len {
                            let a_row = attn.row(i);
                            let da_row = dattn.row(i);
                            let dot = a_row
                                .iter()
                                .zip(da_row.iter())
                                .map(|(&a, &b)| a * b)
                                .sum::<f64>();
                            for j in 0..*seq_len {
                                dscores[[i, j]] = a_row[j] * (da_row[j] - dot);
                            }
                        }
                        dscores *= scale;
                        let dqh = dscores.dot(&kh);
                        let dkh = dscores.t().dot(&qh);
                        dq.slice_mut(s![si * seq_len..(si + 1) * seq_len, h * dh..(h + 1) * dh])
                            .assign(&dqh);
                        dk.slice_mut(s![si * seq_len..(si + 1) * seq_len, h * dh..(h + 1) * dh])
                            .assign(&dkh);
                        dv.slice_mut(s![si * seq_len..(si + 1) * seq_len, h * dh..(h + 1) * dh])
                            .assign(&dvh);
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::L2NormRows { a, eps, norms } => {
                let av = val(*a);
                let (r, c) = av.dim();
                let mut da = Array2::zeros((r, c));
                for i in 0..r {
                    let n = norms[i];
                    let sinv = 1.0 / (n + eps);
                    let gi = g.row(i);
                    let ai = av.row(i);
                    let dot = gi.iter().zip(ai.iter()).map(|(&x, &y)| x * y).sum::<f64>();
                    let coef = if n > 0.0 {
                        dot / (n * (n + eps) * (n + eps))
                    } else {
                        0.0
                    };
                    for j in 0..c {
                        da[[i, j]] = gi[j] * sinv - ai[j] * coef;
                    }
                }
                vec![(*a, da)]
            }
            Op::LogsumexpRows(a) => {
                let av = val(*a);
                let out = &self.nodes[i].value;
                let (r, c) = av.dim();
                let mut da = Array2::zeros((r, c));
                for ri in 0..r {
                    for j in 0..c {
                        da[[ri, j]] = g[[ri, 0]] * (av[[ri, j]] - out[[ri, 0]]).exp();
                    }
                }
                vec![(*a, da)]
            }
            Op::GroupScores { q, k, group } => {
                let qv = val(*q);
                let kv = val(*k);
                let (r, d) = qv.dim();
                let mut dq = Array2::zeros((r, d));
                let mut dk = Array2::zeros((r, d));
                for gi in 0..r / group {
                    let rows = s![gi * group..(gi + 1) * group, ..];
                    let gg = g.slice(rows);
                    let qg = qv.slice(rows);
                    let kg = kv.slice(rows);
                    dq.slice_mut(rows).assign(&gg.dot(&kg));
                    dk.slice_mut(rows).assign(&gg.t().dot(&qg));
                }
                vec![(*q, dq), (*k, dk)]
            }
            Op::GradientReversal { a, lambda } => vec![(*a, g * (-*lambda))],
            Op::ConcatCols(a, b) => {
                let ca = val(*a).ncols();
                let da = g.slice(s![.., ..ca]).to_owned();
                let db = g.slice(s![.., ca..]).to_owned();
                vec![(*a, da), (*b, db)]
            }
            Op::SliceCols { a, start, end } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                da.slice_mut(s![.., *start..*end]).assign(g);
                vec![(*a, da)]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut at = 0;
                for &p in parts {
                    let r = val(p).nrows();
                    out.push((p, g.slice(s![at..at + r, ..]).to_owned()));
                    at += r;
                }
                out
            }
            Op::SliceRows { a, start, end } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                da.slice_mut(s![*start..*end, ..]).assign(g);
                vec![(*a, da)]
            }
            Op::SelectRows { on, off, mask } => {
                let (r, c) = val(*on).dim();
                let mut don = Array2::zeros((r, c));
                let mut doff = Array2::zeros((r, c));
                for (ri, &m) in mask.iter().enumerate() {
                    if m {
                        don.row_mut(ri).assign(&g.row(ri));
                    } else {
                        doff.row_mut(ri).assign(&g.row(ri));
                    }
                }
                vec![(*on, don), (*off, doff)]
            }
            Op::FillRows { a, fill, keep } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                let mut dfill = Array2::zeros((1, c));
                for (ri, &kp) in keep.iter().enumerate() {
                    if kp {
                        da.row_mut(ri).assign(&g.row(ri));
                    } else {
                        let mut f = dfill.row_mut(0);
                        f += &g.row(ri);
                    }
                }
                vec![(*a, da), (*fill, dfill)]
            }
            Op::InterleaveRows(parts) => {
                let k = parts.len();
                let r = val(parts[0]).nrows();
                let mut out = Vec::with_capacity(k);
                for (j, &p) in parts.iter().enumerate() {
                    let c = val(p).ncols();
                    let mut dp = Array2::zeros((r, c));
                    for gi in 0..r {
                        dp.row_mut(gi).assign(&g.row(gi * k + j));
                    }
                    out.push((p, dp));
                }
                out
            }
            Op::UpsampleTrilinear {
                a,
                in_side,
                out_side,
            } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                for_each_trilinear_tap(*in_side, *out_side, |dst_row, src_row, w| {
                    let contrib = &g.row(dst_row) * w;
                    let mut dst = da.row_mut(src_row);
                    dst += &contrib;
                });
                vec![(*a, da)]
            }
            Op::VoxelizeRows {
                a,
                channels,
                side,
                block,
            } => {
                let (r, c) = val(*a).dim();
                let mut da = Array2::zeros((r, c));
                let b3 = block.pow(3);
                for_each_voxel_cell(*side, *block, |voxel, cell, off| {
                    for ch in 0..*channels {
                        da[[cell, ch * b3 + off]] += g[[voxel, ch]];
                    }
                });
                vec![(*a, da)]
            }
            Op::ExpClamped { a, cap } => {
                let e = val(*a)[[0, 0]].exp();
                let d = if e < *cap { e * g[[0, 0]] } else { 0.0 };
                vec![(*a, Array2::from_elem((1, 1), d))]
            }
            Op::MulScalarNode { a, s: sid } => {
                let sv = val(*sid)[[0, 0]];
                let da = g * sv;
                let ds = Array2::from_elem((1, 1), (g * val(*a)).sum());
                vec![(*a, da), (*sid, ds)]
            }
        }
    }
}

/// Visits every voxel of a cubic grid: (voxel row, containing cell row,
/// channel-major offset within the cell).
fn for_each_voxel_cell(side: usize, block: usize, mut f: impl FnMut(usize, usize, usize)) {
    let g = side / block;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let voxel = z * side * side + y * side + x;
                let cell = (z / block) * g * g + (y / block) * g + (x / block);
                let off =
                    (z % block) * block * block + (y % block) * block + (x % block);
                f(voxel, cell, off);
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows_of(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Visit every (output voxel, input voxel, weight) tap of half-pixel-centered
/// trilinear interpolation on a cubic grid, z-major raster order.
fn for_each_trilinear_tap(in_side: usize, out_side: usize, mut visit: impl FnMut(usize, usize, f64)) {
    let scale = in_side as f64 / out_side as f64;
    // Per-axis: source position, floor index, fractional weight.
    let axis: Vec<(usize, usize, f64)> = (0..out_side)
        .map(|d| {
            let pos = (d as f64 + 0.5) * scale - 0.5;
            let clamped = pos.clamp(0.0, (in_side - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_side - 1);
            let f = clamped - i0 as f64;
            (i0, i1, f)
        })
        .collect();
    for z in 0..out_side {
        let (z0, z1, fz) = axis[z];
        for y in 0..out_side {
            let (y0, y1, fy) = axis[y];
            for x in 0..out_side {
                let (x0, x1, fx) = axis[x];
                let dst = z * out_side * out_side + y * out_side + x;
                for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                    if wz == 0.0 {
                        continue;
                    }
                    for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        if wy == 0.0 {
                            continue;
                        }
                        for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            if wx == 0.0 {
                                continue;
                            }
                            let src = zi * in_side * in_side + yi * in_side + xi;
                            visit(dst, src, wz * wy * wx);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.param(array![[5.0], [6.0]]);
        let y = t.matmul(a, b);
        assert_eq!(t.value(y), &array![[17.0], [39.0]]);
        let loss = t.sum_all(y);
        t.backward(loss);
        assert_eq!(t.grad(a).unwrap(), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(t.grad(b).unwrap(), &array![[4.0], [6.0]]);
    }

    #[test]
    fn constants_never_accumulate() {
        let mut t = Tape::new();
        let a = t.param(array![[2.0]]);
        let c = t.constant(array![[3.0]]);
        let y = t.mul(a, c);
        t.backward(y);
        assert_eq!(t.grad(a).unwrap()[[0, 0]], 3.0);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let a = t.param(array![[2.0]]);
        let sg = t.stop_gradient(a);
        let y = t.mul(a, sg);
        t.backward(y);
        // d/da of a * sg(a) treats sg(a) as the constant 2.
        assert_eq!(t.grad(a).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn gradient_reversal_negates_and_scales() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, -2.0]]);
        let r = t.gradient_reversal(a, 0.5);
        assert_eq!(t.value(r), t.value(a));
        let loss = t.sum_all(r);
        t.backward(loss);
        assert_eq!(t.grad(a).unwrap(), &array![[-0.5, -0.5]]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut t = Tape::new();
        let logits = t.param(Array2::zeros((4, 3)));
        let loss = t.cross_entropy_sum(logits, &[0, 1, 2, 0]);
        let expect = 4.0 * 3.0_f64.ln();
        assert!((t.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]);
        let p = t.softmax_rows(a);
        for row in t.value(p).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_uniform_when_scores_tie() {
        // Identical keys make attention average the values exactly.
        let mut t = Tape::new();
        let q = t.param(Array2::from_elem((4, 2), 0.3));
        let k = t.param(Array2::from_elem((4, 2), 0.7));
        let v = t.param(array![[1.0, 0.0], [3.0, 0.0], [5.0, 8.0], [7.0, 0.0]]);
        let out = t.attention(q, k, v, 1, 1);
        let mean = [(1.0 + 3.0 + 5.0 + 7.0) / 4.0, 2.0];
        for r in 0..4 {
            assert!((t.value(out)[[r, 0]] - mean[0]).abs() < 1e-12);
            assert!((t.value(out)[[r, 1]] - mean[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_rows_means_groups() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0], [3.0, 4.0], [10.0, 20.0], [30.0, 40.0]]);
        let p = t.pool_rows(a, 2);
        assert_eq!(t.value(p), &array![[2.0, 3.0], [20.0, 30.0]]);
    }

    #[test]
    fn interleave_round_trips_with_slicing() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0], [2.0]]);
        let b = t.param(array![[10.0], [20.0]]);
        let i = t.interleave_rows(&[a, b]);
        assert_eq!(t.value(i), &array![[1.0], [10.0], [2.0], [20.0]]);
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let mut t = Tape::new();
        let a = t.param(Array2::from_elem((8, 3), 4.25)); // 2^3 voxels
        let u = t.upsample_trilinear(a, 2, 4);
        assert_eq!(t.value(u).dim(), (64, 3));
        for v in t.value(u).iter() {
            assert!((v - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn voxelize_rows_layout_and_gradient() {
        // side 2, block 2: one cell, 8 voxels, 2 channels.
        // col = c*8 + z*4 + y*2 + x, so channel 0 of voxel (z,y,x) reads
        // col z*4+y*2+x and the output is a plain transpose of the layout.
        let mut t = Tape::new();
        let cell = Array2::from_shape_fn((1, 16), |(_, j)| j as f64);
        let a = t.param(cell);
        let v = t.voxelize_rows(a, 2, 2, 2);
        assert_eq!(t.value(v).dim(), (8, 2));
        for voxel in 0..8 {
            assert_eq!(t.value(v)[[voxel, 0]], voxel as f64);
            assert_eq!(t.value(v)[[voxel, 1]], (8 + voxel) as f64);
        }
        // Permutation gradient: d(sum of w .* out)/da scatters w back.
        let w = Array2::from_shape_fn((8, 2), |(r, c)| (r * 2 + c) as f64 * 0.5);
        let wn = t.constant(w.clone());
        let prod = t.mul(v, wn);
        let s = t.sum_all(prod);
        t.backward(s);
        let da = t.grad(a).unwrap();
        for voxel in 0..8 {
            assert_eq!(da[[0, voxel]], w[[voxel, 0]]);
            assert_eq!(da[[0, 8 + voxel]], w[[voxel, 1]]);
        }
    }

    #[test]
    fn voxelize_rows_inverts_block_packing() {
        // side 4, block 2, 1 channel: value = voxel index, packed cell-wise,
        // must come back in z-major voxel order.
        let side = 4;
        let block = 2;
        let g = side / block;
        let mut packed = Array2::zeros((g * g * g, 8));
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let voxel = z * side * side + y * side + x;
                    let cell = (z / block) * g * g + (y / block) * g + (x / block);
                    let off = (z % block) * 4 + (y % block) * 2 + (x % block);
                    packed[[cell, off]] = voxel as f64;
                }
            }
        }
        let mut t = Tape::new();
        let a = t.param(packed);
        let v = t.voxelize_rows(a, 1, side, block);
        for voxel in 0..side * side * side {
            assert_eq!(t.value(v)[[voxel, 0]], voxel as f64);
        }
    }

    #[test]
    fn exp_clamp_caps_value_and_gradient() {
        let mut t = Tape::new();
        let a = t.param(array![[10.0]]); // exp(10) >> 100
        let e = t.exp_clamped(a, 100.0);
        assert_eq!(t.scalar(e), 100.0);
        t.backward(e);
        assert_eq!(t.grad(a).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut t = Tape::new();
        let a = t.param(array![[0.0, (2.0_f64).ln(), (3.0_f64).ln()]]);
        let l = t.logsumexp_rows(a);
        assert!((t.scalar(l) - 6.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut t = Tape::new();
        let x = t.param(array![[1.0, 2.0, 3.0, 4.0]]);
        let gamma = t.param(Array2::ones((1, 4)));
        let beta = t.param(Array2::zeros((1, 4)));
        let y = t.layer_norm(x, gamma, beta, 1e-12);
        let row = t.value(y);
        let mean: f64 = row.sum() / 4.0;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_softmax_zero_for_identical_logits() {
        let mut t = Tape::new();
        let p = t.param(array![[1.0, 2.0, 3.0]]);
        let q = t.param(array![[1.0, 2.0, 3.0]]);
        let kl = t.kl_softmax(p, q);
        assert!(t.scalar(kl).abs() < 1e-15);
    }
}
