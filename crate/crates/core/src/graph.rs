//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; operands
//! always precede their results, so [`Graph::backward`] is a single reverse
//! sweep. Graphs are built per training step and dropped after the step
//! (alternating tasks change the graph shape every step), and a graph can
//! be consumed by backward exactly once.
//!
//! Train-mode graphs carry their own ChaCha8 stream for dropout masks, so
//! a step is reproducible from its seed alone. Eval-mode graphs have no
//! stream and dropout is the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::AutodiffError;
use crate::rng::rng_from;
use crate::tensor::{gemm_strided, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One attention block: query rows [q_start, q_start+q_len) attend to
/// key/value rows [kv_start, kv_start+kv_len). Rows outside every segment
/// receive zero output. Segments must not overlap on the query side.
#[derive(Clone, Copy, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

const NORM_EPS: f64 = 1e-5;
const COSINE_CLAMP: f64 = 1e-8;

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddRows {
        x: Var,
        bias: Var,
    },
    Transpose {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows {
        x: Var,
    },
    SoftmaxCols {
        x: Var,
    },
    LogSoftmaxRows {
        x: Var,
    },
    StopGrad,
    Sum {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    CosineSim {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    /// Multi-head scaled dot-product attention over pre-projected q/k/v.
    /// `weights[seg * n_heads + h]` holds that block's softmaxed scores,
    /// row-major [q_len × kv_len], saved for the backward pass; causal
    /// masking is already baked into them as structural zeros.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Vec<AttnSegment>,
        weights: Vec<Vec<f64>>,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    needs: bool,
    op: Op,
}

/// Recorded forward pass; see module docs.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    rng: Option<ChaCha8Rng>,
    done: bool,
    param_vars: HashMap<usize, Var>,
    const_vars: HashMap<usize, Var>,
}

impl Graph {
    /// Eval-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: None,
            done: false,
            param_vars: HashMap::new(),
            const_vars: HashMap::new(),
        }
    }

    /// Train-mode graph with its own dropout mask stream.
    pub fn with_seed(seed: u64) -> Self {
        let mut g = Graph::new();
        g.rng = Some(rng_from(seed));
        g
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    fn push(&mut self, value: Tensor, needs: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the backward root w.r.t. `v`; `None` when `v` is not on
    /// any differentiable path to the root (treat as all-zero).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when off-path.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape matches value"),
            None => Tensor::zeros(shape),
        }
    }

    /// Differentiable leaf when `t.requires_grad()`, constant otherwise.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, needs, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable leaf for parameter `id`, recorded once per graph so
    /// every use of a shared parameter accumulates into one gradient.
    pub fn param_leaf(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), true, Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant leaf for parameter `id` (teacher-side forward passes),
    /// cached like [`Graph::param_leaf`].
    pub fn const_param_leaf(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.const_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), false, Op::Leaf);
        self.const_vars.insert(id, v);
        v
    }

    /// (param id, leaf) pairs touched by [`Graph::param_leaf`].
    pub fn param_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.param_vars.iter().map(|(&id, &v)| (id, v))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), AutodiffError> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::Contract(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(AutodiffError::Contract(format!(
                "matmul: inner dims of {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_strided(
            m,
            ka,
            n,
            1.0,
            self.value(a).data(),
            0,
            ka as isize,
            1,
            self.value(b).data(),
            0,
            n as isize,
            1,
            0.0,
            &mut out,
            0,
            n as isize,
            1,
        );
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, needs, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Scale { x, c }))
    }

    /// Broadcast-add a [d] (or [1,d]) bias to every row of a [t,d] matrix.
    pub fn add_rows(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        let (bt, bd) = self.dims2(bias)?;
        if bt != 1 || bd != d {
            return Err(AutodiffError::Contract(format!(
                "add_rows: bias {:?} does not broadcast over {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = xv.to_vec();
        for r in 0..t {
            for c in 0..d {
                out[r * d + c] += bv[c];
            }
        }
        let tt = Tensor::new(vec![t, d], out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(tt, needs, Op::AddRows { x, bias }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Transpose { x }))
    }

    /// Embedding lookup: out[i,:] = table[ids[i],:]. Backward scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(AutodiffError::Contract("gather: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Contract(format!(
                "gather: id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(table);
        Ok(self.push(
            t,
            needs,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = self.dims2(v)?;
            if r != 1 || c != d {
                return Err(AutodiffError::Contract(format!(
                    "layer_norm: {what} {:?} does not match width {d}",
                    self.value(v).shape()
                )));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; t * d];
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        for r in 0..t {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = gv[c] * h + bv[c];
            }
        }
        let tt = Tensor::new(vec![t, d], out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            tt,
            needs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation (smooth, so finite differences stay clean).
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Gelu { x }))
    }

    /// Inverted dropout. Identity (no node recorded) in eval mode or at p=0.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Contract(format!(
                "dropout: rate {p} outside [0, 1)"
            )));
        }
        let n = self.nodes[x.0].value.numel();
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |v, m| v * m);
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Dropout { x, mask }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        let mut out = self.value(x).data().to_vec();
        for r in 0..t {
            softmax_inplace(&mut out[r * d..(r + 1) * d]);
        }
        let tt = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(tt, needs, Op::SoftmaxRows { x }))
    }

    /// Softmax over each column: output columns sum to 1.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * d];
        let mut col = vec![0.0; t];
        for c in 0..d {
            for r in 0..t {
                col[r] = xv[r * d + c];
            }
            softmax_inplace(&mut col);
            for r in 0..t {
                out[r * d + c] = col[r];
            }
        }
        let tt = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(tt, needs, Op::SoftmaxCols { x }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..d {
                out[r * d + c] = row[c] - lse;
            }
        }
        let tt = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(tt, needs, Op::LogSoftmaxRows { x }))
    }

    /// Identity forward, zero backward (the sg[·] operator).
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, false, Op::StopGrad)
    }

    /// Sum of all entries, as a [1] scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::Sum { x })
    }

    /// Elementwise square root; inputs are expected non-negative (norms).
    pub fn sqrt_elem(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let data = self.value(x).data().iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Sqrt { x }))
    }

    /// Row-wise cosine similarity: out[i,j] = cos(a_i, b_j), shape [n,m].
    /// Norms are clamped at 1e-8; a clamped row's norm is treated as a
    /// constant in backward. Returns the var and whether any clamp fired.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<(Var, bool), AutodiffError> {
        let (n, da) = self.dims2(a)?;
        let (m, db) = self.dims2(b)?;
        if da != db {
            return Err(AutodiffError::Contract(format!(
                "cosine_sim: widths of {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut clamped = false;
        let mut norm = |rows: usize, v: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    let s = v[i * da..(i + 1) * da]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt();
                    if s < COSINE_CLAMP {
                        clamped = true;
                        COSINE_CLAMP
                    } else {
                        s
                    }
                })
                .collect()
        };
        let norm_a = norm(n, av);
        let norm_b = norm(m, bv);
        let mut out = vec![0.0; n * m];
        gemm_strided(
            n,
            da,
            m,
            1.0,
            av,
            0,
            da as isize,
            1,
            bv,
            0,
            1,
            da as isize,
            0.0,
            &mut out,
            0,
            m as isize,
            1,
        );
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] /= norm_a[i] * norm_b[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(a) || self.needs(b);
        let v = self.push(
            t,
            needs,
            Op::CosineSim {
                a,
                b,
                norm_a,
                norm_b,
            },
        );
        Ok((v, clamped))
    }

    /// Multi-head scaled dot-product attention over pre-projected buffers.
    /// `q` is [Tq, d], `k`/`v` are [Tkv, d]; heads split the last axis.
    /// Causal segments require q_len == kv_len and let query row i attend
    /// kv rows 0..=i of its segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var, AutodiffError> {
        let (tq, d) = self.dims2(q)?;
        let (tk, dk) = self.dims2(k)?;
        self.same_shape(k, v, "attention k/v")?;
        if d != dk {
            return Err(AutodiffError::Contract(format!(
                "attention: q width {d} != k width {dk}"
            )));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(AutodiffError::Contract(format!(
                "attention: width {d} not divisible by {n_heads} heads"
            )));
        }
        for s in segments {
            if s.q_start + s.q_len > tq || s.kv_start + s.kv_len > tk {
                return Err(AutodiffError::Contract(format!(
                    "attention: segment {s:?} out of bounds for q {tq} rows, kv {tk} rows"
                )));
            }
            if s.q_len == 0 || s.kv_len == 0 {
                return Err(AutodiffError::Contract(format!(
                    "attention: empty segment {s:?}"
                )));
            }
            if causal && s.q_len != s.kv_len {
                return Err(AutodiffError::Contract(format!(
                    "attention: causal segment {s:?} has q_len != kv_len"
                )));
            }
        }
        let dh = d / n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; tq * d];
        let mut weights = Vec::with_capacity(segments.len() * n_heads);
        for s in segments {
            for h in 0..n_heads {
                let mut scores = vec![0.0; s.q_len * s.kv_len];
                // scores = scale * Q_h K_hᵀ  (head h is a column block).
                gemm_strided(
                    s.q_len,
                    dh,
                    s.kv_len,
                    att_scale,
                    qv,
                    s.q_start * d + h * dh,
                    d as isize,
                    1,
                    kv,
                    s.kv_start * d + h * dh,
                    1,
                    d as isize,
                    0.0,
                    &mut scores,
                    0,
                    s.kv_len as isize,
                    1,
                );
                for qi in 0..s.q_len {
                    let allowed = if causal { qi + 1 } else { s.kv_len };
                    let row = &mut scores[qi * s.kv_len..qi * s.kv_len + s.kv_len];
                    softmax_inplace(&mut row[..allowed]);
                    for x in row[allowed..].iter_mut() {
                        *x = 0.0;
                    }
                }
                // out_h = A V_h
                gemm_strided(
                    s.q_len,
                    s.kv_len,
                    dh,
                    1.0,
                    &scores,
                    0,
                    s.kv_len as isize,
                    1,
                    vv,
                    s.kv_start * d + h * dh,
                    d as isize,
                    1,
                    0.0,
                    &mut out,
                    s.q_start * d + h * dh,
                    d as isize,
                    1,
                );
                weights.push(scores);
            }
        }
        let t = Tensor::new(vec![tq, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            needs,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments: segments.to_vec(),
                weights,
            },
        ))
    }

    /// Rows [start, start+len) of a matrix as a new node.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (t, d) = self.dims2(x)?;
        if len == 0 || start + len > t {
            return Err(AutodiffError::Contract(format!(
                "row_slice: rows [{start}, {}) out of bounds for {t} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let tt = Tensor::new(vec![len, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(tt, needs, Op::RowSlice { x, start }))
    }

    /// Reverse sweep from a scalar root. Consumes the graph's single
    /// backward budget; recording afterwards is still legal, a second
    /// backward is not.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        if self.done {
            return Err(AutodiffError::Contract(
                "backward called twice on one graph".into(),
            ));
        }
        self.done = true;
        if !self.value(root).is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            Self::node_backward(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn node_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
        // Operand indices strictly precede i; grads[i] is detached by the
        // caller, so every slot touched here is disjoint from `g`.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<*mut f64> {
            if !nodes[v.0].needs {
                return None;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; nodes[v.0].value.numel()]);
            }
            slot.as_mut().map(|b| b.as_mut_ptr())
        };
        // Safe wrapper: single-threaded sweep, one target buffer at a time.
        macro_rules! with_buf {
            ($v:expr, $buf:ident, $body:block) => {
                if let Some(p) = acc(grads, $v) {
                    let len = nodes[$v.0].value.numel();
                    let $buf: &mut [f64] = unsafe { std::slice::from_raw_parts_mut(p, len) };
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul { a, b } => {
                let (m, ka) = nodes[a.0].value.dims2().expect("recorded shape");
                let n = nodes[b.0].value.shape()[1];
                with_buf!(*a, da, {
                    // dA += dC · Bᵀ
                    gemm_strided(
                        m,
                        n,
                        ka,
                        1.0,
                        g,
                        0,
                        n as isize,
                        1,
                        nodes[b.0].value.data(),
                        0,
                        1,
                        n as isize,
                        1.0,
                        da,
                        0,
                        ka as isize,
                        1,
                    );
                });
                with_buf!(*b, db, {
                    // dB += Aᵀ · dC
                    gemm_strided(
                        ka,
                        m,
                        n,
                        1.0,
                        nodes[a.0].value.data(),
                        0,
                        1,
                        ka as isize,
                        g,
                        0,
                        n as isize,
                        1,
                        1.0,
                        db,
                        0,
                        n as isize,
                        1,
                    );
                });
            }
            Op::Add { a, b } => {
                with_buf!(*a, da, {
                    axpy(da, g, 1.0);
                });
                with_buf!(*b, db, {
                    axpy(db, g, 1.0);
                });
            }
            Op::Sub { a, b } => {
                with_buf!(*a, da, {
                    axpy(da, g, 1.0);
                });
                with_buf!(*b, db, {
                    axpy(db, g, -1.0);
                });
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_buf!(*a, da, {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                with_buf!(*b, db, {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale { x, c } => {
                with_buf!(*x, dx, {
                    axpy(dx, g, *c);
                });
            }
            Op::AddRows { x, bias } => {
                let (t, d) = nodes[x.0].value.dims2().expect("recorded shape");
                with_buf!(*x, dx, {
                    axpy(dx, g, 1.0);
                });
                with_buf!(*bias, db, {
                    for r in 0..t {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (m, n) = nodes[x.0].value.dims2().expect("recorded shape");
                with_buf!(*x, dx, {
                    for i2 in 0..m {
                        for j in 0..n {
                            dx[i2 * n + j] += g[j * m + i2];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                with_buf!(*table, dt, {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (t, d) = nodes[x.0].value.dims2().expect("recorded shape");
                let gv = nodes[gain.0].value.data().to_vec();
                with_buf!(*gain, dg, {
                    for r in 0..t {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                });
                with_buf!(*bias, db, {
                    for r in 0..t {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
                with_buf!(*x, dx, {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..t {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let dxh = g[r * d + c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            let dxh = g[r * d + c] * gv[c];
                            dx[r * d + c] += inv_std[r] * (dxh - m1 - xhat[r * d + c] * m2);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = nodes[x.0].value.data();
                with_buf!(*x, dx, {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_bwd(xi);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_buf!(*x, dx, {
                    for ((d, &gi), &mi) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * mi;
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let (t, d) = nodes[x.0].value.dims2().expect("recorded shape");
                let y = nodes[i].value.data();
                with_buf!(*x, dx, {
                    for r in 0..t {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a2, b2)| a2 * b2).sum();
                        for c in 0..d {
                            dx[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCols { x } => {
                let (t, d) = nodes[x.0].value.dims2().expect("recorded shape");
                let y = nodes[i].value.data();
                with_buf!(*x, dx, {
                    for c in 0..d {
                        let mut dot = 0.0;
                        for r in 0..t {
                            dot += y[r * d + c] * g[r * d + c];
                        }
                        for r in 0..t {
                            dx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { x } => {
                let (t, d) = nodes[x.0].value.dims2().expect("recorded shape");
                let y = nodes[i].value.data();
                with_buf!(*x, dx, {
                    for r in 0..t {
                        let gsum: f64 = g[r * d..(r + 1) * d].iter().sum();
                        for c in 0..d {
                            dx[r * d + c] += g[r * d + c] - y[r * d + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                with_buf!(*x, dx, {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Sqrt { x } => {
                let y = nodes[i].value.data();
                with_buf!(*x, dx, {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        // Clamped so a zero norm (H^s == H^t) backpropagates
                        // zero instead of NaN.
                        *d += gi * 0.5 / yi.max(1e-12);
                    }
                });
            }
            Op::CosineSim {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let (n, d) = nodes[a.0].value.dims2().expect("recorded shape");
                let m = nodes[b.0].value.shape()[0];
                let s = nodes[i].value.data();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let mut w = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        w[r * m + c] = g[r * m + c] / (norm_a[r] * norm_b[c]);
                    }
                }
                with_buf!(*a, da, {
                    // da_i += Σ_j w_ij b_j − (Σ_j g_ij s_ij / ‖a_i‖²) a_i
                    gemm_strided(
                        n,
                        m,
                        d,
                        1.0,
                        &w,
                        0,
                        m as isize,
                        1,
                        bv,
                        0,
                        d as isize,
                        1,
                        1.0,
                        da,
                        0,
                        d as isize,
                        1,
                    );
                    for r in 0..n {
                        if norm_a[r] <= COSINE_CLAMP {
                            continue; // clamped norm is a constant
                        }
                        let coef = (0..m)
                            .map(|c| g[r * m + c] * s[r * m + c])
                            .sum::<f64>()
                            / (norm_a[r] * norm_a[r]);
                        for c2 in 0..d {
                            da[r * d + c2] -= coef * av[r * d + c2];
                        }
                    }
                });
                with_buf!(*b, db, {
                    gemm_strided(
                        m,
                        n,
                        d,
                        1.0,
                        &w,
                        0,
                        1,
                        m as isize,
                        av,
                        0,
                        d as isize,
                        1,
                        1.0,
                        db,
                        0,
                        d as isize,
                        1,
                    );
                    for c in 0..m {
                        if norm_b[c] <= COSINE_CLAMP {
                            continue;
                        }
                        let coef = (0..n)
                            .map(|r| g[r * m + c] * s[r * m + c])
                            .sum::<f64>()
                            / (norm_b[c] * norm_b[c]);
                        for c2 in 0..d {
                            db[c * d + c2] -= coef * bv[c * d + c2];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments,
                weights,
            } => {
                let d = nodes[q.0].value.shape()[1];
                let dh = d / n_heads;
                let att_scale = 1.0 / (dh as f64).sqrt();
                let qv = nodes[q.0].value.data();
                let kvv = nodes[k.0].value.data();
                let vv = nodes[v.0].value.data();
                for (si, s) in segments.iter().enumerate() {
                    for h in 0..*n_heads {
                        let a = &weights[si * n_heads + h];
                        // dV_h += Aᵀ dO_h
                        with_buf!(*v, dv, {
                            gemm_strided(
                                s.kv_len,
                                s.q_len,
                                dh,
                                1.0,
                                a,
                                0,
                                1,
                                s.kv_len as isize,
                                g,
                                s.q_start * d + h * dh,
                                d as isize,
                                1,
                                1.0,
                                dv,
                                s.kv_start * d + h * dh,
                                d as isize,
                                1,
                            );
                        });
                        if !nodes[q.0].needs && !nodes[k.0].needs {
                            continue;
                        }
                        // dA = dO_h V_hᵀ, then dS = A ⊙ (dA − rowsum(dA ⊙ A))
                        let mut ds = vec![0.0; s.q_len * s.kv_len];
                        gemm_strided(
                            s.q_len,
                            dh,
                            s.kv_len,
                            1.0,
                            g,
                            s.q_start * d + h * dh,
                            d as isize,
                            1,
                            vv,
                            s.kv_start * d + h * dh,
                            1,
                            d as isize,
                            0.0,
                            &mut ds,
                            0,
                            s.kv_len as isize,
                            1,
                        );
                        for qi in 0..s.q_len {
                            let row = qi * s.kv_len;
                            let dot: f64 = (0..s.kv_len)
                                .map(|j| ds[row + j] * a[row + j])
                                .sum();
                            for j in 0..s.kv_len {
                                ds[row + j] = a[row + j] * (ds[row + j] - dot);
                            }
                        }
                        with_buf!(*q, dq, {
                            // dQ_h += scale · dS K_h
                            gemm_strided(
                                s.q_len,
                                s.kv_len,
                                dh,
                                att_scale,
                                &ds,
                                0,
                                s.kv_len as isize,
                                1,
                                kvv,
                                s.kv_start * d + h * dh,
                                d as isize,
                                1,
                                1.0,
                                dq,
                                s.q_start * d + h * dh,
                                d as isize,
                                1,
                            );
                        });
                        with_buf!(*k, dk2, {
                            // dK_h += scale · dSᵀ Q_h
                            gemm_strided(
                                s.kv_len,
                                s.q_len,
                                dh,
                                att_scale,
                                &ds,
                                0,
                                1,
                                s.kv_len as isize,
                                qv,
                                s.q_start * d + h * dh,
                                d as isize,
                                1,
                                1.0,
                                dk2,
                                s.kv_start * d + h * dh,
                                d as isize,
                                1,
                            );
                        });
                    }
                }
            }
            Op::RowSlice { x, start } => {
                let d = nodes[x.0].value.shape()[1];
                let len = nodes[i].value.shape()[0];
                with_buf!(*x, dx, {
                    for r in 0..len {
                        for c in 0..d {
                            dx[(start + r) * d + c] += g[r * d + c];
                        }
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max relative error between the analytic gradient of `f` and central
/// finite differences, probing each component of `x`. Graphs for every
/// evaluation come from `make`, so a seeded factory reproduces dropout
/// masks across probes.
pub fn grad_check_in<G, F>(make: G, f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    G: Fn() -> Graph,
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(AutodiffError::Contract(format!(
            "grad_check: eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut g = make();
    let xv = g.leaf(x.clone().with_grad());
    let y = f(&mut g, xv)?;
    if !g.value(y).is_scalar() {
        return Err(AutodiffError::Contract(format!(
            "grad_check: f output has shape {:?}, expected scalar",
            g.value(y).shape()
        )));
    }
    g.backward(y)?;
    let analytic = g.grad_tensor(xv);

    let eval_at = |probe: &Tensor| -> Result<f64, AutodiffError> {
        let mut g = make();
        let v = g.leaf(probe.clone());
        let y = f(&mut g, v)?;
        g.value(y).item()
    };
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let fd = (eval_at(&hi)? - eval_at(&lo)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// [`grad_check_in`] with eval-mode graphs (no dropout).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    grad_check_in(Graph::new, f, x, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn randn(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).expect("test shape")
    }

    /// Naive per-head attention, the oracle for the strided-gemm kernel.
    fn attention_naive(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        n_heads: usize,
        segments: &[AttnSegment],
        causal: bool,
    ) -> Vec<f64> {
        let d = q.shape()[1];
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; q.numel()];
        for s in segments {
            for h in 0..n_heads {
                for qi in 0..s.q_len {
                    let allowed = if causal { qi + 1 } else { s.kv_len };
                    let qrow = &q.data()[(s.q_start + qi) * d + h * dh..];
                    let mut scores: Vec<f64> = (0..allowed)
                        .map(|j| {
                            let krow = &k.data()[(s.kv_start + j) * d + h * dh..];
                            scale
                                * (0..dh).map(|c| qrow[c] * krow[c]).sum::<f64>()
                        })
                        .collect();
                    softmax_inplace(&mut scores);
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for (j, w) in scores.iter().enumerate() {
                            acc += w * v.data()[(s.kv_start + j) * d + h * dh + c];
                        }
                        out[(s.q_start + qi) * d + h * dh + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = rng_from(11);
        let a = randn(&mut rng, vec![3, 4]);
        let bt = randn(&mut rng, vec![4, 2]);
        let err = grad_check(
            |g, x| {
                let b = g.constant(bt.clone());
                let p = g.matmul(x, b)?;
                Ok(g.sum(p))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
        // And w.r.t. the right operand.
        let at = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![4, 2]);
        let err = grad_check(
            |g, x| {
                let a = g.constant(at.clone());
                let p = g.matmul(a, x)?;
                Ok(g.sum(p))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn softmax_cols_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 2]));
        let s = g.softmax_cols(z).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g
            .constant(Tensor::from_rows(&[vec![0.0], vec![3.0f64.ln()]]).unwrap());
        let s = g.softmax_cols(x).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_cols_columns_sum_to_one_and_shift_invariant() {
        let mut rng = rng_from(3);
        let x = randn(&mut rng, vec![5, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.softmax_cols(xv).unwrap();
        for c in 0..4 {
            let sum: f64 = (0..5).map(|r| g.value(s).data()[r * 4 + c]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        //

        let mut shifted = x.clone();
        for r in 0..5 {
            shifted.data_mut()[r * 4 + 2] += 7.5;
        }
        let sv = g.constant(shifted);
        let s2 = g.softmax_cols(sv).unwrap();
        for i in 0..20 {
            assert!((g.value(s2).data()[i] - g.value(s).data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_closed_form_square() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_grad());
        let sq = g.mul(xv, xv).unwrap();
        let y = g.sum(sq);
        g.backward(y).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0]);

        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_function_is_zero_error() {
        let x = Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap();
        let err = grad_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(4.25));
                Ok(g.sum(c))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_nonscalar() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        assert!(grad_check(|_, x| Ok(x), &x, 1e-4).is_err());
    }

    #[test]
    fn stop_grad_is_identity_forward_zero_backward() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 9.0])
                .unwrap()
                .with_grad(),
        );
        let s = g.stop_grad(x);
        assert_eq!(g.value(s).data(), g.value(x).data());
        let live = g.mul(x, x).unwrap();
        let mixed = g.add(live, s).unwrap();
        let y = g.sum(mixed);
        g.backward(y).unwrap();
        // d/dx (x² + sg[x]) = 2x exactly: the sg path contributes nothing.
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0, 0.5, 18.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_grad());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_nonscalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn off_path_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad());
        let unused = g.mul(x, x).unwrap();
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert!(g.grad(unused).is_none());
        assert!(g.grad_tensor(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_eval_identity_train_seeded() {
        let x = Tensor::new(vec![4, 8], vec![1.0; 32]).unwrap();
        let mut ge = Graph::new();
        let xv = ge.constant(x.clone());
        let d = ge.dropout(xv, 0.5).unwrap();
        assert_eq!(d, xv, "eval-mode dropout must be the identity node");

        let run = |seed: u64| {
            let mut g = Graph::with_seed(seed);
            let xv = g.constant(x.clone());
            let d = g.dropout(xv, 0.5).unwrap();
            g.value(d).data().to_vec()
        };
        assert_eq!(run(9), run(9), "same seed, same mask");
        assert_ne!(run(9), run(10), "different seed, different mask");
        let kept: Vec<f64> = run(9).into_iter().filter(|&v| v != 0.0).collect();
        assert!(kept.iter().all(|&v| (v - 2.0).abs() < 1e-15), "inverted scaling");
    }

    #[test]
    fn dropout_gradient_with_fixed_seed() {
        let mut rng = rng_from(17);
        let x = randn(&mut rng, vec![3, 5]);
        let err = grad_check_in(
            || Graph::with_seed(42),
            |g, x| {
                let d = g.dropout(x, 0.3)?;
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn elementwise_and_structural_ops_pass_fd() {
        let mut rng = rng_from(23);
        let x = randn(&mut rng, vec![4, 6]);
        let other = randn(&mut rng, vec![4, 6]);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>)> = vec![
            ("add", {
                let o = other.clone();
                Box::new(move |g, x| {
                    let c = g.constant(o.clone());
                    let s = g.add(x, c)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })
            }),
            ("sub", {
                let o = other.clone();
                Box::new(move |g, x| {
                    let c = g.constant(o.clone());
                    let s = g.sub(x, c)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })
            }),
            ("mul", {
                let o = other.clone();
                Box::new(move |g, x| {
                    let c = g.constant(o.clone());
                    let s = g.mul(x, c)?;
                    Ok(g.sum(s))
                })
            }),
            ("scale", {
                Box::new(move |g, x| {
                    let s = g.scale(x, -1.75)?;
                    let sq = g.mul(s, s)?;
                    Ok(g.sum(sq))
                })
            }),
            ("transpose", {
                Box::new(move |g, x| {
                    let t = g.transpose(x)?;
                    let sq = g.mul(t, t)?;
                    Ok(g.sum(sq))
                })
            }),
            ("gelu", {
                Box::new(move |g, x| {
                    let y = g.gelu(x)?;
                    Ok(g.sum(y))
                })
            }),
            ("softmax_rows", {
                Box::new(move |g, x| {
                    let y = g.softmax_rows(x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })
            }),
            ("softmax_cols", {
                Box::new(move |g, x| {
                    let y = g.softmax_cols(x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })
            }),
            ("log_softmax_rows", {
                Box::new(move |g, x| {
                    let y = g.log_softmax_rows(x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })
            }),
            ("row_slice", {
                Box::new(move |g, x| {
                    let y = g.row_slice(x, 1, 2)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                })
            }),
        ];
        for (name, f) in cases {
            let err = grad_check(f.as_ref(), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn bias_broadcast_grad_and_shape_guard() {
        let mut rng = rng_from(29);
        let x = randn(&mut rng, vec![5, 3]);
        let bias = randn(&mut rng, vec![1, 3]);
        // w.r.t. the matrix
        let b2 = bias.clone();
        let err = grad_check(
            move |g, x| {
                let b = g.constant(b2.clone());
                let y = g.add_rows(x, b)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        // w.r.t. the bias
        let x2 = x.clone();
        let err = grad_check(
            move |g, b| {
                let x = g.constant(x2.clone());
                let y = g.add_rows(x, b)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(vec![5, 3]));
        let bad = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(g.add_rows(xv, bad).is_err());
    }

    #[test]
    fn gather_forward_and_scatter_add_backward() {
        let table = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ])
        .unwrap();
        let mut g = Graph::new();
        let t = g.constant(table.clone());
        let out = g.gather(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(g.gather(t, &[3]).is_err(), "out-of-range id");
        assert!(g.gather(t, &[]).is_err(), "empty ids");

        // Repeated ids must accumulate in the backward scatter.
        let err = grad_check(
            |g, t| {
                let y = g.gather(t, &[0, 1, 0])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_forward_oracle_and_grads() {
        // Hand-computed row: x = [1, 3], mean 2, var 1, xhat = [-1, 1]/sqrt(1+eps).
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let gain = g.constant(Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap());
        let bias = g.constant(Tensor::from_rows(&[vec![10.0, 20.0]]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let h = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((g.value(y).data()[0] - (2.0 * -h + 10.0)).abs() < 1e-12);
        assert!((g.value(y).data()[1] - (0.5 * h + 20.0)).abs() < 1e-12);

        let mut rng = rng_from(31);
        let x = randn(&mut rng, vec![4, 6]);
        let gain = randn(&mut rng, vec![1, 6]);
        let bias = randn(&mut rng, vec![1, 6]);
        for probe in ["x", "gain", "bias"] {
            let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
            let err = grad_check(
                move |g, p| {
                    let make = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
                    let (xv, gv, bv) = match probe {
                        "x" => (p, make(g, &gc), make(g, &bc)),
                        "gain" => (make(g, &xc), p, make(g, &bc)),
                        _ => (make(g, &xc), make(g, &gc), p),
                    };
                    let y = g.layer_norm(xv, gv, bv)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                match probe {
                    "x" => &x,
                    "gain" => &gain,
                    _ => &bias,
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "layer_norm wrt {probe}: {err}");
        }
    }

    #[test]
    fn sqrt_grad_and_zero_guard() {
        let x = Tensor::new(vec![3], vec![0.25, 4.0, 9.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.sqrt_elem(x)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        // At exactly zero the clamped rule must not produce NaN/inf.
        let mut g = Graph::new();
        let zero = g.leaf(Tensor::scalar(0.0).with_grad());
        let sq = g.mul(zero, zero).unwrap();
        let y = g.sqrt_elem(sq).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(zero).unwrap()[0].is_finite());
    }

    #[test]
    fn cosine_sim_forward_properties() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let (s, clamped) = g.cosine_sim(a, a).unwrap();
        assert!(!clamped);
        let sv = g.value(s).data();
        assert!((sv[0] - 1.0).abs() < 1e-12 && (sv[3] - 1.0).abs() < 1e-12);
        assert!(sv[1].abs() < 1e-12 && sv[2].abs() < 1e-12);

        // Scale invariance in each argument.
        let mut rng = rng_from(37);
        let x = randn(&mut rng, vec![3, 4]);
        let mut scaled = x.clone();
        for v in scaled.data_mut().iter_mut() {
            *v *= 3.25;
        }
        let y = randn(&mut rng, vec![2, 4]);
        let xv = g.constant(x);
        let xs = g.constant(scaled);
        let yv = g.constant(y);
        let (s1, _) = g.cosine_sim(xv, yv).unwrap();
        let (s2, _) = g.cosine_sim(xs, yv).unwrap();
        for (u, w) in g.value(s1).data().iter().zip(g.value(s2).data()) {
            assert!((u - w).abs() < 1e-12);
        }

        // Zero row trips the clamp and stays finite.
        let z = g.constant(Tensor::from_rows(&[vec![0.0; 4]]).unwrap());
        let (s3, clamped) = g.cosine_sim(z, yv).unwrap();
        assert!(clamped);
        assert!(g.value(s3).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cosine_sim_grads_match_fd_both_sides() {
        let mut rng = rng_from(41);
        let a = randn(&mut rng, vec![3, 5]);
        let b = randn(&mut rng, vec![4, 5]);
        let bc = b.clone();
        let err = grad_check(
            move |g, a| {
                let bv = g.constant(bc.clone());
                let (s, _) = g.cosine_sim(a, bv)?;
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "wrt a: {err}");
        let ac = a.clone();
        let err = grad_check(
            move |g, b| {
                let av = g.constant(ac.clone());
                let (s, _) = g.cosine_sim(av, b)?;
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "wrt b: {err}");
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = rng_from(43);
        let segs = vec![
            AttnSegment { q_start: 0, q_len: 3, kv_start: 0, kv_len: 5 },
            AttnSegment { q_start: 3, q_len: 2, kv_start: 5, kv_len: 2 },
        ];
        let q = randn(&mut rng, vec![5, 8]);
        let k = randn(&mut rng, vec![7, 8]);
        let v = randn(&mut rng, vec![7, 8]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = g.attention(qv, kv, vv, 2, &segs, false).unwrap();
        let oracle = attention_naive(&q, &k, &v, 2, &segs, false);
        for (a, b) in g.value(out).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // Causal self-attention case.
        let segs = vec![AttnSegment { q_start: 0, q_len: 5, kv_start: 0, kv_len: 5 }];
        let out = g.attention(qv, qv, qv, 4, &segs, true).unwrap();
        let oracle = attention_naive(&q, &q, &q, 4, &segs, true);
        for (a, b) in g.value(out).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_causality_blocks_future_keys() {
        let mut rng = rng_from(47);
        let x = randn(&mut rng, vec![4, 4]);
        let segs = vec![AttnSegment { q_start: 0, q_len: 4, kv_start: 0, kv_len: 4 }];
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let o = g.attention(v, v, v, 2, &segs, true).unwrap();
            g.value(o).data().to_vec()
        };
        let base = run(&x);
        let mut bumped = x.clone();
        bumped.data_mut()[3 * 4] += 5.0; // last row only
        let moved = run(&bumped);
        // Rows 0..3 agree exactly; row 3 differs.
        assert_eq!(&base[..12], &moved[..12]);
        assert_ne!(&base[12..], &moved[12..]);
    }

    #[test]
    fn attention_grads_match_fd() {
        let mut rng = rng_from(53);
        let q = randn(&mut rng, vec![4, 6]);
        let k = randn(&mut rng, vec![5, 6]);
        let v = randn(&mut rng, vec![5, 6]);
        let segs = vec![
            AttnSegment { q_start: 0, q_len: 2, kv_start: 0, kv_len: 3 },
            AttnSegment { q_start: 2, q_len: 2, kv_start: 3, kv_len: 2 },
        ];
        for probe in ["q", "k", "v"] {
            let (qc, kc, vc, segs) = (q.clone(), k.clone(), v.clone(), segs.clone());
            let err = grad_check(
                move |g, p| {
                    let make = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
                    let (qv, kv, vv) = match probe {
                        "q" => (p, make(g, &kc), make(g, &vc)),
                        "k" => (make(g, &qc), p, make(g, &vc)),
                        _ => (make(g, &qc), make(g, &kc), p),
                    };
                    let o = g.attention(qv, kv, vv, 3, &segs, false)?;
                    let sq = g.mul(o, o)?;
                    Ok(g.sum(sq))
                },
                match probe {
                    "q" => &q,
                    "k" => &k,
                    _ => &v,
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "attention wrt {probe}: {err}");
        }

        // Self-attention aliases q=k=v on one buffer; gradients accumulate.
        let x = randn(&mut rng, vec![4, 6]);
        let segs = vec![AttnSegment { q_start: 0, q_len: 4, kv_start: 0, kv_len: 4 }];
        let err = grad_check(
            move |g, x| {
                let o = g.attention(x, x, x, 2, &segs, true)?;
                let sq = g.mul(o, o)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "causal self-attention: {err}");
    }

    #[test]
    fn attention_rejects_bad_segments() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![4, 4]));
        let over = [AttnSegment { q_start: 2, q_len: 3, kv_start: 0, kv_len: 4 }];
        assert!(g.attention(x, x, x, 2, &over, false).is_err());
        let ragged = [AttnSegment { q_start: 0, q_len: 2, kv_start: 0, kv_len: 3 }];
        assert!(g.attention(x, x, x, 2, &ragged, true).is_err());
        assert!(g.attention(x, x, x, 3, &[], false).is_err());
    }

    #[test]
    fn shared_param_leaf_accumulates_over_uses() {
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let p1 = g.param_leaf(7, &w);
        let p2 = g.param_leaf(7, &w);
        assert_eq!(p1, p2, "one leaf per parameter id");
        let prod = g.matmul(p1, p2).unwrap();
        let y = g.sum(prod);
        g.backward(y).unwrap();
        // d/dW sum(W·W) = (W·J)ᵀ-style two-path accumulation; check against
        // fd on an equivalent single-leaf function.
        let err = grad_check(
            |g, w| {
                let p = g.matmul(w, w)?;
                Ok(g.sum(p))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let analytic = g.grad(p1).unwrap().to_vec();
        let mut g2 = Graph::new();
        let lv = g2.leaf(w.clone().with_grad());
        let prod = g2.matmul(lv, lv).unwrap();
        let y2 = g2.sum(prod);
        g2.backward(y2).unwrap();
        assert_eq!(analytic, g2.grad(lv).unwrap());
    }
}
