//! Reverse-mode autodiff over a per-forward tape.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] walks
//! the tape in reverse and fills exact analytic gradients for every node.
//! Parameters enter through [`Graph::param`], which remembers the
//! originating [`ParamId`] so accumulated gradients can be flushed back
//! into the [`ParamStore`] after backward.

use rand::Rng;

use super::optim::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    AddColBroadcast(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Cached per-row (normalized row, 1/sqrt(var + eps)).
        cache: Vec<(Vec<f64>, f64)>,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        /// Per-element multiplier: 0 for dropped, 1/keep for kept.
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        from: usize,
    },
    Transpose(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    RowSums(Var),
    Reshape(Var),
    ScalarMix {
        layers: Vec<Var>,
        weights: Var,
        gamma: Var,
        /// Softmax over surviving layers; zero at dropped layers.
        attention: Vec<f64>,
        mix: Tensor,
    },
    SmoothedCe {
        logits: Var,
        golds: Vec<usize>,
        epsilon: f64,
        banned: Vec<Option<usize>>,
        /// Cached softmax probabilities (zero at banned columns).
        probs: Vec<Vec<f64>>,
    },
    SumAll(Var),
    AddScalars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

const LN_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding a constant (or test input) value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a stored parameter; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let var = self.push(store.get(id).value.clone(), Op::Leaf);
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Gradient of the last backward target with respect to `var`.
    pub fn grad(&self, var: Var) -> &Tensor {
        assert!(!self.grads.is_empty(), "backward has not been run");
        &self.grads[var.0]
    }

    fn shape2(&self, var: Var, what: &str) -> (usize, usize) {
        let s = self.nodes[var.0].value.shape();
        assert_eq!(
            s.len(),
            2,
            "{what} expects a matrix, got shape {s:?}"
        );
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape2(a, "matmul");
        let (kb, n) = self.shape2(b, "matmul");
        assert_eq!(
            ka, kb,
            "matmul shape mismatch: {:?} x {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..m {
                let arow = &av[i * ka..(i + 1) * ka];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &x) in arow.iter().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b))
    }

    /// `x + bias` with `bias` broadcast over rows: `(m, n) + (n,)`.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.shape2(x, "add_row_broadcast");
        assert_eq!(
            self.value(bias).shape(),
            &[n],
            "bias shape mismatch: {:?} + {:?}",
            self.value(x).shape(),
            self.value(bias).shape()
        );
        let bv = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        self.push(Tensor::from_vec(&[m, n], data), Op::AddRowBroadcast(x, bias))
    }

    /// `x + v` with `v` broadcast over columns: `(m, n) + (m,)`.
    pub fn add_col_broadcast(&mut self, x: Var, v: Var) -> Var {
        let (m, n) = self.shape2(x, "add_col_broadcast");
        assert_eq!(
            self.value(v).shape(),
            &[m],
            "column vector shape mismatch: {:?} + {:?}",
            self.value(x).shape(),
            self.value(v).shape()
        );
        let vv = self.value(v).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, val)| val + vv[i / n])
            .collect();
        self.push(Tensor::from_vec(&[m, n], data), Op::AddColBroadcast(x, v))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape2(x, "layer_norm");
        assert_eq!(
            self.value(gain).shape(),
            &[n],
            "layer_norm gain shape mismatch: {:?} with {:?}",
            self.value(x).shape(),
            self.value(gain).shape()
        );
        assert_eq!(
            self.value(bias).shape(),
            &[n],
            "layer_norm bias shape mismatch: {:?} with {:?}",
            self.value(x).shape(),
            self.value(bias).shape()
        );
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = vec![0.0; m * n];
        let mut cache = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.value(x).row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            let normalized: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
            for j in 0..n {
                out[i * n + j] = g[j] * normalized[j] + b[j];
            }
            cache.push((normalized, inv_std));
        }
        self.push(
            Tensor::from_vec(&[m, n], out),
            Op::LayerNorm { x, gain, bias, cache },
        )
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape2(x, "softmax_rows");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            softmax_into(row, &mut out[i * n..(i + 1) * n]);
        }
        self.push(Tensor::from_vec(&[m, n], out), Op::SoftmaxRows(x))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-prob)` so eval
    /// needs no rescaling. Training-mode only; callers skip it in eval.
    pub fn dropout(&mut self, x: Var, prob: f64, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&prob), "dropout prob {prob} not in [0, 1)");
        if prob == 0.0 {
            return x;
        }
        let keep = 1.0 - prob;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < prob { 0.0 } else { 1.0 / keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-provided multiplier mask (used directly by
    /// gradient checks, where the mask must stay fixed across evaluations).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(
            mask.len(),
            self.value(x).len(),
            "dropout mask holds {} entries for {} elements",
            mask.len(),
            self.value(x).len()
        );
        let shape = self.value(x).shape().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        self.push(Tensor::from_vec(&shape, data), Op::Dropout { x, mask })
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.shape2(table, "embedding");
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range for table with {v} rows");
            out.extend_from_slice(self.value(table).row(id));
        }
        self.push(
            Tensor::from_vec(&[ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = self.shape2(parts[0], "concat_rows");
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, pn) = self.shape2(p, "concat_rows");
            assert_eq!(
                pn, n,
                "concat_rows column mismatch: {:?} vs {:?}",
                self.value(parts[0]).shape(),
                self.value(p).shape()
            );
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_vec(&[rows, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = self.shape2(parts[0], "concat_cols");
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape2(p, "concat_cols");
            assert_eq!(
                pm, m,
                "concat_cols row mismatch: {:?} vs {:?}",
                self.value(parts[0]).shape(),
                self.value(p).shape()
            );
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::from_vec(&[m, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let (m, n) = self.shape2(x, "slice_cols");
        assert!(
            from < to && to <= n,
            "slice_cols {from}..{to} out of range for shape {:?}",
            self.value(x).shape()
        );
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.value(x).row(i)[from..to]);
        }
        self.push(Tensor::from_vec(&[m, w], data), Op::SliceCols { x, from })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.shape2(x, "transpose");
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        self.push(Tensor::from_vec(&[n, m], data), Op::Transpose(x))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, factor))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b))
    }

    /// Sum each row to a `(m, 1)` column.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let (m, _) = self.shape2(x, "row_sums");
        let data = (0..m).map(|i| self.value(x).row(i).iter().sum()).collect();
        self.push(Tensor::from_vec(&[m, 1], data), Op::RowSums(x))
    }

    /// Reinterpret the same elements under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape to {:?} from {:?}",
            shape,
            self.value(x).shape()
        );
        let data = self.value(x).data().to_vec();
        self.push(Tensor::from_vec(shape, data), Op::Reshape(x))
    }

    /// Scalar layer mixture: `gamma * sum_i softmax(w)_i * layers[i]`,
    /// with the softmax over surviving layers only; dropped layers (where
    /// `alive` is false) contribute exactly zero. At least one layer must
    /// survive.
    pub fn scalar_mix(&mut self, layers: &[Var], weights: Var, gamma: Var, alive: &[bool]) -> Var {
        assert!(!layers.is_empty(), "scalar_mix of nothing");
        assert_eq!(
            self.value(weights).shape(),
            &[layers.len()],
            "scalar_mix weight shape: {:?} for {} layers",
            self.value(weights).shape(),
            layers.len()
        );
        assert!(
            self.value(gamma).shape().is_empty(),
            "scalar_mix gamma must be a scalar, got shape {:?}",
            self.value(gamma).shape()
        );
        assert_eq!(alive.len(), layers.len(), "scalar_mix mask length mismatch");
        assert!(
            alive.iter().any(|&a| a),
            "scalar_mix requires at least one surviving layer"
        );
        let (m, n) = self.shape2(layers[0], "scalar_mix");
        for &l in layers {
            assert_eq!(
                self.value(l).shape(),
                &[m, n],
                "scalar_mix layer shape mismatch: {:?} vs {:?}",
                self.value(layers[0]).shape(),
                self.value(l).shape()
            );
        }

        // Softmax over surviving weights; dropped entries get weight zero.
        let w = self.value(weights).data();
        let mut attention = vec![0.0; layers.len()];
        let max = w
            .iter()
            .zip(alive)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if alive[i] {
                attention[i] = (wi - max).exp();
                total += attention[i];
            }
        }
        for a in &mut attention {
            *a /= total;
        }

        let mut mix = vec![0.0; m * n];
        for (i, &l) in layers.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            let a = attention[i];
            for (o, v) in mix.iter_mut().zip(self.value(l).data()) {
                *o += a * v;
            }
        }
        let mix = Tensor::from_vec(&[m, n], mix);
        let g = self.value(gamma).item();
        let out = Tensor::from_vec(&[m, n], mix.data().iter().map(|v| g * v).collect());
        self.push(
            out,
            Op::ScalarMix {
                layers: layers.to_vec(),
                weights,
                gamma,
                attention,
                mix,
            },
        )
    }

    /// Sum over rows of label-smoothed cross entropy: for each row the
    /// target distribution is `(1 - eps) * onehot(gold) + eps / K`.
    pub fn smoothed_ce(&mut self, logits: Var, golds: &[usize], epsilon: f64) -> Var {
        self.smoothed_ce_banned(logits, golds, epsilon, &vec![None; golds.len()])
    }

    /// Label-smoothed cross entropy with one optionally banned column per
    /// row (used to exclude self-arcs from head classification). Banned
    /// columns are treated as absent: they get zero probability and zero
    /// smoothing mass, and K shrinks accordingly.
    pub fn smoothed_ce_banned(
        &mut self,
        logits: Var,
        golds: &[usize],
        epsilon: f64,
        banned: &[Option<usize>],
    ) -> Var {
        let (m, k) = self.shape2(logits, "smoothed_ce");
        assert!(k >= 2, "smoothed_ce needs at least 2 classes, got {k}");
        assert!(
            (0.0..1.0).contains(&epsilon),
            "label smoothing {epsilon} not in [0, 1)"
        );
        assert_eq!(golds.len(), m, "smoothed_ce got {} golds for {m} rows", golds.len());
        assert_eq!(banned.len(), m, "smoothed_ce got {} bans for {m} rows", banned.len());

        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(m);
        for i in 0..m {
            let gold = golds[i];
            assert!(gold < k, "gold index {gold} out of range for {k} classes");
            assert!(
                banned[i] != Some(gold),
                "gold index {gold} is banned in row {i}"
            );
            let row = self.value(logits).row(i);
            let valid: Vec<usize> = (0..k).filter(|&j| banned[i] != Some(j)).collect();
            let kv = valid.len() as f64;
            let max = valid.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + valid
                    .iter()
                    .map(|&j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            let mut p = vec![0.0; k];
            for &j in &valid {
                p[j] = (row[j] - lse).exp();
                let q = if j == gold { 1.0 - epsilon + epsilon / kv } else { epsilon / kv };
                loss += q * (lse - row[j]);
            }
            probs.push(p);
        }
        self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                golds: golds.to_vec(),
                epsilon,
                banned: banned.to_vec(),
                probs,
            },
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    /// Sum of scalars.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_scalars of nothing");
        let total = xs.iter().map(|&x| self.value(x).item()).sum();
        self.push(Tensor::scalar(total), Op::AddScalars(xs.to_vec()))
    }

    /// Reverse-mode sweep from a scalar target. Fills gradients for every
    /// node; read them with [`Graph::grad`] or flush parameter gradients
    /// with [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, target: Var) {
        assert!(
            self.value(target).shape().is_empty(),
            "backward target must be a scalar, got shape {:?}",
            self.value(target).shape()
        );
        self.grads = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        self.grads[target.0] = Tensor::scalar(1.0);

        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = self.grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, kk) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    let g = grad.data();
                    // dA += G * B^T
                    {
                        let bv = self.nodes[b.0].value.data().to_vec();
                        let da = self.grads[a.0].data_mut();
                        for i in 0..m {
                            for p in 0..kk {
                                let mut acc = 0.0;
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &bv[p * n..(p + 1) * n];
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                da[i * kk + p] += acc;
                            }
                        }
                    }
                    // dB += A^T * G
                    {
                        let av = self.nodes[a.0].value.data().to_vec();
                        let db = self.grads[b.0].data_mut();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..kk {
                                let x = av[i * kk + p];
                                if x != 0.0 {
                                    let drow = &mut db[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        drow[j] += x * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.grads[a.0].add_assign(&grad);
                    self.grads[b.0].add_assign(&grad);
                }
                Op::AddRowBroadcast(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let n = self.nodes[bias.0].value.len();
                    self.grads[x.0].add_assign(&grad);
                    let db = self.grads[bias.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        db[i % n] += g;
                    }
                }
                Op::AddColBroadcast(x, v) => {
                    let (x, v) = (*x, *v);
                    let n = self.nodes[x.0].value.cols();
                    self.grads[x.0].add_assign(&grad);
                    let dv = self.grads[v.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        dv[i / n] += g;
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let dx = self.grads[x.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        dx[i] += g * gelu_derivative(xv[i]);
                    }
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let cache = cache.clone();
                    let n = self.nodes[x.0].value.cols();
                    let gv = self.nodes[gain.0].value.data().to_vec();
                    for (i, (normalized, inv_std)) in cache.iter().enumerate() {
                        let grow = grad.row(i).to_vec();
                        {
                            let dg = self.grads[gain.0].data_mut();
                            for j in 0..n {
                                dg[j] += grow[j] * normalized[j];
                            }
                        }
                        {
                            let db = self.grads[bias.0].data_mut();
                            for j in 0..n {
                                db[j] += grow[j];
                            }
                        }
                        let dnorm: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                        let mean_dnorm = dnorm.iter().sum::<f64>() / n as f64;
                        let mean_dnorm_norm = dnorm
                            .iter()
                            .zip(normalized)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n as f64;
                        let dx = self.grads[x.0].data_mut();
                        for j in 0..n {
                            dx[i * n + j] += inv_std
                                * (dnorm[j] - mean_dnorm - normalized[j] * mean_dnorm_norm);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let (m, n) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                    let y = self.nodes[idx].value.data().to_vec();
                    let dx = self.grads[x.0].data_mut();
                    for i in 0..m {
                        let yrow = &y[i * n..(i + 1) * n];
                        let grow = grad.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let dx = self.grads[x.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        dx[i] += g * mask[i];
                    }
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let d = self.nodes[table.0].value.cols();
                    let dt = self.grads[table.0].data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = grad.row(r);
                        for j in 0..d {
                            dt[id * d + j] += grow[j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let n = self.nodes[p.0].value.cols();
                        let dp = self.grads[p.0].data_mut();
                        for (i, g) in grad.data()[offset * n..(offset + rows) * n]
                            .iter()
                            .enumerate()
                        {
                            dp[i] += g;
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = self.nodes[idx].value.rows();
                    let total = self.nodes[idx].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.cols();
                        let dp = self.grads[p.0].data_mut();
                        for i in 0..m {
                            for j in 0..n {
                                dp[i * n + j] += grad.data()[i * total + offset + j];
                            }
                        }
                        offset += n;
                    }
                }
                Op::SliceCols { x, from } => {
                    let (x, from) = (*x, *from);
                    let n = self.nodes[x.0].value.cols();
                    let w = self.nodes[idx].value.cols();
                    let m = self.nodes[idx].value.rows();
                    let dx = self.grads[x.0].data_mut();
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * n + from + j] += grad.data()[i * w + j];
                        }
                    }
                }
                Op::Transpose(x) => {
                    let x = *x;
                    let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let dx = self.grads[x.0].data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += grad.data()[j * m + i];
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    let (x, factor) = (*x, *factor);
                    let dx = self.grads[x.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        dx[i] += g * factor;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    {
                        let da = self.grads[a.0].data_mut();
                        for (i, g) in grad.data().iter().enumerate() {
                            da[i] += g * bv[i];
                        }
                    }
                    let db = self.grads[b.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        db[i] += g * av[i];
                    }
                }
                Op::RowSums(x) => {
                    let x = *x;
                    let n = self.nodes[x.0].value.cols();
                    let dx = self.grads[x.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        for j in 0..n {
                            dx[i * n + j] += g;
                        }
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let dx = self.grads[x.0].data_mut();
                    for (i, g) in grad.data().iter().enumerate() {
                        dx[i] += g;
                    }
                }
                Op::ScalarMix {
                    layers,
                    weights,
                    gamma,
                    attention,
                    mix,
                } => {
                    let layers = layers.clone();
                    let weights = *weights;
                    let gamma = *gamma;
                    let attention = attention.clone();
                    let mix = mix.clone();
                    let g = self.nodes[gamma.0].value.item();

                    // d gamma = <G, mix>
                    let dgamma: f64 = grad.data().iter().zip(mix.data()).map(|(a, b)| a * b).sum();
                    self.grads[gamma.0].data_mut()[0] += dgamma;

                    // d layer_i = gamma * a_i * G; inner products feed dw.
                    let mut inner = vec![0.0; layers.len()];
                    for (i, &l) in layers.iter().enumerate() {
                        if attention[i] == 0.0 {
                            continue;
                        }
                        let lv = self.nodes[l.0].value.data().to_vec();
                        inner[i] = grad.data().iter().zip(&lv).map(|(a, b)| a * b).sum();
                        let dl = self.grads[l.0].data_mut();
                        let factor = g * attention[i];
                        for (d, gg) in dl.iter_mut().zip(grad.data()) {
                            *d += factor * gg;
                        }
                    }
                    let weighted: f64 = attention.iter().zip(&inner).map(|(a, t)| a * t).sum();
                    let dw = self.grads[weights.0].data_mut();
                    for i in 0..attention.len() {
                        if attention[i] > 0.0 || inner[i] != 0.0 {
                            dw[i] += g * attention[i] * (inner[i] - weighted);
                        }
                    }
                }
                Op::SmoothedCe {
                    logits,
                    golds,
                    epsilon,
                    banned,
                    probs,
                } => {
                    let logits = *logits;
                    let golds = golds.clone();
                    let epsilon = *epsilon;
                    let banned = banned.clone();
                    let probs = probs.clone();
                    let k = self.nodes[logits.0].value.cols();
                    let upstream = grad.item();
                    let dl = self.grads[logits.0].data_mut();
                    for (i, p) in probs.iter().enumerate() {
                        let kv = (k - usize::from(banned[i].is_some())) as f64;
                        for j in 0..k {
                            if banned[i] == Some(j) {
                                continue;
                            }
                            let q = if j == golds[i] {
                                1.0 - epsilon + epsilon / kv
                            } else {
                                epsilon / kv
                            };
                            dl[i * k + j] += upstream * (p[j] - q);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let g = grad.item();
                    for d in self.grads[x.0].data_mut() {
                        *d += g;
                    }
                }
                Op::AddScalars(xs) => {
                    let xs = xs.clone();
                    let g = grad.item();
                    for x in xs {
                        self.grads[x.0].data_mut()[0] += g;
                    }
                }
            }
        }
    }

    /// Add this graph's parameter-leaf gradients into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        assert!(!self.grads.is_empty(), "backward has not been run");
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                store.get_mut(id).grad.add_assign(&self.grads[idx]);
            }
        }
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

/// Central finite-difference gradients of a scalar function of leaf
/// tensors, using the given step. The closure must rebuild the same
/// computation for every perturbed input.
pub fn central_difference_gradients(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<Tensor> {
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut graph = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
        let out = f(&mut graph, &vars);
        graph.value(out).item()
    };

    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[which].shape());
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= step;
            grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Largest elementwise relative error between two gradients, with the
/// denominator floored at 1 so near-zero entries are compared absolutely.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
