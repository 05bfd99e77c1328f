//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! replays the tape in reverse with a hand-written adjoint per operation.
//! Model code is written once against the graph, and inference simply reads
//! the forward values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};
use crate::rope2d::{self, Direction, RopeTable};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Rope {
        x: Var,
        coords: Arc<[(usize, usize)]>,
        table: Arc<RopeTable>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
    },
    WeightedSum {
        x: Var,
        weights: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, left: &Matrix, right: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.shape(),
        right: right.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = numkit::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Row-wise linear map `x · wᵀ` for a weight laid out (out × in).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = numkit::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + 1·bias` with `bias` a 1×cols row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = numkit::add_row_broadcast(self.value(a), self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    /// `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul_nt(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(numkit::gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Per-row layer normalization with 1×cols gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vg.shape() != (1, vx.cols()) {
            return Err(mismatch("layer_norm gain", vx, vg));
        }
        if vb.shape() != (1, vx.cols()) {
            return Err(mismatch("layer_norm bias", vx, vb));
        }
        let mut normalized = Matrix::zeros(vx.rows(), vx.cols());
        let mut value = Matrix::zeros(vx.rows(), vx.cols());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let (xhat, inv) = numkit::normalize(vx.row(r), eps);
            for (c, &h) in xhat.iter().enumerate() {
                normalized.set(r, c, h);
                value.set(r, c, h * vg.get(0, c) + vb.get(0, c));
            }
            inv_std.push(inv);
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = numkit::softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Causal row softmax of a square score matrix: row `t` attends to
    /// columns `0..=t` only; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(mismatch("causal_softmax_rows", va, va));
        }
        let mut value = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let mut row = va.row(r)[..=r].to_vec();
            numkit::softmax_in_place(&mut row);
            value.row_mut(r)[..=r].copy_from_slice(&row);
        }
        // Masked entries are zero, so the plain softmax adjoint applies.
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Rotates row `r` of `x` by the 2D RoPE angle for `coords[r]`.
    pub fn rope(&mut self, x: Var, coords: Arc<[(usize, usize)]>, table: Arc<RopeTable>) -> Result<Var> {
        let vx = self.value(x);
        if vx.cols() != table.d() {
            return Err(Error::LengthMismatch {
                op: "rope",
                expected: table.d(),
                found: vx.cols(),
            });
        }
        if coords.len() != vx.rows() {
            return Err(Error::LengthMismatch {
                op: "rope coords",
                expected: vx.rows(),
                found: coords.len(),
            });
        }
        let mut value = vx.clone();
        for (r, &(m, n)) in coords.iter().enumerate() {
            rope2d::rotate_in_place(value.row_mut(r), m, n, &table, Direction::Forward);
        }
        Ok(self.push(value, Op::Rope { x, coords, table }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(Error::LengthMismatch {
                op: "slice_cols",
                expected: start + len,
                found: vx.cols(),
            });
        }
        let mut value = Matrix::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            value.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(mismatch("concat_cols", &value, vp));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&refs)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table` in `ids` order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::LengthMismatch {
                op: "gather_rows",
                expected: vt.rows(),
                found: bad,
            });
        }
        let value = vt.select_rows(ids);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean next-token cross-entropy over rows that carry a target (1×1).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() {
            return Err(Error::LengthMismatch {
                op: "cross_entropy",
                expected: vl.rows(),
                found: targets.len(),
            });
        }
        let probs = numkit::softmax_rows(vl);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vl.cols() {
                    return Err(Error::LengthMismatch {
                        op: "cross_entropy target",
                        expected: vl.cols(),
                        found: t,
                    });
                }
                // log-sum-exp form keeps the loss finite when p underflows.
                let row = vl.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy targets"));
        }
        let value = Matrix::row_vector(vec![total / count as f64]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ x ⊙ weights` (1×1) for a constant weight matrix; a linear probe loss.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(mismatch("weighted_sum", vx, &weights));
        }
        let total = numkit::dot(vx.data(), weights.data());
        Ok(self.push(Matrix::row_vector(vec![total]), Op::WeightedSum { x, weights }))
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(mismatch("backward (loss must be 1x1)", self.value(loss), self.value(loss)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = numkit::matmul_nt(&g, self.value(*b))?;
                    let gb = numkit::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = numkit::matmul(&g, self.value(*b))?;
                    let gb = numkit::matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *b, column_sums(&g));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.map(|v| v * s)),
                Op::Gelu(a) => {
                    let va = self.value(*a);
                    let mut ga = g.clone();
                    for (o, &x) in ga.data_mut().iter_mut().zip(va.data()) {
                        *o *= numkit::gelu_derivative(x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let vg = self.value(*gain);
                    let cols = normalized.cols();
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(normalized.rows(), cols);
                    let mut g_gain = Matrix::zeros(1, cols);
                    for r in 0..normalized.rows() {
                        let xhat = normalized.row(r);
                        let gr = g.row(r);
                        let gxhat: Vec<f64> = gr.iter().zip(vg.data()).map(|(a, b)| a * b).collect();
                        let sum_g: f64 = gxhat.iter().sum();
                        let sum_gx: f64 = numkit::dot(&gxhat, xhat);
                        for c in 0..cols {
                            g_gain.data_mut()[c] += gr[c] * xhat[c];
                            gx.set(
                                r,
                                c,
                                inv_std[r] / n * (n * gxhat[c] - sum_g - xhat[c] * sum_gx),
                            );
                        }
                    }
                    accumulate(&mut grads, *bias, column_sums(&g));
                    accumulate(&mut grads, *gain, g_gain);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let inner = numkit::dot(g.row(r), p.row(r));
                        for c in 0..p.cols() {
                            ga.set(r, c, p.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Rope { x, coords, table } => {
                    let mut gx = g.clone();
                    for (r, &(m, n)) in coords.iter().enumerate() {
                        rope2d::rotate_in_place(gx.row_mut(r), m, n, table, Direction::Inverse);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        offset += rows;
                        accumulate(&mut grads, p, g.select_rows(&idx));
                    }
                }
                Op::GatherRows { table, ids } => {
                    let vt = self.value(*table);
                    let mut gt = Matrix::zeros(vt.rows(), vt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let upstream = g.get(0, 0);
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..probs.cols() {
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                gl.set(r, c, upstream * (probs.get(r, c) - onehot) / count);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::WeightedSum { x, weights } => {
                    let upstream = g.get(0, 0);
                    accumulate(&mut grads, *x, weights.map(|w| w * upstream));
                }
            }
            // Only leaves keep their gradient; interior adjoints are consumed.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }

    /// Gradients for `leaves` in order, zero-filled where absent.
    pub fn for_leaves(&self, g: &Graph, leaves: &[Var]) -> Vec<Matrix> {
        leaves
            .iter()
            .map(|&v| self.get_or_zeros(v, g.value(v).shape()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::central_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks d(loss)/d(input) for a one-input graph builder against central differences.
    fn check_unary(input: Matrix, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let analytic = g.backward(loss).unwrap().get_or_zeros(x, input.shape());
        let numeric = central_diff_grad(
            |p| {
                let mut g = Graph::new();
                let x = g.leaf(Matrix::from_vec(input.rows(), input.cols(), p.to_vec()).unwrap());
                let loss = build(&mut g, x);
                g.value(loss).get(0, 0)
            },
            input.data(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn adjoints_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = random(&mut rng, 3, 4);
        let other = random(&mut rng, 4, 4);
        let gain = random(&mut rng, 1, 4);
        let bias = random(&mut rng, 1, 4);
        let table = Arc::new(RopeTable::new(4).unwrap());
        let coords: Arc<[(usize, usize)]> = Arc::from(vec![(0, 1), (3, 2), (5, 7)]);

        let p = probe.clone();
        check_unary(random(&mut rng, 3, 4), move |g, x| {
            let w = g.leaf(other.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            g.weighted_sum(y, p.clone()).unwrap()
        });
        let p = probe.clone();
        check_unary(random(&mut rng, 3, 4), move |g, x| {
            let (ga, b) = (g.leaf(gain.clone()), g.leaf(bias.clone()));
            let y = g.layer_norm(x, ga, b, 1e-6).unwrap();
            g.weighted_sum(y, p.clone()).unwrap()
        });
        let p = probe.clone();
        check_unary(random(&mut rng, 3, 4), move |g, x| {
            let y = g.rope(x, coords.clone(), table.clone()).unwrap();
            let s = g.matmul_nt(y, x).unwrap();
            let s = g.softmax_rows(s);
            let y2 = g.matmul(s, x).unwrap();
            g.weighted_sum(y2, p.clone()).unwrap()
        });
        check_unary(random(&mut rng, 3, 3), move |g, x| {
            let s = g.causal_softmax_rows(x).unwrap();
            let left = g.slice_cols(s, 0, 2).unwrap();
            let right = g.slice_cols(s, 2, 1).unwrap();
            let c = g.concat_cols(&[right, left]).unwrap();
            let stacked = g.concat_rows(&[c, x]).unwrap();
            let picked = g.gather_rows(stacked, &[0, 4, 4, 2]).unwrap();
            g.cross_entropy(picked, &[Some(1), None, Some(2), Some(0)]).unwrap()
        });
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 9.0], vec![1.0, 1.0, 1.0]]).unwrap());
        let s = g.causal_softmax_rows(x).unwrap();
        let v = g.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::filled(1, 1, 2.0));
        let b = g.leaf(Matrix::filled(1, 1, 3.0));
        let loss = g.scale(a, 4.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().get(0, 0), 4.0);
        assert!(grads.get(b).is_none());
    }
}
