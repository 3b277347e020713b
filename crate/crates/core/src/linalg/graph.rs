//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: each operation evaluates eagerly and appends a node
//! recording its inputs. Nodes are only ever appended after their inputs, so
//! walking the tape backwards visits every node after all of its consumers.
//! The tape is rebuilt on every forward pass.

use super::tensor::{self, ColumnMask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCols(Var, ColumnMask),
    BandScores(Var, Var, ColumnMask),
    BandApply(Var, Var, ColumnMask),
    SelectCols(Var, Vec<usize>),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf identified by `slot` in the returned [`Gradients`].
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `aᵀ · b` without materialising the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_tn(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulTn(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = tensor::softplus(self.value(a));
        self.push(v, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = tensor::log(self.value(a))?;
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(Error::Domain {
                op: "recip",
                detail: "division by zero".into(),
            });
        }
        let v = self.value(a).map(|x| 1.0 / x);
        Ok(self.push(v, Op::Recip(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn softmax_cols(&mut self, a: Var, mask: ColumnMask) -> Var {
        let v = tensor::softmax_cols(self.value(a), mask);
        self.push(v, Op::SoftmaxCols(a, mask))
    }

    /// `kᵀq` restricted to the entries admitted by `mask` (zero elsewhere).
    pub fn band_scores(&mut self, k: Var, q: Var, mask: ColumnMask) -> Result<Var> {
        let v = tensor::band_matmul_tn(self.value(k), self.value(q), mask)?;
        Ok(self.push(v, Op::BandScores(k, q, mask)))
    }

    /// `v · s` where `s` is zero outside `mask`, as produced by
    /// [`softmax_cols`](Self::softmax_cols) with the same mask.
    pub fn band_apply(&mut self, v: Var, s: Var, mask: ColumnMask) -> Result<Var> {
        let out = tensor::band_matmul(self.value(v), self.value(s), mask)?;
        Ok(self.push(out, Op::BandApply(v, s, mask)))
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in &cols {
                assert!(j < c, "select_cols index {j} out of range {c}");
                out.push(src.get(i, j));
            }
        }
        let v = Tensor::matrix(r, cols.len(), out);
        self.push(v, Op::SelectCols(a, cols))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let v = Tensor::matrix(1, c, src.data()[r * c..(r + 1) * c].to_vec());
        self.push(v, Op::Row(a, r))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: vec![rows],
                rhs: self.value(bad).shape().to_vec(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in &parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts)))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::matrix(lv.rows(), lv.cols(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_nt(&g, self.value(*b))?;
                    let db = tensor::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTn(a, b) => {
                    // out = aᵀb: da = b gᵀ, db = a g
                    let da = tensor::matmul_nt(self.value(*b), &g)?;
                    let db = tensor::matmul(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), "relu", |x, z| if z > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), "softplus", |x, z| x * tensor::sigmoid_scalar(z))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(*a), "log", |x, z| x / z)?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = g.zip_map(self.value(*a), "square", |x, z| 2.0 * x * z)?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Recip(a) => {
                    let d = g.zip_map(self.value(*a), "recip", |x, z| -x / (z * z))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let d = Tensor::matrix(src.rows(), src.cols(), vec![g.item(); src.len()]);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let v = g.item() / src.len() as f64;
                    let d = Tensor::matrix(src.rows(), src.cols(), vec![v; src.len()]);
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxCols(a, mask) => {
                    let s = &node.value;
                    let (r, c) = (s.rows(), s.cols());
                    let mut d = vec![0.0; r * c];
                    for j in 0..c {
                        let (lo, hi) = mask.range(j, r);
                        let mut dot = 0.0;
                        for i in lo..hi {
                            dot += s.data()[i * c + j] * g.data()[i * c + j];
                        }
                        for i in lo..hi {
                            d[i * c + j] = s.data()[i * c + j] * (g.data()[i * c + j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, d));
                }
                Op::BandScores(k, q, mask) => {
                    // g vanishes off the band, so banded products suffice
                    let dk = tensor::band_matmul_nt(self.value(*q), &g, *mask)?;
                    let dq = tensor::band_matmul(self.value(*k), &g, *mask)?;
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *q, dq);
                }
                Op::BandApply(v, s, mask) => {
                    let dv = tensor::band_matmul_nt(&g, self.value(*s), *mask)?;
                    let ds = tensor::band_matmul_tn(self.value(*v), &g, *mask)?;
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *s, ds);
                }
                Op::SelectCols(a, cols) => {
                    let src = self.value(*a);
                    let (r, c) = (src.rows(), src.cols());
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for (k, &j) in cols.iter().enumerate() {
                            d[i * c + j] += g.get(i, k);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, d));
                }
                Op::Row(a, row) => {
                    let src = self.value(*a);
                    let (r, c) = (src.rows(), src.cols());
                    let mut d = vec![0.0; r * c];
                    d[row * c..(row + 1) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::matrix(r, c, d));
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let rows = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut d = vec![0.0; rows * c];
                        for i in 0..rows {
                            d[i * c..(i + 1) * c].copy_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        }
                        accumulate(&mut grads, p, Tensor::matrix(rows, c, d));
                        off += c;
                    }
                }
            }
        }

        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(slot) = node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params.push((slot, g));
            }
        }
        Ok(Gradients { params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Parameter gradients keyed by the slot given to [`Graph::param`].
///
/// A slot registered more than once has its gradients summed.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient for `slot`, or `None` if no parameter used that slot.
    pub fn get(&self, slot: usize) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (s, g) in &self.params {
            if *s == slot {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// Adds every parameter gradient into `out[slot]`, scaled by `weight`.
    pub fn accumulate_into(&self, out: &mut [Tensor], weight: f64) {
        for (slot, g) in &self.params {
            let dst = out[*slot].data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += weight * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(0).unwrap().item(), 6.0);
    }

    #[test]
    fn softplus_gradient_is_sigmoid() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::scalar(0.0));
        let y = g.softplus(x);
        assert_eq!(g.backward(y).unwrap().get(0).unwrap().item(), 0.5);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::scalar(2.0));
        let _unused = g.param(1, Tensor::from_rows(&[&[1.0, 2.0]]));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradients_sum_over_paths() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(0, Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        assert_eq!(g.backward(y).unwrap().get(0).unwrap().item(), 6.0);
    }

    #[test]
    fn band_ops_match_dense_gradients() {
        let mask = ColumnMask::Causal { lookback: 3 };
        let kx = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64 * 0.3).sin()).collect());
        let qx = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64 * 0.7).cos()).collect());
        let vx = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.11).sin()).collect());
        let run = |band: bool| {
            let mut g = Graph::new();
            let k = g.param(0, kx.clone());
            let q = g.param(1, qx.clone());
            let v = g.param(2, vx.clone());
            let sc = if band { g.band_scores(k, q, mask).unwrap() } else { g.matmul_tn(k, q).unwrap() };
            let s = g.softmax_cols(sc, mask);
            let o = if band { g.band_apply(v, s, mask).unwrap() } else { g.matmul(v, s).unwrap() };
            let sq = g.square(o);
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), (0..3).map(|i| grads.get(i).unwrap()).collect::<Vec<_>>())
        };
        let (lb, gb) = run(true);
        let (ld, gd) = run(false);
        assert!((lb - ld).abs() < 1e-12);
        for (a, b) in gb.iter().zip(&gd) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }
}
