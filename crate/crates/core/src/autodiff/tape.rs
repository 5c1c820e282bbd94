//! Recording tape and the differentiable operation set.
//!
//! Every operation appends one node holding its forward value. Node inputs
//! always precede the node itself, so a single reverse sweep over the node
//! list is a valid topological order for [`Tape::backward`].

use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a` is `[m×k]` or `[k]`, `b` is `[k×n]`.
    MatMul(usize, usize),
    Add(usize, usize),
    /// `[m×n]` plus a `[n]` bias added to every row.
    AddBias(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Mul(usize, usize),
    Relu(usize),
    Concat(Vec<usize>),
    Row(usize, usize),
    SqEuclidean(usize, usize),
    SoftmaxNeg(usize),
    Log(usize, f64),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    AddN(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Wengert list for reverse-mode differentiation.
///
/// A tape is confined to one thread; run independent tapes in parallel.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.index as usize
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan()) || self.op_inputs_have_nan(&op),
            "NaN produced by {op:?} from NaN-free inputs"
        );
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self.id, index }
    }

    fn op_inputs_have_nan(&self, op: &Op) -> bool {
        let nan = |i: &usize| self.nodes[*i].value.data().iter().any(|x| x.is_nan());
        match op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::SqEuclidean(a, b) => {
                nan(a) || nan(b)
            }
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Relu(a)
            | Op::Row(a, _)
            | Op::SoftmaxNeg(a)
            | Op::Log(a, _)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::Mean(a) => nan(a),
            Op::Concat(parts) | Op::AddN(parts) => parts.iter().any(nan),
        }
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    /// Gradient filled in by the last [`Tape::backward`] call, if the node
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[self.idx(v)].grad.as_deref()
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.shape_of(ia).to_vec(), self.shape_of(ib).to_vec());
        let (m, k, vector_lhs) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::dim(format!("matmul lhs {sa:?} must be rank 1 or 2"))),
        };
        let n = match sb.as_slice() {
            [kb, n] if *kb == k => *n,
            _ => return Err(Error::dim(format!("matmul {sa:?} · {sb:?}: inner extents differ"))),
        };
        let av = self.nodes[ia].value.data();
        let bv = self.nodes[ib].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let shape = if vector_lhs { vec![n] } else { vec![m, n] };
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        if self.shape_of(ia) != self.shape_of(ib) {
            return Err(Error::dim(format!(
                "add {:?} + {:?}",
                self.shape_of(ia),
                self.shape_of(ib)
            )));
        }
        let out: Vec<f64> = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape_of(ia).to_vec();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(ia, ib), rg))
    }

    /// Adds a rank-1 bias to every row of a matrix (or to a vector).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(bias));
        let sa = self.shape_of(ia).to_vec();
        let sb = self.shape_of(ib).to_vec();
        let n = match (sa.as_slice(), sb.as_slice()) {
            ([n], [nb]) | ([_, n], [nb]) if n == nb => *n,
            _ => return Err(Error::dim(format!("bias {sb:?} does not fit rows of {sa:?}"))),
        };
        let bv = self.nodes[ib].value.data();
        let out: Vec<f64> = self.nodes[ia]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(sa, out)?, Op::AddBias(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect()).expect("shape preserved");
        let rg = self.rg(ia);
        self.push(t, Op::Scale(ia, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect()).expect("shape preserved");
        let rg = self.rg(ia);
        self.push(t, Op::AddConst(ia), rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        if self.shape_of(ia) != self.shape_of(ib) {
            return Err(Error::dim(format!(
                "mul {:?} * {:?}",
                self.shape_of(ia),
                self.shape_of(ib)
            )));
        }
        let out: Vec<f64> = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape_of(ia).to_vec();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(ia, ib), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(ia);
        self.push(t, Op::Relu(ia), rg)
    }

    /// Concatenates rank-0 or rank-1 tensors in list order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of an empty list"));
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let mut out = Vec::new();
        for &i in &ids {
            if self.nodes[i].value.rank() > 1 {
                return Err(Error::dim(format!("concat input {:?} is not rank 1", self.shape_of(i))));
            }
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::vector(out), Op::Concat(ids), rg))
    }

    /// Row `i` of a matrix as a rank-1 tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        if v.rank() != 2 || i >= v.rows() {
            return Err(Error::dim(format!("row {i} of {:?}", v.shape())));
        }
        let t = Tensor::vector(v.row(i).to_vec());
        let rg = self.rg(ia);
        Ok(self.push(t, Op::Row(ia, i), rg))
    }

    /// `Σ_d (a_d − b_d)²` as a scalar.
    pub fn sq_euclidean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.numel() != vb.numel() || va.rank() > 1 || vb.rank() > 1 {
            return Err(Error::dim(format!(
                "squared distance between {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::scalar(s), Op::SqEuclidean(ia, ib), rg))
    }

    /// `p_j = exp(−v_j) / Σ_n exp(−v_n)`, stabilised by shifting with the
    /// smallest entry.
    pub fn softmax_neg(&mut self, v: Var) -> Var {
        let iv = self.idx(v);
        let p = softmax_neg_values(self.nodes[iv].value.data());
        let t = Tensor::new(self.shape_of(iv).to_vec(), p).expect("shape preserved");
        let rg = self.rg(iv);
        self.push(t, Op::SoftmaxNeg(iv), rg)
    }

    /// Natural log of `max(a, floor)`; the gradient is zero where the floor
    /// is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(floor).ln()).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(ia);
        self.push(t, Op::Log(ia, floor), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, f64::MIN_POSITIVE)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| 1.0 / x).collect()).expect("shape preserved");
        let rg = self.rg(ia);
        self.push(t, Op::Recip(ia), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let v = self.nodes[ia].value.data();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Mean(ia), rg)
    }

    /// Sum of equally shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("add_n of an empty list"));
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let shape = self.shape_of(ids[0]).to_vec();
        let mut out = self.nodes[ids[0]].value.data().to_vec();
        for &i in &ids[1..] {
            if self.shape_of(i) != shape.as_slice() {
                return Err(Error::dim(format!("add_n {shape:?} + {:?}", self.shape_of(i))));
            }
            for (o, x) in out.iter_mut().zip(self.nodes[i].value.data()) {
                *o += x;
            }
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::new(shape, out)?, Op::AddN(ids), rg))
    }

    /// Reverse sweep from a scalar root. Afterwards every node that the root
    /// depends on and that requires a gradient holds `∂root/∂node`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ir = self.idx(root);
        if !self.nodes[ir].value.is_scalar() {
            return Err(Error::arg(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; ir + 1];
        grads[ir] = Some(vec![1.0]);
        for id in (0..=ir).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| nodes[i].value.data();
        // Accumulation buffer for input `i`, or None if it needs no gradient.
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[i].requires_grad {
                let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
                f(buf);
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sb = nodes[b].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a].value.numel() / k;
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gij) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gij;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, x) in g.iter().enumerate() {
                        gb[i % n] += x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += c * x;
                }
            }),
            Op::AddConst(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, x), &inp) in ga.iter_mut().zip(g).zip(av) {
                        if inp > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Row(a, i) => {
                let cols = nodes[*a].value.cols();
                acc(*a, &mut |ga| add_into(&mut ga[i * cols..(i + 1) * cols], g));
            }
            Op::SqEuclidean(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let g0 = g[0];
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += 2.0 * (x - y) * g0;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= 2.0 * (x - y) * g0;
                    }
                });
            }
            Op::SoftmaxNeg(a) => {
                // ∂p_j/∂v_k = −p_j (δ_jk − p_k)
                let p = nodes[id].value.data();
                let dot: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                acc(*a, &mut |ga| {
                    for ((o, &gk), &pk) in ga.iter_mut().zip(g).zip(p) {
                        *o -= pk * (gk - dot);
                    }
                });
            }
            Op::Log(a, floor) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, x), &inp) in ga.iter_mut().zip(g).zip(av) {
                        if inp > *floor {
                            *o += x / inp;
                        }
                    }
                });
            }
            Op::Recip(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, x), &inp) in ga.iter_mut().zip(g).zip(av) {
                        *o -= x / (inp * inp);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += s;
                }
            }),
            Op::AddN(parts) => {
                for &p in parts {
                    acc(p, &mut |gp| add_into(gp, g));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Softmax of negated entries, shifted by the minimum for stability.
pub fn softmax_neg_values(v: &[f64]) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut e: Vec<f64> = v.iter().map(|&x| (min - x).exp()).collect();
    let z: f64 = e.iter().sum();
    for x in &mut e {
        *x /= z;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(t: &mut Tape, v: &[f64]) -> Var {
        t.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);
        assert_eq!(t.value(c).shape(), &[2, 1]);

        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[-3.0, -0.5]);
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_cases() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[1.0, 2.0]);
        let b = vec_leaf(&mut t, &[3.0]);
        let single = t.concat(&[a]).unwrap();
        assert_eq!(t.value(single).data(), &[1.0, 2.0]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0]);
        assert!(matches!(t.concat(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn sq_euclidean_cases() {
        let mut t = Tape::new();
        let a = vec_leaf(&mut t, &[0.0, 0.0]);
        let b = vec_leaf(&mut t, &[3.0, 4.0]);
        let d = t.sq_euclidean(a, b).unwrap();
        assert_eq!(t.scalar(d), 25.0);
        let d0 = t.sq_euclidean(b, b).unwrap();
        assert_eq!(t.scalar(d0), 0.0);
        let c = vec_leaf(&mut t, &[1.0]);
        assert!(matches!(t.sq_euclidean(a, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_neg_cases() {
        let p = softmax_neg_values(&[1.5; 5]);
        for x in &p {
            assert!((x - 0.2).abs() < 1e-15);
        }
        let p = softmax_neg_values(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        let shifted = softmax_neg_values(&[1000.0, 1001.0]);
        let base = softmax_neg_values(&[0.0, 1.0]);
        for (x, y) in shifted.iter().zip(&base) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_leaf_root_and_accumulation() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(4.0));
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);

        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, -2.0, 0.5]);
        let y = t.add(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let w = vec_leaf(&mut t, &[1.0, 2.0]);
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(w, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn log_clamp_blocks_gradient_below_floor() {
        let mut t = Tape::new();
        let x = vec_leaf(&mut t, &[0.0, 2.0]);
        let y = t.log_clamped(x, 1e-30);
        assert_eq!(t.value(y).data()[0], 1e-30f64.ln());
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        let _ = b.relu(x);
    }
}
