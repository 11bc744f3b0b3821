//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! All model evaluation runs through a [`Tape`]: forward ops append nodes,
//! [`Tape::backward`] walks the recording once and accumulates gradients
//! for every node. Scalars are 1x1 matrices; binary elementwise ops
//! broadcast singleton dimensions the way the usual array semantics do.

use std::cell::RefCell;

use ndarray::{s, Array2, Axis};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    SumAll(Var),
    SumCols(Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Broadcast `a` to `shape`, panicking on incompatible dims.
fn bc(a: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if a.dim() == shape {
        a.clone()
    } else {
        a.broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.dim(), shape))
            .to_owned()
    }
}

/// Reduce a gradient of shape `from` back to the parent shape `to` by
/// summing over broadcast axes.
fn reduce_to(g: &Array2<f64>, to: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if to.0 == 1 && g.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if to.1 == 1 && g.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(out.dim(), to);
    out
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let r = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        panic!("incompatible row dims {:?} vs {:?}", a, b)
    };
    let c = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        panic!("incompatible col dims {:?} vs {:?}", a, b)
    };
    (r, c)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let a = &nodes[v.0].value;
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar");
        a[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.clone(), nodes[b.0].value.clone())
        };
        let shape = broadcast_shape(va.dim(), vb.dim());
        let ba = bc(&va, shape);
        let bb = bc(&vb, shape);
        let mut out = Array2::zeros(shape);
        ndarray::Zip::from(&mut out)
            .and(&ba)
            .and(&bb)
            .for_each(|o, &x, &y| *o = f(x, y));
        self.push(out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                va.ncols(),
                vb.nrows(),
                "matmul inner dims {:?} x {:?}",
                va.dim(),
                vb.dim()
            );
            va.dot(vb)
        };
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.nrows(), vb.nrows(), "concat_cols row mismatch");
            ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).unwrap()
        };
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Sum over columns: (r, c) -> (r, 1).
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = &self.nodes.borrow()[a.0].value * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_const(&self, a: Var, k: f64) -> Var {
        let out = &self.nodes.borrow()[a.0].value + k;
        self.push(out, Op::AddConst(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(&f);
        self.push(out, op)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus_scalar, Op::Softplus(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Gradients of a 1x1 `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            let mut accum = |v: Var, contrib: Array2<f64>| {
                let target = reduce_to(&contrib, nodes[v.0].value.dim());
                match &mut grads[v.0] {
                    Some(existing) => *existing += &target,
                    slot => *slot = Some(target),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(*a, g.clone());
                    accum(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(*a, g.clone());
                    accum(*b, -&g);
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let vb = bc(&nodes[b.0].value, shape);
                    let va = bc(&nodes[a.0].value, shape);
                    accum(*a, &g * &vb);
                    accum(*b, &g * &va);
                }
                Op::Div(a, b) => {
                    let shape = g.dim();
                    let vb = bc(&nodes[b.0].value, shape);
                    let va = bc(&nodes[a.0].value, shape);
                    accum(*a, &g / &vb);
                    accum(*b, -(&g * &va) / (&vb * &vb));
                }
                Op::MatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    accum(*a, g.dot(&vb.t()));
                    accum(*b, va.t().dot(&g));
                }
                Op::Transpose(a) => accum(*a, g.t().to_owned()),
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a.0].value.ncols();
                    accum(*a, g.slice(s![.., ..ca]).to_owned());
                    accum(*b, g.slice(s![.., ca..]).to_owned());
                }
                Op::SumAll(a) => {
                    let shape = nodes[a.0].value.dim();
                    accum(*a, Array2::from_elem(shape, g[(0, 0)]));
                }
                Op::SumCols(a) => {
                    let shape = nodes[a.0].value.dim();
                    accum(*a, bc(&g, shape));
                }
                Op::Scale(a, k) => accum(*a, &g * *k),
                Op::AddConst(a) => accum(*a, g.clone()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    accum(*a, &g * &(1.0 - y * y));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accum(*a, &g * &(y * &(1.0 - y)));
                }
                Op::Relu(a) => {
                    let x = &nodes[a.0].value;
                    accum(*a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    let x = &nodes[a.0].value;
                    accum(*a, &g * &x.mapv(sigmoid_scalar));
                }
                Op::Exp(a) => accum(*a, &g * &node.value),
                Op::Ln(a) => {
                    let x = &nodes[a.0].value;
                    accum(*a, &g / x);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    accum(*a, &g / &(2.0 * y));
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    accum(*a, -(&g * &(y * y)));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[a.0].value;
                    let mask = x.mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                    accum(*a, &g * &mask);
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check: build `f` from leaves, compare analytic and
    /// numeric gradients of the scalar output w.r.t. every leaf entry.
    fn check_grad(leaves: &[Array2<f64>], f: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li], leaf.dim());
            for i in 0..leaf.nrows() {
                for j in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let t2 = Tape::new();
                        let vs: Vec<Var> = leaves
                            .iter()
                            .enumerate()
                            .map(|(k, a)| {
                                let mut a = a.clone();
                                if k == li {
                                    a[(i, j)] += delta;
                                }
                                t2.leaf(a)
                            })
                            .collect();
                        t2.scalar_value(f(&t2, &vs))
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let a = analytic[(i, j)];
                    let denom = a.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (a - fd).abs() / denom < 1e-4,
                        "leaf {li} entry ({i},{j}): analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0], [6.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), array![[17.0], [39.0]]);
    }

    #[test]
    fn broadcast_add_bias() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[10.0, 20.0]]);
        let y = tape.add(x, b);
        assert_eq!(tape.value(y), array![[11.0, 22.0], [13.0, 24.0]]);
    }

    #[test]
    fn backward_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check_grad(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.tanh(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn backward_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_mat(&mut rng, 2, 3).mapv(|x| x + 2.0); // keep positive for ln/sqrt
        let b = rand_mat(&mut rng, 2, 3).mapv(|x| x + 2.0);
        check_grad(&[a, b], |t, v| {
            let s = t.mul(v[0], v[1]);
            let s = t.div(s, v[1]);
            let s = t.ln(s);
            let s = t.sqrt(t.exp(s));
            let s = t.recip(t.add_const(s, 1.0));
            t.sum_all(s)
        });
    }

    #[test]
    fn backward_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(&mut rng, 3, 4);
        let row = rand_mat(&mut rng, 1, 4);
        let col = rand_mat(&mut rng, 3, 1);
        let scalar = rand_mat(&mut rng, 1, 1);
        check_grad(&[a, row, col, scalar], |t, v| {
            let s = t.add(v[0], v[1]);
            let s = t.mul(s, v[2]);
            let s = t.sub(s, v[3]);
            let s = t.sigmoid(s);
            t.sum_all(s)
        });
    }

    #[test]
    fn backward_activations_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_mat(&mut rng, 4, 3);
        check_grad(&[a], |t, v| {
            let s = t.softplus(v[0]);
            let s = t.concat_cols(s, t.tanh(v[0]));
            let s = t.sum_cols(s);
            let s = t.scale(s, 0.5);
            t.sum_all(t.mul(s, s))
        });
    }

    #[test]
    fn backward_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 2, 3);
        check_grad(&[a, b], |t, v| {
            let y = t.matmul(v[0], t.transpose(v[1]));
            t.sum_all(t.mul(y, y))
        });
    }

    #[test]
    fn clamp_gradient_masks_saturated_entries() {
        let tape = Tape::new();
        let x = tape.leaf(array![[0.5, 2.0, -2.0]]);
        let y = tape.clamp(x, 0.0, 1.0);
        assert_eq!(tape.value(y), array![[0.5, 1.0, 0.0]]);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).get(x, (1, 3));
        assert_eq!(g, array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = tape.mul(x, x); // x^2, dy/dx = 6
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).get(x, (1, 1));
        assert!((g[(0, 0)] - 6.0).abs() < 1e-12, "got {:?}", g);
    }

    #[test]
    fn softplus_stable_for_large_inputs() {
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!(softplus_scalar(-800.0) < 1e-300_f64.max(1e-12));
    }
}
