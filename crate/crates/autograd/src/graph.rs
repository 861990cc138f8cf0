//! Computation tape.
//!
//! Every forward op appends a node holding its output value and the
//! information its reverse rule needs. [`Graph::backward`] walks the tape
//! in reverse and accumulates vector-Jacobian products into the inputs
//! that require gradients. Only leaf gradients are kept in the returned
//! [`Gradients`].

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{Result, TensorError};

pub type Array = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed by the caller and whose reverse
/// rule is supplied here. Used for fused kernels living outside this crate.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Erf(Var),
    Erfc(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    GatherLast {
        input: Var,
        indices: Vec<usize>,
    },
    Sum {
        input: Var,
        axis: usize,
    },
    Mean {
        input: Var,
        axis: usize,
    },
    LogSumExp {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array,
        inv_std: Array,
    },
    MaskedSoftmax(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-threaded tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, `None` if the leaf is
    /// unreachable from the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `shape` for
    /// unreachable leaves.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(IxDyn(shape)))
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

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a scalar (or single-element) node.
    pub fn item(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub(crate) fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Array, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// The tape is left intact, so the same graph may be differentiated
    /// again from another scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(IxDyn(loss_shape)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                kept[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: kept })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target = self.nodes[v.0].value.shape();
        let g = if g.shape() == target {
            g
        } else {
            unbroadcast(g, target)
        };
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    self.accumulate(grads, *a, g / bv);
                }
                if needs(*b) {
                    // d(a/b)/db = -out / b
                    let gb = -(g * out) / bv;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, -g),
            Op::Exp(a) => self.accumulate(grads, *a, g * out),
            Op::Log(a) => self.accumulate(grads, *a, g / val(*a)),
            Op::Sqrt(a) => self.accumulate(grads, *a, g / &(out * 2.0)),
            Op::Erf(a) => {
                let d = val(*a).mapv(|x| std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp());
                self.accumulate(grads, *a, g * &d);
            }
            Op::Erfc(a) => {
                let d = val(*a).mapv(|x| -std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp());
                self.accumulate(grads, *a, g * &d);
            }
            Op::Softplus(a) => {
                let d = val(*a).mapv(sigmoid);
                self.accumulate(grads, *a, g * &d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => self.accumulate(grads, *a, g * &(val(*a) * 2.0)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul { a, b, trans_b } => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g, *trans_b, needs(*a), needs(*b));
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                self.accumulate(grads, *input, back);
            }
            Op::Reshape(input) => {
                let shape = val(*input).shape().to_vec();
                self.accumulate(grads, *input, to_shape(g.clone(), &shape));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    if needs(*v) {
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        self.accumulate(grads, *v, piece);
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let len = out.shape()[*axis];
                let mut full = Array::zeros(val(*input).raw_dim());
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                self.accumulate(grads, *input, full);
            }
            Op::IndexSelect { input, indices } => {
                let mut full = Array::zeros(val(*input).raw_dim());
                for (k, &idx) in indices.iter().enumerate() {
                    let mut row = full.index_axis_mut(Axis(0), idx);
                    row += &g.index_axis(Axis(0), k);
                }
                self.accumulate(grads, *input, full);
            }
            Op::GatherLast { input, indices } => {
                let x = val(*input);
                let c = *x.shape().last().unwrap();
                let mut full = Array::zeros(x.raw_dim());
                {
                    let flat = full.as_slice_mut().expect("standard layout");
                    for (k, (&idx, gv)) in indices.iter().zip(g.iter()).enumerate() {
                        flat[k * c + idx] += gv;
                    }
                }
                self.accumulate(grads, *input, full);
            }
            Op::Sum { input, axis } => {
                let shape = val(*input).shape().to_vec();
                self.accumulate(grads, *input, expand_axis(g, *axis, &shape));
            }
            Op::Mean { input, axis } => {
                let shape = val(*input).shape().to_vec();
                let n = shape[*axis] as f64;
                self.accumulate(grads, *input, expand_axis(g, *axis, &shape) / n);
            }
            Op::LogSumExp { input, axis } => {
                let x = val(*input);
                let shape = x.shape().to_vec();
                let lse = expand_axis(out, *axis, &shape);
                let mut soft = x - &lse;
                soft.mapv_inplace(f64::exp);
                let ge = expand_axis(g, *axis, &shape);
                self.accumulate(grads, *input, soft * &ge);
            }
            Op::SumAll(input) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                self.accumulate(grads, *input, Array::from_elem(val(*input).raw_dim(), s));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                let d = xhat.shape().last().copied().unwrap_or(1);
                if needs(*gamma) {
                    let gg = sum_leading(&(g * xhat), d);
                    self.accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    self.accumulate(grads, *beta, sum_leading(g, d));
                }
                if needs(*x) {
                    let dxhat = g * gm;
                    let mut dx = Array::zeros(xhat.raw_dim());
                    let n = d as f64;
                    let ax = Axis(xhat.ndim() - 1);
                    ndarray::Zip::from(dx.lanes_mut(ax))
                        .and(dxhat.lanes(ax))
                        .and(xhat.lanes(ax))
                        .and(inv_std.lanes(ax))
                        .for_each(|mut dxr, dh, xh, is| {
                            let s1: f64 = dh.sum();
                            let s2: f64 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                            let is = is[0];
                            for k in 0..dxr.len() {
                                dxr[k] = is / n * (n * dh[k] - s1 - xh[k] * s2);
                            }
                        });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaskedSoftmax(input) => {
                let ax = Axis(out.ndim() - 1);
                let mut dx = Array::zeros(out.raw_dim());
                ndarray::Zip::from(dx.lanes_mut(ax))
                    .and(out.lanes(ax))
                    .and(g.lanes(ax))
                    .for_each(|mut dxr, y, gr| {
                        let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for k in 0..dxr.len() {
                            dxr[k] = y[k] * (gr[k] - dot);
                        }
                    });
                self.accumulate(grads, *input, dx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Array> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, out, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n {
            a[k + a.len() - n]
        } else {
            1
        };
        let db = if k + b.len() >= n {
            b[k + b.len() - n]
        } else {
            1
        };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `g` down to `target`, undoing a broadcast.
pub(crate) fn unbroadcast(mut g: Array, target: &[usize]) -> Array {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

pub(crate) fn to_shape(a: Array, shape: &[usize]) -> Array {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(IxDyn(shape))
        .expect("element count checked by caller")
}

/// Re-inserts a reduced axis and broadcasts back to `shape`.
pub(crate) fn expand_axis(g: &Array, axis: usize, shape: &[usize]) -> Array {
    g.view()
        .insert_axis(Axis(axis))
        .broadcast(IxDyn(shape))
        .expect("reduced shape broadcasts back")
        .to_owned()
}

fn sum_leading(a: &Array, last: usize) -> Array {
    let rows = a.len() / last.max(1);
    let flat = a.to_shape((rows, last)).expect("element count");
    flat.sum_axis(Axis(0)).into_dyn()
}

fn matmul_backward(
    a: &Array,
    b: &Array,
    g: &Array,
    trans_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Array>, Option<Array>) {
    use ndarray::linalg::general_mat_mul;
    use ndarray::Ix2;
    let ra = a.ndim();
    let m = a.shape()[ra - 2];
    let k = a.shape()[ra - 1];
    let n = g.shape()[g.ndim() - 1];
    if b.ndim() == 2 {
        let rows = a.len() / k;
        let a2 = a.to_shape((rows, k)).expect("matmul input");
        let g2 = g.to_shape((rows, n)).expect("matmul grad");
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let ga = need_a.then(|| {
            let ga = if trans_b {
                g2.dot(&b2)
            } else {
                g2.dot(&b2.t())
            };
            to_shape(ga.into_dyn(), a.shape())
        });
        let gb = need_b.then(|| {
            let gb = if trans_b {
                g2.t().dot(&a2)
            } else {
                a2.t().dot(&g2)
            };
            gb.into_dyn()
        });
        return (ga, gb);
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let a3 = a.to_shape((batch, m, k)).expect("matmul input");
    let bshape = b.shape().to_vec();
    let b3 = b
        .to_shape((batch, bshape[ra - 2], bshape[ra - 1]))
        .expect("matmul input");
    let g3 = g.to_shape((batch, m, n)).expect("matmul grad");
    let mut ga = need_a.then(|| Array::zeros(IxDyn(&[batch, m, k])));
    let mut gb = need_b.then(|| Array::zeros(IxDyn(&[batch, bshape[ra - 2], bshape[ra - 1]])));
    for t in 0..batch {
        let at = a3
            .index_axis(Axis(0), t)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bt = b3
            .index_axis(Axis(0), t)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let gt = g3
            .index_axis(Axis(0), t)
            .into_dimensionality::<Ix2>()
            .unwrap();
        if let Some(ga) = ga.as_mut() {
            let mut dst = ga
                .index_axis_mut(Axis(0), t)
                .into_dimensionality::<Ix2>()
                .unwrap();
            if trans_b {
                general_mat_mul(1.0, &gt, &bt, 0.0, &mut dst);
            } else {
                general_mat_mul(1.0, &gt, &bt.t(), 0.0, &mut dst);
            }
        }
        if let Some(gb) = gb.as_mut() {
            let mut dst = gb
                .index_axis_mut(Axis(0), t)
                .into_dimensionality::<Ix2>()
                .unwrap();
            if trans_b {
                general_mat_mul(1.0, &gt.t(), &at, 0.0, &mut dst);
            } else {
                general_mat_mul(1.0, &at.t(), &gt, 0.0, &mut dst);
            }
        }
    }
    (
        ga.map(|x| to_shape(x, a.shape())),
        gb.map(|x| to_shape(x, &bshape)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    #[test]
    fn broadcast_examples() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    proptest! {
        #[test]
        fn unbroadcast_preserves_total(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let g = Array::from_elem(IxDyn(&[a, b, c]), 1.0);
            let r = unbroadcast(g, &[1, c]);
            prop_assert_eq!(r.shape(), &[1, c]);
            prop_assert!((r.sum() - (a * b * c) as f64).abs() < 1e-12);
        }

        #[test]
        fn broadcast_is_symmetric(a in 1usize..4, b in 1usize..4) {
            prop_assert_eq!(broadcast_shape(&[a, 1], &[1, b]), broadcast_shape(&[1, b], &[a, 1]));
        }
    }
}
