//! Forward ops. Each registers its reverse rule on the tape.

use ndarray::{Axis, IxDyn, Slice, Zip};

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{broadcast_shape, to_shape, Array, Graph, Op, Var};

/// Additive surrogate for −∞ used by [`Graph::masked_softmax`].
pub const MASK_NEG: f64 = -1e9;

impl Graph {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&Array, &Array) -> Array,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_shape(sa, sb).is_none() {
            return Err(shape_err(name, &[sa, sb]));
        }
        let out = f(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(a, libm::erf, Op::Erf(a))
    }

    pub fn erfc(&mut self, a: Var) -> Var {
        self.unary(a, libm::erfc, Op::Erfc(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `a @ b` (or `a @ bᵀ` with `trans_b`). `a` is `[.., M, K]`; `b` is
    /// either a shared `[K, N]` matrix or carries the same leading batch
    /// dims as `a`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        use ndarray::linalg::general_mat_mul;
        use ndarray::Ix2;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || shape_err("matmul", &[&sa, &sb]);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != bk {
            return Err(err());
        }
        let av = self.value(a);
        let bv = self.value(b);
        let out = if sb.len() == 2 {
            let rows = av.len() / k.max(1);
            let a2 = av.to_shape((rows, k)).expect("element count checked above");
            let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
            let c = if trans_b {
                a2.dot(&b2.t())
            } else {
                a2.dot(&b2)
            };
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            to_shape(c.into_dyn(), &shape)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let a3 = av
                .to_shape((batch, m, k))
                .expect("element count checked above");
            let b3 = bv
                .to_shape((batch, sb[sb.len() - 2], sb[sb.len() - 1]))
                .expect("element count checked above");
            let mut c = Array::zeros(IxDyn(&[batch, m, n]));
            for t in 0..batch {
                let at = a3
                    .index_axis(Axis(0), t)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let bt = b3
                    .index_axis(Axis(0), t)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut ct = c
                    .index_axis_mut(Axis(0), t)
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if trans_b {
                    general_mat_mul(1.0, &at, &bt.t(), 0.0, &mut ct);
                } else {
                    general_mat_mul(1.0, &at, &bt, 0.0, &mut ct);
                }
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            to_shape(c, &shape)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", &[self.shape(a)]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let r = self.shape(a).len();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&x| x >= r || std::mem::replace(&mut seen[x], true))
        {
            return Err(shape_err("permute", &[self.shape(a), axes]));
        }
        let out = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err("reshape", &[self.shape(a), shape]));
        }
        let out = to_shape(self.value(a).clone(), shape);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(shape_err("concat", &[]));
        }
        let r = self.shape(inputs[0]).len();
        if axis >= r {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: r,
            });
        }
        let views: Vec<_> = inputs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| {
            let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
            shape_err("concat", &shapes)
        })?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: s.len(),
            });
        }
        if start + len > s[axis] {
            return Err(shape_err("slice", &[s, &[start, len]]));
        }
        let out = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Rows of `a` (axis 0) at `indices`, repeats allowed.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(shape_err("index_select", &[s, &[indices.len()]]));
        }
        let out = self.value(a).select(Axis(0), indices);
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: `table` is `[V, D]`, `ids` has any shape `S`;
    /// the result is `[S.., D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids.len() != ids_shape.iter().product::<usize>() {
            return Err(shape_err("embedding", &[&ts, ids_shape]));
        }
        let rows = self.index_select(table, ids)?;
        let mut shape = ids_shape.to_vec();
        shape.push(ts[1]);
        self.reshape(rows, &shape)
    }

    /// Picks `a[.., indices[i]]` along the last axis for each leading
    /// position `i` (row-major). Output drops the last axis.
    pub fn gather_last(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("gather_last", &[&s]))?;
        let rows = self.value(a).len() / c.max(1);
        if indices.len() != rows || indices.iter().any(|&i| i >= c) {
            return Err(shape_err("gather_last", &[&s, &[indices.len()]]));
        }
        let av = self.value(a).as_standard_layout();
        let flat = av.as_slice().unwrap();
        let vals: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| flat[k * c + i])
            .collect();
        let out = Array::from_shape_vec(IxDyn(&s[..s.len() - 1]), vals).unwrap();
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::GatherLast {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let out = self.value(a).sum_axis(Axis(axis));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        if self.shape(a)[axis] == 0 {
            return Err(shape_err("mean", &[self.shape(a)]));
        }
        let out = self.value(a).mean_axis(Axis(axis)).unwrap();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean { input: a, axis }, rg))
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", a, axis)?;
        let x = self.value(a);
        let out = x.map_axis(Axis(axis), |lane| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        });
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSumExp { input: a, axis }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Array::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r == 0 {
            return Err(shape_err("log_softmax", &[self.shape(a)]));
        }
        let lse = self.logsumexp(a, r - 1)?;
        let mut shape = self.shape(lse).to_vec();
        shape.push(1);
        let lse = self.reshape(lse, &shape)?;
        self.sub(a, lse)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", &[&sx]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                &[&sx, self.shape(gamma), self.shape(beta)],
            ));
        }
        let xv = self.value(x);
        let ax = Axis(sx.len() - 1);
        let mut xhat = Array::zeros(xv.raw_dim());
        let mut stat_shape = sx.clone();
        *stat_shape.last_mut().unwrap() = 1;
        let mut inv_std = Array::zeros(IxDyn(&stat_shape));
        let n = d as f64;
        Zip::from(xhat.lanes_mut(ax))
            .and(xv.lanes(ax))
            .and(inv_std.lanes_mut(ax))
            .for_each(|mut xh, xr, mut is| {
                let mean = xr.sum() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let s = 1.0 / (var + eps).sqrt();
                is[0] = s;
                for k in 0..xh.len() {
                    xh[k] = (xr[k] - mean) * s;
                }
            });
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis where `allowed` (broadcastable to `a`)
    /// is false at masked positions. Masked logits receive [`MASK_NEG`]
    /// before normalization and their weights are then set to exactly zero.
    /// A row with no allowed position yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, allowed: &ndarray::ArrayD<bool>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mask = allowed
            .broadcast(IxDyn(&sa))
            .ok_or_else(|| shape_err("masked_softmax", &[&sa, allowed.shape()]))?;
        if sa.is_empty() {
            return Err(shape_err("masked_softmax", &[&sa]));
        }
        let ax = Axis(sa.len() - 1);
        let x = self.value(a);
        let mut out = Array::zeros(x.raw_dim());
        Zip::from(out.lanes_mut(ax))
            .and(x.lanes(ax))
            .and(mask.lanes(ax))
            .for_each(softmax_row);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let all = ndarray::ArrayD::from_elem(IxDyn(&[1]), true);
        self.masked_softmax(a, &all)
    }
}

fn softmax_row(
    mut o: ndarray::ArrayViewMut1<f64>,
    x: ndarray::ArrayView1<f64>,
    m: ndarray::ArrayView1<bool>,
) {
    if !m.iter().any(|&b| b) {
        o.fill(0.0);
        return;
    }
    let shifted = |k: usize| if m[k] { x[k] } else { x[k] + MASK_NEG };
    let mx = (0..x.len()).map(shifted).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for k in 0..x.len() {
        let e = (shifted(k) - mx).exp();
        o[k] = e;
        total += e;
    }
    for k in 0..x.len() {
        o[k] = if m[k] { o[k] / total } else { 0.0 };
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
