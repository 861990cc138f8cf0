//! Fused ops with hand-written reverse rules.
//!
//! The composite equivalents built from primitive graph ops are kept in
//! the tests as oracles.

use std::borrow::Cow;

use metatpp_autograd::ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn, Zip};
use metatpp_autograd::{Array, CustomOp, Graph, TensorError, Var};

use crate::data::window_start;

type TResult<T> = std::result::Result<T, TensorError>;

fn standard(a: &Array) -> Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => Cow::Borrowed(s),
        None => Cow::Owned(a.iter().copied().collect()),
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Which keys a query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    /// Local history window; `None` attends to the whole prefix.
    pub window: Option<usize>,
    /// Excludes the query's own position (context strictly before it).
    pub strict: bool,
}

impl AttnSpec {
    /// Key range `lo..hi` for query `i` in a sequence of length `len`.
    pub fn range(&self, i: usize, len: usize) -> (usize, usize) {
        let (lo, hi) = if self.strict {
            (self.window.map_or(0, |w| i.saturating_sub(w)), i)
        } else {
            (window_start(i, self.window), i + 1)
        };
        let hi = hi.min(len);
        (lo.min(hi), hi)
    }
}

struct BandedAttention {
    b: usize,
    l: usize,
    heads: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    lo: Vec<usize>,
    offsets: Vec<usize>,
    probs: Vec<f64>,
}

/// Multi-head scaled dot-product attention evaluated only over each
/// query's allowed key range, so the cost is linear in the window size.
/// `q`, `k` are `[B, L, H*dk]`, `v` is `[B, L, H*dv]`; the result is
/// `[B, L, H*dv]` with heads concatenated. Queries without any allowed key
/// produce zeros.
pub fn banded_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    lens: &[usize],
    spec: &AttnSpec,
) -> TResult<Var> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    let ok = sq.len() == 3
        && sq == sk
        && sv.len() == 3
        && sv[..2] == sq[..2]
        && lens.len() == sq[0]
        && spec.heads > 0
        && sq[2] % spec.heads == 0
        && sv[2] % spec.heads == 0
        && lens.iter().all(|&n| n <= sq[1]);
    if !ok {
        return Err(shape_err("banded_attention", &[&sq, &sk, &sv]));
    }
    let (b, l, h) = (sq[0], sq[1], spec.heads);
    let (dk, dv) = (sq[2] / h, sv[2] / h);
    let scale = 1.0 / (dk as f64).sqrt();
    let (qs, ks, vs) = (
        standard(g.value(q)),
        standard(g.value(k)),
        standard(g.value(v)),
    );
    let mut out = vec![0.0; b * l * h * dv];
    let mut lo_all = Vec::with_capacity(b * h * l);
    let mut offsets = Vec::with_capacity(b * h * l + 1);
    let mut probs = Vec::new();
    offsets.push(0);
    let mut scores = Vec::new();
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..l {
                let (lo, up) = spec.range(i, lens[bi]);
                lo_all.push(lo);
                let qrow = &qs[(bi * l + i) * h * dk + hi * dk..][..dk];
                scores.clear();
                for j in lo..up {
                    let krow = &ks[(bi * l + j) * h * dk + hi * dk..][..dk];
                    scores.push(scale * dot(qrow, krow));
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let orow = &mut out[(bi * l + i) * h * dv + hi * dv..][..dv];
                for (jj, s) in scores.iter().enumerate() {
                    let p = s / z;
                    probs.push(p);
                    let vrow = &vs[(bi * l + lo + jj) * h * dv + hi * dv..][..dv];
                    axpy(p, vrow, orow);
                }
                offsets.push(probs.len());
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[b, l, h * dv]), out).unwrap();
    Ok(g.custom(
        &[q, k, v],
        out,
        Box::new(BandedAttention {
            b,
            l,
            heads: h,
            dk,
            dv,
            scale,
            lo: lo_all,
            offsets,
            probs,
        }),
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl CustomOp for BandedAttention {
    fn name(&self) -> &'static str {
        "banded_attention"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (b, l, h, dk, dv) = (self.b, self.l, self.heads, self.dk, self.dv);
        let (qs, ks, vs) = (
            standard(inputs[0]),
            standard(inputs[1]),
            standard(inputs[2]),
        );
        let gs = standard(grad);
        let mut dq = vec![0.0; qs.len()];
        let mut dk_ = vec![0.0; ks.len()];
        let mut dv_ = vec![0.0; vs.len()];
        let mut dp = Vec::new();
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..l {
                    let row = (bi * h + hi) * l + i;
                    let (start, end) = (self.offsets[row], self.offsets[row + 1]);
                    if start == end {
                        continue;
                    }
                    let lo = self.lo[row];
                    let p = &self.probs[start..end];
                    let go = &gs[(bi * l + i) * h * dv + hi * dv..][..dv];
                    dp.clear();
                    for (jj, &pj) in p.iter().enumerate() {
                        let base = (bi * l + lo + jj) * h * dv + hi * dv;
                        dp.push(dot(go, &vs[base..base + dv]));
                        axpy(pj, go, &mut dv_[base..base + dv]);
                    }
                    let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qbase = (bi * l + i) * h * dk + hi * dk;
                    for (jj, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[jj] - mean) * self.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kbase = (bi * l + lo + jj) * h * dk + hi * dk;
                        axpy(ds, &ks[kbase..kbase + dk], &mut dq[qbase..qbase + dk]);
                        axpy(ds, &qs[qbase..qbase + dk], &mut dk_[kbase..kbase + dk]);
                    }
                }
            }
        }
        let shape_qk = IxDyn(&[b, l, h * dk]);
        vec![
            Some(ArrayD::from_shape_vec(shape_qk.clone(), dq).unwrap()),
            Some(ArrayD::from_shape_vec(shape_qk, dk_).unwrap()),
            Some(ArrayD::from_shape_vec(IxDyn(&[b, l, h * dv]), dv_).unwrap()),
        ]
    }
}

/// Reference attention built from primitive ops with a dense
/// `[B, L, L]` mask. Quadratic in `L`; used to cross-check
/// [`banded_attention`].
pub fn dense_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    lens: &[usize],
    spec: &AttnSpec,
) -> TResult<Var> {
    let sq = g.shape(q).to_vec();
    let sv = g.shape(v).to_vec();
    let (b, l, h) = (sq[0], sq[1], spec.heads);
    let (dk, dv) = (sq[2] / h, sv[2] / h);
    let mut allowed = ArrayD::from_elem(IxDyn(&[b, 1, l, l]), false);
    for bi in 0..b {
        for i in 0..l {
            let (lo, hi) = spec.range(i, lens[bi]);
            for j in lo..hi {
                allowed[[bi, 0, i, j]] = true;
            }
        }
    }
    let split = |g: &mut Graph, x: Var, d: usize| -> TResult<Var> {
        let x = g.reshape(x, &[b, l, h, d])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(g, q, dk)?;
    let kh = split(g, k, dk)?;
    let vh = split(g, v, dv)?;
    let s = g.matmul_ex(qh, kh, true)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let p = g.masked_softmax(s, &allowed)?;
    let o = g.matmul(p, vh)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, l, h * dv])
}

struct PrefixMean {
    b: usize,
    l: usize,
    d: usize,
}

/// Mean of the rows strictly before each position: `out[:, i] =
/// mean(x[:, 0..i])`, with zeros at `i = 0`. `x` is `[B, L, D]`.
pub fn prefix_mean(g: &mut Graph, x: Var) -> TResult<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(shape_err("prefix_mean", &[&s]));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let xs = standard(g.value(x));
    let mut out = vec![0.0; xs.len()];
    let mut acc = vec![0.0; d];
    for bi in 0..b {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..l {
            let base = (bi * l + i) * d;
            if i > 0 {
                let inv = 1.0 / i as f64;
                for c in 0..d {
                    out[base + c] = acc[c] * inv;
                }
            }
            for c in 0..d {
                acc[c] += xs[base + c];
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&s), out).unwrap();
    Ok(g.custom(&[x], out, Box::new(PrefixMean { b, l, d })))
}

impl CustomOp for PrefixMean {
    fn name(&self) -> &'static str {
        "prefix_mean"
    }

    fn backward(&self, _inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (b, l, d) = (self.b, self.l, self.d);
        let gs = standard(grad);
        let mut dx = vec![0.0; gs.len()];
        let mut acc = vec![0.0; d];
        for bi in 0..b {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in (0..l).rev() {
                let base = (bi * l + i) * d;
                dx[base..base + d].copy_from_slice(&acc);
                if i > 0 {
                    let inv = 1.0 / i as f64;
                    for c in 0..d {
                        acc[c] += gs[base + c] * inv;
                    }
                }
            }
        }
        vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, l, d]), dx).unwrap())]
    }
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

struct ReluAffine {
    b: usize,
    s: usize,
    l: usize,
    /// Length axis of `z`: 1 (shared over positions) or `l`.
    lz: usize,
    has_z: bool,
}

impl ReluAffine {
    fn hidden(&self, base: &[f64], z: Option<&[f64]>, h: usize) -> Array2<f64> {
        let rows = self.b * self.s * self.l;
        let mut out = vec![0.0; rows * h];
        for bi in 0..self.b {
            for si in 0..self.s {
                for li in 0..self.l {
                    let o = ((bi * self.s + si) * self.l + li) * h;
                    let br = &base[(bi * self.l + li) * h..][..h];
                    let dst = &mut out[o..o + h];
                    match z {
                        Some(z) => {
                            let zi = if self.lz == 1 { 0 } else { li };
                            let zr = &z[((bi * self.s + si) * self.lz + zi) * h..][..h];
                            for c in 0..h {
                                dst[c] = (br[c] + zr[c]).max(0.0);
                            }
                        }
                        None => {
                            for c in 0..h {
                                dst[c] = br[c].max(0.0);
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((rows, h), out).unwrap()
    }
}

/// `relu(base + z) @ w + bias`, the hidden layer of a decoder whose input
/// splits into a per-position part `base` `[B, 1, L, H]` and a per-sample
/// part `z` `[B, S, 1, H]` or `[B, S, L, H]`. `w` is `[H, N]` and `bias`
/// `[N]`; returns `[B, S, L, N]`. The hidden activations are recomputed
/// in the backward pass instead of being stored.
pub fn relu_affine(g: &mut Graph, base: Var, z: Option<Var>, w: Var, bias: Var) -> TResult<Var> {
    let sb = g.shape(base).to_vec();
    let sw = g.shape(w).to_vec();
    let sbias = g.shape(bias).to_vec();
    let sz = z.map(|z| g.shape(z).to_vec());
    let bad = || {
        let mut all: Vec<&[usize]> = vec![&sb, &sw, &sbias];
        if let Some(s) = &sz {
            all.push(s);
        }
        shape_err("relu_affine", &all)
    };
    if sb.len() != 4 || sb[1] != 1 || sw.len() != 2 || sw[0] != sb[3] || sbias != [sw[1]] {
        return Err(bad());
    }
    let (b, l, h, n) = (sb[0], sb[2], sb[3], sw[1]);
    let (s, lz) = match &sz {
        None => (1, 1),
        Some(s) if s.len() == 4 && s[0] == b && s[3] == h && (s[2] == 1 || s[2] == l) => {
            (s[1], s[2])
        }
        Some(_) => return Err(bad()),
    };
    let op = ReluAffine {
        b,
        s,
        l,
        lz,
        has_z: z.is_some(),
    };
    let base_v = standard(g.value(base));
    let z_v = z.map(|z| standard(g.value(z)));
    let hid = op.hidden(&base_v, z_v.as_deref(), h);
    let wv = g.value(w).view().into_dimensionality::<Ix2>().unwrap();
    let mut out = hid.dot(&wv);
    let bv = g.value(bias).view().into_dimensionality::<Ix1>().unwrap();
    out += &bv;
    let out = out
        .into_dyn()
        .into_shape_with_order(IxDyn(&[b, s, l, n]))
        .unwrap();
    let mut inputs = vec![base];
    inputs.extend(z);
    inputs.extend([w, bias]);
    Ok(g.custom(&inputs, out, Box::new(op)))
}

impl CustomOp for ReluAffine {
    fn name(&self) -> &'static str {
        "relu_affine"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (base, z, w) = if self.has_z {
            (inputs[0], Some(inputs[1]), inputs[2])
        } else {
            (inputs[0], None, inputs[1])
        };
        let h = base.shape()[3];
        let n = w.shape()[1];
        let rows = self.b * self.s * self.l;
        let base_v = standard(base);
        let z_v = z.map(standard);
        let hid = self.hidden(&base_v, z_v.as_deref(), h);
        let g2 = grad.to_shape((rows, n)).expect("output shape");
        let wv = w.view().into_dimensionality::<Ix2>().unwrap();
        let dw = hid.t().dot(&g2);
        let dbias = g2.sum_axis(Axis(0));
        let mut dh = g2.dot(&wv.t());
        Zip::from(&mut dh).and(&hid).for_each(|d, &x| {
            if x <= 0.0 {
                *d = 0.0
            }
        });
        let dh = dh.as_slice().unwrap();
        let mut dbase = vec![0.0; self.b * self.l * h];
        let mut dz = vec![0.0; self.b * self.s * self.lz * h];
        for bi in 0..self.b {
            for si in 0..self.s {
                for li in 0..self.l {
                    let src = &dh[((bi * self.s + si) * self.l + li) * h..][..h];
                    axpy(1.0, src, &mut dbase[(bi * self.l + li) * h..][..h]);
                    if self.has_z {
                        let zi = if self.lz == 1 { 0 } else { li };
                        axpy(
                            1.0,
                            src,
                            &mut dz[((bi * self.s + si) * self.lz + zi) * h..][..h],
                        );
                    }
                }
            }
        }
        let mut out = vec![Some(
            ArrayD::from_shape_vec(IxDyn(&[self.b, 1, self.l, h]), dbase).unwrap(),
        )];
        if self.has_z {
            out.push(Some(
                ArrayD::from_shape_vec(IxDyn(&[self.b, self.s, self.lz, h]), dz).unwrap(),
            ));
        }
        out.push(Some(dw.into_dyn()));
        out.push(Some(dbias.into_dyn()));
        out
    }
}

/// `ln Q(u)` where `Q` is the standard normal upper tail.
pub fn log_normal_tail(u: f64) -> f64 {
    if u < 30.0 {
        (0.5 * libm::erfc(u / std::f64::consts::SQRT_2)).ln()
    } else {
        let u2 = u * u;
        -0.5 * u2 - HALF_LN_2PI - u.ln() + (1.0 - 1.0 / u2 + 3.0 / (u2 * u2)).ln()
    }
}

/// `phi(u) / Q(u)`, the derivative of `-ln Q(u)`.
fn inverse_mills(u: f64) -> f64 {
    (-0.5 * u * u - HALF_LN_2PI - log_normal_tail(u)).exp()
}

#[derive(Clone, Copy, PartialEq)]
enum MixtureKind {
    LogPdf,
    LogSurvival,
}

struct MixtureOp {
    kind: MixtureKind,
    k: usize,
    x: Vec<f64>,
}

/// Per-row log terms and responsibilities of the mixture.
fn mixture_terms(
    kind: MixtureKind,
    lw: &[f64],
    mu: &[f64],
    sg: &[f64],
    x: f64,
    terms: &mut [f64],
) -> f64 {
    for c in 0..lw.len() {
        let u = (x - mu[c]) / sg[c];
        terms[c] = match kind {
            MixtureKind::LogPdf => lw[c] - sg[c].ln() - HALF_LN_2PI - 0.5 * u * u - x,
            MixtureKind::LogSurvival => lw[c] + log_normal_tail(u),
        };
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut z = 0.0;
    for t in terms.iter_mut() {
        *t = (*t - m).exp();
        z += *t;
    }
    for t in terms.iter_mut() {
        *t /= z;
    }
    m + z.ln()
}

fn mixture_op(
    g: &mut Graph,
    kind: MixtureKind,
    log_w: Var,
    mu: Var,
    sigma: Var,
    log_x: &Array,
) -> TResult<Var> {
    let name = match kind {
        MixtureKind::LogPdf => "mixture_logpdf",
        MixtureKind::LogSurvival => "mixture_logsurvival",
    };
    let s = g.shape(log_w).to_vec();
    let ok = s.len() == 4
        && g.shape(mu) == s.as_slice()
        && g.shape(sigma) == s.as_slice()
        && log_x.shape() == [s[0], s[2]];
    if !ok {
        return Err(shape_err(
            name,
            &[&s, g.shape(mu), g.shape(sigma), log_x.shape()],
        ));
    }
    let (b, n, l, k) = (s[0], s[1], s[2], s[3]);
    if g.value(sigma).iter().any(|&v| v <= 0.0) {
        return Err(TensorError::Domain {
            op: name,
            detail: "non-positive scale".into(),
        });
    }
    let lx = standard(log_x);
    let mut x = Vec::with_capacity(b * n * l);
    for bi in 0..b {
        for _ in 0..n {
            x.extend_from_slice(&lx[bi * l..(bi + 1) * l]);
        }
    }
    let (w, m, sg) = (
        standard(g.value(log_w)),
        standard(g.value(mu)),
        standard(g.value(sigma)),
    );
    let mut terms = vec![0.0; k];
    let out: Vec<f64> = (0..x.len())
        .map(|r| {
            let sl = r * k..(r + 1) * k;
            mixture_terms(
                kind,
                &w[sl.clone()],
                &m[sl.clone()],
                &sg[sl],
                x[r],
                &mut terms,
            )
        })
        .collect();
    let out = ArrayD::from_shape_vec(IxDyn(&[b, n, l]), out).unwrap();
    Ok(g.custom(&[log_w, mu, sigma], out, Box::new(MixtureOp { kind, k, x })))
}

impl CustomOp for MixtureOp {
    fn name(&self) -> &'static str {
        match self.kind {
            MixtureKind::LogPdf => "mixture_logpdf",
            MixtureKind::LogSurvival => "mixture_logsurvival",
        }
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let k = self.k;
        let (w, m, sg) = (
            standard(inputs[0]),
            standard(inputs[1]),
            standard(inputs[2]),
        );
        let gs = standard(grad);
        let mut dw = vec![0.0; w.len()];
        let mut dm = vec![0.0; w.len()];
        let mut ds = vec![0.0; w.len()];
        let mut resp = vec![0.0; k];
        for (r, &x) in self.x.iter().enumerate() {
            let sl = r * k..(r + 1) * k;
            let go = gs[r];
            if go == 0.0 {
                continue;
            }
            mixture_terms(
                self.kind,
                &w[sl.clone()],
                &m[sl.clone()],
                &sg[sl],
                x,
                &mut resp,
            );
            for c in 0..k {
                let idx = r * k + c;
                let u = (x - m[idx]) / sg[idx];
                let rc = resp[c] * go;
                dw[idx] = rc;
                match self.kind {
                    MixtureKind::LogPdf => {
                        dm[idx] = rc * u / sg[idx];
                        ds[idx] = rc * (u * u - 1.0) / sg[idx];
                    }
                    MixtureKind::LogSurvival => {
                        let hz = inverse_mills(u);
                        dm[idx] = rc * hz / sg[idx];
                        ds[idx] = rc * hz * u / sg[idx];
                    }
                }
            }
        }
        let shape = inputs[0].raw_dim();
        vec![
            Some(ArrayD::from_shape_vec(shape.clone(), dw).unwrap()),
            Some(ArrayD::from_shape_vec(shape.clone(), dm).unwrap()),
            Some(ArrayD::from_shape_vec(shape, ds).unwrap()),
        ]
    }
}

/// Log-density of a log-normal mixture at `exp(log_x)`.
///
/// `log_w` (log weights), `mu` and `sigma` are `[B, S, L, K]`; `log_x` is
/// `[B, L]` and is shared across the `S` axis. Returns `[B, S, L]`.
pub fn mixture_logpdf(
    g: &mut Graph,
    log_w: Var,
    mu: Var,
    sigma: Var,
    log_x: &Array,
) -> TResult<Var> {
    mixture_op(g, MixtureKind::LogPdf, log_w, mu, sigma, log_x)
}

/// Log of the mixture survival function `P(T > exp(log_x))`, same shapes
/// as [`mixture_logpdf`].
pub fn mixture_logsurvival(
    g: &mut Graph,
    log_w: Var,
    mu: Var,
    sigma: Var,
    log_x: &Array,
) -> TResult<Var> {
    mixture_op(g, MixtureKind::LogSurvival, log_w, mu, sigma, log_x)
}
