//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] records forward operations as nodes; [`Graph::backward`] walks
//! the tape in reverse and accumulates a gradient for every recorded node
//! that is reachable from a `param`. Tensors are immutable once recorded, so
//! independent graphs can be evaluated on parallel workers.

use std::sync::Arc;

use super::conv;
use super::tensor::{Scalar, Tensor};
use crate::error::{Result, TuskError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Precomputed sampling grid for [`Graph::warp`]: per output pixel, the
/// continuous source coordinate and whether it lands inside the map.
#[derive(Clone, Debug)]
pub struct WarpGrid {
    pub h: usize,
    pub w: usize,
    pub sx: Vec<f64>,
    pub sy: Vec<f64>,
    pub valid: Vec<bool>,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x { x: Var },
    LeakyRelu { x: Var, alpha: f64 },
    Sigmoid { x: Var },
    SoftmaxAxis { x: Var, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    SumAll { x: Var },
    MeanAll { x: Var },
    L2Norm { x: Var },
    MatMul { a: Var, b: Var },
    BilinearSample { f: Var, coords: Var },
    GaussianConv { x: Var, sigma: f64 },
    SortCols { x: Var, perm: Vec<u32> },
    ConcatLast { a: Var, b: Var },
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    PairwiseL2 { a: Var, b: Var },
    RowMin { x: Var, arg: Vec<usize> },
    RowLogSumExp { x: Var },
    SoftArgmax { s: Var, centers: Vec<(usize, usize)>, b: usize, tau: f64 },
    GatherPixels { s: Var, pts: Vec<(usize, usize)> },
    Splat { l: Var, d: Var, h: usize, w: usize, sigma: f64 },
    WeightedSumK { r: Var, s: Var },
    IndexK { x: Var, k: usize },
    Stack0 { xs: Vec<Var> },
    SliceLast { x: Var, start: usize, len: usize },
    NormalizeAxis0 { x: Var, eps: f64 },
    SqueezeLast { x: Var },
    ExpandLast { x: Var, n: usize },
    SumAxis0 { x: Var },
    Warp { x: Var, grid: Arc<WarpGrid> },
    MaskedMse { a: Var, b: Var, mask: Arc<Vec<bool>> },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    clamp_count: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TuskError {
    TuskError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Split a shape into (outer, len, inner) around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Corner/fraction decomposition for bilinear reads, with clamping.
/// Returns (x0, y0, fx, fy, clamped).
fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> (usize, usize, f64, f64, bool) {
    let clamped = x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let mut x0 = xc.floor() as usize;
    let mut y0 = yc.floor() as usize;
    if w >= 2 && x0 > w - 2 {
        x0 = w - 2;
    }
    if h >= 2 && y0 > h - 2 {
        y0 = h - 2;
    }
    (x0, y0, xc - x0 as f64, yc - y0 as f64, clamped)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            clamp_count: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant (no gradient flows into it).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record a trainable leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of out-of-range coordinates clamped by `bilinear_sample` and
    /// `soft_argmax` window clipping does not count. Diagnostic only.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count
    }

    /// Forward sort permutation of a `sort_cols` node: element `i` of the
    /// sorted output came from row `perm[i]` of the input (per column).
    pub fn sort_permutation(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::SortCols { perm, .. } => Some(perm),
            _ => None,
        }
    }

    // ---- operator set ------------------------------------------------

    /// 2D convolution over `(H, W, Cin)` with weights `(kh, kw, Cin, Cout)`
    /// and bias `(Cout,)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let dims = conv::conv_dims(xs, ws, stride, pad).ok_or_else(|| mismatch("conv2d", xs, ws))?;
        if self.value(b).shape() != [dims.cout] {
            return Err(mismatch("conv2d_bias", self.value(b).shape(), &[dims.cout]));
        }
        let out = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), &dims);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Nearest-neighbour 2x upsampling of `(H, W, C)`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", s, &[0, 0, 0]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; 4 * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let sbase = (y * w + xx) * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dbase = ((2 * y + dy) * 2 * w + 2 * xx + dx) * c;
                        out[dbase..dbase + c].copy_from_slice(&src[sbase..sbase + c]);
                    }
                }
            }
        }
        let t = Tensor::new(vec![2 * h, 2 * w, c], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Upsample2x { x }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::from_f64(alpha);
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { a * v });
        let needs = self.ng(x);
        self.push(out, Op::LeakyRelu { x, alpha }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            // numerically symmetric logistic
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        });
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Softmax along `axis`, numerically stabilized.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(mismatch("softmax_axis", &s, &[axis]));
        }
        let (outer, len, inner) = lanes(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mut m = src[at(0)];
                for i in 1..len {
                    m = m.maxv(src[at(i)]);
                }
                let mut z = T::ZERO;
                for i in 0..len {
                    let e = (src[at(i)] - m).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / z;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SoftmaxAxis { x, axis }, needs))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    /// Multiply a tensor by a scalar *node* (gradient flows to both).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TuskError::NonScalar {
                op: "mul_scalar",
                shape: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| sv * v);
        let needs = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulScalar { x, s }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.value(x).map(|v| cv * v);
        let needs = self.ng(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let needs = self.ng(x);
        self.push(Tensor::scalar(acc), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let out = acc / T::from_f64(n as f64);
        let needs = self.ng(x);
        self.push(Tensor::scalar(out), Op::MeanAll { x }, needs)
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v * v;
        }
        let needs = self.ng(x);
        self.push(Tensor::scalar(acc.sqrt()), Op::L2Norm { x }, needs)
    }

    /// `(n, k) . (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; n * m];
        unsafe {
            T::gemm(
                n,
                k,
                m,
                T::ONE,
                self.value(a).data().as_ptr(),
                k as isize,
                1,
                self.value(b).data().as_ptr(),
                m as isize,
                1,
                T::ZERO,
                out.as_mut_ptr(),
                m as isize,
                1,
            );
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b }, needs))
    }

    /// Sample `(H, W, C)` features at `(K, 2)` continuous `(x, y)` points.
    /// Out-of-range points are clamped to the image and counted.
    pub fn bilinear_sample(&mut self, f: Var, coords: Var) -> Result<Var> {
        let (sf, sc) = (self.value(f).shape(), self.value(coords).shape());
        if sf.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(mismatch("bilinear_sample", sf, sc));
        }
        let (h, w, c) = (sf[0], sf[1], sf[2]);
        let k = sc[0];
        let fd = self.value(f).data();
        let cd = self.value(coords).data();
        let mut out = vec![T::ZERO; k * c];
        let mut clamps = 0u64;
        for i in 0..k {
            let (x0, y0, fx, fy, clamped) =
                bilinear_corners(cd[2 * i].to_f64(), cd[2 * i + 1].to_f64(), h, w);
            if clamped {
                clamps += 1;
            }
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for ch in 0..c {
                out[i * c + ch] = wy0 * wx0 * fd[(y0 * w + x0) * c + ch]
                    + wy0 * wx1 * fd[(y0 * w + x1) * c + ch]
                    + wy1 * wx0 * fd[(y1 * w + x0) * c + ch]
                    + wy1 * wx1 * fd[(y1 * w + x1) * c + ch];
            }
        }
        self.clamp_count += clamps;
        let t = Tensor::new(vec![k, c], out)?;
        let needs = self.ng(f) || self.ng(coords);
        Ok(self.push(t, Op::BilinearSample { f, coords }, needs))
    }

    /// Fixed-kernel Gaussian blur (same size, zero padding).
    pub fn gaussian_conv(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 && s.len() != 3 {
            return Err(mismatch("gaussian_conv", s, &[0, 0]));
        }
        let out = conv::gaussian_conv(self.value(x), sigma);
        let needs = self.ng(x);
        Ok(self.push(out, Op::GaussianConv { x, sigma }, needs))
    }

    /// Sort ascending along axis 0 of `(n,)` or `(n, m)`, independently per
    /// column; stable on ties. The gradient of sorted element `i` routes back
    /// to input row `perm[i]`.
    pub fn sort_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (n, m) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => return Err(mismatch("sort_cols", &s, &[0, 0])),
        };
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        let mut perm = vec![0u32; src.len()];
        let mut order: Vec<u32> = Vec::with_capacity(n);
        for col in 0..m {
            order.clear();
            order.extend(0..n as u32);
            order.sort_by(|&i, &j| {
                src[i as usize * m + col].total_cmp(&src[j as usize * m + col])
            });
            for (i, &o) in order.iter().enumerate() {
                out[i * m + col] = src[o as usize * m + col];
                perm[i * m + col] = o;
            }
        }
        let t = Tensor::new(s, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SortCols { x, perm }, needs))
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", &sa, &sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; rows * (ca + cb)];
        for r in 0..rows {
            out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&da[r * ca..(r + 1) * ca]);
            out[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::ConcatLast { a, b }, needs))
    }

    /// Select rows of `(M, C)` by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(mismatch("gather_rows", s, &[0, 0]));
        }
        let (m, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; idx.len() * c];
        for (i, &r) in idx.iter().enumerate() {
            debug_assert!(r < m);
            out[i * c..(i + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::GatherRows { x, idx: Arc::new(idx) }, needs))
    }

    /// Unsquared pairwise Euclidean distances `(n, C) x (m, C) -> (n, m)`.
    pub fn pairwise_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("pairwise_l2", sa, sb));
        }
        let (n, m, c) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = T::ZERO;
                for ch in 0..c {
                    let d = da[i * c + ch] - db[j * c + ch];
                    acc += d * d;
                }
                out[i * m + j] = acc.sqrt();
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::PairwiseL2 { a, b }, needs))
    }

    /// Row-wise minimum of `(n, m) -> (n,)`; gradient routes to the argmin
    /// (ties to the lower index).
    pub fn row_min(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(mismatch("row_min", s, &[0, 0]));
        }
        let (n, m) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n];
        let mut arg = vec![0usize; n];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mut best = 0usize;
            for j in 1..m {
                if row[j] < row[best] {
                    best = j;
                }
            }
            out[i] = row[best];
            arg[i] = best;
        }
        let t = Tensor::new(vec![n], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::RowMin { x, arg }, needs))
    }

    /// Row-wise `log(sum(exp(x)))` of `(n, m) -> (n,)`, stabilized.
    pub fn row_logsumexp(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(mismatch("row_logsumexp", s, &[0, 0]));
        }
        let (n, m) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; n];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mut mx = row[0];
            for &v in row.iter().skip(1) {
                mx = mx.maxv(v);
            }
            let mut z = T::ZERO;
            for &v in row.iter() {
                z += (v - mx).exp();
            }
            out[i] = mx + z.ln();
        }
        let t = Tensor::new(vec![n], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::RowLogSumExp { x }, needs))
    }

    /// Temperature-softmax weighted centroid over a `b x b` window around
    /// each integer center (clipped at borders, weights renormalized over
    /// in-bounds pixels). Input `(H, W)` scores, output `(K, 2)` as `(x, y)`.
    pub fn soft_argmax(
        &mut self,
        s: Var,
        centers: Vec<(usize, usize)>,
        b: usize,
        tau: f64,
    ) -> Result<Var> {
        let sh = self.value(s).shape();
        if sh.len() != 2 {
            return Err(mismatch("soft_argmax", sh, &[0, 0]));
        }
        if b % 2 == 0 || tau <= 0.0 {
            return Err(TuskError::InvalidParameter {
                name: "soft_argmax",
                reason: format!("kernel must be odd and tau positive, got b={b} tau={tau}"),
            });
        }
        let (h, w) = (sh[0], sh[1]);
        let src = self.value(s).data();
        let r = b / 2;
        let k = centers.len();
        let mut out = vec![T::ZERO; k * 2];
        for (i, &(cx, cy)) in centers.iter().enumerate() {
            let x_lo = cx.saturating_sub(r);
            let x_hi = (cx + r).min(w - 1);
            let y_lo = cy.saturating_sub(r);
            let y_hi = (cy + r).min(h - 1);
            let mut m = f64::NEG_INFINITY;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    m = m.max(src[y * w + x].to_f64());
                }
            }
            let (mut z, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let e = ((src[y * w + x].to_f64() - m) / tau).exp();
                    z += e;
                    sx += x as f64 * e;
                    sy += y as f64 * e;
                }
            }
            out[2 * i] = T::from_f64(sx / z);
            out[2 * i + 1] = T::from_f64(sy / z);
        }
        let t = Tensor::new(vec![k, 2], out)?;
        let needs = self.ng(s);
        Ok(self.push(t, Op::SoftArgmax { s, centers, b, tau }, needs))
    }

    /// Read scoremap values at integer `(x, y)` points -> `(K,)`.
    pub fn gather_pixels(&mut self, s: Var, pts: Vec<(usize, usize)>) -> Result<Var> {
        let sh = self.value(s).shape();
        if sh.len() != 2 {
            return Err(mismatch("gather_pixels", sh, &[0, 0]));
        }
        let w = sh[1];
        let src = self.value(s).data();
        let out: Vec<T> = pts.iter().map(|&(x, y)| src[y * w + x]).collect();
        let t = Tensor::new(vec![pts.len()], out)?;
        let needs = self.ng(s);
        Ok(self.push(t, Op::GatherPixels { s, pts }, needs))
    }

    /// Render each descriptor as a Gaussian blob at its (sub-pixel) location:
    /// `R[k](p) = D[k] * exp(-|p - L[k]|^2 / (2 sigma^2))`, truncated past
    /// `3 sigma` (+1 px slack) from the rounded center.
    pub fn splat(&mut self, l: Var, d: Var, h: usize, w: usize, sigma: f64) -> Result<Var> {
        let (sl, sd) = (self.value(l).shape(), self.value(d).shape());
        if sl.len() != 2 || sl[1] != 2 || sd.len() != 2 || sl[0] != sd[0] {
            return Err(mismatch("splat", sl, sd));
        }
        if sigma <= 0.0 {
            return Err(TuskError::InvalidParameter {
                name: "sigma_splat",
                reason: format!("must be positive, got {sigma}"),
            });
        }
        let (k, c) = (sd[0], sd[1]);
        let ld = self.value(l).data();
        let dd = self.value(d).data();
        let mut out = vec![T::ZERO; k * h * w * c];
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let r = (3.0 * sigma).ceil() as isize + 1;
        for i in 0..k {
            let lx = ld[2 * i].to_f64();
            let ly = ld[2 * i + 1].to_f64();
            let (cx, cy) = (lx.round() as isize, ly.round() as isize);
            let x_lo = (cx - r).max(0) as usize;
            let x_hi = (cx + r).min(w as isize - 1).max(0) as usize;
            let y_lo = (cy - r).max(0) as usize;
            let y_hi = (cy + r).min(h as isize - 1).max(0) as usize;
            if cx + r < 0 || cy + r < 0 {
                continue;
            }
            let desc = &dd[i * c..(i + 1) * c];
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let dx = x as f64 - lx;
                    let dy = y as f64 - ly;
                    let wgt = T::from_f64((-(dx * dx + dy * dy) * inv2s2).exp());
                    let base = ((i * h + y) * w + x) * c;
                    for ch in 0..c {
                        out[base + ch] = wgt * desc[ch];
                    }
                }
            }
        }
        let t = Tensor::new(vec![k, h, w, c], out)?;
        let needs = self.ng(l) || self.ng(d);
        Ok(self.push(t, Op::Splat { l, d, h, w, sigma }, needs))
    }

    /// Score-weighted sum over the leading axis:
    /// `(K, H, W, C) x (K,) -> (H, W, C)`.
    pub fn weighted_sum_k(&mut self, r: Var, s: Var) -> Result<Var> {
        let (sr, ss) = (self.value(r).shape().to_vec(), self.value(s).shape());
        if sr.len() != 4 || ss.len() != 1 || ss[0] != sr[0] {
            return Err(mismatch("weighted_sum_k", &sr, ss));
        }
        let k = sr[0];
        let rest: usize = sr[1..].iter().product();
        let rd = self.value(r).data();
        let sd = self.value(s).data();
        let mut out = vec![T::ZERO; rest];
        for i in 0..k {
            let wv = sd[i];
            let slab = &rd[i * rest..(i + 1) * rest];
            for (o, &v) in out.iter_mut().zip(slab.iter()) {
                *o += wv * v;
            }
        }
        let t = Tensor::new(sr[1..].to_vec(), out)?;
        let needs = self.ng(r) || self.ng(s);
        Ok(self.push(t, Op::WeightedSumK { r, s }, needs))
    }

    /// Slice index `k` off the leading axis.
    pub fn index_k(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() || k >= s[0] {
            return Err(mismatch("index_k", &s, &[k]));
        }
        let rest: usize = s[1..].iter().product();
        let data = self.value(x).data()[k * rest..(k + 1) * rest].to_vec();
        let t = Tensor::new(s[1..].to_vec(), data)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::IndexK { x, k }, needs))
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(mismatch("stack0", &[], &[]));
        }
        let s0 = self.value(xs[0]).shape().to_vec();
        let rest: usize = s0.iter().product();
        let mut out = Vec::with_capacity(xs.len() * rest);
        for &v in xs {
            if self.value(v).shape() != s0.as_slice() {
                return Err(mismatch("stack0", &s0, self.value(v).shape()));
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&s0);
        let t = Tensor::new(shape, out)?;
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(t, Op::Stack0 { xs: xs.to_vec() }, needs))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let c = *s.last().ok_or_else(|| mismatch("slice_last", &s, &[]))?;
        if start + len > c {
            return Err(mismatch("slice_last", &s, &[start, len]));
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SliceLast { x, start, len }, needs))
    }

    /// Normalize along axis 0: `y_k = x_k / (sum_j x_j + eps)` per trailing
    /// position. Weights sum to `S/(S+eps)`, so empty positions go to 0.
    pub fn normalize_axis0(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(mismatch("normalize_axis0", &s, &[]));
        }
        let k = s[0];
        let rest: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let epsv = T::from_f64(eps);
        let mut out = vec![T::ZERO; src.len()];
        for p in 0..rest {
            let mut total = epsv;
            for i in 0..k {
                total += src[i * rest + p];
            }
            for i in 0..k {
                out[i * rest + p] = src[i * rest + p] / total;
            }
        }
        let t = Tensor::new(s, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::NormalizeAxis0 { x, eps }, needs))
    }

    /// Drop a trailing axis of size 1; identity on the data.
    pub fn squeeze_last(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.last() != Some(&1) {
            return Err(mismatch("squeeze_last", &s, &[1]));
        }
        let t = Tensor::new(s[..s.len() - 1].to_vec(), self.value(x).data().to_vec())?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SqueezeLast { x }, needs))
    }

    /// Append an axis of size `n`, replicating each element.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * n);
        for &v in src {
            for _ in 0..n {
                out.push(v);
            }
        }
        let mut shape = s;
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::ExpandLast { x, n }, needs))
    }

    /// Sum over the leading axis.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(mismatch("sum_axis0", &s, &[]));
        }
        let k = s[0];
        let rest: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; rest];
        for i in 0..k {
            for (o, &v) in out.iter_mut().zip(src[i * rest..(i + 1) * rest].iter()) {
                *o += v;
            }
        }
        let t = Tensor::new(s[1..].to_vec(), out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SumAxis0 { x }, needs))
    }

    /// Resample `(H, W)` or `(H, W, C)` at the grid's source coordinates;
    /// invalid pixels are written as 0. Gradient flows to the map only.
    pub fn warp(&mut self, x: Var, grid: Arc<WarpGrid>) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (h, w, c) = match s.len() {
            2 => (s[0], s[1], 1),
            3 => (s[0], s[1], s[2]),
            _ => return Err(mismatch("warp", &s, &[0, 0])),
        };
        if h != grid.h || w != grid.w {
            return Err(mismatch("warp", &s, &[grid.h, grid.w]));
        }
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; src.len()];
        for p in 0..h * w {
            if !grid.valid[p] {
                continue;
            }
            let (x0, y0, fx, fy, _) = bilinear_corners(grid.sx[p], grid.sy[p], h, w);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
            let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for ch in 0..c {
                out[p * c + ch] = wy0 * wx0 * src[(y0 * w + x0) * c + ch]
                    + wy0 * wx1 * src[(y0 * w + x1) * c + ch]
                    + wy1 * wx0 * src[(y1 * w + x0) * c + ch]
                    + wy1 * wx1 * src[(y1 * w + x1) * c + ch];
            }
        }
        let t = Tensor::new(s, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Warp { x, grid }, needs))
    }

    /// Mean squared difference restricted to a per-pixel validity mask;
    /// the mean is over valid pixels times channels.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch("masked_mse", sa, sb));
        }
        let c = if sa.len() == 3 { sa[2] } else { 1 };
        let np = self.value(a).numel() / c;
        if mask.len() != np {
            return Err(mismatch("masked_mse_mask", sa, &[mask.len()]));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let nv = mask.iter().filter(|&&m| m).count();
        let mut acc = T::ZERO;
        if nv > 0 {
            for p in 0..np {
                if !mask[p] {
                    continue;
                }
                for ch in 0..c {
                    let d = da[p * c + ch] - db[p * c + ch];
                    acc += d * d;
                }
            }
            acc = acc / T::from_f64((nv * c) as f64);
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(acc), Op::MaskedMse { a, b, mask }, needs))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar output. Returns per-node gradients; every
    /// `param` reachable from `loss` has one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TuskError::NonScalar {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let dims = conv::conv_dims(
                    self.value(*x).shape(),
                    self.value(*w).shape(),
                    *stride,
                    *pad,
                )
                .expect("conv dims re-derivable");
                let gr = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    &dims,
                    self.ng(*x),
                );
                if let Some(dx) = gr.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, gr.dw);
                self.acc(grads, *b, gr.db);
            }
            Op::Upsample2x { x } => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let gd = g.data();
                let mut dx = vec![T::ZERO; h * w * c];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = (y * 2 * w + xx) * c;
                        let dst = ((y / 2) * w + xx / 2) * c;
                        for ch in 0..c {
                            dx[dst + ch] += gd[src + ch];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::LeakyRelu { x, alpha } => {
                let a = T::from_f64(*alpha);
                let dx: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&v, &gv)| if v > T::ZERO { gv } else { a * gv })
                    .collect();
                self.acc(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let dx: Vec<T> = y
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&yv, &gv)| gv * yv * (T::ONE - yv))
                    .collect();
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SoftmaxAxis { x, axis } => {
                let y = &self.nodes[i].value;
                let s = y.shape();
                let (outer, len, inner) = lanes(s, *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::ZERO; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |ii: usize| (o * len + ii) * inner + j;
                        let mut dot = T::ZERO;
                        for ii in 0..len {
                            dot += gd[at(ii)] * yd[at(ii)];
                        }
                        for ii in 0..len {
                            dx[at(ii)] = yd[at(ii)] * (gd[at(ii)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    let da: Vec<T> = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&bv, &gv)| bv * gv)
                        .collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    let db: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&av, &gv)| av * gv)
                        .collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), db).unwrap());
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.ng(*x) {
                    self.acc(grads, *x, g.map(|v| sv * v));
                }
                if self.ng(*s) {
                    let mut acc = T::ZERO;
                    for (&xv, &gv) in self.value(*x).data().iter().zip(g.data().iter()) {
                        acc += xv * gv;
                    }
                    let shape = self.value(*s).shape().to_vec();
                    self.acc(grads, *s, Tensor::full(&shape, acc));
                }
            }
            Op::Scale { x, c } => {
                let cv = T::from_f64(*c);
                self.acc(grads, *x, g.map(|v| cv * v));
            }
            Op::SumAll { x } => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let gv = g.item() / T::from_f64(n as f64);
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::L2Norm { x } => {
                let norm = self.nodes[i].value.item();
                let denom = norm.maxv(T::from_f64(1e-30));
                let gv = g.item();
                let dx = self.value(*x).map(|v| gv * v / denom);
                self.acc(grads, *x, dx);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut da = vec![T::ZERO; n * k];
                    unsafe {
                        T::gemm(
                            n,
                            m,
                            k,
                            T::ONE,
                            g.data().as_ptr(),
                            m as isize,
                            1,
                            self.value(*b).data().as_ptr(),
                            1,
                            m as isize,
                            T::ZERO,
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    self.acc(grads, *a, Tensor::new(vec![n, k], da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![T::ZERO; k * m];
                    unsafe {
                        T::gemm(
                            k,
                            n,
                            m,
                            T::ONE,
                            self.value(*a).data().as_ptr(),
                            1,
                            k as isize,
                            g.data().as_ptr(),
                            m as isize,
                            1,
                            T::ZERO,
                            db.as_mut_ptr(),
                            m as isize,
                            1,
                        );
                    }
                    self.acc(grads, *b, Tensor::new(vec![k, m], db).unwrap());
                }
            }
            Op::BilinearSample { f, coords } => {
                let sf = self.value(*f).shape();
                let (h, w, c) = (sf[0], sf[1], sf[2]);
                let k = self.value(*coords).shape()[0];
                let fd = self.value(*f).data();
                let cd = self.value(*coords).data();
                let gd = g.data();
                let mut df = vec![T::ZERO; fd.len()];
                let mut dc = vec![T::ZERO; k * 2];
                for kp in 0..k {
                    let (x0, y0, fx, fy, clamped) =
                        bilinear_corners(cd[2 * kp].to_f64(), cd[2 * kp + 1].to_f64(), h, w);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                    let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                    let (mut gx, mut gy) = (T::ZERO, T::ZERO);
                    for ch in 0..c {
                        let gv = gd[kp * c + ch];
                        if self.ng(*f) {
                            df[(y0 * w + x0) * c + ch] += wy0 * wx0 * gv;
                            df[(y0 * w + x1) * c + ch] += wy0 * wx1 * gv;
                            df[(y1 * w + x0) * c + ch] += wy1 * wx0 * gv;
                            df[(y1 * w + x1) * c + ch] += wy1 * wx1 * gv;
                        }
                        let f00 = fd[(y0 * w + x0) * c + ch];
                        let f01 = fd[(y0 * w + x1) * c + ch];
                        let f10 = fd[(y1 * w + x0) * c + ch];
                        let f11 = fd[(y1 * w + x1) * c + ch];
                        gx += gv * (wy0 * (f01 - f00) + wy1 * (f11 - f10));
                        gy += gv * (wx0 * (f10 - f00) + wx1 * (f11 - f01));
                    }
                    if !clamped {
                        dc[2 * kp] = gx;
                        dc[2 * kp + 1] = gy;
                    }
                }
                if self.ng(*f) {
                    self.acc(grads, *f, Tensor::new(sf.to_vec(), df).unwrap());
                }
                if self.ng(*coords) {
                    self.acc(grads, *coords, Tensor::new(vec![k, 2], dc).unwrap());
                }
            }
            Op::GaussianConv { x, sigma } => {
                // symmetric kernel: adjoint is the same blur
                self.acc(grads, *x, conv::gaussian_conv(g, *sigma));
            }
            Op::SortCols { x, perm } => {
                let s = self.value(*x).shape();
                let m = if s.len() == 2 { s[1] } else { 1 };
                let n = s[0];
                let gd = g.data();
                let mut dx = vec![T::ZERO; gd.len()];
                for col in 0..m {
                    for ii in 0..n {
                        let orig = perm[ii * m + col] as usize;
                        dx[orig * m + col] = gd[ii * m + col];
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::ConcatLast { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let ca = sa[sa.len() - 1];
                let cb = sb[sb.len() - 1];
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let gd = g.data();
                let mut da = vec![T::ZERO; rows * ca];
                let mut db = vec![T::ZERO; rows * cb];
                for r in 0..rows {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&gd[r * (ca + cb)..r * (ca + cb) + ca]);
                    db[r * cb..(r + 1) * cb]
                        .copy_from_slice(&gd[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.acc(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                self.acc(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let s = self.value(*x).shape();
                let c = s[1];
                let gd = g.data();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for (ii, &r) in idx.iter().enumerate() {
                    for ch in 0..c {
                        dx[r * c + ch] += gd[ii * c + ch];
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::PairwiseL2 { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, m, c) = (sa[0], sb[0], sa[1]);
                let (da_v, db_v) = (self.value(*a).data(), self.value(*b).data());
                let dist = self.nodes[i].value.data();
                let gd = g.data();
                let tiny = T::from_f64(1e-12);
                let mut da = vec![T::ZERO; n * c];
                let mut db = vec![T::ZERO; m * c];
                for ii in 0..n {
                    for j in 0..m {
                        let gv = gd[ii * m + j];
                        if gv == T::ZERO {
                            continue;
                        }
                        let denom = dist[ii * m + j].maxv(tiny);
                        for ch in 0..c {
                            let diff = da_v[ii * c + ch] - db_v[j * c + ch];
                            let t = gv * diff / denom;
                            da[ii * c + ch] += t;
                            db[j * c + ch] -= t;
                        }
                    }
                }
                if self.ng(*a) {
                    self.acc(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
                }
            }
            Op::RowMin { x, arg } => {
                let s = self.value(*x).shape();
                let m = s[1];
                let gd = g.data();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for (ii, &j) in arg.iter().enumerate() {
                    dx[ii * m + j] = gd[ii];
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::RowLogSumExp { x } => {
                let s = self.value(*x).shape();
                let (n, m) = (s[0], s[1]);
                let xd = self.value(*x).data();
                let lse = self.nodes[i].value.data();
                let gd = g.data();
                let mut dx = vec![T::ZERO; xd.len()];
                for ii in 0..n {
                    for j in 0..m {
                        dx[ii * m + j] = gd[ii] * (xd[ii * m + j] - lse[ii]).exp();
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::SoftArgmax { s, centers, b, tau } => {
                let sh = self.value(*s).shape();
                let (h, w) = (sh[0], sh[1]);
                let src = self.value(*s).data();
                let out = self.nodes[i].value.data();
                let gd = g.data();
                let r = b / 2;
                let mut ds = vec![T::ZERO; src.len()];
                for (kp, &(cx, cy)) in centers.iter().enumerate() {
                    let x_lo = cx.saturating_sub(r);
                    let x_hi = (cx + r).min(w - 1);
                    let y_lo = cy.saturating_sub(r);
                    let y_hi = (cy + r).min(h - 1);
                    let mut m = f64::NEG_INFINITY;
                    for y in y_lo..=y_hi {
                        for x in x_lo..=x_hi {
                            m = m.max(src[y * w + x].to_f64());
                        }
                    }
                    let mut z = 0.0f64;
                    for y in y_lo..=y_hi {
                        for x in x_lo..=x_hi {
                            z += ((src[y * w + x].to_f64() - m) / tau).exp();
                        }
                    }
                    let lx = out[2 * kp].to_f64();
                    let ly = out[2 * kp + 1].to_f64();
                    let gx = gd[2 * kp].to_f64();
                    let gy = gd[2 * kp + 1].to_f64();
                    for y in y_lo..=y_hi {
                        for x in x_lo..=x_hi {
                            let wgt = ((src[y * w + x].to_f64() - m) / tau).exp() / z;
                            let d = (gx * (x as f64 - lx) + gy * (y as f64 - ly)) * wgt / tau;
                            ds[y * w + x] += T::from_f64(d);
                        }
                    }
                }
                self.acc(grads, *s, Tensor::new(sh.to_vec(), ds).unwrap());
            }
            Op::GatherPixels { s, pts } => {
                let sh = self.value(*s).shape();
                let w = sh[1];
                let gd = g.data();
                let mut ds = vec![T::ZERO; self.value(*s).numel()];
                for (kp, &(x, y)) in pts.iter().enumerate() {
                    ds[y * w + x] += gd[kp];
                }
                self.acc(grads, *s, Tensor::new(sh.to_vec(), ds).unwrap());
            }
            Op::Splat { l, d, h, w, sigma } => {
                let (k, c) = {
                    let sd = self.value(*d).shape();
                    (sd[0], sd[1])
                };
                let ld = self.value(*l).data();
                let dd = self.value(*d).data();
                let gd = g.data();
                let inv2s2 = 1.0 / (2.0 * sigma * sigma);
                let rr = (3.0 * sigma).ceil() as isize + 1;
                let mut dl = vec![T::ZERO; k * 2];
                let mut ddg = vec![T::ZERO; k * c];
                for ii in 0..k {
                    let lx = ld[2 * ii].to_f64();
                    let ly = ld[2 * ii + 1].to_f64();
                    let (cx, cy) = (lx.round() as isize, ly.round() as isize);
                    let x_lo = (cx - rr).max(0) as usize;
                    let x_hi = (cx + rr).min(*w as isize - 1).max(0) as usize;
                    let y_lo = (cy - rr).max(0) as usize;
                    let y_hi = (cy + rr).min(*h as isize - 1).max(0) as usize;
                    if cx + rr < 0 || cy + rr < 0 {
                        continue;
                    }
                    let desc = &dd[ii * c..(ii + 1) * c];
                    let (mut glx, mut gly) = (0.0f64, 0.0f64);
                    for y in y_lo..=y_hi {
                        for x in x_lo..=x_hi {
                            let dx = x as f64 - lx;
                            let dy = y as f64 - ly;
                            let wgt = (-(dx * dx + dy * dy) * inv2s2).exp();
                            let base = ((ii * h + y) * w + x) * c;
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                let gv = gd[base + ch];
                                ddg[ii * c + ch] += T::from_f64(wgt) * gv;
                                dot += desc[ch].to_f64() * gv.to_f64();
                            }
                            // d wgt / d lx = wgt * (x - lx) / sigma^2
                            glx += dot * wgt * dx * 2.0 * inv2s2;
                            gly += dot * wgt * dy * 2.0 * inv2s2;
                        }
                    }
                    dl[2 * ii] = T::from_f64(glx);
                    dl[2 * ii + 1] = T::from_f64(gly);
                }
                if self.ng(*l) {
                    self.acc(grads, *l, Tensor::new(vec![k, 2], dl).unwrap());
                }
                if self.ng(*d) {
                    self.acc(grads, *d, Tensor::new(vec![k, c], ddg).unwrap());
                }
            }
            Op::WeightedSumK { r, s } => {
                let sr = self.value(*r).shape();
                let k = sr[0];
                let rest: usize = sr[1..].iter().product();
                let rd = self.value(*r).data();
                let sd = self.value(*s).data();
                let gd = g.data();
                if self.ng(*r) {
                    let mut dr = vec![T::ZERO; rd.len()];
                    for ii in 0..k {
                        let wv = sd[ii];
                        for (o, &gv) in dr[ii * rest..(ii + 1) * rest].iter_mut().zip(gd.iter()) {
                            *o = wv * gv;
                        }
                    }
                    self.acc(grads, *r, Tensor::new(sr.to_vec(), dr).unwrap());
                }
                if self.ng(*s) {
                    let mut dsv = vec![T::ZERO; k];
                    for ii in 0..k {
                        let mut acc = T::ZERO;
                        for (&rv, &gv) in rd[ii * rest..(ii + 1) * rest].iter().zip(gd.iter()) {
                            acc += rv * gv;
                        }
                        dsv[ii] = acc;
                    }
                    self.acc(grads, *s, Tensor::new(vec![k], dsv).unwrap());
                }
            }
            Op::IndexK { x, k } => {
                let s = self.value(*x).shape();
                let rest: usize = s[1..].iter().product();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                dx[k * rest..(k + 1) * rest].copy_from_slice(g.data());
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Stack0 { xs } => {
                let rest: usize = self.value(xs[0]).numel();
                let gd = g.data();
                for (ii, &v) in xs.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let slab = gd[ii * rest..(ii + 1) * rest].to_vec();
                    self.acc(
                        grads,
                        v,
                        Tensor::new(self.value(v).shape().to_vec(), slab).unwrap(),
                    );
                }
            }
            Op::SliceLast { x, start, len } => {
                let s = self.value(*x).shape();
                let c = *s.last().unwrap();
                let rows: usize = s[..s.len() - 1].iter().product();
                let gd = g.data();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::NormalizeAxis0 { x, eps } => {
                let s = self.value(*x).shape();
                let k = s[0];
                let rest: usize = s[1..].iter().product();
                let src = self.value(*x).data();
                let gd = g.data();
                let epsv = T::from_f64(*eps);
                let mut dx = vec![T::ZERO; src.len()];
                for p in 0..rest {
                    let mut total = epsv;
                    for i in 0..k {
                        total += src[i * rest + p];
                    }
                    let mut dot = T::ZERO;
                    for i in 0..k {
                        dot += gd[i * rest + p] * src[i * rest + p];
                    }
                    for i in 0..k {
                        dx[i * rest + p] = gd[i * rest + p] / total - dot / (total * total);
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::SqueezeLast { x } => {
                let s = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::new(s, g.data().to_vec()).unwrap());
            }
            Op::ExpandLast { x, n } => {
                let s = self.value(*x).shape();
                let gd = g.data();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for (ii, slot) in dx.iter_mut().enumerate() {
                    let mut acc = T::ZERO;
                    for j in 0..*n {
                        acc += gd[ii * n + j];
                    }
                    *slot = acc;
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::SumAxis0 { x } => {
                let s = self.value(*x).shape();
                let k = s[0];
                let rest: usize = s[1..].iter().product();
                let gd = g.data();
                let mut dx = vec![T::ZERO; k * rest];
                for ii in 0..k {
                    dx[ii * rest..(ii + 1) * rest].copy_from_slice(gd);
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Warp { x, grid } => {
                let s = self.value(*x).shape();
                let (h, w, c) = match s.len() {
                    2 => (s[0], s[1], 1),
                    _ => (s[0], s[1], s[2]),
                };
                let gd = g.data();
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for p in 0..h * w {
                    if !grid.valid[p] {
                        continue;
                    }
                    let (x0, y0, fx, fy, _) = bilinear_corners(grid.sx[p], grid.sy[p], h, w);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                    let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                    for ch in 0..c {
                        let gv = gd[p * c + ch];
                        dx[(y0 * w + x0) * c + ch] += wy0 * wx0 * gv;
                        dx[(y0 * w + x1) * c + ch] += wy0 * wx1 * gv;
                        dx[(y1 * w + x0) * c + ch] += wy1 * wx0 * gv;
                        dx[(y1 * w + x1) * c + ch] += wy1 * wx1 * gv;
                    }
                }
                self.acc(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::MaskedMse { a, b, mask } => {
                let s = self.value(*a).shape();
                let c = if s.len() == 3 { s[2] } else { 1 };
                let np = self.value(*a).numel() / c;
                let nv = mask.iter().filter(|&&m| m).count();
                if nv == 0 {
                    return;
                }
                let scale = g.item() * T::from_f64(2.0 / (nv * c) as f64);
                let (da_v, db_v) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::ZERO; da_v.len()];
                let mut db = vec![T::ZERO; db_v.len()];
                for p in 0..np {
                    if !mask[p] {
                        continue;
                    }
                    for ch in 0..c {
                        let d = scale * (da_v[p * c + ch] - db_v[p * c + ch]);
                        da[p * c + ch] = d;
                        db[p * c + ch] = -d;
                    }
                }
                if self.ng(*a) {
                    self.acc(grads, *a, Tensor::new(s.to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Tensor::new(s.to_vec(), db).unwrap());
                }
            }
        }
    }
}
