//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that requires them. A fresh graph is built per training step.

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, softmax_in_place, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

/// Normalisation statistics source for [`Graph::norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Normalise with the current batch's mean and biased variance.
    Batch,
    /// Normalise with stored statistics (evaluation mode).
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch moments produced by a batch-statistics norm.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased variance over batch and spatial positions.
    pub var: Vec<T>,
    /// Number of elements per channel the moments were computed over.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_hw: (usize, usize),
        cols: Option<Vec<T>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    ChannelAffine {
        x: Var,
        a: Vec<T>,
    },
    Relu(Var),
    Tanh(Var),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: Vec<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    /// One `(lo, hi)` range per equal slice along axis 0.
    FakeQuant {
        x: Var,
        ranges: Vec<(T, T)>,
    },
    ChannelMoments(Var),
    GaussianKlSum {
        stats: Var,
        ref_mean: Vec<T>,
        ref_var: Vec<T>,
        eps: T,
    },
    LabelCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        target_probs: Vec<T>,
        probs: Vec<T>,
        temperature: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
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

fn dims4(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

/// `(batch, channels, spatial)` for tensors of rank >= 2.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

/// Output columns `ox` for which `ox * stride + kj - padding` lies in
/// `[0, w)`.
fn valid_range(w: usize, wo: usize, kj: usize, geom: ConvGeom) -> (usize, usize) {
    let (s, pad) = (geom.stride, geom.padding);
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
    // ox * s + kj - pad <= w - 1  <=>  ox <= (w - 1 + pad - kj) / s
    let hi = if w + pad < kj + 1 { 0 } else { ((w - 1 + pad - kj) / s + 1).min(wo) };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [T],
    ld: usize,
) {
    let p = ho * wo;
    let s = geom.stride;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ld..row * ld + p];
                let (lo, hi) = valid_range(w, wo, kj, geom);
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - geom.padding as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let start = lo * s + kj - geom.padding;
                    if s == 1 {
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (i, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[start + i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into image positions.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    dx: &mut [T],
    ld: usize,
) {
    let p = ho * wo;
    let s = geom.stride;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ld..row * ld + p];
                let (lo, hi) = valid_range(w, wo, kj, geom);
                if lo >= hi {
                    continue;
                }
                let start = lo * s + kj - geom.padding;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w + start;
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    if s == 1 {
                        for (d, &v) in dx[base..base + (hi - lo)].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow.iter().enumerate() {
                            dx[base + i * s] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is requested when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// 2-D convolution. `x`: `(B, C, H, W)`, `w`: `(O, C, kh, kw)`, `b`: `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (bsz, c, h, wd) =
            dims4(self.value(x).shape()).ok_or_else(|| Error::shape("conv2d input", "(B,C,H,W)", self.value(x).shape()))?;
        let (o, wc, kh, kw) =
            dims4(self.value(w).shape()).ok_or_else(|| Error::shape("conv2d weight", "(O,C,kh,kw)", self.value(w).shape()))?;
        if wc != c {
            return Err(Error::shape("conv2d channels", wc, c));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d bias", [o], self.value(b).shape()));
            }
        }
        if h + 2 * geom.padding < kh || wd + 2 * geom.padding < kw || geom.stride == 0 {
            return Err(Error::shape("conv2d geometry", (kh, kw), (h, wd)));
        }
        let ho = (h + 2 * geom.padding - kh) / geom.stride + 1;
        let wo = (wd + 2 * geom.padding - kw) / geom.stride + 1;
        let k = c * kh * kw;
        let p = ho * wo;
        let keep_cols = self.needs(w);
        // Columns of all images side by side: (K, B*P), one GEMM per layer.
        let bp = bsz * p;
        let mut cols = vec![T::zero(); k * bp];
        let mut out = vec![T::zero(); bsz * o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..bsz {
                im2col(
                    &xv[n * c * h * wd..(n + 1) * c * h * wd],
                    (c, h, wd),
                    (kh, kw),
                    geom,
                    (ho, wo),
                    &mut cols[n * p..],
                    bp,
                );
            }
            let mut wide = vec![T::zero(); o * bp];
            T::gemm(o, k, bp, T::one(), wv, (k as isize, 1), &cols, (bp as isize, 1), T::zero(), &mut wide, (bp as isize, 1));
            let bias = b.map(|b| self.value(b).data());
            for oc in 0..o {
                let add = bias.map_or(T::zero(), |bv| bv[oc]);
                for n in 0..bsz {
                    let src = &wide[oc * bp + n * p..oc * bp + (n + 1) * p];
                    let dst = &mut out[(n * o + oc) * p..(n * o + oc + 1) * p];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + add;
                    }
                }
            }
        }
        let cols_all = keep_cols.then_some(cols);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[bsz, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_hw: (ho, wo),
                cols: cols_all,
            },
            needs,
        ))
    }

    /// Affine map `x W^T + b`. `x`: `(B, I)`, `w`: `(O, I)`, `b`: `(O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bsz, i, o) = match (xs.as_slice(), ws.as_slice()) {
            ([bsz, i], [o, wi]) if i == wi => (*bsz, *i, *o),
            _ => return Err(Error::shape("linear", ws, xs)),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("linear bias", [o], self.value(b).shape()));
            }
        }
        let mut out = vec![T::zero(); bsz * o];
        if let Some(b) = b {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            bsz,
            i,
            o,
            T::one(),
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            beta,
            &mut out,
            (o as isize, 1),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&[bsz, o], out)?, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|p| p * s);
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, s), needs)
    }

    /// Per-channel constant affine map `a[c] * x + b[c]` on `(B, C, ...)`.
    pub fn channel_affine(&mut self, x: Var, a: &[T], b: &[T]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (_, c, s) = channel_layout(&shape).ok_or_else(|| Error::shape("channel_affine", "(B,C,...)", &shape))?;
        if a.len() != c || b.len() != c {
            return Err(Error::shape("channel_affine coefficients", c, a.len()));
        }
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(s).enumerate() {
            let ch = i % c;
            for e in chunk {
                *e = a[ch] * *e + b[ch];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(v, Op::ChannelAffine { x, a: a.to_vec() }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.max(T::zero()));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.tanh());
        let needs = self.needs(x);
        self.push(v, Op::Tanh(x), needs)
    }

    /// Nearest-neighbour 2x spatial upsampling of `(B, C, H, W)`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) =
            dims4(self.value(x).shape()).ok_or_else(|| Error::shape("upsample2x", "(B,C,H,W)", self.value(x).shape()))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    d[y * 2 * w + xo] = s[(y / 2) * w + xo / 2];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[b, c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), needs))
    }

    /// Mean over spatial positions: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) =
            dims4(self.value(x).shape()).ok_or_else(|| Error::shape("global_avg_pool", "(B,C,H,W)", self.value(x).shape()))?;
        let hw = T::lit((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[b, c], out)?, Op::GlobalAvgPool(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(v, Op::Sum(x), needs)
    }

    /// Batch normalisation over `(B, C, ...)` with per-channel affine
    /// parameters.
    ///
    /// With `rows = None`, `gamma`/`beta` have shape `(C)`. With
    /// `rows = Some(labels)` they have shape `(K, C)` and sample `n` uses row
    /// `labels[n]` (conditional batch normalisation).
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rows: Option<&[usize]>,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = channel_layout(&shape).ok_or_else(|| Error::shape("norm", "(B,C,...)", &shape))?;
        let gshape = self.value(gamma).shape().to_vec();
        let table_rows = match rows {
            None => {
                if gshape != [c] {
                    return Err(Error::shape("norm gamma", [c], gshape));
                }
                1
            }
            Some(labels) => {
                if labels.len() != b {
                    return Err(Error::shape("norm labels", b, labels.len()));
                }
                match gshape.as_slice() {
                    [k, gc] if *gc == c => {
                        if let Some(&bad) = labels.iter().find(|&&l| l >= *k) {
                            return Err(Error::Contract(format!("label {bad} out of range [0, {k})")));
                        }
                        *k
                    }
                    _ => return Err(Error::shape("conditional norm gamma", ("K", c), gshape)),
                }
            }
        };
        if self.value(beta).shape() != gshape.as_slice() {
            return Err(Error::shape("norm beta", &gshape, self.value(beta).shape()));
        }
        let row_of: Vec<usize> = match rows {
            None => vec![0; b],
            Some(l) => l.to_vec(),
        };
        debug_assert!(row_of.iter().all(|&r| r < table_rows));

        let xv = self.value(x).data();
        let count = b * s;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (mean, var) = channel_moments_of(xv, b, c, s);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("norm running stats", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..b {
            let r = row_of[n];
            for ch in 0..c {
                let base = (n * c + ch) * s;
                let g = gv[r * c + ch];
                let bb = bv[r * c + ch];
                for i in base..base + s {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g * h + bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let moments = batch_stats.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let var_out = self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                rows: row_of,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((var_out, moments))
    }

    /// Affine fake quantisation with a range-gated straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, p: &QuantParams<T>) -> Var {
        let v = self.value(x).map(|e| p.fake_quant_value(e));
        let needs = self.needs(x);
        self.push(
            v,
            Op::FakeQuant {
                x,
                ranges: vec![(p.observed_min, p.observed_max)],
            },
            needs,
        )
    }

    /// Fake quantisation with separate parameters for each slice along
    /// axis 0 (output channels of a weight tensor).
    pub fn fake_quant_per_channel(&mut self, x: Var, ps: &[QuantParams<T>]) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        if shape.first() != Some(&ps.len()) {
            return Err(Error::shape("fake_quant_per_channel", &format!("({}, ...)", ps.len()), &shape));
        }
        let per = xt.numel() / ps.len().max(1);
        let data: Vec<T> = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| ps[i / per].fake_quant_value(e))
            .collect();
        let needs = self.needs(x);
        let ranges = ps.iter().map(|p| (p.observed_min, p.observed_max)).collect();
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::FakeQuant { x, ranges }, needs))
    }

    /// Per-channel mean and biased variance over batch and spatial axes;
    /// output shape `(2, C)` with means in row 0 and variances in row 1.
    pub fn channel_moments(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (b, c, s) = channel_layout(&shape).ok_or_else(|| Error::shape("channel_moments", "(B,C,...)", &shape))?;
        let (mean, var) = channel_moments_of(self.value(x).data(), b, c, s);
        let mut out = mean;
        out.extend(var);
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[2, c], out)?, Op::ChannelMoments(x), needs))
    }

    /// Sum over channels of the Gaussian KL divergence between the moments in
    /// `stats` (as produced by [`Graph::channel_moments`]) and a reference.
    pub fn gaussian_kl_sum(&mut self, stats: Var, ref_mean: &[T], ref_var: &[T], eps: T) -> Result<Var> {
        let shape = self.value(stats).shape().to_vec();
        let c = match shape.as_slice() {
            [2, c] if *c == ref_mean.len() && *c == ref_var.len() => *c,
            _ => return Err(Error::shape("gaussian_kl_sum", [2, ref_mean.len()], shape)),
        };
        let sv = self.value(stats).data();
        let mut total = T::zero();
        for ch in 0..c {
            total += crate::bn_stats::gaussian_kl(sv[ch], sv[c + ch], ref_mean[ch], ref_var[ch], eps)?;
        }
        let needs = self.needs(stats);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianKlSum {
                stats,
                ref_mean: ref_mean.to_vec(),
                ref_var: ref_var.to_vec(),
                eps,
            },
            needs,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn label_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let (b, k) = match shape.as_slice() {
            [b, k] if *b == labels.len() => (*b, *k),
            _ => return Err(Error::shape("label_cross_entropy", ("B", labels.len()), shape)),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range [0, {k})")));
        }
        let lv = self.value(logits);
        if !lv.all_finite() {
            return Err(Error::Numeric("non-finite logits in cross-entropy".into()));
        }
        let mut loss = T::zero();
        let mut probs = lv.data().to_vec();
        for (n, row) in lv.data().chunks(k).enumerate() {
            loss += log_sum_exp(row) - row[labels[n]];
            softmax_in_place(&mut probs[n * k..(n + 1) * k]);
        }
        loss /= T::lit(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LabelCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean over the batch of `H(softmax(target/T), softmax(logits/T))`.
    /// The target distribution is a constant: no gradient reaches `target`.
    pub fn soft_cross_entropy(&mut self, target: Var, logits: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
        }
        let ts = self.value(target).shape().to_vec();
        let ls = self.value(logits).shape().to_vec();
        if ts != ls || ts.len() != 2 {
            return Err(Error::shape("soft_cross_entropy", ts, ls));
        }
        let (b, k) = (ls[0], ls[1]);
        let tv = self.value(target);
        let sv = self.value(logits);
        if !tv.all_finite() || !sv.all_finite() {
            return Err(Error::Numeric("non-finite logits in distillation loss".into()));
        }
        let mut target_probs: Vec<T> = tv.data().iter().map(|&v| v / temperature).collect();
        let scaled: Vec<T> = sv.data().iter().map(|&v| v / temperature).collect();
        let mut probs = scaled.clone();
        let mut loss = T::zero();
        for n in 0..b {
            let row = &scaled[n * k..(n + 1) * k];
            let lse = log_sum_exp(row);
            let p = &mut target_probs[n * k..(n + 1) * k];
            softmax_in_place(p);
            for j in 0..k {
                loss -= p[j] * (row[j] - lse);
            }
            softmax_in_place(&mut probs[n * k..(n + 1) * k]);
        }
        loss /= T::lit(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target_probs,
                probs,
                temperature,
            },
            needs,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "scalar loss", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_hw,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.value(*w).shape();
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let k = c * kh * kw;
                let p = out_hw.0 * out_hw.1;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for n in 0..bsz {
                            for (oc, chunk) in dy[n * o * p..(n + 1) * o * p].chunks(p).enumerate() {
                                db[oc] += chunk.iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
                    }
                }
                let bp = bsz * p;
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                // dy rearranged to (O, B*P) to match the column layout.
                let mut wide = Vec::new();
                if need_w || need_x {
                    wide = vec![T::zero(); o * bp];
                    for n in 0..bsz {
                        for oc in 0..o {
                            wide[oc * bp + n * p..oc * bp + (n + 1) * p]
                                .copy_from_slice(&dy[(n * o + oc) * p..(n * o + oc + 1) * p]);
                        }
                    }
                }
                if need_w {
                    let cols = cols.as_ref().expect("im2col buffer kept when weight needs grad");
                    let mut dw = vec![T::zero(); o * k];
                    T::gemm(o, bp, k, T::one(), &wide, (bp as isize, 1), cols, (1, bp as isize), T::zero(), &mut dw, (k as isize, 1));
                    self.accumulate(grads, *w, Tensor::from_vec(ws, dw)?);
                }
                if need_x {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); k * bp];
                    T::gemm(k, o, bp, T::one(), wv, (1, k as isize), &wide, (bp as isize, 1), T::zero(), &mut dcols, (bp as isize, 1));
                    let mut dx = vec![T::zero(); bsz * c * h * wd];
                    for n in 0..bsz {
                        col2im(
                            &dcols[n * p..],
                            (c, h, wd),
                            (kh, kw),
                            *geom,
                            *out_hw,
                            &mut dx[n * c * h * wd..(n + 1) * c * h * wd],
                            bp,
                        );
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (bsz, i) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[0];
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in dy.chunks(o) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        bsz,
                        i,
                        T::one(),
                        dy,
                        (1, o as isize),
                        self.value(*x).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dw,
                        (i as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, i], dw)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); bsz * i];
                    T::gemm(
                        bsz,
                        o,
                        i,
                        T::one(),
                        dy,
                        (o as isize, 1),
                        self.value(*w).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dx,
                        (i as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[bsz, i], dx)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, gy.map(|g| g * s));
            }
            Op::ChannelAffine { x, a } => {
                let (_, c, s) = channel_layout(gy.shape()).expect("checked in forward");
                let mut dx = gy.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(s).enumerate() {
                    let f = a[i % c];
                    for e in chunk {
                        *e *= f;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = gy.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let xs = self.value(*x).shape();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let s = &dy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            d[(y / 2) * w + xo / 2] += s[y * 2 * w + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::lit(hw as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &g in dy {
                    dx.extend(std::iter::repeat(g * inv).take(hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?);
            }
            Op::Reshape(x) => {
                let dx = gy.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let g = gy.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                rows,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (b, c, s) = channel_layout(shape).expect("checked in forward");
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); gv.len()];
                    let mut db = vec![T::zero(); gv.len()];
                    for n in 0..b {
                        let r = rows[n];
                        for ch in 0..c {
                            let base = (n * c + ch) * s;
                            let mut sg = T::zero();
                            let mut sb = T::zero();
                            for i in base..base + s {
                                sg += dy[i] * xhat[i];
                                sb += dy[i];
                            }
                            dg[r * c + ch] += sg;
                            db[r * c + ch] += sb;
                        }
                    }
                    let gshape = self.value(*gamma).shape();
                    self.accumulate(grads, *gamma, Tensor::from_vec(gshape, dg)?);
                    self.accumulate(grads, *beta, Tensor::from_vec(gshape, db)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    if *batch_stats {
                        let m = T::lit((b * s) as f64);
                        let mut sum_g = vec![T::zero(); c];
                        let mut sum_gx = vec![T::zero(); c];
                        for n in 0..b {
                            let r = rows[n];
                            for ch in 0..c {
                                let gam = gv[r * c + ch];
                                let base = (n * c + ch) * s;
                                for i in base..base + s {
                                    let g = dy[i] * gam;
                                    sum_g[ch] += g;
                                    sum_gx[ch] += g * xhat[i];
                                }
                            }
                        }
                        for n in 0..b {
                            let r = rows[n];
                            for ch in 0..c {
                                let gam = gv[r * c + ch];
                                let base = (n * c + ch) * s;
                                let f = inv_std[ch] / m;
                                for i in base..base + s {
                                    dx[i] = f * (m * dy[i] * gam - sum_g[ch] - xhat[i] * sum_gx[ch]);
                                }
                            }
                        }
                    } else {
                        for n in 0..b {
                            let r = rows[n];
                            for ch in 0..c {
                                let f = gv[r * c + ch] * inv_std[ch];
                                let base = (n * c + ch) * s;
                                for i in base..base + s {
                                    dx[i] = dy[i] * f;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(shape, dx)?);
                }
            }
            Op::FakeQuant { x, ranges } => {
                let xv = self.value(*x);
                let per = xv.numel() / ranges.len();
                let dx: Vec<T> = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .enumerate()
                    .map(|(i, (&g, &v))| {
                        let (lo, hi) = ranges[i / per];
                        if v >= lo && v <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?);
            }
            Op::ChannelMoments(x) => {
                let shape = self.value(*x).shape();
                let (b, c, s) = channel_layout(shape).expect("checked in forward");
                let xv = self.value(*x).data();
                let mv = node.value.data();
                let m = T::lit((b * s) as f64);
                let two = T::lit(2.0);
                let mut dx = vec![T::zero(); xv.len()];
                for n in 0..b {
                    for ch in 0..c {
                        let dmean = dy[ch] / m;
                        let dvar = dy[c + ch] * two / m;
                        let mu = mv[ch];
                        let base = (n * c + ch) * s;
                        for i in base..base + s {
                            dx[i] = dmean + dvar * (xv[i] - mu);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(shape, dx)?);
            }
            Op::GaussianKlSum {
                stats,
                ref_mean,
                ref_var,
                eps,
            } => {
                let g = gy.item();
                let sv = self.value(*stats).data();
                let c = ref_mean.len();
                let mut ds = vec![T::zero(); 2 * c];
                for ch in 0..c {
                    let (dm, dv) = crate::bn_stats::gaussian_kl_grad(sv[ch], sv[c + ch], ref_mean[ch], ref_var[ch], *eps);
                    ds[ch] = g * dm;
                    ds[c + ch] = g * dv;
                }
                self.accumulate(grads, *stats, Tensor::from_vec(&[2, c], ds)?);
            }
            Op::LabelCrossEntropy { logits, labels, probs } => {
                let g = gy.item();
                let b = labels.len();
                let k = probs.len() / b.max(1);
                let inv_b = g / T::lit(b as f64);
                let mut dl = probs.clone();
                for (n, &y) in labels.iter().enumerate() {
                    dl[n * k + y] -= T::one();
                }
                for v in dl.iter_mut() {
                    *v *= inv_b;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[b, k], dl)?);
            }
            Op::SoftCrossEntropy {
                logits,
                target_probs,
                probs,
                temperature,
            } => {
                let g = gy.item();
                let shape = self.value(*logits).shape();
                let b = shape[0];
                let f = g / (T::lit(b as f64) * *temperature);
                let dl: Vec<T> = probs.iter().zip(target_probs).map(|(&q, &p)| (q - p) * f).collect();
                self.accumulate(grads, *logits, Tensor::from_vec(shape, dl)?);
            }
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance of a `(B, C, S)`-laid-out buffer.
pub(crate) fn channel_moments_of<T: Scalar>(x: &[T], b: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m = T::lit((b * s) as f64);
    let mut mean = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            mean[ch] += x[(n * c + ch) * s..(n * c + ch + 1) * s].iter().copied().sum::<T>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            var[ch] += x[(n * c + ch) * s..(n * c + ch + 1) * s]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Projects `y` onto a fixed random direction so any node becomes a
    /// scalar with a non-trivial upstream gradient.
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let n = g.value(y).numel();
        let flat = g.reshape(y, &[1, n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(Tensor::randn(&[1, n], 1.0, &mut rng));
        let out = g.linear(flat, w, None).unwrap();
        g.sum(out)
    }

    /// Compares analytic gradients of every input with central differences.
    fn check(inputs: Vec<Tensor<f64>>, tol: f64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ins: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let y = build(&mut g, &vars);
            let l = project(&mut g, y, 99);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &vars);
        let l = project(&mut g, y, 99);
        let grads = g.backward(l).unwrap();
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                    "input {i} element {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv2d_gradients() {
        for stride in [1, 2] {
            check(vec![rnd(&[2, 2, 5, 5], 1), rnd(&[3, 2, 3, 3], 2), rnd(&[3], 3)], 1e-6, |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), ConvGeom { stride, padding: 1 }).unwrap()
            });
        }
    }

    #[test]
    fn linear_gradients() {
        check(vec![rnd(&[3, 4], 4), rnd(&[2, 4], 5), rnd(&[2], 6)], 1e-6, |g, v| {
            g.linear(v[0], v[1], Some(v[2])).unwrap()
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(vec![rnd(&[2, 3, 2, 2], 7), rnd(&[2, 3, 2, 2], 8)], 1e-6, |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let t = g.tanh(s);
            let r = g.relu(v[0]);
            let u = g.upsample2x(r).unwrap();
            let p = g.global_avg_pool(u).unwrap();
            let a = g.channel_affine(t, &[0.5, -2.0, 1.5], &[0.1, 0.2, 0.3]).unwrap();
            let a = g.global_avg_pool(a).unwrap();
            let sc = g.scale(p, 3.0);
            g.add(a, sc).unwrap()
        });
    }

    #[test]
    fn batch_norm_gradients() {
        check(vec![rnd(&[4, 3, 2, 2], 9), rnd(&[3], 10), rnd(&[3], 11)], 1e-5, |g, v| {
            g.norm(v[0], v[1], v[2], None, NormStats::Batch, 1e-5).unwrap().0
        });
        let mean = [0.1, -0.2, 0.3];
        let var = [1.5, 0.5, 2.0];
        check(vec![rnd(&[2, 3, 2, 2], 12), rnd(&[3], 13), rnd(&[3], 14)], 1e-6, |g, v| {
            g.norm(v[0], v[1], v[2], None, NormStats::Fixed { mean: &mean, var: &var }, 1e-5)
                .unwrap()
                .0
        });
    }

    #[test]
    fn conditional_norm_gradients() {
        let labels = [2, 0, 2, 1];
        check(vec![rnd(&[4, 2, 3, 3], 15), rnd(&[3, 2], 16), rnd(&[3, 2], 17)], 1e-5, |g, v| {
            g.norm(v[0], v[1], v[2], Some(&labels), NormStats::Batch, 1e-5).unwrap().0
        });
    }

    #[test]
    fn moments_and_kl_gradients() {
        check(vec![rnd(&[3, 2, 2, 2], 18)], 1e-6, |g, v| {
            let m = g.channel_moments(v[0]).unwrap();
            g.gaussian_kl_sum(m, &[0.2, -0.1], &[0.7, 1.3], 1e-6).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        check(vec![rnd(&[3, 4], 19)], 1e-6, |g, v| g.label_cross_entropy(v[0], &[0, 3, 1]).unwrap());
        let target = rnd(&[3, 4], 20);
        check(vec![rnd(&[3, 4], 21)], 1e-6, |g, v| {
            let t = g.constant(target.clone());
            g.soft_cross_entropy(t, v[0], 2.5).unwrap()
        });
    }

    #[test]
    fn soft_target_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        let t = g.leaf(rnd(&[2, 3], 22), true);
        let s = g.leaf(rnd(&[2, 3], 23), true);
        let l = g.soft_cross_entropy(t, s, 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(t).map_or(true, |x| x.data().iter().all(|&v| v == 0.0)));
        assert!(grads.get(s).is_some());
    }

    #[test]
    fn fake_quant_straight_through() {
        let p = QuantParams::from_range(-1.0, 1.0, 8).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.3, 1.5]).unwrap(), true);
        let y = g.fake_quant(x, &p);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn per_channel_fake_quant_uses_each_rows_range() {
        let ps = [
            QuantParams::from_range(-1.0, 1.0, 8).unwrap(),
            QuantParams::from_range(-0.1, 0.1, 8).unwrap(),
        ];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![0.5, 0.05, 0.5, 0.05]).unwrap(), true);
        let y = g.fake_quant_per_channel(x, &ps).unwrap();
        let want = [ps[0].fake_quant_value(0.5), ps[0].fake_quant_value(0.05), ps[1].fake_quant_value(0.5), ps[1].fake_quant_value(0.05)];
        assert_eq!(g.value(y).data(), &want);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
        assert!(g.fake_quant_per_channel(x, &ps[..1]).is_err());
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rnd(&[2, 3], 24));
        let w = g.leaf(rnd(&[1, 3], 25), true);
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rnd(&[2], 26), true);
        assert!(g.backward(x).is_err());
    }
}
