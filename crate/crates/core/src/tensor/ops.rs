use rand::Rng;

use super::kernels::{gemm, gemm_tn, transpose};
use super::{shape_err, Tensor, IGNORE};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

fn map_vec<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    xs.iter().map(|&x| f(x)).collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    fn check_same(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn check_row(&self, v: &Tensor<T>, op: &'static str) -> Result<usize> {
        let d = self.last_dim();
        if v.ndim() != 1 || v.numel() != d {
            return Err(shape_err(op, self.shape(), v.shape()));
        }
        Ok(d)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(map_vec(c.grad, |g| -g))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|c| {
                let (a, b) = (c.parents[0].data(), c.parents[1].data());
                let ga = c.parents[0]
                    .requires_grad()
                    .then(|| c.grad.iter().zip(b).map(|(&g, &y)| g * y).collect());
                let gb = c.parents[1]
                    .requires_grad()
                    .then(|| c.grad.iter().zip(a).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// `x[..., d] + v[d]`, broadcasting over all leading axes.
    pub fn add_row(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check_row(v, "add_row")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)) {
            row.iter_mut().zip(v.data()).for_each(|(x, &b)| *x = *x + b);
        }
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |c| {
                let mut gv = vec![T::zero(); d];
                for row in c.grad.chunks_exact(d.max(1)) {
                    gv.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                }
                vec![Some(c.grad.to_vec()), Some(gv)]
            }),
        ))
    }

    /// `x[..., d] ⊙ v[d]`, broadcasting over all leading axes.
    pub fn mul_row(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check_row(v, "mul_row")?;
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(d.max(1)) {
            row.iter_mut().zip(v.data()).for_each(|(x, &b)| *x = *x * b);
        }
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |c| {
                let (x, v) = (c.parents[0].data(), c.parents[1].data());
                let gx = c.parents[0].requires_grad().then(|| {
                    let mut gx = c.grad.to_vec();
                    for row in gx.chunks_exact_mut(d.max(1)) {
                        row.iter_mut().zip(v).for_each(|(g, &b)| *g = *g * b);
                    }
                    gx
                });
                let gv = c.parents[1].requires_grad().then(|| {
                    let mut gv = vec![T::zero(); d];
                    for (grow, xrow) in c.grad.chunks_exact(d.max(1)).zip(x.chunks_exact(d.max(1)))
                    {
                        for ((a, &g), &xv) in gv.iter_mut().zip(grow).zip(xrow) {
                            *a = *a + g * xv;
                        }
                    }
                    gv
                });
                vec![gx, gv]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), |x| x * s),
            vec![self.clone()],
            Box::new(move |c| vec![Some(map_vec(c.grad, |g| g * s))]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), |x| x.exp()),
            vec![self.clone()],
            Box::new(|c| {
                vec![Some(
                    c.grad.iter().zip(c.out).map(|(&g, &y)| g * y).collect(),
                )]
            }),
        )
    }

    pub fn cos(&self) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), |x| x.cos()),
            vec![self.clone()],
            Box::new(|c| {
                let x = c.parents[0].data();
                vec![Some(
                    c.grad.iter().zip(x).map(|(&g, &x)| -g * x.sin()).collect(),
                )]
            }),
        )
    }

    pub fn sin(&self) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), |x| x.sin()),
            vec![self.clone()],
            Box::new(|c| {
                let x = c.parents[0].data();
                vec![Some(
                    c.grad.iter().zip(x).map(|(&g, &x)| g * x.cos()).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), sigmoid),
            vec![self.clone()],
            Box::new(|c| {
                let g = c
                    .grad
                    .iter()
                    .zip(c.out)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// `x · sigmoid(x)`
    pub fn silu(&self) -> Tensor<T> {
        Tensor::record(
            self.shape().to_vec(),
            map_vec(self.data(), |x| x * sigmoid(x)),
            vec![self.clone()],
            Box::new(|c| {
                let x = c.parents[0].data();
                let g = c
                    .grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (T::one() - s))
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let total = self.data().iter().copied().sum();
        Tensor::record(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |c| vec![Some(vec![c.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel().max(1) as f64);
        self.sum().scale(T::one() / n)
    }

    /// `a[..., q] · b[q, r] → [..., r]`
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let q = self.last_dim();
        if self.ndim() < 1 || b.ndim() != 2 || b.shape()[0] != q {
            return Err(shape_err("matmul", self.shape(), b.shape()));
        }
        let r = b.shape()[1];
        let n = self.numel() / q.max(1);
        let mut out = vec![T::zero(); n * r];
        gemm(self.data(), b.data(), &mut out, n, q, r);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = r;
        Ok(Tensor::record(
            shape,
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |c| {
                let (a, b) = (c.parents[0].data(), c.parents[1].data());
                let ga = c.parents[0].requires_grad().then(|| {
                    let bt = transpose(b, q, r);
                    let mut ga = vec![T::zero(); n * q];
                    gemm(c.grad, &bt, &mut ga, n, r, q);
                    ga
                });
                let gb = c.parents[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); q * r];
                    gemm_tn(a, c.grad, &mut gb, n, q, r);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `a[..., q] · b[r, q]ᵀ → [..., r]`
    pub fn matmul_t(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let q = self.last_dim();
        if self.ndim() < 1 || b.ndim() != 2 || b.shape()[1] != q {
            return Err(shape_err("matmul_t", self.shape(), b.shape()));
        }
        let r = b.shape()[0];
        let n = self.numel() / q.max(1);
        let bt = transpose(b.data(), r, q);
        let mut out = vec![T::zero(); n * r];
        gemm(self.data(), &bt, &mut out, n, q, r);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = r;
        Ok(Tensor::record(
            shape,
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |c| {
                let (a, b) = (c.parents[0].data(), c.parents[1].data());
                let ga = c.parents[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); n * q];
                    gemm(c.grad, b, &mut ga, n, r, q);
                    ga
                });
                let gb = c.parents[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); r * q];
                    gemm_tn(c.grad, a, &mut gb, n, r, q);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Layer normalization over the last axis.
    ///
    /// With `segments` (strictly increasing chunk ends, last one equal to the
    /// width) each chunk `[b_{j-1}, b_j)` is normalized with its own mean
    /// and variance.
    pub fn layer_norm(
        &self,
        alpha: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
        segments: Option<&[usize]>,
    ) -> Result<Tensor<T>> {
        let d = self.check_row(alpha, "layer_norm")?;
        self.check_row(beta, "layer_norm")?;
        if !(eps > T::zero()) {
            return Err(Error::Param(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let bounds: Vec<usize> = match segments {
            None => vec![d],
            Some(s) => {
                let ok = !s.is_empty()
                    && s.windows(2).all(|w| w[0] < w[1])
                    && s[0] > 0
                    && *s.last().unwrap() == d;
                if !ok {
                    return Err(Error::Param(format!(
                        "layer_norm segments {s:?} must be strictly increasing and end at {d}"
                    )));
                }
                s.to_vec()
            }
        };
        let rows = self.numel() / d.max(1);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows * bounds.len()];
        let mut out = vec![T::zero(); self.numel()];
        let (a, b) = (alpha.data(), beta.data());
        for (r, (xrow, hrow)) in self
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .enumerate()
        {
            let mut start = 0;
            for (s, &end) in bounds.iter().enumerate() {
                let seg = &xrow[start..end];
                let n = T::of((end - start) as f64);
                let mu = seg.iter().copied().sum::<T>() / n;
                let var = seg.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[r * bounds.len() + s] = inv;
                for (h, &x) in hrow[start..end].iter_mut().zip(seg) {
                    *h = (x - mu) * inv;
                }
                start = end;
            }
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = a[j] * hrow[j] + b[j];
            }
        }
        Ok(Tensor::record(
            self.shape().to_vec(),
            out,
            vec![self.clone(), alpha.clone(), beta.clone()],
            Box::new(move |c| {
                let alpha = c.parents[1].data();
                let mut gx = vec![T::zero(); xhat.len()];
                let mut galpha = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let g = &c.grad[r * d..(r + 1) * d];
                    let h = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        galpha[j] = galpha[j] + g[j] * h[j];
                        gbeta[j] = gbeta[j] + g[j];
                    }
                    let mut start = 0;
                    for (s, &end) in bounds.iter().enumerate() {
                        let inv = inv_std[r * bounds.len() + s];
                        let n = T::of((end - start) as f64);
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in start..end {
                            let dh = g[j] * alpha[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * h[j];
                        }
                        for j in start..end {
                            let dh = g[j] * alpha[j];
                            gx[r * d + j] = inv / n * (n * dh - sum_dh - h[j] * sum_dh_h);
                        }
                        start = end;
                    }
                }
                vec![Some(gx), Some(galpha), Some(gbeta)]
            }),
        ))
    }

    /// Inverted dropout. The keep mask comes from the stream `(seed, site, step)`.
    pub fn dropout(
        &self,
        rate: f64,
        training: bool,
        seed: u64,
        site: u64,
        step: u64,
    ) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = rng::stream(seed, site, step);
        let keep_scale = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::from_vec(self.shape(), mask)?;
        self.mul(&mask)
    }

    /// Mean over labelled rows of `-log softmax(logits)[label]`.
    ///
    /// `self` is `[N, V]` (or any shape whose leading axes flatten to `N`);
    /// rows labelled [`IGNORE`] do not contribute.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let v = self.last_dim();
        let n = self.numel() / v.max(1);
        if labels.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                self.shape(),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l >= v) {
            return Err(Error::Index {
                index: bad,
                extent: v,
            });
        }
        let counted = labels.iter().filter(|&&l| l != IGNORE).count();
        if counted == 0 {
            return Err(Error::Contract(
                "cross-entropy over zero labelled rows".into(),
            ));
        }
        let mut probs = vec![T::zero(); self.numel()];
        let mut total = T::zero();
        for (r, (row, prow)) in self
            .data()
            .chunks_exact(v)
            .zip(probs.chunks_exact_mut(v))
            .enumerate()
        {
            if labels[r] == IGNORE {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                z = z + *p;
            }
            prow.iter_mut().for_each(|p| *p = *p / z);
            total = total + (z.ln() + max - row[labels[r]]);
        }
        let inv_n = T::one() / T::of(counted as f64);
        let labels = labels.to_vec();
        Ok(Tensor::record(
            vec![],
            vec![total * inv_n],
            vec![self.clone()],
            Box::new(move |c| {
                let g = c.grad[0] * inv_n;
                let mut gx = vec![T::zero(); probs.len()];
                for (r, &l) in labels.iter().enumerate() {
                    if l == IGNORE {
                        continue;
                    }
                    let row = &mut gx[r * v..(r + 1) * v];
                    for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *o = p * g;
                    }
                    row[l] = row[l] - g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::record(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|c| vec![Some(c.grad.to_vec())]),
        ))
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Param(format!(
                "narrow axis {axis} range {start}..{end} invalid for shape {shape:?}"
            )));
        }
        if start == 0 && end == shape[axis] {
            return Ok(self.clone());
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (ext, len) = (shape[axis], end - start);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&self.data()[base + start * inner..base + end * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let numel = self.numel();
        Ok(Tensor::record(
            oshape,
            out,
            vec![self.clone()],
            Box::new(move |c| {
                let mut g = vec![T::zero(); numel];
                for o in 0..outer {
                    let base = o * ext * inner;
                    g[base + start * inner..base + end * inner]
                        .copy_from_slice(&c.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        self.narrow(self.ndim().saturating_sub(1), start, end)
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let lead = &first.shape()[..first.ndim() - 1];
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape()[..p.ndim() - 1] != lead {
                return Err(shape_err("concat_last", first.shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::record(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |c| {
                let mut grads: Vec<Vec<T>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(rows * w))
                    .collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&c.grad[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Row lookup in a `[V, D]` table; [`IGNORE`] ids yield zero rows.
    /// Gradients scatter-add back into the table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(shape_err("gather_rows", self.shape(), &[ids.len()]));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            if id == IGNORE {
                continue;
            }
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    extent: v,
                });
            }
            out[i * d..(i + 1) * d].copy_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::record(
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |c| {
                let mut g = vec![T::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    if id == IGNORE {
                        continue;
                    }
                    let dst = &mut g[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&c.grad[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Zeroes whole rows (all leading positions) where `keep` is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Result<Tensor<T>> {
        let d = self.last_dim();
        if keep.len() * d != self.numel() {
            return Err(shape_err("mask_rows", self.shape(), &[keep.len()]));
        }
        let mut out = self.data().to_vec();
        for (row, &k) in out.chunks_exact_mut(d.max(1)).zip(keep) {
            if !k {
                row.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let keep = keep.to_vec();
        Ok(Tensor::record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |c| {
                let mut g = c.grad.to_vec();
                for (row, &k) in g.chunks_exact_mut(d.max(1)).zip(&keep) {
                    if !k {
                        row.iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Elementwise complex product of `(ar + i·ai)` and `(br + i·bi)`.
pub fn complex_mul<T: Scalar>(
    ar: &Tensor<T>,
    ai: &Tensor<T>,
    br: &Tensor<T>,
    bi: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let re = ar.mul(br)?.sub(&ai.mul(bi)?)?;
    let im = ar.mul(bi)?.add(&ai.mul(br)?)?;
    Ok((re, im))
}
