//! Linear recurrent unit with a diagonal complex state matrix.
//!
//! ```text
//! λ   = exp(−exp(ν) + iθ)
//! h_k = λ ⊙ h_{k−1} + γ ⊙ (x_k B)       (complex, h_0 = 0)
//! y_k = Re(h_k) C + x_k D
//! ```
//!
//! `|λ| = exp(−exp(ν))` lies in (0, 1) for every real `ν`, so the
//! recurrence is stable for any parameter value gradient descent reaches.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matryoshka::{LayerCase, MaskedLinear, SizeLadder};
use crate::rng;
use crate::scalar::Scalar;
use crate::scan;
use crate::tensor::Tensor;

/// Which evaluation path the recurrence uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    /// Step-by-step recurrence, O(1) state per step.
    Sequential,
    /// Associative tree scan over the sequence axis.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LruOptions {
    /// Scale the driven input by `γ = √(1 − |λ|²)` (learned, initialized so).
    pub gamma_norm: bool,
    /// Use the phase `θ`; when false `λ` is real.
    pub complex: bool,
}

impl Default for LruOptions {
    fn default() -> Self {
        LruOptions {
            gamma_norm: true,
            complex: true,
        }
    }
}

/// Effective (already masked) weights of one LRU layer.
#[derive(Debug, Clone)]
pub struct LruWeights<T: Scalar> {
    pub nu: Tensor<T>,
    pub theta: Tensor<T>,
    pub gamma: Tensor<T>,
    pub b_re: Tensor<T>,
    pub b_im: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
    pub complex: bool,
}

/// LRU parameters with their nested-size masks.
#[derive(Debug, Clone)]
pub struct LruParams<T: Scalar> {
    pub nu: Tensor<T>,
    pub theta: Tensor<T>,
    pub gamma: Tensor<T>,
    pub b_re: MaskedLinear<T>,
    pub b_im: MaskedLinear<T>,
    pub c: MaskedLinear<T>,
    pub d: MaskedLinear<T>,
    pub options: LruOptions,
}

impl<T: Scalar> LruParams<T> {
    pub fn width(&self) -> usize {
        self.nu.numel()
    }

    pub fn weights(&self) -> Result<LruWeights<T>> {
        Ok(LruWeights {
            nu: self.nu.clone(),
            theta: self.theta.clone(),
            gamma: self.gamma.clone(),
            b_re: self.b_re.apply()?,
            b_im: self.b_im.apply()?,
            c: self.c.apply()?,
            d: self.d.apply()?,
            complex: self.options.complex,
        })
    }

    /// `|λ_h|` for every channel.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.nu
            .data()
            .iter()
            .map(|&v| (-(v.as_f64().exp())).exp())
            .collect()
    }
}

/// Raw initial values for one LRU layer of width `h`.
#[derive(Debug, Clone)]
pub struct RingInit<T> {
    pub nu: Vec<T>,
    pub theta: Vec<T>,
    pub gamma: Vec<T>,
    pub b_re: Vec<T>,
    pub b_im: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Draws eigenvalues uniformly on the annulus `r_min ≤ |λ| ≤ r_max`
/// (`|λ|²` uniform), phases uniform on `[0, 2π)`, and variance-scaled
/// Gaussian `B`, `C`, `D`.
pub fn ring_values<T: Scalar>(
    h: usize,
    r_min: f64,
    r_max: f64,
    options: LruOptions,
    seed: u64,
    site: u64,
) -> Result<RingInit<T>> {
    if !(0.0 <= r_min && r_min < r_max && r_max <= 1.0) {
        return Err(Error::Param(format!(
            "ring radii must satisfy 0 <= r_min < r_max <= 1, got {r_min}, {r_max}"
        )));
    }
    if h == 0 {
        return Err(Error::Param("LRU width must be positive".into()));
    }
    let mut eig = rng::stream(seed, site, 0);
    let mut nu = Vec::with_capacity(h);
    let mut theta = Vec::with_capacity(h);
    let mut gamma = Vec::with_capacity(h);
    for _ in 0..h {
        let u: f64 = eig.random();
        let mag_sq = r_min * r_min + u * (r_max * r_max - r_min * r_min);
        let mag = mag_sq.sqrt().clamp(1e-12, 1.0 - 1e-12);
        nu.push(T::of((-mag.ln()).ln()));
        let phase = if options.complex {
            eig.random::<f64>() * 2.0 * PI
        } else {
            0.0
        };
        theta.push(T::of(phase));
        gamma.push(T::of(if options.gamma_norm {
            (1.0 - mag * mag).sqrt()
        } else {
            1.0
        }));
    }
    let normal = |step: u64, n: usize, std: f64| -> Vec<T> {
        let mut r = rng::stream(seed, site, step);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                T::of(z * std)
            })
            .collect()
    };
    let hf = h as f64;
    Ok(RingInit {
        nu,
        theta,
        gamma,
        b_re: normal(1, h * h, (1.0 / (2.0 * hf)).sqrt()),
        b_im: normal(2, h * h, (1.0 / (2.0 * hf)).sqrt()),
        c: normal(3, h * h, (1.0 / hf).sqrt()),
        d: normal(4, h * h, (1.0 / hf).sqrt()),
    })
}

/// Ring-initialized LRU with square masked maps for `ladder` (width = `ladder.max()`).
pub fn init_ring<T: Scalar>(
    ladder: &SizeLadder,
    r_min: f64,
    r_max: f64,
    options: LruOptions,
    seed: u64,
) -> Result<LruParams<T>> {
    let h = ladder.max();
    let v = ring_values::<T>(h, r_min, r_max, options, seed, rng::sites::INIT)?;
    let sq = |data: Vec<T>| -> Result<MaskedLinear<T>> {
        MaskedLinear::new(
            Tensor::param(&[h, h], data)?,
            None,
            LayerCase::Square,
            ladder,
        )
    };
    Ok(LruParams {
        nu: Tensor::param(&[h], v.nu)?,
        theta: Tensor::param(&[h], v.theta)?,
        gamma: Tensor::param(&[h], v.gamma)?,
        b_re: sq(v.b_re)?,
        b_im: sq(v.b_im)?,
        c: sq(v.c)?,
        d: sq(v.d)?,
        options,
    })
}

/// `h_k = λ ⊙ h_{k−1} + b_k` over `[B, L, H]` inputs as a differentiable op.
///
/// Returns `[2, B, L, H]`: index 0 holds `Re(h)`, index 1 holds `Im(h)`.
/// The backward pass runs the adjoint recurrence `a_k = g_k + conj(λ)·a_{k+1}`
/// through the same scan mode.
pub fn linear_recurrence<T: Scalar>(
    lam_re: &Tensor<T>,
    lam_im: &Tensor<T>,
    b_re: &Tensor<T>,
    b_im: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    if b_re.ndim() != 3 || b_re.shape() != b_im.shape() {
        return Err(Error::Shape {
            op: "linear_recurrence",
            left: b_re.shape().to_vec(),
            right: b_im.shape().to_vec(),
        });
    }
    let (bsz, len, h) = (b_re.shape()[0], b_re.shape()[1], b_re.shape()[2]);
    if lam_re.shape() != [h] || lam_im.shape() != [h] {
        return Err(Error::Shape {
            op: "linear_recurrence",
            left: lam_re.shape().to_vec(),
            right: vec![h],
        });
    }
    let parallel = mode == ScanMode::Parallel;
    let half = bsz * len * h;
    let mut out = vec![T::zero(); 2 * half];
    let idx = move |b: usize, k: usize, c: usize| (b * len + k) * h + c;
    let mut seq = Vec::with_capacity(len);
    for b in 0..bsz {
        for c in 0..h {
            seq.clear();
            seq.extend((0..len).map(|k| (b_re.data()[idx(b, k, c)], b_im.data()[idx(b, k, c)])));
            let hs = scan::recurrence((lam_re.data()[c], lam_im.data()[c]), &seq, parallel);
            for (k, (re, im)) in hs.into_iter().enumerate() {
                out[idx(b, k, c)] = re;
                out[half + idx(b, k, c)] = im;
            }
        }
    }
    Ok(Tensor::record(
        vec![2, bsz, len, h],
        out,
        vec![lam_re.clone(), lam_im.clone(), b_re.clone(), b_im.clone()],
        Box::new(move |ctx| {
            let (lr, li) = (ctx.parents[0].data(), ctx.parents[1].data());
            let (g, hv) = (ctx.grad, ctx.out);
            let mut gb = vec![T::zero(); 2 * half];
            let mut glr = vec![T::zero(); h];
            let mut gli = vec![T::zero(); h];
            let mut rev = Vec::with_capacity(len);
            for b in 0..bsz {
                for c in 0..h {
                    rev.clear();
                    rev.extend(
                        (0..len)
                            .rev()
                            .map(|k| (g[idx(b, k, c)], g[half + idx(b, k, c)])),
                    );
                    let adj = scan::recurrence((lr[c], -li[c]), &rev, parallel);
                    for (r, (ar, ai)) in adj.into_iter().enumerate() {
                        let k = len - 1 - r;
                        gb[idx(b, k, c)] = ar;
                        gb[half + idx(b, k, c)] = ai;
                        if k > 0 {
                            let (hr, hi) = (hv[idx(b, k - 1, c)], hv[half + idx(b, k - 1, c)]);
                            glr[c] = glr[c] + ar * hr + ai * hi;
                            gli[c] = gli[c] + ai * hr - ar * hi;
                        }
                    }
                }
            }
            let gb_im = gb.split_off(half);
            vec![Some(glr), Some(gli), Some(gb), Some(gb_im)]
        }),
    ))
}

/// Applies an LRU layer to `x: [B, L, H]`.
pub fn lru_forward<T: Scalar>(
    w: &LruWeights<T>,
    x: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    if x.ndim() != 3 || x.last_dim() != w.nu.numel() {
        return Err(Error::Shape {
            op: "lru",
            left: x.shape().to_vec(),
            right: w.nu.shape().to_vec(),
        });
    }
    let (bsz, len, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mag = w.nu.exp().neg().exp();
    let (lam_re, lam_im) = if w.complex {
        (mag.mul(&w.theta.cos())?, mag.mul(&w.theta.sin())?)
    } else {
        (mag, Tensor::zeros(&[h]))
    };
    let bx_re = x.matmul(&w.b_re)?.mul_row(&w.gamma)?;
    let bx_im = x.matmul(&w.b_im)?.mul_row(&w.gamma)?;
    let states = linear_recurrence(&lam_re, &lam_im, &bx_re, &bx_im, mode)?;
    let h_re = states.narrow(0, 0, 1)?.reshape(&[bsz, len, h])?;
    h_re.matmul(&w.c)?.add(&x.matmul(&w.d)?)
}

/// Inference path: the step-by-step recurrence.
pub fn lru_sequential<T: Scalar>(p: &LruParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    lru_forward(&p.weights()?, x, ScanMode::Sequential)
}

/// Training path: the associative scan. Gradients flow through the scan.
pub fn lru_parallel_scan<T: Scalar>(p: &LruParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    lru_forward(&p.weights()?, x, ScanMode::Parallel)
}
