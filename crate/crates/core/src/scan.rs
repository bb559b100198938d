//! Associative prefix scans for first-order linear recurrences.
//!
//! `h_k = a_k·h_{k-1} + b_k` is the fold of the affine maps `(a_k, b_k)`
//! under `(a₁,b₁) ∘ (a₂,b₂) = (a₂a₁, a₂b₁ + b₂)`. Because that combine is
//! associative, all prefixes can be formed with a tree of depth `O(log L)`.

use crate::scalar::Scalar;

/// Complex affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine<T> {
    pub a_re: T,
    pub a_im: T,
    pub b_re: T,
    pub b_im: T,
}

impl<T: Scalar> Affine<T> {
    /// Applies `self` first, then `later`.
    #[inline]
    pub fn then(self, later: Affine<T>) -> Affine<T> {
        let (ar, ai) = (later.a_re, later.a_im);
        Affine {
            a_re: ar * self.a_re - ai * self.a_im,
            a_im: ar * self.a_im + ai * self.a_re,
            b_re: ar * self.b_re - ai * self.b_im + later.b_re,
            b_im: ar * self.b_im + ai * self.b_re + later.b_im,
        }
    }
}

/// In-place inclusive scan (Brent–Kung): after the call
/// `xs[i] = xs[0] ∘ xs[1] ∘ … ∘ xs[i]`, where `combine(earlier, later)`.
///
/// The tree shape depends only on `xs.len()`, so the floating-point
/// reduction order is fixed for a given length.
pub fn inclusive_scan<E: Copy>(xs: &mut [E], combine: impl Fn(E, E) -> E) {
    let n = xs.len();
    if n < 2 {
        return;
    }
    let mut d = 1;
    while d < n {
        let mut i = 2 * d - 1;
        while i < n {
            xs[i] = combine(xs[i - d], xs[i]);
            i += 2 * d;
        }
        d *= 2;
    }
    d /= 2;
    while d >= 1 {
        let mut i = 3 * d - 1;
        while i < n {
            xs[i] = combine(xs[i - d], xs[i]);
            i += 2 * d;
        }
        d /= 2;
    }
}

/// Sequential reference for [`inclusive_scan`].
pub fn sequential_scan<E: Copy>(xs: &mut [E], combine: impl Fn(E, E) -> E) {
    for i in 1..xs.len() {
        xs[i] = combine(xs[i - 1], xs[i]);
    }
}

/// Runs `h_k = λ·h_{k-1} + b_k` (with `h_{-1} = 0`) over one channel and
/// returns the hidden states. `b` holds `(re, im)` pairs.
pub fn recurrence<T: Scalar>(lam: (T, T), b: &[(T, T)], parallel: bool) -> Vec<(T, T)> {
    if parallel {
        let mut items: Vec<Affine<T>> = b
            .iter()
            .map(|&(br, bi)| Affine {
                a_re: lam.0,
                a_im: lam.1,
                b_re: br,
                b_im: bi,
            })
            .collect();
        inclusive_scan(&mut items, Affine::then);
        items.into_iter().map(|e| (e.b_re, e.b_im)).collect()
    } else {
        let mut h = (T::zero(), T::zero());
        b.iter()
            .map(|&(br, bi)| {
                h = (
                    lam.0 * h.0 - lam.1 * h.1 + br,
                    lam.0 * h.1 + lam.1 * h.0 + bi,
                );
                h
            })
            .collect()
    }
}
