//! Nested ("Matryoshka") weight layout.
//!
//! A [`SizeLadder`] `{m_0, 2m_0, …, D}` splits every scalable axis into
//! chunks. A block mask zeroes each weight entry that would let input
//! coordinates beyond `m` reach output coordinates inside the size-`m`
//! prefix, so the leading slice of every weight is a standalone model.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strictly doubling list of power-of-two widths ending at the full width `D`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SizeLadder {
    sizes: Vec<usize>,
}

impl SizeLadder {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Param("size ladder is empty".into()));
        }
        if sizes[0] < 2 {
            return Err(Error::Param(format!(
                "smallest ladder size must be >= 2, got {}",
                sizes[0]
            )));
        }
        if let Some(bad) = sizes.iter().find(|s| !s.is_power_of_two()) {
            return Err(Error::Param(format!(
                "ladder size {bad} is not a power of two"
            )));
        }
        if let Some(w) = sizes.windows(2).find(|w| w[1] != 2 * w[0]) {
            return Err(Error::Param(format!(
                "ladder sizes must double: {} follows {}",
                w[1], w[0]
            )));
        }
        Ok(SizeLadder { sizes })
    }

    /// `{min, 2·min, …, max}`.
    pub fn geometric(min: usize, max: usize) -> Result<Self> {
        if min == 0 || max < min {
            return Err(Error::Param(format!("invalid ladder range {min}..{max}")));
        }
        let mut sizes = vec![min];
        while *sizes.last().unwrap() < max {
            sizes.push(sizes.last().unwrap() * 2);
        }
        if *sizes.last().unwrap() != max {
            return Err(Error::Param(format!(
                "{max} is not {min} times a power of two"
            )));
        }
        Self::new(sizes)
    }

    /// The trivial ladder `{D}`: no nesting, all masks are all-ones.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(vec![d])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn min(&self) -> usize {
        self.sizes[0]
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, m: usize) -> bool {
        self.sizes.contains(&m)
    }

    pub fn require(&self, m: usize) -> Result<()> {
        if self.contains(m) {
            Ok(())
        } else {
            Err(Error::Param(format!("size {m} is not in ladder {self}")))
        }
    }

    /// `(start, end)` of each chunk; chunk 0 is `[0, m_0)`.
    pub fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes
            .iter()
            .enumerate()
            .map(|(j, &hi)| (if j == 0 { 0 } else { self.sizes[j - 1] }, hi))
    }

    /// Sizes up to and including `m`.
    pub fn truncated(&self, m: usize) -> Result<SizeLadder> {
        self.require(m)?;
        Ok(SizeLadder {
            sizes: self.sizes.iter().copied().filter(|&s| s <= m).collect(),
        })
    }
}

impl fmt::Display for SizeLadder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Accepts `8,16,32` or the range form `8..32`.
impl FromStr for SizeLadder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Param(format!("bad ladder size `{x}`")))
        };
        if let Some((lo, hi)) = s.split_once("..") {
            return Self::geometric(parse(lo)?, parse(hi)?);
        }
        let sizes = s.split(',').map(parse).collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

/// How a 2-D weight's axes scale with the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerCase {
    /// `D × kD`
    Up { k: usize },
    /// `kD × D`
    Down { k: usize },
    /// `D × D`
    Square,
    /// Fixed input extent, `D` output columns; only columns are sliced.
    OutputOnly,
}

impl LayerCase {
    pub fn scale_k(self) -> usize {
        match self {
            LayerCase::Up { k } | LayerCase::Down { k } => k,
            LayerCase::Square | LayerCase::OutputOnly => 1,
        }
    }

    fn check(self, d1: usize, d2: usize, ladder: &SizeLadder) -> Result<()> {
        let d = ladder.max();
        let ok = match self {
            LayerCase::Up { k } => k >= 1 && d1 == d && d2 == k * d,
            LayerCase::Down { k } => k >= 1 && d1 == k * d && d2 == d,
            LayerCase::Square => d1 == d && d2 == d,
            LayerCase::OutputOnly => d2 == d,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "weight shape {d1}x{d2} does not fit case {self:?} for ladder max {d}"
            )))
        }
    }

    /// Extent of the size-`m` slice `(rows, cols)` of a `d1 × d2` weight.
    pub fn slice_dims(self, d1: usize, m: usize) -> (usize, usize) {
        match self {
            LayerCase::Up { k } => (m, k * m),
            LayerCase::Down { k } => (k * m, m),
            LayerCase::Square => (m, m),
            LayerCase::OutputOnly => (d1, m),
        }
    }

    pub fn name(self) -> String {
        match self {
            LayerCase::Up { k } => format!("up{k}"),
            LayerCase::Down { k } => format!("down{k}"),
            LayerCase::Square => "square".into(),
            LayerCase::OutputOnly => "output".into(),
        }
    }
}

impl FromStr for LayerCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = |rest: &str| {
            rest.parse::<usize>().map_err(|_| Error::Format {
                path: Default::default(),
                msg: format!("bad layer case `{s}`"),
            })
        };
        match s {
            "square" => Ok(LayerCase::Square),
            "output" => Ok(LayerCase::OutputOnly),
            _ if s.starts_with("up") => Ok(LayerCase::Up { k: k(&s[2..])? }),
            _ if s.starts_with("down") => Ok(LayerCase::Down { k: k(&s[4..])? }),
            _ => Err(Error::Format {
                path: Default::default(),
                msg: format!("bad layer case `{s}`"),
            }),
        }
    }
}

/// Row-major 0/1 mask for a `d1 × d2` weight.
pub fn mask_values<T: Scalar>(
    d1: usize,
    d2: usize,
    case: LayerCase,
    ladder: &SizeLadder,
) -> Result<Vec<T>> {
    case.check(d1, d2, ladder)?;
    let mut mask = vec![T::zero(); d1 * d2];
    let mut fill = |rows: usize, cols: (usize, usize)| {
        for r in 0..rows {
            mask[r * d2 + cols.0..r * d2 + cols.1].fill(T::one());
        }
    };
    match case {
        LayerCase::OutputOnly => fill(d1, (0, d2)),
        LayerCase::Square => ladder.chunks().for_each(|(lo, hi)| fill(hi, (lo, hi))),
        LayerCase::Up { k } => ladder
            .chunks()
            .for_each(|(lo, hi)| fill(hi, (k * lo, k * hi))),
        LayerCase::Down { k } => ladder.chunks().for_each(|(lo, hi)| fill(k * hi, (lo, hi))),
    }
    Ok(mask)
}

/// Binary padding mask as a constant tensor.
pub fn build_mask<T: Scalar>(
    d1: usize,
    d2: usize,
    case: LayerCase,
    ladder: &SizeLadder,
) -> Result<Tensor<T>> {
    Tensor::from_vec(&[d1, d2], mask_values(d1, d2, case, ladder)?)
}

/// A 2-D weight together with its nested-size mask.
#[derive(Debug, Clone)]
pub struct MaskedLinear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub case: LayerCase,
    pub mask: Tensor<T>,
}

impl<T: Scalar> MaskedLinear<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        case: LayerCase,
        ladder: &SizeLadder,
    ) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::Config(format!(
                "weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        let (d1, d2) = (weight.shape()[0], weight.shape()[1]);
        let mask = build_mask(d1, d2, case, ladder)?;
        if let Some(b) = &bias {
            if b.shape() != [d2] {
                return Err(Error::Config(format!(
                    "bias shape {:?} for weight {d1}x{d2}",
                    b.shape()
                )));
            }
        }
        Ok(MaskedLinear {
            weight,
            bias,
            case,
            mask,
        })
    }

    pub fn scale_k(&self) -> usize {
        self.case.scale_k()
    }

    /// `mask ⊙ weight`, recorded on the tape so masked entries get zero gradient.
    pub fn apply(&self) -> Result<Tensor<T>> {
        self.weight.mul(&self.mask)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.apply()?)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

/// Reference for the masked product: explicit per-chunk slice products
/// concatenated along the output axis. Bias is not included.
pub fn chunked_forward_oracle<T: Scalar>(
    x: &Tensor<T>,
    layer: &MaskedLinear<T>,
    ladder: &SizeLadder,
) -> Result<Tensor<T>> {
    let w = &layer.weight;
    if layer.case == LayerCase::OutputOnly {
        return x.matmul(w);
    }
    let k = layer.scale_k();
    let mut parts = Vec::with_capacity(ladder.len());
    for (lo, hi) in ladder.chunks() {
        let (in_hi, out) = match layer.case {
            LayerCase::Up { .. } | LayerCase::Square => (hi, (k * lo, k * hi)),
            LayerCase::Down { .. } => (k * hi, (lo, hi)),
            LayerCase::OutputOnly => unreachable!(),
        };
        let xj = x.slice_last(0, in_hi)?;
        let wj = w.narrow(0, 0, in_hi)?.narrow(1, out.0, out.1)?;
        parts.push(xj.matmul(&wj)?);
    }
    Tensor::concat_last(&parts)
}

/// Parameter and activation budget of one nested training run versus
/// training every ladder size as an independent model.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub layers: u64,
    pub gamma: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub ladder: SizeLadder,
    /// `B·L / D`
    pub delta: Ratio<u128>,
    pub params_nested: u128,
    pub params_independent: u128,
    pub acts_nested: Ratio<u128>,
    pub acts_independent: Ratio<u128>,
    /// `params_independent / params_nested`
    pub ratio: Ratio<u128>,
    /// `ratio − 1`
    pub saving: Ratio<u128>,
    /// Same counts with one `γ·m` vector per layer alongside each `γ·m²` matrix.
    pub all_params_nested: u128,
    pub all_params_independent: u128,
}

impl MemoryReport {
    pub fn weights_saved(&self) -> u128 {
        self.params_independent - self.params_nested
    }

    pub fn activations_saved(&self) -> Ratio<u128> {
        self.acts_independent - self.acts_nested
    }

    pub fn all_saving(&self) -> Ratio<u128> {
        Ratio::new(self.all_params_independent, self.all_params_nested) - Ratio::from_integer(1)
    }

    /// Saving rate for each ladder prefix `{m_0..m_t}` with 2-D weights only.
    pub fn cumulative_savings(&self) -> Vec<Ratio<u128>> {
        prefix_savings(self.ladder.sizes(), |m| m * m)
    }

    /// Saving rate for each ladder prefix counting 1-D weights too.
    pub fn cumulative_savings_all(&self) -> Vec<Ratio<u128>> {
        prefix_savings(self.ladder.sizes(), |m| m * m + m)
    }
}

fn prefix_savings(sizes: &[usize], per_layer: impl Fn(u128) -> u128) -> Vec<Ratio<u128>> {
    let mut total = 0u128;
    sizes
        .iter()
        .map(|&m| {
            let c = per_layer(m as u128);
            total += c;
            Ratio::new(total, c) - Ratio::from_integer(1)
        })
        .collect()
}

pub fn memory_report(
    layers: u64,
    gamma: u64,
    batch: u64,
    seq_len: u64,
    ladder: &SizeLadder,
) -> Result<MemoryReport> {
    if layers == 0 || gamma == 0 || batch == 0 || seq_len == 0 {
        return Err(Error::Param(
            "memory analysis inputs must be positive".into(),
        ));
    }
    let (n, g) = (layers as u128, gamma as u128);
    let d = ladder.max() as u128;
    let bl = (batch * seq_len) as u128;
    let sum_sq: u128 = ladder.sizes().iter().map(|&m| (m as u128).pow(2)).sum();
    let sum_lin: u128 = ladder.sizes().iter().map(|&m| m as u128).sum();
    let delta = Ratio::new(bl, d);

    let params_nested = n * g * d * d;
    let params_independent = n * g * sum_sq;
    let acts_nested = delta * Ratio::from_integer(n * g * d * d);
    let acts_independent = delta * Ratio::from_integer(n * g * sum_sq);
    let ratio = Ratio::new(params_independent, params_nested);
    Ok(MemoryReport {
        layers,
        gamma,
        batch,
        seq_len,
        ladder: ladder.clone(),
        delta,
        params_nested,
        params_independent,
        acts_nested,
        acts_independent,
        ratio,
        saving: ratio - Ratio::from_integer(1),
        all_params_nested: n * g * (d * d + d),
        all_params_independent: n * g * (sum_sq + sum_lin),
    })
}

pub fn ratio_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
