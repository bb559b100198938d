//! Named parameter storage with nested-size slicing rules.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::matryoshka::{mask_values, LayerCase, SizeLadder};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter scales with the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// 2-D weight following one of the nested layouts.
    Matrix(LayerCase),
    /// 1-D parameter of length `k·D`; its size-`m` slice is `[0, k·m)`.
    Vector { k: usize },
}

impl ParamKind {
    pub fn tag(self) -> String {
        match self {
            ParamKind::Matrix(c) => c.name(),
            ParamKind::Vector { k } => format!("vec{k}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag.strip_prefix("vec") {
            Some(k) => k
                .parse()
                .map(|k| ParamKind::Vector { k })
                .map_err(|_| Error::Data(format!("bad parameter kind `{tag}`"))),
            None => Ok(ParamKind::Matrix(tag.parse()?)),
        }
    }

    /// Shape of the size-`m` slice of a parameter with full shape `shape`.
    pub fn slice_shape(self, shape: &[usize], m: usize) -> Vec<usize> {
        match self {
            ParamKind::Matrix(case) => {
                let (r, c) = case.slice_dims(shape[0], m);
                vec![r, c]
            }
            ParamKind::Vector { k } => vec![k * m],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading size-`m` slice of `values` (laid out like this parameter).
    pub fn slice_values(&self, values: &[T], m: usize) -> Vec<T> {
        let target = self.kind.slice_shape(&self.shape, m);
        match self.kind {
            ParamKind::Vector { .. } => values[..target[0]].to_vec(),
            ParamKind::Matrix(_) => {
                let cols = self.shape[1];
                let mut out = Vec::with_capacity(target[0] * target[1]);
                for r in 0..target[0] {
                    out.extend_from_slice(&values[r * cols..r * cols + target[1]]);
                }
                out
            }
        }
    }
}

/// Ordered map of parameters. Iteration order is insertion order, which
/// fixes checkpoint layout and optimizer traversal.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: ParamKind,
        data: Vec<T>,
    ) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!(
                "parameter {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        self.params.insert(name, Param { shape, kind, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    /// Number of entries in 2-D weights.
    pub fn matrix_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| matches!(p.kind, ParamKind::Matrix(_)))
            .map(|p| p.numel())
            .sum()
    }

    /// Masks for every matrix parameter under `ladder`.
    pub fn masks(&self, ladder: &SizeLadder) -> Result<IndexMap<String, Vec<T>>> {
        let mut out = IndexMap::new();
        for (name, p) in &self.params {
            if let ParamKind::Matrix(case) = p.kind {
                out.insert(
                    name.clone(),
                    mask_values(p.shape[0], p.shape[1], case, ladder)?,
                );
            }
        }
        Ok(out)
    }

    /// Leaf tensors for one forward pass.
    pub fn leaves(&self, requires_grad: bool) -> Result<IndexMap<String, Tensor<T>>> {
        self.params
            .iter()
            .map(|(n, p)| {
                Ok((
                    n.clone(),
                    Tensor::leaf(&p.shape, p.data.clone(), requires_grad)?,
                ))
            })
            .collect()
    }
}
