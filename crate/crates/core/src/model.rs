//! The nested sequential recommender.
//!
//! Item features are fused by a linear projection into item embeddings
//! `E`, which serve both as the input lookup table and as the scoring
//! matrix. Sequences pass through `N` blocks of
//! `u = LRU(LN(x)); out = FFN(LN(u)) + u` with a SiLU-gated FFN, and the
//! last time step is scored against every item.
//!
//! Every 2-D weight is multiplied by its nested-size mask on each forward
//! pass. With segment-wise layer normalization every layer satisfies
//! `f(x)[0:m] = f_m(x[0:m])`, so one full-width pass carries the
//! activations of every ladder size.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lru::{self, LruOptions, LruWeights, ScanMode};
use crate::matryoshka::{LayerCase, SizeLadder};
use crate::params::{ParamKind, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics per ladder chunk; prefix-consistent.
    Segment,
    /// Statistics over the whole width; each size needs its own pass.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityMode {
    Both,
    Text,
    Image,
    /// Learned item table instead of fused features.
    None,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Segment => "segment",
            NormMode::Full => "full",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(NormMode::Segment),
            "full" => Ok(NormMode::Full),
            _ => Err(Error::Config(format!(
                "unknown norm mode `{s}` (segment|full)"
            ))),
        }
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityMode::Both => "both",
            ModalityMode::Text => "text",
            ModalityMode::Image => "image",
            ModalityMode::None => "none",
        })
    }
}

impl FromStr for ModalityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ModalityMode::Both),
            "text" => Ok(ModalityMode::Text),
            "image" => Ok(ModalityMode::Image),
            "none" => Ok(ModalityMode::None),
            _ => Err(Error::Config(format!(
                "unknown modality mode `{s}` (both|text|image|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub ladder: SizeLadder,
    pub n_blocks: usize,
    pub ffn_k: usize,
    pub num_items: usize,
    pub d_lang: usize,
    pub d_img: usize,
    pub norm_mode: NormMode,
    pub modality: ModalityMode,
    pub lru: LruOptions,
    pub r_min: f64,
    pub r_max: f64,
    pub ln_eps: f64,
    pub dropout: f64,
    /// False for extracted submodels, whose weights already carry the mask.
    pub masked: bool,
    pub scan: ScanMode,
    /// Per-size weights of the nested loss; uniform when `None`.
    pub loss_weights: Option<Vec<f64>>,
}

impl ModelConfig {
    pub fn new(ladder: SizeLadder, num_items: usize, d_lang: usize, d_img: usize) -> Self {
        ModelConfig {
            width: ladder.max(),
            ladder,
            n_blocks: 2,
            ffn_k: 2,
            num_items,
            d_lang,
            d_img,
            norm_mode: NormMode::Segment,
            modality: ModalityMode::Both,
            lru: LruOptions::default(),
            r_min: 0.0,
            r_max: 0.1,
            ln_eps: 1e-5,
            dropout: 0.0,
            masked: true,
            scan: ScanMode::Parallel,
            loss_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width != self.ladder.max() {
            return Err(Error::Config(format!(
                "width {} differs from ladder max {}",
                self.width,
                self.ladder.max()
            )));
        }
        if self.n_blocks == 0 || self.ffn_k == 0 {
            return Err(Error::Config("n_blocks and ffn_k must be positive".into()));
        }
        if self.num_items == 0 {
            return Err(Error::Config("item catalog is empty".into()));
        }
        if self.input_dim() == 0 && self.modality != ModalityMode::None {
            return Err(Error::Config(format!(
                "modality {} has zero feature width",
                self.modality
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if let Some(w) = &self.loss_weights {
            if w.len() != self.ladder.len() {
                return Err(Error::Config(format!(
                    "{} loss weights for {} ladder sizes",
                    w.len(),
                    self.ladder.len()
                )));
            }
        }
        Ok(())
    }

    /// Width of the projection input for the configured modality.
    pub fn input_dim(&self) -> usize {
        match self.modality {
            ModalityMode::Both => self.d_lang + self.d_img,
            ModalityMode::Text => self.d_lang,
            ModalityMode::Image => self.d_img,
            ModalityMode::None => 0,
        }
    }

    /// Layer-norm segment ends for a forward pass at `width`.
    pub fn segments(&self, width: usize) -> Option<Vec<usize>> {
        match self.norm_mode {
            NormMode::Segment => Some(
                self.ladder
                    .sizes()
                    .iter()
                    .copied()
                    .filter(|&s| s <= width)
                    .collect(),
            ),
            NormMode::Full => None,
        }
    }

    fn loss_weight(&self, j: usize) -> f64 {
        self.loss_weights.as_ref().map_or(1.0, |w| w[j])
    }
}

/// Precomputed per-item modality embeddings (rows in catalog order).
#[derive(Debug, Clone)]
pub struct ItemFeatures<T: Scalar> {
    pub num_items: usize,
    pub lang: Option<Tensor<T>>,
    pub img: Option<Tensor<T>>,
}

impl<T: Scalar> ItemFeatures<T> {
    pub fn new(num_items: usize, lang: Option<Tensor<T>>, img: Option<Tensor<T>>) -> Result<Self> {
        for (name, t) in [("text", &lang), ("image", &img)] {
            if let Some(t) = t {
                if t.ndim() != 2 || t.shape()[0] != num_items {
                    return Err(Error::Data(format!(
                        "{name} embeddings have shape {:?}, expected {num_items} rows",
                        t.shape()
                    )));
                }
            }
        }
        Ok(ItemFeatures {
            num_items,
            lang,
            img,
        })
    }

    pub fn none(num_items: usize) -> Self {
        ItemFeatures {
            num_items,
            lang: None,
            img: None,
        }
    }

    pub fn lang_dim(&self) -> usize {
        self.lang.as_ref().map_or(0, |t| t.shape()[1])
    }

    pub fn img_dim(&self) -> usize {
        self.img.as_ref().map_or(0, |t| t.shape()[1])
    }

    fn projection_input(&self, mode: ModalityMode) -> Result<Option<Tensor<T>>> {
        let need = |t: &Option<Tensor<T>>, what: &str| {
            t.clone()
                .ok_or_else(|| Error::Data(format!("modality mode {mode} needs {what} embeddings")))
        };
        Ok(match mode {
            ModalityMode::Both => Some(Tensor::concat_last(&[
                need(&self.lang, "text")?,
                need(&self.img, "image")?,
            ])?),
            ModalityMode::Text => Some(need(&self.lang, "text")?),
            ModalityMode::Image => Some(need(&self.img, "image")?),
            ModalityMode::None => None,
        })
    }
}

/// `E = concat(lang, img) · W_proj + b_proj`
pub fn fuse_embeddings<T: Scalar>(
    lang: &Tensor<T>,
    img: &Tensor<T>,
    w_proj: &Tensor<T>,
    b_proj: &Tensor<T>,
) -> Result<Tensor<T>> {
    if lang.ndim() != 2 || img.ndim() != 2 || lang.shape()[0] != img.shape()[0] {
        return Err(Error::Data(format!(
            "text and image embedding rows differ: {:?} vs {:?}",
            lang.shape(),
            img.shape()
        )));
    }
    Tensor::concat_last(&[lang.clone(), img.clone()])?
        .matmul(w_proj)?
        .add_row(b_proj)
}

/// A left-padded batch of item-id sequences, `[B, L]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Keeps the most recent `max_len` items of each sequence and left-pads
    /// every row to the longest kept length.
    pub fn from_sequences(seqs: &[&[usize]], max_len: usize) -> Self {
        let len = seqs
            .iter()
            .map(|s| s.len().min(max_len))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(crate::data::pad_truncate(s, len));
        }
        Batch {
            ids,
            batch: seqs.len(),
            len,
        }
    }

    pub fn keep(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != IGNORE).collect()
    }

    fn check(&self, num_items: usize) -> Result<()> {
        for (b, row) in self.ids.chunks(self.len).enumerate() {
            if row.iter().all(|&i| i == IGNORE) {
                return Err(Error::Data(format!("sequence {b} in batch is all padding")));
            }
            if let Some(&bad) = row.iter().find(|&&i| i != IGNORE && i >= num_items) {
                return Err(Error::Data(format!(
                    "item id {bad} outside catalog of {num_items}"
                )));
            }
        }
        Ok(())
    }
}

/// Prediction targets for the nested loss.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One label per sequence, scored at the last position.
    Last(Vec<usize>),
    /// One label per position (`[B·L]`), [`IGNORE`] where unused.
    EveryStep(Vec<usize>),
}

/// Dropout switches for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            seed: 0,
            step: 0,
        }
    }
}

/// Effective weights of one block.
#[derive(Debug, Clone)]
pub struct BlockWeights<T: Scalar> {
    pub ln1_alpha: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub lru: LruWeights<T>,
    pub ln2_alpha: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub b_gate: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// Activations of one block.
#[derive(Debug, Clone)]
pub struct BlockTrace<T: Scalar> {
    pub lru_out: Tensor<T>,
    pub out: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions<'a> {
    pub segments: Option<&'a [usize]>,
    pub eps: f64,
    pub dropout: f64,
    pub scan: ScanMode,
    pub ctx: ForwardCtx,
    /// Distinguishes dropout sites of different blocks.
    pub block_index: u64,
}

/// One block: `u = LRU(LN(x))`, `out = FFN(LN(u)) + u`.
///
/// `keep` marks non-padding rows; the LRU input is zeroed elsewhere so
/// padding never reaches the recurrent state.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &BlockWeights<T>,
    keep: &[bool],
    opts: BlockOptions<'_>,
) -> Result<BlockTrace<T>> {
    let eps = T::of(opts.eps);
    let z = x
        .layer_norm(&w.ln1_alpha, &w.ln1_beta, eps, opts.segments)?
        .mask_rows(keep)?;
    let drop_site = |which: u64| rng::site(rng::sites::DROPOUT, opts.block_index * 2 + which);
    let u = lru::lru_forward(&w.lru, &z, opts.scan)?.dropout(
        opts.dropout,
        opts.ctx.training,
        opts.ctx.seed,
        drop_site(0),
        opts.ctx.step,
    )?;
    let v = u.layer_norm(&w.ln2_alpha, &w.ln2_beta, eps, opts.segments)?;
    let gate = v.matmul(&w.w_gate)?.add_row(&w.b_gate)?.silu();
    let inner = v.matmul(&w.w_in)?.add_row(&w.b_in)?;
    let hidden = gate.mul(&inner)?.dropout(
        opts.dropout,
        opts.ctx.training,
        opts.ctx.seed,
        drop_site(1),
        opts.ctx.step,
    )?;
    let out = hidden.matmul(&w.w_out)?.add_row(&w.b_out)?.add(&u)?;
    Ok(BlockTrace { lru_out: u, out })
}

/// Activations of a whole forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    pub item_emb: Tensor<T>,
    pub input: Tensor<T>,
    pub blocks: Vec<BlockTrace<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.blocks.last().map_or(&self.input, |b| &b.out)
    }

    /// Every recorded activation in network order.
    pub fn layers(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.item_emb, &self.input];
        for b in &self.blocks {
            v.push(&b.lru_out);
            v.push(&b.out);
        }
        v
    }
}

fn block_name(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

/// Parameter leaves bound for one pass, plus their masked versions.
pub struct Bound<T: Scalar> {
    pub leaves: IndexMap<String, Tensor<T>>,
    effective: IndexMap<String, Tensor<T>>,
}

/// Effective weights at a given width.
pub struct Weights<T: Scalar> {
    map: IndexMap<String, Tensor<T>>,
    pub width: usize,
}

impl<T: Scalar> Weights<T> {
    fn get(&self, name: &str) -> Result<Tensor<T>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }
}

#[derive(Debug, Clone)]
pub struct RecModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> RecModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let k = config.ffn_k;
        let mut p = ParamStore::new();
        let normal = |name: &str, n: usize, std: f64| -> Vec<T> {
            let mut r = rng::stream(seed, rng::site(rng::sites::INIT, rng::name_site(name)), 0);
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    T::of(z * std)
                })
                .collect()
        };
        let zeros = |n: usize| vec![T::zero(); n];
        let ones = |n: usize| vec![T::one(); n];
        let vec1 = ParamKind::Vector { k: 1 };
        let out_only = ParamKind::Matrix(LayerCase::OutputOnly);

        if config.modality == ModalityMode::None {
            let n = config.num_items;
            p.insert(
                "item_table",
                vec![n, d],
                out_only,
                normal("item_table", n * d, 1.0 / (d as f64).sqrt()),
            )?;
        } else {
            let din = config.input_dim();
            p.insert(
                "fusion.w_proj",
                vec![din, d],
                out_only,
                normal("fusion.w_proj", din * d, 1.0 / (din as f64).sqrt()),
            )?;
            p.insert("fusion.b_proj", vec![d], vec1, zeros(d))?;
        }

        for i in 0..config.n_blocks {
            let name = |s: &str| block_name(i, s);
            p.insert(name("ln1.alpha"), vec![d], vec1, ones(d))?;
            p.insert(name("ln1.beta"), vec![d], vec1, zeros(d))?;
            let ring = lru::ring_values::<T>(
                d,
                config.r_min,
                config.r_max,
                config.lru,
                seed,
                rng::site(rng::sites::INIT, i as u64),
            )?;
            let sq = ParamKind::Matrix(LayerCase::Square);
            p.insert(name("lru.nu"), vec![d], vec1, ring.nu)?;
            p.insert(name("lru.theta"), vec![d], vec1, ring.theta)?;
            p.insert(name("lru.gamma"), vec![d], vec1, ring.gamma)?;
            p.insert(name("lru.b_re"), vec![d, d], sq, ring.b_re)?;
            p.insert(name("lru.b_im"), vec![d, d], sq, ring.b_im)?;
            p.insert(name("lru.c"), vec![d, d], sq, ring.c)?;
            p.insert(name("lru.d"), vec![d, d], sq, ring.d)?;
            p.insert(name("ln2.alpha"), vec![d], vec1, ones(d))?;
            p.insert(name("ln2.beta"), vec![d], vec1, zeros(d))?;
            let up = ParamKind::Matrix(LayerCase::Up { k });
            let std_in = 1.0 / (d as f64).sqrt();
            p.insert(
                name("ffn.w_gate"),
                vec![d, k * d],
                up,
                normal(&name("ffn.w_gate"), k * d * d, std_in),
            )?;
            p.insert(
                name("ffn.b_gate"),
                vec![k * d],
                ParamKind::Vector { k },
                zeros(k * d),
            )?;
            p.insert(
                name("ffn.w_in"),
                vec![d, k * d],
                up,
                normal(&name("ffn.w_in"), k * d * d, std_in),
            )?;
            p.insert(
                name("ffn.b_in"),
                vec![k * d],
                ParamKind::Vector { k },
                zeros(k * d),
            )?;
            p.insert(
                name("ffn.w_out"),
                vec![k * d, d],
                ParamKind::Matrix(LayerCase::Down { k }),
                normal(&name("ffn.w_out"), k * d * d, 1.0 / ((k * d) as f64).sqrt()),
            )?;
            p.insert(name("ffn.b_out"), vec![d], vec1, zeros(d))?;
        }
        Ok(RecModel { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let template = RecModel::<T>::init(config.clone(), 0)?;
        for (name, p) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape != p.shape || got.kind != p.kind {
                return Err(Error::Data(format!(
                    "parameter {name}: stored shape {:?}/{} does not match model {:?}/{}",
                    got.shape,
                    got.kind.tag(),
                    p.shape,
                    p.kind.tag()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model expects {}",
                params.len(),
                template.params.len()
            )));
        }
        Ok(RecModel { config, params })
    }

    pub fn num_items(&self) -> usize {
        self.config.num_items
    }

    /// Creates leaf tensors and applies masks (if the model is masked).
    pub fn bind(&self, trainable: bool) -> Result<Bound<T>> {
        self.bind_leaves(self.params.leaves(trainable)?)
    }

    /// Binds caller-provided tensors in place of the stored parameters.
    pub fn bind_leaves(&self, leaves: IndexMap<String, Tensor<T>>) -> Result<Bound<T>> {
        for (name, p) in self.params.iter() {
            match leaves.get(name) {
                Some(t) if t.shape() == p.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "bind",
                        left: t.shape().to_vec(),
                        right: p.shape.clone(),
                    })
                }
                None => return Err(Error::Data(format!("missing parameter `{name}`"))),
            }
        }
        let mut effective = IndexMap::new();
        let masks = if self.config.masked {
            self.params.masks(&self.config.ladder)?
        } else {
            IndexMap::new()
        };
        for (name, leaf) in &leaves {
            let eff = match masks.get(name) {
                Some(m) => leaf.mul(&Tensor::from_vec(leaf.shape(), m.clone())?)?,
                None => leaf.clone(),
            };
            effective.insert(name.clone(), eff);
        }
        Ok(Bound { leaves, effective })
    }

    /// Effective weights sliced to width `m`.
    pub fn view(&self, bound: &Bound<T>, m: usize) -> Result<Weights<T>> {
        let mut map = IndexMap::new();
        for (name, t) in &bound.effective {
            let p = self.params.get(name)?;
            let sliced = if m == self.config.width {
                t.clone()
            } else {
                let s = p.kind.slice_shape(&p.shape, m);
                match p.kind {
                    ParamKind::Vector { .. } => t.narrow(0, 0, s[0])?,
                    ParamKind::Matrix(_) => t.narrow(0, 0, s[0])?.narrow(1, 0, s[1])?,
                }
            };
            map.insert(name.clone(), sliced);
        }
        Ok(Weights { map, width: m })
    }

    fn block_weights(&self, w: &Weights<T>, i: usize) -> Result<BlockWeights<T>> {
        let g = |s: &str| w.get(&block_name(i, s));
        Ok(BlockWeights {
            ln1_alpha: g("ln1.alpha")?,
            ln1_beta: g("ln1.beta")?,
            lru: LruWeights {
                nu: g("lru.nu")?,
                theta: g("lru.theta")?,
                gamma: g("lru.gamma")?,
                b_re: g("lru.b_re")?,
                b_im: g("lru.b_im")?,
                c: g("lru.c")?,
                d: g("lru.d")?,
                complex: self.config.lru.complex,
            },
            ln2_alpha: g("ln2.alpha")?,
            ln2_beta: g("ln2.beta")?,
            w_gate: g("ffn.w_gate")?,
            b_gate: g("ffn.b_gate")?,
            w_in: g("ffn.w_in")?,
            b_in: g("ffn.b_in")?,
            w_out: g("ffn.w_out")?,
            b_out: g("ffn.b_out")?,
        })
    }

    /// Item embedding matrix `[V, width]`.
    pub fn item_embeddings(&self, w: &Weights<T>, feats: &ItemFeatures<T>) -> Result<Tensor<T>> {
        if feats.num_items != self.config.num_items {
            return Err(Error::Data(format!(
                "features cover {} items, model expects {}",
                feats.num_items, self.config.num_items
            )));
        }
        match feats.projection_input(self.config.modality)? {
            None => w.get("item_table"),
            Some(input) => {
                if input.shape()[1] != self.config.input_dim() {
                    return Err(Error::Data(format!(
                        "feature width {} does not match model input {}",
                        input.shape()[1],
                        self.config.input_dim()
                    )));
                }
                input
                    .matmul(&w.get("fusion.w_proj")?)?
                    .add_row(&w.get("fusion.b_proj")?)
            }
        }
    }

    /// Runs every block at the view's width, recording all activations.
    pub fn encode(
        &self,
        w: &Weights<T>,
        feats: &ItemFeatures<T>,
        batch: &Batch,
        ctx: ForwardCtx,
    ) -> Result<Trace<T>> {
        batch.check(self.config.num_items)?;
        let item_emb = self.item_embeddings(w, feats)?;
        let input =
            item_emb
                .gather_rows(&batch.ids)?
                .reshape(&[batch.batch, batch.len, w.width])?;
        let keep = batch.keep();
        let segments = self.config.segments(w.width);
        let mut x = input.clone();
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for i in 0..self.config.n_blocks {
            let bw = self.block_weights(w, i)?;
            let opts = BlockOptions {
                segments: segments.as_deref(),
                eps: self.config.ln_eps,
                dropout: self.config.dropout,
                scan: self.config.scan,
                ctx,
                block_index: i as u64,
            };
            let t = block_forward(&x, &bw, &keep, opts)?;
            x = t.out.clone();
            blocks.push(t);
        }
        Ok(Trace {
            item_emb,
            input,
            blocks,
        })
    }

    /// Full-width activations when one pass serves every size, otherwise a
    /// pass on weights sliced to `m`. Returned tensors have width `m`.
    fn hidden_at(
        &self,
        bound: &Bound<T>,
        feats: &ItemFeatures<T>,
        batch: &Batch,
        m: usize,
        ctx: ForwardCtx,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.config.ladder.require(m)?;
        let trace = match self.config.norm_mode {
            NormMode::Segment => {
                self.encode(&self.view(bound, self.config.width)?, feats, batch, ctx)?
            }
            NormMode::Full => self.encode(&self.view(bound, m)?, feats, batch, ctx)?,
        };
        Ok((
            trace.output().slice_last(0, m)?,
            trace.item_emb.slice_last(0, m)?,
        ))
    }

    /// Relevance of every item for the last position: `[B, V]`.
    pub fn forward_scores_bound(
        &self,
        bound: &Bound<T>,
        feats: &ItemFeatures<T>,
        batch: &Batch,
        m: usize,
    ) -> Result<Tensor<T>> {
        let (h, emb) = self.hidden_at(bound, feats, batch, m, ForwardCtx::eval())?;
        last_step(&h)?.matmul_t(&emb)
    }

    /// Evaluation-mode scores at size `m`.
    pub fn forward_scores(
        &self,
        feats: &ItemFeatures<T>,
        batch: &Batch,
        m: usize,
    ) -> Result<Tensor<T>> {
        let bound = self.bind(false)?;
        self.forward_scores_bound(&bound, feats, batch, m)
    }

    /// Scores at every ladder size from a single set of bound weights.
    pub fn scores_all_sizes(
        &self,
        feats: &ItemFeatures<T>,
        batch: &Batch,
    ) -> Result<Vec<(usize, Tensor<T>)>> {
        let bound = self.bind(false)?;
        match self.config.norm_mode {
            NormMode::Segment => {
                let trace = self.encode(
                    &self.view(&bound, self.config.width)?,
                    feats,
                    batch,
                    ForwardCtx::eval(),
                )?;
                let z = last_step(trace.output())?;
                self.config
                    .ladder
                    .sizes()
                    .iter()
                    .map(|&m| {
                        Ok((
                            m,
                            z.slice_last(0, m)?
                                .matmul_t(&trace.item_emb.slice_last(0, m)?)?,
                        ))
                    })
                    .collect()
            }
            NormMode::Full => self
                .config
                .ladder
                .sizes()
                .iter()
                .map(|&m| Ok((m, self.forward_scores_bound(&bound, feats, batch, m)?)))
                .collect(),
        }
    }

    /// Weighted sum over ladder sizes of the softmax cross-entropy of each
    /// size's scores.
    pub fn nested_loss(
        &self,
        bound: &Bound<T>,
        feats: &ItemFeatures<T>,
        batch: &Batch,
        targets: &Targets,
        ctx: ForwardCtx,
    ) -> Result<Tensor<T>> {
        let rows = |h: &Tensor<T>| -> Result<(Tensor<T>, Vec<usize>)> {
            match targets {
                Targets::Last(labels) => Ok((last_step(h)?, labels.clone())),
                Targets::EveryStep(labels) => {
                    let w = h.last_dim();
                    Ok((h.reshape(&[batch.batch * batch.len, w])?, labels.clone()))
                }
            }
        };
        let expected = match targets {
            Targets::Last(l) => (l.len(), batch.batch),
            Targets::EveryStep(l) => (l.len(), batch.batch * batch.len),
        };
        if expected.0 != expected.1 {
            return Err(Error::Data(format!(
                "{} labels for {} prediction rows",
                expected.0, expected.1
            )));
        }

        let sizes = self.config.ladder.sizes().to_vec();
        let shared = match self.config.norm_mode {
            NormMode::Segment => {
                Some(self.encode(&self.view(bound, self.config.width)?, feats, batch, ctx)?)
            }
            NormMode::Full => None,
        };
        let mut total: Option<Tensor<T>> = None;
        for (j, &m) in sizes.iter().enumerate() {
            let (h, emb) = match &shared {
                Some(trace) => (
                    trace.output().slice_last(0, m)?,
                    trace.item_emb.slice_last(0, m)?,
                ),
                None => {
                    let trace = self.encode(&self.view(bound, m)?, feats, batch, ctx)?;
                    (trace.output().clone(), trace.item_emb.clone())
                }
            };
            let (z, labels) = rows(&h)?;
            let term = z.matmul_t(&emb)?.softmax_cross_entropy(&labels)?;
            let weight = self.config.loss_weight(j);
            let term = if weight == 1.0 {
                term
            } else {
                term.scale(T::of(weight))
            };
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        Ok(total.expect("ladder is non-empty"))
    }

    /// Entries in 2-D weights.
    pub fn matrix_param_count(&self) -> usize {
        self.params.matrix_numel()
    }
}

/// `[B, L, W] → [B, W]` at position `L − 1`.
pub fn last_step<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, l, w) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    h.narrow(1, l - 1, l)?.reshape(&[b, w])
}

/// Slices every parameter of a trained model to size `m`, with masks baked
/// in. The result is a standalone model of width `m`.
pub fn extract_submodel<T: Scalar>(full: &RecModel<T>, m: usize) -> Result<RecModel<T>> {
    let cfg = &full.config;
    cfg.ladder.require(m)?;
    let masks = if cfg.masked {
        full.params.masks(&cfg.ladder)?
    } else {
        IndexMap::new()
    };
    let mut params = ParamStore::new();
    for (name, p) in full.params.iter() {
        let baked: Vec<T> = match masks.get(name) {
            Some(mask) => p.data.iter().zip(mask).map(|(&w, &k)| w * k).collect(),
            None => p.data.clone(),
        };
        let shape = p.kind.slice_shape(&p.shape, m);
        params.insert(name.clone(), shape, p.kind, p.slice_values(&baked, m))?;
    }
    let mut config = cfg.clone();
    config.ladder = cfg.ladder.truncated(m)?;
    config.width = m;
    config.masked = false;
    if let Some(w) = &cfg.loss_weights {
        config.loss_weights = Some(w[..config.ladder.len()].to_vec());
    }
    RecModel::from_params(config, params)
}
