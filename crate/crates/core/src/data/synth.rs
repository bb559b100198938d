//! Synthetic datasets with a hidden item-transition graph.
//!
//! Items sit on a random cycle; each user starts at a random item and at
//! every step moves to the successor on the cycle, or with probability
//! `noise` to a uniformly random item. Text features are noisy Fourier
//! encodings of cycle position and image features a random linear mix of
//! the same encoding, so both modalities carry transition signal.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{assemble, Dataset, KeyedEmbeddings, Manifest};
use super::embfile::Embeddings;
use super::interactions::{Interaction, InteractionLog};
use super::meta::TextTemplate;
use crate::error::{Error, Result};
use crate::rng::{self, sites};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub noise: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub feature_noise: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize, noise: f64, seed: u64) -> Self {
        SynthConfig {
            n_users,
            n_items,
            noise,
            seed,
            min_len: 8,
            max_len: 20,
            text_dim: 32,
            image_dim: 32,
            feature_noise: 0.1,
        }
    }
}

pub type SynthData = Dataset;

fn item_id(i: usize, width: usize) -> String {
    format!("i{i:0width$}")
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_items < 10 {
        return Err(Error::Config(format!(
            "synthetic catalog needs at least 10 items, got {}",
            cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::Config(format!("noise {} outside [0,1]", cfg.noise)));
    }
    if cfg.min_len < 5 || cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!(
            "sequence lengths {}..={} must satisfy 5 <= min <= max",
            cfg.min_len, cfg.max_len
        )));
    }
    if !cfg.text_dim.is_multiple_of(2) || cfg.text_dim == 0 || cfg.image_dim == 0 {
        return Err(Error::Config(
            "text_dim must be even and positive; image_dim positive".into(),
        ));
    }
    let n = cfg.n_items;
    let iw = n.to_string().len();
    let uw = cfg.n_users.max(1).to_string().len();

    // cycle[p] is the item at position p; pos is its inverse
    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(&mut rng::stream(cfg.seed, sites::SYNTH_GRAPH, 0));
    let mut pos = vec![0usize; n];
    for (p, &i) in cycle.iter().enumerate() {
        pos[i] = p;
    }

    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let mut r = rng::stream(cfg.seed, sites::SYNTH_WALK, u as u64);
        let len = r.random_range(cfg.min_len..=cfg.max_len);
        let mut cur = r.random_range(0..n);
        for t in 0..len {
            if t > 0 {
                cur = if r.random::<f64>() < cfg.noise {
                    r.random_range(0..n)
                } else {
                    cycle[(pos[cur] + 1) % n]
                };
            }
            records.push(Interaction {
                user: format!("u{u:0uw$}"),
                item: item_id(cur, iw),
                ts: 1_000_000 + 60 * t as i64,
            });
        }
    }
    let log = InteractionLog::new(records);

    let mut fr = rng::stream(cfg.seed, sites::SYNTH_FEATURES, 0);
    let half = cfg.text_dim / 2;
    let top = (n / 2).max(1) as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|j| {
            let t = if half > 1 {
                j as f64 / (half - 1) as f64
            } else {
                0.0
            };
            top.powf(t).round()
        })
        .collect();
    let clean: Vec<f64> = (0..n)
        .flat_map(|i| {
            let p = pos[i] as f64 / n as f64;
            freqs
                .iter()
                .flat_map(move |&f| [(2.0 * PI * f * p).cos(), (2.0 * PI * f * p).sin()])
        })
        .collect();
    let jitter = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
    let text: Vec<f32> = clean
        .iter()
        .map(|&x| (x + jitter.sample(&mut fr)) as f32)
        .collect();
    let mix: Vec<f64> = (0..cfg.text_dim * cfg.image_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut fr);
            z / (cfg.text_dim as f64).sqrt()
        })
        .collect();
    let mut image = Vec::with_capacity(n * cfg.image_dim);
    for i in 0..n {
        let row = &clean[i * cfg.text_dim..(i + 1) * cfg.text_dim];
        for c in 0..cfg.image_dim {
            let v: f64 = row
                .iter()
                .enumerate()
                .map(|(r, &x)| x * mix[r * cfg.image_dim + c])
                .sum();
            image.push((v + jitter.sample(&mut fr)) as f32);
        }
    }

    let rows: HashMap<String, usize> = (0..n).map(|i| (item_id(i, iw), i)).collect();
    let mut manifest = Manifest::new();
    manifest.set("source", "synthetic");
    manifest.set("synth_users", cfg.n_users);
    manifest.set("synth_items", cfg.n_items);
    manifest.set("synth_noise", cfg.noise);
    manifest.set("synth_seed", cfg.seed);
    manifest.set("synth_len", format!("{}..={}", cfg.min_len, cfg.max_len));
    manifest.set("synth_feature_noise", cfg.feature_noise);
    manifest.set("core", 5);
    manifest.set("image_policy", "zero");
    assemble(
        &log,
        5,
        None,
        &TextTemplate::default(),
        Some(KeyedEmbeddings {
            emb: Embeddings::new(n, cfg.text_dim, text)?,
            rows: rows.clone(),
        }),
        Some(KeyedEmbeddings {
            emb: Embeddings::new(n, cfg.image_dim, image)?,
            rows,
        }),
        manifest,
    )
}
