mod common;

use common::{features, max_abs_diff, randn, random_seqs, rng};
use nestrec::checkpoint::AdamState;
use nestrec::matryoshka::{LayerCase, SizeLadder};
use nestrec::model::{
    extract_submodel, fuse_embeddings, last_step, Batch, ForwardCtx, ItemFeatures, ModelConfig,
    NormMode, RecModel, Targets,
};
use nestrec::params::{ParamKind, ParamStore};
use nestrec::tensor::IGNORE;
use nestrec::train::{train_step, AdamW};
use nestrec::Tensor64;
use proptest::prelude::*;

const V: usize = 30;
const DL: usize = 6;
const DI: usize = 5;

/// A model whose every parameter has been jittered away from its init, so
/// layer-norm gains, biases and so on are all non-trivial.
fn model(ladder: &str, norm: NormMode, seed: u64) -> RecModel<f64> {
    let mut cfg = ModelConfig::new(ladder.parse().unwrap(), V, DL, DI);
    cfg.norm_mode = norm;
    cfg.r_min = 0.3;
    cfg.r_max = 0.95;
    let mut m = RecModel::init(cfg, seed).unwrap();
    let mut r = rng(seed + 100);
    for (_, p) in m.params.iter_mut() {
        let noise = randn(&mut r, p.data.len());
        for (v, n) in p.data.iter_mut().zip(noise) {
            *v += 0.1 * n;
        }
    }
    m
}

fn batch(n: usize, max_len: usize, seed: u64) -> Batch {
    let seqs = random_seqs(n, V, 1, max_len, seed);
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    Batch::from_sequences(&refs, max_len)
}

fn chunks(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut lo = 0;
    sizes
        .iter()
        .map(|&hi| {
            let c = (lo, hi);
            lo = hi;
            c
        })
        .collect()
}

/// Whether entry `(r, c)` survives nesting; written directly from the
/// block-triangular layout rather than through the library's masks.
fn kept(case: LayerCase, r: usize, c: usize, sizes: &[usize]) -> bool {
    chunks(sizes).into_iter().any(|(lo, hi)| match case {
        LayerCase::Square => (lo..hi).contains(&c) && r < hi,
        LayerCase::Up { k } => (k * lo..k * hi).contains(&c) && r < hi,
        LayerCase::Down { k } => (lo..hi).contains(&c) && r < k * hi,
        LayerCase::OutputOnly => true,
    })
}

/// Independent construction of the width-`m` model: zero what the layout
/// forbids, copy the leading block, and run it unmasked.
fn sliced_oracle(full: &RecModel<f64>, m: usize) -> RecModel<f64> {
    let sizes: Vec<usize> = full
        .config
        .ladder
        .sizes()
        .iter()
        .copied()
        .filter(|&s| s <= m)
        .collect();
    let mut store = ParamStore::new();
    for (name, p) in full.params.iter() {
        let (shape, data) = match p.kind {
            ParamKind::Vector { k } => (vec![k * m], p.data[..k * m].to_vec()),
            ParamKind::Matrix(case) => {
                let (rows, cols) = match case {
                    LayerCase::Square => (m, m),
                    LayerCase::Up { k } => (m, k * m),
                    LayerCase::Down { k } => (k * m, m),
                    LayerCase::OutputOnly => (p.shape[0], m),
                };
                let mut d = Vec::new();
                for r in 0..rows {
                    for c in 0..cols {
                        let v = p.data[r * p.shape[1] + c];
                        d.push(if kept(case, r, c, full.config.ladder.sizes()) {
                            v
                        } else {
                            0.0
                        });
                    }
                }
                (vec![rows, cols], d)
            }
        };
        store.insert(name.clone(), shape, p.kind, data).unwrap();
    }
    let mut cfg = full.config.clone();
    cfg.width = m;
    cfg.ladder = SizeLadder::new(sizes).unwrap();
    cfg.masked = false;
    RecModel::from_params(cfg, store).unwrap()
}

fn encode_at(
    model: &RecModel<f64>,
    feats: &ItemFeatures<f64>,
    b: &Batch,
    width: usize,
) -> Vec<Tensor64> {
    let bound = model.bind(false).unwrap();
    let t = model
        .encode(
            &model.view(&bound, width).unwrap(),
            feats,
            b,
            ForwardCtx::eval(),
        )
        .unwrap();
    t.layers().into_iter().cloned().collect()
}

fn plain_ce(model: &RecModel<f64>, feats: &ItemFeatures<f64>, b: &Batch, labels: &[usize]) -> f64 {
    let w = model.config.width;
    let layers = encode_at(model, feats, b, w);
    let h = layers
        .last()
        .unwrap()
        .reshape(&[b.batch * b.len, w])
        .unwrap();
    h.matmul_t(&layers[0])
        .unwrap()
        .softmax_cross_entropy(labels)
        .unwrap()
        .item()
}

fn labels_for(b: &Batch, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    b.ids
        .iter()
        .map(|&id| {
            if id == IGNORE {
                IGNORE
            } else {
                (randn(&mut r, 1)[0].abs() * 1e6) as usize % V
            }
        })
        .collect()
}

#[test]
fn segment_pass_is_prefix_consistent_at_every_layer() {
    let full = model("4,8,16,32", NormMode::Segment, 1);
    let feats = features(V, DL, DI, 2);
    let b = batch(5, 9, 3);
    let all = encode_at(&full, &feats, &b, 32);
    for &m in full.config.ladder.sizes() {
        let oracle = sliced_oracle(&full, m);
        let small = encode_at(&oracle, &feats, &b, m);
        for (i, (a, s)) in all.iter().zip(&small).enumerate() {
            let prefix = a.slice_last(0, m).unwrap();
            let e = max_abs_diff(prefix.data(), s.data());
            assert!(e < 1e-5, "m={m} layer {i}: {e}");
        }
    }
}

#[test]
fn extraction_matches_sliced_oracle() {
    for norm in [NormMode::Segment, NormMode::Full] {
        let full = model("2,4,8,16", norm, 4);
        let feats = features(V, DL, DI, 5);
        let b = batch(4, 7, 6);
        for &m in full.config.ladder.sizes() {
            let oracle = sliced_oracle(&full, m);
            let sub = extract_submodel(&full, m).unwrap();
            for ((n, a), (_, o)) in sub.params.iter().zip(oracle.params.iter()) {
                assert_eq!(a.shape, o.shape, "{n}");
                assert!(max_abs_diff(&a.data, &o.data) == 0.0, "{n}");
            }
            let via_mask = full.forward_scores(&feats, &b, m).unwrap();
            let via_sub = sub.forward_scores(&feats, &b, m).unwrap();
            let via_oracle = oracle.forward_scores(&feats, &b, m).unwrap();
            assert!(
                max_abs_diff(via_mask.data(), via_oracle.data()) < 1e-5,
                "{norm} m={m}"
            );
            assert!(
                max_abs_diff(via_sub.data(), via_oracle.data()) < 1e-5,
                "{norm} m={m}"
            );
        }
    }
}

#[test]
fn all_sizes_pass_agrees_with_per_size_scores() {
    for norm in [NormMode::Segment, NormMode::Full] {
        let full = model("4,8,16", norm, 7);
        let feats = features(V, DL, DI, 8);
        let b = batch(6, 5, 9);
        for (m, s) in full.scores_all_sizes(&feats, &b).unwrap() {
            let one = full.forward_scores(&feats, &b, m).unwrap();
            assert!(max_abs_diff(s.data(), one.data()) < 1e-12);
        }
    }
}

#[test]
fn nested_loss_is_sum_of_sliced_losses() {
    for norm in [NormMode::Segment, NormMode::Full] {
        let full = model("4,8,16", norm, 10);
        let feats = features(V, DL, DI, 11);
        let b = batch(5, 8, 12);
        let labels = labels_for(&b, 13);
        let bound = full.bind(false).unwrap();
        let loss = full
            .nested_loss(
                &bound,
                &feats,
                &b,
                &Targets::EveryStep(labels.clone()),
                ForwardCtx::eval(),
            )
            .unwrap()
            .item();
        let want: f64 = full
            .config
            .ladder
            .sizes()
            .iter()
            .map(|&m| plain_ce(&sliced_oracle(&full, m), &feats, &b, &labels))
            .sum();
        assert!((loss - want).abs() < 1e-5, "{norm}: {loss} vs {want}");
    }
}

#[test]
fn single_size_ladder_is_plain_cross_entropy() {
    let m = model("16", NormMode::Segment, 14);
    let feats = features(V, DL, DI, 15);
    let b = batch(4, 6, 16);
    let labels = labels_for(&b, 17);
    let bound = m.bind(false).unwrap();
    let loss = m
        .nested_loss(
            &bound,
            &feats,
            &b,
            &Targets::EveryStep(labels.clone()),
            ForwardCtx::eval(),
        )
        .unwrap()
        .item();
    let mut unmasked = m.clone();
    unmasked.config.masked = false;
    assert_eq!(loss, plain_ce(&unmasked, &feats, &b, &labels));
}

#[test]
fn every_size_term_decreases_under_training() {
    let mut m = model("4,8,16", NormMode::Segment, 18);
    let feats = features(V, DL, DI, 19);
    let b = batch(8, 6, 20);
    let labels = labels_for(&b, 21);
    let per_size = |m: &RecModel<f64>| -> Vec<f64> {
        m.config
            .ladder
            .sizes()
            .iter()
            .map(|&s| plain_ce(&extract_submodel(m, s).unwrap(), &feats, &b, &labels))
            .collect()
    };
    let before = per_size(&m);
    let mut state = AdamState::new(&m.params);
    let opt = AdamW::new(1e-2, 0.0);
    let targets = Targets::EveryStep(labels.clone());
    for _ in 0..200 {
        train_step(
            &mut m,
            &feats,
            &b,
            &targets,
            &mut state,
            &opt,
            None,
            ForwardCtx::eval(),
        )
        .unwrap();
    }
    let after = per_size(&m);
    for (i, (a, z)) in before.iter().zip(&after).enumerate() {
        assert!(z < a, "size index {i}: {a} -> {z}");
    }
}

#[test]
fn masked_entries_receive_no_gradient() {
    let m = model("4,8,16", NormMode::Segment, 22);
    let feats = features(V, DL, DI, 23);
    let b = batch(6, 7, 24);
    let labels = labels_for(&b, 25);
    let bound = m.bind(true).unwrap();
    let ctx = ForwardCtx {
        training: true,
        seed: 3,
        step: 0,
    };
    m.nested_loss(&bound, &feats, &b, &Targets::EveryStep(labels), ctx)
        .unwrap()
        .backward()
        .unwrap();
    let sizes = m.config.ladder.sizes().to_vec();
    for (name, p) in m.params.iter() {
        let g = bound.leaves[name].grad().unwrap();
        if let ParamKind::Matrix(case) = p.kind {
            for r in 0..p.shape[0] {
                for c in 0..p.shape[1] {
                    let gv = g[r * p.shape[1] + c];
                    if kept(case, r, c, &sizes) {
                        assert!(gv != 0.0, "{name}[{r},{c}] kept but has zero gradient");
                    } else {
                        assert_eq!(gv, 0.0, "{name}[{r},{c}] masked but has gradient");
                    }
                }
            }
        }
    }
}

#[test]
fn fusion_decomposes_by_modality() {
    let mut r = rng(26);
    let (n, d) = (7, 12);
    let lang = Tensor64::from_vec(&[n, DL], randn(&mut r, n * DL)).unwrap();
    let img = Tensor64::from_vec(&[n, DI], randn(&mut r, n * DI)).unwrap();
    let w = randn(&mut r, (DL + DI) * d);
    let bias = randn(&mut r, d);
    let e = fuse_embeddings(
        &lang,
        &img,
        &Tensor64::from_vec(&[DL + DI, d], w.clone()).unwrap(),
        &Tensor64::from_vec(&[d], bias.clone()).unwrap(),
    )
    .unwrap();
    for i in 0..n {
        for j in 0..d {
            let mut want = bias[j];
            for a in 0..DL {
                want += lang.data()[i * DL + a] * w[a * d + j];
            }
            for a in 0..DI {
                want += img.data()[i * DI + a] * w[(DL + a) * d + j];
            }
            assert!((e.data()[i * d + j] - want).abs() < 1e-12);
        }
    }
    let short = Tensor64::from_vec(&[n - 1, DI], randn(&mut r, (n - 1) * DI)).unwrap();
    assert!(fuse_embeddings(
        &lang,
        &short,
        &Tensor64::zeros(&[DL + DI, d]),
        &Tensor64::zeros(&[d])
    )
    .is_err());
}

#[test]
fn input_and_output_share_one_embedding() {
    let m = model("4,8", NormMode::Segment, 27);
    let feats = features(V, DL, DI, 28);
    let b = batch(3, 5, 29);
    let layers = encode_at(&m, &feats, &b, 8);
    let (emb, input) = (&layers[0], &layers[1]);
    for (pos, &id) in b.ids.iter().enumerate() {
        let row = &input.data()[pos * 8..pos * 8 + 8];
        if id == IGNORE {
            assert!(row.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(row, &emb.data()[id * 8..id * 8 + 8]);
        }
    }
    let scores = m.forward_scores(&feats, &b, 8).unwrap();
    let manual = last_step(layers.last().unwrap())
        .unwrap()
        .matmul_t(emb)
        .unwrap();
    assert_eq!(scores.data(), manual.data());
}

#[test]
fn left_padding_does_not_change_scores() {
    let m = model("4,8", NormMode::Segment, 30);
    let feats = features(V, DL, DI, 31);
    let seq: &[usize] = &[3, 17, 4];
    let tight = m
        .forward_scores(&feats, &Batch::from_sequences(&[seq], 3), 8)
        .unwrap();
    let padded = m
        .forward_scores(&feats, &Batch::from_sequences(&[seq], 9), 8)
        .unwrap();
    assert!(max_abs_diff(tight.data(), padded.data()) < 1e-12);
}

#[test]
fn modality_none_uses_item_table() {
    let mut cfg = ModelConfig::new("4,8".parse().unwrap(), V, 0, 0);
    cfg.modality = "none".parse().unwrap();
    let m = RecModel::<f64>::init(cfg, 32).unwrap();
    assert!(m.params.get("item_table").is_ok());
    assert!(m.params.get("fusion.w_proj").is_err());
    let s = m
        .forward_scores(&ItemFeatures::none(V), &batch(2, 4, 33), 4)
        .unwrap();
    assert_eq!(s.shape(), &[2, V]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blocks_preserve_shape(d in prop::sample::select(vec![8usize, 16, 32]), bsz in 1usize..4, len in 1usize..7, seed in 0u64..1000) {
        let ladder: Vec<String> = SizeLadder::geometric(4, d).unwrap().sizes().iter().map(|s| s.to_string()).collect();
        let m = model(&ladder.join(","), NormMode::Segment, seed);
        let feats = features(V, DL, DI, seed + 1);
        let b = batch(bsz, len, seed + 2);
        let layers = encode_at(&m, &feats, &b, d);
        for t in &layers[1..] {
            prop_assert_eq!(t.shape(), &[b.batch, b.len, d]);
        }
        prop_assert_eq!(layers[0].shape(), &[V, d]);
    }
}
