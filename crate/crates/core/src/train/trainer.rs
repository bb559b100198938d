use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use super::adamw::{adamw_step, clip_grad_norm, AdamW};
use super::config::{TargetMode, TrainConfig};
use super::metrics::{evaluate_sizes, EvalOptions, Metrics, MetricsReport};
use crate::checkpoint::{AdamState, Checkpoint};
use crate::data::{pad_truncate, Dataset, Split, MAX_LEN};
use crate::error::{Error, Result};
use crate::model::{extract_submodel, Batch, ForwardCtx, ItemFeatures, RecModel, Targets};
use crate::rng::{self, sites};
use crate::scalar::Scalar;

/// Tracks the best validation score and counts epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Only a strict improvement resets the counter.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        match self.best {
            Some((_, b)) if metric <= b || metric.is_nan() => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.bad_epochs = 0;
                Verdict::Improved
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation NDCG@10 per ladder size.
    pub valid_ndcg10: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// Training hit a non-finite loss or gradient; the best model so far
    /// is kept.
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub best: Checkpoint<T>,
    pub best_epoch: usize,
    pub best_valid: Metrics,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Loss after every optimizer step.
    pub step_losses: Vec<f64>,
}

pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss");
    if let Some(first) = history.first() {
        for (m, _) in &first.valid_ndcg10 {
            let _ = write!(s, "\tndcg10@{m}");
        }
    }
    s.push('\n');
    for r in history {
        let _ = write!(s, "{}\t{:.6}", r.epoch, r.train_loss);
        for (_, v) in &r.valid_ndcg10 {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Input batch and labels for a group of training sequences.
pub fn training_batch(seqs: &[&[usize]], mode: TargetMode) -> (Batch, Targets) {
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let batch = Batch::from_sequences(&inputs, MAX_LEN);
    let targets = match mode {
        TargetMode::Last => Targets::Last(seqs.iter().map(|s| s[s.len() - 1]).collect()),
        TargetMode::Every => {
            let mut labels = Vec::with_capacity(batch.batch * batch.len);
            for s in seqs {
                labels.extend(pad_truncate(&s[1..], batch.len));
            }
            Targets::EveryStep(labels)
        }
    };
    (batch, targets)
}

/// One optimizer step on one batch. Returns the loss.
pub fn train_step<T: Scalar>(
    model: &mut RecModel<T>,
    feats: &ItemFeatures<T>,
    batch: &Batch,
    targets: &Targets,
    state: &mut AdamState<T>,
    opt: &AdamW,
    grad_clip: Option<f64>,
    ctx: ForwardCtx,
) -> Result<f64> {
    let bound = model.bind(true)?;
    let loss = model.nested_loss(&bound, feats, batch, targets, ctx)?;
    let value = loss.item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {value} at step {}",
            state.step + 1
        )));
    }
    loss.backward()?;
    let mut grads: IndexMap<String, Vec<T>> = bound
        .leaves
        .iter()
        .map(|(n, t)| {
            (
                n.clone(),
                t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]),
            )
        })
        .collect();
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    adamw_step(&mut model.params, &grads, state, opt)?;
    Ok(value)
}

/// Trains one nested model; every ladder size is optimized jointly.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let mcfg = cfg.model_config(data)?;
    let feats = data.features::<T>()?;
    let mut model = RecModel::<T>::init(mcfg, cfg.seed)?;
    let mut state = AdamState::new(&model.params);
    let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let sizes = model.config.ladder.sizes().to_vec();
    let full = model.config.width;
    let eval_opts = EvalOptions {
        batch_size: cfg.eval_batch_size,
        exclude_seen: cfg.exclude_seen,
    };
    let users: Vec<usize> = (0..data.seqs.num_users())
        .filter(|&u| data.seqs.train_seq(u).len() >= 2)
        .collect();
    if users.is_empty() {
        return Err(Error::Data(
            "no user has two or more training interactions".into(),
        ));
    }

    let mut extra = crate::data::Manifest::new();
    for (k, v) in cfg.entries() {
        extra.set(format!("train.{k}"), v);
    }
    let snapshot = |model: &RecModel<T>, state: &AdamState<T>, epoch: usize| {
        let mut e = extra.clone();
        e.set("best_epoch", epoch);
        Checkpoint {
            model: model.clone(),
            optimizer: Some(state.clone()),
            extra: e,
        }
    };

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = snapshot(&model, &state, 0);
    let mut best_valid = None;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut order = users.clone();
        order.shuffle(&mut rng::stream(cfg.seed, sites::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&u| data.seqs.train_seq(u)).collect();
            let (batch, targets) = training_batch(&seqs, cfg.targets);
            let ctx = ForwardCtx {
                training: cfg.dropout > 0.0,
                seed: cfg.seed,
                step: state.step,
            };
            match train_step(
                &mut model,
                &feats,
                &batch,
                &targets,
                &mut state,
                &opt,
                cfg.grad_clip,
                ctx,
            ) {
                Ok(l) => {
                    step_losses.push(l);
                    total += l;
                    batches += 1;
                }
                Err(Error::NonFinite(msg)) => {
                    stop = StopReason::Diverged(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let valid = evaluate_sizes(&model, data, Split::Valid, &sizes, eval_opts)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches.max(1) as f64,
            valid_ndcg10: valid.iter().map(|(m, x)| (*m, x.ndcg10)).collect(),
        };
        on_epoch(&record);
        history.push(record);
        let at_full = valid
            .iter()
            .find(|(m, _)| *m == full)
            .expect("full size evaluated")
            .1;
        match stopper.observe(epoch, at_full.ndcg10) {
            Verdict::Improved => {
                best = snapshot(&model, &state, epoch);
                best_valid = Some(at_full);
            }
            Verdict::Continue => {}
            Verdict::Stop => {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let best_valid = match best_valid {
        Some(v) => v,
        None => evaluate_sizes(&best.model, data, Split::Valid, &[full], eval_opts)?[0].1,
    };
    Ok(TrainOutcome {
        best_epoch: stopper.best.map_or(0, |b| b.0),
        best,
        best_valid,
        history,
        stop,
        step_losses,
    })
}

/// Standalone models for every ladder size.
pub fn extract_all<T: Scalar>(model: &RecModel<T>) -> Result<Vec<RecModel<T>>> {
    model
        .config
        .ladder
        .sizes()
        .iter()
        .map(|&m| extract_submodel(model, m))
        .collect()
}

/// Extracts every size and evaluates each submodel at its own width.
pub fn size_curve<T: Scalar>(
    model: &RecModel<T>,
    data: &Dataset,
    split: Split,
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for sub in extract_all(model)? {
        let m = sub.config.width;
        rows.push((m, evaluate_sizes(&sub, data, split, &[m], opts)?[0].1));
    }
    Ok(MetricsReport {
        split,
        epoch: None,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::IGNORE;

    #[test]
    fn stops_after_patience_with_best_kept() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 0.5), Verdict::Improved);
        assert_eq!(s.observe(2, 0.4), Verdict::Stop);
        assert_eq!(s.best, Some((1, 0.5)));

        let mut s = EarlyStopper::new(3);
        for (e, v) in [(1, 0.1), (2, 0.1), (3, 0.2), (4, 0.15), (5, 0.19)] {
            assert_ne!(s.observe(e, v), Verdict::Stop);
        }
        assert_eq!(s.observe(6, 0.2), Verdict::Stop);
        assert_eq!(s.best, Some((3, 0.2)));
    }

    #[test]
    fn every_step_labels_are_shifted_inputs() {
        let a: &[usize] = &[1, 2, 3, 4];
        let b: &[usize] = &[7, 8];
        let (batch, t) = training_batch(&[a, b], TargetMode::Every);
        assert_eq!(batch.len, 3);
        assert_eq!(batch.ids, vec![1, 2, 3, IGNORE, IGNORE, 7]);
        match t {
            Targets::EveryStep(l) => assert_eq!(l, vec![2, 3, 4, IGNORE, IGNORE, 8]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn history_has_header_and_one_line_per_epoch() {
        let h = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 2.5,
                valid_ndcg10: vec![(8, 0.1), (16, 0.2)],
            },
            EpochRecord {
                epoch: 2,
                train_loss: 2.0,
                valid_ndcg10: vec![(8, 0.15), (16, 0.25)],
            },
        ];
        assert_eq!(
            history_tsv(&h),
            "epoch\ttrain_loss\tndcg10@8\tndcg10@16\n1\t2.500000\t0.100000\t0.200000\n2\t2.000000\t0.150000\t0.250000\n"
        );
    }
}
