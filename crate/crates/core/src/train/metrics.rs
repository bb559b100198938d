use std::fmt::Write as _;

use crate::data::{Dataset, Split, MAX_LEN};
use crate::error::Result;
use crate::model::{Batch, RecModel};
use crate::scalar::Scalar;

/// 1-based rank of `target`; ties are broken in favour of lower indices.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> usize {
    let s = scores[target];
    let mut rank = 1;
    for (i, &x) in scores.iter().enumerate() {
        if x > s || (x == s && i < target) {
            rank += 1;
        }
    }
    rank
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub recall5: f64,
    pub recall10: f64,
    pub users: usize,
}

pub const METRIC_NAMES: [&str; 4] = ["NDCG@5", "NDCG@10", "Recall@5", "Recall@10"];

impl Metrics {
    /// Averages over users. Ranks are sorted first, so the result does not
    /// depend on user order.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let mut r = ranks.to_vec();
        r.sort_unstable();
        let n = r.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| r.iter().map(|&x| f(x)).sum::<f64>() / n;
        Metrics {
            ndcg5: mean(&|x| ndcg_at(x, 5)),
            ndcg10: mean(&|x| ndcg_at(x, 10)),
            recall5: mean(&|x| recall_at(x, 5)),
            recall10: mean(&|x| recall_at(x, 10)),
            users: ranks.len(),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.ndcg5, self.ndcg10, self.recall5, self.recall10]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Push items from the user's input sequence (other than the target)
    /// to the bottom of the ranking.
    pub exclude_seen: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 256,
            exclude_seen: false,
        }
    }
}

fn rank_row<T: Scalar>(row: &[T], input: &[usize], target: usize, exclude_seen: bool) -> usize {
    if exclude_seen {
        let mut row = row.to_vec();
        for &i in input {
            if i != target {
                row[i] = T::neg_infinity();
            }
        }
        rank_of(&row, target)
    } else {
        rank_of(row, target)
    }
}

/// Ranks of each user's target at every requested size.
pub fn rank_targets<T: Scalar>(
    model: &RecModel<T>,
    data: &Dataset,
    split: Split,
    sizes: &[usize],
    opts: EvalOptions,
) -> Result<Vec<Vec<usize>>> {
    for &m in sizes {
        model.config.ladder.require(m)?;
    }
    let feats = data.features::<T>()?;
    let examples = data.seqs.examples(split);
    let mut ranks = vec![Vec::with_capacity(examples.len()); sizes.len()];
    let v = model.num_items();
    for chunk in examples.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|e| e.0).collect();
        let batch = Batch::from_sequences(&inputs, MAX_LEN);
        let all = model.scores_all_sizes(&feats, &batch)?;
        for (j, &m) in sizes.iter().enumerate() {
            let scores = &all.iter().find(|(s, _)| *s == m).expect("size in ladder").1;
            for (b, &(input, target)) in chunk.iter().enumerate() {
                let row = &scores.data()[b * v..(b + 1) * v];
                ranks[j].push(rank_row(row, input, target, opts.exclude_seen));
            }
        }
    }
    Ok(ranks)
}

pub fn evaluate<T: Scalar>(
    model: &RecModel<T>,
    data: &Dataset,
    split: Split,
    m: usize,
    opts: EvalOptions,
) -> Result<Metrics> {
    Ok(Metrics::from_ranks(
        &rank_targets(model, data, split, &[m], opts)?[0],
    ))
}

/// Metrics at several sizes from one batch of forward passes.
pub fn evaluate_sizes<T: Scalar>(
    model: &RecModel<T>,
    data: &Dataset,
    split: Split,
    sizes: &[usize],
    opts: EvalOptions,
) -> Result<Vec<(usize, Metrics)>> {
    let ranks = rank_targets(model, data, split, sizes, opts)?;
    Ok(sizes
        .iter()
        .zip(ranks)
        .map(|(&m, r)| (m, Metrics::from_ranks(&r)))
        .collect())
}

/// Ranks every item by its training-split frequency.
pub fn popularity_baseline(data: &Dataset, split: Split, exclude_seen: bool) -> Metrics {
    let scores: Vec<f64> = data.seqs.train_counts().iter().map(|&c| c as f64).collect();
    let ranks: Vec<usize> = data
        .seqs
        .examples(split)
        .iter()
        .map(|&(input, target)| rank_row(&scores, input, target, exclude_seen))
        .collect();
    Metrics::from_ranks(&ranks)
}

/// Metrics per model size: rows are metrics, columns are sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub split: Split,
    pub epoch: Option<usize>,
    pub rows: Vec<(usize, Metrics)>,
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut s = String::from("metric");
        for (m, _) in &self.rows {
            let _ = write!(s, "\t{m}");
        }
        s.push('\n');
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            s.push_str(name);
            for (_, met) in &self.rows {
                let _ = write!(s, "\t{:.6}", met.values()[i]);
            }
            s.push('\n');
        }
        s
    }

    /// Two-column `size \t value` series for one metric.
    pub fn series(&self, metric: usize) -> String {
        let mut s = format!("size\t{}\n", METRIC_NAMES[metric]);
        for (m, met) in &self.rows {
            let _ = writeln!(s, "{m}\t{:.6}", met.values()[metric]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(ndcg_at(1, 10), 1.0);
        assert_eq!(recall_at(1, 10), 1.0);
        assert_eq!(ndcg_at(3, 5), 0.5);
        assert_eq!(recall_at(3, 5), 1.0);
        assert_eq!(ndcg_at(6, 5), 0.0);
        assert_eq!(recall_at(11, 10), 0.0);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let s = [1.0, 2.0, 2.0, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 0), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn table_layout() {
        let r = MetricsReport {
            split: Split::Test,
            epoch: None,
            rows: vec![
                (8, Metrics::from_ranks(&[1])),
                (16, Metrics::from_ranks(&[20])),
            ],
        };
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "metric\t8\t16");
        assert_eq!(lines[1], "NDCG@5\t1.000000\t0.000000");
        assert_eq!(r.series(3), "size\tRecall@10\n8\t1.000000\n16\t0.000000\n");
    }
}
