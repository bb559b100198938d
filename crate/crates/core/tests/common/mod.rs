#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use nestrec::data::{Interaction, InteractionLog};
use nestrec::Tensor64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central finite differences against reverse-mode gradients.
///
/// Returns the worst relative error over every input element. The
/// denominator is floored at 1e-4 so components that are numerically zero
/// are compared on an absolute scale.
pub fn grad_check(inputs: &[(Vec<usize>, Vec<f64>)], f: impl Fn(&[Tensor64]) -> Tensor64) -> f64 {
    let h = 1e-5;
    let leaves: Vec<Tensor64> = inputs
        .iter()
        .map(|(s, d)| Tensor64::param(s, d.clone()).unwrap())
        .collect();
    let loss = f(&leaves);
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> f64 {
        let ts: Vec<Tensor64> = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[idx] += delta;
                }
                Tensor64::from_vec(s, d).unwrap()
            })
            .collect();
        f(&ts).item()
    };

    let mut worst: f64 = 0.0;
    for (i, (_, d)) in inputs.iter().enumerate() {
        for (j, &a) in analytic[i].iter().enumerate().take(d.len()) {
            let numeric = (eval(i, j, h) - eval(i, j, -h)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
pub fn probe(t: &Tensor64) -> Tensor64 {
    let mut r = rng(99);
    let w = Tensor64::from_vec(t.shape(), randn(&mut r, t.numel())).unwrap();
    t.mul(&w).unwrap().sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn features(v: usize, dl: usize, di: usize, seed: u64) -> nestrec::model::ItemFeatures<f64> {
    let mut r = rng(seed);
    nestrec::model::ItemFeatures::new(
        v,
        Some(Tensor64::from_vec(&[v, dl], randn(&mut r, v * dl)).unwrap()),
        Some(Tensor64::from_vec(&[v, di], randn(&mut r, v * di)).unwrap()),
    )
    .unwrap()
}

/// Random sequences of lengths in `lo..=hi` over `v` items.
pub fn random_seqs(n: usize, v: usize, lo: usize, hi: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(lo..=hi);
            (0..len).map(|_| r.random_range(0..v)).collect()
        })
        .collect()
}

pub fn rec(u: &str, i: &str, ts: i64) -> Interaction {
    Interaction {
        user: u.into(),
        item: i.into(),
        ts,
    }
}

/// Removes one violating user or item at a time until none remain. The
/// k-core is unique, so any removal order reaches the same result.
pub fn k_core_oracle(records: &[Interaction], k: usize) -> BTreeSet<(String, String, i64)> {
    let mut cur: Vec<Interaction> = records.to_vec();
    loop {
        let count = |f: &dyn Fn(&Interaction) -> &str| {
            let mut m: HashMap<String, usize> = HashMap::new();
            for r in &cur {
                *m.entry(f(r).to_string()).or_default() += 1;
            }
            m
        };
        let users = count(&|r| &r.user);
        let items = count(&|r| &r.item);
        if let Some((u, _)) = users.iter().filter(|(_, &c)| c < k).min() {
            let u = u.clone();
            cur.retain(|r| r.user != u);
        } else if let Some((i, _)) = items.iter().filter(|(_, &c)| c < k).min() {
            let i = i.clone();
            cur.retain(|r| r.item != i);
        } else {
            return cur.into_iter().map(|r| (r.user, r.item, r.ts)).collect();
        }
    }
}

pub fn as_set(log: &InteractionLog) -> BTreeSet<(String, String, i64)> {
    log.records
        .iter()
        .map(|r| (r.user.clone(), r.item.clone(), r.ts))
        .collect()
}

/// Twelve users over eight items (six each), plus a chain that falls apart
/// one link per pass: `y` has a single rater (`weak`), `weak` then drops to
/// four items, which takes `x` to four raters, which takes `u_x` to four.
pub fn cascade_fixture() -> Vec<Interaction> {
    let mut v = Vec::new();
    for u in 0..12 {
        for j in 0..6 {
            v.push(rec(
                &format!("u{u:02}"),
                &format!("i{}", (u + j) % 8),
                j as i64,
            ));
        }
    }
    for (n, it) in ["i0", "i1", "i2", "x", "y"].iter().enumerate() {
        v.push(rec("weak", it, n as i64));
    }
    for (n, it) in ["i4", "i5", "i6", "i7", "x"].iter().enumerate() {
        v.push(rec("u_x", it, n as i64));
    }
    for u in ["u00", "u01", "u02"] {
        v.push(rec(u, "x", 100));
    }
    v
}
