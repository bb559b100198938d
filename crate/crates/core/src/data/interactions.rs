use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub ts: i64,
}

/// Interaction records in input order, without duplicate triples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    /// Builds a log, dropping repeated `(user, item, ts)` triples (first
    /// occurrence wins).
    pub fn new(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut seen = HashSet::new();
        let records = records
            .into_iter()
            .filter(|r| seen.insert(r.clone()))
            .collect();
        InteractionLog { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.records
            .iter()
            .map(|r| &r.user)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn n_items(&self) -> usize {
        self.records
            .iter()
            .map(|r| &r.item)
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Opens a file, transparently decompressing gzip content.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

/// Reads `user \t item \t timestamp` lines. Blank lines are skipped.
pub fn read_interactions(path: &Path) -> Result<InteractionLog> {
    let reader = open_maybe_gz(path)?;
    let mut records = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected 3 tab-separated fields, found {}",
                    no + 1,
                    fields.len()
                ),
            ));
        }
        let ts = fields[2].trim().parse::<i64>().map_err(|_| {
            Error::format(
                path,
                format!("line {}: bad timestamp `{}`", no + 1, fields[2]),
            )
        })?;
        records.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            ts,
        });
    }
    Ok(InteractionLog::new(records))
}

/// Sizes after one filtering pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterRound {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub log: InteractionLog,
    /// Counts before filtering followed by one entry per pass.
    pub rounds: Vec<FilterRound>,
}

fn round_of(log: &InteractionLog) -> FilterRound {
    FilterRound {
        users: log.n_users(),
        items: log.n_items(),
        interactions: log.len(),
    }
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// nothing changes.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> Result<FilterOutcome> {
    let mut cur = log.clone();
    let mut rounds = vec![round_of(&cur)];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &cur.records {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let kept: Vec<Interaction> = cur
            .records
            .iter()
            .filter(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .cloned()
            .collect();
        let changed = kept.len() != cur.records.len();
        cur = InteractionLog { records: kept };
        if !changed {
            break;
        }
        rounds.push(round_of(&cur));
    }
    if cur.is_empty() {
        let trail: Vec<String> = rounds
            .iter()
            .enumerate()
            .map(|(i, r)| {
                format!(
                    "pass {i}: {} users, {} items, {} interactions",
                    r.users, r.items, r.interactions
                )
            })
            .collect();
        return Err(Error::Data(format!(
            "{k}-core filtering left no interactions ({})",
            trail.join("; ")
        )));
    }
    Ok(FilterOutcome { log: cur, rounds })
}

pub fn five_core_filter(log: &InteractionLog) -> Result<FilterOutcome> {
    k_core_filter(log, 5)
}

/// Contiguous item indices, ordered by raw id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(mut raw: Vec<String>) -> Result<Self> {
        raw.sort();
        let before = raw.len();
        raw.dedup();
        if raw.len() != before {
            return Err(Error::Data("duplicate item ids in catalog".into()));
        }
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Catalog { raw, index })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn index_of(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw_id(&self, index: usize) -> &str {
        &self.raw[index]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (valid|test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Chronological per-user item sequences over a reindexed catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    pub catalog: Catalog,
    pub users: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
}

impl SequenceDataset {
    pub fn new(catalog: Catalog, users: Vec<String>, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if users.len() != sequences.len() {
            return Err(Error::Data(format!(
                "{} users but {} sequences",
                users.len(),
                sequences.len()
            )));
        }
        for (u, s) in users.iter().zip(&sequences) {
            if s.len() < 3 {
                return Err(Error::Data(format!(
                    "user {u} has {} interactions, need at least 3",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= catalog.len()) {
                return Err(Error::Data(format!(
                    "user {u}: item index {bad} outside catalog of {}",
                    catalog.len()
                )));
            }
        }
        Ok(SequenceDataset {
            catalog,
            users,
            sequences,
        })
    }

    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Training prefix `s[0:n−2]`.
    pub fn train_seq(&self, user: usize) -> &[usize] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    /// `(input, target)` for a user on a held-out split.
    pub fn example(&self, user: usize, split: Split) -> (&[usize], usize) {
        let s = &self.sequences[user];
        let n = s.len();
        match split {
            Split::Valid => (&s[..n - 2], s[n - 2]),
            Split::Test => (&s[..n - 1], s[n - 1]),
        }
    }

    pub fn examples(&self, split: Split) -> Vec<(&[usize], usize)> {
        (0..self.num_users())
            .map(|u| self.example(u, split))
            .collect()
    }

    /// Item frequencies over the training prefixes.
    pub fn train_counts(&self) -> Vec<u64> {
        let mut c = vec![0u64; self.num_items()];
        for u in 0..self.num_users() {
            for &i in self.train_seq(u) {
                c[i] += 1;
            }
        }
        c
    }
}

/// Groups a log by user (sorted by user id), orders each user's items by
/// timestamp with ties kept in input order, and reindexes items.
pub fn build_sequences(log: &InteractionLog) -> Result<SequenceDataset> {
    let catalog = Catalog::new(
        log.records
            .iter()
            .map(|r| r.item.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect(),
    )?;
    let mut by_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for r in &log.records {
        by_user.entry(&r.user).or_default().push(r);
    }
    let mut users = Vec::with_capacity(by_user.len());
    let mut sequences = Vec::with_capacity(by_user.len());
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.ts);
        users.push(user.to_string());
        sequences.push(
            recs.iter()
                .map(|r| catalog.index_of(&r.item).expect("item in catalog"))
                .collect(),
        );
    }
    SequenceDataset::new(catalog, users, sequences)
}
