use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::embfile::{read_embeddings, write_embeddings, Embeddings};
use super::interactions::{
    build_sequences, k_core_filter, read_interactions, Catalog, InteractionLog, SequenceDataset,
};
use super::meta::{read_metadata, ItemMeta, TextTemplate};
use crate::error::{Error, Result};
use crate::model::ItemFeatures;
use crate::scalar::Scalar;

/// Ordered `key=value` record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: IndexMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'));
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Data(format!("manifest lacks `{key}`")))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Data(format!("manifest value {key}={raw} is malformed")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.entries.iter()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value", no + 1))
            })?;
            m.set(k.trim(), v);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePolicy {
    /// Items without an image get a zero image embedding.
    Zero,
    /// Items without an image are removed before filtering.
    Exclude,
}

impl std::str::FromStr for ImagePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ImagePolicy::Zero),
            "exclude" => Ok(ImagePolicy::Exclude),
            _ => Err(Error::Config(format!(
                "unknown image policy `{s}` (zero|exclude)"
            ))),
        }
    }
}

impl std::fmt::Display for ImagePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImagePolicy::Zero => "zero",
            ImagePolicy::Exclude => "exclude",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub interactions: PathBuf,
    pub metadata: Option<PathBuf>,
    /// Rows aligned with the metadata file's records.
    pub text_embeddings: Option<PathBuf>,
    /// Rows aligned with the metadata records that have an `image_ref`.
    pub image_embeddings: Option<PathBuf>,
    pub image_policy: ImagePolicy,
    /// Drop items whose metadata is missing or has no title.
    pub require_metadata: bool,
    pub template: TextTemplate,
    pub core: usize,
}

impl PreprocessOptions {
    pub fn new(interactions: impl Into<PathBuf>) -> Self {
        PreprocessOptions {
            interactions: interactions.into(),
            metadata: None,
            text_embeddings: None,
            image_embeddings: None,
            image_policy: ImagePolicy::Zero,
            require_metadata: true,
            template: TextTemplate::default(),
            core: 5,
        }
    }
}

/// A preprocessed dataset: sequences, item text and aligned embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seqs: SequenceDataset,
    /// Composed text per catalog item (empty without metadata).
    pub item_text: Vec<String>,
    pub text: Option<Embeddings>,
    pub image: Option<Embeddings>,
    pub manifest: Manifest,
}

/// Embedding rows keyed by raw item id.
pub(crate) struct KeyedEmbeddings {
    pub emb: Embeddings,
    pub rows: HashMap<String, usize>,
}

pub(crate) fn assemble(
    log: &InteractionLog,
    core: usize,
    meta: Option<&HashMap<String, ItemMeta>>,
    template: &TextTemplate,
    text: Option<KeyedEmbeddings>,
    image: Option<KeyedEmbeddings>,
    mut manifest: Manifest,
) -> Result<Dataset> {
    manifest.set("raw_interactions", log.len());
    let filtered = k_core_filter(log, core)?;
    for (i, r) in filtered.rounds.iter().enumerate() {
        manifest.set(
            format!("filter_pass_{i}"),
            format!("{} {} {}", r.users, r.items, r.interactions),
        );
    }
    let seqs = build_sequences(&filtered.log)?;
    let item_text = seqs
        .catalog
        .raw_ids()
        .iter()
        .map(|id| {
            meta.and_then(|m| m.get(id))
                .map_or(String::new(), |m| template.render(m))
        })
        .collect();

    let align = |k: KeyedEmbeddings, what: &str, allow_missing: bool| -> Result<Embeddings> {
        let rows = seqs
            .catalog
            .raw_ids()
            .iter()
            .map(|id| match k.rows.get(id) {
                Some(&r) => Ok(Some(r)),
                None if allow_missing => Ok(None),
                None => Err(Error::Data(format!("no {what} embedding for item `{id}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(k.emb.reorder(&rows))
    };
    let text = text.map(|k| align(k, "text", false)).transpose()?;
    let image = image.map(|k| align(k, "image", true)).transpose()?;

    manifest.set("users", seqs.num_users());
    manifest.set("items", seqs.num_items());
    manifest.set("interactions", seqs.num_interactions());
    manifest.set(
        "train_interactions",
        seqs.num_interactions() - 2 * seqs.num_users(),
    );
    manifest.set("valid_examples", seqs.num_users());
    manifest.set("test_examples", seqs.num_users());
    manifest.set("max_len", super::MAX_LEN);
    manifest.set("text_template", &template.0);
    if let Some(t) = &text {
        manifest.set("text_dim", t.cols);
        manifest.set("text_checksum", format!("{:016x}", t.checksum()));
    }
    if let Some(i) = &image {
        manifest.set("image_dim", i.cols);
        manifest.set("image_checksum", format!("{:016x}", i.checksum()));
    }
    Ok(Dataset {
        seqs,
        item_text,
        text,
        image,
        manifest,
    })
}

/// Raw logs (and optional metadata/embeddings) to a dataset.
pub fn preprocess(opts: &PreprocessOptions) -> Result<Dataset> {
    if opts.core == 0 {
        return Err(Error::Config("core threshold must be positive".into()));
    }
    if opts.metadata.is_none()
        && (opts.text_embeddings.is_some() || opts.image_embeddings.is_some())
    {
        return Err(Error::Config(
            "embedding files are aligned by the metadata file; pass --metadata".into(),
        ));
    }
    let raw = read_interactions(&opts.interactions)?;
    let mut manifest = Manifest::new();
    manifest.set("source", "preprocess");
    manifest.set("core", opts.core);
    manifest.set("image_policy", opts.image_policy);
    manifest.set("require_metadata", opts.require_metadata);

    let meta = opts.metadata.as_deref().map(read_metadata).transpose()?;
    let mut log = raw;
    if let Some((map, _)) = &meta {
        let keep = |item: &str| match map.get(item) {
            None => !opts.require_metadata,
            Some(m) => {
                (!opts.require_metadata || m.has_required())
                    && (opts.image_policy == ImagePolicy::Zero || m.image_ref.is_some())
            }
        };
        let before = log.len();
        log = InteractionLog {
            records: log.records.into_iter().filter(|r| keep(&r.item)).collect(),
        };
        manifest.set("metadata_dropped_interactions", before - log.len());
    }

    let keyed = |path: &Path, ids: Vec<String>, what: &str| -> Result<KeyedEmbeddings> {
        let emb = read_embeddings(path)?;
        if emb.rows != ids.len() {
            return Err(Error::format(
                path,
                format!(
                    "expected {} {what} rows (metadata records), found {}",
                    ids.len(),
                    emb.rows
                ),
            ));
        }
        Ok(KeyedEmbeddings {
            emb,
            rows: ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect(),
        })
    };
    let text = match (&opts.text_embeddings, &meta) {
        (Some(p), Some((_, order))) => Some(keyed(p, order.clone(), "text")?),
        _ => None,
    };
    let image = match (&opts.image_embeddings, &meta) {
        (Some(p), Some((map, order))) => {
            let ids = order
                .iter()
                .filter(|id| map[*id].image_ref.is_some())
                .cloned()
                .collect();
            Some(keyed(p, ids, "image")?)
        }
        _ => None,
    };
    assemble(
        &log,
        opts.core,
        meta.as_ref().map(|(m, _)| m),
        &opts.template,
        text,
        image,
        manifest,
    )
}

const SEQUENCES: &str = "sequences.tsv";
const ITEMS: &str = "items.tsv";
const TEXT: &str = "text.emb";
const IMAGE: &str = "image.emb";
const MANIFEST: &str = "manifest.txt";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.seqs.num_items()
    }

    pub fn features<T: Scalar>(&self) -> Result<ItemFeatures<T>> {
        ItemFeatures::new(
            self.num_items(),
            self.text.as_ref().map(Embeddings::to_tensor),
            self.image.as_ref().map(Embeddings::to_tensor),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut seq = String::new();
        for (u, s) in self.seqs.users.iter().zip(&self.seqs.sequences) {
            let items: Vec<String> = s.iter().map(usize::to_string).collect();
            let _ = writeln!(seq, "{u}\t{}", items.join(" "));
        }
        write(&dir.join(SEQUENCES), seq)?;
        let mut items = String::new();
        for (i, id) in self.seqs.catalog.raw_ids().iter().enumerate() {
            let text = self.item_text[i].replace(['\t', '\n', '\r'], " ");
            let _ = writeln!(items, "{i}\t{id}\t{text}");
        }
        write(&dir.join(ITEMS), items)?;
        for (name, emb) in [(TEXT, &self.text), (IMAGE, &self.image)] {
            let path = dir.join(name);
            match emb {
                Some(e) => write_embeddings(&path, e)?,
                None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
                None => {}
            }
        }
        write(&dir.join(MANIFEST), self.manifest.to_text())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest = Manifest::parse(&read_text(&mpath)?, &mpath)?;

        let ipath = dir.join(ITEMS);
        let mut raw_ids = Vec::new();
        let mut item_text = Vec::new();
        for (no, line) in read_text(&ipath)?.lines().enumerate() {
            let mut f = line.splitn(3, '\t');
            let (idx, id) = (f.next(), f.next());
            let (Some(idx), Some(id)) = (idx, id) else {
                return Err(Error::format(
                    &ipath,
                    format!("line {}: expected index, id, text", no + 1),
                ));
            };
            if idx.parse::<usize>().ok() != Some(no) {
                return Err(Error::format(
                    &ipath,
                    format!("line {}: expected index {no}, found `{idx}`", no + 1),
                ));
            }
            raw_ids.push(id.to_string());
            item_text.push(f.next().unwrap_or("").to_string());
        }
        let catalog = Catalog::new(raw_ids.clone())?;
        if catalog.raw_ids() != raw_ids.as_slice() {
            return Err(Error::format(&ipath, "item ids are not in sorted order"));
        }

        let spath = dir.join(SEQUENCES);
        let mut users = Vec::new();
        let mut sequences = Vec::new();
        for (no, line) in read_text(&spath)?.lines().enumerate() {
            let (u, rest) = line.split_once('\t').ok_or_else(|| {
                Error::format(&spath, format!("line {}: expected user and items", no + 1))
            })?;
            let s = rest
                .split_whitespace()
                .map(|x| {
                    x.parse::<usize>().map_err(|_| {
                        Error::format(&spath, format!("line {}: bad item index `{x}`", no + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            users.push(u.to_string());
            sequences.push(s);
        }
        let seqs = SequenceDataset::new(catalog, users, sequences)?;

        let load = |name: &str, key: &str| -> Result<Option<Embeddings>> {
            let path = dir.join(name);
            let Some(expected) = manifest.get(key) else {
                return Ok(None);
            };
            let e = super::embfile::load_embeddings(&path, seqs.num_items())?;
            let found = format!("{:016x}", e.checksum());
            if found != expected {
                return Err(Error::format(
                    &path,
                    format!("expected checksum {expected} from manifest, found {found}"),
                ));
            }
            Ok(Some(e))
        };
        let text = load(TEXT, "text_checksum")?;
        let image = load(IMAGE, "image_checksum")?;
        Ok(Dataset {
            seqs,
            item_text,
            text,
            image,
            manifest,
        })
    }
}
