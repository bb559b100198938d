//! Interaction logs, preprocessing, item text, embedding files and
//! synthetic datasets.

mod dataset;
mod embfile;
mod interactions;
mod meta;
mod synth;

pub use dataset::{preprocess, Dataset, ImagePolicy, Manifest, PreprocessOptions};
pub use embfile::{
    load_embeddings, read_embeddings, write_embeddings, Embeddings, EMB_MAGIC, EMB_VERSION,
};
pub use interactions::{
    build_sequences, five_core_filter, k_core_filter, open_maybe_gz, read_interactions, Catalog,
    FilterOutcome, FilterRound, Interaction, InteractionLog, SequenceDataset, Split,
};
pub use meta::{compose_item_text, read_metadata, ItemMeta, TextTemplate};
pub use synth::{synth_generate, SynthConfig, SynthData};

use crate::tensor::IGNORE;

/// Maximum input length.
pub const MAX_LEN: usize = 50;

/// Keeps the most recent `len` items and left-pads with [`IGNORE`] to
/// exactly `len` entries.
pub fn pad_truncate(seq: &[usize], len: usize) -> Vec<usize> {
    let keep = &seq[seq.len().saturating_sub(len)..];
    let mut out = vec![IGNORE; len - keep.len()];
    out.extend_from_slice(keep);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pads_short_and_truncates_long() {
        assert_eq!(pad_truncate(&[1, 2], 4), vec![IGNORE, IGNORE, 1, 2]);
        assert_eq!(pad_truncate(&[1, 2, 3, 4, 5], 3), vec![3, 4, 5]);
        assert_eq!(pad_truncate(&[], 2), vec![IGNORE, IGNORE]);
    }

    proptest! {
        #[test]
        fn pad_truncate_keeps_recent_suffix(s in prop::collection::vec(0usize..1000, 0..120)) {
            let p = pad_truncate(&s, MAX_LEN);
            prop_assert_eq!(p.len(), MAX_LEN);
            let kept = s.len().min(MAX_LEN);
            prop_assert_eq!(&p[MAX_LEN - kept..], &s[s.len() - kept..]);
            prop_assert!(p[..MAX_LEN - kept].iter().all(|&x| x == IGNORE));
        }
    }
}
