//! Captions, vocabularies, dataset manifests, feature files and the
//! synthetic corpus generator.

mod features;
mod manifest;
mod synth;
mod vocab;

pub use features::{read_vfea, write_vfea, FeatureFile, VFEA_MAGIC, VFEA_VERSION};
pub use manifest::{read_manifest, write_manifest, CaptionRecord, Manifest, ManifestLine, Split};
pub use synth::{gen_synth, SynthSpec, SynthSummary, LEXICON};
pub use vocab::{encode_caption, EncodedCaption, Vocabulary};

use unicode_general_category::get_general_category;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Content words kept per caption.
pub const MAX_WORDS: usize = 18;
/// Decoder steps per padded caption: `MAX_WORDS` words plus `<end>`.
pub const SEQ_LEN: usize = MAX_WORDS + 1;

fn is_punctuation(c: char) -> bool {
    get_general_category(c).abbreviation().starts_with('P')
}

/// Lowercases, deletes Unicode punctuation (categories `P*`), splits on
/// whitespace and keeps the first [`MAX_WORDS`] tokens. `None` when nothing
/// is left.
pub fn preprocess(raw: &str) -> Option<Vec<String>> {
    let cleaned: String = raw.to_lowercase().chars().filter(|c| !is_punctuation(*c)).collect();
    let tokens: Vec<String> = cleaned.split_whitespace().take(MAX_WORDS).map(str::to_owned).collect();
    (!tokens.is_empty()).then_some(tokens)
}
