//! Transfer-learning toolkit for painting classification and tagging.
//!
//! The pipeline is file-based and staged: a dataset manifest is ingested and
//! stratified into frozen splits, raw tags are canonicalized into a fixed
//! vocabulary, backbone adapters feed a two-layer classification head that is
//! fine-tuned with Adam under plateau LR reduction and early stopping, and
//! the top base models are stacked through a Random-Forest meta-classifier.
//! Every stage reads the previous stage's artifact and writes its own.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod tags;
pub mod train;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of newline-joined items; used to fingerprint ordered lists
/// (class rosters, vocabularies, split membership).
pub fn hash_lines<'a, I>(lines: I) -> String
where
    I: IntoIterator<Item = &'a str>,
{
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
