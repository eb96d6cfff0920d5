//! Corpus records converted to model inputs.

use crate::backbones::{patchify, tokenize, Vocabulary};
use crate::corpus::{CorpusRecord, ObservationLabels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `N_v × patch²` pixel patches.
    pub patches: Tensor,
    /// `BOS .. EOS` token ids of the reference report.
    pub tokens: Vec<usize>,
    pub labels: ObservationLabels,
    pub lesion_patches: Vec<usize>,
}

pub fn prepare(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    patch_size: usize,
    max_len: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let tokens = tokenize(&r.report, vocab).ids;
            if tokens.len() > max_len {
                return Err(Error::Contract(format!(
                    "report {} has {} tokens, more than max_len {max_len}",
                    r.id,
                    tokens.len()
                )));
            }
            Ok(Example {
                id: r.id.clone(),
                patches: patchify(&r.image, patch_size)?,
                tokens,
                labels: r.labels,
                lesion_patches: r.lesion_patches.clone(),
            })
        })
        .collect()
}
