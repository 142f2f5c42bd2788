//! Feature and label containers, file formats, and the synthetic corpus.

mod fmat;
mod manifest;
mod norm;
pub mod rng;
mod synth;
mod vocab;

pub use fmat::{decode_features, encode_features, read_features, write_features};
pub use manifest::{load_manifest, read_manifest, resolve_stream_path, write_manifest, ManifestEntry};
pub use norm::NormStats;
pub use synth::{corrupt_features, corrupt_stream, letter_templates, synth_corpus, SynthConfig, ToyGrammar};
pub use vocab::{
    LabelSequence, Vocabulary, BLANK, BLANK_TOKEN, SOS_EOS, SOS_EOS_TOKEN, SPACE_TOKEN, UNK, UNK_TOKEN,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One stream's `T × D` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 || frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::arg(format!(
                "features must be a non-empty T×D matrix, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::arg("features contain non-finite values"));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Parallel recordings of one sentence: one feature sequence per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub streams: Vec<FeatureSequence>,
    pub transcript: LabelSequence,
}

impl Utterance {
    pub fn new(id: String, streams: Vec<FeatureSequence>, transcript: LabelSequence) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::arg(format!("utterance {id} has no streams")));
        }
        Ok(Utterance {
            id,
            streams,
            transcript,
        })
    }

    /// Copy keeping only the listed streams, in the listed order.
    pub fn select_streams(&self, which: &[usize]) -> Result<Utterance> {
        let streams = which
            .iter()
            .map(|&i| {
                self.streams.get(i).cloned().ok_or_else(|| {
                    Error::arg(format!("utterance {} has no stream {i}", self.id))
                })
            })
            .collect::<Result<_>>()?;
        Utterance::new(self.id.clone(), streams, self.transcript.clone())
    }
}
