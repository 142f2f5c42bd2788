//! Synthetic multi-stream corpus.
//!
//! Every token owns a fixed `k × D` template per stream. An utterance renders
//! its transcript by concatenating the templates of its tokens and adding
//! seeded Gaussian noise; each stream is an independent rendering of the same
//! transcript. Generated values are rounded to `f32` so that a corpus written
//! to FMAT files and read back is identical to the in-memory one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::keyed_rng;
use super::{FeatureSequence, LabelSequence, Utterance, Vocabulary, SPACE_TOKEN, UNK};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sentences are `min_words..=max_words` words drawn uniformly from `words`,
/// joined by single spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGrammar {
    pub words: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
}

impl ToyGrammar {
    /// Six letters `a`–`f`, twelve words, one to three words per sentence.
    pub fn toy() -> Self {
        let words = [
            "bad", "bed", "cab", "dab", "ace", "fed", "face", "deaf", "bead", "cafe", "dead", "feed",
        ];
        ToyGrammar {
            words: words.iter().map(|w| w.to_string()).collect(),
            min_words: 1,
            max_words: 3,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(ToyGrammar::toy()),
            other => Err(Error::arg(format!("unknown task {other:?} (available: toy)"))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.words.is_empty() || self.words.iter().any(|w| w.is_empty() || w.contains(' ')) {
            return Err(Error::arg("grammar needs at least one non-empty word without spaces"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::arg(format!(
                "grammar word count range {}..={} is invalid",
                self.min_words, self.max_words
            )));
        }
        Ok(())
    }

    /// Distinct letters in first-seen order.
    pub fn letters(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.words.iter().flat_map(|w| w.chars()) {
            let s = c.to_string();
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    /// Reserved tokens, the sorted letters, then the word separator.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut letters = self.letters();
        letters.sort();
        if self.max_words > 1 {
            letters.push(SPACE_TOKEN.to_string());
        }
        Vocabulary::from_letters(&letters)
    }

    pub fn accepts(&self, sentence: &str) -> bool {
        let words: Vec<&str> = sentence.split(' ').collect();
        (self.min_words..=self.max_words).contains(&words.len())
            && words.iter().all(|w| self.words.iter().any(|g| g == w))
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> String {
        let n = rng.random_range(self.min_words..=self.max_words);
        (0..n)
            .map(|_| self.words[rng.random_range(0..self.words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub n_streams: usize,
    /// Feature dimension of every stream.
    pub feature_dim: usize,
    /// Frames rendered per token.
    pub frames_per_token: usize,
    /// Standard deviation of the additive rendering noise.
    pub sigma: f64,
    /// Drives transcripts and noise.
    pub seed: u64,
    /// Drives the token templates; keep it fixed across train/dev/test sets.
    pub template_seed: u64,
    /// Probability that an utterance has one randomly chosen stream degraded.
    pub degrade_prob: f64,
    /// Extra noise standard deviation on a degraded stream.
    pub degrade_sigma: f64,
    /// All streams render the same templates (one source heard by every
    /// array) instead of one template set per stream.
    pub shared_templates: bool,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 200,
            n_streams: 2,
            feature_dim: 8,
            frames_per_token: 6,
            sigma: 0.3,
            seed: 1,
            template_seed: 0x5eed,
            degrade_prob: 0.0,
            degrade_sigma: 1.0,
            shared_templates: false,
            id_prefix: "utt".to_string(),
        }
    }
}

fn round_f32(x: f64) -> f64 {
    f64::from(x as f32)
}

/// `k × D` template of every vocabulary id for one stream. Reserved ids get
/// templates too but are never rendered.
pub fn letter_templates(vocab_size: usize, stream: usize, cfg: &SynthConfig) -> Vec<Tensor> {
    let mut rng = keyed_rng(cfg.template_seed, &format!("templates/stream{stream}"));
    let (k, d) = (cfg.frames_per_token, cfg.feature_dim);
    (0..vocab_size)
        .map(|_| {
            let data = (0..k * d)
                .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::matrix(k, d, data).expect("k×d")
        })
        .collect()
}

/// Generates `cfg.n_utts` utterances with ids `{id_prefix}{index:05}`.
pub fn synth_corpus(grammar: &ToyGrammar, cfg: &SynthConfig) -> Result<(Vocabulary, Vec<Utterance>)> {
    grammar.validate()?;
    if cfg.n_streams == 0 {
        return Err(Error::arg("need at least one stream"));
    }
    if cfg.feature_dim == 0 || cfg.frames_per_token == 0 {
        return Err(Error::arg("feature_dim and frames_per_token must be positive"));
    }
    if !(cfg.sigma >= 0.0 && cfg.degrade_sigma >= 0.0 && (0.0..=1.0).contains(&cfg.degrade_prob)) {
        return Err(Error::arg("noise settings out of range"));
    }
    let vocab = grammar.vocabulary()?;
    let templates: Vec<Vec<Tensor>> = (0..cfg.n_streams)
        .map(|s| letter_templates(vocab.size(), if cfg.shared_templates { 0 } else { s }, cfg))
        .collect();
    let (k, d) = (cfg.frames_per_token, cfg.feature_dim);

    let mut utts = Vec::with_capacity(cfg.n_utts);
    for i in 0..cfg.n_utts {
        let id = format!("{}{:05}", cfg.id_prefix, i);
        let mut rng = keyed_rng(cfg.seed, &id);
        let text = grammar.sample(&mut rng);
        let ids = vocab.encode_text(&text);
        debug_assert!(!ids.contains(&UNK));
        let degraded = if cfg.degrade_prob > 0.0 && rng.random::<f64>() < cfg.degrade_prob {
            Some(rng.random_range(0..cfg.n_streams))
        } else {
            None
        };
        let mut streams = Vec::with_capacity(cfg.n_streams);
        for (s, tmpl) in templates.iter().enumerate() {
            let sigma = if degraded == Some(s) {
                (cfg.sigma * cfg.sigma + cfg.degrade_sigma * cfg.degrade_sigma).sqrt()
            } else {
                cfg.sigma
            };
            let mut noise = keyed_rng(cfg.seed, &format!("{id}/stream{s}"));
            let mut data = Vec::with_capacity(ids.len() * k * d);
            for &tok in &ids {
                for &v in tmpl[tok].data() {
                    let n: f64 = if sigma > 0.0 { noise.sample(StandardNormal) } else { 0.0 };
                    data.push(round_f32(v + sigma * n));
                }
            }
            streams.push(FeatureSequence::new(Tensor::matrix(ids.len() * k, d, data)?)?);
        }
        utts.push(Utterance::new(id, streams, LabelSequence::new(ids)?)?);
    }
    Ok((vocab, utts))
}

/// Adds zero-mean Gaussian noise with standard deviation `noise_sigma` to one
/// stream. The noise is keyed by `seed`, the utterance id and the stream.
pub fn corrupt_stream(u: &Utterance, stream_index: usize, noise_sigma: f64, seed: u64) -> Result<Utterance> {
    if stream_index >= u.streams.len() {
        return Err(Error::arg(format!(
            "stream index {stream_index} out of range for utterance {} with {} streams",
            u.id,
            u.streams.len()
        )));
    }
    let mut out = u.clone();
    out.streams[stream_index] = corrupt_features(&u.streams[stream_index], &u.id, stream_index, noise_sigma, seed)?;
    Ok(out)
}

/// The noise [`corrupt_stream`] adds, applied to stream `stream_index` of
/// utterance `utt_id`.
pub fn corrupt_features(
    x: &FeatureSequence,
    utt_id: &str,
    stream_index: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureSequence> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::arg(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    if noise_sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = keyed_rng(seed, &format!("{utt_id}/corrupt{stream_index}"));
    let data = x
        .frames()
        .data()
        .iter()
        .map(|&v| v + noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    FeatureSequence::new(Tensor::matrix(x.num_frames(), x.dim(), data)?)
}
