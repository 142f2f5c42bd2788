//! Architecture configuration and the trainable parameter set.

use serde::{Deserialize, Serialize};

use crate::attention::attention_specs;
use crate::data::{NormStats, Utterance, Vocabulary};
use crate::encoder::{encode_stream, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{check_shapes, initialize, ParamMap, ParamSpec, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Vocabulary tokens; position is the id.
    pub vocab: Vec<String>,
    /// Feature dimension of each stream; its length is the stream count.
    pub input_dims: Vec<usize>,
    pub encoder: EncoderConfig,
    pub attention_dim: usize,
    pub stream_attention_dim: usize,
    pub decoder_cells: usize,
    pub embedding_dim: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for `n_streams` streams of `feature_dim` features.
    pub fn new(vocab: &Vocabulary, n_streams: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab: vocab.tokens().to_vec(),
            input_dims: vec![feature_dim; n_streams],
            encoder: EncoderConfig::default(),
            attention_dim: 32,
            stream_attention_dim: 16,
            decoder_cells: 30,
            embedding_dim: 16,
        }
    }

    pub fn n_streams(&self) -> usize {
        self.input_dims.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary()?;
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::arg("model needs at least one stream with positive feature dimension"));
        }
        self.encoder.validate()?;
        if self.attention_dim == 0 || self.stream_attention_dim == 0 || self.decoder_cells == 0 || self.embedding_dim == 0 {
            return Err(Error::arg("attention, decoder and embedding sizes must be positive"));
        }
        Ok(())
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let v = self.vocab_size();
        let p = self.encoder.output_dim();
        let q = self.decoder_cells;
        let mut specs = Vec::new();
        for (i, &d) in self.input_dims.iter().enumerate() {
            specs.extend(self.encoder.param_specs(&format!("enc{i}"), d));
            specs.extend(attention_specs(&format!("att{i}"), q, p, self.attention_dim));
            specs.push(ParamSpec::weight(format!("ctc{i}.w"), vec![p, v]));
            specs.push(ParamSpec::bias(format!("ctc{i}.b"), v));
        }
        specs.extend(attention_specs("fusion", q, p, self.stream_attention_dim));
        specs.push(ParamSpec::weight("dec.embed", vec![v, self.embedding_dim]));
        specs.push(ParamSpec::weight("dec.lstm.w_x", vec![self.embedding_dim + p, 4 * q]));
        specs.push(ParamSpec::weight("dec.lstm.w_h", vec![q, 4 * q]));
        specs.push(ParamSpec::lstm_bias("dec.lstm.b", q));
        specs.push(ParamSpec::weight("dec.out.w", vec![q, v - 1]));
        specs.push(ParamSpec::bias("dec.out.b", v - 1));
        specs
    }
}

/// Everything a checkpoint holds: architecture, feature normalization and
/// the named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub params: ParamMap,
}

impl ModelParams {
    pub fn init(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = initialize(&config.param_specs(), seed);
        let m = ModelParams { config, norm, params };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        check_shapes(&self.config.param_specs(), &self.params)?;
        if self.norm.mean.len() != self.config.n_streams() {
            return Err(Error::dim(format!(
                "normalization covers {} streams, model has {}",
                self.norm.mean.len(),
                self.config.n_streams()
            )));
        }
        for (i, (m, &d)) in self.norm.mean.iter().zip(&self.config.input_dims).enumerate() {
            if m.len() != d || self.norm.std[i].len() != d {
                return Err(Error::dim(format!("normalization for stream {i} has wrong dimension")));
            }
        }
        Ok(())
    }

    pub fn num_weights(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Normalizes and encodes every stream of `utt`; returns one `T'_i × P`
/// hidden sequence per stream.
pub fn encode_utterance(g: &mut Graph, pv: &ParamVars, model: &ModelParams, utt: &Utterance) -> Result<Vec<Var>> {
    let n = model.config.n_streams();
    if utt.streams.len() != n {
        return Err(Error::arg(format!(
            "utterance {} has {} streams, model expects {n}",
            utt.id,
            utt.streams.len()
        )));
    }
    utt.streams
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if x.dim() != model.config.input_dims[i] {
                return Err(Error::dim(format!(
                    "utterance {} stream {i} has {} features, model expects {}",
                    utt.id,
                    x.dim(),
                    model.config.input_dims[i]
                )));
            }
            let xv = g.input(model.norm.apply(i, x)?);
            encode_stream(g, pv, &format!("enc{i}"), &model.config.encoder, xv)
        })
        .collect()
}

/// Per-encoder CTC head: `T' × V` logits.
pub fn ctc_logits(g: &mut Graph, pv: &ParamVars, stream: usize, hidden: Var) -> Result<Var> {
    let z = g.matmul(hidden, pv.get(&format!("ctc{stream}.w"))?)?;
    g.add_bias(z, pv.get(&format!("ctc{stream}.b"))?)
}
