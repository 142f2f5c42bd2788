//! Character-level LSTM language model for shallow fusion.
//!
//! Like the decoder it predicts over every id except blank (output index
//! `j` is token id `j + 1`), and starts from the sos symbol.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::rng::seeded_rng;
use crate::data::{LabelSequence, Vocabulary, BLANK, SOS_EOS};
use crate::decoder::output_index;
use crate::encoder::lstm_cell;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{check_shapes, initialize, ParamMap, ParamSpec, ParamVars};
use crate::training::checkpoint::{decode_container, encode_container};
use crate::training::optim::{accumulate, clip_grad_norm, Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: Vec<String>,
    pub embedding_dim: usize,
    pub cells: usize,
}

impl LmConfig {
    pub fn new(vocab: &Vocabulary) -> Self {
        LmConfig {
            vocab: vocab.tokens().to_vec(),
            embedding_dim: 16,
            cells: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab.clone())?;
        if self.embedding_dim == 0 || self.cells == 0 {
            return Err(Error::arg("LM embedding and cell sizes must be positive"));
        }
        Ok(())
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let v = self.vocab.len();
        vec![
            ParamSpec::weight("lm.embed", vec![v, self.embedding_dim]),
            ParamSpec::weight("lm.lstm.w_x", vec![self.embedding_dim, 4 * self.cells]),
            ParamSpec::weight("lm.lstm.w_h", vec![self.cells, 4 * self.cells]),
            ParamSpec::lstm_bias("lm.lstm.b", self.cells),
            ParamSpec::weight("lm.out.w", vec![self.cells, v - 1]),
            ParamSpec::bias("lm.out.b", v - 1),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    pub config: LmConfig,
    pub params: ParamMap,
}

impl LmModel {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = initialize(&config.param_specs(), seed);
        Ok(LmModel { config, params })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        check_shapes(&self.config.param_specs(), &self.params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let doc = serde_json::json!({ "kind": "lm", "lm": self.config });
        encode_container(&doc, &self.params)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = decode_container(bytes)?;
        if c.config.get("kind").and_then(|k| k.as_str()) != Some("lm") {
            return Err(Error::format(12, "not a language-model checkpoint"));
        }
        let config: LmConfig = serde_json::from_value(c.config["lm"].clone())
            .map_err(|e| Error::format(12, format!("LM checkpoint config: {e}")))?;
        config.validate()?;
        c.check(&config.param_specs())?;
        Ok(LmModel { config, params: c.tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmState {
    pub h: Var,
    pub c: Var,
    /// Last consumed token, `None` before the first step.
    pub last: Option<usize>,
}

/// LM weights registered in a graph.
#[derive(Clone, Copy, Debug)]
pub struct LanguageModel {
    embed: Var,
    w_x: Var,
    w_h: Var,
    b: Var,
    out_w: Var,
    out_b: Var,
    vocab_size: usize,
    cells: usize,
}

impl LanguageModel {
    pub fn new(g: &Graph, pv: &ParamVars) -> Result<Self> {
        let embed = pv.get("lm.embed")?;
        let w_h = pv.get("lm.lstm.w_h")?;
        Ok(LanguageModel {
            embed,
            w_x: pv.get("lm.lstm.w_x")?,
            w_h,
            b: pv.get("lm.lstm.b")?,
            out_w: pv.get("lm.out.w")?,
            out_b: pv.get("lm.out.b")?,
            vocab_size: g.shape(embed)[0],
            cells: g.shape(w_h)[0],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn initial_state(&self, g: &mut Graph) -> LmState {
        LmState {
            h: g.input(Tensor::zeros(&[self.cells])),
            c: g.input(Tensor::zeros(&[self.cells])),
            last: None,
        }
    }

    /// Consumes `token` and returns the log-distribution over the next
    /// symbol, `[V − 1]`.
    pub fn step(&self, g: &mut Graph, state: &LmState, token: usize) -> Result<(LmState, Var)> {
        if token == BLANK || token >= self.vocab_size {
            return Err(Error::arg(format!("language model cannot consume token id {token}")));
        }
        let x = g.row(self.embed, token)?;
        let (h, c) = lstm_cell(g, x, state.h, state.c, self.w_x, self.w_h, self.b)?;
        let logits = g.matmul(h, self.out_w)?;
        let logits = g.add_bias(logits, self.out_b)?;
        Ok((LmState { h, c, last: Some(token) }, g.log_softmax(logits)))
    }

    /// `log p(ids, eos)` starting from sos.
    pub fn sequence_logprob(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut state = self.initial_state(g);
        let mut prev = SOS_EOS;
        let mut terms = Vec::with_capacity(ids.len() + 1);
        for &target in ids.iter().chain(std::iter::once(&SOS_EOS)) {
            if target == BLANK || target >= self.vocab_size {
                return Err(Error::arg(format!("language model cannot predict token id {target}")));
            }
            let (next, lp) = self.step(g, &state, prev)?;
            terms.push(g.pick(lp, output_index(target))?);
            state = next;
            prev = target;
        }
        let all = g.concat(&terms)?;
        Ok(g.sum(all))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip: f64,
    pub optimizer: OptimizerKind,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 8,
            seed: 1,
            clip: 5.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Result of [`lm_train`]: final weights and the corpus perplexity after
/// each epoch.
#[derive(Clone, Debug)]
pub struct LmTraining {
    pub model: LmModel,
    pub perplexity: Vec<f64>,
}

/// `exp(−Σ log p / Σ predicted symbols)`, with the end symbol counted.
pub fn perplexity(model: &LmModel, corpus: &[LabelSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::arg("perplexity of an empty corpus"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        let mut g = Graph::new();
        let pv = ParamVars::register_frozen(&mut g, &model.params);
        let lm = LanguageModel::new(&g, &pv)?;
        let lp = lm.sequence_logprob(&mut g, seq.ids())?;
        nll -= g.value(lp).item();
        count += seq.len() + 1;
    }
    Ok((nll / count as f64).exp())
}

pub fn lm_train(corpus: &[LabelSequence], config: LmConfig, cfg: &LmTrainConfig) -> Result<LmTraining> {
    if corpus.is_empty() {
        return Err(Error::arg("cannot train a language model on an empty corpus"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::arg("LM batch size and learning rate must be positive"));
    }
    let mut model = LmModel::init(config, cfg.seed)?;
    for seq in corpus {
        seq.check_vocab(model.config.vocab.len())?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut perplexities = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ParamMap::new();
            for &i in batch {
                let mut g = Graph::new();
                let pv = ParamVars::register(&mut g, &model.params);
                let lm = LanguageModel::new(&g, &pv)?;
                let lp = lm.sequence_logprob(&mut g, corpus[i].ids())?;
                let loss = g.scale(lp, -1.0 / (corpus[i].len() + 1) as f64);
                accumulate(&mut acc, &g.backward(loss)?.params(&g), 1.0 / batch.len() as f64);
            }
            clip_grad_norm(&mut acc, cfg.clip);
            opt.step(&mut model.params, &acc);
        }
        let ppl = perplexity(&model, corpus)?;
        if !ppl.is_finite() {
            return Err(Error::Divergence(format!("LM perplexity became {ppl} in epoch {}", epoch + 1)));
        }
        perplexities.push(ppl);
    }
    Ok(LmTraining {
        model,
        perplexity: perplexities,
    })
}
