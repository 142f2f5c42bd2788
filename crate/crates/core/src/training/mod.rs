//! Multi-task objective, optimization loop and checkpoints.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_logprob_graph, per_encoder_ctc_graph};
use crate::data::rng::seeded_rng;
use crate::data::{NormStats, Utterance, Vocabulary};
use crate::decoder::Decoder;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{score_corpus, Unit};
use crate::model::{ctc_logits, encode_utterance, ModelConfig, ModelParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamMap, ParamVars};
use crate::search::{recognize, SearchConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};

/// Log-probability substituted for a CTC head that cannot emit the labels
/// in `T'` frames.
pub const UNREACHABLE_CTC_LOGPROB: f64 = -1e4;

/// `−[λ·ctc + (1−λ)·att]`
pub fn combine_loss(lambda: f64, ctc: f64, att: f64) -> f64 {
    -(lambda * ctc + (1.0 - lambda) * att)
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub loss: Var,
    /// Per-encoder mean CTC log-probability; `None` when λ = 0.
    pub ctc: Option<f64>,
    /// Teacher-forced attention log-probability; `None` when λ = 1.
    pub att: Option<f64>,
    /// Streams whose CTC term was replaced by the penalty.
    pub unreachable: Vec<usize>,
}

/// Builds the training loss of one utterance in `g`. Terms with zero weight
/// are not built, so their parameters get no gradient.
pub fn multi_task_loss(g: &mut Graph, pv: &ParamVars, model: &ModelParams, utt: &Utterance, lambda: f64) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("CTC weight {lambda} outside [0, 1]")));
    }
    utt.transcript.check_vocab(model.config.vocab_size())?;
    let hidden = encode_utterance(g, pv, model, utt)?;
    let labels = utt.transcript.ids();
    let mut unreachable = Vec::new();
    let mut parts = Vec::new();
    let mut ctc = None;
    if lambda > 0.0 {
        let mut per_stream = Vec::with_capacity(hidden.len());
        for (i, &h) in hidden.iter().enumerate() {
            let z = ctc_logits(g, pv, i, h)?;
            let lp = ctc_logprob_graph(g, z, labels)?;
            if g.value(lp).item().is_finite() {
                per_stream.push(lp);
            } else {
                unreachable.push(i);
                per_stream.push(g.input(Tensor::scalar(UNREACHABLE_CTC_LOGPROB)));
            }
        }
        let combined = per_encoder_ctc_graph(g, &per_stream)?;
        ctc = Some(g.value(combined).item());
        parts.push(g.scale(combined, lambda));
    }
    let mut att = None;
    if lambda < 1.0 {
        let dec = Decoder::new(g, pv, &hidden)?;
        let lp = dec.teacher_forced_logprob(g, &utt.transcript)?;
        att = Some(g.value(lp).item());
        parts.push(g.scale(lp, 1.0 - lambda));
    }
    let objective = match parts[..] {
        [one] => one,
        [a, b] => g.add(a, b)?,
        _ => unreachable!("at least one term has positive weight"),
    };
    Ok(LossTerms {
        loss: g.scale(objective, -1.0),
        ctc,
        att,
        unreachable,
    })
}

/// Loss value and parameter gradients of one utterance.
pub fn loss_and_gradients(model: &ModelParams, utt: &Utterance, lambda: f64) -> Result<(f64, ParamMap, Vec<usize>)> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, &model.params);
    let terms = multi_task_loss(&mut g, &pv, model, utt, lambda)?;
    let loss = g.value(terms.loss).item();
    let grads = g.backward(terms.loss)?.params(&g);
    Ok((loss, grads, terms.unreachable))
}

pub fn evaluate_loss(model: &ModelParams, utt: &Utterance, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::register_frozen(&mut g, &model.params);
    let terms = multi_task_loss(&mut g, &pv, model, utt, lambda)?;
    Ok(g.value(terms.loss).item())
}

fn default_clip() -> f64 {
    5.0
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_lambda_decode() -> f64 {
    crate::search::DEFAULT_CTC_WEIGHT
}

fn default_dev_beam() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_attention_dim() -> usize {
    32
}

fn default_stream_attention_dim() -> usize {
    16
}

fn default_decoder_cells() -> usize {
    30
}

fn default_embedding_dim() -> usize {
    16
}

/// Optimization and architecture settings. The five optimization keys
/// without defaults must always be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_train: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm bound (0 disables clipping).
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Halve the learning rate after an epoch whose dev loss did not improve.
    #[serde(default = "default_true")]
    pub halve_lr_on_plateau: bool,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_attention_dim")]
    pub attention_dim: usize,
    #[serde(default = "default_stream_attention_dim")]
    pub stream_attention_dim: usize,
    #[serde(default = "default_decoder_cells")]
    pub decoder_cells: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Start every stream's encoder, frame attention and CTC head from the
    /// same initial weights (those of stream 0).
    #[serde(default)]
    pub tied_init: bool,
    /// Search settings for the per-epoch dev CER.
    #[serde(default = "default_dev_beam")]
    pub dev_beam: usize,
    #[serde(default = "default_lambda_decode")]
    pub dev_ctc_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_train: 0.5,
            lr: 0.3,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            clip: default_clip(),
            optimizer: default_optimizer(),
            halve_lr_on_plateau: true,
            encoder: EncoderConfig::default(),
            attention_dim: default_attention_dim(),
            stream_attention_dim: default_stream_attention_dim(),
            decoder_cells: default_decoder_cells(),
            embedding_dim: default_embedding_dim(),
            tied_init: false,
            dev_beam: default_dev_beam(),
            dev_ctc_weight: default_lambda_decode(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_train) {
            return Err(Error::arg(format!("lambda_train {} outside [0, 1]", self.lambda_train)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !(self.clip >= 0.0) {
            return Err(Error::arg("clip must be nonnegative"));
        }
        self.dev_search().validate()?;
        self.encoder.validate()
    }

    pub fn model_config(&self, vocab: &Vocabulary, input_dims: Vec<usize>) -> ModelConfig {
        ModelConfig {
            vocab: vocab.tokens().to_vec(),
            input_dims,
            encoder: self.encoder.clone(),
            attention_dim: self.attention_dim,
            stream_attention_dim: self.stream_attention_dim,
            decoder_cells: self.decoder_cells,
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn dev_search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.dev_beam,
            ctc_weight: self.dev_ctc_weight,
            lm_weight: 0.0,
            max_len: None,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

/// Passed to the per-epoch callback of [`train`].
pub struct EpochReport<'a> {
    pub log: &'a EpochLog,
    pub model: &'a ModelParams,
    /// The dev loss of this epoch is the best so far.
    pub is_best: bool,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub log: Vec<EpochLog>,
    /// Training utterances whose CTC term was unreachable for some stream.
    pub unreachable_ctc: Vec<String>,
}

/// Mean loss and corpus CER over `dev`.
pub fn evaluate(model: &ModelParams, dev: &[Utterance], lambda: f64, search: &SearchConfig) -> Result<(f64, f64)> {
    let vocab = model.config.vocabulary()?;
    let mut loss = 0.0;
    let mut refs = Vec::with_capacity(dev.len());
    let mut hyps = Vec::with_capacity(dev.len());
    for u in dev {
        loss += evaluate_loss(model, u, lambda)?;
        let r = recognize(model, None, u, search, false)?;
        refs.push((u.id.clone(), vocab.decode_ids(u.transcript.ids())));
        hyps.push((u.id.clone(), r.text));
    }
    let cer = score_corpus(&refs, &hyps, Unit::Char)?.cer;
    Ok((loss / dev.len() as f64, cer))
}

/// Copies stream 0's per-stream weights to every other stream.
pub fn tie_streams(model: &mut ModelParams) -> Result<()> {
    let dims = &model.config.input_dims;
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::arg("tied initialization needs streams of equal feature dimension"));
    }
    for i in 1..dims.len() {
        for (from, to) in [("enc0.", format!("enc{i}.")), ("att0.", format!("att{i}.")), ("ctc0.", format!("ctc{i}."))] {
            let copies: Vec<(String, Tensor)> = model
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
                .collect();
            for (k, v) in copies {
                model.params.insert(k, v);
            }
        }
    }
    Ok(())
}

fn all_finite(params: &ParamMap) -> bool {
    params.values().all(Tensor::all_finite)
}

/// Trains from a fresh initialization. Feature normalization comes from
/// `corpus`. `on_epoch` sees every epoch's log line and weights (e.g. to
/// write checkpoints); a non-finite loss or weight aborts with
/// [`Error::Divergence`] after the last good epoch was reported.
pub fn train(
    corpus: &[Utterance],
    dev: &[Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::arg("training corpus is empty"));
    }
    if dev.is_empty() {
        return Err(Error::arg("dev set is empty"));
    }
    let dims: Vec<usize> = corpus[0].streams.iter().map(|s| s.dim()).collect();
    let norm = NormStats::compute(corpus)?;
    let mut model = ModelParams::init(cfg.model_config(vocab, dims), norm, cfg.seed)?;
    if cfg.tied_init {
        tie_streams(&mut model)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let search = cfg.dev_search();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut unreachable_ctc = std::collections::BTreeSet::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ParamMap::new();
            for &i in batch {
                let (loss, grads, unreachable) = loss_and_gradients(&model, &corpus[i], cfg.lambda_train)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss became {loss} on {} in epoch {epoch}",
                        corpus[i].id
                    )));
                }
                if !unreachable.is_empty() {
                    unreachable_ctc.insert(corpus[i].id.clone());
                }
                total += loss;
                optim::accumulate(&mut acc, &grads, 1.0 / batch.len() as f64);
            }
            let norm = clip_grad_norm(&mut acc, cfg.clip);
            if !norm.is_finite() {
                return Err(Error::Divergence(format!("gradient norm became {norm} in epoch {epoch}")));
            }
            opt.step(&mut model.params, &acc);
            if !all_finite(&model.params) {
                return Err(Error::Divergence(format!("weights became non-finite in epoch {epoch}")));
            }
        }
        let (dev_loss, dev_cer) = evaluate(&model, dev, cfg.lambda_train, &search)?;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence(format!("dev loss became {dev_loss} in epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / corpus.len() as f64,
            dev_loss,
            dev_cer,
        };
        let is_best = best.as_ref().is_none_or(|b| dev_loss < b.2);
        on_epoch(&EpochReport {
            log: &entry,
            model: &model,
            is_best,
            lr: opt.lr(),
        })?;
        log.push(entry);
        if is_best {
            best = Some((model.clone(), epoch, dev_loss));
        } else if cfg.halve_lr_on_plateau {
            opt.set_lr(opt.lr() / 2.0);
        }
    }
    let (best, best_epoch) = match best {
        Some((m, e, _)) => (m, e),
        None => (model.clone(), 0),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        unreachable_ctc: unreachable_ctc.into_iter().collect(),
    })
}
