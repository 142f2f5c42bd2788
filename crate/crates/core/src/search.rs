//! Joint CTC/attention label-synchronous beam search with shallow LM fusion.
//!
//! Every step expands each live hypothesis by one output symbol and scores
//! it by `λ·ctc + (1−λ)·att + γ·lm`, where `ctc` is the mean over streams of
//! the CTC prefix log-probabilities, `att` the accumulated decoder
//! log-probabilities and `lm` the accumulated language-model log-probabilities.
//! The best `beam` candidates survive; those ending in the end symbol are
//! finished.

use serde::{Deserialize, Serialize};

use crate::ctc::{per_encoder_ctc, CtcPrefixScorer};
use crate::data::{Utterance, SOS_EOS};
use crate::decoder::{output_token, Decoder, DecoderState};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmModel, LmState};
use crate::model::{ctc_logits, encode_utterance, ModelParams};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamVars;

pub const DEFAULT_CTC_WEIGHT: f64 = 0.3;
pub const DEFAULT_LM_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub beam: usize,
    /// λ
    pub ctc_weight: f64,
    /// γ; ignored when no language model is given.
    pub lm_weight: f64,
    /// Longest hypothesis; defaults to the shortest encoder output.
    pub max_len: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 4,
            ctc_weight: DEFAULT_CTC_WEIGHT,
            lm_weight: DEFAULT_LM_WEIGHT,
            max_len: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::arg("beam must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::arg(format!("CTC weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::arg(format!("LM weight {} must be a nonnegative number", self.lm_weight)));
        }
        if self.max_len == Some(0) {
            return Err(Error::arg("max_len must be at least 1"));
        }
        Ok(())
    }
}

/// `λ·ctc + (1−λ)·att + γ·lm`; a zero weight drops its term entirely so an
/// unused `-inf` component cannot produce NaN.
pub fn joint_score(lambda: f64, gamma: f64, ctc: f64, att: f64, lm: f64) -> f64 {
    let mut s = 0.0;
    if lambda < 1.0 {
        s += (1.0 - lambda) * att;
    }
    if lambda > 0.0 {
        s += lambda * ctc;
    }
    if gamma > 0.0 {
        s += gamma * lm;
    }
    s
}

#[derive(Clone, Debug)]
pub struct BeamHypothesis {
    /// Emitted tokens, without sos or eos.
    pub tokens: Vec<usize>,
    pub att_score: f64,
    /// Per-stream CTC scores: prefix probabilities while live, full
    /// sequence probabilities once finished. Empty when λ = 0.
    pub ctc_scores: Vec<f64>,
    /// Mean of `ctc_scores` (0 when λ = 0).
    pub ctc_score: f64,
    /// 0 without language-model fusion.
    pub lm_score: f64,
    pub total: f64,
    pub finished: bool,
    pub decoder_state: DecoderState,
    pub lm_state: Option<LmState>,
}

impl BeamHypothesis {
    pub fn recompute_total(&self, lambda: f64, gamma: f64) -> f64 {
        joint_score(lambda, gamma, self.ctc_score, self.att_score, self.lm_score)
    }
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Finished hypotheses, best first.
    pub hypotheses: Vec<BeamHypothesis>,
    /// The best hypothesis reached `max_len` and its end symbol was forced.
    pub truncated: bool,
    pub max_len: usize,
}

impl SearchResult {
    pub fn best(&self) -> &BeamHypothesis {
        &self.hypotheses[0]
    }
}

/// Higher total first, then lexicographically smaller token sequence.
fn rank(a_total: f64, a_tokens: &[usize], b_total: f64, b_tokens: &[usize]) -> std::cmp::Ordering {
    b_total.total_cmp(&a_total).then_with(|| a_tokens.cmp(b_tokens))
}

struct Candidate {
    parent: usize,
    token: usize,
    /// Parent tokens plus `token` (eos included), the tie-break key.
    key: Vec<usize>,
    att: f64,
    ctc_scores: Vec<f64>,
    ctc: f64,
    lm: f64,
    total: f64,
}

/// Runs the search for one utterance. `decoder` is bound to the encoded
/// streams; `ctc_logits[i]` are stream `i`'s CTC head outputs and may be
/// empty when `cfg.ctc_weight` is 0.
pub fn joint_beam_search(
    g: &mut Graph,
    decoder: &Decoder,
    ctc_logits: &[Tensor],
    lm: Option<&LanguageModel>,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let lambda = cfg.ctc_weight;
    let use_ctc = lambda > 0.0;
    let lm = lm.filter(|_| cfg.lm_weight > 0.0);
    let gamma = if lm.is_some() { cfg.lm_weight } else { 0.0 };
    if use_ctc && ctc_logits.len() != decoder.num_streams() {
        return Err(Error::arg(format!(
            "{} CTC heads for {} streams",
            ctc_logits.len(),
            decoder.num_streams()
        )));
    }
    if let Some(lm) = lm {
        if lm.vocab_size() != decoder.vocab_size() {
            return Err(Error::arg("language model and recognizer vocabularies differ"));
        }
    }
    let max_len = match cfg.max_len {
        Some(m) => m,
        None => decoder.stream_lengths(g).into_iter().min().unwrap_or(1),
    };
    let mut scorers = if use_ctc {
        ctc_logits.iter().map(CtcPrefixScorer::new).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let root = BeamHypothesis {
        tokens: Vec::new(),
        att_score: 0.0,
        ctc_scores: vec![0.0; scorers.len()],
        ctc_score: 0.0,
        lm_score: 0.0,
        total: 0.0,
        finished: false,
        decoder_state: decoder.initial_state(g),
        lm_state: lm.map(|m| m.initial_state(g)),
    };
    let mut live = vec![root];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for len in 0..=max_len {
        let mut cands = Vec::new();
        let mut children = Vec::with_capacity(live.len());
        for (pi, hyp) in live.iter().enumerate() {
            let out = decoder.step(g, &hyp.decoder_state)?;
            let att_lp = g.value(out.log_probs).data().to_vec();
            let (lm_next, lm_lp) = match (lm, &hyp.lm_state) {
                (Some(lm), Some(state)) => {
                    let prev = hyp.tokens.last().copied().unwrap_or(SOS_EOS);
                    let (s, lp) = lm.step(g, state, prev)?;
                    (Some(s), g.value(lp).data().to_vec())
                }
                _ => (None, Vec::new()),
            };
            children.push((out.state, lm_next));
            for (j, &lp) in att_lp.iter().enumerate() {
                let token = output_token(j);
                let eos = token == SOS_EOS;
                // at least one token; nothing but eos once max_len is reached
                if (eos && len == 0) || (!eos && len == max_len) {
                    continue;
                }
                let ctc_scores = scorers
                    .iter_mut()
                    .map(|s| s.log_prob(&hyp.tokens, token))
                    .collect::<Result<Vec<_>>>()?;
                let ctc = if use_ctc { per_encoder_ctc(&ctc_scores)? } else { 0.0 };
                let att = hyp.att_score + lp;
                let lm_score = if gamma > 0.0 { hyp.lm_score + lm_lp[j] } else { 0.0 };
                let mut key = hyp.tokens.clone();
                key.push(token);
                cands.push(Candidate {
                    parent: pi,
                    token,
                    key,
                    att,
                    total: joint_score(lambda, gamma, ctc, att, lm_score),
                    ctc_scores,
                    ctc,
                    lm: lm_score,
                });
            }
        }
        cands.sort_by(|a, b| rank(a.total, &a.key, b.total, &b.key));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let (dec_state, lm_state) = children[c.parent];
            let parent = &live[c.parent];
            let eos = c.token == SOS_EOS;
            let mut tokens = parent.tokens.clone();
            if !eos {
                tokens.push(c.token);
            }
            let hyp = BeamHypothesis {
                tokens,
                att_score: c.att,
                ctc_scores: c.ctc_scores,
                ctc_score: c.ctc,
                lm_score: c.lm,
                total: c.total,
                finished: eos,
                decoder_state: DecoderState {
                    prev: c.token,
                    ..dec_state
                },
                lm_state,
            };
            if eos {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        // every score component only decreases as a hypothesis grows
        let best_live = live.iter().map(|h| h.total).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.total).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!finished.is_empty() && best_done > best_live) {
            break;
        }
    }
    if finished.is_empty() {
        return Err(Error::State("beam search finished no hypothesis".into()));
    }
    finished.sort_by(|a, b| {
        let ka: Vec<usize> = a.tokens.iter().copied().chain([SOS_EOS]).collect();
        let kb: Vec<usize> = b.tokens.iter().copied().chain([SOS_EOS]).collect();
        rank(a.total, &ka, b.total, &kb)
    });
    let truncated = finished[0].tokens.len() >= max_len;
    Ok(SearchResult {
        hypotheses: finished,
        truncated,
        max_len,
    })
}

/// Per-step attention of one hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub utt: String,
    pub tokens: Vec<String>,
    /// `[stream][step][frame]`
    pub frame_attention: Vec<Vec<Vec<f64>>>,
    /// `[step][stream]`
    pub stream_attention: Vec<Vec<f64>>,
}

/// Re-runs the decoder teacher-forced on `tokens`, recording frame and
/// stream weights at each step that predicts a token.
pub fn dump_attention(g: &mut Graph, decoder: &Decoder, tokens: &[usize]) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    if tokens.is_empty() {
        return Err(Error::arg("cannot dump attention for an empty hypothesis"));
    }
    let n = decoder.num_streams();
    let mut frame = vec![Vec::with_capacity(tokens.len()); n];
    let mut stream = Vec::with_capacity(tokens.len());
    let mut state = decoder.initial_state(g);
    for &tok in tokens {
        let out = decoder.step(g, &state)?;
        for (i, w) in out.attention.frame.iter().enumerate() {
            frame[i].push(g.value(*w).data().to_vec());
        }
        stream.push(g.value(out.attention.beta).data().to_vec());
        state = DecoderState { prev: tok, ..out.state };
    }
    Ok((frame, stream))
}

/// Decoding output for one utterance.
#[derive(Clone, Debug)]
pub struct Recognition {
    pub id: String,
    pub tokens: Vec<usize>,
    pub text: String,
    pub result: SearchResult,
    pub attention: Option<AttentionRecord>,
}

/// Encodes `utt`, runs [`joint_beam_search`] and optionally records the
/// attention along the best hypothesis.
pub fn recognize(
    model: &ModelParams,
    lm: Option<&LmModel>,
    utt: &Utterance,
    cfg: &SearchConfig,
    with_attention: bool,
) -> Result<Recognition> {
    let vocab = model.config.vocabulary()?;
    let mut g = Graph::new();
    let mut pv = ParamVars::register_frozen(&mut g, &model.params);
    let use_lm = lm.filter(|_| cfg.lm_weight > 0.0);
    if let Some(lm) = use_lm {
        if lm.config.vocab != model.config.vocab {
            return Err(Error::arg("language model and recognizer vocabularies differ"));
        }
        pv.merge(ParamVars::register_frozen(&mut g, &lm.params));
    }
    let hidden = encode_utterance(&mut g, &pv, model, utt)?;
    let mut logits = Vec::new();
    if cfg.ctc_weight > 0.0 {
        for (i, &h) in hidden.iter().enumerate() {
            let z = ctc_logits(&mut g, &pv, i, h)?;
            logits.push(g.value(z).clone());
        }
    }
    let decoder = Decoder::new(&mut g, &pv, &hidden)?;
    let lm_graph = match use_lm {
        Some(_) => Some(LanguageModel::new(&g, &pv)?),
        None => None,
    };
    let result = joint_beam_search(&mut g, &decoder, &logits, lm_graph.as_ref(), cfg)?;
    let tokens = result.best().tokens.clone();
    let attention = if with_attention && !tokens.is_empty() {
        let (frame_attention, stream_attention) = dump_attention(&mut g, &decoder, &tokens)?;
        Some(AttentionRecord {
            utt: utt.id.clone(),
            tokens: tokens.iter().map(|&t| vocab.token(t).unwrap_or("?").to_string()).collect(),
            frame_attention,
            stream_attention,
        })
    } else {
        None
    };
    Ok(Recognition {
        id: utt.id.clone(),
        text: vocab.decode_ids(&tokens),
        tokens,
        result,
        attention,
    })
}
