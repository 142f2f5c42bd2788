//! Connectionist temporal classification.
//!
//! The loss is the log-space forward recursion over the blank-augmented
//! label lattice, built from graph ops so its gradient comes from
//! [`Graph::backward`]. [`CtcPrefixScorer`] is the separate incremental
//! recursion used by label-synchronous decoding.

use std::collections::HashMap;
use std::sync::Arc;

use crate::data::{BLANK, SOS_EOS};
use crate::error::{Error, Result};
use crate::numerics::{log_add, log_softmax, Graph, Tensor, Var};

/// `[blank, l1, blank, l2, …, lL, blank]`
pub fn extended_labels(labels: &[usize]) -> Arc<[usize]> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext.into()
}

fn check_labels(labels: &[usize], vocab: usize) -> Result<()> {
    for &l in labels {
        if l == BLANK {
            return Err(Error::arg("CTC labels contain the blank id"));
        }
        if l >= vocab {
            return Err(Error::arg(format!("CTC label {l} outside {vocab} output classes")));
        }
    }
    Ok(())
}

/// `log p_ctc(labels | logits)` as a graph node. `logits` is `T' × V`
/// (unnormalized); rows are log-softmaxed here. Label sequences that no
/// alignment can produce give `-inf`.
pub fn ctc_logprob_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::dim(format!("CTC logits must be T'×V with T' ≥ 1, got {shape:?}")));
    }
    check_labels(labels, shape[1])?;
    let lp = g.log_softmax(logits);
    let ext = extended_labels(labels);
    let row = g.row(lp, 0)?;
    let mut alpha = g.ctc_init(row, ext.clone());
    for t in 1..shape[0] {
        let row = g.row(lp, t)?;
        alpha = g.ctc_step(alpha, row, ext.clone());
    }
    if ext.len() == 1 {
        g.pick(alpha, 0)
    } else {
        let tail = g.slice(alpha, ext.len() - 2, 2)?;
        Ok(g.logsumexp(tail))
    }
}

/// Plain-value wrapper around [`ctc_logprob_graph`].
pub fn ctc_logprob(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let out = ctc_logprob_graph(&mut g, x, labels)?;
    Ok(g.value(out).item())
}

/// Equal-weight average of per-encoder CTC log-probabilities.
pub fn per_encoder_ctc(stream_logprobs: &[f64]) -> Result<f64> {
    if stream_logprobs.is_empty() {
        return Err(Error::arg("per-encoder CTC needs at least one stream"));
    }
    Ok(stream_logprobs.iter().sum::<f64>() / stream_logprobs.len() as f64)
}

pub fn per_encoder_ctc_graph(g: &mut Graph, stream_logprobs: &[Var]) -> Result<Var> {
    if stream_logprobs.is_empty() {
        return Err(Error::arg("per-encoder CTC needs at least one stream"));
    }
    let all = g.concat(stream_logprobs)?;
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / stream_logprobs.len() as f64))
}

/// Frame-wise argmax, repeats merged, blanks removed.
pub fn ctc_greedy_collapse(logits: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[derive(Clone, Debug)]
struct PrefixState {
    /// log P(first t+1 frames emit the prefix, ending in a non-blank)
    r_nonblank: Vec<f64>,
    /// log P(first t+1 frames emit the prefix, ending in blank)
    r_blank: Vec<f64>,
    /// log P(the output starts with the prefix)
    prefix: f64,
}

/// Incremental CTC prefix probabilities for one utterance.
///
/// States are cached per prefix; a prefix can only be extended after it was
/// itself produced by [`CtcPrefixScorer::log_prob`] (the empty prefix is
/// always available).
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer {
    log_probs: Vec<Vec<f64>>,
    cache: HashMap<Vec<usize>, PrefixState>,
}

impl CtcPrefixScorer {
    pub fn new(logits: &Tensor) -> Result<Self> {
        if logits.rank() != 2 || logits.rows() == 0 || logits.cols() <= SOS_EOS {
            return Err(Error::dim(format!(
                "prefix scorer needs T'×V logits with T' ≥ 1, got {:?}",
                logits.shape()
            )));
        }
        let log_probs: Vec<Vec<f64>> = (0..logits.rows()).map(|t| log_softmax(logits.row(t))).collect();
        let mut r_blank = Vec::with_capacity(log_probs.len());
        let mut acc = 0.0;
        for row in &log_probs {
            acc += row[BLANK];
            r_blank.push(acc);
        }
        let root = PrefixState {
            r_nonblank: vec![f64::NEG_INFINITY; log_probs.len()],
            r_blank,
            prefix: 0.0,
        };
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), root);
        Ok(CtcPrefixScorer { log_probs, cache })
    }

    pub fn num_frames(&self) -> usize {
        self.log_probs.len()
    }

    /// Cached `log P(output starts with prefix)`.
    pub fn prefix_log_prob(&self, prefix: &[usize]) -> Option<f64> {
        self.cache.get(prefix).map(|s| s.prefix)
    }

    /// Cumulative score of `prefix + token`: the prefix probability for a
    /// letter, or the full-sequence probability of `prefix` when `token` is
    /// the end symbol.
    pub fn log_prob(&mut self, prefix: &[usize], token: usize) -> Result<f64> {
        let vocab = self.log_probs[0].len();
        if token == BLANK || token >= vocab {
            return Err(Error::arg(format!("cannot extend a CTC prefix with token {token}")));
        }
        let parent = self.cache.get(prefix).ok_or_else(|| {
            Error::State(format!("prefix {prefix:?} was never produced by this scorer"))
        })?;
        let last = parent.r_blank.len() - 1;
        if token == SOS_EOS {
            return Ok(log_add(parent.r_nonblank[last], parent.r_blank[last]));
        }
        let mut key = prefix.to_vec();
        key.push(token);
        if let Some(s) = self.cache.get(&key) {
            return Ok(s.prefix);
        }
        let state = self.extend(parent, prefix.last().copied(), token);
        let score = state.prefix;
        self.cache.insert(key, state);
        Ok(score)
    }

    /// Incremental score `log_prob(prefix, token) − prefix_log_prob(prefix)`.
    pub fn score(&mut self, prefix: &[usize], token: usize) -> Result<f64> {
        let total = self.log_prob(prefix, token)?;
        let base = self.prefix_log_prob(prefix).expect("checked by log_prob");
        Ok(total - base)
    }

    fn extend(&self, parent: &PrefixState, last: Option<usize>, c: usize) -> PrefixState {
        let t_len = self.log_probs.len();
        let x = &self.log_probs;
        let mut r_n = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        if last.is_none() {
            r_n[0] = x[0][c];
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            // paths that finished the parent prefix by frame t-1 and may start c at t
            let phi = if last == Some(c) {
                parent.r_blank[t - 1]
            } else {
                log_add(parent.r_blank[t - 1], parent.r_nonblank[t - 1])
            };
            r_n[t] = log_add(r_n[t - 1], phi) + x[t][c];
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + x[t][BLANK];
            psi = log_add(psi, phi + x[t][c]);
        }
        PrefixState {
            r_nonblank: r_n,
            r_blank: r_b,
            prefix: psi,
        }
    }
}
