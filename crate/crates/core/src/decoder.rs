//! Attention decoder: one LSTM layer fed with the previous token's embedding
//! and the stream-fused context vector.
//!
//! Output distributions cover every id except blank; output index `j` is
//! token id `j + 1`, so index 0 is the end symbol.

use crate::attention::{content_attention, stream_fusion, AttentionMemory, AttentionParams};
use crate::data::{LabelSequence, BLANK, SOS_EOS};
use crate::encoder::lstm_cell;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::ParamVars;

/// Output-distribution index of a token id.
pub fn output_index(token: usize) -> usize {
    debug_assert!(token != BLANK);
    token - 1
}

pub fn output_token(index: usize) -> usize {
    index + 1
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    /// Token fed at the next step (sos at the start).
    pub prev: usize,
}

/// Attention recorded at one decoder step.
#[derive(Clone, Debug)]
pub struct StepAttention {
    /// Frame weights per stream, `[T'_i]` each.
    pub frame: Vec<Var>,
    /// Stream weights `[n_streams]`.
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub state: DecoderState,
    /// Log-probabilities over the output symbols, `[V − 1]`.
    pub log_probs: Var,
    pub attention: StepAttention,
}

/// Decoder bound to one utterance's encoder outputs.
#[derive(Clone, Debug)]
pub struct Decoder {
    embed: Var,
    w_x: Var,
    w_h: Var,
    b: Var,
    out_w: Var,
    out_b: Var,
    vocab_size: usize,
    cells: usize,
    frame_att: Vec<AttentionParams>,
    fusion: AttentionParams,
    memories: Vec<AttentionMemory>,
}

impl Decoder {
    /// `hidden[i]` is stream `i`'s encoder output.
    pub fn new(g: &mut Graph, pv: &ParamVars, hidden: &[Var]) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::arg("decoder needs at least one encoded stream"));
        }
        let embed = pv.get("dec.embed")?;
        let w_h = pv.get("dec.lstm.w_h")?;
        let frame_att = (0..hidden.len())
            .map(|i| AttentionParams::load(pv, &format!("att{i}")))
            .collect::<Result<Vec<_>>>()?;
        let memories = hidden
            .iter()
            .zip(&frame_att)
            .map(|(&h, att)| AttentionMemory::new(g, att, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            embed,
            w_x: pv.get("dec.lstm.w_x")?,
            w_h,
            b: pv.get("dec.lstm.b")?,
            out_w: pv.get("dec.out.w")?,
            out_b: pv.get("dec.out.b")?,
            vocab_size: g.shape(embed)[0],
            cells: g.shape(w_h)[0],
            frame_att,
            fusion: AttentionParams::load(pv, "fusion")?,
            memories,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_streams(&self) -> usize {
        self.memories.len()
    }

    /// Encoder output length `T'` of each stream.
    pub fn stream_lengths(&self, g: &Graph) -> Vec<usize> {
        self.memories.iter().map(|m| m.len(g)).collect()
    }

    /// Zero LSTM state about to consume sos.
    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        DecoderState {
            h: g.input(Tensor::zeros(&[self.cells])),
            c: g.input(Tensor::zeros(&[self.cells])),
            prev: SOS_EOS,
        }
    }

    /// Fuses the streams with `state.h` as the query, then advances the LSTM
    /// on `[embedding(prev); fused context]`.
    pub fn step(&self, g: &mut Graph, state: &DecoderState) -> Result<DecoderOutput> {
        if state.prev == BLANK || state.prev >= self.vocab_size {
            return Err(Error::arg(format!("decoder cannot consume token id {}", state.prev)));
        }
        let mut contexts = Vec::with_capacity(self.memories.len());
        let mut frame = Vec::with_capacity(self.memories.len());
        for (att, mem) in self.frame_att.iter().zip(&self.memories) {
            let (w, ctx) = content_attention(g, att, state.h, mem)?;
            frame.push(w);
            contexts.push(ctx);
        }
        let (beta, fused) = stream_fusion(g, &self.fusion, state.h, &contexts)?;
        let emb = g.row(self.embed, state.prev)?;
        let x = g.concat(&[emb, fused])?;
        let (h, c) = lstm_cell(g, x, state.h, state.c, self.w_x, self.w_h, self.b)?;
        let logits = g.matmul(h, self.out_w)?;
        let logits = g.add_bias(logits, self.out_b)?;
        let log_probs = g.log_softmax(logits);
        Ok(DecoderOutput {
            state: DecoderState { h, c, prev: state.prev },
            log_probs,
            attention: StepAttention { frame, beta },
        })
    }

    /// `Σ_l log p(c_l | c_<l, X)` over the labels followed by the end symbol,
    /// feeding the true previous label at every step.
    pub fn teacher_forced_logprob(&self, g: &mut Graph, labels: &LabelSequence) -> Result<Var> {
        labels.check_vocab(self.vocab_size)?;
        let mut state = self.initial_state(g);
        let mut terms = Vec::with_capacity(labels.len() + 1);
        for &target in labels.ids().iter().chain(std::iter::once(&SOS_EOS)) {
            let out = self.step(g, &state)?;
            terms.push(g.pick(out.log_probs, output_index(target))?);
            state = DecoderState {
                prev: target,
                ..out.state
            };
        }
        let all = g.concat(&terms)?;
        Ok(g.sum(all))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NormStats, Vocabulary};
    use crate::encoder::{EncoderConfig, EncoderKind};
    use crate::model::{ModelConfig, ModelParams};
    use crate::numerics::{gradient_check, DEFAULT_EPS};
    use crate::params::ParamMap;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn tiny_model(n_streams: usize, seed: u64) -> ModelParams {
        let vocab = Vocabulary::from_letters(&["a", "b", "c"]).unwrap();
        let mut cfg = ModelConfig::new(&vocab, n_streams, 3);
        cfg.encoder = EncoderConfig {
            kind: EncoderKind::Blstm,
            layers: 1,
            cells: 2,
            projection: 3,
            subsample: vec![4],
            conv_channels: vec![2, 2],
        };
        cfg.attention_dim = 3;
        cfg.stream_attention_dim = 2;
        cfg.decoder_cells = 3;
        cfg.embedding_dim = 2;
        ModelParams::init(cfg, NormStats::identity(&vec![3; n_streams]), seed).unwrap()
    }

    fn hidden(rng: &mut impl Rng, t: usize, p: usize) -> Tensor {
        Tensor::matrix(t, p, (0..t * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn decoder_for(g: &mut Graph, params: &ParamMap, hs: &[Tensor]) -> Decoder {
        let pv = ParamVars::register_frozen(g, params);
        let hv: Vec<Var> = hs.iter().map(|h| g.input(h.clone())).collect();
        Decoder::new(g, &pv, &hv).unwrap()
    }

    #[test]
    fn step_is_normalized_and_deterministic() {
        let m = tiny_model(2, 1);
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(1);
        let hs = vec![hidden(&mut rng, 4, 3), hidden(&mut rng, 5, 3)];
        let mut g = Graph::new();
        let dec = decoder_for(&mut g, &m.params, &hs);
        let s0 = dec.initial_state(&mut g);
        let a = dec.step(&mut g, &s0).unwrap();
        let b = dec.step(&mut g, &s0).unwrap();
        let p: f64 = g.value(a.log_probs).data().iter().map(|x| x.exp()).sum();
        assert!((p - 1.0).abs() < 1e-9);
        assert_eq!(g.value(a.log_probs), g.value(b.log_probs));
        assert_eq!(g.value(a.log_probs).len(), 5);
    }

    #[test]
    fn unknown_token_rejected() {
        let m = tiny_model(1, 2);
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(2);
        let mut g = Graph::new();
        let dec = decoder_for(&mut g, &m.params, &[hidden(&mut rng, 3, 3)]);
        let mut s = dec.initial_state(&mut g);
        s.prev = 99;
        assert!(matches!(dec.step(&mut g, &s), Err(Error::Argument(_))));
        s.prev = BLANK;
        assert!(dec.step(&mut g, &s).is_err());
    }

    #[test]
    fn zero_params_give_uniform_sequence_score() {
        let m = tiny_model(2, 3);
        let zero: ParamMap = m.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(3);
        let hs = vec![hidden(&mut rng, 4, 3), hidden(&mut rng, 2, 3)];
        let mut g = Graph::new();
        let dec = decoder_for(&mut g, &zero, &hs);
        let labels = LabelSequence::new(vec![3, 4, 4, 5]).unwrap();
        let lp = dec.teacher_forced_logprob(&mut g, &labels).unwrap();
        let v = 5.0f64; // eos, unk, a, b, c
        let want = 5.0 * (1.0 / v).ln();
        assert!((g.value(lp).item() - want).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_matches_per_step_oracle() {
        let m = tiny_model(2, 4);
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(4);
        let hs = vec![hidden(&mut rng, 4, 3), hidden(&mut rng, 4, 3)];
        let labels = LabelSequence::new(vec![5, 3, 2]).unwrap();
        let mut g = Graph::new();
        let dec = decoder_for(&mut g, &m.params, &hs);
        let total = dec.teacher_forced_logprob(&mut g, &labels).unwrap();
        let total = g.value(total).item();
        assert!(total <= 0.0);

        let mut state = dec.initial_state(&mut g);
        let mut acc = 0.0;
        let mut steps = 0;
        for &tok in labels.ids().iter().chain([SOS_EOS].iter()) {
            let out = dec.step(&mut g, &state).unwrap();
            acc += g.value(out.log_probs).data()[tok - 1];
            state = DecoderState { prev: tok, ..out.state };
            steps += 1;
        }
        assert_eq!(steps, labels.len() + 1);
        assert!((acc - total).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_label() {
        let m = tiny_model(1, 5);
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(5);
        let mut g = Graph::new();
        let dec = decoder_for(&mut g, &m.params, &[hidden(&mut rng, 3, 3)]);
        let labels = LabelSequence::new(vec![3, 17]).unwrap();
        assert!(matches!(dec.teacher_forced_logprob(&mut g, &labels), Err(Error::Argument(_))));
    }

    #[test]
    fn single_step_gradient() {
        let m = tiny_model(2, 6);
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(6);
        let mut p: BTreeMap<String, Tensor> = m
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("dec") || k.starts_with("att") || k.starts_with("fusion"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        p.insert("h0".into(), hidden(&mut rng, 3, 3));
        p.insert("h1".into(), hidden(&mut rng, 4, 3));
        p.insert("q".into(), Tensor::vector(vec![0.3, -0.2, 0.5]));
        let r = gradient_check(&p, DEFAULT_EPS, |g, v| {
            let pv = ParamVars::from(v);
            let dec = Decoder::new(g, &pv, &[v["h0"], v["h1"]])?;
            let c = g.input(Tensor::vector(vec![0.1, 0.0, -0.1]));
            let s = DecoderState { h: v["q"], c, prev: 4 };
            let out = dec.step(g, &s)?;
            g.pick(out.log_probs, 2)
        })
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }
}
