//! Content attention at two levels.
//!
//! Frame level: for stream `i`, score `e_t = vᵀ tanh(W_q q + W_m h_t + b)`
//! over the encoder frames, normalize, and sum the frames into a context
//! vector. Stream level: the same scoring form over the per-stream context
//! vectors (with its own parameters) yields stream weights and the fused
//! context that the decoder consumes.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::params::{ParamSpec, ParamVars};

/// Graph handles of one content-attention scorer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_m: Var,
    pub b: Var,
    pub v: Var,
}

impl AttentionParams {
    pub fn load(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            w_q: pv.get(&format!("{prefix}.w_q"))?,
            w_m: pv.get(&format!("{prefix}.w_m"))?,
            b: pv.get(&format!("{prefix}.b"))?,
            v: pv.get(&format!("{prefix}.v"))?,
        })
    }
}

pub(crate) fn attention_specs(prefix: &str, query: usize, memory: usize, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w_q"), vec![query, dim]),
        ParamSpec::weight(format!("{prefix}.w_m"), vec![memory, dim]),
        ParamSpec::bias(format!("{prefix}.b"), dim),
        ParamSpec::weight(format!("{prefix}.v"), vec![dim]),
    ]
}

/// Attended vectors `[N × H]` with their query-independent projection
/// `W_m h` precomputed once per utterance.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMemory {
    pub memory: Var,
    keys: Var,
}

impl AttentionMemory {
    pub fn new(g: &mut Graph, att: &AttentionParams, memory: Var) -> Result<Self> {
        let shape = g.shape(memory);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::arg(format!("attention over an empty sequence {shape:?}")));
        }
        let keys = g.matmul(memory, att.w_m)?;
        Ok(AttentionMemory { memory, keys })
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.memory)[0]
    }
}

/// Returns `(weights [N], context [H])`.
pub fn content_attention(g: &mut Graph, att: &AttentionParams, q_prev: Var, mem: &AttentionMemory) -> Result<(Var, Var)> {
    let q = g.matmul(q_prev, att.w_q)?;
    let q = g.add(q, att.b)?;
    let pre = g.add_bias(mem.keys, q)?;
    let act = g.tanh(pre);
    let scores = g.matmul(act, att.v)?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, mem.memory)?;
    Ok((weights, context))
}

/// Stream-level attention over per-stream context vectors; returns
/// `(beta [n_streams], fused context [H])`.
pub fn stream_fusion(g: &mut Graph, att: &AttentionParams, q_prev: Var, contexts: &[Var]) -> Result<(Var, Var)> {
    let first = contexts
        .first()
        .ok_or_else(|| Error::arg("stream fusion needs at least one context"))?;
    let width = g.shape(*first).to_vec();
    if let Some(bad) = contexts.iter().find(|&&c| g.shape(c) != width.as_slice()) {
        return Err(Error::dim(format!(
            "stream contexts differ in width: {:?} vs {:?}",
            width,
            g.shape(*bad)
        )));
    }
    let stacked = g.stack(contexts)?;
    let mem = AttentionMemory::new(g, att, stacked)?;
    content_attention(g, att, q_prev, &mem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, Tensor, DEFAULT_EPS};
    use crate::params::{initialize, ParamMap};
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(seed: u64, q: usize, h: usize) -> (Graph, AttentionParams, ParamMap) {
        let params = initialize(&attention_specs("att", q, h, 5), seed);
        let mut g = Graph::new();
        let pv = ParamVars::register_frozen(&mut g, &params);
        let att = AttentionParams::load(&pv, "att").unwrap();
        (g, att, params)
    }

    #[test]
    fn singleton_memory() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(1);
        let (mut g, att, _) = setup(1, 3, 4);
        let h = random(&[1, 4], &mut rng);
        let hv = g.input(h.clone());
        let q = g.input(random(&[3], &mut rng));
        let mem = AttentionMemory::new(&mut g, &att, hv).unwrap();
        let (w, c) = content_attention(&mut g, &att, q, &mem).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(c).data(), h.data());
    }

    #[test]
    fn identical_frames_give_that_frame() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(2);
        let (mut g, att, _) = setup(2, 3, 4);
        let row = random(&[4], &mut rng);
        let rows = vec![row.data().to_vec(); 6];
        let hv = g.input(Tensor::from_rows(&rows).unwrap());
        let q = g.input(random(&[3], &mut rng));
        let mem = AttentionMemory::new(&mut g, &att, hv).unwrap();
        let (_, c) = content_attention(&mut g, &att, q, &mem).unwrap();
        for (a, b) in g.value(c).data().iter().zip(row.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_matches_direct_sum() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(3);
        let (mut g, att, _) = setup(3, 3, 4);
        let h = random(&[7, 4], &mut rng);
        let hv = g.input(h.clone());
        let q = g.input(random(&[3], &mut rng));
        let mem = AttentionMemory::new(&mut g, &att, hv).unwrap();
        let (w, c) = content_attention(&mut g, &att, q, &mem).unwrap();
        let w = g.value(w).data().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        for j in 0..4 {
            let direct: f64 = (0..7).map(|t| w[t] * h.get2(t, j)).sum();
            assert!((direct - g.value(c).data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_memory_rejected() {
        let (mut g, att, _) = setup(4, 3, 4);
        let hv = g.input(Tensor::zeros(&[0, 4]));
        assert!(matches!(AttentionMemory::new(&mut g, &att, hv), Err(Error::Argument(_))));
    }

    #[test]
    fn fusion_of_identical_contexts_is_uniform() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(5);
        let (mut g, att, _) = setup(5, 3, 4);
        let r = random(&[4], &mut rng);
        let a = g.input(r.clone());
        let b = g.input(r.clone());
        let q = g.input(random(&[3], &mut rng));
        let (beta, fused) = stream_fusion(&mut g, &att, q, &[a, b]).unwrap();
        assert_eq!(g.value(beta).data(), &[0.5, 0.5]);
        for (x, y) in g.value(fused).data().iter().zip(r.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_single_stream_is_identity() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(6);
        let (mut g, att, _) = setup(6, 3, 4);
        let r = random(&[4], &mut rng);
        let a = g.input(r.clone());
        let q = g.input(random(&[3], &mut rng));
        let (beta, fused) = stream_fusion(&mut g, &att, q, &[a]).unwrap();
        assert_eq!(g.value(beta).data(), &[1.0]);
        assert_eq!(g.value(fused).data(), r.data());
    }

    #[test]
    fn fusion_three_streams_matches_direct_sum() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(7);
        let (mut g, att, _) = setup(7, 3, 4);
        let rs: Vec<Tensor> = (0..3).map(|_| random(&[4], &mut rng)).collect();
        let vars: Vec<Var> = rs.iter().map(|r| g.input(r.clone())).collect();
        let q = g.input(random(&[3], &mut rng));
        let (beta, fused) = stream_fusion(&mut g, &att, q, &vars).unwrap();
        let beta = g.value(beta).data().to_vec();
        assert_eq!(beta.len(), 3);
        for j in 0..4 {
            let direct: f64 = (0..3).map(|i| beta[i] * rs[i].data()[j]).sum();
            assert!((direct - g.value(fused).data()[j]).abs() < 1e-12);
        }
        // scores are per-stream, so dropping stream 2 renormalizes the rest
        let (beta2, _) = stream_fusion(&mut g, &att, q, &vars[..2]).unwrap();
        let beta2 = g.value(beta2).data().to_vec();
        let s = beta[0] + beta[1];
        assert!((beta2[0] - beta[0] / s).abs() < 1e-12);
        assert!((beta2[1] - beta[1] / s).abs() < 1e-12);
    }

    #[test]
    fn fusion_width_mismatch() {
        let (mut g, att, _) = setup(8, 3, 4);
        let a = g.input(Tensor::zeros(&[4]));
        let b = g.input(Tensor::zeros(&[3]));
        let q = g.input(Tensor::zeros(&[3]));
        assert!(matches!(stream_fusion(&mut g, &att, q, &[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn two_level_gradient() {
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(9);
        let mut p: BTreeMap<String, Tensor> = BTreeMap::new();
        p.extend(initialize(&attention_specs("a0", 3, 4, 5), 1));
        p.extend(initialize(&attention_specs("a1", 3, 4, 5), 2));
        p.extend(initialize(&attention_specs("fuse", 3, 4, 5), 3));
        p.insert("h0".into(), random(&[5, 4], &mut rng));
        p.insert("h1".into(), random(&[4, 4], &mut rng));
        p.insert("q".into(), random(&[3], &mut rng));
        p.insert("a0.b".into(), random(&[5], &mut rng));
        let r = gradient_check(&p, DEFAULT_EPS, |g, v| {
            let pv = ParamVars::from(v);
            let mut ctx = Vec::new();
            for (i, h) in ["h0", "h1"].iter().enumerate() {
                let att = AttentionParams::load(&pv, &format!("a{i}"))?;
                let mem = AttentionMemory::new(g, &att, v[*h])?;
                ctx.push(content_attention(g, &att, v["q"], &mem)?.1);
            }
            let fuse = AttentionParams::load(&pv, "fuse")?;
            let (_, fused) = stream_fusion(g, &fuse, v["q"], &ctx)?;
            let sq = g.mul(fused, fused)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }
}
