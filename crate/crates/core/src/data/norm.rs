use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-stream, per-dimension mean and standard deviation of the training
/// features. Stored with the checkpoint and applied before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

const MIN_STD: f64 = 1e-5;

impl NormStats {
    pub fn compute(utts: &[Utterance]) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::arg("cannot normalize an empty corpus"))?;
        let n_streams = first.streams.len();
        let mut mean = Vec::with_capacity(n_streams);
        let mut std = Vec::with_capacity(n_streams);
        for s in 0..n_streams {
            let d = first.streams[s].dim();
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            let mut count = 0usize;
            for u in utts {
                let x = u.streams.get(s).ok_or_else(|| {
                    Error::arg(format!("utterance {} has {} streams, expected {n_streams}", u.id, u.streams.len()))
                })?;
                if x.dim() != d {
                    return Err(Error::dim(format!(
                        "utterance {} stream {s} has dimension {}, expected {d}",
                        u.id,
                        x.dim()
                    )));
                }
                for row in x.frames().data().chunks(d) {
                    for j in 0..d {
                        sum[j] += row[j];
                        sq[j] += row[j] * row[j];
                    }
                }
                count += x.num_frames();
            }
            let n = count as f64;
            let m: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let sd = sq
                .iter()
                .zip(&m)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_STD))
                .collect();
            mean.push(m);
            std.push(sd);
        }
        Ok(NormStats { mean, std })
    }

    /// Identity normalization for `dims[i]`-dimensional streams.
    pub fn identity(dims: &[usize]) -> Self {
        NormStats {
            mean: dims.iter().map(|&d| vec![0.0; d]).collect(),
            std: dims.iter().map(|&d| vec![1.0; d]).collect(),
        }
    }

    pub fn apply(&self, stream: usize, x: &FeatureSequence) -> Result<Tensor> {
        let (m, s) = match (self.mean.get(stream), self.std.get(stream)) {
            (Some(m), Some(s)) => (m, s),
            _ => return Err(Error::arg(format!("no normalization statistics for stream {stream}"))),
        };
        let d = x.dim();
        if m.len() != d {
            return Err(Error::dim(format!(
                "stream {stream} features have dimension {d}, statistics have {}",
                m.len()
            )));
        }
        let mut data = x.frames().data().to_vec();
        for row in data.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - m[j]) / s[j];
            }
        }
        Tensor::matrix(x.num_frames(), d, data)
    }
}
