//! Per-stream acoustic encoders.
//!
//! `blstm`: stacked bidirectional LSTM layers, each followed by a linear
//! projection and frame-dropping subsampling. `convblstm`: a two-block
//! convolutional front-end that reduces time by 4, then BLSTM layers without
//! subsampling. Either way `T` input frames become `ceil(T/4)` vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamMap, ParamSpec, ParamVars};

/// Total time reduction of every encoder.
pub const SUBSAMPLING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Blstm,
    Convblstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    /// LSTM cells per direction.
    pub cells: usize,
    /// Output width of the projection after each BLSTM layer.
    pub projection: usize,
    /// Frame-dropping factor after each BLSTM layer.
    pub subsample: Vec<usize>,
    /// Output channels of the two conv blocks (`convblstm` only).
    #[serde(default = "default_conv_channels")]
    pub conv_channels: Vec<usize>,
}

fn default_conv_channels() -> Vec<usize> {
    vec![4, 8]
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Blstm,
            layers: 2,
            cells: 32,
            projection: 32,
            subsample: vec![2, 2],
            conv_channels: default_conv_channels(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.cells == 0 || self.projection == 0 {
            return Err(Error::arg("encoder layers, cells and projection must be positive"));
        }
        if self.subsample.len() != self.layers || self.subsample.contains(&0) {
            return Err(Error::arg(format!(
                "encoder needs one positive subsampling factor per layer, got {:?} for {} layers",
                self.subsample, self.layers
            )));
        }
        let product: usize = self.subsample.iter().product();
        match self.kind {
            EncoderKind::Blstm if product != SUBSAMPLING => Err(Error::arg(format!(
                "blstm subsampling factors {:?} multiply to {product}, expected {SUBSAMPLING}",
                self.subsample
            ))),
            EncoderKind::Convblstm if product != 1 => Err(Error::arg(
                "convblstm subsamples in the conv front-end; recurrent factors must all be 1",
            )),
            EncoderKind::Convblstm if self.conv_channels.len() != 2 || self.conv_channels.contains(&0) => {
                Err(Error::arg("convblstm needs two positive conv channel counts"))
            }
            _ => Ok(()),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.projection
    }

    /// Feature width entering the first BLSTM layer.
    fn recurrent_input_dim(&self, input_dim: usize) -> usize {
        match self.kind {
            EncoderKind::Blstm => input_dim,
            EncoderKind::Convblstm => self.conv_channels[1] * input_dim.div_ceil(2).div_ceil(2),
        }
    }

    pub(crate) fn param_specs(&self, prefix: &str, input_dim: usize) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if self.kind == EncoderKind::Convblstm {
            let mut cin = 1;
            for (b, &cout) in self.conv_channels.iter().enumerate() {
                for k in 0..2 {
                    let ci = if k == 0 { cin } else { cout };
                    specs.push(ParamSpec::weight(format!("{prefix}.conv{b}.{k}.weight"), vec![cout, ci, 3, 3]));
                    specs.push(ParamSpec::bias(format!("{prefix}.conv{b}.{k}.bias"), cout));
                }
                cin = cout;
            }
        }
        let h = self.cells;
        let mut din = self.recurrent_input_dim(input_dim);
        for l in 0..self.layers {
            for dir in ["fwd", "bwd"] {
                specs.push(ParamSpec::weight(format!("{prefix}.blstm{l}.{dir}.w_x"), vec![din, 4 * h]));
                specs.push(ParamSpec::weight(format!("{prefix}.blstm{l}.{dir}.w_h"), vec![h, 4 * h]));
                specs.push(ParamSpec::lstm_bias(format!("{prefix}.blstm{l}.{dir}.b"), h));
            }
            specs.push(ParamSpec::weight(format!("{prefix}.proj{l}.w"), vec![2 * h, self.projection]));
            specs.push(ParamSpec::bias(format!("{prefix}.proj{l}.b"), self.projection));
            din = self.projection;
        }
        specs
    }
}

/// Encoder output length for `t` input frames.
pub fn output_length(t: usize) -> usize {
    t.div_ceil(SUBSAMPLING)
}

/// One LSTM step: `z = x·W_x + h·W_h + b`, gates `[i; f; g; o]`.
pub fn lstm_cell(
    g: &mut Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w_x: Var,
    w_h: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let zx = g.matmul(x, w_x)?;
    let zh = g.matmul(h_prev, w_h)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, b)?;
    split_state(g, z, c_prev)
}

fn split_state(g: &mut Graph, z: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hc = g.lstm_pointwise(z, c_prev)?;
    let n = g.shape(c_prev)[0];
    let h = g.slice(hc, 0, n)?;
    let c = g.slice(hc, n, n)?;
    Ok((h, c))
}

/// Runs one direction over `zx` (precomputed `x_t·W_x + b`, `T × 4H`) and
/// returns the hidden vectors in input-time order.
fn lstm_direction(g: &mut Graph, zx: Var, w_h: Var, reverse: bool) -> Result<Vec<Var>> {
    let t_len = g.shape(zx)[0];
    let cells = g.shape(w_h)[0];
    let mut c = g.input(Tensor::zeros(&[cells]));
    let mut h: Option<Var> = None;
    let mut out = vec![None; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let mut z = g.row(zx, t)?;
        if let Some(hp) = h {
            let zh = g.matmul(hp, w_h)?;
            z = g.add(z, zh)?;
        }
        let (hn, cn) = split_state(g, z, c)?;
        out[t] = Some(hn);
        h = Some(hn);
        c = cn;
    }
    Ok(out.into_iter().map(|v| v.expect("every frame visited")).collect())
}

/// BLSTM layer plus projection: `[T × Din]` → `[T × P]`.
fn blstm_layer(g: &mut Graph, pv: &ParamVars, prefix: &str, l: usize, x: Var) -> Result<Var> {
    let mut dirs = Vec::with_capacity(2);
    for (dir, reverse) in [("fwd", false), ("bwd", true)] {
        let w_x = pv.get(&format!("{prefix}.blstm{l}.{dir}.w_x"))?;
        let w_h = pv.get(&format!("{prefix}.blstm{l}.{dir}.w_h"))?;
        let b = pv.get(&format!("{prefix}.blstm{l}.{dir}.b"))?;
        let zx = g.matmul(x, w_x)?;
        let zx = g.add_bias(zx, b)?;
        dirs.push(lstm_direction(g, zx, w_h, reverse)?);
    }
    let rows = dirs[0]
        .iter()
        .zip(&dirs[1])
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    let both = g.stack(&rows)?;
    let proj = g.matmul(both, pv.get(&format!("{prefix}.proj{l}.w"))?)?;
    g.add_bias(proj, pv.get(&format!("{prefix}.proj{l}.b"))?)
}

fn subsample(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    let t = g.shape(x)[0];
    g.select_rows(x, (0..t).step_by(factor).collect())
}

/// Two blocks of (conv, ReLU, conv, ReLU, 2×2 max-pool) over a single-channel
/// `T × D` input; returns `ceil(ceil(T/2)/2) × (C·ceil(ceil(D/2)/2))`.
pub fn conv_frontend(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var, blocks: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim(format!("conv front-end input must be T×D, got {shape:?}")));
    }
    if shape[0] < SUBSAMPLING {
        return Err(Error::arg(format!(
            "conv front-end needs at least {SUBSAMPLING} frames, got {}",
            shape[0]
        )));
    }
    let mut h = g.reshape(x, vec![1, shape[0], shape[1]])?;
    for b in 0..blocks {
        for k in 0..2 {
            let w = pv.get(&format!("{prefix}.conv{b}.{k}.weight"))?;
            let bias = pv.get(&format!("{prefix}.conv{b}.{k}.bias"))?;
            h = g.conv2d(h, w, bias)?;
            h = g.relu(h);
        }
        h = g.max_pool2(h)?;
    }
    g.channels_to_frames(h)
}

/// Encodes one stream's normalized `T × D` features into `ceil(T/4) × P`.
pub fn encode_stream(g: &mut Graph, pv: &ParamVars, prefix: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::arg(format!("encoder input must have T ≥ 1 frames, got {shape:?}")));
    }
    let mut h = match cfg.kind {
        EncoderKind::Blstm => x,
        EncoderKind::Convblstm => conv_frontend(g, pv, prefix, x, cfg.conv_channels.len())?,
    };
    for l in 0..cfg.layers {
        h = blstm_layer(g, pv, prefix, l, h)?;
        h = subsample(g, h, cfg.subsample[l])?;
    }
    Ok(h)
}

/// Stand-alone forward pass of one encoder on plain tensors.
pub fn encode_features(params: &ParamMap, prefix: &str, cfg: &EncoderConfig, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = ParamVars::register_frozen(&mut g, params);
    let xv = g.input(x.clone());
    let h = encode_stream(&mut g, &pv, prefix, cfg, xv)?;
    Ok(g.value(h).clone())
}
