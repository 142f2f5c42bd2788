//! Named parameter maps and their graph registration.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::data::rng::keyed_rng;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub type ParamMap = BTreeMap<String, Tensor>;

/// Graph handles for a registered [`ParamMap`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn register(g: &mut Graph, params: &ParamMap) -> Self {
        let vars = params.iter().map(|(n, t)| (n.clone(), g.param(n, t.clone()))).collect();
        ParamVars { vars }
    }

    /// Registers every tensor as a constant (no gradients are tracked).
    pub fn register_frozen(g: &mut Graph, params: &ParamMap) -> Self {
        let vars = params.iter().map(|(n, t)| (n.clone(), g.input(t.clone()))).collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("missing parameter {name:?}")))
    }

    /// Adds the handles of `other` (e.g. a language model sharing the graph).
    pub fn merge(&mut self, other: ParamVars) {
        self.vars.extend(other.vars);
    }
}

impl From<&BTreeMap<String, Var>> for ParamVars {
    fn from(m: &BTreeMap<String, Var>) -> Self {
        ParamVars {
            vars: m.iter().map(|(k, v)| (k.clone(), *v)).collect(),
        }
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    /// LSTM bias `[i; f; g; o]` with the forget slice set to one.
    ForgetBias,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let fan_in = match shape.len() {
            4 => shape[1] * shape[2] * shape[3],
            _ => shape[0],
        };
        ParamSpec {
            name: name.into(),
            shape,
            init: Init::Uniform { fan_in },
        }
    }

    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![n],
            init: Init::Zeros,
        }
    }

    pub fn lstm_bias(name: impl Into<String>, cells: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![4 * cells],
            init: Init::ForgetBias,
        }
    }
}

/// Each tensor draws from its own keyed stream, so adding or removing a
/// parameter never changes the values of the others.
pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> ParamMap {
    specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let mut rng = keyed_rng(seed, &s.name);
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::ForgetBias => {
                    let h = n / 4;
                    (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
                }
            };
            (s.name.clone(), Tensor::new(s.shape.clone(), data).expect("spec shape"))
        })
        .collect()
}

/// Checks that `params` holds exactly the tensors of `specs`.
pub(crate) fn check_shapes(specs: &[ParamSpec], params: &ParamMap) -> Result<()> {
    for s in specs {
        match params.get(&s.name) {
            None => return Err(Error::dim(format!("parameter {:?} is missing", s.name))),
            Some(t) if t.shape() != s.shape.as_slice() => {
                return Err(Error::dim(format!(
                    "parameter {:?} has shape {:?}, architecture expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != specs.len() {
        let extra: Vec<&String> = params.keys().filter(|k| !specs.iter().any(|s| &s.name == *k)).collect();
        return Err(Error::dim(format!("unexpected parameters {extra:?}")));
    }
    Ok(())
}

pub fn zeros_like(params: &ParamMap) -> ParamMap {
    params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect()
}
