//! Named parameter storage and deterministic initialisation.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use longscape_tensor::{Element, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result};

/// How a parameter's initial values are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    /// Uniform on `[-bound, bound]`.
    Uniform { bound: f64 },
    Constant(f64),
    /// LSTM gate bias laid out as `[input, forget, cell, output]` blocks of
    /// `hidden`; the forget block is one, the rest zero.
    ForgetBias { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while a model walks its layers.
#[derive(Debug, Default, Clone)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// Weight `out x in x kh x kw` plus a zero bias.
    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: (usize, usize)) {
        let fan_in = in_ch * k.0 * k.1;
        self.push(format!("{prefix}.weight"), &[out_ch, in_ch, k.0, k.1], Init::He { fan_in });
        self.push(format!("{prefix}.bias"), &[out_ch], Init::Constant(0.0));
    }

    /// Transposed-convolution weight `in x out x kh x kw` plus a zero bias.
    pub fn conv_transpose(&mut self, prefix: &str, in_ch: usize, out_ch: usize, k: (usize, usize)) {
        let fan_in = in_ch * k.0 * k.1;
        self.push(format!("{prefix}.weight"), &[in_ch, out_ch, k.0, k.1], Init::He { fan_in });
        self.push(format!("{prefix}.bias"), &[out_ch], Init::Constant(0.0));
    }

    pub fn norm(&mut self, prefix: &str, channels: usize) {
        self.push(format!("{prefix}.gamma"), &[channels], Init::Constant(1.0));
        self.push(format!("{prefix}.beta"), &[channels], Init::Constant(0.0));
    }

    pub fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) {
        let bound = 1.0 / (hidden as f64).sqrt();
        self.push(format!("{prefix}.w_ih"), &[input, 4 * hidden], Init::Uniform { bound });
        self.push(format!("{prefix}.w_hh"), &[hidden, 4 * hidden], Init::Uniform { bound });
        self.push(format!("{prefix}.bias"), &[4 * hidden], Init::ForgetBias { hidden });
    }

    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.push(format!("{prefix}.weight"), &[input, output], Init::He { fan_in: input });
        self.push(format!("{prefix}.bias"), &[output], Init::Constant(0.0));
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// A learnable tensor with its gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = value.zeros_like();
        Param {
            value: Arc::new(value),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Ordered parameter collection plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
    /// Number of optimizer updates applied so far.
    pub steps: u64,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            steps: 0,
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()).into())
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Registers every parameter on `tape`. Trainable bindings are leaves
    /// that receive gradients; frozen ones are constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| {
                let var = if trainable {
                    tape.param(name, Arc::clone(&p.value))
                } else {
                    tape.constant_arc(Arc::clone(&p.value))
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites every value with zeros.
    pub fn zero_all(&mut self) {
        for p in self.entries.values_mut() {
            p.value = Arc::new(p.value.zeros_like());
        }
    }
}

/// Parameters of one store registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound<T: Element> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Element> Bound<T> {
    /// Binding from explicit vars, used when parameters are tape leaves
    /// created elsewhere (finite-difference checks, for example).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>, TensorError> {
        self.vars
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// SplitMix64 finaliser; spreads nearby seeds over the whole range.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn init_tensor<T: Element>(spec: &ParamSpec, seed: u64) -> Result<Tensor<T>> {
    let shape = &spec.shape;
    Ok(match spec.init {
        Init::He { fan_in } => Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), seed)?,
        Init::Uniform { bound } => Tensor::rand_uniform(shape, -bound, bound, seed)?,
        Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c))?,
        Init::ForgetBias { hidden } => {
            let mut t = Tensor::zeros(shape)?;
            if t.len() != 4 * hidden {
                return Err(Error::Config(format!(
                    "`{}`: forget-gate bias needs {} entries, shape is {shape:?}",
                    spec.name,
                    4 * hidden
                )));
            }
            t.data_mut()[hidden..2 * hidden].fill(T::one());
            t
        }
    })
}

/// Builds a store from declarations. Each parameter draws from its own
/// stream keyed by `(seed, name)`, so values do not depend on declaration order.
pub fn init_params<T: Element>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in specs {
        if spec.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("`{}` has an empty shape {:?}", spec.name, spec.shape)));
        }
        let value = init_tensor(spec, mix_seed(seed, fnv1a(spec.name.as_bytes())))?;
        store.insert(spec.name.clone(), Param::new(value))?;
    }
    Ok(store)
}
