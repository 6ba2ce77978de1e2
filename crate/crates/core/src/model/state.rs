use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sfda_tensor::{Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Feature extractor: patch embedding, attention blocks and feature head.
    Backbone,
    /// Linear classifier on top of the features.
    Classifier,
    /// Assistant domain module.
    Adm,
}

impl ParamGroup {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Classifier => "classifier",
            Self::Adm => "adm",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "backbone" => Some(Self::Backbone),
            "classifier" => Some(Self::Classifier),
            "adm" => Some(Self::Adm),
            _ => None,
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

/// Name, group, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, group: ParamGroup, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            group,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters, buffers and optimizer momentum of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    momentum: Vec<Option<Tensor<T>>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Real> ModelState<T> {
    pub fn init(specs: &[ParamSpec], buffers: Vec<Buffer<T>>, rng: &mut impl Rng) -> Result<Self> {
        let params = specs
            .iter()
            .map(|s| Param {
                name: s.name.clone(),
                group: s.group,
                value: sample(s, rng),
                frozen: false,
            })
            .collect();
        Self::from_parts(params, buffers)
    }

    pub fn from_parts(params: Vec<Param<T>>, buffers: Vec<Buffer<T>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(CoreError::Invariant(format!("duplicate parameter {}", p.name)));
            }
        }
        let mut buffer_index = HashMap::new();
        for (i, b) in buffers.iter().enumerate() {
            if buffer_index.insert(b.name.clone(), i).is_some() {
                return Err(CoreError::Invariant(format!("duplicate buffer {}", b.name)));
            }
        }
        Ok(Self {
            momentum: vec![None; params.len()],
            params,
            buffers,
            index,
            buffer_index,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn momentum(&self) -> &[Option<Tensor<T>>] {
        &self.momentum
    }

    pub fn momentum_mut(&mut self) -> &mut [Option<Tensor<T>>] {
        &mut self.momentum
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].value)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &mut self.buffers[i].value)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.params
            .iter_mut()
            .filter(|p| p.group == group)
            .for_each(|p| p.frozen = frozen);
    }

    /// Total element count of the parameters in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`; frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect();
        Bound { index: &self.index, vars }
    }

    /// Binds handles created elsewhere, one per parameter in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            return Err(CoreError::InvalidInput(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound { index: &self.index, vars })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            momentum: self.momentum.iter().map(|m| m.as_ref().map(Tensor::cast)).collect(),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }
}

/// Tape handles of a model's parameters for one forward pass.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Handle of parameter `name`. Panics on an unknown name, which is a
    /// programming error: names come from the same specs that built the state.
    pub fn p(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn sample<T: Real>(spec: &ParamSpec, rng: &mut impl Rng) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<T> = match spec.init {
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| T::lit(dist.sample(rng))).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::lit(dist.sample(rng))).collect()
        }
        Init::Constant(c) => vec![T::lit(c); n],
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape")
}
