//! Named parameter storage and its binding into a forward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Float, Tensor};

/// Which side of the frozen/trainable split a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Base denoiser weights, frozen while the adapter trains.
    Base,
    /// Upsampler, fusion and scale-aware normalization weights.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T: Float> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Float> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar entries in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from another store with the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {}", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }
}

/// Which groups receive gradients in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Only(Group),
    Everything,
}

impl Trainable {
    fn includes(self, g: Group) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Only(x) => x == g,
            Trainable::Everything => true,
        }
    }
}

/// Binds stored parameters to leaves of one [`Graph`], lazily and at most
/// once each.
pub struct Binder<'g, 'p, T: Float> {
    graph: &'g Graph<T>,
    store: &'p ParamStore<T>,
    trainable: Trainable,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, 'p, T: Float> Binder<'g, 'p, T> {
    pub fn new(graph: &'g Graph<T>, store: &'p ParamStore<T>, trainable: Trainable) -> Self {
        Binder {
            graph,
            store,
            trainable,
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .graph
            .leaf(p.value.clone(), self.trainable.includes(p.group));
        vars[id.0] = Some(v);
        v
    }

    /// Parameters touched so far by the forward pass.
    pub fn used(&self) -> Vec<ParamId> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|_| ParamId(i)))
            .collect()
    }

    /// Move the gradients of all bound parameters out of `grads`.
    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

/// Gaussian initializer.
pub fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let v = normal_vec(rng, n).into_iter().map(|x| x * std as f32).collect();
    Tensor::new(shape, v)
}

/// Fully connected layer `y = x·W + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// How a new layer's weights start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zero,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut Rng,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Scaled(gain) => randn(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        Linear {
            w: store.add(format!("{name}.weight"), group, w),
            b: store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g, T: Float>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(b.p(self.w), b.p(self.b))
    }
}

/// Square "same" convolution on channels-last maps.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut Rng,
        name: &str,
        group: Group,
        k: usize,
        cin: usize,
        cout: usize,
        init: Init,
    ) -> Self {
        let fan_in = k * k * cin;
        let w = match init {
            Init::Scaled(gain) => randn(rng, &[fan_in, cout], gain / (fan_in as f64).sqrt()),
            Init::Zero => Tensor::zeros(&[fan_in, cout]),
        };
        Conv {
            w: store.add(format!("{name}.weight"), group, w),
            b: store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            k,
            cin,
            cout,
        }
    }

    pub fn forward<'g, T: Float>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(b.p(self.w), Some(b.p(self.b)), self.k)
    }
}
