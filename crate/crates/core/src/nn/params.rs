use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    /// Dotted path such as `backbone.3.c2f.cv1.weight`.
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (weights yes, biases and norm gains no).
    pub decay: bool,
}

/// Ordered collection of all learnable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalars whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces values by name; every stored parameter must be present with
    /// identical dims.
    pub fn load(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Tensor> = records.into_iter().collect();
        for p in &mut self.params {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.dims() != p.value.dims() {
                return Err(Error::Invalid(format!(
                    "parameter `{}` has dims {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Invalid(format!("checkpoint has unknown parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Parameters of one convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvParams {
    pub fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.spec)
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initializer whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        let path = self.path(name);
        self.store.add(path, value, decay)
    }

    /// Kaiming-uniform tensor with the given fan-in.
    pub fn kaiming(&mut self, name: &str, dims: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(dims, -bound, bound, self.rng);
        self.tensor(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(dims), false)
    }

    pub fn ones(&mut self, name: &str, dims: &[usize]) -> ParamId {
        self.tensor(name, Tensor::full(dims, 1.0), false)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(dims, -bound, bound, self.rng);
        self.tensor(name, t, true)
    }

    /// Convolution weights (Kaiming-uniform) and zero bias, named `weight`/`bias`.
    pub fn conv(&mut self, spec: ConvSpec) -> Result<ConvParams> {
        spec.validate()?;
        let dims = spec.weight_dims();
        let fan_in = dims[1] * dims[2] * dims[3];
        let weight = self.kaiming("weight", &dims, fan_in);
        let bias = spec.bias.then(|| self.zeros("bias", &[spec.out_channels]));
        Ok(ConvParams { spec, weight, bias })
    }

    pub fn gen_range(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass.
///
/// Parameters are recorded lazily on first use. With `track_grads` off they
/// enter the tape as constants and no backward closures are built.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    store: Option<&'t ParamStore>,
    numels: Vec<usize>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    track_grads: bool,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, track_grads: bool) -> Self {
        Ctx {
            tape,
            store: Some(store),
            numels: store.iter().map(|p| p.value.numel()).collect(),
            bound: RefCell::new(vec![None; store.len()]),
            track_grads,
        }
    }

    /// A context whose parameters are already recorded, one var per
    /// parameter in store order.
    pub fn from_vars(tape: &'t Tape, vars: &[Var<'t>]) -> Self {
        Ctx {
            tape,
            store: None,
            numels: vars.iter().map(|v| v.value().numel()).collect(),
            bound: RefCell::new(vars.iter().copied().map(Some).collect()),
            track_grads: true,
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let store = self.store.expect("pre-bound contexts bind every parameter");
            let value = store.get(id).value.clone();
            if self.track_grads {
                self.tape.var(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Gradients per parameter, indexed like the store. Unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) => grads.get_or_zeros(*v),
                None => vec![0.0; self.numels[i]],
            })
            .collect()
    }
}
