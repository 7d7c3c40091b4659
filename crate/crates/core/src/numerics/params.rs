//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Element, Tensor};

/// Ordered, uniquely named collection of tensors.
#[derive(Clone, Default, PartialEq)]
pub struct ParamSet<F = f64> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Element> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replaces an existing entry, keeping its position. Dims must match.
    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        if self.entries[i].1.dims() != t.dims() {
            return Err(Error::mismatch(
                "param set",
                self.entries[i].1.dims(),
                t.dims(),
            ));
        }
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Element>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        Tensor::zeros(t.dims().to_vec()).expect("valid dims"),
                    )
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }
}

impl<F: Element> std::fmt::Debug for ParamSet<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(n, t)| (n, t)))
            .finish()
    }
}

/// Graph handles for every entry of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    order: Vec<String>,
    vars: HashMap<String, Var>,
}

impl Bindings {
    /// Bindings over existing graph nodes, in the given order.
    pub fn from_vars<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        let mut b = Bindings::default();
        for (name, v) in pairs {
            let name = name.into();
            b.order.push(name.clone());
            b.vars.insert(name, v);
        }
        b
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            bindings: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients for every bound entry, in binding order.
    pub fn collect<F: Element>(&self, grads: &Gradients<F>) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for name in &self.order {
            out.insert(name.clone(), grads.get(self.vars[name]))
                .expect("names are unique");
        }
        out
    }
}

/// Prefix-qualified view into [`Bindings`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bindings: &'a Bindings,
    prefix: String,
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<'a> Scope<'a> {
    pub fn pp(&self, sub: impl AsRef<str>) -> Scope<'a> {
        Scope {
            bindings: self.bindings,
            prefix: join(&self.prefix, sub.as_ref()),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.bindings.var(&join(&self.prefix, name))
    }

    pub fn get_opt(&self, name: &str) -> Option<Var> {
        self.bindings.vars.get(&join(&self.prefix, name)).copied()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

impl<F: Element> Graph<F> {
    /// Inserts every entry as a trainable leaf, in set order.
    pub fn bind(&mut self, params: &ParamSet<F>) -> Bindings {
        self.bind_with(params, true)
    }

    /// Inserts every entry as a constant leaf.
    pub fn bind_frozen(&mut self, params: &ParamSet<F>) -> Bindings {
        self.bind_with(params, false)
    }

    fn bind_with(&mut self, params: &ParamSet<F>, trainable: bool) -> Bindings {
        let mut b = Bindings::default();
        for (name, t) in params.iter() {
            let v = if trainable {
                self.param(t.clone())
            } else {
                self.constant(t.clone())
            };
            b.order.push(name.to_string());
            b.vars.insert(name.to_string(), v);
        }
        b
    }
}

/// Prefix-qualified parameter initializer writing into a [`ParamSet`].
pub struct Init<'a, F: Element> {
    params: &'a mut ParamSet<F>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, F: Element> Init<'a, F> {
    pub fn new(params: &'a mut ParamSet<F>, rng: &'a mut Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, sub: impl AsRef<str>) -> Init<'_, F> {
        Init {
            prefix: join(&self.prefix, sub.as_ref()),
            params: self.params,
            rng: self.rng,
        }
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<()> {
        let t = self.rng.normal_tensor(dims, std)?;
        self.params.insert(join(&self.prefix, name), t)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<()> {
        self.params.insert(
            join(&self.prefix, name),
            Tensor::full(dims.to_vec(), F::lit(value))?,
        )
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        self.constant(name, dims, 0.0)
    }

    /// Linear layer `w: [fan_in, fan_out]` (std `1/sqrt(fan_in)`) plus optional zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        let mut l = self.pp(name);
        l.normal("w", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        if bias {
            l.zeros("b", &[fan_out])?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        let mut l = self.pp(name);
        l.constant("gain", &[channels], 1.0)?;
        l.zeros("shift", &[channels])
    }
}

/// Applies a bound linear layer created by [`Init::linear`].
pub fn linear<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, x: Var) -> Result<Var> {
    g.linear(x, s.get("w")?, s.get_opt("b"))
}

/// Applies a bound layer norm created by [`Init::layer_norm`].
pub fn layer_norm<F: Element>(g: &mut Graph<F>, s: &Scope<'_>, x: Var) -> Result<Var> {
    g.layer_norm(
        x,
        s.get("gain")?,
        s.get("shift")?,
        crate::numerics::ops::LN_EPS,
    )
}
