use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::NnError;
use crate::grad::{numel, Graph, RngState, Shape, Value};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { bound: f64 },
    Normal { std: f64 },
}

impl Init {
    /// Uniform in ±sqrt(1/fan_in).
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform { bound: (1.0 / fan_in.max(1) as f64).sqrt() }
    }

    fn draw<S: Scalar>(&self, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<S> {
        match *self {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Uniform { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| S::lit(d.sample(rng))).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| S::lit(d.sample(rng))).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<S>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<S> {
    pub name: String,
    pub entries: Vec<ParamEntry<S>>,
    pub frozen: bool,
}

impl<S> ParamGroup<S> {
    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Gradients keyed by full parameter name (`group.entry`).
pub type Grads<S> = BTreeMap<String, Vec<S>>;

/// Ordered collection of parameter groups. Insertion order is stable and is
/// the order used for initialization and serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    groups: Vec<ParamGroup<S>>,
    index: HashMap<String, usize>,
}

pub fn full_name(group: &str, entry: &str) -> String {
    format!("{group}.{entry}")
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { groups: Vec::new(), index: HashMap::new() }
    }

    /// Adds a group, drawing each entry from its initializer in order.
    pub fn add_group(
        &mut self,
        name: &str,
        entries: &[(&str, Shape, Init)],
        rng: &mut RngState,
    ) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateGroup(name.to_string()));
        }
        let mut gen = rng.generator();
        let entries = entries
            .iter()
            .map(|(n, shape, init)| ParamEntry {
                name: n.to_string(),
                shape: shape.clone(),
                data: init.draw(numel(shape), &mut gen),
                init: *init,
            })
            .collect();
        rng.counter = gen.get_word_pos() as u64;
        self.index.insert(name.to_string(), self.groups.len());
        self.groups.push(ParamGroup { name: name.to_string(), entries, frozen: false });
        Ok(())
    }

    /// Appends an entry with given data, creating the group if needed.
    pub fn insert_entry(&mut self, group: &str, entry: ParamEntry<S>) -> Result<(), NnError> {
        if entry.data.len() != numel(&entry.shape) {
            return Err(NnError::Dim { what: full_name(group, &entry.name), expected: entry.shape.clone(), got: vec![entry.data.len()] });
        }
        if !self.index.contains_key(group) {
            self.index.insert(group.to_string(), self.groups.len());
            self.groups.push(ParamGroup { name: group.to_string(), entries: Vec::new(), frozen: false });
        }
        let g = self.group_mut(group).expect("group exists");
        if g.entry(&entry.name).is_some() {
            return Err(NnError::DuplicateGroup(full_name(group, &entry.name)));
        }
        g.entries.push(entry);
        Ok(())
    }

    /// `w: [out, in]` and `b: [out]`.
    pub fn add_linear(&mut self, name: &str, inp: usize, out: usize, rng: &mut RngState) -> Result<(), NnError> {
        self.add_group(name, &[("w", vec![out, inp], Init::fan_in(inp)), ("b", vec![out], Init::Zeros)], rng)
    }

    /// `w: [out, in, k, k]` and `b: [out]`.
    pub fn add_conv(&mut self, name: &str, inp: usize, out: usize, k: usize, rng: &mut RngState) -> Result<(), NnError> {
        self.add_group(
            name,
            &[("w", vec![out, inp, k, k], Init::fan_in(inp * k * k)), ("b", vec![out], Init::Zeros)],
            rng,
        )
    }

    pub fn add_embedding(&mut self, name: &str, rows: usize, dim: usize, rng: &mut RngState) -> Result<(), NnError> {
        self.add_group(name, &[("table", vec![rows, dim], Init::Normal { std: 0.02 })], rng)
    }

    /// Stacked gated-recurrent weights for gates (update, reset, candidate).
    pub fn add_gru(&mut self, name: &str, inp: usize, hidden: usize, rng: &mut RngState) -> Result<(), NnError> {
        self.add_group(
            name,
            &[
                ("w", vec![3 * hidden, inp], Init::fan_in(inp)),
                ("u", vec![3 * hidden, hidden], Init::fan_in(hidden)),
                ("b", vec![3 * hidden], Init::Zeros),
            ],
            rng,
        )
    }

    pub fn groups(&self) -> &[ParamGroup<S>] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup<S>> {
        self.index.get(name).map(|&i| &self.groups[i])
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup<S>> {
        self.index.get(name).map(|&i| &mut self.groups[i])
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn remove_group(&mut self, name: &str) -> Option<ParamGroup<S>> {
        let i = self.index.remove(name)?;
        let g = self.groups.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(g)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NnError> {
        let g = self.group_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        g.frozen = frozen;
        Ok(())
    }

    pub fn entry(&self, group: &str, entry: &str) -> Option<&ParamEntry<S>> {
        self.group(group)?.entry(entry)
    }

    pub fn entry_mut(&mut self, group: &str, entry: &str) -> Option<&mut ParamEntry<S>> {
        self.group_mut(group)?.entries.iter_mut().find(|e| e.name == entry)
    }

    /// `(full name, entry)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &ParamEntry<S>)> {
        self.groups.iter().flat_map(|g| g.entries.iter().map(move |e| (full_name(&g.name, &e.name), e)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, bool, &mut ParamEntry<S>)> {
        self.groups.iter_mut().flat_map(|g| {
            let (gname, frozen) = (g.name.clone(), g.frozen);
            g.entries.iter_mut().map(move |e| (full_name(&gname, &e.name), frozen, e))
        })
    }

    pub fn count(&self) -> usize {
        self.iter().map(|(_, e)| e.data.len()).sum()
    }

    /// Copies every group of `other` whose name matches `keep` into `self`,
    /// replacing data of existing same-shaped entries.
    pub fn load_from(&mut self, other: &ParamStore<S>, keep: impl Fn(&str) -> bool) -> Result<usize, NnError> {
        let mut copied = 0;
        for src in other.groups.iter().filter(|g| keep(&g.name)) {
            let Some(dst) = self.group_mut(&src.name) else { continue };
            for e in &src.entries {
                let d = dst
                    .entries
                    .iter_mut()
                    .find(|d| d.name == e.name)
                    .ok_or_else(|| NnError::MissingParam(full_name(&src.name, &e.name)))?;
                if d.shape != e.shape {
                    return Err(NnError::Dim {
                        what: full_name(&src.name, &e.name),
                        expected: d.shape.clone(),
                        got: e.shape.clone(),
                    });
                }
                d.data.clone_from(&e.data);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// A graph together with lazily bound parameter leaves.
///
/// Each parameter is copied into the graph the first time it is requested;
/// later requests return the same leaf so gradients accumulate in one place.
pub struct Tape<'p, S> {
    pub g: Graph<S>,
    params: &'p ParamStore<S>,
    bound: HashMap<(usize, usize), Value>,
    trainable: bool,
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// `trainable = false` binds every parameter as a constant.
    pub fn new(params: &'p ParamStore<S>, trainable: bool) -> Self {
        Self { g: Graph::new(), params, bound: HashMap::new(), trainable }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn has(&self, group: &str) -> bool {
        self.params.has_group(group)
    }

    pub fn param(&mut self, group: &str, entry: &str) -> Result<Value, NnError> {
        let gi = *self
            .params
            .index
            .get(group)
            .ok_or_else(|| NnError::MissingParam(full_name(group, entry)))?;
        let grp = &self.params.groups[gi];
        let ei = grp
            .entries
            .iter()
            .position(|e| e.name == entry)
            .ok_or_else(|| NnError::MissingParam(full_name(group, entry)))?;
        if let Some(&v) = self.bound.get(&(gi, ei)) {
            return Ok(v);
        }
        let e = &grp.entries[ei];
        let v = if self.trainable && !grp.frozen {
            self.g.variable(&e.shape, e.data.clone())?
        } else {
            self.g.constant(&e.shape, e.data.clone())?
        };
        self.bound.insert((gi, ei), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, after `backward`.
    pub fn grads(&self) -> Grads<S> {
        let mut out = BTreeMap::new();
        for (&(gi, ei), &v) in &self.bound {
            let grp = &self.params.groups[gi];
            if self.g.requires_grad(v) {
                out.insert(full_name(&grp.name, &grp.entries[ei].name), self.g.grad(v).into_owned());
            }
        }
        out
    }

    pub fn bound_count(&self) -> usize {
        self.bound.len()
    }
}
