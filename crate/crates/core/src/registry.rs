//! Named parameter storage with explicit sharing.
//!
//! Physical tensors live under physical names. Model code always asks for
//! *logical* names (`qa.question_encoder.ffn.w1`, `qg.output.w_shared`);
//! the alias table maps a logical component prefix to the physical prefix
//! that backs it, so two logical names resolve to the same storage exactly
//! when their components are shared.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{fan_avg_init_with, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    aliases: BTreeMap<String, String>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        ParameterRegistry::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor, trainable: bool) {
        if !trainable {
            self.frozen.insert(name.to_string());
        }
        self.tensors.insert(name.to_string(), t);
    }

    /// Declares that every logical name under `logical` resolves under
    /// `physical`.
    pub fn alias(&mut self, logical: &str, physical: &str) {
        self.aliases.insert(logical.to_string(), physical.to_string());
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// Physical name behind a logical one. Names without an alias are
    /// their own physical name.
    pub fn resolve(&self, name: &str) -> String {
        resolve_with(&self.aliases, name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let physical = self.resolve(name);
        self.tensors.get(&physical).ok_or(Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let physical = self.resolve(name);
        self.tensors.get_mut(&physical).ok_or(Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(&self.resolve(name))
    }

    pub fn is_trainable(&self, physical: &str) -> bool {
        !self.frozen.contains(physical)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar parameters, frozen ones included.
    pub fn census(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count of physical tensors whose name starts with `prefix.`.
    pub fn census_of(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| has_prefix(k, prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn trainable_census(&self) -> usize {
        self.tensors.iter().filter(|(k, _)| !self.frozen.contains(*k)).map(|(_, t)| t.len()).sum()
    }

    /// Trainable physical tensors, cloned, for optimizers and oracles.
    pub fn trainable(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().filter(|(k, _)| !self.frozen.contains(*k)).map(|(k, t)| (k.clone(), t.clone())).collect()
    }

    /// Binds every physical tensor to `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Params {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), tape.param(k, t, !self.frozen.contains(k)))).collect();
        Params { vars, aliases: self.aliases.clone() }
    }

    /// Same as [`bind`](Self::bind) but reading values from `overrides`
    /// where present; used by finite-difference oracles.
    pub fn bind_with<'a>(&'a self, tape: &mut Tape<'a>, overrides: &'a BTreeMap<String, Tensor>) -> Params {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let t = overrides.get(k).unwrap_or(t);
                (k.clone(), tape.param(k, t, !self.frozen.contains(k)))
            })
            .collect();
        Params { vars, aliases: self.aliases.clone() }
    }
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

fn resolve_with(aliases: &BTreeMap<String, String>, name: &str) -> String {
    // longest matching component prefix wins
    let mut best: Option<(&String, &String)> = None;
    for (logical, physical) in aliases {
        if has_prefix(name, logical) && best.is_none_or(|(l, _)| logical.len() > l.len()) {
            best = Some((logical, physical));
        }
    }
    match best {
        Some((logical, physical)) => format!("{physical}{}", &name[logical.len()..]),
        None => name.to_string(),
    }
}

/// Parameters bound to a tape, addressable by logical name.
#[derive(Clone, Debug, Default)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    aliases: BTreeMap<String, String>,
}

impl Params {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Params { vars, aliases: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let physical = resolve_with(&self.aliases, name);
        self.vars.get(&physical).copied().ok_or(Error::UnknownParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(&resolve_with(&self.aliases, name))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope { params: self, prefix: prefix.to_string() }
    }
}

/// A view of [`Params`] under a name prefix.
#[derive(Clone, Debug)]
pub struct Scope<'p> {
    params: &'p Params,
    prefix: String,
}

impl<'p> Scope<'p> {
    pub fn get(&self, leaf: &str) -> Result<Var> {
        self.params.get(&self.name(leaf))
    }

    pub fn has(&self, leaf: &str) -> bool {
        self.params.has(&self.name(leaf))
    }

    pub fn sub(&self, child: &str) -> Scope<'p> {
        Scope { params: self.params, prefix: self.name(child) }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }
}

/// Declares and initializes parameters. Each tensor draws from its own RNG
/// stream derived from the model seed and its name, so a tensor's initial
/// value does not depend on which other tensors exist.
pub struct ParamBuilder<'r> {
    registry: &'r mut ParameterRegistry,
    seed: u64,
    prefix: String,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(registry: &'r mut ParameterRegistry, seed: u64) -> Self {
        ParamBuilder { registry, seed, prefix: String::new() }
    }

    pub fn sub(&mut self, child: &str) -> ParamBuilder<'_> {
        let prefix = self.name(child);
        ParamBuilder { registry: self.registry, seed: self.seed, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn fan_avg(&mut self, leaf: &str, fan_in: usize, fan_out: usize) {
        let name = self.name(leaf);
        let t = fan_avg_init_with(fan_in, fan_out, &mut self.rng_for(&name));
        self.registry.insert(&name, t, true);
    }

    pub fn constant(&mut self, leaf: &str, rows: usize, cols: usize, value: f64) {
        let name = self.name(leaf);
        self.registry.insert(&name, Tensor::filled(rows, cols, value), true);
    }

    pub fn tensor(&mut self, leaf: &str, t: Tensor) {
        let name = self.name(leaf);
        self.registry.insert(&name, t, true);
    }

    pub fn frozen(&mut self, leaf: &str, t: Tensor) {
        let name = self.name(leaf);
        self.registry.insert(&name, t, false);
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alias_resolution_uses_component_prefixes() {
        let mut r = ParameterRegistry::new();
        r.insert("encoder.w", Tensor::scalar(1.0), true);
        r.insert("qa.head.w", Tensor::scalar(2.0), true);
        r.alias("qa.encoder", "encoder");
        r.alias("qg.encoder", "encoder");
        assert_eq!(r.resolve("qa.encoder.w"), "encoder.w");
        assert_eq!(r.resolve("qa.encoderx.w"), "qa.encoderx.w");
        assert!(std::ptr::eq(r.get("qa.encoder.w").unwrap(), r.get("qg.encoder.w").unwrap()));
        r.get_mut("qg.encoder.w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(r.get("qa.encoder.w").unwrap().item(), 5.0);
        assert!(r.get("qg.head.w").is_err());
    }

    #[test]
    fn shared_names_bind_to_one_node() {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::scalar(3.0), true);
        r.alias("a", "w");
        r.alias("b", "w");
        let mut tape = Tape::new();
        let p = r.bind(&mut tape);
        assert_eq!(p.get("a").unwrap(), p.get("b").unwrap());
        let (a, b) = (p.get("a").unwrap(), p.get("b").unwrap());
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g["w"].item(), 6.0);
    }

    #[test]
    fn init_is_per_name_deterministic() {
        let mut r1 = ParameterRegistry::new();
        ParamBuilder::new(&mut r1, 9).fan_avg("x.w", 4, 4);
        let mut r2 = ParameterRegistry::new();
        {
            let mut b = ParamBuilder::new(&mut r2, 9);
            b.fan_avg("other", 3, 3);
            b.sub("x").fan_avg("w", 4, 4);
        }
        assert_eq!(r1.get("x.w").unwrap(), r2.get("x.w").unwrap());
        assert_eq!(r2.census(), 25);
        assert_eq!(r2.census_of("x"), 16);
    }
}
