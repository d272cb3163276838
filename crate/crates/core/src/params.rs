//! Named parameter storage with progressive-stage ownership tags.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{HcmlError, Result};
use crate::tensor::Tensor;

/// Which progressive stage owns a parameter. Freezing a stage freezes every
/// parameter tagged at or below it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    /// Stem, stage-1 convs, the flow estimator and the P0 embedding.
    Level0,
    /// Stage-2 convs, level-1 motion block and predictor.
    Level1,
    /// Stage-3 convs, level-2 motion block and predictor.
    Level2,
    /// Classifier head; only trained jointly.
    Head,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

pub struct Param {
    pub name: String,
    pub tag: StageTag,
    pub value: Tensor,
}

/// All trainable tensors of a network, in registration order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tag: StageTag, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            tag,
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(HcmlError::shape(
                "ParamStore::set_value",
                format!("{:?}", self.params[id.0].value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Total scalar count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Bind every parameter onto a tape: trainable ones as leaves, the rest
    /// as constants that backward never reaches.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&Param) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Serialized bytes of every parameter matching the filter, in
    /// registration order. Used to assert that frozen stages stay untouched.
    pub fn snapshot_bytes(&self, filter: impl Fn(&Param) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Tape variables for one forward pass, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParamStore::new();
        let id = store.register("a.w", StageTag::Level0, Tensor::zeros(&[2, 2]));
        assert_eq!(store.by_name("a.w"), Some(id));
        assert_eq!(store.total_elements(), 4);
        assert!(store.by_name("missing").is_none());
    }

    #[test]
    fn snapshot_filters_by_tag() {
        let mut store = ParamStore::new();
        store.register("a", StageTag::Level0, Tensor::full(&[2], 1.0));
        store.register("b", StageTag::Level1, Tensor::full(&[2], 2.0));
        let s0 = store.snapshot_bytes(|p| p.tag == StageTag::Level0);
        assert_eq!(s0.len(), 16);
        let all = store.snapshot_bytes(|_| true);
        assert_eq!(all.len(), 32);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::new();
        store.register("a", StageTag::Level0, Tensor::zeros(&[1]));
        store.register("a", StageTag::Level0, Tensor::zeros(&[1]));
    }
}
