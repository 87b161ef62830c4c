use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// Functional role of a parameter; the unit over which freezing is decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    LayerNorm,
    SelfAttn,
    EncoderAttn,
    Ffn,
    Embedding,
    Positional,
    ConvFeature,
    Adaptor,
    Other,
}

impl ParamRole {
    pub const ALL: [ParamRole; 9] = [
        ParamRole::LayerNorm,
        ParamRole::SelfAttn,
        ParamRole::EncoderAttn,
        ParamRole::Ffn,
        ParamRole::Embedding,
        ParamRole::Positional,
        ParamRole::ConvFeature,
        ParamRole::Adaptor,
        ParamRole::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::LayerNorm => "layer_norm",
            ParamRole::SelfAttn => "self_attn",
            ParamRole::EncoderAttn => "encoder_attn",
            ParamRole::Ffn => "ffn",
            ParamRole::Embedding => "embedding",
            ParamRole::Positional => "positional",
            ParamRole::ConvFeature => "conv_feature",
            ParamRole::Adaptor => "adaptor",
            ParamRole::Other => "other",
        }
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter role `{s}`")))
    }
}

/// Pipeline component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Encoder,
    Adaptor,
    Decoder,
}

impl Owner {
    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Encoder => "encoder",
            Owner::Adaptor => "adaptor",
            Owner::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor. Role and owner are fixed at construction.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    role: ParamRole,
    owner: Owner,
    requires_grad: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        role: ParamRole,
        owner: Owner,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
            role,
            owner,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    pub fn set_all_requires_grad(&mut self, on: bool) {
        self.params.iter_mut().for_each(|p| p.requires_grad = on);
    }

    /// Explicit gradient reset; `backward` only ever accumulates.
    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(0.0));
    }

    /// Copies values for every name present in both stores whose name starts
    /// with `prefix`. Returns how many parameters were copied.
    pub fn copy_matching(&mut self, from: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (_, src) in from.iter() {
            if !src.name.starts_with(prefix) {
                continue;
            }
            if let Some(id) = self.id(&src.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != src.value.shape() {
                    return Err(Error::shape(
                        "copy_matching",
                        format!(
                            "`{}` is {:?} here but {:?} in the source",
                            src.name,
                            dst.value.shape(),
                            src.value.shape()
                        ),
                    ));
                }
                dst.value = Arc::clone(&src.value);
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Digest over names and exact value bits of the selected parameters.
    pub fn checksum_where(&self, mut keep: impl FnMut(&Parameter) -> bool) -> u64 {
        let mut h: u64 = 0;
        for p in self.params.iter().filter(|p| keep(p)) {
            h = h.rotate_left(7) ^ p.value.checksum();
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        self.checksum_where(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::scalar(1.0), ParamRole::Other, Owner::Encoder).unwrap();
        assert!(s.register("a", Tensor::scalar(2.0), ParamRole::Other, Owner::Encoder).is_err());
    }

    #[test]
    fn roles_parse_back() {
        for r in ParamRole::ALL {
            assert_eq!(r.as_str().parse::<ParamRole>().unwrap(), r);
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(1.0), ParamRole::Other, Owner::Decoder).unwrap();
        let before = s.checksum();
        s.get_mut(id).value_mut().data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, s.checksum());
    }
}
