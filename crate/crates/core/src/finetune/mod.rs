//! Role-based parameter partitioning, per-strategy freezing and the
//! parameter-budget accountant for the full-size reference architecture.

pub mod budget;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Owner, ParamId, ParamRole, ParamStore};

pub use budget::{count_budget, emit_budget_table, Budget, BudgetRow, BudgetTable, ReferenceArchSpec};

/// Owner implied by a parameter's top-level name segment.
pub fn owner_from_name(name: &str) -> Result<Owner> {
    match name.split('.').next() {
        Some("encoder") => Ok(Owner::Encoder),
        Some("adaptor") => Ok(Owner::Adaptor),
        Some("decoder") => Ok(Owner::Decoder),
        _ => Err(Error::Config(format!("parameter `{name}` has no encoder/adaptor/decoder prefix"))),
    }
}

/// Role implied by a parameter name under the hierarchical naming scheme.
pub fn role_from_name(name: &str) -> Result<ParamRole> {
    let segs: Vec<&str> = name.split('.').collect();
    let has = |s: &str| segs.contains(&s);
    let role = if segs.first() == Some(&"adaptor") {
        ParamRole::Adaptor
    } else if segs.iter().any(|s| s.ends_with("layer_norm") || *s == "layernorm_embedding") {
        ParamRole::LayerNorm
    } else if has("self_attn") {
        ParamRole::SelfAttn
    } else if has("encoder_attn") {
        ParamRole::EncoderAttn
    } else if has("ffn") {
        ParamRole::Ffn
    } else if has("embed_tokens") || has("output_projection") {
        ParamRole::Embedding
    } else if has("embed_positions") {
        ParamRole::Positional
    } else if has("feature_extractor") {
        ParamRole::ConvFeature
    } else if has("post_extract_proj") || has("mask_emb") || has("quantizer") {
        ParamRole::Other
    } else {
        return Err(Error::Config(format!("cannot assign a role to parameter `{name}`")));
    };
    Ok(role)
}

/// Parameter names grouped by the role their names imply. Fails on any name
/// outside the scheme or whose registered role disagrees.
pub fn partition(store: &ParamStore) -> Result<BTreeMap<ParamRole, Vec<String>>> {
    let mut buckets: BTreeMap<ParamRole, Vec<String>> = BTreeMap::new();
    for (_, p) in store.iter() {
        let role = role_from_name(p.name())?;
        owner_from_name(p.name())?;
        if role != p.role() {
            return Err(Error::Config(format!(
                "parameter `{}` registered as {} but named as {}",
                p.name(),
                p.role(),
                role
            )));
        }
        buckets.entry(role).or_default().push(p.name().to_string());
    }
    Ok(buckets)
}

/// Which roles of one component are finetuned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RoleSetRepr", into = "RoleSetRepr")]
pub enum RoleSet {
    All,
    /// Every role trained, starting from random initialization.
    Scratch,
    Roles(BTreeSet<ParamRole>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RoleSetRepr {
    Keyword(String),
    Roles(Vec<ParamRole>),
}

impl TryFrom<RoleSetRepr> for RoleSet {
    type Error = Error;

    fn try_from(r: RoleSetRepr) -> Result<Self> {
        match r {
            RoleSetRepr::Keyword(k) if k == "all" => Ok(RoleSet::All),
            RoleSetRepr::Keyword(k) if k == "scratch" => Ok(RoleSet::Scratch),
            RoleSetRepr::Keyword(k) => Err(Error::Config(format!("expected `all`, `scratch` or a role list, got `{k}`"))),
            RoleSetRepr::Roles(v) => Ok(RoleSet::Roles(v.into_iter().collect())),
        }
    }
}

impl From<RoleSet> for RoleSetRepr {
    fn from(r: RoleSet) -> Self {
        match r {
            RoleSet::All => RoleSetRepr::Keyword("all".into()),
            RoleSet::Scratch => RoleSetRepr::Keyword("scratch".into()),
            RoleSet::Roles(s) => RoleSetRepr::Roles(s.into_iter().collect()),
        }
    }
}

impl RoleSet {
    pub fn roles(roles: &[ParamRole]) -> Self {
        RoleSet::Roles(roles.iter().copied().collect())
    }

    pub fn contains(&self, role: ParamRole) -> bool {
        match self {
            RoleSet::All | RoleSet::Scratch => true,
            RoleSet::Roles(s) => s.contains(&role),
        }
    }
}

impl fmt::Display for RoleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleSet::All => f.write_str("all"),
            RoleSet::Scratch => f.write_str("trained from scratch"),
            RoleSet::Roles(s) if s.is_empty() => f.write_str("none"),
            RoleSet::Roles(s) => {
                let names: Vec<&str> = s.iter().map(|r| r.as_str()).collect();
                f.write_str(&names.join(" + "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneStrategy {
    pub encoder: RoleSet,
    pub decoder: RoleSet,
    #[serde(default = "yes")]
    pub adaptor_trainable: bool,
}

fn yes() -> bool {
    true
}

impl Default for FinetuneStrategy {
    fn default() -> Self {
        FinetuneStrategy::best()
    }
}

impl FinetuneStrategy {
    pub fn new(encoder: RoleSet, decoder: RoleSet) -> Self {
        FinetuneStrategy { encoder, decoder, adaptor_trainable: true }
    }

    /// Encoder layer norm and self-attention; decoder layer norm,
    /// self-attention and encoder attention.
    pub fn best() -> Self {
        use ParamRole::*;
        FinetuneStrategy::new(RoleSet::roles(&[LayerNorm, SelfAttn]), RoleSet::roles(&[LayerNorm, SelfAttn, EncoderAttn]))
    }

    pub fn all() -> Self {
        FinetuneStrategy::new(RoleSet::All, RoleSet::All)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder == RoleSet::Scratch {
            return Err(Error::Config("only the decoder can be trained from scratch".into()));
        }
        Ok(())
    }

    pub fn decoder_from_scratch(&self) -> bool {
        self.decoder == RoleSet::Scratch
    }

    pub fn selects(&self, owner: Owner, role: ParamRole) -> bool {
        match owner {
            Owner::Encoder => self.encoder.contains(role),
            Owner::Decoder => self.decoder.contains(role),
            Owner::Adaptor => self.adaptor_trainable,
        }
    }

    /// The seven finetuning strategies of the ablation, in published order,
    /// with their reported BLEU.
    pub fn table3() -> Vec<(FinetuneStrategy, f64)> {
        use ParamRole::*;
        let ln = RoleSet::roles(&[LayerNorm]);
        let ln_sa = RoleSet::roles(&[LayerNorm, SelfAttn]);
        vec![
            (FinetuneStrategy::new(ln.clone(), ln.clone()), 19.8),
            (FinetuneStrategy::new(ln.clone(), RoleSet::roles(&[LayerNorm, EncoderAttn])), 20.3),
            (FinetuneStrategy::new(ln, RoleSet::roles(&[LayerNorm, EncoderAttn, SelfAttn])), 18.9),
            (FinetuneStrategy::best(), 21.5),
            (FinetuneStrategy::new(ln_sa.clone(), RoleSet::All), 17.0),
            (FinetuneStrategy::all(), 20.2),
            (FinetuneStrategy::new(ln_sa, RoleSet::Scratch), 2.2),
        ]
    }
}

impl fmt::Display for FinetuneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "encoder: {}; decoder: {}", self.encoder, self.decoder)?;
        if !self.adaptor_trainable {
            f.write_str("; adaptor frozen")?;
        }
        Ok(())
    }
}

/// Marks exactly the parameters selected by `strategy` as trainable and
/// freezes the rest. An empty selection is reported as
/// [`Error::EmptyTrainableSet`] after the store has been updated.
pub fn select_trainable(store: &mut ParamStore, strategy: &FinetuneStrategy) -> Result<BTreeSet<ParamId>> {
    strategy.validate()?;
    let chosen: BTreeSet<ParamId> =
        store.iter().filter(|(_, p)| strategy.selects(p.owner(), p.role())).map(|(id, _)| id).collect();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.set_requires_grad(id, chosen.contains(&id));
    }
    if chosen.is_empty() {
        return Err(Error::EmptyTrainableSet);
    }
    Ok(chosen)
}

/// Zeroes the gradients of parameters outside `trainable` and freezes them,
/// so an optimizer step leaves them bit-identical.
pub fn apply_gradient_mask(store: &mut ParamStore, trainable: &BTreeSet<ParamId>) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if !trainable.contains(&id) {
            store.set_requires_grad(id, false);
            store.get_mut(id).grad_mut().fill(0.0);
        }
    }
}
