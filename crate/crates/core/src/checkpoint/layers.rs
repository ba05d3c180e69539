use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::CheckpointIndex;
use crate::error::{Error, Result};

/// What a per-layer tensor is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
    AttnNorm,
    MlpNorm,
    AttnNormBias,
    MlpNormBias,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::Query,
        Role::Key,
        Role::Value,
        Role::Output,
        Role::MlpUp,
        Role::MlpDown,
        Role::AttnNorm,
        Role::MlpNorm,
        Role::AttnNormBias,
        Role::MlpNormBias,
    ];

    /// Short key used in custom naming-scheme strings.
    pub fn key(self) -> &'static str {
        match self {
            Role::Query => "q",
            Role::Key => "k",
            Role::Value => "v",
            Role::Output => "o",
            Role::MlpUp => "up",
            Role::MlpDown => "down",
            Role::AttnNorm => "attn_norm",
            Role::MlpNorm => "mlp_norm",
            Role::AttnNormBias => "attn_norm_bias",
            Role::MlpNormBias => "mlp_norm_bias",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Role::ALL.into_iter().find(|r| r.key() == key)
    }

    pub fn describe(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Output => "output",
            Role::MlpUp => "mlp-up",
            Role::MlpDown => "mlp-down",
            Role::AttnNorm => "attention-norm",
            Role::MlpNorm => "mlp-norm",
            Role::AttnNormBias => "attention-norm-bias",
            Role::MlpNormBias => "mlp-norm-bias",
        }
    }
}

/// A name pattern with exactly one `{i}` placeholder for the zero-based
/// layer number. A leading `*` matches any prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern {
    any_prefix: bool,
    before: String,
    after: String,
}

impl Pattern {
    fn parse(raw: &str) -> Result<Self> {
        let (any_prefix, body) = match raw.strip_prefix('*') {
            Some(rest) => (true, rest),
            None => (false, raw),
        };
        let mut parts = body.split("{i}");
        let before = parts.next().unwrap_or_default().to_owned();
        let Some(after) = parts.next() else {
            return Err(Error::Format(format!("pattern {raw:?} lacks an {{i}} placeholder")));
        };
        if parts.next().is_some() {
            return Err(Error::Format(format!("pattern {raw:?} has more than one {{i}}")));
        }
        Ok(Self { any_prefix, before, after: after.to_owned() })
    }

    fn match_index(&self, name: &str) -> Option<usize> {
        let rest = name.strip_suffix(self.after.as_str())?;
        let digits_start = rest.rfind(|c: char| !c.is_ascii_digit()).map_or(0, |p| p + 1);
        let (head, digits) = rest.split_at(digits_start);
        if digits.is_empty() || (digits.len() > 1 && digits.starts_with('0')) {
            return None;
        }
        let matched = if self.any_prefix { head.ends_with(self.before.as_str()) } else { head == self.before };
        matched.then(|| digits.parse().ok()).flatten()
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let star = if self.any_prefix { "*" } else { "" };
        write!(f, "{star}{}{{i}}{}", self.before, self.after)
    }
}

/// Rules binding checkpoint tensor names to per-layer roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamingScheme {
    label: String,
    patterns: BTreeMap<Role, Pattern>,
}

impl NamingScheme {
    /// `…layers.{i}.self_attn.q_proj.weight` and friends.
    pub fn llama() -> Self {
        let p = |s: &str| Pattern::parse(s).expect("built-in pattern");
        let patterns = BTreeMap::from([
            (Role::Query, p("*layers.{i}.self_attn.q_proj.weight")),
            (Role::Key, p("*layers.{i}.self_attn.k_proj.weight")),
            (Role::Value, p("*layers.{i}.self_attn.v_proj.weight")),
            (Role::Output, p("*layers.{i}.self_attn.o_proj.weight")),
            (Role::MlpUp, p("*layers.{i}.mlp.up_proj.weight")),
            (Role::MlpDown, p("*layers.{i}.mlp.down_proj.weight")),
            (Role::AttnNorm, p("*layers.{i}.input_layernorm.weight")),
            (Role::MlpNorm, p("*layers.{i}.post_attention_layernorm.weight")),
            (Role::AttnNormBias, p("*layers.{i}.input_layernorm.bias")),
            (Role::MlpNormBias, p("*layers.{i}.post_attention_layernorm.bias")),
        ]);
        Self { label: "llama".into(), patterns }
    }

    /// Custom scheme from `role=pattern` pairs; `q` and `k` are required.
    pub fn custom(pairs: &[(Role, &str)]) -> Result<Self> {
        let mut patterns = BTreeMap::new();
        for &(role, raw) in pairs {
            if patterns.insert(role, Pattern::parse(raw)?).is_some() {
                return Err(Error::Format(format!("role {} given twice", role.key())));
            }
        }
        for role in [Role::Query, Role::Key] {
            if !patterns.contains_key(&role) {
                return Err(Error::Format(format!("naming scheme needs a `{}` pattern", role.key())));
            }
        }
        let label = pairs.iter().map(|(r, p)| format!("{}={p}", r.key())).collect::<Vec<_>>().join(";");
        Ok(Self { label, patterns })
    }

    /// Pattern for `role` with `{i}` filled in (zero-based file numbering).
    pub fn name_for(&self, role: Role, layer: usize) -> Option<String> {
        self.patterns.get(&role).map(|p| format!("{}{}{}", p.before, layer - 1, p.after))
    }
}

impl fmt::Display for NamingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for NamingScheme {
    type Err = Error;

    /// `llama`, or `q=<pattern>;k=<pattern>[;v=…]` with role keys from [`Role::key`].
    fn from_str(s: &str) -> Result<Self> {
        if s == "llama" {
            return Ok(Self::llama());
        }
        let pairs = s
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|pair| {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("expected role=pattern, got {pair:?}")))?;
                let role = Role::from_key(k.trim()).ok_or_else(|| Error::Format(format!("unknown role {k:?}")))?;
                Ok((role, v.trim()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::custom(&pairs)
    }
}

/// Tensor names bound to one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTensors {
    /// One-based layer index.
    pub layer: usize,
    pub names: BTreeMap<Role, String>,
}

impl LayerTensors {
    pub fn name(&self, role: Role) -> Option<&str> {
        self.names.get(&role).map(String::as_str)
    }

    pub fn require(&self, role: Role) -> Result<&str> {
        self.name(role).ok_or(Error::MissingTensor { layer: self.layer, role: role.describe() })
    }
}

/// Per-layer tensor names for layers `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTensorMap {
    pub layers: Vec<LayerTensors>,
}

impl LayerTensorMap {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layer `layer` (one-based).
    pub fn layer(&self, layer: usize) -> &LayerTensors {
        &self.layers[layer - 1]
    }
}

/// Binds checkpoint names to layers. Files number layers from 0; the map
/// numbers them from 1, and `L` is one more than the largest file index.
pub fn enumerate_layers(index: &CheckpointIndex, scheme: &NamingScheme) -> Result<LayerTensorMap> {
    let mut found: BTreeMap<usize, BTreeMap<Role, String>> = BTreeMap::new();
    for name in index.records.keys() {
        for (&role, pattern) in &scheme.patterns {
            let Some(i) = pattern.match_index(name) else { continue };
            let slot = found.entry(i + 1).or_default();
            if let Some(prev) = slot.insert(role, name.clone()) {
                return Err(Error::Format(format!(
                    "names {prev:?} and {name:?} both match the {} pattern of layer {}",
                    role.describe(),
                    i + 1
                )));
            }
        }
    }
    let Some((&max_layer, _)) = found.last_key_value() else {
        return Err(Error::NoLayersMatched(scheme.to_string()));
    };
    let mut layers = Vec::with_capacity(max_layer);
    for layer in 1..=max_layer {
        let names = found.remove(&layer).unwrap_or_default();
        let entry = LayerTensors { layer, names };
        entry.require(Role::Query)?;
        entry.require(Role::Key)?;
        layers.push(entry);
    }
    Ok(LayerTensorMap { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{write_checkpoint, Dtype, TensorSpec};

    fn index_with(names: &[&str]) -> CheckpointIndex {
        let specs: Vec<TensorSpec> = names.iter().map(|n| TensorSpec::new(*n, Dtype::F32, &[1])).collect();
        let mut file = Vec::new();
        write_checkpoint(&mut file, &specs, &BTreeMap::new(), |_, buf| {
            buf.push(1.0);
            Ok(())
        })
        .unwrap();
        CheckpointIndex::from_bytes(&file).unwrap()
    }

    #[test]
    fn pattern_matching() {
        let p = Pattern::parse("*layers.{i}.self_attn.q_proj.weight").unwrap();
        assert_eq!(p.match_index("model.layers.12.self_attn.q_proj.weight"), Some(12));
        assert_eq!(p.match_index("layers.0.self_attn.q_proj.weight"), Some(0));
        assert_eq!(p.match_index("model.layers.x.self_attn.q_proj.weight"), None);
        assert_eq!(p.match_index("model.layers.01.self_attn.q_proj.weight"), None);
        let exact = Pattern::parse("blk.{i}.attn_q").unwrap();
        assert_eq!(exact.match_index("blk.3.attn_q"), Some(3));
        assert_eq!(exact.match_index("x.blk.3.attn_q"), None);
        assert!(Pattern::parse("no_placeholder").is_err());
        assert!(Pattern::parse("{i}.{i}").is_err());
    }

    #[test]
    fn missing_key_names_the_layer() {
        let names = [
            "model.layers.0.self_attn.q_proj.weight",
            "model.layers.0.self_attn.k_proj.weight",
            "model.layers.1.self_attn.q_proj.weight",
            "model.layers.1.self_attn.k_proj.weight",
            "model.layers.2.self_attn.q_proj.weight",
        ];
        let err = enumerate_layers(&index_with(&names), &NamingScheme::llama()).unwrap_err();
        assert!(matches!(err, Error::MissingTensor { layer: 3, role: "key" }), "{err}");
    }

    #[test]
    fn custom_scheme_without_matches() {
        let scheme: NamingScheme = "q=blocks.{i}.wq;k=blocks.{i}.wk".parse().unwrap();
        let index = index_with(&["model.layers.0.self_attn.q_proj.weight"]);
        assert!(matches!(enumerate_layers(&index, &scheme), Err(Error::NoLayersMatched(_))));

        let index = index_with(&["blocks.0.wq", "blocks.0.wk", "blocks.1.wq", "blocks.1.wk"]);
        let map = enumerate_layers(&index, &scheme).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map.layer(2).name(Role::Key), Some("blocks.1.wk"));
        assert_eq!(map.layer(2).name(Role::Value), None);
    }

    #[test]
    fn scheme_parsing_errors() {
        assert!("q=a.{i}".parse::<NamingScheme>().is_err());
        assert!("q=a.{i};k=b.{i};zz=c.{i}".parse::<NamingScheme>().is_err());
        assert!("q=a.{i};q=b.{i};k=c.{i}".parse::<NamingScheme>().is_err());
        assert!("nonsense".parse::<NamingScheme>().is_err());
        assert_eq!(NamingScheme::llama().name_for(Role::Query, 1).unwrap(), "layers.0.self_attn.q_proj.weight");
    }
}
