use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which projection inside a transformer block a weight matrix implements.
///
/// Declaration order is the scan order used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
    Gate,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::Output,
        ModuleKind::Up,
        ModuleKind::Down,
        ModuleKind::Gate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "query",
            ModuleKind::Key => "key",
            ModuleKind::Value => "value",
            ModuleKind::Output => "output",
            ModuleKind::Up => "up",
            ModuleKind::Down => "down",
            ModuleKind::Gate => "gate",
        }
    }
}

/// One attackable weight matrix: `(layer, kind)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }

    /// Every module of an `n_layers` model in scan order (layer-major).
    pub fn all(n_layers: usize) -> impl Iterator<Item = ModuleId> {
        (0..n_layers).flat_map(|l| ModuleKind::ALL.into_iter().map(move |k| ModuleId::new(l, k)))
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.name())
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    /// Parses the `layer<N>.<kind>` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("malformed module id `{s}`"));
        let (layer, kind) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer
            .strip_prefix("layer")
            .and_then(|n| n.parse().ok())
            .ok_or_else(bad)?;
        let kind = ModuleKind::ALL
            .into_iter()
            .find(|k| k.name() == kind)
            .ok_or_else(bad)?;
        Ok(ModuleId { layer, kind })
    }
}
