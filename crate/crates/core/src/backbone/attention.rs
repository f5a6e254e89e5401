use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for probability maps.
pub const ROW_SUM_TOLERANCE: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

/// Static description of one attention layer of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub id: String,
    pub kind: AttentionKind,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
}

/// Softmax probabilities of one layer, shape `(heads, queries, keys)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub probs: Vec<f32>,
}

impl AttentionMap {
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.chunks(self.keys)
    }

    /// Largest deviation of any row sum from 1, or infinity if an entry is
    /// negative or non-finite.
    pub fn stochastic_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for row in self.rows() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return f32::INFINITY;
            }
            let s: f32 = row.iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.stochastic_error() <= ROW_SUM_TOLERANCE
    }

    fn matches(&self, layer: &AttentionLayer) -> bool {
        self.kind == layer.kind
            && self.heads == layer.heads
            && self.queries == layer.queries
            && self.keys == layer.keys
            && self.probs.len() == self.heads * self.queries * self.keys
    }
}

/// Attention maps recorded during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCapture {
    pub step_index: usize,
    pub maps: BTreeMap<String, AttentionMap>,
}

impl AttentionCapture {
    pub fn of_kind(&self, kind: AttentionKind) -> impl Iterator<Item = (&String, &AttentionMap)> {
        self.maps.iter().filter(move |(_, m)| m.kind == kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reconstruction,
    Transition,
}

/// Probability maps to splice into named layers of a receiving forward pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InjectionDirective {
    pub maps: BTreeMap<String, (AttentionMap, Provenance)>,
}

impl InjectionDirective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn insert(&mut self, layer: impl Into<String>, map: AttentionMap, provenance: Provenance) {
        self.maps.insert(layer.into(), (map, provenance));
    }

    /// Copies every map of `kind` from a capture, keeping only layers accepted
    /// by `filter`.
    pub fn extend_from_capture(
        &mut self,
        capture: &AttentionCapture,
        kind: AttentionKind,
        provenance: Provenance,
        filter: impl Fn(&str) -> bool,
    ) {
        for (id, map) in capture.of_kind(kind) {
            if filter(id) {
                self.insert(id.clone(), map.clone(), provenance);
            }
        }
    }

    /// Validates layer ids, kinds, shapes and row-stochasticity against a
    /// backbone's layer table.
    pub fn validate(&self, layers: &[AttentionLayer]) -> Result<()> {
        for (id, (map, _)) in &self.maps {
            let layer = layers
                .iter()
                .find(|l| &l.id == id)
                .ok_or_else(|| Error::Injection(format!("unknown attention layer `{id}`")))?;
            if !map.matches(layer) {
                return Err(Error::Injection(format!(
                    "map for `{id}` is {:?} ({}x{}x{}), layer expects {:?} ({}x{}x{})",
                    map.kind, map.heads, map.queries, map.keys, layer.kind, layer.heads, layer.queries, layer.keys
                )));
            }
            if !map.is_row_stochastic() {
                return Err(Error::Injection(format!("map for `{id}` is not row-stochastic")));
            }
        }
        Ok(())
    }
}
