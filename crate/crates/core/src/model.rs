//! Blocked parameter models.
//!
//! A model is an ordered list of *blocks*, each grouping the tensors of one
//! or more consecutive layers. Blocks are the unit of importance scoring,
//! dropout, and transmission; decomposition rules describing which layer-kind
//! sequences form a block are data, not code.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tag naming what a layer does (`linear`, `activation`, `normalization`, ...).
/// Open-ended on purpose: grouping rules match on tags, so new layer kinds
/// need no code change.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerKind(String);

impl LayerKind {
    pub fn new(kind: impl Into<String>) -> Self {
        Self(kind.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerKind {
    fn from(kind: &str) -> Self {
        Self::new(kind)
    }
}

/// Identifier of a block, unique within a model. Ordering is lexicographic;
/// ids derived by [`decompose`] sort in block-position order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(String);

impl BlockId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BlockId {
    fn from(id: &str) -> Self {
        Self::new(id)
    }
}

/// A named tensor of row-major single-precision values.
///
/// Invariants held by construction: the shape is non-empty with no zero
/// dimension, `values.len()` equals the shape product, and every value is
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl ParameterTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() {
            return Err(Error::invalid(format!("tensor {name:?}: empty shape")));
        }
        if let Some(dim) = shape.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor {name:?}: dimension {dim} is zero"
            )));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "tensor {name:?}: shape {shape:?} implies {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "tensor {name:?}: non-finite value at index {i}"
            )));
        }
        Ok(Self { name, shape, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same name and shape (values may differ).
    pub fn structure_eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape
    }
}

/// One layer of a network as fed to [`decompose`]: a kind tag plus its
/// trainable tensors. Parameter-free layers (activations, pooling) carry
/// an empty tensor list. Non-trainable buffers are simply never included.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub tensors: Vec<ParameterTensor>,
}

impl Layer {
    pub fn new(kind: impl Into<LayerKind>, tensors: Vec<ParameterTensor>) -> Self {
        Self { kind: kind.into(), tensors }
    }
}

/// A semantic block: one or more consecutive layers' tensors under one id.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    id: BlockId,
    layer_kinds: Vec<LayerKind>,
    tensors: Vec<ParameterTensor>,
}

impl Block {
    pub fn new(id: BlockId, layer_kinds: Vec<LayerKind>, tensors: Vec<ParameterTensor>) -> Result<Self> {
        if layer_kinds.is_empty() {
            return Err(Error::invalid(format!("block {id}: no layer kinds")));
        }
        let mut seen = HashSet::new();
        for t in &tensors {
            if !seen.insert(t.name()) {
                return Err(Error::invalid(format!(
                    "block {id}: duplicate tensor name {:?}",
                    t.name()
                )));
            }
        }
        Ok(Self { id, layer_kinds, tensors })
    }

    pub fn id(&self) -> &BlockId {
        &self.id
    }

    pub fn layer_kinds(&self) -> &[LayerKind] {
        &self.layer_kinds
    }

    pub fn tensors(&self) -> &[ParameterTensor] {
        &self.tensors
    }

    /// Number of scalar parameters in the block.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(ParameterTensor::len).sum()
    }

    /// Same id, layer kinds, tensor names and shapes (values may differ).
    pub fn structure_eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.layer_kinds == other.layer_kinds
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.structure_eq(b))
    }

    /// Exact (bit-level) value equality, structure included.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.structure_eq(other)
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Flatten a block into one vector: tensors in declaration order, each in
/// row-major element order.
pub fn vectorize(block: &Block) -> Vec<f32> {
    let mut out = Vec::with_capacity(block.param_count());
    for t in block.tensors() {
        out.extend_from_slice(t.values());
    }
    out
}

/// An ordered collection of blocks plus the round that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedModel {
    blocks: Vec<Block>,
    round: u32,
    total_params: usize,
}

impl BlockedModel {
    pub fn new(blocks: Vec<Block>, round: u32) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("model has no blocks"));
        }
        let mut seen = HashSet::new();
        for b in &blocks {
            if !seen.insert(b.id().clone()) {
                return Err(Error::invalid(format!("duplicate block id {}", b.id())));
            }
        }
        let total_params = blocks.iter().map(Block::param_count).sum();
        Ok(Self { blocks, round, total_params })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: &BlockId) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id() == id)
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn with_round(mut self, round: u32) -> Self {
        self.round = round;
        self
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    /// Same block ids in the same order with the same tensor structure.
    pub fn structure_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.structure_eq(b))
    }

    /// Exact (bit-level) value equality across all blocks; rounds may differ.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.bits_eq(b))
    }
}

/// Grouping rules: an ordered list of layer-kind sequences. Longer sequences
/// are tried first; among equal lengths, declaration order wins.
#[derive(Debug, Clone, Default)]
pub struct DecompositionRules {
    sequences: Vec<Vec<LayerKind>>,
}

impl DecompositionRules {
    pub fn new(sequences: Vec<Vec<LayerKind>>) -> Result<Self> {
        if sequences.iter().any(Vec::is_empty) {
            return Err(Error::invalid("decomposition rule with empty sequence"));
        }
        let mut sequences = sequences;
        // Stable sort: longest-match-first, declaration order among ties.
        sequences.sort_by_key(|s| std::cmp::Reverse(s.len()));
        Ok(Self { sequences })
    }

    /// No rules: every layer becomes its own block.
    pub fn none() -> Self {
        Self::default()
    }

    fn longest_match(&self, layers: &[Layer]) -> Option<usize> {
        self.sequences
            .iter()
            .find(|seq| {
                seq.len() <= layers.len()
                    && seq.iter().zip(layers).all(|(k, l)| *k == l.kind)
            })
            .map(Vec::len)
    }
}

/// Split a layer sequence into semantic blocks.
///
/// Scans left to right; at each position the longest matching rule forms a
/// block, and a layer no rule covers becomes a singleton block. Block ids
/// are derived from the block position, leading layer kind, and leading
/// layer index (`block_01.linear_2`), so identically-shaped models decompose
/// to identical ids everywhere. Tensor names are prefixed with their layer
/// index to keep them unique within a block.
pub fn decompose(layers: &[Layer], rules: &DecompositionRules) -> Result<BlockedModel> {
    if layers.is_empty() {
        return Err(Error::invalid("cannot decompose an empty layer sequence"));
    }
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < layers.len() {
        let span = rules.longest_match(&layers[pos..]).unwrap_or(1);
        let group = &layers[pos..pos + span];
        let id = BlockId::new(format!(
            "block_{:02}.{}_{}",
            blocks.len(),
            group[0].kind,
            pos
        ));
        let kinds = group.iter().map(|l| l.kind.clone()).collect();
        let mut tensors = Vec::new();
        for (offset, layer) in group.iter().enumerate() {
            for t in &layer.tensors {
                tensors.push(ParameterTensor::new(
                    format!("layer{:02}.{}", pos + offset, t.name()),
                    t.shape().to_vec(),
                    t.values().to_vec(),
                )?);
            }
        }
        blocks.push(Block::new(id, kinds, tensors)?);
        pos += span;
    }
    BlockedModel::new(blocks, 0)
}

/// Substitute blocks of `base` with `replacements` (matched by id) and stamp
/// the result with `round`. Untouched blocks are carried over unchanged.
/// Every replacement must name an existing block and match its structure.
pub fn apply_blocks(base: &BlockedModel, replacements: &[Block], round: u32) -> Result<BlockedModel> {
    let mut by_id: BTreeMap<&BlockId, &Block> = BTreeMap::new();
    for r in replacements {
        if by_id.insert(r.id(), r).is_some() {
            return Err(Error::invalid(format!("duplicate replacement block {}", r.id())));
        }
    }
    for (&id, &r) in &by_id {
        match base.block(id) {
            None => {
                return Err(Error::incompatible(format!(
                    "replacement block {id} does not exist in the base model"
                )))
            }
            Some(b) if !b.structure_eq(r) => {
                return Err(Error::incompatible(format!(
                    "replacement block {id} does not match the base structure"
                )))
            }
            Some(_) => {}
        }
    }
    let blocks = base
        .blocks()
        .iter()
        .map(|b| by_id.get(b.id()).map_or_else(|| b.clone(), |&r| r.clone()))
        .collect();
    BlockedModel::new(blocks, round)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(name: &str, shape: &[usize], values: &[f32]) -> ParameterTensor {
        ParameterTensor::new(name, shape.to_vec(), values.to_vec()).unwrap()
    }

    fn linear(n: usize) -> Layer {
        // n scalar weights + 1 bias value, enough to track param counts.
        Layer::new(
            "linear",
            vec![
                tensor("weight", &[n], &vec![0.5; n]),
                tensor("bias", &[1], &[0.0]),
            ],
        )
    }

    fn activation() -> Layer {
        Layer::new("activation", vec![])
    }

    fn rules(seqs: &[&[&str]]) -> DecompositionRules {
        DecompositionRules::new(
            seqs.iter()
                .map(|s| s.iter().map(|k| LayerKind::from(*k)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tensor_rejects_bad_inputs() {
        assert!(ParameterTensor::new("t", vec![], vec![]).is_err());
        assert!(ParameterTensor::new("t", vec![2, 0], vec![]).is_err());
        assert!(ParameterTensor::new("t", vec![3], vec![1.0, 2.0]).is_err());
        assert!(ParameterTensor::new("t", vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(ParameterTensor::new("t", vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn decompose_pairs_linear_activation() {
        let layers = vec![linear(4), activation(), linear(4), activation(), linear(4)];
        let m = decompose(&layers, &rules(&[&["linear", "activation"]])).unwrap();
        let kinds: Vec<Vec<&str>> = m
            .blocks()
            .iter()
            .map(|b| b.layer_kinds().iter().map(LayerKind::as_str).collect())
            .collect();
        assert_eq!(
            kinds,
            vec![
                vec!["linear", "activation"],
                vec!["linear", "activation"],
                vec!["linear"]
            ]
        );
        let ids: Vec<&str> = m.blocks().iter().map(|b| b.id().as_str()).collect();
        assert_eq!(ids, vec!["block_00.linear_0", "block_01.linear_2", "block_02.linear_4"]);
    }

    #[test]
    fn decompose_without_rules_gives_singletons() {
        let layers = vec![linear(3)];
        let m = decompose(&layers, &DecompositionRules::none()).unwrap();
        assert_eq!(m.blocks().len(), 1);
        assert_eq!(m.blocks()[0].layer_kinds().len(), 1);
    }

    #[test]
    fn decompose_whole_sequence_rule() {
        let layers = vec![
            Layer::new("conv", vec![tensor("kernel", &[4], &[1.0; 4])]),
            Layer::new("pool", vec![]),
            Layer::new("normalization", vec![tensor("gamma", &[2], &[1.0, 1.0])]),
            activation(),
        ];
        let m = decompose(
            &layers,
            &rules(&[&["conv", "pool", "normalization", "activation"]]),
        )
        .unwrap();
        assert_eq!(m.blocks().len(), 1);
        assert_eq!(m.blocks()[0].param_count(), 6);
    }

    #[test]
    fn decompose_prefers_longest_rule() {
        let layers = vec![linear(2), activation(), linear(2)];
        // Both rules match at position 0; the longer one must win.
        let m = rules(&[&["linear"], &["linear", "activation"]]);
        let m = decompose(&layers, &m).unwrap();
        assert_eq!(m.blocks().len(), 2);
        assert_eq!(m.blocks()[0].layer_kinds().len(), 2);
    }

    #[test]
    fn decompose_rejects_empty() {
        assert!(decompose(&[], &DecompositionRules::none()).is_err());
    }

    #[test]
    fn decompose_partition_covers_all_params() {
        let layers = vec![linear(4), activation(), linear(4), activation(), linear(4)];
        let total: usize = layers.iter().flat_map(|l| l.tensors.iter()).map(|t| t.len()).sum();
        let m = decompose(&layers, &rules(&[&["linear", "activation"]])).unwrap();
        assert_eq!(m.total_params(), total);
    }

    #[test]
    fn vectorize_concatenates_in_order() {
        let b = Block::new(
            BlockId::from("b"),
            vec![LayerKind::from("linear")],
            vec![tensor("a", &[2], &[1.0, 2.0]), tensor("b", &[1], &[3.0])],
        )
        .unwrap();
        assert_eq!(vectorize(&b), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn vectorize_single_tensor_is_identity() {
        let b = Block::new(
            BlockId::from("b"),
            vec![LayerKind::from("linear")],
            vec![tensor("a", &[2, 2], &[1.0, 2.0, 3.0, 4.0])],
        )
        .unwrap();
        assert_eq!(vectorize(&b), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vectorize(&b).len(), b.param_count());
    }

    fn two_block_model(v0: f32, v1: f32) -> BlockedModel {
        BlockedModel::new(
            vec![
                Block::new(
                    BlockId::from("b0"),
                    vec![LayerKind::from("linear")],
                    vec![tensor("w", &[2], &[v0, v0])],
                )
                .unwrap(),
                Block::new(
                    BlockId::from("b1"),
                    vec![LayerKind::from("linear")],
                    vec![tensor("w", &[1], &[v1])],
                )
                .unwrap(),
            ],
            0,
        )
        .unwrap()
    }

    #[test]
    fn apply_blocks_replaces_named_blocks_only() {
        let base = two_block_model(1.0, 2.0);
        let donor = two_block_model(9.0, 8.0);

        // Replacing with every block reproduces the donor's values.
        let all = apply_blocks(&base, donor.blocks(), 5).unwrap();
        assert!(all.bits_eq(&donor));
        assert_eq!(all.round(), 5);

        // Empty replacement list is the identity on values.
        let none = apply_blocks(&base, &[], 5).unwrap();
        assert!(none.bits_eq(&base));

        // Replacing one block leaves the other untouched.
        let one = apply_blocks(&base, &donor.blocks()[..1], 5).unwrap();
        assert_eq!(one.blocks()[0].tensors()[0].values(), &[9.0, 9.0]);
        assert_eq!(one.blocks()[1].tensors()[0].values(), &[2.0]);
    }

    #[test]
    fn apply_blocks_rejects_unknown_and_mismatched() {
        let base = two_block_model(1.0, 2.0);
        let stray = Block::new(
            BlockId::from("nope"),
            vec![LayerKind::from("linear")],
            vec![tensor("w", &[1], &[0.0])],
        )
        .unwrap();
        assert!(matches!(
            apply_blocks(&base, &[stray], 1),
            Err(Error::IncompatibleStructure(_))
        ));

        let reshaped = Block::new(
            BlockId::from("b1"),
            vec![LayerKind::from("linear")],
            vec![tensor("w", &[2], &[0.0, 0.0])],
        )
        .unwrap();
        assert!(matches!(
            apply_blocks(&base, &[reshaped], 1),
            Err(Error::IncompatibleStructure(_))
        ));
    }

    #[test]
    fn model_rejects_duplicate_block_ids() {
        let b = Block::new(
            BlockId::from("b"),
            vec![LayerKind::from("linear")],
            vec![tensor("w", &[1], &[0.0])],
        )
        .unwrap();
        assert!(BlockedModel::new(vec![b.clone(), b], 0).is_err());
    }
}
