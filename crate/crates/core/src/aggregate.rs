//! Partial-model reconstruction and sample-weighted federated averaging.

use crate::error::{Error, Result};
use crate::model::{apply_blocks, BlockedModel};
use crate::quant::{decode_delta, QuantizedBlockDelta};

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    pub sample_count: u64,
    pub deltas: Vec<QuantizedBlockDelta>,
}

/// Decode every delta against `prev` and substitute the decoded blocks.
/// Blocks without a delta keep their previous values; an empty update
/// reconstructs `prev` itself.
pub fn apply_deltas(
    prev: &BlockedModel,
    deltas: &[QuantizedBlockDelta],
    round: u32,
) -> Result<BlockedModel> {
    let decoded = deltas
        .iter()
        .map(|delta| {
            let base = prev.block(&delta.block_id).ok_or_else(|| {
                Error::incompatible(format!(
                    "delta names unknown block {}",
                    delta.block_id
                ))
            })?;
            decode_delta(base, delta)
        })
        .collect::<Result<Vec<_>>>()?;
    apply_blocks(prev, &decoded, round)
}

/// Rebuild a client's full local model from its partial update.
pub fn reconstruct_client(prev_global: &BlockedModel, update: &ClientUpdate) -> Result<BlockedModel> {
    apply_deltas(prev_global, &update.deltas, update.round).map_err(|e| {
        Error::incompatible(format!(
            "reconstructing {} for round {}: {e}",
            update.client_id, update.round
        ))
    })
}

/// A reconstructed model with its aggregation weight.
#[derive(Debug, Clone)]
pub struct WeightedModel {
    pub client_id: String,
    pub model: BlockedModel,
    pub sample_count: u64,
}

/// Sample-weighted average of client models.
///
/// Updates are summed in ascending `client_id` order whatever order the
/// caller supplies, and every element accumulates in f64 before one final
/// rounding to f32 — reordering the input list can never change a bit of
/// the result. With all-equal inputs the average returns them exactly.
pub fn fedavg(updates: &[WeightedModel], round: u32) -> Result<BlockedModel> {
    if updates.is_empty() {
        return Err(Error::invalid("fedavg: no updates to aggregate"));
    }
    let mut ordered: Vec<&WeightedModel> = updates.iter().collect();
    ordered.sort_by(|a, b| a.client_id.cmp(&b.client_id));

    let first = &ordered[0].model;
    for u in &ordered[1..] {
        if !first.structure_eq(&u.model) {
            return Err(Error::incompatible(format!(
                "fedavg: update from {} does not match the structure of {}",
                u.client_id, ordered[0].client_id
            )));
        }
    }
    let total: u64 = ordered.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::invalid("fedavg: total sample count is zero"));
    }

    // Accumulate sum(M_i * v_i) per element, then divide once by M.
    let mut sums: Vec<Vec<f64>> = first
        .blocks()
        .iter()
        .flat_map(|b| b.tensors())
        .map(|t| vec![0.0f64; t.len()])
        .collect();
    for u in &ordered {
        let weight = u.sample_count as f64;
        let mut slot = 0;
        for block in u.model.blocks() {
            for tensor in block.tensors() {
                let acc = &mut sums[slot];
                for (a, &v) in acc.iter_mut().zip(tensor.values()) {
                    *a += weight * v as f64;
                }
                slot += 1;
            }
        }
    }

    let total = total as f64;
    let mut averaged = sums.into_iter();
    let blocks = first
        .blocks()
        .iter()
        .map(|block| {
            let tensors = block
                .tensors()
                .iter()
                .map(|t| {
                    let sum = averaged.next().expect("slot count matches tensor count");
                    let values: Vec<f32> = sum.into_iter().map(|s| (s / total) as f32).collect();
                    crate::model::ParameterTensor::new(t.name(), t.shape().to_vec(), values)
                })
                .collect::<Result<Vec<_>>>()?;
            crate::model::Block::new(block.id().clone(), block.layer_kinds().to_vec(), tensors)
        })
        .collect::<Result<Vec<_>>>()?;
    BlockedModel::new(blocks, round)
}
