//! Opportunistic block dropout: score every block by how much it moved
//! during local training, then greedily retain the most-changed blocks that
//! fit a `(1 - lambda)` share of the model's parameter count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{vectorize, Block, BlockId, BlockedModel};

/// Mean block difference: the Euclidean distance between the flattened
/// previous and current block, normalized by the block's parameter count.
/// Symmetric, and exactly zero for identical blocks.
pub fn mbd(prev: &Block, cur: &Block) -> Result<f64> {
    if !prev.structure_eq(cur) {
        return Err(Error::incompatible(format!(
            "mbd: blocks {} and {} differ in structure",
            prev.id(),
            cur.id()
        )));
    }
    let a = vectorize(prev);
    let b = vectorize(cur);
    let sum_sq: f64 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum_sq.sqrt() / a.len() as f64)
}

/// Importance score of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockImportance {
    pub block_id: BlockId,
    pub mbd: f64,
    pub param_count: usize,
}

/// Score every block of `cur` against its counterpart in `prev`.
/// Entries come back in model block order; consumers sort as they need.
pub fn score_all(prev: &BlockedModel, cur: &BlockedModel) -> Result<Vec<BlockImportance>> {
    if !prev.structure_eq(cur) {
        return Err(Error::incompatible(
            "score_all: models differ in block structure".to_string(),
        ));
    }
    prev.blocks()
        .iter()
        .zip(cur.blocks())
        .map(|(p, c)| {
            Ok(BlockImportance {
                block_id: c.id().clone(),
                mbd: mbd(p, c)?,
                param_count: c.param_count(),
            })
        })
        .collect()
}

/// Deterministic ordering for blocks with equal MBD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Ascending lexicographic block id (the default).
    #[default]
    BlockIdAscending,
    /// Descending lexicographic block id.
    BlockIdDescending,
}

/// Dropout parameters. `lambda` is the fraction of the model (by parameter
/// count) to drop: 0 retains everything, 1 retains nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    lambda: f64,
    pub tie_break: TieBreak,
}

impl DropoutConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(Self { lambda, tie_break: TieBreak::default() })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Select the blocks of `cur` to transmit.
///
/// Blocks are visited in descending MBD order (ties broken per config) and
/// greedily accepted while the running parameter count stays within
/// `(1 - lambda) * total_params`. A block that does not fit is skipped, not
/// a stopping point: a later, smaller block may still fit. Returns retained
/// blocks in visit order.
pub fn select_blocks(
    prev: &BlockedModel,
    cur: &BlockedModel,
    cfg: &DropoutConfig,
) -> Result<Vec<Block>> {
    let scores = score_all(prev, cur)?;
    Ok(select_by_scores(&scores, cur, cfg))
}

/// Selection step alone, for callers that already scored (and want the
/// scores for logging).
pub fn select_by_scores(
    scores: &[BlockImportance],
    cur: &BlockedModel,
    cfg: &DropoutConfig,
) -> Vec<Block> {
    let mut ranked: Vec<&BlockImportance> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        let by_mbd = b.mbd.total_cmp(&a.mbd);
        by_mbd.then_with(|| match cfg.tie_break {
            TieBreak::BlockIdAscending => a.block_id.cmp(&b.block_id),
            TieBreak::BlockIdDescending => b.block_id.cmp(&a.block_id),
        })
    });

    let budget = (1.0 - cfg.lambda) * cur.total_params() as f64;
    let mut used = 0usize;
    let mut retained = Vec::new();
    for s in ranked {
        let new_size = used + s.param_count;
        if new_size as f64 > budget {
            continue; // skip: a smaller block later may still fit
        }
        used = new_size;
        if let Some(block) = cur.block(&s.block_id) {
            retained.push(block.clone());
        }
    }
    retained
}

/// One dropout decision, kept for the contribution log: what every block
/// scored and which blocks made the cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLogEntry {
    pub round: u32,
    pub sender: String,
    pub scores: Vec<BlockImportance>,
    pub retained: Vec<BlockId>,
}

impl ContributionLogEntry {
    pub fn new(
        round: u32,
        sender: impl Into<String>,
        scores: Vec<BlockImportance>,
        retained: Vec<BlockId>,
    ) -> Self {
        debug_assert!(
            retained
                .iter()
                .all(|id| scores.iter().any(|s| &s.block_id == id)),
            "retained ids must come from the scored set"
        );
        Self { round, sender: sender.into(), scores, retained }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, ParameterTensor};

    fn block(id: &str, values: &[f32]) -> Block {
        Block::new(
            BlockId::from(id),
            vec![LayerKind::from("linear")],
            vec![ParameterTensor::new("w", vec![values.len()], values.to_vec()).unwrap()],
        )
        .unwrap()
    }

    fn model(blocks: Vec<Block>) -> BlockedModel {
        BlockedModel::new(blocks, 0).unwrap()
    }

    #[test]
    fn mbd_identical_blocks_is_exactly_zero() {
        let b = block("b", &[0.3, -1.7, 2.2]);
        assert_eq!(mbd(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn mbd_hand_computed_values() {
        // ||(3,4)|| / 2 = 5/2
        let a = block("b", &[0.0, 0.0]);
        let b = block("b", &[3.0, 4.0]);
        assert_eq!(mbd(&a, &b).unwrap(), 2.5);
        // symmetry
        assert_eq!(mbd(&b, &a).unwrap(), 2.5);

        // ||(1,1,1,1)|| / 4 = 2/4
        let a = block("b", &[1.0; 4]);
        let b = block("b", &[2.0; 4]);
        assert_eq!(mbd(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn mbd_rejects_structure_mismatch() {
        let a = block("b", &[1.0, 2.0]);
        let b = block("b", &[1.0, 2.0, 3.0]);
        assert!(matches!(mbd(&a, &b), Err(Error::IncompatibleStructure(_))));
    }

    #[test]
    fn score_all_counts_and_zeroes() {
        let prev = model(vec![block("a", &[1.0, 1.0]), block("b", &[2.0])]);
        let same = score_all(&prev, &prev).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.iter().all(|s| s.mbd == 0.0));

        let cur = model(vec![block("a", &[1.0, 1.0]), block("b", &[3.0])]);
        let scores = score_all(&prev, &cur).unwrap();
        assert_eq!(scores[0].mbd, 0.0);
        assert_eq!(scores[1].mbd, 1.0);
    }

    /// Build prev/cur pairs whose blocks have chosen sizes and MBDs: the
    /// current block differs from zero in every value by mbd * sqrt(n)/n...
    /// simpler: set one value to mbd * n, the rest zero (L2 = mbd * n).
    fn pair_with(sizes_mbds: &[(&str, usize, f64)]) -> (BlockedModel, BlockedModel) {
        let mut prev = Vec::new();
        let mut cur = Vec::new();
        for &(id, n, target) in sizes_mbds {
            prev.push(block(id, &vec![0.0; n]));
            let mut v = vec![0.0f32; n];
            v[0] = (target * n as f64) as f32;
            cur.push(block(id, &v));
        }
        (model(prev), model(cur))
    }

    #[test]
    fn select_skips_oversized_block_and_continues() {
        // sizes (6, 3, 2) with MBD ranking b6 > b2 > b3; budget 5.5
        let (prev, cur) = pair_with(&[("b6", 6, 0.9), ("b3", 3, 0.5), ("b2", 2, 0.8)]);
        let cfg = DropoutConfig::new(0.5).unwrap();
        let ids: Vec<String> = select_blocks(&prev, &cur, &cfg)
            .unwrap()
            .iter()
            .map(|b| b.id().to_string())
            .collect();
        // 6 exceeds 5.5 and is skipped; 2 then 3 both fit.
        assert_eq!(ids, vec!["b2", "b3"]);
    }

    #[test]
    fn select_lambda_extremes() {
        let (prev, cur) = pair_with(&[("a", 4, 0.3), ("b", 2, 0.7), ("c", 5, 0.1)]);
        let all = select_blocks(&prev, &cur, &DropoutConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(all.len(), 3);
        // lambda = 0 returns blocks sorted by descending importance.
        let ids: Vec<String> = all.iter().map(|b| b.id().to_string()).collect();
        assert_eq!(ids, vec!["b", "a", "c"]);

        let none = select_blocks(&prev, &cur, &DropoutConfig::new(1.0).unwrap()).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn select_breaks_ties_by_block_id() {
        // Identical deltas => identical MBD; only ids order them.
        let prev = model(vec![block("b", &[0.0]), block("a", &[0.0]), block("c", &[0.0])]);
        let cur = model(vec![block("b", &[1.0]), block("a", &[1.0]), block("c", &[1.0])]);
        let mut cfg = DropoutConfig::new(0.0).unwrap();
        let ids: Vec<String> = select_blocks(&prev, &cur, &cfg)
            .unwrap()
            .iter()
            .map(|b| b.id().to_string())
            .collect();
        assert_eq!(ids, vec!["a", "b", "c"]);

        cfg.tie_break = TieBreak::BlockIdDescending;
        let ids: Vec<String> = select_blocks(&prev, &cur, &cfg)
            .unwrap()
            .iter()
            .map(|b| b.id().to_string())
            .collect();
        assert_eq!(ids, vec!["c", "b", "a"]);
    }

    #[test]
    fn dropout_config_rejects_out_of_range() {
        assert!(DropoutConfig::new(-0.1).is_err());
        assert!(DropoutConfig::new(1.1).is_err());
        assert!(DropoutConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn full_dropout_logs_empty_retention() {
        let (prev, cur) = pair_with(&[("a", 4, 0.3), ("b", 2, 0.7)]);
        let scores = score_all(&prev, &cur).unwrap();
        let cfg = DropoutConfig::new(1.0).unwrap();
        let retained = select_by_scores(&scores, &cur, &cfg);
        let entry = ContributionLogEntry::new(
            3,
            "client_00",
            scores,
            retained.iter().map(|b| b.id().clone()).collect(),
        );
        assert!(entry.retained.is_empty());
        assert_eq!(entry.scores.len(), 2);
    }
}
