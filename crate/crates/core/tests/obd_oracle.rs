//! Block-selection checked against an independently coded greedy reference,
//! plus the selection invariants that must hold for every input.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedobd_core::{
    select_blocks, Block, BlockId, BlockedModel, DropoutConfig, LayerKind, ParameterTensor,
};

/// Reference implementation, written straight from the selection rule with
/// its own scoring loop: rank by (MBD descending, id ascending), then keep
/// every block that still fits the `(1 - lambda)` parameter budget,
/// skipping — not stopping at — blocks that do not fit.
fn oracle_retained_ids(prev: &BlockedModel, cur: &BlockedModel, lambda: f64) -> Vec<String> {
    struct Row {
        id: String,
        mbd: f64,
        size: usize,
    }
    let mut rows = Vec::new();
    for (pb, cb) in prev.blocks().iter().zip(cur.blocks()) {
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for (pt, ct) in pb.tensors().iter().zip(cb.tensors()) {
            for (&a, &b) in pt.values().iter().zip(ct.values()) {
                let d = a as f64 - b as f64;
                sum_sq += d * d;
                count += 1;
            }
        }
        rows.push(Row { id: pb.id().to_string(), mbd: sum_sq.sqrt() / count as f64, size: count });
    }
    rows.sort_by(|a, b| b.mbd.total_cmp(&a.mbd).then_with(|| a.id.cmp(&b.id)));

    let budget = (1.0 - lambda) * cur.total_params() as f64;
    let mut used = 0usize;
    let mut retained = Vec::new();
    for row in rows {
        if (used + row.size) as f64 > budget {
            continue;
        }
        used += row.size;
        retained.push(row.id);
    }
    retained
}

fn block_from_values(index: usize, values: Vec<f32>) -> Block {
    Block::new(
        BlockId::from(format!("b{index:02}").as_str()),
        vec![LayerKind::from("linear")],
        vec![ParameterTensor::new("w", vec![values.len()], values).unwrap()],
    )
    .unwrap()
}

/// Build a (prev, cur) model pair from per-block sizes. A `frozen` block
/// keeps identical values in both versions, which is how equal-MBD ties
/// arise in practice.
fn model_pair(seed: u64, sizes: &[usize], frozen: &[bool]) -> (BlockedModel, BlockedModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev_blocks = Vec::new();
    let mut cur_blocks = Vec::new();
    for (i, (&size, &keep)) in sizes.iter().zip(frozen).enumerate() {
        let prev_values: Vec<f32> = (0..size).map(|_| rng.random_range(-10.0..10.0)).collect();
        let cur_values: Vec<f32> = if keep {
            prev_values.clone()
        } else {
            prev_values.iter().map(|v| v + rng.random_range(-1.0f32..1.0)).collect()
        };
        prev_blocks.push(block_from_values(i, prev_values));
        cur_blocks.push(block_from_values(i, cur_values));
    }
    (
        BlockedModel::new(prev_blocks, 0).unwrap(),
        BlockedModel::new(cur_blocks, 1).unwrap(),
    )
}

fn retained_ids(prev: &BlockedModel, cur: &BlockedModel, lambda: f64) -> Vec<String> {
    let cfg = DropoutConfig::new(lambda).unwrap();
    select_blocks(prev, cur, &cfg)
        .unwrap()
        .iter()
        .map(|b| b.id().to_string())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn selection_matches_the_oracle(
        seed in any::<u64>(),
        sizes in proptest::collection::vec(1usize..=24, 1..=8),
        frozen in proptest::collection::vec(any::<bool>(), 8),
        lambda in prop_oneof![
            (0u32..=10).prop_map(|g| g as f64 / 10.0), // the grid, edges included
            0.0f64..1.0,
        ],
    ) {
        let (prev, cur) = model_pair(seed, &sizes, &frozen);
        prop_assert_eq!(
            retained_ids(&prev, &cur, lambda),
            oracle_retained_ids(&prev, &cur, lambda)
        );
    }

    #[test]
    fn budget_is_never_exceeded(
        seed in any::<u64>(),
        sizes in proptest::collection::vec(1usize..=24, 1..=8),
        frozen in proptest::collection::vec(any::<bool>(), 8),
        lambda in 0.0f64..=1.0,
    ) {
        let (prev, cur) = model_pair(seed, &sizes, &frozen);
        let cfg = DropoutConfig::new(lambda).unwrap();
        let retained = select_blocks(&prev, &cur, &cfg).unwrap();
        let kept: usize = retained.iter().map(|b| b.param_count()).sum();
        prop_assert!(
            kept as f64 <= (1.0 - lambda) * cur.total_params() as f64,
            "kept {} of {} at lambda {}", kept, cur.total_params(), lambda
        );
    }

    #[test]
    fn scaling_all_deltas_preserves_the_selection(
        seed in any::<u64>(),
        sizes in proptest::collection::vec(1usize..=24, 1..=8),
        lambda in 0.0f64..1.0,
        exponent in -2i32..=3,
    ) {
        // Zero baseline makes cur the delta itself, so scaling by a power
        // of two is exact in f32 and MBD scales exactly linearly.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (2.0f32).powi(exponent);
        let mut base_blocks = Vec::new();
        let mut cur_blocks = Vec::new();
        let mut scaled_blocks = Vec::new();
        for (i, &size) in sizes.iter().enumerate() {
            let delta: Vec<f32> = (0..size).map(|_| rng.random_range(-4.0..4.0)).collect();
            base_blocks.push(block_from_values(i, vec![0.0; size]));
            scaled_blocks.push(block_from_values(i, delta.iter().map(|d| d * scale).collect()));
            cur_blocks.push(block_from_values(i, delta));
        }
        let prev = BlockedModel::new(base_blocks, 0).unwrap();
        let cur = BlockedModel::new(cur_blocks, 1).unwrap();
        let scaled = BlockedModel::new(scaled_blocks, 1).unwrap();
        prop_assert_eq!(
            retained_ids(&prev, &cur, lambda),
            retained_ids(&prev, &scaled, lambda)
        );
    }
}

#[test]
fn grid_sweep_matches_oracle_on_a_thousand_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB10C);
    for case in 0..1000u64 {
        let n_blocks = rng.random_range(1..=8);
        let sizes: Vec<usize> = (0..n_blocks).map(|_| rng.random_range(1..=32)).collect();
        let frozen: Vec<bool> = (0..n_blocks).map(|_| rng.random_bool(0.3)).collect();
        let (prev, cur) = model_pair(case, &sizes, &frozen);
        for grid in 0..=10u32 {
            let lambda = grid as f64 / 10.0;
            assert_eq!(
                retained_ids(&prev, &cur, lambda),
                oracle_retained_ids(&prev, &cur, lambda),
                "case {case}, lambda {lambda}"
            );
        }
    }
}

#[test]
fn full_dropout_retains_nothing_and_zero_dropout_everything() {
    let (prev, cur) = model_pair(7, &[5, 9, 3], &[false, false, false]);
    assert!(retained_ids(&prev, &cur, 1.0).is_empty());
    assert_eq!(retained_ids(&prev, &cur, 0.0).len(), 3);
}
