// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod mock_http;

use attnedit::embedding::DeltaSet;
use attnedit::tensor_store::{Dtype, NamedTensorMap, TensorEntry};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Cross-attention prefixes of the SD-1.5 UNet (16 transformer blocks).
pub fn sd15_cross_attention_prefixes() -> Vec<String> {
    let mut out = Vec::new();
    for block in 0..3 {
        for att in 0..2 {
            out.push(format!(
                "down_blocks.{block}.attentions.{att}.transformer_blocks.0.attn2"
            ));
        }
    }
    out.push("mid_block.attentions.0.transformer_blocks.0.attn2".into());
    for block in 1..4 {
        for att in 0..3 {
            out.push(format!("up_blocks.{block}.attentions.{att}.transformer_blocks.0.attn2"));
        }
    }
    out
}

fn entry(rng: &mut impl Rng, dtype: Dtype, shape: Vec<usize>) -> TensorEntry {
    let n = shape.iter().product::<usize>();
    let values: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.5).collect();
    TensorEntry::from_f32(dtype, shape, &values).unwrap()
}

/// Checkpoint with `prefixes.len()` cross-attention layers (`m × d` key and
/// value projections) interleaved with unrelated tensors.
pub fn checkpoint_with(prefixes: &[String], m: usize, d: usize, dtype: Dtype, seed: u64) -> NamedTensorMap {
    let mut rng = rng(seed);
    let mut map = NamedTensorMap::new();
    for prefix in prefixes {
        let block = prefix.trim_end_matches(".attn2");
        map.insert(format!("{block}.attn1.to_q.weight"), entry(&mut rng, dtype, vec![m, m]))
            .unwrap();
        map.insert(format!("{prefix}.to_q.weight"), entry(&mut rng, dtype, vec![m, m]))
            .unwrap();
        map.insert(format!("{prefix}.to_k.weight"), entry(&mut rng, dtype, vec![m, d]))
            .unwrap();
        map.insert(format!("{prefix}.to_v.weight"), entry(&mut rng, dtype, vec![m, d]))
            .unwrap();
        map.insert(format!("{block}.norm1.bias"), entry(&mut rng, dtype, vec![m]))
            .unwrap();
    }
    map
}

/// Toy checkpoint: 2 cross-attention layers, `m = 6`, `d = 8`.
pub fn toy_checkpoint(dtype: Dtype, seed: u64) -> NamedTensorMap {
    let prefixes: Vec<String> = (0..2)
        .map(|i| format!("blocks.{i}.transformer_blocks.0.attn2"))
        .collect();
    checkpoint_with(&prefixes, 6, 8, dtype, seed)
}

/// Random `d × l` deltas scaled to Frobenius norm `norm`.
pub fn random_deltas(d: usize, l: usize, norm: f64, seed: u64) -> DeltaSet {
    let mut rng = rng(seed);
    let raw = gaussian(&mut rng, d, l);
    let scaled = &raw * (norm / raw.norm());
    let labels = (0..l).map(|i| format!("guidance {i}")).collect();
    DeltaSet::from_matrix(scaled.map(|v| v as f32), labels, "a photo of a nurse").unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
