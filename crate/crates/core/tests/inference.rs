use std::collections::BTreeSet;

use pcl_core::data::{ClassCatalog, ClassInfo};
use pcl_core::inference::{
    decide, manipulate_logits, no_obj_score, other_head_sums, panoptic_merge, semantic_merge, InferenceConfig,
    QueryDecision,
};
use pcl_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-6.0..6.0)).collect()).unwrap()
}

/// Argmax of `[no_obj, p_0, .., p_{C-1}]` with no-object first in the
/// candidate order, so it wins every tie it takes part in.
fn decide_oracle(row: &[f64], no_obj: f64) -> Option<usize> {
    let mut order: Vec<(f64, usize)> = std::iter::once((no_obj, 0))
        .chain(row.iter().enumerate().map(|(c, &p)| (p, c + 1)))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    order[0].1.checked_sub(1)
}

fn blocks_for(seed: u64, heads: usize, queries: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..heads)
        .map(|_| {
            let classes = rng.random_range(1..6);
            block(&mut rng, queries, classes)
        })
        .collect()
}

proptest! {
    #[test]
    fn decisions_equal_argmax_oracle(seed in any::<u64>(), heads in 1usize..5, delta in 0.0f64..2.0) {
        let blocks = blocks_for(seed, heads, 8);
        let cfg = InferenceConfig { delta, ..Default::default() };
        for t in 1..=heads {
            let (no_obj, own) = manipulate_logits(&blocks, t, &cfg).unwrap();
            let got = decide(&own, &no_obj).unwrap();
            for (q, row) in own.iter().enumerate() {
                prop_assert_eq!(got[q], decide_oracle(row, no_obj[q]));
            }
        }
    }

    #[test]
    fn raising_delta_never_revives_a_query(seed in any::<u64>(), heads in 2usize..5, d1 in 0.0f64..1.5, extra in 0.0f64..1.5) {
        let blocks = blocks_for(seed, heads, 10);
        let lo = InferenceConfig { delta: d1, ..Default::default() };
        let hi = InferenceConfig { delta: d1 + extra, ..Default::default() };
        for t in 1..=heads {
            let (z_lo, own) = manipulate_logits(&blocks, t, &lo).unwrap();
            let (z_hi, own_hi) = manipulate_logits(&blocks, t, &hi).unwrap();
            prop_assert_eq!(&own, &own_hi);
            let (a, b) = (decide(&own, &z_lo).unwrap(), decide(&own, &z_hi).unwrap());
            for q in 0..a.len() {
                prop_assert!(z_hi[q] >= z_lo[q]);
                if a[q].is_none() {
                    prop_assert!(b[q].is_none());
                }
            }
        }
    }

    #[test]
    fn scaling_probabilities_against_delta_keeps_decisions(
        seed in any::<u64>(),
        heads in 2usize..5,
        delta in 0.05f64..1.0,
        scale in 0.25f64..4.0,
    ) {
        let blocks = blocks_for(seed, heads, 10);
        let cfg = InferenceConfig { delta, ..Default::default() };
        let scaled = InferenceConfig { delta: delta / scale, ..Default::default() };
        for t in 1..=heads {
            let (probs, logits) = other_head_sums(&blocks, t).unwrap();
            let (_, own) = manipulate_logits(&blocks, t, &cfg).unwrap();
            let z: Vec<f64> = probs.iter().zip(&logits).map(|(p, l)| no_obj_score(heads, *p, *l, &cfg)).collect();
            let zs: Vec<f64> = probs
                .iter()
                .zip(&logits)
                .map(|(p, l)| no_obj_score(heads, p * scale, *l, &scaled))
                .collect();
            let (a, b) = (decide(&own, &z).unwrap(), decide(&own, &zs).unwrap());
            for q in 0..a.len() {
                // exact unless the rescaled score lands within rounding of the winner
                let best = own[q].iter().cloned().fold(f64::MIN, f64::max);
                if (z[q] - best).abs() > 1e-9 {
                    prop_assert_eq!(a[q], b[q]);
                }
            }
        }
    }

    #[test]
    fn zero_delta_assigns_every_query(seed in any::<u64>(), heads in 2usize..5) {
        let blocks = blocks_for(seed, heads, 10);
        let cfg = InferenceConfig { delta: 0.0, ..Default::default() };
        for t in 1..=heads {
            let (z, own) = manipulate_logits(&blocks, t, &cfg).unwrap();
            prop_assert!(z.iter().all(|&v| v == 0.0));
            prop_assert!(decide(&own, &z).unwrap().iter().all(Option::is_some));
        }
    }
}

fn catalog() -> ClassCatalog {
    ClassCatalog::new(
        (1..=5)
            .map(|id| ClassInfo {
                id,
                name: format!("c{id}"),
                is_thing: id <= 3,
            })
            .collect(),
    )
    .unwrap()
}

fn random_decisions(rng: &mut ChaCha8Rng, n: usize, pixels: usize) -> Vec<QueryDecision> {
    (0..n)
        .map(|q| {
            let class_id = if rng.random::<f64>() < 0.2 { None } else { Some(rng.random_range(1..=5)) };
            QueryDecision {
                step: 1 + q % 2,
                query: q,
                class_id,
                score: (rng.random_range(1..1000) as f64) / 1000.0,
                mask_probs: (0..pixels).map(|_| rng.random::<f64>()).collect(),
            }
        })
        .collect()
}

#[test]
fn panoptic_merge_follows_the_confidence_order_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = InferenceConfig::default();
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let decisions = random_decisions(&mut rng, n, 36);
        let pred = panoptic_merge(&decisions, [6, 6], [6, 6], &catalog(), &cfg).unwrap();
        // pixel oracle: the first claiming query in descending score order
        let mut order: Vec<&QueryDecision> = decisions.iter().filter(|d| d.class_id.is_some()).collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let expected: Vec<u32> = (0..36)
            .map(|p| order.iter().find(|d| d.mask_probs[p] > 0.5).map_or(0, |d| d.class_id.unwrap()))
            .collect();
        assert_eq!(pred.class_map(), expected);
        let ids: BTreeSet<u32> = pred.segments.iter().map(|s| s.id).collect();
        let used: BTreeSet<u32> = pred.segment_map.iter().copied().filter(|&v| v != 0).collect();
        assert_eq!(ids, used);
        assert_eq!(ids, (1..=pred.segments.len() as u32).collect());
        let stuff: Vec<u32> = pred.segments.iter().filter(|s| !s.is_thing).map(|s| s.class_id).collect();
        assert_eq!(stuff.len(), stuff.iter().collect::<BTreeSet<_>>().len());
        // no-object queries contribute nothing
        let kept: Vec<QueryDecision> = decisions.iter().filter(|d| d.class_id.is_some()).cloned().collect();
        assert_eq!(panoptic_merge(&kept, [6, 6], [6, 6], &catalog(), &cfg).unwrap(), pred);
    }
}

#[test]
fn semantic_merge_equals_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = InferenceConfig::default();
    for _ in 0..200 {
        let mut decisions = random_decisions(&mut rng, 2, 16);
        for d in &mut decisions {
            d.class_id.get_or_insert(1);
        }
        let got = semantic_merge(&decisions, [4, 4], [4, 4], &cfg).unwrap();
        for p in 0..16 {
            let mut mass = [0.0f64; 6];
            for d in &decisions {
                mass[d.class_id.unwrap() as usize] += d.score * d.mask_probs[p];
            }
            let total: f64 = mass.iter().sum();
            let expected = if total < cfg.single_head_threshold {
                0
            } else {
                (1..6).fold(1, |b, c| if mass[c] > mass[b] { c } else { b }) as u32
            };
            assert_eq!(got[p], expected);
        }
    }
}
