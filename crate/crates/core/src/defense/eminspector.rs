//! Embedding-inspection defense. For every inspection input, each uploaded
//! model's embedding is scored by its accumulated cosine similarity to the
//! other models' embeddings; models above the decision boundary collect +1,
//! the rest -1. Models with a positive final score are dropped before
//! aggregation.

use crate::{math, CoreError, Result};
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

/// Per-client integer scores plus the per-item log of who was voted up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaliciousScoreTable {
    pub scores: BTreeMap<u32, i32>,
    /// One entry per inspection item: (item index, clients that received +1).
    pub item_flags: Vec<(usize, Vec<u32>)>,
}

impl MaliciousScoreTable {
    /// Clients whose final score is strictly positive.
    pub fn flagged(&self) -> Vec<u32> {
        self.scores
            .iter()
            .filter(|(_, s)| **s > 0)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Accumulated similarity of embedding `i` to every other embedding for one
/// inspection input. Zero-norm embeddings contribute similarity 0.
pub fn accumulated_similarity(embs: &[Vec<f64>], i: usize) -> f64 {
    let mut acc = 0.0;
    for (j, e) in embs.iter().enumerate() {
        if j != i {
            acc += math::cosine_or_zero(&embs[i], e);
        }
    }
    acc
}

/// Decision boundary: the larger of mean and median of the accumulated
/// similarities.
pub fn decision_boundary(ds: &[f64]) -> f64 {
    let mean = math::mean(ds);
    let median = math::median(ds);
    mean.max(median)
}

/// How the per-item vote set is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItemRule {
    /// d_i >= max(mean, median).
    Boundary,
    /// d_i >= mean. Ablation variant; more false positives with no attackers.
    MeanOnly,
    /// Top fraction of models by d_i (knowledge-adjusted threshold).
    TopFraction(f64),
}

/// Run the scoring loop over per-item embedding sets.
///
/// `per_item_embs[u][m]` is the embedding of inspection item `u` under the
/// `m`-th uploaded model, aligned with `client_ids`.
pub fn eminspector_scores(
    per_item_embs: &[Vec<Vec<f64>>],
    client_ids: &[u32],
    rule: ItemRule,
) -> Result<MaliciousScoreTable> {
    if per_item_embs.is_empty() {
        return Err(CoreError::InsufficientInputs("empty inspection set".into()));
    }
    let n = client_ids.len();
    if n < 2 {
        return Err(CoreError::InsufficientInputs(
            "embedding inspection needs at least 2 uploads".into(),
        ));
    }
    let mut scores: BTreeMap<u32, i32> = client_ids.iter().map(|id| (*id, 0)).collect();
    let mut item_flags = Vec::with_capacity(per_item_embs.len());
    for (u, embs) in per_item_embs.iter().enumerate() {
        if embs.len() != n {
            return Err(CoreError::ShapeMismatch(
                "per-item embedding count != upload count".into(),
            ));
        }
        let ds: Vec<f64> = (0..n).map(|i| accumulated_similarity(embs, i)).collect();
        let plus: Vec<usize> = match rule {
            ItemRule::Boundary => {
                let boundary = decision_boundary(&ds);
                (0..n).filter(|&i| ds[i] >= boundary).collect()
            }
            ItemRule::MeanOnly => {
                let boundary = math::mean(&ds);
                (0..n).filter(|&i| ds[i] >= boundary).collect()
            }
            ItemRule::TopFraction(frac) => {
                if !(0.0..1.0).contains(&frac) || frac <= 0.0 {
                    return Err(CoreError::InvalidConfig(
                        "top fraction must be in (0, 1)".into(),
                    ));
                }
                let m = (math::round(frac * n as f64) as usize).clamp(1, n - 1);
                // Order by similarity descending, client id ascending on ties.
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    ds[b]
                        .partial_cmp(&ds[a])
                        .unwrap_or(core::cmp::Ordering::Equal)
                        .then(client_ids[a].cmp(&client_ids[b]))
                });
                order.into_iter().take(m).collect()
            }
        };
        for (i, id) in client_ids.iter().enumerate() {
            let entry = scores.get_mut(id).expect("score entry");
            if plus.contains(&i) {
                *entry += 1;
            } else {
                *entry -= 1;
            }
        }
        let mut voted: Vec<u32> = plus.iter().map(|&i| client_ids[i]).collect();
        voted.sort_unstable();
        item_flags.push((u, voted));
    }
    Ok(MaliciousScoreTable { scores, item_flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn accumulated_similarity_identical_embeddings() {
        let embs = vec![vec![1.0, 0.0]; 3];
        for i in 0..3 {
            assert!((accumulated_similarity(&embs, i) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulated_similarity_analytic_case() {
        let embs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert!((accumulated_similarity(&embs, 0) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn accumulated_similarity_matches_double_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, &[1]);
        let embs: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        for i in 0..embs.len() {
            let mut oracle = 0.0;
            for j in 0..embs.len() {
                if j == i {
                    continue;
                }
                let dot: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| a * b).sum();
                let ni: f64 = libm::sqrt(embs[i].iter().map(|v| v * v).sum());
                let nj: f64 = libm::sqrt(embs[j].iter().map(|v| v * v).sum());
                oracle += dot / (ni * nj);
            }
            let got = accumulated_similarity(&embs, i);
            assert!((got - oracle).abs() <= 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn decision_boundary_cases() {
        assert_eq!(decision_boundary(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(decision_boundary(&[0.0, 0.0, 0.0, 10.0]), 2.5);
        assert_eq!(decision_boundary(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn degenerate_identical_uploads_all_voted_up() {
        // Two identical models: d0 = d1 = boundary, both +1, both flagged.
        let items = vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]]; 3];
        let table = eminspector_scores(&items, &[0, 1], ItemRule::Boundary).unwrap();
        assert_eq!(table.scores[&0], 3);
        assert_eq!(table.scores[&1], 3);
        assert_eq!(table.flagged(), vec![0, 1]);
    }

    #[test]
    fn scores_have_item_parity_and_bound() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(9, &[2]);
        let items: Vec<Vec<Vec<f64>>> = (0..7)
            .map(|_| {
                (0..5)
                    .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let ids = [2u32, 3, 5, 7, 11];
        let table = eminspector_scores(&items, &ids, ItemRule::Boundary).unwrap();
        for s in table.scores.values() {
            assert!(s.unsigned_abs() as usize <= items.len());
            assert_eq!((s + items.len() as i32) % 2, 0, "parity violated: {s}");
        }
        assert_eq!(table.item_flags.len(), items.len());
    }

    #[test]
    fn top_fraction_rule_picks_requested_count() {
        // est 10% + fluctuation 20% of 10 uploads -> top 3 by d_i.
        let mut embs: Vec<Vec<f64>> = Vec::new();
        // Three near-identical, seven spread out.
        for _ in 0..3 {
            embs.push(vec![1.0, 0.01, 0.0]);
        }
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(4, &[3]);
        for _ in 0..7 {
            embs.push((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let ids: Vec<u32> = (0..10).collect();
        let table =
            eminspector_scores(&[embs], &ids, ItemRule::TopFraction(0.3)).unwrap();
        let (_, voted) = &table.item_flags[0];
        assert_eq!(voted.len(), 3);
        assert_eq!(voted, &vec![0, 1, 2]);
    }
}
