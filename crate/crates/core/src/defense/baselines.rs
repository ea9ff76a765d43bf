//! Baseline robust aggregation rules: Krum, coordinate-wise trimmed mean,
//! FLTrust, FoolsGold, FLAME, RFLBAT, and FLARE. Each consumes the round's
//! uploads (and, where the scheme calls for it, the previous global model, a
//! server-trained reference update, or inspection embeddings) and returns the
//! aggregated parameters plus the clients it excluded.

use crate::cluster::{kmeans, pca_top_k};
use crate::math;
use crate::params::ParameterVector;
use crate::protocol::UpdateView;
use crate::rng::{sample_normal, stream, stream_rng};
use crate::{CoreError, Result};
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

/// Krum: select the single update with the smallest sum of squared
/// distances to its `n - c - 2` nearest neighbors. Ties break to the lowest
/// client id. Returns the chosen update and the rest as excluded.
pub fn krum(updates: &[UpdateView], c: usize) -> Result<(ParameterVector, Vec<u32>)> {
    let n = updates.len();
    if n < c + 3 {
        return Err(CoreError::InsufficientInputs(alloc::format!(
            "krum needs at least c+3 = {} updates, got {n}",
            c + 3
        )));
    }
    let neighbors = n - c - 2;
    let mut best: Option<(f64, u32, usize)> = None;
    for (i, u) in updates.iter().enumerate() {
        let mut dists: Vec<f64> = updates
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| math::sq_dist(u.params.values(), v.params.values()))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        let score: f64 = dists.iter().take(neighbors).sum();
        let candidate = (score, u.client_id, i);
        best = Some(match best {
            None => candidate,
            Some(cur) => {
                if score < cur.0 || (score == cur.0 && u.client_id < cur.1) {
                    candidate
                } else {
                    cur
                }
            }
        });
    }
    let (_, chosen_id, chosen_idx) = best.expect("nonempty updates");
    let mut excluded: Vec<u32> = updates
        .iter()
        .map(|u| u.client_id)
        .filter(|id| *id != chosen_id)
        .collect();
    excluded.sort_unstable();
    Ok((updates[chosen_idx].params.clone(), excluded))
}

/// Coordinate-wise trimmed mean: drop the k smallest and k largest values of
/// every coordinate, average the rest.
pub fn trimmed_mean(updates: &[UpdateView], k: usize) -> Result<ParameterVector> {
    let n = updates.len();
    if n <= 2 * k {
        return Err(CoreError::InsufficientInputs(alloc::format!(
            "trimmed mean with k={k} needs more than {} updates, got {n}",
            2 * k
        )));
    }
    let layout = updates[0].params.layout().clone();
    let dim = updates[0].params.len();
    let mut out = ParameterVector::zeros(layout);
    let mut column = vec![0.0; n];
    let keep = (n - 2 * k) as f64;
    for coord in 0..dim {
        for (slot, u) in column.iter_mut().zip(updates) {
            *slot = u.params.values()[coord];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        out.values_mut()[coord] = column[k..n - k].iter().sum::<f64>() / keep;
    }
    Ok(out)
}

pub struct FlTrustOutcome {
    pub aggregated: ParameterVector,
    /// Clients whose clipped trust score was zero.
    pub zero_trust: Vec<u32>,
    pub kept_previous_global: bool,
}

/// FLTrust: weight each update delta by its clipped cosine similarity to a
/// server-trained reference delta, rescale magnitudes to the reference norm,
/// and apply the trust-weighted mean to the global model.
pub fn fltrust(
    updates: &[UpdateView],
    global: &ParameterVector,
    server_update: &ParameterVector,
) -> Result<FlTrustOutcome> {
    if updates.is_empty() {
        return Err(CoreError::InsufficientInputs("no updates".into()));
    }
    let server_delta = server_update.delta_from(global)?;
    let server_norm = server_delta.l2_norm();
    let mut trusted = ParameterVector::zeros(global.layout().clone());
    let mut trust_sum = 0.0;
    let mut zero_trust = Vec::new();
    for u in updates {
        let delta = u.params.delta_from(global)?;
        let trust = math::cosine_or_zero(delta.values(), server_delta.values()).max(0.0);
        if trust == 0.0 {
            zero_trust.push(u.client_id);
            continue;
        }
        let norm = delta.l2_norm();
        let scale = if norm == 0.0 { 0.0 } else { server_norm / norm };
        trusted.add_scaled(&delta, trust * scale)?;
        trust_sum += trust;
    }
    zero_trust.sort_unstable();
    if trust_sum == 0.0 {
        return Ok(FlTrustOutcome {
            aggregated: global.clone(),
            zero_trust,
            kept_previous_global: true,
        });
    }
    trusted.scale(1.0 / trust_sum);
    let mut aggregated = global.clone();
    aggregated.add_scaled(&trusted, 1.0)?;
    Ok(FlTrustOutcome {
        aggregated,
        zero_trust,
        kept_previous_global: false,
    })
}

/// FoolsGold re-weighting from cumulative update histories: clients with
/// highly similar histories share blame through max-similarity inversion and
/// a logit squash. Returns per-client weights in [0, 1], aligned with
/// `ids`.
pub fn foolsgold_weights(histories: &[&ParameterVector], ids: &[u32]) -> Result<Vec<f64>> {
    let n = histories.len();
    if n < 2 {
        return Ok(vec![1.0; n]);
    }
    let mut cs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i * n + j] =
                    math::cosine_or_zero(histories[i].values(), histories[j].values());
            }
        }
    }
    let max_sim = |cs: &[f64], i: usize| -> f64 {
        (0..n)
            .filter(|j| *j != i)
            .map(|j| cs[i * n + j])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let v: Vec<f64> = (0..n).map(|i| max_sim(&cs, i)).collect();
    // Pardoning: scale down similarity seen from the more-suspicious side.
    for i in 0..n {
        for j in 0..n {
            if i != j && v[j] > v[i] && v[j] > 0.0 {
                cs[i * n + j] *= v[i] / v[j];
            }
        }
    }
    let mut alpha: Vec<f64> = (0..n).map(|i| 1.0 - max_sim(&cs, i)).collect();
    let max_alpha = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max_alpha <= 0.0 {
        // Every participant looks like a duplicate of another.
        return Ok(vec![0.0; n]);
    }
    for a in &mut alpha {
        *a = (*a / max_alpha).clamp(0.0, 1.0);
        // Logit squash, clipped to [0, 1].
        *a = if *a >= 1.0 {
            1.0
        } else if *a <= 0.0 {
            0.0
        } else {
            (math::ln(*a / (1.0 - *a)) + 0.5).clamp(0.0, 1.0)
        };
    }
    let _ = ids;
    Ok(alpha)
}

pub struct FoolsGoldOutcome {
    pub aggregated: ParameterVector,
    pub zero_weight: Vec<u32>,
    pub kept_previous_global: bool,
}

/// FoolsGold aggregation over this round's uploads given the per-client
/// cumulative delta histories (already including this round).
pub fn foolsgold(
    updates: &[UpdateView],
    histories: &BTreeMap<u32, ParameterVector>,
    global: &ParameterVector,
) -> Result<FoolsGoldOutcome> {
    if updates.is_empty() {
        return Err(CoreError::InsufficientInputs("no updates".into()));
    }
    let hist_refs: Vec<&ParameterVector> = updates
        .iter()
        .map(|u| {
            histories
                .get(&u.client_id)
                .ok_or_else(|| CoreError::InvalidConfig("missing history".into()))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<u32> = updates.iter().map(|u| u.client_id).collect();
    let weights = foolsgold_weights(&hist_refs, &ids)?;
    let total: f64 = weights.iter().sum();
    let mut zero_weight: Vec<u32> = ids
        .iter()
        .zip(&weights)
        .filter(|(_, w)| **w == 0.0)
        .map(|(id, _)| *id)
        .collect();
    zero_weight.sort_unstable();
    if total == 0.0 {
        return Ok(FoolsGoldOutcome {
            aggregated: global.clone(),
            zero_weight,
            kept_previous_global: true,
        });
    }
    let mut out = ParameterVector::zeros(global.layout().clone());
    for (u, w) in updates.iter().zip(&weights) {
        out.add_scaled(u.params, w / total)?;
    }
    Ok(FoolsGoldOutcome {
        aggregated: out,
        zero_weight,
        kept_previous_global: false,
    })
}

pub struct FlameOutcome {
    pub aggregated: ParameterVector,
    pub excluded: Vec<u32>,
}

/// FLAME-style aggregation: cosine-distance clustering keeps the dominant
/// group of update deltas, each kept delta is clipped to the median kept
/// norm, and seeded Gaussian noise scaled by the clipping bound is added.
pub fn flame(
    updates: &[UpdateView],
    global: &ParameterVector,
    lambda_noise: f64,
    seed: u64,
    round: u32,
) -> Result<FlameOutcome> {
    let n = updates.len();
    if n < 3 {
        return Err(CoreError::InsufficientInputs("flame needs at least 3 updates".into()));
    }
    let deltas: Vec<ParameterVector> = updates
        .iter()
        .map(|u| u.params.delta_from(global))
        .collect::<Result<_>>()?;
    // Pairwise cosine distances.
    let mut dists = vec![0.0; n * n];
    let mut all_pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - math::cosine_or_zero(deltas[i].values(), deltas[j].values());
            dists[i * n + j] = d;
            dists[j * n + i] = d;
            all_pairs.push(d);
        }
    }
    let threshold = math::median(&all_pairs);
    // Connected components under dist <= threshold; keep the largest, ties
    // to the component with the lowest client id.
    let mut component = vec![usize::MAX; n];
    let mut next = 0usize;
    for start in 0..n {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if component[j] == usize::MAX && dists[i * n + j] <= threshold {
                    component[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let mut best_comp = 0usize;
    let mut best_size = 0usize;
    let mut best_lowest = u32::MAX;
    for comp in 0..next {
        let members: Vec<usize> = (0..n).filter(|&i| component[i] == comp).collect();
        let lowest = members.iter().map(|&i| updates[i].client_id).min().unwrap();
        if members.len() > best_size || (members.len() == best_size && lowest < best_lowest) {
            best_comp = comp;
            best_size = members.len();
            best_lowest = lowest;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| component[i] == best_comp).collect();
    let mut excluded: Vec<u32> = (0..n)
        .filter(|&i| component[i] != best_comp)
        .map(|i| updates[i].client_id)
        .collect();
    excluded.sort_unstable();

    let norms: Vec<f64> = kept.iter().map(|&i| deltas[i].l2_norm()).collect();
    let clip = math::median(&norms);
    let mut mean_delta = ParameterVector::zeros(global.layout().clone());
    for &i in &kept {
        let norm = deltas[i].l2_norm();
        let scale = if norm > clip && norm > 0.0 { clip / norm } else { 1.0 };
        mean_delta.add_scaled(&deltas[i], scale / kept.len() as f64)?;
    }
    let mut aggregated = global.clone();
    aggregated.add_scaled(&mean_delta, 1.0)?;
    if lambda_noise > 0.0 {
        let mut rng = stream_rng(seed, &[stream::DEFENSE_NOISE, round as u64]);
        let sigma = lambda_noise * clip;
        for v in aggregated.values_mut() {
            *v += sigma * sample_normal(&mut rng);
        }
    }
    Ok(FlameOutcome { aggregated, excluded })
}

pub struct RflbatOutcome {
    pub aggregated: ParameterVector,
    pub excluded: Vec<u32>,
    /// Covariance was (near) rank-zero, so every update was kept.
    pub degenerate: bool,
}

/// RFLBAT-style aggregation: project update deltas onto the top two
/// principal components, split with seeded 2-means, keep the cluster with
/// the smaller mean distance to its centroid (larger size on ties), and
/// average the survivors.
pub fn rflbat(
    updates: &[UpdateView],
    global: &ParameterVector,
    seed: u64,
    round: u32,
) -> Result<RflbatOutcome> {
    let n = updates.len();
    if n < 4 {
        return Err(CoreError::InsufficientInputs("rflbat needs at least 4 updates".into()));
    }
    let deltas: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| Ok(u.params.delta_from(global)?.values().to_vec()))
        .collect::<Result<_>>()?;
    let pca = pca_top_k(&deltas, 2, 200)?;
    if pca.components.is_empty() {
        let aggregated = unweighted_mean(updates)?;
        return Ok(RflbatOutcome {
            aggregated,
            excluded: Vec::new(),
            degenerate: true,
        });
    }
    let points: Vec<Vec<f64>> = deltas.iter().map(|d| pca.project(d, 2)).collect();
    let labels = kmeans(
        &points,
        2,
        crate::rng::derive_seed(seed, &[stream::DEFENSE_NOISE, round as u64, 2]),
        100,
    )?;
    let mut chosen = 0usize;
    let mut chosen_score = f64::INFINITY;
    let mut chosen_size = 0usize;
    let mut chosen_lowest = u32::MAX;
    for cluster in 0..2usize {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cluster).collect();
        if members.is_empty() {
            continue;
        }
        let dim = points[0].len();
        let mut centroid = vec![0.0; dim];
        for &i in &members {
            for (c, v) in centroid.iter_mut().zip(&points[i]) {
                *c += v;
            }
        }
        for c in &mut centroid {
            *c /= members.len() as f64;
        }
        let avg_dist = members
            .iter()
            .map(|&i| math::sqrt(math::sq_dist(&points[i], &centroid)))
            .sum::<f64>()
            / members.len() as f64;
        let lowest = members.iter().map(|&i| updates[i].client_id).min().unwrap();
        let better = avg_dist < chosen_score
            || (avg_dist == chosen_score && members.len() > chosen_size)
            || (avg_dist == chosen_score && members.len() == chosen_size && lowest < chosen_lowest);
        if better {
            chosen = cluster;
            chosen_score = avg_dist;
            chosen_size = members.len();
            chosen_lowest = lowest;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] == chosen).collect();
    let mut excluded: Vec<u32> = (0..n)
        .filter(|&i| labels[i] != chosen)
        .map(|i| updates[i].client_id)
        .collect();
    excluded.sort_unstable();
    let kept_views: Vec<UpdateView> = kept.iter().map(|&i| updates[i].clone()).collect();
    let aggregated = unweighted_mean(&kept_views)?;
    Ok(RflbatOutcome {
        aggregated,
        excluded,
        degenerate: false,
    })
}

fn unweighted_mean(updates: &[UpdateView]) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(CoreError::InsufficientInputs("mean of zero updates".into()));
    }
    let mut out = ParameterVector::zeros(updates[0].params.layout().clone());
    for u in updates {
        out.add_scaled(u.params, 1.0 / updates.len() as f64)?;
    }
    Ok(out)
}

/// Squared maximum mean discrepancy between two embedding sets under a
/// Gaussian kernel with median-distance bandwidth (biased estimator, so the
/// value is non-negative and zero for identical sets).
pub fn mmd_sq(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::with_capacity(xs.len() * ys.len());
    let all: Vec<&Vec<f64>> = xs.iter().chain(ys.iter()).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            dists.push(math::sqrt(math::sq_dist(all[i], all[j])));
        }
    }
    let bandwidth = {
        let m = math::median(&dists);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let kernel = |a: &[f64], b: &[f64]| {
        math::exp(-math::sq_dist(a, b) / (2.0 * bandwidth * bandwidth))
    };
    let mean_kernel = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut acc = 0.0;
        for x in a {
            for y in b {
                acc += kernel(x, y);
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    let v = mean_kernel(xs, xs) + mean_kernel(ys, ys) - 2.0 * mean_kernel(xs, ys);
    v.max(0.0)
}

/// FLARE trust weighting from per-model embedding sets over the inspection
/// inputs: each model votes for its `floor(n/2)+1` nearest peers by MMD,
/// and updates are combined with softmax weights over vote counts.
/// `per_model_embs[m][u]` is model `m`'s embedding of inspection item `u`.
pub fn flare_weights(per_model_embs: &[Vec<Vec<f64>>]) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = per_model_embs.len();
    if n < 2 {
        return Err(CoreError::InsufficientInputs("flare needs at least 2 models".into()));
    }
    let mut mmd = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = mmd_sq(&per_model_embs[i], &per_model_embs[j]);
            mmd[i * n + j] = v;
            mmd[j * n + i] = v;
        }
    }
    let k = n / 2 + 1;
    let mut votes = vec![0usize; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            mmd[i * n + a]
                .partial_cmp(&mmd[i * n + b])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k.min(order.len())) {
            votes[j] += 1;
        }
    }
    let max_vote = *votes.iter().max().unwrap() as f64;
    let exps: Vec<f64> = votes.iter().map(|&v| math::exp(v as f64 - max_vote)).collect();
    let total: f64 = exps.iter().sum();
    Ok((exps.into_iter().map(|e| e / total).collect(), votes))
}

/// FLARE aggregation: softmax-trust-weighted mean of the uploads.
pub fn flare(
    updates: &[UpdateView],
    per_model_embs: &[Vec<Vec<f64>>],
) -> Result<ParameterVector> {
    if updates.len() != per_model_embs.len() {
        return Err(CoreError::ShapeMismatch("flare embeddings vs updates".into()));
    }
    let (weights, _) = flare_weights(per_model_embs)?;
    let mut out = ParameterVector::zeros(updates[0].params.layout().clone());
    for (u, w) in updates.iter().zip(&weights) {
        out.add_scaled(u.params, *w)?;
    }
    Ok(out)
}
