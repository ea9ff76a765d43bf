//! Training objectives: the contrastive pretext loss used by benign clients
//! and the two-term hijack objective used by backdoored clients. Both return
//! the scalar loss together with parameter-shaped gradients obtained by
//! backpropagating through the encoder.

use crate::data::trigger::TriggerRef;
use crate::encoder::{EncoderState, ForwardTrace};
use crate::params::ParameterVector;
use crate::tensor::Tensor;
use crate::{math, CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

pub use crate::math::cosine_similarity;

/// Default softmax temperature for the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Loss value, parameter gradients, and the batch-norm updates accumulated by
/// the forward passes (commit after the optimizer step).
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParameterVector,
    pub traces: Vec<ForwardTrace>,
}

fn check_finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(CoreError::NonFinite("loss".into()))
    }
}

/// Row-wise L2 normalization of a [B, d] tensor; returns the normalized
/// tensor and per-row norms.
fn normalize_rows(t: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let b = t.shape()[0];
    let d = t.shape()[1];
    let mut out = t.clone();
    let mut norms = Vec::with_capacity(b);
    for r in 0..b {
        let norm = math::l2_norm(t.row(r));
        if norm == 0.0 {
            return Err(CoreError::ZeroNorm);
        }
        for v in &mut out.data_mut()[r * d..(r + 1) * d] {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backpropagate through row-wise normalization: given dL/dz where
/// z = x/|x|, produce dL/dx.
fn normalize_rows_backward(raw: &Tensor, normed: &Tensor, norms: &[f64], grad_z: &Tensor) -> Tensor {
    let b = raw.shape()[0];
    let d = raw.shape()[1];
    let mut grad_x = Tensor::zeros(raw.shape());
    for r in 0..b {
        let z = normed.row(r);
        let g = grad_z.row(r);
        let dot_gz = math::dot(g, z);
        let inv = 1.0 / norms[r];
        for i in 0..d {
            grad_x.data_mut()[r * d + i] = inv * (g[i] - dot_gz * z[i]);
        }
    }
    grad_x
}

/// Contrastive loss over two augmented views at the embedding level.
/// Embeddings are L2-normalized internally; every other sample in the
/// 2B-batch acts as a negative. Returns the loss and gradients with respect
/// to the raw (unnormalized) inputs.
pub fn ntxent_loss_embeddings(
    emb_a: &Tensor,
    emb_b: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor)> {
    if emb_a.shape() != emb_b.shape() || emb_a.rank() != 2 {
        return Err(CoreError::ShapeMismatch("ntxent views".into()));
    }
    let b = emb_a.shape()[0];
    let d = emb_a.shape()[1];
    if b < 2 {
        return Err(CoreError::InsufficientInputs(
            "ntxent needs a batch of at least 2".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(CoreError::InvalidConfig("temperature must be positive".into()));
    }
    let n = 2 * b;
    // Stack views into one [2B, d] matrix: row k is view A of sample k for
    // k < B and view B of sample k-B otherwise.
    let mut all = Tensor::zeros(&[n, d]);
    all.data_mut()[..b * d].copy_from_slice(emb_a.data());
    all.data_mut()[b * d..].copy_from_slice(emb_b.data());
    let (z, norms) = normalize_rows(&all)?;

    // Pairwise similarities divided by temperature.
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sim[i * n + j] = math::dot(z.row(i), z.row(j)) / temperature;
            }
        }
    }

    let partner = |i: usize| if i < b { i + b } else { i - b };
    let mut loss = 0.0;
    let mut grad_z = Tensor::zeros(&[n, d]);
    for i in 0..n {
        // Log-sum-exp over the 2B-1 candidates j != i.
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && sim[i * n + j] > max {
                max = sim[i * n + j];
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += math::exp(sim[i * n + j] - max);
            }
        }
        let log_denom = math::ln(denom) + max;
        let p = partner(i);
        loss += log_denom - sim[i * n + p];

        // d(loss_i)/d(sim[i][j]) = softmax_j - 1[j == partner].
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut coef = math::exp(sim[i * n + j] - log_denom);
            if j == p {
                coef -= 1.0;
            }
            let coef = coef / (temperature * n as f64);
            // sim depends on both rows; accumulate into each.
            for k in 0..d {
                grad_z.data_mut()[i * d + k] += coef * z.row(j)[k];
                grad_z.data_mut()[j * d + k] += coef * z.row(i)[k];
            }
        }
    }
    loss /= n as f64;
    let grad_all = normalize_rows_backward(&all, &z, &norms, &grad_z);
    let grad_a = Tensor::new(&[b, d], grad_all.data()[..b * d].to_vec())?;
    let grad_b = Tensor::new(&[b, d], grad_all.data()[b * d..].to_vec())?;
    Ok((check_finite_loss(loss)?, grad_a, grad_b))
}

/// Contrastive loss through the encoder: forwards both views in training
/// mode and returns parameter gradients (summed over the two branches).
pub fn ntxent_loss(
    state: &EncoderState,
    view_a: &Tensor,
    view_b: &Tensor,
    temperature: f64,
) -> Result<LossOutput> {
    let (emb_a, trace_a) = state.forward_train(view_a)?;
    let (emb_b, trace_b) = state.forward_train(view_b)?;
    let (loss, grad_a, grad_b) = ntxent_loss_embeddings(&emb_a, &emb_b, temperature)?;
    let mut grads = state.backward(&trace_a, &grad_a)?;
    let grads_b = state.backward(&trace_b, &grad_b)?;
    grads.add_scaled(&grads_b, 1.0)?;
    Ok(LossOutput {
        loss,
        grads,
        traces: vec![trace_a, trace_b],
    })
}

/// Similarity criterion inside the hijack objective. Cosine is the default;
/// the alternatives exist for adaptive attackers that swap the criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityCriterion {
    Cosine,
    Mse,
    CrossEntropy,
}

/// Loss contribution for one embedding pair under a criterion, with
/// gradients for both sides. Cosine contributes -cos(a, b) (maximize
/// agreement); MSE contributes the mean squared difference; cross-entropy
/// contributes CE(softmax(b) || softmax(a)) with `b` as the anchor side.
fn criterion_term(crit: SimilarityCriterion, a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d = a.len();
    match crit {
        SimilarityCriterion::Cosine => {
            let na = math::l2_norm(a);
            let nb = math::l2_norm(b);
            if na == 0.0 || nb == 0.0 {
                return (0.0, vec![0.0; d], vec![0.0; d]);
            }
            let dot = math::dot(a, b);
            let cos = dot / (na * nb);
            let mut ga = Vec::with_capacity(d);
            let mut gb = Vec::with_capacity(d);
            for i in 0..d {
                ga.push(-(b[i] / (na * nb) - cos * a[i] / (na * na)));
                gb.push(-(a[i] / (na * nb) - cos * b[i] / (nb * nb)));
            }
            (-cos, ga, gb)
        }
        SimilarityCriterion::Mse => {
            let mut val = 0.0;
            let mut ga = Vec::with_capacity(d);
            let mut gb = Vec::with_capacity(d);
            for i in 0..d {
                let diff = a[i] - b[i];
                val += diff * diff;
                ga.push(2.0 * diff / d as f64);
                gb.push(-2.0 * diff / d as f64);
            }
            (val / d as f64, ga, gb)
        }
        SimilarityCriterion::CrossEntropy => {
            let softmax = |x: &[f64]| {
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| math::exp(v - max)).collect();
                let sum: f64 = e.iter().sum();
                e.into_iter().map(|v| v / sum).collect::<Vec<f64>>()
            };
            let q = softmax(a);
            let p = softmax(b);
            let mut val = 0.0;
            for i in 0..d {
                val -= p[i] * math::ln(q[i].max(1e-300));
            }
            // d/da_j = q_j - p_j; d/db_j = p_j * (log q_j - sum_i p_i log q_i) * -1
            let mut ga = Vec::with_capacity(d);
            for i in 0..d {
                ga.push(q[i] - p[i]);
            }
            let mean_logq: f64 = (0..d).map(|i| p[i] * math::ln(q[i].max(1e-300))).sum();
            let mut gb = Vec::with_capacity(d);
            for i in 0..d {
                gb.push(-p[i] * (math::ln(q[i].max(1e-300)) - mean_logq));
            }
            (val, ga, gb)
        }
    }
}

/// Inputs of the hijack objective for one batch.
pub struct BackdoorBatch<'a> {
    /// Clean local images [B, H, W, C].
    pub clean: &'a Tensor,
    /// Trigger to embed into every image of `clean`.
    pub trigger: TriggerRef<'a>,
    /// The reference image of the target class [1, H, W, C].
    pub target_image: &'a Tensor,
    /// Anchor embedding of the reference image under the clean model.
    pub target_ref_emb: &'a [f64],
    /// Anchor embeddings of the clean batch under the clean model [B, d].
    pub clean_ref_embs: &'a Tensor,
}

/// Two-term hijack objective.
///
/// Term one pulls the embedding of every triggered image toward the model's
/// own embedding of the reference image, and pins the reference embedding to
/// its clean anchor. Term two keeps clean-input embeddings near their clean
/// anchors for stealth. Total = lambda1 * term1 + lambda2 * term2.
pub fn backdoor_loss(
    state: &EncoderState,
    batch: &BackdoorBatch<'_>,
    lambda1: f64,
    lambda2: f64,
    criterion: SimilarityCriterion,
) -> Result<LossOutput> {
    if lambda1 < 0.0 || lambda2 < 0.0 || (lambda1 == 0.0 && lambda2 == 0.0) {
        return Err(CoreError::InvalidConfig(
            "lambda weights must be non-negative and not both zero".into(),
        ));
    }
    let b = batch.clean.dim0();
    if b == 0 {
        return Err(CoreError::InsufficientInputs("empty batch".into()));
    }
    let d = state.spec().embedding_dim();
    let mut loss = 0.0;
    let mut grads = ParameterVector::zeros(state.spec().layout().clone());
    let mut traces = Vec::new();

    if lambda1 > 0.0 {
        let triggered = batch.trigger.apply_batch(batch.clean)?;
        let (emb_t, trace_t) = state.forward_train(&triggered)?;
        let (emb_ref, trace_ref) = state.forward_train(batch.target_image)?;
        let v = emb_ref.row(0).to_vec();

        let mut grad_t = Tensor::zeros(&[b, d]);
        let mut grad_v = vec![0.0; d];
        let mut term1 = 0.0;
        for r in 0..b {
            let (val, ga, gb) = criterion_term(criterion, emb_t.row(r), &v);
            term1 += val / b as f64;
            for i in 0..d {
                grad_t.data_mut()[r * d + i] += lambda1 * ga[i] / b as f64;
                grad_v[i] += lambda1 * gb[i] / b as f64;
            }
        }
        // Anchor term: keep the reference embedding close to its clean value.
        let (val, ga, _) = criterion_term(criterion, &v, batch.target_ref_emb);
        term1 += val;
        for i in 0..d {
            grad_v[i] += lambda1 * ga[i];
        }
        loss += lambda1 * term1;

        let grads_t = state.backward(&trace_t, &grad_t)?;
        grads.add_scaled(&grads_t, 1.0)?;
        let grad_v_t = Tensor::new(&[1, d], grad_v)?;
        let grads_ref = state.backward(&trace_ref, &grad_v_t)?;
        grads.add_scaled(&grads_ref, 1.0)?;
        traces.push(trace_t);
        traces.push(trace_ref);
    }

    if lambda2 > 0.0 {
        if batch.clean_ref_embs.shape() != [b, d] {
            return Err(CoreError::ShapeMismatch("clean anchor embeddings".into()));
        }
        let (emb_c, trace_c) = state.forward_train(batch.clean)?;
        let mut grad_c = Tensor::zeros(&[b, d]);
        let mut term2 = 0.0;
        for r in 0..b {
            let (val, ga, _) = criterion_term(criterion, emb_c.row(r), batch.clean_ref_embs.row(r));
            term2 += val / b as f64;
            for i in 0..d {
                grad_c.data_mut()[r * d + i] += lambda2 * ga[i] / b as f64;
            }
        }
        loss += lambda2 * term2;
        let grads_c = state.backward(&trace_c, &grad_c)?;
        grads.add_scaled(&grads_c, 1.0)?;
        traces.push(trace_c);
    }

    Ok(LossOutput {
        loss: check_finite_loss(loss)?,
        grads,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trigger::TriggerPattern;
    use crate::encoder::EncoderSpec;
    use crate::testutil::assert_grad_matches_fd;
    use alloc::sync::Arc;
    use rand::Rng;

    #[test]
    fn ntxent_orthonormal_case_matches_brute_force() {
        // B=2, views identical, all four embeddings orthonormal, temp 1.
        let emb = Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (loss, _, _) = ntxent_loss_embeddings(&emb, &emb, 1.0).unwrap();

        // Independent enumeration over all 2B x (2B-1) pairs.
        let rows: [[f64; 4]; 4] = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ];
        let cos = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let partner = [2usize, 3, 0, 1];
        let mut expect = 0.0;
        for i in 0..4 {
            let mut denom = 0.0;
            for j in 0..4 {
                if j != i {
                    denom += libm::exp(cos(&rows[i], &rows[j]));
                }
            }
            expect += -libm::log(libm::exp(cos(&rows[i], &rows[partner[i]])) / denom);
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn ntxent_invariant_to_positive_scaling() {
        let mut rng = crate::rng::stream_rng(3, &[50]);
        let data: alloc::vec::Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::new(&[3, 8], data.clone()).unwrap();
        let b = Tensor::new(&[3, 8], data.iter().rev().cloned().collect()).unwrap();
        let (l1, _, _) = ntxent_loss_embeddings(&a, &b, 0.5).unwrap();
        let mut a10 = a.clone();
        let mut b10 = b.clone();
        for v in a10.data_mut() {
            *v *= 10.0;
        }
        for v in b10.data_mut() {
            *v *= 10.0;
        }
        let (l2, _, _) = ntxent_loss_embeddings(&a10, &b10, 0.5).unwrap();
        assert!((l1 - l2).abs() < 1e-9, "{l1} vs {l2}");
    }

    #[test]
    fn ntxent_rejects_batch_of_one() {
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            ntxent_loss_embeddings(&a, &a, 1.0),
            Err(CoreError::InsufficientInputs(_))
        ));
    }

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::stream_rng(seed, &[60]);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ntxent_gradients_match_finite_differences() {
        let spec = Arc::new(EncoderSpec::desk_default(1, 8).unwrap());
        let view_a = random_batch(&[3, 16, 16, 1], 7);
        let view_b = random_batch(&[3, 16, 16, 1], 8);
        for seed in 0..3u64 {
            let state = EncoderState::init(spec.clone(), seed, &[61]);
            let out = ntxent_loss(&state, &view_a, &view_b, 0.5).unwrap();
            assert_grad_matches_fd(
                state.params(),
                &out.grads,
                |p| {
                    let s = EncoderState::new(spec.clone(), p.clone()).unwrap();
                    ntxent_loss(&s, &view_a, &view_b, 0.5).unwrap().loss
                },
                |_| true,
                3,
                1e-4,
                seed + 200,
            );
        }
    }

    fn toy_backdoor_parts(
        spec: &Arc<EncoderSpec>,
        clean_seed: u64,
    ) -> (Tensor, Tensor, EncoderState) {
        let clean_model = EncoderState::init(spec.clone(), clean_seed, &[62]);
        let batch = random_batch(&[3, 16, 16, 1], 17);
        let target = random_batch(&[1, 16, 16, 1], 18);
        (batch, target, clean_model)
    }

    #[test]
    fn backdoor_loss_identity_point_values() {
        // With the trained model equal to the clean anchor model and a
        // trigger that leaves inputs unchanged, cosine terms hit -1.
        let spec = Arc::new(EncoderSpec::desk_default(1, 8).unwrap());
        let (batch, target, clean_model) = toy_backdoor_parts(&spec, 40);
        let state = clean_model.clone();
        let trig = TriggerPattern::noop();
        let target_ref = clean_model.forward(&target).unwrap();
        let clean_refs = clean_model.forward(&batch).unwrap();
        // Training-mode forward must match the anchors for the -1 identity,
        // so anchor with training-mode embeddings here.
        let (target_ref_t, _) = clean_model.forward_train(&target).unwrap();
        let (clean_refs_t, _) = clean_model.forward_train(&batch).unwrap();
        let _ = (target_ref, clean_refs);
        let b = BackdoorBatch {
            clean: &batch,
            trigger: TriggerRef::Local(&trig),
            target_image: &target,
            target_ref_emb: target_ref_t.row(0),
            clean_ref_embs: &clean_refs_t,
        };
        // lambda1 = 0, lambda2 = 1: loss = -mean cos(f(x), anchor(x)) = -1.
        let out = backdoor_loss(&state, &b, 0.0, 1.0, SimilarityCriterion::Cosine).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-9, "{}", out.loss);

        // The anchor part of term one is cos of the reference with itself.
        let out1 = backdoor_loss(&state, &b, 1.0, 0.0, SimilarityCriterion::Cosine).unwrap();
        // term1 = -mean cos(f(x+e), f(target)) - 1; the first part is not -1
        // because triggered inputs differ from the target image.
        assert!(out1.loss > -2.0 - 1e-9 && out1.loss <= 0.0);
    }

    #[test]
    fn backdoor_loss_mse_identity_is_zero() {
        let spec = Arc::new(EncoderSpec::desk_default(1, 8).unwrap());
        let (batch, target, clean_model) = toy_backdoor_parts(&spec, 41);
        let (clean_refs_t, _) = clean_model.forward_train(&batch).unwrap();
        let (target_ref_t, _) = clean_model.forward_train(&target).unwrap();
        let trig = TriggerPattern::noop();
        let b = BackdoorBatch {
            clean: &batch,
            trigger: TriggerRef::Local(&trig),
            target_image: &target,
            target_ref_emb: target_ref_t.row(0),
            clean_ref_embs: &clean_refs_t,
        };
        let out = backdoor_loss(&clean_model, &b, 0.0, 1.0, SimilarityCriterion::Mse).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn backdoor_gradients_match_finite_differences() {
        let spec = Arc::new(EncoderSpec::desk_default(1, 8).unwrap());
        let (batch, target, clean_model) = toy_backdoor_parts(&spec, 42);
        let target_ref = clean_model.forward(&target).unwrap().row(0).to_vec();
        let clean_refs = clean_model.forward(&batch).unwrap();
        let trig = TriggerPattern::white_square(3, 13, 13, 1);
        for (seed, crit) in [
            (0u64, SimilarityCriterion::Cosine),
            (1, SimilarityCriterion::Cosine),
            (2, SimilarityCriterion::Mse),
            (3, SimilarityCriterion::CrossEntropy),
        ] {
            let state = EncoderState::init(spec.clone(), seed + 70, &[63]);
            let make = |p: &ParameterVector| {
                let s = EncoderState::new(spec.clone(), p.clone()).unwrap();
                let b = BackdoorBatch {
                    clean: &batch,
                    trigger: TriggerRef::Local(&trig),
                    target_image: &target,
                    target_ref_emb: &target_ref,
                    clean_ref_embs: &clean_refs,
                };
                backdoor_loss(&s, &b, 1.0, 1.0, crit).unwrap().loss
            };
            let b = BackdoorBatch {
                clean: &batch,
                trigger: TriggerRef::Local(&trig),
                target_image: &target,
                target_ref_emb: &target_ref,
                clean_ref_embs: &clean_refs,
            };
            let out = backdoor_loss(&state, &b, 1.0, 1.0, crit).unwrap();
            assert_grad_matches_fd(state.params(), &out.grads, make, |_| true, 3, 1e-4, seed + 300);
        }
    }

    #[test]
    fn backdoor_gradients_with_frozen_bn_match_fd_on_unfrozen_coords() {
        let spec = Arc::new(EncoderSpec::desk_default(1, 8).unwrap());
        let (batch, target, clean_model) = toy_backdoor_parts(&spec, 43);
        let target_ref = clean_model.forward(&target).unwrap().row(0).to_vec();
        let clean_refs = clean_model.forward(&batch).unwrap();
        let trig = TriggerPattern::white_square(3, 13, 13, 1);
        let mut state = EncoderState::init(spec.clone(), 77, &[64]);
        state.bn_frozen = true;
        let b = BackdoorBatch {
            clean: &batch,
            trigger: TriggerRef::Local(&trig),
            target_image: &target,
            target_ref_emb: &target_ref,
            clean_ref_embs: &clean_refs,
        };
        let out = backdoor_loss(&state, &b, 1.0, 1.0, SimilarityCriterion::Cosine).unwrap();
        // Batch-norm coordinates carry zero gradient when frozen.
        for seg in spec.layout().segments() {
            if seg.batch_norm {
                assert!(out.grads.segment(seg).iter().all(|g| *g == 0.0));
            }
        }
        let bn_coord: alloc::vec::Vec<(usize, usize)> = spec
            .layout()
            .segments()
            .iter()
            .filter(|s| s.batch_norm)
            .map(|s| (s.offset, s.offset + s.len))
            .collect();
        assert_grad_matches_fd(
            state.params(),
            &out.grads,
            |p| {
                let mut s = EncoderState::new(spec.clone(), p.clone()).unwrap();
                s.bn_frozen = true;
                let b = BackdoorBatch {
                    clean: &batch,
                    trigger: TriggerRef::Local(&trig),
                    target_image: &target,
                    target_ref_emb: &target_ref,
                    clean_ref_embs: &clean_refs,
                };
                backdoor_loss(&s, &b, 1.0, 1.0, SimilarityCriterion::Cosine)
                    .unwrap()
                    .loss
            },
            |i| !bn_coord.iter().any(|(lo, hi)| i >= *lo && i < *hi),
            3,
            1e-4,
            400,
        );
    }
}
