//! Dataset synthesis and handling: class-separable synthetic images,
//! federated partitioning (i.i.d and label-skewed), poisoned-set
//! construction for the data-poisoning attack, and inspection-set assembly
//! for the embedding-inspection defenses.

pub mod augment;
pub mod trigger;

use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;
use crate::{CoreError, Result};
use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;

use trigger::{TriggerPattern, TriggerRef};

/// Images [N, H, W, C] with values in [0, 1] plus optional labels. Labels
/// are consumed only by the partitioner and the evaluation harness; the
/// pretext training never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(CoreError::ShapeMismatch("dataset images must be [N,H,W,C]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.dim0() {
                return Err(CoreError::DataError("label count != image count".into()));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::DataError("pixel values outside [0,1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.dim0()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    /// Single image as an [H, W, C] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.image_shape();
        Tensor::new(&s, self.images.entry(i).to_vec()).expect("image slice")
    }

    /// Images by index as a [B, H, W, C] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.gather(indices)
    }

    /// Subset view materialized as an owned dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather(indices)?;
        let labels = match &self.labels {
            Some(l) => Some(
                indices
                    .iter()
                    .map(|&i| {
                        l.get(i)
                            .copied()
                            .ok_or_else(|| CoreError::DataError("subset index out of range".into()))
                    })
                    .collect::<Result<Vec<u32>>>()?,
            ),
            None => None,
        };
        Ok(Dataset { images, labels })
    }

    /// Indices of images with the given label.
    pub fn class_indices(&self, class: u32) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| CoreError::DataError("dataset has no labels".into()))?;
        Ok(labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect())
    }
}

/// Knobs for the synthetic class-separable image generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub classes: u32,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Amplitude of per-sample uniform pixel noise around the class pattern.
    pub noise_amp: f64,
    /// Coarse grid resolution of the class base patterns.
    pub grid: usize,
    /// Seed of the class base patterns. The patterns define the data
    /// distribution, so resampling (a fresh call seed) keeps them fixed.
    pub pattern_seed: u64,
}

impl SynthesisConfig {
    pub fn desk_default(classes: u32, per_class: usize) -> Self {
        Self {
            classes,
            per_class,
            height: 16,
            width: 16,
            channels: 1,
            noise_amp: 0.18,
            grid: 4,
            pattern_seed: 0xba5e,
        }
    }
}

/// Bilinear upsampling of a coarse grid to (h, w); the knob that keeps class
/// patterns smooth enough to survive crops and flips.
fn upsample_grid(grid: &[f64], g: usize, h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64 * (g - 1) as f64;
            let fx = x as f64 / w as f64 * (g - 1) as f64;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            let v = grid[y0 * g + x0] * (1.0 - dy) * (1.0 - dx)
                + grid[y0 * g + x1] * (1.0 - dy) * dx
                + grid[y1 * g + x0] * dy * (1.0 - dx)
                + grid[y1 * g + x1] * dy * dx;
            out[y * w + x] = v;
        }
    }
}

/// Generate a labeled, class-separable synthetic dataset: each class owns a
/// smooth low-frequency base pattern; samples add seeded pixel noise.
pub fn synthesize_dataset(cfg: &SynthesisConfig, seed: u64) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(CoreError::InvalidConfig("need at least 2 classes".into()));
    }
    if cfg.per_class == 0 {
        return Err(CoreError::InvalidConfig("per_class must be at least 1".into()));
    }
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let g = cfg.grid.max(2);
    let n = cfg.classes as usize * cfg.per_class;
    let mut images = Tensor::zeros(&[n, h, w, c]);
    let mut labels = Vec::with_capacity(n);
    let mut plane = vec![0.0; h * w];
    let mut idx = 0usize;
    for class in 0..cfg.classes {
        // Per-class pattern stream, independent of sample noise.
        let mut pat_rng = stream_rng(cfg.pattern_seed, &[stream::DATA_SYNTH, class as u64]);
        let mut base = vec![0.0; h * w * c];
        for ch in 0..c {
            let grid: Vec<f64> = (0..g * g).map(|_| pat_rng.gen_range(0.1..0.9)).collect();
            upsample_grid(&grid, g, h, w, &mut plane);
            for y in 0..h {
                for x in 0..w {
                    base[(y * w + x) * c + ch] = plane[y * w + x];
                }
            }
        }
        let mut noise_rng = stream_rng(seed, &[stream::DATA_SYNTH, 0x1000 + class as u64]);
        for _ in 0..cfg.per_class {
            let offset = idx * h * w * c;
            for (k, b) in base.iter().enumerate() {
                let noise = if cfg.noise_amp > 0.0 {
                    noise_rng.gen_range(-cfg.noise_amp..cfg.noise_amp)
                } else {
                    0.0
                };
                images.data_mut()[offset + k] = (b + noise).clamp(0.0, 1.0);
            }
            labels.push(class);
            idx += 1;
        }
    }
    Dataset::new(images, Some(labels))
}

/// How client index lists are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Uniform sampling per client. With `overlap`, different clients may
    /// hold the same pool indices; without it the draws are globally
    /// disjoint.
    Iid { overlap: bool },
    /// Each client is assigned a small class set and samples only from it.
    NonIid { classes_per_client: usize },
}

/// Client id -> indices into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

pub fn partition(
    ds: &Dataset,
    clients: usize,
    per_client: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 || per_client == 0 {
        return Err(CoreError::InvalidConfig("clients and per_client must be positive".into()));
    }
    let mut rng = stream_rng(seed, &[stream::PARTITION]);
    let n = ds.len();
    let mut assignments = Vec::with_capacity(clients);
    match mode {
        PartitionMode::Iid { overlap } => {
            if per_client > n {
                return Err(CoreError::DataError(alloc::format!(
                    "per_client {per_client} exceeds pool {n}"
                )));
            }
            if overlap {
                let mut all: Vec<usize> = (0..n).collect();
                for _ in 0..clients {
                    all.shuffle(&mut rng);
                    assignments.push(all[..per_client].to_vec());
                }
            } else {
                if clients * per_client > n {
                    return Err(CoreError::DataError(alloc::format!(
                        "disjoint partition needs {} samples, pool has {n}",
                        clients * per_client
                    )));
                }
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                for k in 0..clients {
                    assignments.push(all[k * per_client..(k + 1) * per_client].to_vec());
                }
            }
        }
        PartitionMode::NonIid { classes_per_client } => {
            let labels = ds
                .labels
                .as_ref()
                .ok_or_else(|| CoreError::DataError("non-iid partition needs labels".into()))?;
            let class_set: BTreeSet<u32> = labels.iter().copied().collect();
            let all_classes: Vec<u32> = class_set.into_iter().collect();
            if classes_per_client == 0 || classes_per_client > all_classes.len() {
                return Err(CoreError::InvalidConfig(alloc::format!(
                    "classes_per_client {classes_per_client} out of range 1..={}",
                    all_classes.len()
                )));
            }
            for _ in 0..clients {
                let mut classes = all_classes.clone();
                classes.shuffle(&mut rng);
                let mine = &classes[..classes_per_client];
                // Spread the quota evenly over the assigned classes so every
                // assigned class is represented.
                let mut take = vec![per_client / classes_per_client; classes_per_client];
                for t in take.iter_mut().take(per_client % classes_per_client) {
                    *t += 1;
                }
                let mut indices = Vec::with_capacity(per_client);
                for (ci, &class) in mine.iter().enumerate() {
                    let mut pool = ds.class_indices(class)?;
                    if pool.len() < take[ci] {
                        return Err(CoreError::DataError(alloc::format!(
                            "class {class} has {} samples, client needs {}",
                            pool.len(),
                            take[ci]
                        )));
                    }
                    pool.shuffle(&mut rng);
                    indices.extend_from_slice(&pool[..take[ci]]);
                }
                assignments.push(indices);
            }
        }
    }
    Ok(Partition { assignments })
}

/// Embed the trigger into a fraction of the target class's images; labels
/// and every other image stay untouched.
pub fn poison_dataset(
    ds: &Dataset,
    target_class: u32,
    trig: &TriggerPattern,
    fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(CoreError::InvalidConfig("poison fraction must be in (0,1]".into()));
    }
    let mut targets = ds.class_indices(target_class)?;
    if targets.is_empty() {
        return Err(CoreError::DataError(alloc::format!(
            "target class {target_class} absent"
        )));
    }
    let count = ((targets.len() as f64 * fraction) + 0.5) as usize;
    let count = count.clamp(1, targets.len());
    let mut rng = stream_rng(seed, &[stream::POISON]);
    targets.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = targets.into_iter().take(count).collect();
    let mut images = ds.images.clone();
    let tref = TriggerRef::Local(trig);
    for &i in &chosen {
        let poisoned = tref.apply_image(&ds.image(i))?;
        let s = images.stride0();
        images.data_mut()[i * s..(i + 1) * s].copy_from_slice(poisoned.data());
    }
    Dataset::new(images, ds.labels.clone())
}

/// Where inspection inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InspectionSource {
    InDistribution,
    OutOfDistribution,
    RandomVectors,
}

/// Unlabeled inputs used to probe uploaded models.
#[derive(Debug, Clone)]
pub struct InspectionSet {
    pub items: Vec<Tensor>,
    pub source: InspectionSource,
}

impl InspectionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Assemble an inspection set of `count` inputs shaped like `pool` images.
/// In-distribution samples come from the pool (labels never attached);
/// out-of-distribution inputs come from a disjoint high-frequency synthetic
/// family; random vectors are uniform pixels.
pub fn build_inspection_set(
    source: InspectionSource,
    count: usize,
    pool: &Dataset,
    seed: u64,
) -> Result<InspectionSet> {
    if count == 0 {
        return Err(CoreError::InvalidConfig("inspection count must be positive".into()));
    }
    let [h, w, c] = pool.image_shape();
    let mut rng = stream_rng(seed, &[stream::INSPECTION]);
    let mut items = Vec::with_capacity(count);
    match source {
        InspectionSource::InDistribution => {
            if pool.is_empty() {
                return Err(CoreError::DataError("empty pool".into()));
            }
            for _ in 0..count {
                let i = rng.gen_range(0..pool.len());
                items.push(pool.image(i));
            }
        }
        InspectionSource::OutOfDistribution => {
            // Disjoint family: high-frequency seeded stripe patterns, unlike
            // the smooth low-frequency training classes.
            for k in 0..count {
                let mut ood_rng = stream_rng(seed, &[stream::OOD, k as u64]);
                let period = ood_rng.gen_range(2..5usize);
                let phase = ood_rng.gen_range(0..period);
                let vertical = ood_rng.gen_range(0.0..1.0) < 0.5;
                let hi = ood_rng.gen_range(0.7..1.0);
                let lo = ood_rng.gen_range(0.0..0.3);
                let mut img = Tensor::zeros(&[h, w, c]);
                for y in 0..h {
                    for x in 0..w {
                        let stripe = if vertical { x } else { y };
                        let v = if (stripe + phase) % period == 0 { hi } else { lo };
                        for ch in 0..c {
                            img.data_mut()[(y * w + x) * c + ch] = v;
                        }
                    }
                }
                items.push(img);
            }
        }
        InspectionSource::RandomVectors => {
            for _ in 0..count {
                let mut img = Tensor::zeros(&[h, w, c]);
                for v in img.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                items.push(img);
            }
        }
    }
    Ok(InspectionSet { items, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthesisConfig {
        SynthesisConfig {
            classes: 2,
            per_class: 3,
            height: 8,
            width: 8,
            channels: 1,
            noise_amp: 0.1,
            grid: 3,
            pattern_seed: 0xba5e,
        }
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let a = synthesize_dataset(&small_cfg(), 0).unwrap();
        let b = synthesize_dataset(&small_cfg(), 0).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&small_cfg(), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_collapses_classes_to_patterns() {
        let mut cfg = small_cfg();
        cfg.noise_amp = 0.0;
        let ds = synthesize_dataset(&cfg, 5).unwrap();
        // Same-class images identical; cross-class differ.
        assert_eq!(ds.image(0), ds.image(1));
        assert_eq!(ds.image(3), ds.image(4));
        assert_ne!(ds.image(0), ds.image(3));
    }

    #[test]
    fn synthesis_validates_arguments() {
        let mut cfg = small_cfg();
        cfg.classes = 1;
        assert!(synthesize_dataset(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.per_class = 0;
        assert!(synthesize_dataset(&cfg, 0).is_err());
    }

    /// Raw-pixel nearest-neighbor oracle: labels of a held-out resample are
    /// recoverable from the training images at high accuracy.
    #[test]
    fn one_nn_oracle_separates_classes() {
        let cfg = SynthesisConfig::desk_default(4, 100);
        let train = synthesize_dataset(&cfg, 7).unwrap();
        let held = synthesize_dataset(&cfg, 8).unwrap();
        let mut hits = 0usize;
        for i in 0..held.len() {
            let q = held.images.entry(i);
            let mut best = f64::INFINITY;
            let mut best_label = 0;
            for j in 0..train.len() {
                let d = crate::math::sq_dist(q, train.images.entry(j));
                if d < best {
                    best = d;
                    best_label = train.labels.as_ref().unwrap()[j];
                }
            }
            if best_label == held.labels.as_ref().unwrap()[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / held.len() as f64;
        assert!(acc >= 0.9, "1-NN accuracy {acc}");
    }

    #[test]
    fn iid_partition_single_client_covers_pool() {
        let ds = synthesize_dataset(&small_cfg(), 2).unwrap();
        let p = partition(&ds, 1, ds.len(), PartitionMode::Iid { overlap: true }, 3).unwrap();
        let mut got = p.assignments[0].clone();
        got.sort_unstable();
        assert_eq!(got, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn partition_deterministic_and_sized() {
        let ds = synthesize_dataset(&small_cfg(), 2).unwrap();
        let a = partition(&ds, 3, 4, PartitionMode::Iid { overlap: true }, 9).unwrap();
        let b = partition(&ds, 3, 4, PartitionMode::Iid { overlap: true }, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.assignments.iter().all(|x| x.len() == 4));
    }

    #[test]
    fn disjoint_iid_partition_has_no_overlap() {
        let ds = synthesize_dataset(&small_cfg(), 2).unwrap();
        let p = partition(&ds, 3, 2, PartitionMode::Iid { overlap: false }, 9).unwrap();
        let mut seen = BTreeSet::new();
        for a in &p.assignments {
            for &i in a {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert!(partition(&ds, 4, 2, PartitionMode::Iid { overlap: false }, 9).is_err());
    }

    #[test]
    fn noniid_partition_respects_class_sets() {
        let cfg = SynthesisConfig {
            classes: 4,
            per_class: 20,
            ..small_cfg()
        };
        let ds = synthesize_dataset(&cfg, 4).unwrap();
        let p = partition(
            &ds,
            5,
            10,
            PartitionMode::NonIid {
                classes_per_client: 2,
            },
            11,
        )
        .unwrap();
        for a in &p.assignments {
            let classes: BTreeSet<u32> = a
                .iter()
                .map(|&i| ds.labels.as_ref().unwrap()[i])
                .collect();
            assert_eq!(classes.len(), 2, "client classes {classes:?}");
        }
    }

    #[test]
    fn noniid_needs_labels() {
        let ds = Dataset::new(Tensor::zeros(&[4, 2, 2, 1]), None).unwrap();
        assert!(partition(
            &ds,
            2,
            2,
            PartitionMode::NonIid {
                classes_per_client: 1
            },
            0
        )
        .is_err());
    }

    #[test]
    fn poison_full_fraction_marks_every_target_image() {
        let cfg = small_cfg();
        let ds = synthesize_dataset(&cfg, 6).unwrap();
        let trig = TriggerPattern::white_square(2, 6, 6, 1);
        let poisoned = poison_dataset(&ds, 1, &trig, 1.0, 0).unwrap();
        for i in 0..ds.len() {
            let label = ds.labels.as_ref().unwrap()[i];
            let img = poisoned.image(i);
            let has_patch = (0..2).all(|dh| {
                (0..2).all(|dw| img.data()[((6 + dh) * 8 + 6 + dw)] == 1.0)
            });
            if label == 1 {
                assert!(has_patch, "target image {i} missing patch");
            } else {
                assert_eq!(img, ds.image(i), "non-target image {i} modified");
            }
        }
        assert_eq!(poisoned.labels, ds.labels);
    }

    #[test]
    fn poison_is_deterministic_per_seed() {
        let cfg = SynthesisConfig {
            per_class: 10,
            ..small_cfg()
        };
        let ds = synthesize_dataset(&cfg, 6).unwrap();
        let trig = TriggerPattern::white_square(2, 0, 0, 1);
        let a = poison_dataset(&ds, 0, &trig, 0.5, 42).unwrap();
        let b = poison_dataset(&ds, 0, &trig, 0.5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poison_missing_class_errors() {
        let ds = synthesize_dataset(&small_cfg(), 6).unwrap();
        let trig = TriggerPattern::white_square(2, 0, 0, 1);
        assert!(poison_dataset(&ds, 9, &trig, 1.0, 0).is_err());
    }

    #[test]
    fn inspection_sets_are_deterministic_and_bounded() {
        let ds = synthesize_dataset(&small_cfg(), 3).unwrap();
        for source in [
            InspectionSource::InDistribution,
            InspectionSource::OutOfDistribution,
            InspectionSource::RandomVectors,
        ] {
            let a = build_inspection_set(source, 10, &ds, 5).unwrap();
            let b = build_inspection_set(source, 10, &ds, 5).unwrap();
            assert_eq!(a.items, b.items);
            assert_eq!(a.len(), 10);
            for item in &a.items {
                assert_eq!(item.shape(), &[8, 8, 1]);
                assert!(item.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
