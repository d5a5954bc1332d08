//! Bag- and target-level mixing.
//!
//! Two divided bags `A` and `B` are combined pseudo-bag by pseudo-bag: a
//! mask over the `n` pseudo-bag positions selects `kept_a = ⌊λ(n+1)⌋`
//! (clamped to `n`) positions taken from `A`; the remaining positions are
//! taken from `B`. With probability `p` the mixed bag is emitted with a
//! mixed soft label, otherwise `B` alone is emitted through its share of the
//! mask with label `y_B`.
//!
//! The Mixup and InstanceMix baselines live here too.

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::bagstore::{Bag, SoftLabel};
use crate::division::PseudoBagPartition;
use crate::error::{Error, Result};

/// How the label weight of bag `A` is chosen for a mixed bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// `kept_a / n`, the realized pseudo-bag mixing ratio.
    PseudoBagMr,
    /// Fraction of the mixed bag's instances that came from `A`.
    InstanceMr,
    /// The raw λ draw.
    SampledLambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Beta(α, α) parameter.
    pub alpha: f64,
    /// Probability of emitting a mixed (rather than masked) bag.
    pub p: f64,
    pub target_mode: TargetMode,
    /// In the masked branch, also emit `A`'s masked bag.
    pub masked_both: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            p: 0.8,
            target_mode: TargetMode::PseudoBagMr,
            masked_both: false,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "p must lie in [0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// A sampled pseudo-bag mask. `mask[τ]` is true where `A` contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    pub lambda: f64,
    pub mask: Vec<bool>,
    pub kept_a: usize,
}

impl MixMask {
    pub fn n(&self) -> usize {
        self.mask.len()
    }

    pub fn kept_b(&self) -> usize {
        self.n() - self.kept_a
    }

    /// Positions contributed by `A`, ascending.
    pub fn a_positions(&self) -> Vec<usize> {
        (0..self.n()).filter(|&t| self.mask[t]).collect()
    }

    /// Positions contributed by `B`, ascending.
    pub fn b_positions(&self) -> Vec<usize> {
        (0..self.n()).filter(|&t| !self.mask[t]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Mixed,
    Masked,
}

/// Where one row of an augmented bag came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceSource {
    A(usize),
    B(usize),
    /// Interpolation of `A`'s and `B`'s rows.
    Blend(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub bag_a: Option<String>,
    pub bag_b: String,
    /// Pseudo-bag indices kept from `A`.
    pub kept_a: Vec<usize>,
    /// Pseudo-bag indices kept from `B`.
    pub kept_b: Vec<usize>,
    /// Origin of every output row.
    pub instances: Vec<InstanceSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub features: Array2<f64>,
    pub label: SoftLabel,
    pub kind: SampleKind,
    pub provenance: Provenance,
}

impl AugmentedSample {
    pub fn m(&self) -> usize {
        self.features.nrows()
    }

    /// The sample as a plain bag (hard label = argmax of the soft label).
    pub fn to_bag(&self, id: impl Into<String>) -> Result<Bag> {
        Bag::new(id, self.features.clone(), self.label.argmax())
    }
}

/// A bag together with its pseudo-bag division.
#[derive(Debug, Clone, Copy)]
pub struct DividedBag<'a> {
    pub bag: &'a Bag,
    pub partition: &'a PseudoBagPartition,
}

impl<'a> DividedBag<'a> {
    pub fn new(bag: &'a Bag, partition: &'a PseudoBagPartition) -> Result<Self> {
        if partition.m() != bag.m() {
            return Err(Error::InvalidPartition(format!(
                "partition covers {} instances, bag {} has {}",
                partition.m(),
                bag.id(),
                bag.m()
            )));
        }
        Ok(Self { bag, partition })
    }

    /// Instance indices (ascending) of the selected pseudo-bags.
    fn instances_of(&self, positions: &[bool]) -> Vec<usize> {
        self.partition
            .pseudo_bag()
            .iter()
            .enumerate()
            .filter(|(_, &t)| positions[t])
            .map(|(j, _)| j)
            .collect()
    }
}

/// A Beta(α, α) draw; α = 0 degenerates to a fair coin over {0, 1}.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    assert!(alpha >= 0.0, "alpha must be non-negative");
    if alpha == 0.0 {
        return if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    Beta::new(alpha, alpha)
        .expect("positive shape")
        .sample(rng)
        .clamp(0.0, 1.0)
}

/// `clamp(⌊λ(n+1)⌋, 0, n)`.
pub fn kept_count(lambda: f64, n: usize) -> usize {
    let k = (lambda * (n as f64 + 1.0)).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// A uniformly random mask with `kept_count(λ, n)` positions given to `A`.
pub fn sample_mask<R: Rng + ?Sized>(lambda: f64, n: usize, rng: &mut R) -> MixMask {
    let kept_a = kept_count(lambda, n);
    let mut mask = vec![false; n];
    for t in index::sample(rng, n, kept_a) {
        mask[t] = true;
    }
    MixMask {
        lambda,
        mask,
        kept_a,
    }
}

/// Weight on `y_A` for the given mode.
fn target_weight(mask: &MixMask, mode: TargetMode, from_a: usize, from_b: usize) -> f64 {
    match mode {
        TargetMode::PseudoBagMr => mask.kept_a as f64 / mask.n() as f64,
        TargetMode::InstanceMr => {
            let total = from_a + from_b;
            if total == 0 {
                mask.kept_a as f64 / mask.n() as f64
            } else {
                from_a as f64 / total as f64
            }
        }
        TargetMode::SampledLambda => mask.lambda,
    }
}

/// `w·y_A + (1−w)·y_B` with `w` chosen by `mode`.
pub fn mix_targets(
    y_a: &SoftLabel,
    y_b: &SoftLabel,
    mask: &MixMask,
    mode: TargetMode,
    instance_counts: (usize, usize),
) -> SoftLabel {
    let w = target_weight(mask, mode, instance_counts.0, instance_counts.1);
    SoftLabel::interpolate(w, y_a, y_b)
}

fn gather(rows: &[(&Bag, usize)], d: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), d));
    for (mut dst, (bag, j)) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&bag.instance(*j));
    }
    out
}

fn check_pair(a: &Bag, b: &Bag) -> Result<()> {
    if a.d() != b.d() {
        return Err(Error::DimensionMismatch {
            id: b.id().to_string(),
            expected: a.d(),
            found: b.d(),
        });
    }
    Ok(())
}

/// Union of `A`'s pseudo-bags at mask-true positions and `B`'s at the rest.
/// Rows from `A` come first, each side in original instance order.
pub fn mix_bags(
    a: DividedBag<'_>,
    b: DividedBag<'_>,
    mask: &MixMask,
    mode: TargetMode,
    num_classes: usize,
) -> Result<AugmentedSample> {
    let (na, nb) = (a.partition.n(), b.partition.n());
    if na != nb {
        return Err(Error::PseudoBagMismatch { a: na, b: nb });
    }
    if mask.n() != na {
        return Err(Error::PseudoBagMismatch { a: na, b: mask.n() });
    }
    check_pair(a.bag, b.bag)?;
    let from_b_mask: Vec<bool> = mask.mask.iter().map(|&x| !x).collect();
    let rows_a = a.instances_of(&mask.mask);
    let rows_b = b.instances_of(&from_b_mask);
    let rows: Vec<(&Bag, usize)> = rows_a
        .iter()
        .map(|&j| (a.bag, j))
        .chain(rows_b.iter().map(|&j| (b.bag, j)))
        .collect();
    let features = gather(&rows, a.bag.d());
    let label = mix_targets(
        &SoftLabel::one_hot(a.bag.label(), num_classes),
        &SoftLabel::one_hot(b.bag.label(), num_classes),
        mask,
        mode,
        (rows_a.len(), rows_b.len()),
    );
    let instances = rows_a
        .iter()
        .map(|&j| InstanceSource::A(j))
        .chain(rows_b.iter().map(|&j| InstanceSource::B(j)))
        .collect();
    Ok(AugmentedSample {
        features,
        label,
        kind: SampleKind::Mixed,
        provenance: Provenance {
            bag_a: Some(a.bag.id().to_string()),
            bag_b: b.bag.id().to_string(),
            kept_a: mask.a_positions(),
            kept_b: mask.b_positions(),
            instances,
        },
    })
}

/// Keep only the given pseudo-bag positions of one bag. If that leaves no
/// instance, one non-empty pseudo-bag is drawn and kept instead.
fn masked_side<R: Rng + ?Sized>(
    side: DividedBag<'_>,
    keep: Vec<bool>,
    num_classes: usize,
    rng: &mut R,
) -> AugmentedSample {
    let mut keep = keep;
    let mut rows = side.instances_of(&keep);
    if rows.is_empty() {
        let sizes = side.partition.pseudo_bags();
        let non_empty: Vec<usize> = (0..sizes.len()).filter(|&t| !sizes[t].is_empty()).collect();
        let t = non_empty[rng.random_range(0..non_empty.len())];
        keep = vec![false; keep.len()];
        keep[t] = true;
        rows = side.instances_of(&keep);
    }
    let features = side.bag.features().select(Axis(0), &rows);
    let kept: Vec<usize> = (0..keep.len()).filter(|&t| keep[t]).collect();
    AugmentedSample {
        features,
        label: SoftLabel::one_hot(side.bag.label(), num_classes),
        kind: SampleKind::Masked,
        provenance: Provenance {
            bag_a: None,
            bag_b: side.bag.id().to_string(),
            kept_a: Vec::new(),
            kept_b: kept,
            instances: rows.into_iter().map(InstanceSource::B).collect(),
        },
    }
}

/// `B`'s pseudo-bags at mask-false positions, labelled `y_B`. When the mask
/// leaves `B` nothing (`kept_b = 0`), one pseudo-bag is kept at random.
pub fn mask_bag<R: Rng + ?Sized>(
    b: DividedBag<'_>,
    mask: &MixMask,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    if mask.n() != b.partition.n() {
        return Err(Error::PseudoBagMismatch {
            a: mask.n(),
            b: b.partition.n(),
        });
    }
    let keep = mask.mask.iter().map(|&x| !x).collect();
    Ok(masked_side(b, keep, num_classes, rng))
}

/// One augmented sample from a pair: draw λ and a mask, then mix with
/// probability `p` or emit `B`'s masked bag otherwise.
pub fn psemix_pair<R: Rng + ?Sized>(
    a: DividedBag<'_>,
    b: DividedBag<'_>,
    cfg: &MixConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    Ok(psemix_samples(a, b, cfg, num_classes, rng)?.swap_remove(0))
}

/// Like [`psemix_pair`], but when `cfg.masked_both` is set the masked branch
/// yields `B`'s masked bag followed by `A`'s.
pub fn psemix_samples<R: Rng + ?Sized>(
    a: DividedBag<'_>,
    b: DividedBag<'_>,
    cfg: &MixConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    if a.bag.id() == b.bag.id() {
        return Err(Error::SelfPair(a.bag.id().to_string()));
    }
    let n = a.partition.n();
    if n != b.partition.n() {
        return Err(Error::PseudoBagMismatch {
            a: n,
            b: b.partition.n(),
        });
    }
    let lambda = sample_lambda(cfg.alpha, rng);
    let mask = sample_mask(lambda, n, rng);
    if rng.random_bool(cfg.p) {
        return Ok(vec![mix_bags(a, b, &mask, cfg.target_mode, num_classes)?]);
    }
    let mut out = vec![mask_bag(b, &mask, num_classes, rng)?];
    if cfg.masked_both {
        out.push(masked_side(a, mask.mask.clone(), num_classes, rng));
    }
    Ok(out)
}

fn sorted_sample<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    let mut idx = index::sample(rng, len, amount).into_vec();
    idx.sort_unstable();
    idx
}

/// Mixup at a fixed λ: the larger bag is randomly subsampled to the smaller
/// bag's size (keeping instance order), then rows are interpolated.
pub fn mixup_with_lambda<R: Rng + ?Sized>(
    a: &Bag,
    b: &Bag,
    lambda: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    check_pair(a, b)?;
    let m = a.m().min(b.m());
    let rows_a: Vec<usize> = if a.m() > m {
        sorted_sample(rng, a.m(), m)
    } else {
        (0..m).collect()
    };
    let rows_b: Vec<usize> = if b.m() > m {
        sorted_sample(rng, b.m(), m)
    } else {
        (0..m).collect()
    };
    let xa = a.features().select(Axis(0), &rows_a);
    let xb = b.features().select(Axis(0), &rows_b);
    let features = &xa * lambda + &xb * (1.0 - lambda);
    let label = SoftLabel::interpolate(
        lambda,
        &SoftLabel::one_hot(a.label(), num_classes),
        &SoftLabel::one_hot(b.label(), num_classes),
    );
    Ok(AugmentedSample {
        features,
        label,
        kind: SampleKind::Mixed,
        provenance: Provenance {
            bag_a: Some(a.id().to_string()),
            bag_b: b.id().to_string(),
            kept_a: Vec::new(),
            kept_b: Vec::new(),
            instances: rows_a
                .into_iter()
                .zip(rows_b)
                .map(|(i, j)| InstanceSource::Blend(i, j))
                .collect(),
        },
    })
}

/// Instance-aligned Mixup baseline with λ ~ Beta(α, α).
pub fn mixup_interpolate<R: Rng + ?Sized>(
    a: &Bag,
    b: &Bag,
    alpha: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    let lambda = sample_lambda(alpha, rng);
    mixup_with_lambda(a, b, lambda, num_classes, rng)
}

/// InstanceMix at a fixed λ: keep `⌊λ·m_A⌋` random instances of `A` and
/// `⌊(1−λ)·m_B⌋` of `B`. If both counts are zero one instance of `B` is kept.
pub fn instancemix_with_lambda<R: Rng + ?Sized>(
    a: &Bag,
    b: &Bag,
    lambda: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    check_pair(a, b)?;
    let take_a = ((lambda * a.m() as f64).floor() as usize).min(a.m());
    let mut take_b = (((1.0 - lambda) * b.m() as f64).floor() as usize).min(b.m());
    if take_a == 0 && take_b == 0 {
        take_b = 1;
    }
    let rows_a = sorted_sample(rng, a.m(), take_a);
    let rows_b = sorted_sample(rng, b.m(), take_b);
    let rows: Vec<(&Bag, usize)> = rows_a
        .iter()
        .map(|&j| (a, j))
        .chain(rows_b.iter().map(|&j| (b, j)))
        .collect();
    let features = gather(&rows, a.d());
    let label = SoftLabel::interpolate(
        lambda,
        &SoftLabel::one_hot(a.label(), num_classes),
        &SoftLabel::one_hot(b.label(), num_classes),
    );
    Ok(AugmentedSample {
        features,
        label,
        kind: SampleKind::Mixed,
        provenance: Provenance {
            bag_a: Some(a.id().to_string()),
            bag_b: b.id().to_string(),
            kept_a: Vec::new(),
            kept_b: Vec::new(),
            instances: rows_a
                .into_iter()
                .map(InstanceSource::A)
                .chain(rows_b.into_iter().map(InstanceSource::B))
                .collect(),
        },
    })
}

/// Instance-level mixing baseline with λ ~ Beta(α, α).
pub fn instancemix<R: Rng + ?Sized>(
    a: &Bag,
    b: &Bag,
    alpha: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    let lambda = sample_lambda(alpha, rng);
    instancemix_with_lambda(a, b, lambda, num_classes, rng)
}
