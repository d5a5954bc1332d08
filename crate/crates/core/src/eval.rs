//! Metrics and evaluation protocols.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::bagstore::{Bag, SoftLabel};
use crate::division::PseudoBagPartition;
use crate::error::{Error, Result};
use crate::mil::{self, MilParams};
use crate::mixing::{self, DividedBag, TargetMode};
use crate::rng;

pub const OCCLUSION_RATIOS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const CORRUPTION_RATIOS: [f64; 3] = [0.2, 0.5, 0.8];

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
    pub ce_loss: f64,
}

/// Fraction of predictions whose argmax (lowest index on ties) equals the
/// label.
pub fn accuracy(predictions: &[SoftLabel], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "length mismatch");
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// ROC-AUC as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ordered correctly, ties counting one half.
/// `None` if either class is absent.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, with mid-ranks for ties, in integers.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]].total_cmp(&scores[idx[start]]).is_eq() {
            end += 1;
        }
        // 1-based ranks start+1 ..= end; twice their mean is start + end + 1.
        let twice_mid = (start + end + 1) as u64;
        let pos_in_group = idx[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        start = end;
    }
    // 2U = 2R − n_pos(n_pos + 1); AUC = U / (n_pos · n_neg).
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Some(twice_u as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs over classes where it is defined.
/// For two classes this is the plain AUC of the class-1 probability.
pub fn auc_macro_ovr(
    predictions: &[SoftLabel],
    labels: &[usize],
    num_classes: usize,
) -> Option<f64> {
    let per_class = |c: usize| {
        let scores: Vec<f64> = predictions.iter().map(|p| p.probs()[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        auc_binary(&scores, &truth)
    };
    if num_classes == 2 {
        return per_class(1);
    }
    let aucs: Vec<f64> = (0..num_classes).filter_map(per_class).collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Mean cross-entropy of predictions against hard labels.
pub fn mean_ce(predictions: &[SoftLabel], labels: &[usize]) -> f64 {
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| mil::loss(p.probs(), &SoftLabel::one_hot(y, p.num_classes())))
        .sum();
    total / labels.len() as f64
}

/// Predictions for every bag, in order.
pub fn predict_all(params: &MilParams, bags: &[Bag]) -> Vec<SoftLabel> {
    bags.par_iter().map(|b| mil::predict(params, b)).collect()
}

pub fn report(predictions: &[SoftLabel], labels: &[usize], num_classes: usize) -> EvalReport {
    EvalReport {
        n: labels.len(),
        acc: accuracy(predictions, labels),
        auc: auc_macro_ovr(predictions, labels, num_classes),
        ce_loss: mean_ce(predictions, labels),
    }
}

pub fn evaluate(params: &MilParams, bags: &[Bag], num_classes: usize) -> EvalReport {
    let preds = predict_all(params, bags);
    let labels: Vec<usize> = bags.iter().map(Bag::label).collect();
    report(&preds, &labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizationGap {
    /// `train_auc − test_auc`.
    pub auc_gap: Option<f64>,
    /// `test_loss − train_loss`.
    pub loss_gap: f64,
}

pub fn generalization_gap(
    params: &MilParams,
    train: &[Bag],
    test: &[Bag],
    num_classes: usize,
) -> GeneralizationGap {
    let tr = evaluate(params, train, num_classes);
    let te = evaluate(params, test, num_classes);
    GeneralizationGap {
        auc_gap: tr.auc.zip(te.auc).map(|(a, b)| a - b),
        loss_gap: te.ce_loss - tr.ce_loss,
    }
}

/// Drop `⌊r·m⌋` uniformly chosen instances (keeping at least one).
pub fn occlude<R: Rng + ?Sized>(bag: &Bag, ratio: f64, rng: &mut R) -> Result<Bag> {
    let m = bag.m();
    let drop = ((ratio * m as f64).floor() as usize).min(m - 1);
    if drop == 0 {
        return Ok(bag.clone());
    }
    let mut keep = index::sample(rng, m, m - drop).into_vec();
    keep.sort_unstable();
    bag.select(&keep)
}

/// Evaluate on occluded copies of the test bags for each ratio.
pub fn occlusion_test(
    params: &MilParams,
    test: &[Bag],
    ratios: &[f64],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<(f64, EvalReport)>> {
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("occlusion ratio {r} not in [0, 1]")));
            }
            let occluded = test
                .iter()
                .map(|b| {
                    let mut s =
                        rng::stream(seed, &["occlude".into(), r.to_bits().into(), b.id().into()]);
                    occlude(b, r, &mut s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((r, evaluate(params, &occluded, num_classes)))
        })
        .collect()
}

/// Relabel a uniformly random `⌊ratio·N⌋` subset with labels drawn uniformly
/// over all classes (the original may be redrawn). Returns the new bags and
/// the selected indices.
pub fn corrupt_labels<R: Rng + ?Sized>(
    train: &[Bag],
    ratio: f64,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Vec<Bag>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "corruption ratio {ratio} not in [0, 1]"
        )));
    }
    let count = (ratio * train.len() as f64).floor() as usize;
    let mut selected = index::sample(rng, train.len(), count).into_vec();
    selected.sort_unstable();
    let mut out = train.to_vec();
    for &i in &selected {
        out[i] = train[i].relabeled(rng.random_range(0..num_classes));
    }
    Ok((out, selected))
}

/// Mean cross-entropy on mixed training pairs at each fixed λ.
///
/// Pairs and mask streams are shared across the grid, so points differ
/// only in λ.
pub fn inbetween_test(
    params: &MilParams,
    train: &[Bag],
    partitions: &[PseudoBagPartition],
    lambda_grid: &[f64],
    mode: TargetMode,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if train.len() < 2 {
        return Err(Error::Config(
            "in-between test needs at least two bags".into(),
        ));
    }
    if partitions.len() != train.len() {
        return Err(Error::Config(
            "one partition per training bag required".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = {
        let mut r = rng::stream(seed, &["inbetween-pairs".into()]);
        (0..train.len())
            .map(|i| {
                let mut j = r.random_range(0..train.len() - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect()
    };
    lambda_grid
        .iter()
        .map(|&lambda| {
            let losses = pairs
                .par_iter()
                .enumerate()
                .map(|(k, &(i, j))| {
                    let mut r = rng::stream(seed, &["inbetween-mask".into(), k.into()]);
                    let mask = mixing::sample_mask(lambda, partitions[i].n(), &mut r);
                    let s = mixing::mix_bags(
                        DividedBag::new(&train[i], &partitions[i])?,
                        DividedBag::new(&train[j], &partitions[j])?,
                        &mask,
                        mode,
                        num_classes,
                    )?;
                    let probs = mil::forward(params, s.features.view()).probs;
                    Ok(mil::loss(probs.as_slice().expect("contiguous"), &s.label))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((lambda, losses.iter().sum::<f64>() / losses.len() as f64))
        })
        .collect()
}

/// One CSV row of a protocol result.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRow {
    pub protocol: String,
    pub param: f64,
    pub seed: u64,
    /// `None` for loss-only protocols.
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub ce: f64,
}

impl ProtocolRow {
    pub fn from_report(protocol: &str, param: f64, seed: u64, r: &EvalReport) -> Self {
        Self {
            protocol: protocol.to_string(),
            param,
            seed,
            acc: Some(r.acc),
            auc: r.auc,
            ce: r.ce_loss,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub const PROTOCOL_CSV_HEADER: &str = "protocol,param,seed,acc,auc,ce\n";

pub fn protocol_csv(rows: &[ProtocolRow]) -> String {
    let mut s = String::from(PROTOCOL_CSV_HEADER);
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.protocol,
            r.param,
            r.seed,
            fmt_opt(r.acc),
            fmt_opt(r.auc),
            r.ce
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn sl(p: &[f64]) -> SoftLabel {
        SoftLabel::new(p.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let preds = vec![sl(&[1.0, 0.0]), sl(&[0.0, 1.0])];
        assert_eq!(accuracy(&preds, &[0, 1]), 1.0);
        assert_eq!(accuracy(&[sl(&[0.5, 0.5])], &[0]), 1.0);
        assert_eq!(accuracy(&[sl(&[0.5, 0.5])], &[1]), 0.0);
    }

    #[test]
    fn accuracy_matches_recount() {
        let mut r = StreamRng::seed_from_u64(4);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..1000 {
            // Small integer weights so exact ties are common.
            let raw: Vec<f64> = (0..3).map(|_| f64::from(r.random_range(1..4u8))).collect();
            let sum: f64 = raw.iter().sum();
            preds.push(sl(&raw.iter().map(|v| v / sum).collect::<Vec<_>>()));
            labels.push(r.random_range(0..3));
        }
        let mut hits = 0;
        for (p, &y) in preds.iter().zip(&labels) {
            let probs = p.probs();
            let mut best = 0;
            for c in 1..3 {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            hits += usize::from(best == y);
        }
        assert_eq!(accuracy(&preds, &labels), hits as f64 / 1000.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_binary(&[0.9, 0.8, 0.3], &[true, true, false]),
            Some(1.0)
        );
        assert_eq!(auc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(
            auc_binary(&[0.2, 0.7, 0.6, 0.4], &[false, true, false, true]),
            Some(0.75)
        );
        assert_eq!(auc_binary(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn macro_auc_skips_undefined_classes() {
        let preds = vec![
            sl(&[0.8, 0.1, 0.1]),
            sl(&[0.1, 0.8, 0.1]),
            sl(&[0.6, 0.3, 0.1]),
        ];
        // Class 2 never occurs: averaged over classes 0 and 1 only.
        let auc = auc_macro_ovr(&preds, &[0, 1, 0], 3).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn occlusion_counts() {
        let bag = Bag::new(
            "b",
            Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64),
            0,
        )
        .unwrap();
        let mut r = StreamRng::seed_from_u64(0);
        assert_eq!(occlude(&bag, 0.0, &mut r).unwrap(), bag);
        assert_eq!(occlude(&bag, 0.4, &mut r).unwrap().m(), 6);
        assert_eq!(occlude(&bag, 1.0, &mut r).unwrap().m(), 1);
    }

    #[test]
    fn corruption_selects_floor_count() {
        let bags: Vec<Bag> = (0..10)
            .map(|i| Bag::new(format!("b{i}"), Array2::zeros((1, 1)), i % 2).unwrap())
            .collect();
        let mut r = StreamRng::seed_from_u64(1);
        let (out, sel) = corrupt_labels(&bags, 0.5, 2, &mut r).unwrap();
        assert_eq!(sel.len(), 5);
        for (i, (a, b)) in bags.iter().zip(&out).enumerate() {
            if !sel.contains(&i) {
                assert_eq!(a, b);
            }
        }
        assert!(corrupt_labels(&bags, 1.5, 2, &mut r).is_err());
    }

    #[test]
    fn csv_formatting() {
        let rows = vec![ProtocolRow {
            protocol: "plain".into(),
            param: 0.0,
            seed: 3,
            acc: Some(0.5),
            auc: None,
            ce: 0.25,
        }];
        assert_eq!(
            protocol_csv(&rows),
            "protocol,param,seed,acc,auc,ce\nplain,0,3,0.5,NA,0.25\n"
        );
    }
}
