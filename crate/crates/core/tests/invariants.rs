use ndarray::{Array2, Axis};
use proptest::prelude::*;
use psemix::division::{self, DivisionConfig, DivisionMethod, PseudoBagPartition};
use psemix::eval;
use psemix::mixing::{self, DividedBag, InstanceSource, TargetMode};
use psemix::rng;
use psemix::Bag;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_bag(id: &str, m: usize, d: usize, label: usize, seed: u64) -> Bag {
    let mut r = rng::stream(seed, &[id.into()]);
    let x = Array2::from_shape_fn((m, d), |_| r.sample::<f64, _>(StandardNormal));
    Bag::new(id, x, label).unwrap()
}

fn method() -> impl Strategy<Value = DivisionMethod> {
    prop::sample::select(DivisionMethod::ALL.to_vec())
}

fn lenient(n: usize, l: usize, method: DivisionMethod) -> DivisionConfig {
    DivisionConfig {
        n,
        l,
        k: 3,
        method,
        strict: false,
        ..DivisionConfig::default()
    }
}

fn check_partition(p: &PseudoBagPartition, m: usize) -> Result<(), TestCaseError> {
    let n = p.n();
    prop_assert_eq!(p.m(), m);
    let mut seen = vec![0usize; m];
    for members in p.pseudo_bags() {
        for j in members {
            seen[j] += 1;
        }
    }
    prop_assert!(seen.iter().all(|&c| c == 1));
    prop_assert!(p.phenotype().iter().all(|&c| c < p.l()));
    for c in 0..p.l() {
        let mut counts = vec![0usize; n];
        for (j, &ph) in p.phenotype().iter().enumerate() {
            if ph == c {
                counts[p.pseudo_bag()[j]] += 1;
            }
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "stratum {} skew {}..{}", c, lo, hi);
    }
    if m >= n {
        prop_assert!(p.pseudo_bags().iter().all(|b| !b.is_empty()));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn division_covers_balances_and_repeats(
        m in 1usize..150,
        d in 1usize..8,
        n in 1usize..40,
        l in 1usize..10,
        method in method(),
        seed in any::<u64>(),
    ) {
        let bag = random_bag("p", m, d, 0, seed);
        let cfg = lenient(n, l, method);
        let p = division::divide_seeded(&bag, &cfg, seed).unwrap();
        check_partition(&p, m)?;
        prop_assert_eq!(division::divide_seeded(&bag, &cfg, seed).unwrap(), p);
    }

    #[test]
    fn kept_count_is_monotone_and_bounded(n in 1usize..100, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mixing::kept_count(lo, n) <= mixing::kept_count(hi, n));
        prop_assert!(mixing::kept_count(hi, n) <= n);
        prop_assert_eq!(mixing::kept_count(0.0, n), 0);
        prop_assert_eq!(mixing::kept_count(1.0, n), n);
    }

    #[test]
    fn mask_has_kept_count_true_positions(n in 1usize..100, lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = mixing::sample_mask(lambda, n, &mut rng::stream(seed, &[]));
        prop_assert_eq!(mask.n(), n);
        prop_assert_eq!(mask.mask.iter().filter(|&&x| x).count(), mask.kept_a);
        prop_assert_eq!(mask.kept_a, mixing::kept_count(lambda, n));
    }

    #[test]
    fn mixed_bag_is_exactly_the_selected_pseudo_bags(
        ma in 1usize..80,
        mb in 1usize..80,
        n in 1usize..12,
        lambda in 0.0f64..=1.0,
        labels in (0usize..3, 0usize..3),
        method in method(),
        seed in any::<u64>(),
    ) {
        let a = random_bag("a", ma, 4, labels.0, seed);
        let b = random_bag("b", mb, 4, labels.1, seed);
        let cfg = lenient(n, 3, method);
        let pa = division::divide_seeded(&a, &cfg, seed).unwrap();
        let pb = division::divide_seeded(&b, &cfg, seed).unwrap();
        let mask = mixing::sample_mask(lambda, n, &mut rng::stream(seed, &["mask".into()]));
        let s = mixing::mix_bags(
            DividedBag::new(&a, &pa).unwrap(),
            DividedBag::new(&b, &pb).unwrap(),
            &mask,
            TargetMode::PseudoBagMr,
            3,
        )
        .unwrap();

        let expect_a: usize = mask.a_positions().iter().map(|&t| pa.pseudo_bags()[t].len()).sum();
        let expect_b: usize = mask.b_positions().iter().map(|&t| pb.pseudo_bags()[t].len()).sum();
        prop_assert_eq!(s.m(), expect_a + expect_b);
        for (row, src) in s.features.axis_iter(Axis(0)).zip(&s.provenance.instances) {
            let (bag, part, j, want) = match *src {
                InstanceSource::A(j) => (&a, &pa, j, true),
                InstanceSource::B(j) => (&b, &pb, j, false),
                InstanceSource::Blend(..) => return Err(TestCaseError::fail("blend row in a PseMix bag")),
            };
            prop_assert_eq!(mask.mask[part.pseudo_bag()[j]], want);
            prop_assert_eq!(row.to_owned(), bag.features().row(j).to_owned());
        }

        let probs = s.label.probs();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w = mask.kept_a as f64 / n as f64;
        if labels.0 != labels.1 {
            prop_assert!((probs[labels.0] - w).abs() < 1e-12);
            prop_assert!((probs[labels.1] - (1.0 - w)).abs() < 1e-12);
        } else {
            prop_assert!((probs[labels.0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_is_rank_based(
        scored in prop::collection::vec((0u8..20, any::<bool>()), 2..120),
        shift in -5.0f64..5.0,
    ) {
        let scores: Vec<f64> = scored.iter().map(|&(s, _)| f64::from(s)).collect();
        let labels: Vec<bool> = scored.iter().map(|&(_, l)| l).collect();
        let Some(auc) = eval::auc_binary(&scores, &labels) else {
            prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l));
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&auc));

        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + shift).collect();
        prop_assert_eq!(eval::auc_binary(&warped, &labels), Some(auc));

        let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
        let complement = eval::auc_binary(&scores, &flipped).unwrap();
        prop_assert!((auc + complement - 1.0).abs() < 1e-12);

        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.reverse();
        let s2: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let l2: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(eval::auc_binary(&s2, &l2), Some(auc));
    }
}
