use proptest::prelude::*;
use satkit::data::{augment, decode_f32, encode_f32, gen_synthetic, split, AugmentationPolicy, SyntheticSpec};

fn spec() -> impl Strategy<Value = SyntheticSpec> {
    (any::<u64>(), 2usize..6, 2usize..8, 2usize..12, 0.01f64..0.3).prop_map(
        |(seed, classes, dim, per_class, spread)| SyntheticSpec {
            seed,
            classes,
            dim,
            per_class,
            spread,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthetic_is_deterministic_balanced_and_boxed(s in spec()) {
        let a = gen_synthetic(&s).unwrap();
        prop_assert_eq!(&a, &gen_synthetic(&s).unwrap());
        prop_assert_eq!(a.len(), s.classes * s.per_class);
        prop_assert!(a.examples().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a.class_counts(), vec![s.per_class; s.classes]);
        for i in 0..a.len() {
            prop_assert_eq!(a.label(i), i % s.classes);
        }
    }

    #[test]
    fn split_partitions_rows(s in spec(), frac in 0.1f64..0.9, seed in any::<u64>()) {
        let all = gen_synthetic(&s).unwrap();
        let (p, q) = split(&all, (frac, 1.0 - frac), seed).unwrap();
        prop_assert_eq!(p.len() + q.len(), all.len());
        let (p2, q2) = split(&all, (frac, 1.0 - frac), seed).unwrap();
        prop_assert_eq!(&p, &p2);
        prop_assert_eq!(&q, &q2);
        // every original row lands in exactly one part
        let key = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut left: Vec<Vec<u64>> = (0..all.len()).map(|i| key(all.example(i))).collect();
        let mut right: Vec<Vec<u64>> = (0..p.len())
            .map(|i| key(p.example(i)))
            .chain((0..q.len()).map(|i| key(q.example(i))))
            .collect();
        left.sort();
        right.sort();
        prop_assert_eq!(left, right);
        for c in 0..s.classes {
            let want = (frac * s.per_class as f64).round() as usize;
            prop_assert_eq!(p.class_counts()[c], want);
        }
    }

    #[test]
    fn augment_is_seeded_and_boxed(x in prop::collection::vec(0.0f64..=1.0, 1..20), draw in any::<u64>()) {
        let policy = AugmentationPolicy { flip: true, row_width: 0, ..Default::default() };
        let a = augment(&x, &policy, draw);
        prop_assert_eq!(&a, &augment(&x, &policy, draw));
        prop_assert_eq!(a.len(), x.len());
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(augment(&x, &AugmentationPolicy::identity(), draw), x);
    }

    #[test]
    fn f32_container_round_trips(s in spec()) {
        let ds = gen_synthetic(&s).unwrap();
        let back = decode_f32(&encode_f32(&ds)).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.dim(), ds.dim());
        for (a, b) in back.examples().iter().zip(ds.examples()) {
            prop_assert_eq!(*a, f64::from(*b as f32));
        }
    }
}

#[test]
fn split_rejects_bad_fractions() {
    let ds = gen_synthetic(&SyntheticSpec { seed: 0, classes: 2, dim: 2, per_class: 4, spread: 0.1 }).unwrap();
    assert!(split(&ds, (0.7, 0.7), 0).is_err());
    assert!(split(&ds, (-0.5, 1.5), 0).is_err());
}

#[test]
fn synthetic_rejects_degenerate_specs() {
    let ok = SyntheticSpec { seed: 0, classes: 2, dim: 2, per_class: 2, spread: 0.1 };
    assert!(gen_synthetic(&ok).is_ok());
    assert!(gen_synthetic(&SyntheticSpec { classes: 1, ..ok }).is_err());
    assert!(gen_synthetic(&SyntheticSpec { dim: 1, ..ok }).is_err());
    assert!(gen_synthetic(&SyntheticSpec { spread: 0.0, ..ok }).is_err());
}

#[test]
fn jitter_alone_moves_at_most_sigma() {
    let policy = AugmentationPolicy { jitter: 0.1, mask_prob: 0.0, flip: false, row_width: 0 };
    let x: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
    for draw in 0..1000 {
        let a = augment(&x, &policy, draw);
        assert!(a.iter().zip(&x).all(|(p, q)| (p - q).abs() <= 0.1));
    }
}

#[test]
fn whole_split_keeps_everything() {
    let ds = gen_synthetic(&SyntheticSpec { seed: 2, classes: 3, dim: 2, per_class: 5, spread: 0.1 }).unwrap();
    let (all, none) = split(&ds, (1.0, 0.0), 4).unwrap();
    assert_eq!(all.examples(), ds.examples());
    assert_eq!(all.labels(), ds.labels());
    assert!(none.is_empty());
}
