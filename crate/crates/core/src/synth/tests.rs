use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

#[test]
fn two_class_profile_endpoints() {
    assert_eq!(longtailed_counts(2, 100, 100.0).unwrap(), vec![100, 1]);
}

#[test]
fn three_class_profile() {
    // 100 * 100^(-c/2) for c = 0, 1, 2
    let oracle: Vec<usize> = (0..3).map(|c| (100.0 * 100f64.powf(-(c as f64) / 2.0)).round() as usize).collect();
    assert_eq!(oracle, vec![100, 10, 1]);
    assert_eq!(longtailed_counts(3, 100, 100.0).unwrap(), oracle);
}

#[test]
fn balanced_profile() {
    assert_eq!(longtailed_counts(10, 500, 1.0).unwrap(), vec![500; 10]);
    assert_eq!(longtailed_counts(1, 7, 50.0).unwrap(), vec![7]);
}

#[test]
fn rho_below_one_is_rejected() {
    assert!(longtailed_counts(3, 100, 0.5).is_err());
    assert!(longtailed_counts(3, 100, f64::NAN).is_err());
}

#[test]
fn tail_set_rounds_half_up() {
    assert_eq!(tail_class_set(&[100, 10, 1], 0.5), BTreeSet::from([1, 2]));
    assert!(tail_class_set(&[100, 10, 1], 0.0).is_empty());
    let counts = longtailed_counts(10, 500, 100.0).unwrap();
    assert_eq!(tail_class_set(&counts, 0.5), (5..10).collect());
    assert_eq!(tail_class_set(&counts, 1.0).len(), 10);
}

#[test]
fn tail_ties_prefer_smaller_ids() {
    assert_eq!(tail_class_set(&[5, 3, 3, 3], 0.5), BTreeSet::from([1, 2]));
}

proptest! {
    #[test]
    fn profile_invariants(classes in 2usize..120, rho in 1.0f64..200.0, extra in 0usize..2000, k in 0.0f64..=1.0) {
        let n_max = rho.ceil() as usize + extra;
        let counts = longtailed_counts(classes, n_max, rho).unwrap();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let profile = ClassProfile::new(counts.clone(), k).unwrap();
        let min = *counts.iter().min().unwrap() as f64;
        let delta = 2.0 / min;
        let ratio = profile.realized_rho();
        prop_assert!(ratio >= rho * (1.0 - delta) - 1e-9 && ratio <= rho * (1.0 + delta) + 1e-9,
            "ratio {ratio} rho {rho} min {min}");
        prop_assert!((profile.priors.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(profile.tail_set.len(), tail_class_count(classes, k));
        for t in &profile.tail_set {
            for c in (0..classes).filter(|c| !profile.tail_set.contains(c)) {
                prop_assert!(counts[*t] <= counts[c]);
            }
        }
    }
}

fn small_cfg() -> DataGenConfig {
    DataGenConfig {
        classes: 4,
        n_max: 40,
        rho: 10.0,
        n_ood_train: 30,
        n_test_per_class: 5,
        n_ood_test: 12,
        n_ood_clusters: 4,
        ..DataGenConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&small_cfg()).unwrap();
    let b = generate_synthetic(&small_cfg()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&DataGenConfig { seed: 1, ..small_cfg() }).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn default_train_size_matches_profile() {
    let cfg = DataGenConfig::default();
    let (profile, split) = generate_synthetic(&cfg).unwrap();
    let expected: usize = longtailed_counts(10, 500, 100.0).unwrap().iter().sum();
    assert_eq!(split.train_in.len(), expected);
    for (c, &n) in profile.counts.iter().enumerate() {
        assert_eq!(split.train_in.iter().filter(|e| e.label == Label::Class(c)).count(), n);
        assert_eq!(split.test_in.iter().filter(|e| e.label == Label::Class(c)).count(), cfg.n_test_per_class);
    }
    assert_eq!(split.train_out.len(), cfg.n_ood_train);
    assert_eq!(split.test_out.len(), cfg.n_ood_test);
}

#[test]
fn zero_std_collapses_to_centers() {
    let cfg = DataGenConfig { id_cluster_std: 0.0, ood_cluster_std: 0.0, ..small_cfg() };
    let (_, split) = generate_synthetic(&cfg).unwrap();
    let centers = class_centers(&cfg);
    for e in split.train_in.iter().chain(&split.test_in) {
        assert_eq!(e.features, centers[e.label.class().unwrap()]);
    }
    let ood = ood_centers(&cfg);
    for e in &split.train_out {
        assert!(ood.contains(&e.features));
    }
}

#[test]
fn ood_centers_sit_between_neighbours() {
    let cfg = small_cfg();
    let ids = class_centers(&cfg);
    for (j, o) in ood_centers(&cfg).iter().enumerate() {
        let r = (o[0] * o[0] + o[1] * o[1]).sqrt();
        assert!((r - cfg.id_center_radius).abs() < 1e-12);
        let a = &ids[j];
        let b = &ids[(j + 1) % cfg.classes];
        let da = ((o[0] - a[0]).powi(2) + (o[1] - a[1]).powi(2)).sqrt();
        let db = ((o[0] - b[0]).powi(2) + (o[1] - b[1]).powi(2)).sqrt();
        assert!((da - db).abs() < 1e-12);
    }
}

#[test]
fn example_flags_are_consistent() {
    let (profile, split) = generate_synthetic(&small_cfg()).unwrap();
    for e in split.train_out.iter().chain(&split.test_out) {
        assert_eq!(e.domain, Domain::Out);
        assert_eq!(e.label, Label::Ood);
        assert!(!e.tail);
    }
    for e in split.train_in.iter().chain(&split.test_in) {
        assert_eq!(e.tail, profile.is_tail(e.label.class().unwrap()));
    }
}

#[test]
fn invalid_configs_name_the_key() {
    let err = generate_synthetic(&DataGenConfig { dim: 1, ..small_cfg() }).unwrap_err();
    assert!(err.to_string().contains("dim"));
    let err = generate_synthetic(&DataGenConfig { rho: 0.5, ..small_cfg() }).unwrap_err();
    assert!(err.to_string().contains("rho"));
    let err = generate_synthetic(&DataGenConfig { n_ood_clusters: 9, ..small_cfg() }).unwrap_err();
    assert!(err.to_string().contains("n_ood_clusters"));
}

#[test]
fn single_batch_epoch() {
    let (_, split) = generate_synthetic(&small_cfg()).unwrap();
    let n = split.train_in.len();
    let pairs = mixed_batches(&split, n, 8, 3, true).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].out_rows.len(), 8);
}

#[test]
fn batches_partition_train_in_and_repeat() {
    let (_, split) = generate_synthetic(&small_cfg()).unwrap();
    let a = mixed_batches(&split, 7, 5, 42, true).unwrap();
    let b = mixed_batches(&split, 7, 5, 42, true).unwrap();
    assert_eq!(a, b);
    let mut seen: Vec<usize> = a.iter().flat_map(|p| p.in_rows.iter().copied()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..split.train_in.len()).collect::<Vec<_>>());
    assert!(a.iter().all(|p| p.in_rows.len() >= 2 && p.out_rows.len() == 5));
    // reshuffling only after the pool is exhausted: the first |train_out| draws are distinct
    let draws: Vec<usize> = a.iter().flat_map(|p| p.out_rows.iter().copied()).take(split.train_out.len()).collect();
    let distinct: BTreeSet<usize> = draws.iter().copied().collect();
    assert_eq!(distinct.len(), draws.len());
}

#[test]
fn trailing_singleton_batch_is_folded() {
    let chunks = in_batches(7, 3, 0).unwrap();
    assert_eq!(chunks.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 4]);
}

#[test]
fn empty_ood_pool_with_active_terms_is_config_error() {
    let (_, mut split) = generate_synthetic(&small_cfg()).unwrap();
    split.train_out.clear();
    assert!(matches!(mixed_batches(&split, 4, 4, 0, true), Err(PasclError::Config(_))));
    let pairs = mixed_batches(&split, 4, 4, 0, false).unwrap();
    assert!(pairs.iter().all(|p| p.out_rows.is_empty()));
    assert!(mixed_batches(&split, 0, 4, 0, false).is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let (profile, split) = generate_synthetic(&small_cfg()).unwrap();
    let all: Vec<LabeledExample> = split.train_in.iter().chain(&split.train_out).cloned().collect();
    let mut buf = Vec::new();
    write_examples_csv(&mut buf, &all, 2).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("feat_0,feat_1,label,domain,tail\n"));
    assert!(text.contains(",OOD,OUT,0"));
    let back = read_examples_csv(buf.as_slice()).unwrap();
    assert_eq!(back, all);

    let summary = ProfileSummary::new(&profile, 0.5, 10.0);
    assert_eq!(summary.to_profile().unwrap(), profile);
}

#[test]
fn csv_rejects_inconsistent_rows() {
    let text = "feat_0,feat_1,label,domain,tail\n1.0,2.0,OOD,OUT,1\n";
    assert!(matches!(read_examples_csv(text.as_bytes()), Err(PasclError::Data(_))));
    let text = "feat_0,feat_1,label,domain,tail\n1.0,2.0,3,SIDE,0\n";
    assert!(read_examples_csv(text.as_bytes()).is_err());
}
