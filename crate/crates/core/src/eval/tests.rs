use super::*;
use crate::testutil::random_tensor;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn three_four_five() {
    let d = distance_matrix(&t(&[1, 2], &[0.0, 0.0]), &t(&[2, 2], &[3.0, 4.0, 0.0, 0.0])).unwrap();
    assert_eq!(d.data(), &[5.0, 0.0]);
}

#[test]
fn distance_matches_loop_and_is_symmetric() {
    let a = random_tensor(&[6, 5], 1);
    let b = random_tensor(&[7, 5], 2);
    let d = distance_matrix(&a, &b).unwrap();
    for i in 0..6 {
        for j in 0..7 {
            let mut s = 0.0;
            for k in 0..5 {
                s += (a.at(&[i, k]) - b.at(&[j, k])).powi(2);
            }
            assert!((d.at(&[i, j]) - s.sqrt()).abs() <= 1e-10);
        }
    }
    let dt = distance_matrix(&b, &a).unwrap();
    for i in 0..6 {
        for j in 0..7 {
            assert_eq!(d.at(&[i, j]), dt.at(&[j, i]));
        }
    }
    let self_d = distance_matrix(&a, &a).unwrap();
    assert!((0..6).all(|i| self_d.at(&[i, i]) == 0.0));
    assert!(distance_matrix(&a, &random_tensor(&[2, 4], 3)).is_err());
}

#[test]
fn one_hot_features_match_perfectly() {
    let ids = [0, 1, 2, 3];
    let mut v = vec![0.0; 16];
    for i in 0..4 {
        v[i * 4 + i] = 1.0;
    }
    let f = t(&[4, 4], &v);
    let d = distance_matrix(&f, &f).unwrap();
    assert_eq!(cmc(&d, &ids, &ids, &[1]).unwrap(), [1.0]);
    assert_eq!(mean_average_precision(&d, &ids, &ids).unwrap().0, 1.0);
}

#[test]
fn second_nearest_match() {
    let d = t(&[1, 3], &[0.5, 0.2, 0.9]);
    assert_eq!(cmc(&d, &[7], &[7, 3, 5], &[1, 2]).unwrap(), [0.0, 1.0]);
}

#[test]
fn hand_built_three_probes() {
    // rows sorted: probe 0 hits at rank 1, probe 1 at rank 2, probe 2 at rank 3
    let d = t(&[3, 3], &[0.1, 0.5, 0.9, 0.3, 0.2, 0.1, 0.3, 0.2, 0.1]);
    let c = cmc(&d, &[0, 1, 0], &[0, 1, 2], &[1, 2, 3]).unwrap();
    let expect = [1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (a, b) in c.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn ties_break_by_gallery_index() {
    let d = t(&[1, 3], &[1.0, 1.0, 1.0]);
    assert_eq!(cmc(&d, &[2], &[0, 1, 2], &[1, 2, 3]).unwrap(), [0.0, 0.0, 1.0]);
    assert_eq!(cmc(&d, &[0], &[0, 1, 2], &[1]).unwrap(), [1.0]);
}

#[test]
fn ap_five_sixths() {
    let d = t(&[1, 4], &[0.1, 0.2, 0.3, 0.4]);
    let (map, ap) = mean_average_precision(&d, &[1], &[1, 0, 1, 0]).unwrap();
    assert!((map - 5.0 / 6.0).abs() <= 1e-12);
    assert_eq!(ap.len(), 1);
}

#[test]
fn absent_probe_identity_is_an_error() {
    let d = t(&[1, 2], &[0.1, 0.2]);
    assert!(cmc(&d, &[9], &[0, 1], &[1]).is_err());
    assert!(mean_average_precision(&d, &[9], &[0, 1]).is_err());
    assert!(cmc(&d, &[0], &[0, 1], &[0]).is_err());
}

/// Position of gallery item `j` under the documented ordering.
fn brute_position(row: &[f64], j: usize) -> usize {
    1 + (0..row.len()).filter(|&k| row[k] < row[j] || (row[k] == row[j] && k < j)).count()
}

fn brute_cmc(row: &[f64], pid: usize, gids: &[usize], r: usize) -> f64 {
    let best = (0..row.len()).filter(|&j| gids[j] == pid).map(|j| brute_position(row, j)).min().unwrap();
    (best <= r) as u8 as f64
}

fn brute_ap(row: &[f64], pid: usize, gids: &[usize]) -> f64 {
    let rel: Vec<usize> = (0..row.len()).filter(|&j| gids[j] == pid).map(|j| brute_position(row, j)).collect();
    let mut total = 0.0;
    for &p in &rel {
        let above = rel.iter().filter(|&&q| q <= p).count();
        total += above as f64 / p as f64;
    }
    total / rel.len() as f64
}

#[test]
fn metrics_agree_with_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ranks = [1, 2, 5, 10, 20];
    for _ in 0..1000 {
        let gids: Vec<usize> = (0..20).map(|_| rng.gen_range(0..6)).collect();
        let pids: Vec<usize> = (0..10).map(|_| gids[rng.gen_range(0..20)]).collect();
        // coarse values force plenty of ties
        let vals: Vec<f64> = (0..200).map(|_| rng.gen_range(0..8) as f64 * 0.25).collect();
        let d = t(&[10, 20], &vals);
        let c = cmc(&d, &pids, &gids, &ranks).unwrap();
        let (map, ap) = mean_average_precision(&d, &pids, &gids).unwrap();
        let mut map_b = 0.0;
        for (p, row) in d.rows().enumerate() {
            let b = brute_ap(row, pids[p], &gids);
            assert!((ap[p] - b).abs() <= 1e-12);
            map_b += b / 10.0;
        }
        assert!((map - map_b).abs() <= 1e-12);
        for (k, &r) in ranks.iter().enumerate() {
            let b: f64 = d.rows().enumerate().map(|(p, row)| brute_cmc(row, pids[p], &gids, r)).sum::<f64>() / 10.0;
            assert!((c[k] - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn cmc_is_monotone_and_bounded(vals in prop::collection::vec(0.0f64..1.0, 24), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gids: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
        let pids: Vec<usize> = (0..3).map(|_| gids[rng.gen_range(0..8)]).collect();
        let d = t(&[3, 8], &vals);
        let c = cmc(&d, &pids, &gids, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(c[7], 1.0);
        let (map, ap) = mean_average_precision(&d, &pids, &gids).unwrap();
        prop_assert!((0.0..=1.0).contains(&map));
        for (p, row) in d.rows().enumerate() {
            // AP is 1 exactly when every relevant item precedes every irrelevant one
            let order = ranking(row);
            let rel: Vec<bool> = order.iter().map(|&g| gids[g] == pids[p]).collect();
            let separated = rel.windows(2).all(|w| w[0] || !w[1]);
            prop_assert_eq!(ap[p] == 1.0, separated);
        }
    }
}

#[test]
fn feature_kind_parses() {
    assert_eq!("fs".parse::<FeatureKind>().unwrap(), FeatureKind::Fs);
    assert_eq!("R".parse::<FeatureKind>().unwrap(), FeatureKind::R);
    assert_eq!("YN".parse::<FeatureKind>().unwrap(), FeatureKind::Yn);
    assert!("Z".parse::<FeatureKind>().is_err());
}

#[test]
fn separable_pairs_are_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut diffs = Vec::new();
    let mut same = Vec::new();
    for i in 0..60 {
        let pos = i % 2 == 0;
        let base = if pos { 0.1 } else { 0.7 };
        diffs.extend((0..3).map(|_| base + rng.gen_range(0.0..0.2)));
        same.push(pos);
    }
    let x = t(&[60, 3], &diffs);
    let m = PairMatcher::fit(&x, &same, &PairMatcherConfig::default()).unwrap();
    assert_eq!(m.accuracy(&x, &same), 1.0);
    let a = [0.3, 0.1, 0.9];
    let b = [0.6, 0.2, 0.4];
    assert_eq!(m.score(&a, &a), m.score(&b, &b));
    assert_eq!(m.score(&a, &a), m.bias);
    assert!(m.score(&a, &a) > m.score(&a, &b));
}

#[test]
fn single_class_pairs_are_rejected() {
    let x = t(&[2, 1], &[0.1, 0.2]);
    assert!(PairMatcher::fit(&x, &[true, true], &PairMatcherConfig::default()).is_err());
    assert!(sample_pairs(&[0, 1, 2], &[0, 0, 0], 1, 0).is_err());
}

#[test]
fn pairs_are_balanced_and_cross_view() {
    let ids = [0, 0, 1, 1, 2, 2];
    let views = [0, 1, 0, 1, 0, 1];
    let pairs = sample_pairs(&ids, &views, 3, 1).unwrap();
    let pos = pairs.iter().filter(|p| p.2).count();
    assert_eq!(pos * 2, pairs.len());
    for &(a, b, s) in &pairs {
        assert_eq!(s, ids[a] == ids[b]);
        if s {
            assert_ne!(views[a], views[b]);
        }
    }
}

fn one_hot_rows(labels: &[Vec<usize>], cards: &[usize]) -> Tensor<f64> {
    let width: usize = cards.iter().sum();
    let mut v = Vec::new();
    for l in labels {
        let mut row = vec![0.0; width];
        let mut off = 0;
        for (a, &c) in cards.iter().enumerate() {
            row[off + l[a]] = 1.0;
            off += c;
        }
        v.extend(row);
    }
    t(&[labels.len(), width], &v)
}

#[test]
fn attribute_probe_on_oracle_features_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cards = [4, 3, 2];
    let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<usize>> {
        (0..n).map(|_| cards.iter().map(|&c| rng.gen_range(0..c)).collect()).collect()
    };
    let (ltr, lte) = (mk(&mut rng, 80), mk(&mut rng, 40));
    let r = attribute_probe(
        &one_hot_rows(&ltr, &cards),
        &ltr,
        &one_hot_rows(&lte, &cards),
        &lte,
        &["a", "b", "c"],
        &ProbeConfig::default(),
    )
    .unwrap();
    assert_eq!(r.results.len(), 3);
    for a in &r.results {
        assert_eq!(a.accuracy, 1.0, "{}", a.name);
    }
}

#[test]
fn attribute_probe_on_noise_is_near_majority() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // skewed binary attribute: majority rate about 0.75
    let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<usize>> { (0..n).map(|_| vec![(rng.gen_range(0..4) == 0) as usize]).collect() };
    let (ltr, lte) = (mk(&mut rng, 400), mk(&mut rng, 400));
    let r = attribute_probe(
        &random_tensor(&[400, 6], 20),
        &ltr,
        &random_tensor(&[400, 6], 21),
        &lte,
        &["skewed"],
        &ProbeConfig::default(),
    )
    .unwrap();
    let a = &r.results[0];
    assert!((a.accuracy - a.majority).abs() < 0.06, "{:?}", a);
}

#[test]
fn constant_attribute_is_skipped() {
    let labels = vec![vec![1, 0], vec![1, 1], vec![1, 0]];
    let r = attribute_probe(
        &random_tensor(&[3, 2], 1),
        &labels,
        &random_tensor(&[3, 2], 2),
        &labels,
        &["const", "var"],
        &ProbeConfig::default(),
    )
    .unwrap();
    assert_eq!(r.skipped, ["const"]);
    assert_eq!(r.results.len(), 1);
}
