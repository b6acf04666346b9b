//! Property tests for the additive algebra, the disk formats and the
//! partition schemes, plus the statistical label-skew check.

use ghofl_core::datamodel::{
    add_bundles, ingest_embeddings, sum_bundles, write_embeddings_packed, BundleFields,
    EmbeddingFormat, LabeledEmbeddingSet, MomentBundle, SpaceTag,
};
use ghofl_core::partition::{make_partition, PartitionSpec, Scheme};
use ghofl_core::prng;
use ndarray::Array2;
use proptest::prelude::*;

fn arbitrary_bundle(seed: u64, dim: usize, classes: usize) -> MomentBundle {
    let fields = BundleFields {
        b: true,
        s: false,
        d: true,
        m34: false,
    };
    let mut b = MomentBundle::zero(dim, classes, fields, SpaceTag::Raw);
    for (i, c) in b.counts.iter_mut().enumerate() {
        *c = prng::word(seed, 900 + i as u64) % 100;
    }
    for (i, v) in b.first_moments.iter_mut().enumerate() {
        *v = prng::normal(seed, i as u64);
    }
    let g = b.global_second.as_mut().unwrap();
    let mut m = Array2::<f64>::zeros((dim, dim));
    for (i, v) in m.iter_mut().enumerate() {
        *v = prng::normal(seed ^ 0x11, i as u64);
    }
    *g = ghofl_core::linalg::symmetrize(&m);
    let d = b.class_sq_sums.as_mut().unwrap();
    for (i, v) in d.iter_mut().enumerate() {
        *v = prng::normal(seed ^ 0x22, i as u64).abs();
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bundle_addition_is_commutative_and_associative(
        seeds in prop::collection::vec(0u64..1_000_000, 2..=16),
        perm_seed in 0u64..1000,
    ) {
        let bundles: Vec<MomentBundle> =
            seeds.iter().map(|&s| arbitrary_bundle(s, 5, 3)).collect();
        let reference = sum_bundles(&bundles).unwrap();

        // left fold in a permuted order
        let mut order: Vec<usize> = (0..bundles.len()).collect();
        for i in (1..order.len()).rev() {
            let j = (prng::word(perm_seed, i as u64) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut acc = bundles[order[0]].clone();
        for &i in &order[1..] {
            acc = add_bundles(&acc, &bundles[i]).unwrap();
        }

        prop_assert_eq!(&acc.counts, &reference.counts);
        let scale = reference.first_moments.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        for (x, y) in acc.first_moments.iter().zip(reference.first_moments.iter()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
        let (ga, gb) = (acc.global_second.unwrap(), reference.global_second.unwrap());
        let scale = gb.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
        for (x, y) in ga.iter().zip(gb.iter()) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn packed_binary_round_trip_is_bit_exact(
        rows in prop::collection::vec(
            prop::collection::vec(-1e6f32..1e6f32, 4), 1..40),
        labels in prop::collection::vec(0u32..5, 40),
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().map(|&v| v as f64).collect();
        let features = Array2::from_shape_vec((n, 4), flat).unwrap();
        let set = LabeledEmbeddingSet::new(features, labels[..n].to_vec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ghe");
        write_embeddings_packed(&set, &path).unwrap();
        let back = ingest_embeddings(&path, EmbeddingFormat::PackedBinary).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn every_scheme_yields_a_partition(
        n in 20usize..200,
        clients in 1usize..10,
        seed in 0u64..500,
        alpha in 0.01f64..10.0,
    ) {
        let labels: Vec<u32> = (0..n).map(|i| (i % 4) as u32).collect();
        let features = Array2::from_shape_fn((n, 3), |(i, j)| (i + j) as f64);
        let set = LabeledEmbeddingSet::new(features, labels, 4).unwrap();
        for scheme in [
            Scheme::Iid,
            Scheme::Dirichlet { alpha },
            Scheme::ClassesPerClient { m: 2 },
        ] {
            let spec = PartitionSpec::new(clients, scheme, seed);
            let parts = make_partition(&set, &spec).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            // byte-level determinism
            let again = make_partition(&set, &spec).unwrap();
            prop_assert_eq!(parts, again);
        }
    }
}

/// Total-variation distance between a client's label histogram and the
/// global one.
fn tv_distance(client_hist: &[usize], global_hist: &[usize]) -> f64 {
    let cn: usize = client_hist.iter().sum();
    let gn: usize = global_hist.iter().sum();
    if cn == 0 {
        return 0.0;
    }
    0.5 * client_hist
        .iter()
        .zip(global_hist)
        .map(|(&c, &g)| (c as f64 / cn as f64 - g as f64 / gn as f64).abs())
        .sum::<f64>()
}

#[test]
fn smaller_alpha_means_stronger_label_skew() {
    // Expected TV distance from the global histogram decreases in alpha,
    // checked statistically over 20 seeds.
    let n = 4000;
    let c = 8;
    let clients = 10;
    let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
    let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
    let global = set
        .class_histogram()
        .iter()
        .map(|&v| v as usize)
        .collect::<Vec<_>>();

    let mean_tv = |alpha: f64| -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..20u64 {
            let spec = PartitionSpec::new(clients, Scheme::Dirichlet { alpha }, seed);
            let parts = make_partition(&set, &spec).unwrap();
            for part in &parts {
                let mut hist = vec![0usize; c];
                for &i in part {
                    hist[set.labels()[i] as usize] += 1;
                }
                total += tv_distance(&hist, &global);
                count += 1;
            }
        }
        total / count as f64
    };

    let strong = mean_tv(0.05);
    let moderate = mean_tv(0.5);
    let weak = mean_tv(5.0);
    assert!(
        strong > moderate && moderate > weak,
        "TV not monotone: {strong} vs {moderate} vs {weak}"
    );
}

#[test]
fn near_uniform_dirichlet_approximates_iid() {
    // alpha -> infinity: per-client class histograms track the global one.
    // Chi-square statistic per client stays below the 0.001 critical value
    // (df = 9) and each client's histogram sits within 5% of the global one
    // in total variation.
    let n = 10_000;
    let c = 10;
    let clients = 4;
    let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    let features = Array2::from_shape_fn((n, 2), |(i, j)| (i + j) as f64);
    let set = LabeledEmbeddingSet::new(features, labels, c).unwrap();
    let global = vec![n / c; c];
    let spec = PartitionSpec::new(clients, Scheme::Dirichlet { alpha: 1e6 }, 12);
    let parts = make_partition(&set, &spec).unwrap();
    for part in &parts {
        let mut hist = vec![0usize; c];
        for &i in part {
            hist[set.labels()[i] as usize] += 1;
        }
        let total: usize = hist.iter().sum();
        let mut chi2 = 0.0;
        for &h in &hist {
            let expected = total as f64 / c as f64;
            chi2 += (h as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < 27.88, "chi-square {chi2} too large for df=9");
        let tv = tv_distance(&hist, &global);
        assert!(tv <= 0.05, "client histogram {tv} from global in TV");
    }
}
