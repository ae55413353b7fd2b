mod common;

use std::collections::BTreeSet;

use common::*;
use pgfedsplit::prototypes::{
    aggregate_global_prototypes, compute_local_prototypes, estimate_gaussian_stats, ClientUploads,
    LocalClassStats, PrototypeStore,
};
use pgfedsplit::tensor::{Activation, Mlp};
use proptest::prelude::*;
use rand::Rng;

fn stats_for(classes: &[usize], d: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<LocalClassStats> {
    classes
        .iter()
        .map(|&class| {
            let count = r.random_range(1..5);
            let embedding_sum: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
            let embedding_sq_sum = embedding_sum
                .iter()
                .map(|s: &f64| s * s / count as f64 + r.random_range(0.0..2.0))
                .collect();
            LocalClassStats { class, count, embedding_sum, embedding_sq_sum }
        })
        .collect()
}

#[test]
fn available_classes_are_the_union_of_participants() {
    // every assignment of class subsets to three clients over four classes
    let mut r = rng(1);
    for mask in 0u32..(1 << 12) {
        let owned: Vec<Vec<usize>> = (0..3)
            .map(|c| (0..4).filter(|l| mask >> (4 * c + l) & 1 == 1).collect())
            .collect();
        let stats: Vec<_> = owned.iter().map(|cl| stats_for(cl, 2, &mut r)).collect();
        let uploads: ClientUploads = stats.iter().enumerate().map(|(i, s)| (i, s.as_slice())).collect();
        let global = aggregate_global_prototypes(&uploads).unwrap();
        let got: BTreeSet<usize> = global.iter().map(|g| g.class).collect();
        let want: BTreeSet<usize> = owned.iter().flatten().copied().collect();
        assert_eq!(got, want, "mask {mask:#x}");
        let gauss = estimate_gaussian_stats(&uploads, &global).unwrap();
        assert_eq!(gauss.iter().map(|g| g.class).collect::<BTreeSet<_>>(), want);
    }
}

#[test]
fn pooled_variance_is_independent_of_how_samples_are_split() {
    for trial in 0..200 {
        let mut r = rng(1000 + trial);
        let theta = Mlp::random(&[3, 6, 4], Activation::Relu, &mut r).unwrap();
        let n = r.random_range(4..60);
        let samples = random_samples(&mut r, n, 3, 3);
        let cut = r.random_range(1..n);
        let a = compute_local_prototypes(&theta, &samples[..cut]).unwrap();
        let b = compute_local_prototypes(&theta, &samples[cut..]).unwrap();
        let m = compute_local_prototypes(&theta, &samples).unwrap();
        let split: ClientUploads = [(0, a.as_slice()), (1, b.as_slice())].into_iter().collect();
        let merged: ClientUploads = [(0, m.as_slice())].into_iter().collect();
        let gs = estimate_gaussian_stats(&split, &aggregate_global_prototypes(&split).unwrap()).unwrap();
        let gm = estimate_gaussian_stats(&merged, &aggregate_global_prototypes(&merged).unwrap()).unwrap();
        assert_eq!(gs.len(), gm.len());
        for (x, y) in gs.iter().zip(&gm) {
            assert_eq!(x.class, y.class);
            for (u, v) in x.sigma_diag.iter().zip(&y.sigma_diag) {
                assert!((u - v).abs() <= 1e-9, "trial {trial}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn aggregation_ignores_arrival_order() {
    let mut r = rng(2);
    let stats: Vec<_> = (0..5).map(|_| stats_for(&[0, 1, 2], 3, &mut r)).collect();
    let forward: ClientUploads = stats.iter().enumerate().map(|(i, s)| (i, s.as_slice())).collect();
    let backward: ClientUploads = stats.iter().enumerate().rev().map(|(i, s)| (i, s.as_slice())).collect();
    assert_eq!(
        aggregate_global_prototypes(&forward).unwrap(),
        aggregate_global_prototypes(&backward).unwrap()
    );
}

#[test]
fn snapshot_round_trip() {
    let mut r = rng(3);
    let stats: Vec<_> = (0..3).map(|_| stats_for(&[0, 2, 5], 4, &mut r)).collect();
    let uploads: ClientUploads = stats.iter().enumerate().map(|(i, s)| (i, s.as_slice())).collect();
    let global = aggregate_global_prototypes(&uploads).unwrap();
    let gauss = estimate_gaussian_stats(&uploads, &global).unwrap();
    let mut store = PrototypeStore::default();
    store.update(global, gauss);
    let text = store.export_snapshot();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(PrototypeStore::parse_snapshot(&text).unwrap(), store);
}

proptest! {
    #[test]
    fn snapshot_parser_never_panics(text in "[0-9,.\\-e\n ]{0,200}") {
        let _ = PrototypeStore::parse_snapshot(&text);
    }
}
