use std::collections::BTreeMap;

use feedlab_core::agents::{simulate, PopulationSpec};
use feedlab_core::analytics::adjusted_rand_index;
use feedlab_core::profiling::{build_profiles, cluster_profiles, ClusterOptions};
use feedlab_core::{Catalog, EngagementWeights, RecommenderParams};

// majority-archetype share, summed over clusters
fn purity(truth: &[usize], labels: &[usize]) -> f64 {
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&t, &l) in truth.iter().zip(labels) {
        *table.entry(l).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().max().unwrap()).sum();
    hits as f64 / truth.len() as f64
}

#[test]
fn purity_helper() {
    assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
    assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 5, 5]), 0.5);
}

#[test]
fn agent_groups_cluster_by_profile() {
    let catalog = Catalog::synthetic(727, 1);
    let seed = 2;
    let sim = simulate(
        &catalog,
        &PopulationSpec::default(),
        300_000,
        seed,
        &RecommenderParams::default(),
        &EngagementWeights::default(),
    )
    .unwrap();
    let profiles = build_profiles(&sim.log, &catalog, &EngagementWeights::default()).unwrap();
    let clusters = cluster_profiles(profiles.values(), &ClusterOptions { seed, ..Default::default() }).unwrap();

    let truth: Vec<usize> = sim.archetypes.iter().map(|(_, a)| *a as usize).collect();
    let labels: Vec<usize> = sim
        .archetypes
        .iter()
        .map(|(u, _)| clusters.labels[u].index().expect("every agent engages"))
        .collect();
    assert_eq!(clusters.k, 3, "silhouettes {:?}", clusters.silhouettes);
    assert!(purity(&truth, &labels) >= 0.9);
    assert!(adjusted_rand_index(&truth, &labels) >= 0.9);
}
