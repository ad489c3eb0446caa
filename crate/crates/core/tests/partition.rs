mod common;

use proptest::prelude::*;

use dhn_core::generator::{generate, GeneratorOptions};
use dhn_core::hydraulics::FlowSolver;
use dhn_core::network::NetworkGraph;
use dhn_core::partition::{export, fiedler_bipartition, fiedler_sign_split, ncut_value, recursive_partition, reduce_graph};

#[test]
fn five_way_partition_of_reference_layout() {
    for seed in [1, 7, 42, 1234] {
        let s = generate(&GeneratorOptions { seed, ..Default::default() });
        let g = NetworkGraph::from_spec(&s.network).unwrap();
        let p = recursive_partition(&g, 5).unwrap();
        assert_eq!(p.subsystems.len(), 5, "seed {seed}");
        let r = reduce_graph(&g, &p);
        let ex = export(&g, &p, &r);
        assert_eq!(ex.subsystems.len(), 5);
        for sub in &p.subsystems {
            let solver = FlowSolver::new(&sub.graph);
            let st = solver.given_supply(sub.graph.nominal_zeta(), 1.0).unwrap();
            assert!(st.edge_flows.iter().all(|m| *m >= 0.0));
        }
    }
}

fn ratio(w: &nalgebra::DMatrix<f64>) -> f64 {
    let (a, _) = fiedler_bipartition(w).unwrap();
    ncut_value(w, &a) / common::exhaustive_min_ncut(w)
}

#[test]
fn small_graphs_reach_the_exhaustive_cut() {
    for n in 2..=6 {
        for w in common::all_connected_graphs(n) {
            assert!(ratio(&w) <= 1.10, "{w}");
        }
    }
    for (name, w) in common::graph_families(12) {
        assert!(ratio(&w) <= 1.10, "{name}");
    }
}

#[test]
fn sign_split_is_a_valid_cut() {
    let mut r = common::rng(3);
    for t in 0..50 {
        let w = common::random_connected_graph(&mut r, 3 + t % 10, t % 5);
        let (a, b) = fiedler_sign_split(&w).unwrap();
        assert!(!a.is_empty() && !b.is_empty() && a.contains(&0));
        assert_eq!(a.len() + b.len(), w.nrows());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_covers_nodes_once(seed in 0u64..100_000, n in 2usize..=12, extra in 0usize..8) {
        let w = common::random_connected_graph(&mut common::rng(seed), n, extra);
        let (a, b) = fiedler_bipartition(&w).unwrap();
        prop_assert!(!a.is_empty() && !b.is_empty() && a.contains(&0));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(ratio(&w) >= 1.0 - 1e-12);
    }
}
