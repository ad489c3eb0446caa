mod common;

use dhn_core::coordinator::{select_optimal, select_with_widening, CoordinatorError, SelectionProblem};
use rand::Rng;

#[test]
fn branch_and_bound_matches_enumeration() {
    let graphs = common::reduced_graphs();
    let mut r = common::rng(5);
    let (mut feasible, mut total) = (0, 0);
    for trial in 0..100 {
        let base = &graphs[trial % graphs.len()];
        let reduced = common::scaled_reduced(base, [0.0, 1e-3, 1e-2, 1.0][r.gen_range(0..4)]);
        let n = reduced.edges.iter().filter(|e| matches!(e.kind, dhn_core::partition::ReducedKind::Subsystem(_))).count();
        let p = SelectionProblem { reduced: &reduced, tables: common::random_tables(&mut r, n, 10_000), epsilon_pa: 0.1 };
        let fast = select_optimal(&p);
        let slow = common::brute_force(&p);
        total += 1;
        match (fast, slow) {
            (Ok(sel), Some((cost, choice))) => {
                feasible += 1;
                assert_eq!(sel.total_cost_kg, cost, "trial {trial}");
                assert_eq!(sel.choice, choice, "trial {trial}");
                let chosen: Vec<_> =
                    sel.choice.iter().enumerate().map(|(j, &i)| p.tables[j].iter().find(|c| c.index == i).copied().unwrap()).collect();
                common::verify_balance(&reduced, &chosen, &sel, p.epsilon_pa).unwrap();
            }
            (Err(CoordinatorError::NoFeasibleSelection), None) => {}
            (a, b) => panic!("trial {trial}: {a:?} vs {b:?}"),
        }
    }
    println!("{feasible} of {total} problems admit a selection");
    assert!(feasible >= 20);
}

#[test]
fn widening_reaches_a_selection_when_one_exists_at_the_cap() {
    let graphs = common::reduced_graphs();
    let reduced = common::scaled_reduced(&graphs[3], 0.0);
    let mut r = common::rng(9);
    let tables = common::random_tables(&mut r, 5, 100);
    let heads: Vec<f64> = tables.iter().flatten().map(|c| c.head_pa).collect();
    let spread = heads.iter().cloned().fold(0.0f64, f64::max);
    let p = SelectionProblem { reduced: &reduced, tables, epsilon_pa: spread / 64.0 };
    let sel = select_with_widening(&p, 64.0).unwrap();
    assert!(sel.epsilon_pa <= spread + 1e-12);
}
