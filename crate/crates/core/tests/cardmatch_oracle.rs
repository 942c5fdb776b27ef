mod common;

use common::{card_brute_force, card_verify, random_card_instance};
use pairdid::cardmatch::{cardinality_select, SolverOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn exact_solver_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sizes = Vec::new();
    for _ in 0..60 {
        let (t, c) = random_card_instance(&mut rng);
        let sel = cardinality_select(&t, &c, 0.1, &SolverOptions::default());
        assert!(sel.proven_optimal);
        assert!(card_verify(&t, &c, &sel.treated, &sel.control, 0.1));
        let oracle = card_brute_force(&t, &c, 0.1);
        assert_eq!(sel.len(), oracle, "t={t:?} c={c:?}");
        sizes.push(oracle);
    }
    // The generator must produce a spread of answers for the check to mean anything.
    assert!(sizes.iter().any(|&s| s == 0));
    assert!(sizes.iter().any(|&s| s >= 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn returned_selection_is_always_balanced(
        t in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..14),
        c in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..14),
        delta in 0.05f64..0.5,
    ) {
        let sel = cardinality_select(&t, &c, delta, &SolverOptions::default());
        prop_assert!(card_verify(&t, &c, &sel.treated, &sel.control, delta));
    }

    #[test]
    fn heuristic_never_beats_exact(
        t in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 4..12),
        c in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 4..12),
    ) {
        let exact = cardinality_select(&t, &c, 0.1, &SolverOptions::default());
        let opts = SolverOptions { exact_limit: 2, heuristic_node_limit: 0, ..SolverOptions::default() };
        let heur = cardinality_select(&t, &c, 0.1, &opts);
        prop_assert!(heur.len() <= exact.len());
        prop_assert!(card_verify(&t, &c, &heur.treated, &heur.control, 0.1));
    }
}
