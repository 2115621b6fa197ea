mod support;

use proptest::collection::vec;
use proptest::prelude::*;

use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn frames_round_trip(f in frame()) {
        check_frame(f)?;
    }

    #[test]
    fn configs_round_trip(cfg in node_config()) {
        check_config(cfg)?;
    }

    #[test]
    fn queries_are_answered_in_arrival_order(sensors in vec(ident(), 1..40)) {
        check_fifo(sensors)?;
    }

    #[test]
    fn seeded_sources_repeat(case in seeded_case()) {
        check_seeded(case)?;
    }
}

proptest! {
    // 100 cases of 10 000 inserts each
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn window_matches_a_naive_queue(case in window_case()) {
        check_window(case)?;
    }
}
