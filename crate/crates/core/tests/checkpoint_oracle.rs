//! Planner optimality against independent oracles: a bottom-up DP over the
//! same game, an exhaustive game-state search with no structural
//! assumptions, and the classic binomial bound for solution-only units.

mod common;

use adjoint_ts::checkpoint::{plan_schedule, validate_schedule, CheckpointMode};
use common::{dp_oracle_recomputations, game_oracle_recomputations};

#[test]
fn planner_matches_dp_oracle_full_grid() {
    for mode in [
        CheckpointMode::SolutionOnly,
        CheckpointMode::SolutionWithStages,
    ] {
        for n in 1..=30 {
            for cap in 1..=6 {
                let plan = plan_schedule(n, cap, mode).unwrap();
                let oracle = dp_oracle_recomputations(n, cap, mode);
                assert_eq!(
                    plan.recomputations, oracle,
                    "n={n} cap={cap} {mode:?}: planner {} oracle {oracle}",
                    plan.recomputations
                );
            }
        }
    }
}

#[test]
fn planner_matches_exhaustive_game_search() {
    // the game search makes no nesting or stack-order assumptions; keep the
    // grid small because its state space is combinatorial
    for mode in [
        CheckpointMode::SolutionOnly,
        CheckpointMode::SolutionWithStages,
    ] {
        for n in 1..=13 {
            for cap in 1..=4 {
                let plan = plan_schedule(n, cap, mode).unwrap();
                let oracle = game_oracle_recomputations(n, cap, mode);
                assert_eq!(
                    plan.recomputations, oracle,
                    "n={n} cap={cap} {mode:?}: planner {} game-oracle {oracle}",
                    plan.recomputations
                );
            }
        }
    }
}

#[test]
fn schedules_validate_across_full_grid() {
    for mode in [
        CheckpointMode::SolutionOnly,
        CheckpointMode::SolutionWithStages,
    ] {
        for n in 1..=30 {
            for cap in 1..=6 {
                let plan = plan_schedule(n, cap, mode).unwrap();
                validate_schedule(&plan)
                    .unwrap_or_else(|e| panic!("n={n} cap={cap} {mode:?}: {e}"));
            }
        }
    }
}

#[test]
fn figure_counts_and_curve_crossover() {
    // the two reference points
    assert_eq!(
        plan_schedule(10, 3, CheckpointMode::SolutionOnly)
            .unwrap()
            .recomputations,
        15
    );
    assert_eq!(
        plan_schedule(10, 3, CheckpointMode::SolutionWithStages)
            .unwrap()
            .recomputations,
        6
    );

    // 12 memory units split three ways: 12 solution-only checkpoints,
    // 4 solution+2-stage checkpoints, 3 solution+3-stage checkpoints
    let curve = |cap: usize, mode: CheckpointMode| -> Vec<usize> {
        (1..=60)
            .map(|n| plan_schedule(n, cap, mode).unwrap().recomputations)
            .collect()
    };
    let sol_only = curve(12, CheckpointMode::SolutionOnly);
    let two_stage = curve(4, CheckpointMode::SolutionWithStages);
    let three_stage = curve(3, CheckpointMode::SolutionWithStages);

    for c in [&sol_only, &two_stage, &three_stage] {
        for w in c.windows(2) {
            assert!(w[1] >= w[0], "recomputation curve must be nondecreasing");
        }
    }

    // stage checkpointing wins for small step counts, solution-only wins
    // once the step count outgrows the smaller checkpoint budget
    let idx = |n: usize| n - 1;
    assert!(two_stage[idx(5)] < sol_only[idx(5)]);
    assert!(three_stage[idx(5)] < sol_only[idx(5)]);
    assert!(two_stage[idx(60)] > sol_only[idx(60)]);
    assert!(three_stage[idx(60)] > sol_only[idx(60)]);
    let crossover_exists = |stage: &[usize]| {
        (1..=60).any(|n| stage[idx(n)] < sol_only[idx(n)])
            && (1..=60).any(|n| stage[idx(n)] > sol_only[idx(n)])
    };
    assert!(crossover_exists(&two_stage));
    assert!(crossover_exists(&three_stage));
}
