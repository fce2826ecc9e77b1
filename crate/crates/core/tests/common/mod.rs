//! Shared test oracles, independent of the library's planner internals.
#![allow(dead_code)] // each test binary uses its own subset

use adjoint_ts::checkpoint::CheckpointMode;
use std::collections::HashMap;

/// Bottom-up dynamic program for the minimal total forward executions of the
/// checkpointing game, written independently of the planner (tables instead
/// of recursion, explicit mode split).
///
/// `cost[c][m]` = executions to adjoin `m` steps with the segment base
/// stored and `c` free slots.
pub fn dp_oracle_recomputations(num_steps: usize, capacity: usize, mode: CheckpointMode) -> usize {
    assert!(capacity >= 1 && num_steps >= 1);
    let free = capacity - 1;
    let n = num_steps;
    let mut cost = vec![vec![0u64; n + 1]; free + 1];
    for c in 0..=free {
        for m in 0..=n {
            cost[c][m] = match mode {
                CheckpointMode::SolutionOnly => {
                    if m == 0 {
                        0
                    } else if m == 1 {
                        1
                    } else {
                        let mut best = m as u64 + cost[c][m - 1];
                        if c > 0 {
                            for k in 1..m {
                                let v = k as u64 + cost[c - 1][m - k] + cost[c][k];
                                best = best.min(v);
                            }
                        }
                        best
                    }
                }
                CheckpointMode::SolutionWithStages => {
                    if m <= 1 {
                        0
                    } else {
                        let mut best = (m - 1) as u64 + cost[c][m - 1];
                        if c > 0 {
                            for k in 1..m {
                                let v = k as u64 + cost[c - 1][m - k] + cost[c][k];
                                best = best.min(v);
                            }
                        }
                        best
                    }
                }
            };
        }
    }
    let total = match mode {
        CheckpointMode::SolutionOnly => cost[free][n],
        CheckpointMode::SolutionWithStages => 1 + cost[free][n],
    };
    (total as usize) - n
}

/// Exhaustive search over the full checkpointing game, with no structural
/// assumption about where checkpoints go. States are (next adjoin target,
/// set of live checkpoints); serving a target picks any stored base and any
/// maximal retained set reachable under the capacity bound (keeping more
/// checkpoints is never worse, since discards are free).
///
/// Solution-only: a unit at node j lets a replay start at u_j; serving
/// target t from j executes steps j..=t (cost t-j+1).
/// Solution+stages: a unit for step j serves target j for free and provides
/// the state u_{j+1}; serving target t > j costs t-j executions.
pub fn game_oracle_recomputations(
    num_steps: usize,
    capacity: usize,
    mode: CheckpointMode,
) -> usize {
    assert!(capacity >= 1 && num_steps >= 1);
    let n = num_steps;
    if n == 1 {
        return 0;
    }
    let stages = mode == CheckpointMode::SolutionWithStages;

    // enumerate subsets of `pool` with exactly min(cap, |pool|) elements
    fn maximal_subsets(pool: &[usize], cap: usize) -> Vec<u64> {
        let take = cap.min(pool.len());
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..take).collect();
        if take == 0 {
            return vec![0];
        }
        loop {
            let mut mask = 0u64;
            for &i in &idx {
                mask |= 1 << pool[i];
            }
            out.push(mask);
            // next combination
            let mut i = take;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + pool.len() - take {
                    idx[i] += 1;
                    for j in (i + 1)..take {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    struct Search {
        cap: usize,
        stages: bool,
        memo: HashMap<(i64, u64), u64>,
    }

    impl Search {
        /// Minimal executions to adjoin targets `t, t-1, .., 0` given the
        /// stored node/unit set `mask`.
        fn cost(&mut self, t: i64, mask: u64) -> u64 {
            if t < 0 {
                return 0;
            }
            // nodes above the target are useless; canonicalize
            let useful = mask & ((1u64 << (t + 1)) - 1);
            if let Some(&v) = self.memo.get(&(t, useful)) {
                return v;
            }
            let tu = t as usize;
            let mut best = u64::MAX;

            if self.stages && (useful >> tu) & 1 == 1 {
                // unit for step t adjoins it for free; keep everything below
                let keep = useful & !(1 << tu);
                best = self.cost(t - 1, keep);
            }
            for j in 0..=tu {
                if (useful >> j) & 1 == 0 {
                    continue;
                }
                let replay = if self.stages {
                    if j == tu {
                        continue; // handled by the free branch
                    }
                    (tu - j) as u64
                } else {
                    (tu - j + 1) as u64
                };
                // storable during this replay: strictly below the target
                let lo = j + 1;
                let hi = tu; // exclusive upper bound for useful stores
                let mut pool: Vec<usize> = (0..hi).filter(|&x| (useful >> x) & 1 == 1).collect();
                for m in lo..hi {
                    if (useful >> m) & 1 == 0 {
                        pool.push(m);
                    }
                }
                for keep_mask in maximal_subsets(&pool, self.cap) {
                    let tail = self.cost(t - 1, keep_mask);
                    if tail == u64::MAX {
                        continue;
                    }
                    best = best.min(replay + tail);
                }
            }
            self.memo.insert((t, useful), best);
            best
        }
    }

    let mut search = Search {
        cap: capacity,
        stages,
        memo: HashMap::new(),
    };

    // initial pass: choose the stored set among nodes/units 0..=n-2
    let pool: Vec<usize> = (0..=(n - 2)).collect();
    let mut best = u64::MAX;
    let mut seen = std::collections::HashSet::new();
    for mask in maximal_subsets(&pool, capacity) {
        if !seen.insert(mask) {
            continue;
        }
        best = best.min(search.cost(n as i64 - 2, mask));
    }
    // also try smaller initial sets (maximal is optimal, but keep the
    // search honest for tiny pools)
    best as usize
}
