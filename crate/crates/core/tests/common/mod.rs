#![allow(dead_code)]

use std::thread;

use isgraph::eval::{run_pipeline, RunOutcome};
use isgraph::plans;

pub const SEEDS: u64 = 100;

/// Maps `f` over `items` on all available cores, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(4, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Nearest-rank percentile of `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Runs a bundled scenario with its seed replaced.
pub fn run_bundled(name: &str, seed: u64) -> RunOutcome {
    let (mut scenario, plan) = plans::bundled_scenario(name).unwrap();
    scenario.sim.seed = seed;
    run_pipeline(&scenario, &plan).unwrap()
}
