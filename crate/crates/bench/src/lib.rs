//! Shared fixtures for the benchmarks.

use gravalloc::field::TreeOptions;
use gravalloc::process::{sample_uniform, uniform_points};
use gravalloc::{Configuration, Seed, SphereParams, SpherePoint};

pub const SEED: u64 = 0x5eed;

/// Uniform configuration of `n` sources, optionally with a force tree.
pub fn configuration(n: usize, tree: bool) -> Configuration {
    let cfg = sample_uniform(n, Seed(SEED).substream(n as u64)).expect("uniform sample");
    if tree {
        cfg.with_tree(TreeOptions::default())
    } else {
        cfg
    }
}

/// Uniform query points on the sphere of `cfg`.
pub fn queries(cfg: &Configuration, count: usize) -> Vec<SpherePoint> {
    points(cfg.params(), count, u64::MAX)
}

/// Uniform points drawn from their own substream.
pub fn points(params: &SphereParams, count: usize, stream: u64) -> Vec<SpherePoint> {
    uniform_points(params, count, Seed(SEED).substream(stream))
}

/// Row-major cost matrix of chordal distances between two point sets.
pub fn distance_matrix(a: &[SpherePoint], b: &[SpherePoint]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x.chordal_distance(y))).collect()
}
