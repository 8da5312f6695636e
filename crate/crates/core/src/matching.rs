//! Bijections between two point sets of equal size.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::field::{Configuration, TreeOptions};
use crate::flow::{allocate_many, integrate_to_basin, FlowOptions, ForceMode, Target};
use crate::geometry::{SphereParams, SpherePoint};
use crate::process::{uniform_points, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMethod {
    Optimal,
    Online,
    Coupling,
    Greedy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingDiagnostics {
    /// Online rounds whose flow ended unassigned and fell back to the
    /// nearest remaining point.
    pub nearest_fallbacks: usize,
    /// Uniform samples drawn by the coupling method.
    pub samples: usize,
    /// Coupling samples with an unassigned allocation on either side.
    pub unassigned_samples: usize,
    /// Coupling only: `mean |X − ψ_A(X)| + mean |X − ψ_B(X)|` over the
    /// samples, an upper bound for the mean pair distance of the coupling.
    pub allocation_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    /// `a[i]` is matched to `b[permutation[i]]`.
    pub permutation: Vec<usize>,
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub method: MatchingMethod,
    pub seed: Option<u64>,
    pub diagnostics: MatchingDiagnostics,
}

impl MatchingResult {
    fn build(
        a: &[SpherePoint],
        b: &[SpherePoint],
        permutation: Vec<usize>,
        method: MatchingMethod,
        seed: Option<u64>,
        diagnostics: MatchingDiagnostics,
    ) -> Self {
        let distances: Vec<f64> = permutation
            .iter()
            .enumerate()
            .map(|(i, &j)| a[i].chordal_distance(&b[j]))
            .collect();
        let total: f64 = distances.iter().sum();
        Self {
            mean_distance: total / distances.len() as f64,
            max_distance: distances.iter().cloned().fold(0.0, f64::max),
            permutation,
            distances,
            method,
            seed,
            diagnostics,
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn total_distance(&self) -> f64 {
        self.distances.iter().sum()
    }

    /// Whether the permutation is a bijection and every stored distance
    /// matches a fresh computation to `1e-12`.
    pub fn is_consistent(&self, a: &[SpherePoint], b: &[SpherePoint]) -> bool {
        let n = self.permutation.len();
        if a.len() != n || b.len() != n || self.distances.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &j in &self.permutation {
            if j >= n || seen[j] {
                return false;
            }
            seen[j] = true;
        }
        self.permutation
            .iter()
            .enumerate()
            .all(|(i, &j)| (a[i].chordal_distance(&b[j]) - self.distances[i]).abs() <= 1e-12)
    }
}

fn check_sizes(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("point sets differ in size: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("point sets are empty".into()));
    }
    Ok(())
}

/// Minimum-cost assignment for the row-major `n × n` matrix `cost`, by
/// shortest augmenting paths with dual potentials in `O(n³)`. Returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    // 1-based arrays; column 0 is the virtual start of each augmenting path.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

fn chordal_matrix(a: &[SpherePoint], b: &[SpherePoint]) -> Vec<f64> {
    a.par_iter()
        .flat_map_iter(|p| b.iter().map(move |q| p.chordal_distance(q)))
        .collect()
}

/// The matching minimizing the total chordal distance.
pub fn optimal_match(a: &[SpherePoint], b: &[SpherePoint]) -> Result<MatchingResult> {
    check_sizes(a.len(), b.len())?;
    let perm = min_cost_assignment(&chordal_matrix(a, b), a.len());
    Ok(MatchingResult::build(a, b, perm, MatchingMethod::Optimal, None, MatchingDiagnostics::default()))
}

/// Repeatedly pairs the closest remaining `(a, b)`, ties broken by the
/// lowest `(i, j)`.
pub fn greedy_nearest_pair_match(a: &[SpherePoint], b: &[SpherePoint]) -> Result<MatchingResult> {
    check_sizes(a.len(), b.len())?;
    let n = a.len();
    let mut taken = vec![false; n];
    let nearest = |i: usize, taken: &[bool]| -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, q) in b.iter().enumerate() {
            if !taken[j] {
                let d = a[i].chordal_distance(q);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        best
    };
    // Each row keeps its nearest free column; entries go stale only by
    // growing, so the first valid pop is the global minimum.
    let mut heap: BinaryHeap<Reverse<(OrdF64, usize, usize)>> = (0..n)
        .map(|i| {
            let (d, j) = nearest(i, &taken);
            Reverse((OrdF64(d), i, j))
        })
        .collect();
    let mut perm = vec![usize::MAX; n];
    while let Some(Reverse((_, i, j))) = heap.pop() {
        if taken[j] {
            let (d, j) = nearest(i, &taken);
            heap.push(Reverse((OrdF64(d), i, j)));
            continue;
        }
        taken[j] = true;
        perm[i] = j;
    }
    Ok(MatchingResult::build(a, b, perm, MatchingMethod::Greedy, None, MatchingDiagnostics::default()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn residual_configuration(params: &SphereParams, pts: Vec<SpherePoint>, force: ForceMode) -> Result<Configuration> {
    let cfg = Configuration::on_sphere(*params, pts)?;
    Ok(match force {
        ForceMode::Direct => cfg,
        ForceMode::Tree { .. } => cfg.with_tree(TreeOptions::default()),
    })
}

/// Matches `a` in order: `a_k` goes to the owner of its basin under the
/// allocation to the points of `b` not yet matched, on the original sphere.
/// Residual cells have area `n/m`, so the flow time limit is scaled by `n/m`.
pub fn online_gravitational_match(a: &[SpherePoint], b: &[SpherePoint], opts: &FlowOptions) -> Result<MatchingResult> {
    check_sizes(a.len(), b.len())?;
    let n = a.len();
    let params = SphereParams::new(n)?;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut perm = vec![usize::MAX; n];
    let mut diag = MatchingDiagnostics::default();
    for (k, x) in a.iter().enumerate() {
        let m = remaining.len();
        let pick = if m == 1 {
            0
        } else {
            let pts = remaining.iter().map(|&j| b[j]).collect();
            let cfg = residual_configuration(&params, pts, opts.force)?;
            let scaled = FlowOptions {
                max_flow_time: opts.max_flow_time * n as f64 / m as f64,
                ..*opts
            };
            match integrate_to_basin(x, &cfg, &scaled)?.target {
                Target::Source(i) => i,
                Target::Unassigned => {
                    diag.nearest_fallbacks += 1;
                    cfg.nearest_source(x.coords()).0
                }
            }
        };
        perm[k] = remaining.remove(pick);
    }
    Ok(MatchingResult::build(a, b, perm, MatchingMethod::Online, None, diag))
}

/// Samples uniform points `X`, counts how often `(ψ_A(X), ψ_B(X)) = (i, j)`,
/// and returns a maximum-weight perfect matching of the counts.
pub fn coupling_match(
    a: &[SpherePoint],
    b: &[SpherePoint],
    num_samples: usize,
    seed: Seed,
    opts: &FlowOptions,
) -> Result<MatchingResult> {
    check_sizes(a.len(), b.len())?;
    let n = a.len();
    if num_samples < 10 * n * n {
        return Err(Error::InvalidArgument(format!(
            "coupling needs at least 10·n² = {} samples, got {num_samples}",
            10 * n * n
        )));
    }
    let params = SphereParams::new(n)?;
    let cfg_a = residual_configuration(&params, a.to_vec(), opts.force)?;
    let cfg_b = residual_configuration(&params, b.to_vec(), opts.force)?;
    let xs = uniform_points(&params, num_samples, seed);
    let oa = allocate_many(&xs, &cfg_a, opts);
    let ob = allocate_many(&xs, &cfg_b, opts);
    let mut weights = vec![0.0; n * n];
    let mut diag = MatchingDiagnostics {
        samples: num_samples,
        ..MatchingDiagnostics::default()
    };
    let (mut sum_a, mut sum_b, mut used) = (0.0, 0.0, 0usize);
    for ((x, ra), rb) in xs.iter().zip(oa).zip(ob) {
        match (ra?.target, rb?.target) {
            (Target::Source(i), Target::Source(j)) => {
                weights[i * n + j] += 1.0;
                sum_a += x.chordal_distance(&a[i]);
                sum_b += x.chordal_distance(&b[j]);
                used += 1;
            }
            _ => diag.unassigned_samples += 1,
        }
    }
    check_rows(&weights, n)?;
    diag.allocation_bound = (used > 0).then(|| (sum_a + sum_b) / used as f64);
    let cost: Vec<f64> = weights.iter().map(|w| -w).collect();
    let perm = min_cost_assignment(&cost, n);
    Ok(MatchingResult::build(a, b, perm, MatchingMethod::Coupling, Some(seed.0), diag))
}

fn check_rows(weights: &[f64], n: usize) -> Result<()> {
    match (0..n).find(|&i| weights[i * n..(i + 1) * n].iter().all(|&w| w == 0.0)) {
        Some(row) => Err(Error::DegenerateWeights { row }),
        None => Ok(()),
    }
}

/// Optimal mean Euclidean matching distance between two sets of points in
/// the plane.
pub fn planar_optimal_mean(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Result<f64> {
    check_sizes(a.len(), b.len())?;
    let n = a.len();
    let cost: Vec<f64> = a
        .par_iter()
        .flat_map_iter(|p| b.iter().map(move |q| (p - q).norm()))
        .collect();
    let perm = min_cost_assignment(&cost, n);
    Ok(perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}
