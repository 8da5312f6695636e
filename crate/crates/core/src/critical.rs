//! Local maxima of the potential.
//!
//! Candidates come from gradient ascent started at spherical Fibonacci
//! points. Once the force is small and the Hessian is negative definite the
//! ascent hands over to Newton's method on the planar force in the chart
//! centred at the current point. Survivors are classified by the Hessian
//! eigenvalues and checked by probing the potential in eight directions.

use nalgebra::{Matrix2, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{planar_force, planar_jacobian, Configuration, NeighborGrid, PatchAtlas};
use crate::flow::{shared_atlas, Evaluator, ForceMode, Stepper};
pub use crate::geometry::fibonacci_points;
use crate::geometry::{
    lift_to_sphere, project_to_plane, recenter_rotation, PlanarPoint, Rotation, SphereParams, SpherePoint,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaximaOptions {
    /// Ascent seeds per source.
    pub seeds_per_source: usize,
    /// Largest planar force accepted at a critical point.
    pub grad_tol: f64,
    /// Eigenvalues within this margin of zero are degenerate.
    pub eig_margin: f64,
    /// Critical points closer than this multiple of `r_n` are merged.
    pub dedup_radius: f64,
    /// Probe distance of the certificate, as a multiple of `r_n`.
    pub probe_radius: f64,
    pub newton_iterations: usize,
    /// Per-step error tolerance of the ascent, as a multiple of `r_n`.
    pub ascent_tolerance: f64,
    pub ascent_max_time: f64,
    pub ascent_max_step: f64,
    /// Force magnitude below which the Hessian is checked for a handover to
    /// Newton's method.
    pub switch_force: f64,
    pub force: ForceMode,
    /// Seeds are processed in batches of this size; ascents in a batch stop
    /// early once they come within `trap_radius` of a maximum found in an
    /// earlier batch. Zero disables trapping.
    pub batch_size: usize,
    pub trap_radius: f64,
    /// Ascent candidates closer than this to a known maximum are merged
    /// with it before polishing.
    pub merge_radius: f64,
}

impl Default for MaximaOptions {
    fn default() -> Self {
        Self {
            seeds_per_source: 20,
            grad_tol: 1e-8,
            eig_margin: 1e-6,
            dedup_radius: 1e-4,
            probe_radius: 1e-4,
            newton_iterations: 5,
            ascent_tolerance: 1e-3,
            ascent_max_time: 100.0,
            ascent_max_step: 1.0,
            switch_force: 0.02,
            force: ForceMode::Direct,
            batch_size: 0,
            trap_radius: 0.05,
            merge_radius: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticalKind {
    Maximum,
    Saddle,
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub location: SpherePoint,
    /// Planar force magnitude at the centre of the recentred chart.
    pub gradient_norm: f64,
    /// Eigenvalues of the planar Hessian of the potential, ascending.
    pub hessian_eigs: [f64; 2],
    pub kind: CriticalKind,
    /// Whether the eight-direction probe found the potential strictly
    /// smaller around the point. Only evaluated for maxima.
    pub probe_passed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaximaDiagnostics {
    pub seeds: usize,
    pub trapped: usize,
    pub ascent_unconverged: usize,
    pub newton_unconverged: usize,
    pub duplicates: usize,
    pub saddles: usize,
    pub rejected: usize,
    pub probe_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximaSearch {
    /// Distinct critical points in discovery order.
    pub points: Vec<CriticalPoint>,
    pub diagnostics: MaximaDiagnostics,
}

impl MaximaSearch {
    pub fn maxima(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.points.iter().filter(|p| p.kind == CriticalKind::Maximum)
    }

    pub fn count(&self) -> usize {
        self.maxima().count()
    }
}

/// Sources seen from the chart centred at `x`.
struct Recentred {
    rot: Rotation,
    images: Vec<PlanarPoint>,
    count: usize,
    params: SphereParams,
}

impl Recentred {
    fn new(x: &SpherePoint, cfg: &Configuration) -> Self {
        let rot = recenter_rotation(x);
        let params = *cfg.params();
        // A source on the pole of this chart has no image; its correction
        // term is still counted.
        let images = cfg
            .sources()
            .iter()
            .filter_map(|z| project_to_plane(&rot.apply(z), &params).ok())
            .collect();
        Self {
            rot,
            images,
            count: cfg.len(),
            params,
        }
    }

    fn force(&self, w: &PlanarPoint) -> Result<Vector2<f64>> {
        planar_force(w, &self.images, self.count, &self.params)
    }

    fn jacobian(&self, w: &PlanarPoint) -> Result<Matrix2<f64>> {
        planar_jacobian(w, &self.images, self.count, &self.params)
    }

    fn to_sphere(&self, w: &PlanarPoint) -> SpherePoint {
        self.rot.inverse().apply(&lift_to_sphere(w, &self.params))
    }
}

fn sorted_eigs(m: &Matrix2<f64>) -> [f64; 2] {
    let e = SymmetricEigen::new(*m).eigenvalues;
    if e[0] <= e[1] {
        [e[0], e[1]]
    } else {
        [e[1], e[0]]
    }
}

/// Whether the Hessian of the potential is negative definite at `x`.
fn hessian_negative(x: &SpherePoint, cfg: &Configuration) -> bool {
    let rc = Recentred::new(x, cfg);
    match rc.jacobian(&PlanarPoint::origin()) {
        Ok(j) => {
            let e = sorted_eigs(&-j);
            e[1] < 0.0
        }
        Err(_) => false,
    }
}

/// Newton's method for `f = 0` in the chart centred at `x`.
fn newton(x: &SpherePoint, cfg: &Configuration, iterations: usize) -> Result<SpherePoint> {
    let rc = Recentred::new(x, cfg);
    let mut w = PlanarPoint::origin();
    for _ in 0..iterations {
        let f = rc.force(&w)?;
        let j = rc.jacobian(&w)?;
        let Some(step) = j.lu().solve(&f) else {
            break;
        };
        w = PlanarPoint(w.0 - step);
        if step.norm() <= 1e-15 * (1.0 + w.norm()) {
            break;
        }
    }
    Ok(rc.to_sphere(&w))
}

fn classify_with(x: &SpherePoint, cfg: &Configuration, opts: &MaximaOptions) -> Result<CriticalPoint> {
    let rc = Recentred::new(x, cfg);
    let o = PlanarPoint::origin();
    let f = rc.force(&o)?;
    let norm = f.norm();
    if !(norm <= opts.grad_tol) {
        return Err(Error::NotCritical {
            norm,
            tol: opts.grad_tol,
        });
    }
    let eigs = sorted_eigs(&-rc.jacobian(&o)?);
    let m = opts.eig_margin;
    let kind = if eigs[1] < -m {
        CriticalKind::Maximum
    } else if eigs[0] < -m && eigs[1] > m {
        CriticalKind::Saddle
    } else {
        CriticalKind::Rejected
    };
    let probe_passed = kind == CriticalKind::Maximum && probe(x, cfg, opts.probe_radius * cfg.params().radius());
    Ok(CriticalPoint {
        location: *x,
        gradient_norm: norm,
        hessian_eigs: eigs,
        kind,
        probe_passed,
    })
}

/// Classifies a critical point by the eigenvalues of the planar Hessian of
/// the potential in the chart centred at `x`, with the default tolerances.
pub fn classify_critical_point(x: &SpherePoint, cfg: &Configuration) -> Result<CriticalPoint> {
    classify_with(x, cfg, &MaximaOptions::default())
}

/// `U(y) − U(x)`, summed as log-ratios to avoid cancellation.
fn potential_difference(cfg: &Configuration, x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
    cfg.sources()
        .iter()
        .map(|z| 0.5 * ((z.coords() - y).norm_squared() / (z.coords() - x).norm_squared()).ln())
        .sum()
}

/// True when the potential is strictly smaller at distance `s` from `x` in
/// eight evenly spread tangent directions.
pub fn probe(x: &SpherePoint, cfg: &Configuration, s: f64) -> bool {
    let p = x.coords();
    let up = p.normalize();
    let helper = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - up * up.dot(&helper)).normalize();
    let e2 = up.cross(&e1);
    (0..8).all(|k| {
        let a = k as f64 * std::f64::consts::FRAC_PI_4;
        let dir = e1 * a.cos() + e2 * a.sin();
        let q = x.geodesic_step(&dir, s, cfg.params());
        potential_difference(cfg, p, q.coords()) < 0.0
    })
}

enum Ascent {
    Candidate(SpherePoint),
    Trapped,
    Unconverged,
}

fn ascend(
    x: &SpherePoint,
    cfg: &Configuration,
    opts: &MaximaOptions,
    switch_force: f64,
    trap: Option<&NeighborGrid>,
    atlas: Option<&PatchAtlas>,
) -> Result<Ascent> {
    let params = cfg.params();
    let stepper = Stepper {
        radius: params.radius(),
        tol: opts.ascent_tolerance * params.radius(),
        direction: -1.0,
    };
    let mut eval = Evaluator::new(cfg, opts.force)?.with_atlas(atlas);
    let mut y = *x.coords();
    let mut k = -eval.force(&y);
    let mut t = 0.0;
    let mut h: f64 = 1e-2;
    let mut last_check = f64::NEG_INFINITY;
    let mut attempts = 0u64;
    while t < opts.ascent_max_time && attempts < 1_000_000 {
        attempts += 1;
        if let Some(g) = trap {
            if let Some((_, d)) = g.nearest(&y) {
                if d < opts.trap_radius {
                    return Ok(Ascent::Trapped);
                }
            }
        }
        if k.norm() < switch_force && t - last_check >= 1.0 {
            last_check = t;
            let sp = SpherePoint::from_coords_unchecked(y);
            if hessian_negative(&sp, cfg) {
                return Ok(Ascent::Candidate(sp));
            }
        }
        let (_, d) = cfg.nearest_source(&y);
        // The ascent moves away from sources, so the clamp only guards the
        // first steps of seeds that start close to one.
        let hs = h.min(d * d).min(opts.ascent_max_step);
        let step = stepper.double_step(&mut eval, &y, &k, hs);
        if !(step.err.is_finite() && step.y.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteState { steps: attempts });
        }
        let accepted = step.err <= stepper.tol;
        if accepted {
            t += hs;
            y = step.y;
            k = -eval.force(&y);
        }
        h = stepper.next_step(hs, step.err, accepted);
    }
    Ok(Ascent::Unconverged)
}

/// Newton's method from an ascent candidate. When it does not reach a
/// critical point the ascent resumes with a tenfold smaller handover force,
/// up to `POLISH_ROUNDS` times.
const POLISH_ROUNDS: usize = 3;

fn polish(
    cand: SpherePoint,
    cfg: &Configuration,
    opts: &MaximaOptions,
    atlas: Option<&PatchAtlas>,
) -> Result<Option<CriticalPoint>> {
    let mut cand = cand;
    let mut switch = opts.switch_force;
    for round in 0..POLISH_ROUNDS {
        if let Ok(p) = newton(&cand, cfg, opts.newton_iterations) {
            match classify_with(&p, cfg, opts) {
                Ok(cp) => return Ok(Some(cp)),
                Err(Error::NotCritical { .. }) | Err(Error::SourceSingularity { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if round + 1 == POLISH_ROUNDS {
            break;
        }
        switch *= 0.1;
        match ascend(&cand, cfg, opts, switch, None, atlas)? {
            Ascent::Candidate(c) => cand = c,
            _ => break,
        }
    }
    Ok(None)
}

/// Searches for the local maxima of the potential of `cfg`.
///
/// Ascents run in parallel; candidates are then visited in seed order. A
/// candidate within `merge_radius` of a maximum already found is counted as
/// a duplicate without polishing.
pub fn find_local_maxima(cfg: &Configuration, opts: &MaximaOptions) -> Result<MaximaSearch> {
    let params = *cfg.params();
    let seeds = fibonacci_points(&params, opts.seeds_per_source.max(1) * cfg.len());
    let batch = if opts.batch_size == 0 { seeds.len() } else { opts.batch_size };
    let dedup = opts.dedup_radius * params.radius();
    let mut diag = MaximaDiagnostics {
        seeds: seeds.len(),
        ..MaximaDiagnostics::default()
    };
    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut maxima: Vec<Vector3<f64>> = Vec::new();
    let atlas = shared_atlas(cfg, opts.force, seeds.len());
    for chunk in seeds.chunks(batch) {
        let grid = (opts.batch_size > 0 && !maxima.is_empty()).then(|| NeighborGrid::build(&maxima, params.radius()));
        let ascents: Vec<Ascent> = chunk
            .par_iter()
            .map(|x| ascend(x, cfg, opts, opts.switch_force, grid.as_ref(), atlas.as_ref()))
            .collect::<Result<_>>()?;
        for a in ascents {
            let cand = match a {
                Ascent::Trapped => {
                    diag.trapped += 1;
                    continue;
                }
                Ascent::Unconverged => {
                    diag.ascent_unconverged += 1;
                    continue;
                }
                Ascent::Candidate(c) => c,
            };
            if maxima.iter().any(|m| (m - cand.coords()).norm() < opts.merge_radius) {
                diag.duplicates += 1;
                continue;
            }
            let Some(mut cp) = polish(cand, cfg, opts, atlas.as_ref())? else {
                diag.newton_unconverged += 1;
                continue;
            };
            if points.iter().any(|q| q.location.chordal_distance(&cp.location) < dedup) {
                diag.duplicates += 1;
                continue;
            }
            if cp.kind == CriticalKind::Maximum && !cp.probe_passed {
                cp.kind = CriticalKind::Rejected;
                diag.probe_failures += 1;
            }
            match cp.kind {
                CriticalKind::Saddle => diag.saddles += 1,
                CriticalKind::Rejected => diag.rejected += 1,
                CriticalKind::Maximum => maxima.push(*cp.location.coords()),
            }
            points.push(cp);
        }
    }
    Ok(MaximaSearch {
        points,
        diagnostics: diag,
    })
}
