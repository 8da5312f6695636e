//! Integration of the gradient flow `dY/dt = F(Y)` into the sources.

mod raster;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Configuration, Patch, PatchAtlas};
use crate::geometry::{SphereParams, SpherePoint};

pub use raster::{basin_raster, golden_angle_color, BasinRaster, RasterSidecar};

/// Default opening angle for tree-mode flows. With order-16 expansions the
/// force error at this angle is about 2e-5 relative at n = 4096.
pub const FLOW_THETA: f64 = 0.5;

/// How the force is evaluated inside the integrator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ForceMode {
    /// Exact summation over all sources.
    #[default]
    Direct,
    /// Hierarchical summation through cached local expansions. Requires a
    /// built tree.
    Tree { theta: f64 },
}

impl ForceMode {
    pub fn tree() -> Self {
        ForceMode::Tree { theta: FLOW_THETA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowOptions {
    /// Capture radius `δ_c` (length).
    pub capture_radius: f64,
    /// Trajectories still free at this time are unassigned.
    pub max_flow_time: f64,
    pub initial_step: f64,
    /// Per-step error tolerance as a multiple of `r_n`.
    pub error_tolerance: f64,
    /// Limit on attempted steps.
    pub max_steps: u64,
    /// Upper bound on the step in time.
    pub max_step: f64,
    pub force: ForceMode,
    /// Record steps along which the potential increases.
    pub check_energy: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            capture_radius: 1e-3,
            max_flow_time: 10.0,
            initial_step: 1e-3,
            error_tolerance: 1e-7,
            max_steps: 10_000_000,
            max_step: 0.1,
            force: ForceMode::Direct,
            check_energy: false,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self, params: &SphereParams) -> Result<()> {
        let positive = [
            ("capture_radius", self.capture_radius),
            ("max_flow_time", self.max_flow_time),
            ("initial_step", self.initial_step),
            ("error_tolerance", self.error_tolerance),
            ("max_step", self.max_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        if self.capture_radius >= params.radius() / 10.0 {
            return Err(Error::InvalidArgument(format!(
                "capture radius {} must be below r_n/10 = {}",
                self.capture_radius,
                params.radius() / 10.0
            )));
        }
        if let ForceMode::Tree { theta } = self.force {
            if !(0.0..1.0).contains(&theta) {
                return Err(Error::InvalidArgument(format!("theta must lie in [0, 1), got {theta}")));
            }
        }
        Ok(())
    }
}

/// Basin owner of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Target {
    Source(usize),
    Unassigned,
}

impl From<Option<usize>> for Target {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Target::Unassigned, Target::Source)
    }
}

impl From<Target> for Option<usize> {
    fn from(t: Target) -> Self {
        match t {
            Target::Source(i) => Some(i),
            Target::Unassigned => None,
        }
    }
}

impl Target {
    pub fn index(&self) -> Option<usize> {
        (*self).into()
    }
}

/// Why a trajectory stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Captured,
    TimeLimit,
    StepLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub target: Target,
    /// Flow duration including the residual time inside the capture ball.
    pub tau: f64,
    pub arc_length: f64,
    /// Attempted steps, accepted or not.
    pub steps: u64,
    pub terminal_point: SpherePoint,
    pub stop: StopReason,
    /// Accepted steps along which the potential rose (only counted when
    /// energy checking is enabled).
    pub energy_violations: u32,
}

/// Force evaluation with per-trajectory caches.
pub(crate) struct Evaluator<'a> {
    cfg: &'a Configuration,
    theta: Option<f64>,
    atlas: Option<&'a PatchAtlas>,
    patches: Vec<Patch>,
    next: usize,
}

/// Number of local expansions a trajectory keeps.
const PATCH_CACHE: usize = 4;

impl<'a> Evaluator<'a> {
    pub(crate) fn new(cfg: &'a Configuration, mode: ForceMode) -> Result<Self> {
        let theta = match mode {
            ForceMode::Direct => None,
            ForceMode::Tree { theta } => {
                if cfg.tree().is_none() {
                    return Err(Error::TreeNotBuilt);
                }
                Some(theta)
            }
        };
        Ok(Self {
            cfg,
            theta,
            atlas: None,
            patches: Vec::new(),
            next: 0,
        })
    }

    /// Consults `atlas` before the trajectory's own patches. Ignored in
    /// direct mode.
    pub(crate) fn with_atlas(mut self, atlas: Option<&'a PatchAtlas>) -> Self {
        self.atlas = atlas;
        self
    }

    #[inline]
    pub(crate) fn force(&mut self, x: &Vector3<f64>) -> Vector3<f64> {
        let Some(theta) = self.theta else {
            return self.cfg.force_direct_raw(x);
        };
        if let Some(f) = self.atlas.and_then(|a| a.force(x)) {
            return f;
        }
        for p in &self.patches {
            if let Some(f) = p.force(x) {
                return f;
            }
        }
        let tree = self.cfg.tree().expect("checked at construction");
        let patch = tree.patch(x, theta);
        let f = patch.force(x).unwrap_or_else(|| tree.force(x, theta).0);
        if self.patches.len() < PATCH_CACHE {
            self.patches.push(patch);
        } else {
            self.patches[self.next] = patch;
            self.next = (self.next + 1) % PATCH_CACHE;
        }
        f
    }
}

/// Step control shared by the descent and ascent integrators.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stepper {
    pub radius: f64,
    pub tol: f64,
    /// `+1` follows `F`, `−1` follows `−F`.
    pub direction: f64,
}

pub(crate) struct StepResult {
    pub y: Vector3<f64>,
    pub err: f64,
    pub arc: f64,
}

impl Stepper {
    #[inline]
    fn project(&self, v: Vector3<f64>) -> Vector3<f64> {
        v * (self.radius / v.norm())
    }

    /// One classical RK4 step from `y` with known slope `k1`.
    #[inline]
    fn rk4(
        &self,
        eval: &mut Evaluator<'_>,
        y: &Vector3<f64>,
        k1: &Vector3<f64>,
        h: f64,
    ) -> (Vector3<f64>, f64) {
        let d = self.direction;
        let k2 = eval.force(&self.project(y + k1 * (0.5 * h))) * d;
        let k3 = eval.force(&self.project(y + k2 * (0.5 * h))) * d;
        let k4 = eval.force(&self.project(y + k3 * h)) * d;
        let y1 = self.project(y + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0));
        let arc = h / 6.0 * (k1.norm() + 2.0 * k2.norm() + 2.0 * k3.norm() + k4.norm());
        (y1, arc)
    }

    /// A full step against two half steps; returns the half-step result.
    /// `k1` is the signed slope at `y`.
    pub(crate) fn double_step(
        &self,
        eval: &mut Evaluator<'_>,
        y: &Vector3<f64>,
        k1: &Vector3<f64>,
        h: f64,
    ) -> StepResult {
        let (full, _) = self.rk4(eval, y, k1, h);
        let (mid, a1) = self.rk4(eval, y, k1, 0.5 * h);
        let kmid = eval.force(&mid) * self.direction;
        let (y2, a2) = self.rk4(eval, &mid, &kmid, 0.5 * h);
        StepResult {
            y: y2,
            err: (y2 - full).norm(),
            arc: a1 + a2,
        }
    }

    #[inline]
    pub(crate) fn next_step(&self, h: f64, err: f64, accepted: bool) -> f64 {
        let factor = if err > 0.0 {
            0.9 * (self.tol / err).powf(0.2)
        } else {
            4.0
        };
        if accepted {
            h * factor.clamp(0.2, 4.0)
        } else {
            h * factor.clamp(0.2, 0.9)
        }
    }
}

fn energy_increase(cfg: &Configuration, from: &Vector3<f64>, to: &Vector3<f64>) -> f64 {
    let mut du = 0.0;
    for z in cfg.sources() {
        let a = (z.coords() - to).norm_squared();
        let b = (z.coords() - from).norm_squared();
        du += 0.5 * (a / b).ln();
    }
    du
}

/// Follows the trajectory from `x` until it is captured by a source or a
/// limit is hit.
///
/// Capture is declared once the trajectory is within `δ_c` of a source `z`
/// and moving towards it; the remaining time `d²/2` of the near-source law
/// `d|Y − z|²/dt ≈ −2` and the remaining distance `d` are then added.
pub fn integrate_to_basin(x: &SpherePoint, cfg: &Configuration, opts: &FlowOptions) -> Result<FlowOutcome> {
    opts.validate(cfg.params())?;
    let mut eval = Evaluator::new(cfg, opts.force)?;
    integrate_with(x, cfg, opts, &mut eval)
}

fn integrate_with(
    x: &SpherePoint,
    cfg: &Configuration,
    opts: &FlowOptions,
    eval: &mut Evaluator<'_>,
) -> Result<FlowOutcome> {
    let params = cfg.params();
    let stepper = Stepper {
        radius: params.radius(),
        tol: opts.error_tolerance * params.radius(),
        direction: 1.0,
    };
    let dc = opts.capture_radius;
    let mut y = stepper.project(*x.coords());
    let outcome = |target, tau, arc, steps, y: Vector3<f64>, stop, ev| FlowOutcome {
        target,
        tau,
        arc_length: arc,
        steps,
        terminal_point: SpherePoint::from_coords_unchecked(y),
        stop,
        energy_violations: ev,
    };
    let (i0, d0) = cfg.nearest_source(&y);
    if d0 < dc {
        return Ok(outcome(Target::Source(i0), 0.5 * d0 * d0, d0, 0, y, StopReason::Captured, 0));
    }
    let mut f = eval.force(&y);
    let mut t = 0.0;
    let mut arc = 0.0;
    let mut h = opts.initial_step;
    let mut steps = 0u64;
    let mut violations = 0u32;
    loop {
        let (i, d) = cfg.nearest_source(&y);
        let z = cfg.sources()[i].coords();
        if d < dc && f.dot(&(z - y)) > 0.0 {
            return Ok(outcome(
                Target::Source(i),
                t + 0.5 * d * d,
                arc + d,
                steps,
                y,
                StopReason::Captured,
                violations,
            ));
        }
        if t >= opts.max_flow_time {
            return Ok(outcome(Target::Unassigned, t, arc, steps, y, StopReason::TimeLimit, violations));
        }
        if steps >= opts.max_steps {
            return Ok(outcome(Target::Unassigned, t, arc, steps, y, StopReason::StepLimit, violations));
        }
        steps += 1;
        let hs = h
            .min(0.25 * d * d)
            .min(opts.max_flow_time - t)
            .min(opts.max_step);
        let step = stepper.double_step(eval, &y, &f, hs);
        if !(step.err.is_finite() && step.y.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteState { steps });
        }
        let accepted = step.err <= stepper.tol;
        if accepted {
            if opts.check_energy && energy_increase(cfg, &y, &step.y) > 1e-9 {
                violations += 1;
            }
            t += hs;
            arc += step.arc;
            y = step.y;
            f = eval.force(&y);
        }
        h = stepper.next_step(hs, step.err, accepted);
    }
}

/// Integrates every start point, in parallel, preserving order.
pub fn allocate_many(xs: &[SpherePoint], cfg: &Configuration, opts: &FlowOptions) -> Vec<Result<FlowOutcome>> {
    if let Err(e) = opts.validate(cfg.params()) {
        let msg = e.to_string();
        return xs.iter().map(|_| Err(Error::InvalidArgument(msg.clone()))).collect();
    }
    let atlas = shared_atlas(cfg, opts.force, xs.len());
    xs.par_iter()
        .map(|x| {
            let mut eval = Evaluator::new(cfg, opts.force)?.with_atlas(atlas.as_ref());
            integrate_with(x, cfg, opts, &mut eval)
        })
        .collect()
}

/// A patch atlas for tree-mode batches with more trajectories than sources,
/// where building it once is cheaper than per-trajectory patches.
pub(crate) fn shared_atlas(cfg: &Configuration, mode: ForceMode, trajectories: usize) -> Option<PatchAtlas> {
    match (mode, cfg.tree()) {
        (ForceMode::Tree { theta }, Some(tree)) if trajectories >= cfg.len() => Some(tree.atlas(theta)),
        _ => None,
    }
}

/// [`allocate_many`] that fails on the first per-element error.
pub fn allocate_all(xs: &[SpherePoint], cfg: &Configuration, opts: &FlowOptions) -> Result<Vec<FlowOutcome>> {
    allocate_many(xs, cfg, opts).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::TreeOptions;
    use crate::process::{sample_uniform, uniform_points, Seed};

    #[test]
    fn single_source_captures_everything() {
        let c = sample_uniform(1, Seed(1)).unwrap();
        let p = *c.params();
        let opts = FlowOptions::default();
        for k in 0..20 {
            let x = p.point_at(0.7 * k as f64, 1.4 * (0.3 * k as f64).sin());
            let o = integrate_to_basin(&x, &c, &opts).unwrap();
            assert_eq!(o.target, Target::Source(0));
            let d = x.chordal_distance(&c.sources()[0]);
            assert!(o.arc_length >= d - 2.0 * opts.capture_radius);
            assert!(o.tau <= opts.max_flow_time + 0.5 * opts.capture_radius.powi(2));
            assert!(o.terminal_point.chordal_distance(&c.sources()[0]) < opts.capture_radius);
        }
    }

    #[test]
    fn antipode_start_does_not_crash() {
        let c = sample_uniform(1, Seed(4)).unwrap();
        let a = c.sources()[0].antipode();
        let o = integrate_to_basin(&a, &c, &FlowOptions::default()).unwrap();
        assert!(matches!(o.target, Target::Unassigned | Target::Source(0)));
    }

    #[test]
    fn start_inside_capture_ball() {
        let c = sample_uniform(5, Seed(2)).unwrap();
        let z = c.sources()[3];
        let p = *c.params();
        let x = z.geodesic_step(&nalgebra::Vector3::new(1.0, 0.0, 0.0), 5e-4, &p);
        let o = integrate_to_basin(&x, &c, &FlowOptions::default()).unwrap();
        assert_eq!(o.target, Target::Source(3));
        assert_eq!(o.steps, 0);
        let d = x.chordal_distance(&z);
        assert!((o.tau - 0.5 * d * d).abs() < 1e-15);
    }

    #[test]
    fn energy_decreases_along_flow() {
        let c = sample_uniform(20, Seed(6)).unwrap();
        let opts = FlowOptions {
            check_energy: true,
            ..FlowOptions::default()
        };
        for x in uniform_points(c.params(), 30, Seed(7)) {
            let o = integrate_to_basin(&x, &c, &opts).unwrap();
            assert_eq!(o.energy_violations, 0);
        }
    }

    #[test]
    fn order_is_preserved() {
        let c = sample_uniform(12, Seed(3)).unwrap();
        let xs = uniform_points(c.params(), 40, Seed(8));
        let opts = FlowOptions::default();
        let a = allocate_all(&xs, &c, &opts).unwrap();
        let mut rev = xs.clone();
        rev.reverse();
        let mut b = allocate_all(&rev, &c, &opts).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn tree_mode_agrees_with_direct() {
        let c = sample_uniform(600, Seed(10)).unwrap().with_tree(TreeOptions::default());
        let xs = uniform_points(c.params(), 60, Seed(11));
        let direct = allocate_all(&xs, &c, &FlowOptions::default()).unwrap();
        let tree = allocate_all(
            &xs,
            &c,
            &FlowOptions {
                force: ForceMode::tree(),
                ..FlowOptions::default()
            },
        )
        .unwrap();
        let same = direct.iter().zip(&tree).filter(|(a, b)| a.target == b.target).count();
        assert!(same >= 58, "{same} of 60 agree");
    }

    #[test]
    fn tree_mode_requires_tree() {
        let c = sample_uniform(5, Seed(1)).unwrap();
        let opts = FlowOptions {
            force: ForceMode::tree(),
            ..FlowOptions::default()
        };
        let x = c.params().point_at(0.0, 0.0);
        assert!(matches!(integrate_to_basin(&x, &c, &opts), Err(Error::TreeNotBuilt)));
    }

    #[test]
    fn options_are_validated() {
        let c = sample_uniform(1, Seed(1)).unwrap();
        let x = c.params().point_at(0.0, 0.0);
        let bad = FlowOptions {
            capture_radius: 0.1,
            ..FlowOptions::default()
        };
        assert!(integrate_to_basin(&x, &c, &bad).is_err());
    }
}
