//! Source configurations and evaluation of the potential and the force,
//! both on the sphere and in the chart.

pub mod grid;
pub mod tree;

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    lift_jacobian, project_to_plane, rho, tangential, PlanarPoint, Rotation, SphereParams,
    SpherePoint,
};
use crate::process::Seed;
use crate::stats::Estimate;

pub use grid::NeighborGrid;
pub use tree::{ForceTree, Patch, PatchAtlas, TreeOptions, DEFAULT_THETA};

/// Evaluation points closer than this multiple of `r_n` to a source are
/// rejected by the checked evaluators.
pub const SINGULARITY_RADIUS: f64 = 1e-12;

/// Relative tolerance on `|p| = r_n` when accepting source coordinates.
const RADIUS_TOLERANCE: f64 = 1e-9;

/// An ordered set of distinct sources on a fixed sphere, with cached chart
/// images and acceleration structures.
#[derive(Clone, Debug)]
pub struct Configuration {
    params: SphereParams,
    sources: Vec<SpherePoint>,
    planar: Vec<PlanarPoint>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    grid: NeighborGrid,
    tree: Option<ForceTree>,
}

impl Configuration {
    /// `n` sources on the sphere of area `n = points.len()`.
    pub fn new(points: Vec<SpherePoint>) -> Result<Self> {
        let params = SphereParams::new(points.len())
            .map_err(|_| Error::InvalidConfiguration("configuration needs at least one source".into()))?;
        Self::on_sphere(params, points)
    }

    /// Sources on a sphere whose size is set independently of their count.
    /// Used for residual sets, where fewer than `n` sources remain.
    pub fn on_sphere(params: SphereParams, points: Vec<SpherePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfiguration("configuration needs at least one source".into()));
        }
        let r = params.radius();
        let mut planar = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let c = p.coords();
            if !(c.x.is_finite() && c.y.is_finite() && c.z.is_finite()) {
                return Err(Error::InvalidConfiguration(format!("source {i} is not finite")));
            }
            if (c.norm() - r).abs() > RADIUS_TOLERANCE * r {
                return Err(Error::InvalidConfiguration(format!(
                    "source {i} has norm {} but the sphere radius is {r}",
                    c.norm()
                )));
            }
            let w = project_to_plane(p, &params).map_err(|_| {
                Error::InvalidConfiguration(format!("source {i} lies on the projection pole"))
            })?;
            planar.push(w);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (points[a].to_array(), points[b].to_array());
            pa[0].total_cmp(&pb[0])
                .then(pa[1].total_cmp(&pb[1]))
                .then(pa[2].total_cmp(&pb[2]))
        });
        for pair in order.windows(2) {
            if points[pair[0]].coords() == points[pair[1]].coords() {
                return Err(Error::InvalidConfiguration(format!(
                    "sources {} and {} coincide",
                    pair[0].min(pair[1]),
                    pair[0].max(pair[1])
                )));
            }
        }
        let coords: Vec<Vector3<f64>> = points.iter().map(|p| *p.coords()).collect();
        let grid = NeighborGrid::build(&coords, r);
        Ok(Self {
            params,
            xs: coords.iter().map(|c| c.x).collect(),
            ys: coords.iter().map(|c| c.y).collect(),
            zs: coords.iter().map(|c| c.z).collect(),
            sources: points,
            planar,
            grid,
            tree: None,
        })
    }

    /// Builds the hierarchical force summary with the given options.
    pub fn with_tree(mut self, options: TreeOptions) -> Self {
        self.tree = Some(ForceTree::build(&self.params, &self.sources, options));
        self
    }

    pub fn build_tree(&mut self, options: TreeOptions) {
        self.tree = Some(ForceTree::build(&self.params, &self.sources, options));
    }

    /// The configuration with every source moved by `rot`.
    pub fn rotated(&self, rot: &Rotation) -> Result<Self> {
        let pts = self.sources.iter().map(|p| rot.apply(p)).collect();
        let mut out = Self::on_sphere(self.params, pts)?;
        if let Some(t) = &self.tree {
            out.build_tree(t.options());
        }
        Ok(out)
    }

    /// Drops source `index`, keeping the sphere fixed.
    pub fn without(&self, index: usize) -> Result<Self> {
        let pts = self
            .sources
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, p)| *p)
            .collect();
        Self::on_sphere(self.params, pts)
    }

    #[inline]
    pub fn params(&self) -> &SphereParams {
        &self.params
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    #[inline]
    pub fn sources(&self) -> &[SpherePoint] {
        &self.sources
    }

    #[inline]
    pub fn planar_sources(&self) -> &[PlanarPoint] {
        &self.planar
    }

    #[inline]
    pub fn tree(&self) -> Option<&ForceTree> {
        self.tree.as_ref()
    }

    /// Index of, and chordal distance to, the closest source.
    #[inline]
    pub fn nearest_source(&self, x: &Vector3<f64>) -> (usize, f64) {
        self.grid.nearest(x).expect("configuration is never empty")
    }

    /// Untangential ambient sum `Σ (z − x)/|z − x|²` by direct summation,
    /// together with the squared distance to the closest source.
    #[inline]
    pub fn ambient_sum(&self, x: &Vector3<f64>) -> (Vector3<f64>, f64) {
        ambient_sum_slices(x, &self.xs, &self.ys, &self.zs)
    }

    /// Tangential force at `x` by direct summation, without the
    /// singularity check.
    #[inline]
    pub fn force_direct_raw(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let (a, _) = self.ambient_sum(x);
        tangential(x, &a)
    }

    fn check_singular(&self, x: &Vector3<f64>, min_d2: f64) -> Result<()> {
        let lim = SINGULARITY_RADIUS * self.params.radius();
        if min_d2 < lim * lim {
            let (index, _) = self.nearest_source(x);
            return Err(Error::SourceSingularity { index });
        }
        Ok(())
    }
}

/// Direct ambient sum over coordinate slices.
#[inline]
pub(crate) fn ambient_sum_slices(
    x: &Vector3<f64>,
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
) -> (Vector3<f64>, f64) {
    let (px, py, pz) = (x.x, x.y, x.z);
    let (mut ax, mut ay, mut az) = (0.0, 0.0, 0.0);
    let mut m = f64::INFINITY;
    for ((&zx, &zy), &zz) in xs.iter().zip(ys).zip(zs) {
        let dx = zx - px;
        let dy = zy - py;
        let dz = zz - pz;
        let r2 = dx * dx + dy * dy + dz * dz;
        let inv = 1.0 / r2;
        ax += dx * inv;
        ay += dy * inv;
        az += dz * inv;
        m = if r2 < m { r2 } else { m };
    }
    (Vector3::new(ax, ay, az), m)
}

/// The force as a tangent vector at its base point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub base: SpherePoint,
    pub v: Vector3<f64>,
}

impl TangentVector {
    #[inline]
    pub fn norm(&self) -> f64 {
        self.v.norm()
    }
}

/// `U(x) = Σ log|x − z|`.
pub fn potential(x: &SpherePoint, cfg: &Configuration) -> Result<f64> {
    let p = x.coords();
    let mut u = 0.0;
    let mut m = f64::INFINITY;
    for ((&zx, &zy), &zz) in cfg.xs.iter().zip(&cfg.ys).zip(&cfg.zs) {
        let r2 = (zx - p.x).powi(2) + (zy - p.y).powi(2) + (zz - p.z).powi(2);
        u += 0.5 * r2.ln();
        m = m.min(r2);
    }
    cfg.check_singular(p, m)?;
    Ok(u)
}

/// `F(x) = −∇_S U(x)`, the tangential part of `Σ (z − x)/|z − x|²`.
pub fn force_direct(x: &SpherePoint, cfg: &Configuration) -> Result<TangentVector> {
    let p = x.coords();
    let (a, m) = cfg.ambient_sum(p);
    cfg.check_singular(p, m)?;
    Ok(TangentVector {
        base: *x,
        v: tangential(p, &a),
    })
}

/// Force from the hierarchical summary with opening angle `theta`.
pub fn force_tree(x: &SpherePoint, cfg: &Configuration, theta: f64) -> Result<TangentVector> {
    let tree = cfg.tree.as_ref().ok_or(Error::TreeNotBuilt)?;
    let p = x.coords();
    let (v, m) = tree.force(p, theta);
    cfg.check_singular(p, m)?;
    Ok(TangentVector { base: *x, v })
}

/// Planar force at `w` of the configuration's chart images.
pub fn force_plane(w: &PlanarPoint, cfg: &Configuration) -> Result<Vector2<f64>> {
    planar_force(w, &cfg.planar, cfg.len(), &cfg.params)
}

/// Jacobian `D₁f` of the planar force at `w`.
pub fn force_jacobian_plane(w: &PlanarPoint, cfg: &Configuration) -> Result<Matrix2<f64>> {
    planar_jacobian(w, &cfg.planar, cfg.len(), &cfg.params)
}

fn planar_singular(w: &PlanarPoint, images: &[PlanarPoint], p: &SphereParams) -> Result<()> {
    let lim = SINGULARITY_RADIUS * p.radius();
    for (index, y) in images.iter().enumerate() {
        if (y.0 - w.0).norm_squared() < lim * lim {
            return Err(Error::SourceSingularity { index });
        }
    }
    Ok(())
}

/// `Σ (y − w)/|y − w|² + (count/n)·w/ρ_n(w)²` over the given images.
///
/// `count` may exceed `images.len()`: sources sitting on the projection pole
/// have no image but still contribute their share of the correction term.
pub fn planar_force(
    w: &PlanarPoint,
    images: &[PlanarPoint],
    count: usize,
    p: &SphereParams,
) -> Result<Vector2<f64>> {
    planar_singular(w, images, p)?;
    let mut s = Vector2::zeros();
    for y in images {
        let d = y.0 - w.0;
        s += d / d.norm_squared();
    }
    let r2 = 1.0 + w.0.norm_squared() / p.area();
    Ok(s + w.0 * (count as f64 / (p.area() * r2)))
}

/// `Σ D₁f(w, y)` with
/// `D₁f = (2dd^T − |d|²I)/|d|⁴ + (1/n)(I/ρ² − 2ww^T/(nρ⁴))`, `d = w − y`.
pub fn planar_jacobian(
    w: &PlanarPoint,
    images: &[PlanarPoint],
    count: usize,
    p: &SphereParams,
) -> Result<Matrix2<f64>> {
    planar_singular(w, images, p)?;
    let mut j = Matrix2::zeros();
    for y in images {
        let d = w.0 - y.0;
        let d2 = d.norm_squared();
        j += (2.0 * d * d.transpose() - Matrix2::identity() * d2) / (d2 * d2);
    }
    let n = p.area();
    let r2 = 1.0 + w.0.norm_squared() / n;
    let corr = Matrix2::identity() / r2 - w.0 * w.0.transpose() * (2.0 / (n * r2 * r2));
    Ok(j + corr * (count as f64 / n))
}

/// Converts a planar force at `w` to the spherical force at the lifted
/// point: `F = π ρ⁴ · D(P_n⁻¹)(w) · f`.
pub fn plane_to_sphere_force(w: &PlanarPoint, f: &Vector2<f64>, p: &SphereParams) -> Vector3<f64> {
    let r = rho(w, p);
    lift_jacobian(w, p) * f * (PI * r.powi(4))
}

/// Monte Carlo estimate of `E|F(x)|` over configurations drawn by `sampler`,
/// one independent substream per trial.
pub fn mean_force_magnitude<S>(
    sampler: S,
    x: &SpherePoint,
    trials: usize,
    seed: Seed,
) -> Result<Estimate>
where
    S: Fn(Seed) -> Result<Configuration> + Sync,
{
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let mags: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let cfg = sampler(seed.substream(i as u64))?;
            Ok(force_direct(x, &cfg)?.norm())
        })
        .collect::<Result<_>>()?;
    Estimate::from_samples(&mags)
}

/// Componentwise Monte Carlo mean of the planar force at the chart origin.
pub fn mean_planar_force_at_origin<S>(sampler: S, trials: usize, seed: Seed) -> Result<[Estimate; 2]>
where
    S: Fn(Seed) -> Result<Configuration> + Sync,
{
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let fs: Vec<Vector2<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let cfg = sampler(seed.substream(i as u64))?;
            force_plane(&PlanarPoint::origin(), &cfg)
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = fs.iter().map(|f| f.x).collect();
    let ys: Vec<f64> = fs.iter().map(|f| f.y).collect();
    Ok([Estimate::from_samples(&xs)?, Estimate::from_samples(&ys)?])
}
