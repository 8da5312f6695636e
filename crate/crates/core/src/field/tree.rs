//! Hierarchical force summation.
//!
//! Sources are indexed twice, once in the chart projecting from the north
//! pole and once in the chart projecting from the south pole. Each chart
//! holds an adaptive quadtree over the planar images with complex multipole
//! moments. A query uses the chart in which it lies in the lower hemisphere,
//! so the conformal factor stays bounded. Nodes passing the acceptance test
//! `radius < θ·distance` contribute through their multipole series in the
//! plane; all remaining sources are summed directly in ambient space.
//!
//! A [`Patch`] converts the far field around a point into a local power
//! series, which trajectories reuse while they stay inside its disc.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::{ambient_sum_slices, NeighborGrid};
use crate::geometry::{fibonacci_points, lift_jacobian, project_to_plane, tangential, PlanarPoint, SphereParams, SpherePoint};

/// Default opening angle.
pub const DEFAULT_THETA: f64 = 0.3;

/// Sources whose chart image exceeds this multiple of `√n` are summed
/// directly in that chart.
const EXCEPTIONAL_RADIUS: f64 = 1e3;

const MAX_DEPTH: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeOptions {
    /// Largest number of sources in a leaf.
    pub leaf_size: usize,
    /// Truncation order of the multipole and local series.
    pub order: usize,
    /// Nodes with fewer sources than this are never summarised.
    pub min_far_count: usize,
    /// Patch radius as a multiple of the local source spacing in the chart.
    pub patch_scale: f64,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            leaf_size: 16,
            order: 16,
            min_far_count: 4,
            patch_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    center: Complex64,
    radius: f64,
    scale: f64,
    count: u32,
    start: u32,
    end: u32,
    skip: u32,
    leaf: bool,
}

#[derive(Clone, Debug)]
struct Chart {
    /// `+1` for the identity frame, `−1` for the half-turn about the x-axis.
    sign: f64,
    nodes: Vec<Node>,
    moments: Vec<Complex64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    exc_x: Vec<f64>,
    exc_y: Vec<f64>,
    exc_z: Vec<f64>,
}

/// Two-chart quadtree over a configuration's sources.
#[derive(Clone, Debug)]
pub struct ForceTree {
    params: SphereParams,
    options: TreeOptions,
    charts: [Chart; 2],
    binom: Vec<f64>,
}

impl ForceTree {
    pub fn build(params: &SphereParams, sources: &[SpherePoint], options: TreeOptions) -> Self {
        let options = TreeOptions {
            leaf_size: options.leaf_size.max(1),
            order: options.order.max(1),
            min_far_count: options.min_far_count.max(1),
            patch_scale: options.patch_scale,
        };
        let p = options.order;
        let mut binom = vec![0.0; (p + 1) * (p + 1)];
        for k in 0..=p {
            for l in 0..=p {
                binom[k * (p + 1) + l] = binomial(k + l, l);
            }
        }
        let charts = [
            Chart::build(1.0, params, sources, &options),
            Chart::build(-1.0, params, sources, &options),
        ];
        Self {
            params: *params,
            options,
            charts,
            binom,
        }
    }

    pub fn options(&self) -> TreeOptions {
        self.options
    }

    #[inline]
    fn chart_for(&self, x: &Vector3<f64>) -> &Chart {
        if x.z <= 0.0 {
            &self.charts[0]
        } else {
            &self.charts[1]
        }
    }

    /// Tangential force at `x` and the squared distance to the closest
    /// directly summed source.
    pub fn force(&self, x: &Vector3<f64>, theta: f64) -> (Vector3<f64>, f64) {
        let chart = self.chart_for(x);
        let fx = chart.to_frame(x);
        let w = frame_image(&fx, &self.params);
        let wc = Complex64::new(w.x, w.y);
        let (mut near, mut min_d2) = ambient_sum_slices(x, &chart.exc_x, &chart.exc_y, &chart.exc_z);
        let mut far = Complex64::new(0.0, 0.0);
        let mut m_far = 0u32;
        let p1 = self.options.order + 1;
        let min_far = self.options.min_far_count as u32;
        let mut i = 0;
        while i < chart.nodes.len() {
            let node = &chart.nodes[i];
            let d = wc - node.center;
            let dn2 = d.norm_sqr();
            if node.count >= min_far && node.radius * node.radius < theta * theta * dn2 {
                let q = node.scale / d;
                let a = &chart.moments[i * p1..(i + 1) * p1];
                let mut s = a[p1 - 1];
                for k in (0..p1 - 1).rev() {
                    s = s * q + a[k];
                }
                far -= s / d;
                m_far += node.count;
                i = node.skip as usize;
            } else if node.leaf {
                let (s, e) = (node.start as usize, node.end as usize);
                let (a, m) = ambient_sum_slices(x, &chart.xs[s..e], &chart.ys[s..e], &chart.zs[s..e]);
                near += a;
                min_d2 = min_d2.min(m);
                i = node.skip as usize;
            } else {
                i += 1;
            }
        }
        let mut out = tangential(x, &near);
        if m_far > 0 {
            out += chart.frame_to_world(&far_force(&w, far, m_far as usize, &self.params));
        }
        (out, min_d2)
    }

    /// Local expansion of the far field about `x`.
    pub fn patch(&self, x: &Vector3<f64>, theta: f64) -> Patch {
        self.patch_with_scale(x, theta, self.options.patch_scale)
    }

    /// Patches centred on a Fibonacci lattice of `ATLAS_DENSITY · n` points,
    /// each of radius `ATLAS_SCALE` times the source spacing.
    pub fn atlas(&self, theta: f64) -> PatchAtlas {
        let count = (ATLAS_DENSITY * self.params.n() as f64).ceil() as usize;
        let centres = fibonacci_points(&self.params, count.max(1));
        let patches: Vec<Patch> = centres
            .par_iter()
            .map(|c| self.patch_with_scale(c.coords(), theta, ATLAS_SCALE))
            .collect();
        let coords: Vec<Vector3<f64>> = centres.iter().map(|c| *c.coords()).collect();
        PatchAtlas {
            grid: NeighborGrid::build(&coords, self.params.radius()),
            patches,
        }
    }

    fn patch_with_scale(&self, x: &Vector3<f64>, theta: f64, scale: f64) -> Patch {
        let chart = self.chart_for(x);
        let fx = chart.to_frame(x);
        let w = frame_image(&fx, &self.params);
        let w0 = Complex64::new(w.x, w.y);
        let rho2 = 1.0 + w.norm_squared() / self.params.area();
        let radius = scale * PI.sqrt() * rho2;
        let p = self.options.order;
        let p1 = p + 1;
        let min_far = self.options.min_far_count as u32;
        let mut beta = vec![Complex64::new(0.0, 0.0); p1];
        let mut g = vec![Complex64::new(0.0, 0.0); p1];
        let mut near_x = chart.exc_x.clone();
        let mut near_y = chart.exc_y.clone();
        let mut near_z = chart.exc_z.clone();
        let mut m_far = 0u32;
        let mut i = 0;
        while i < chart.nodes.len() {
            let node = &chart.nodes[i];
            let d = w0 - node.center;
            let reach = node.radius + radius;
            if node.count >= min_far && reach * reach < theta * theta * d.norm_sqr() {
                let u = 1.0 / d;
                let q = node.scale * u;
                let a = &chart.moments[i * p1..(i + 1) * p1];
                let mut qk = Complex64::new(1.0, 0.0);
                for k in 0..p1 {
                    g[k] = a[k] * qk;
                    qk *= q;
                }
                // β_l = −(−1)^l (R u)^l u Σ_k C(k+l, l) g_k
                let ru = -(radius * u);
                let mut pre = -u;
                for (l, b) in beta.iter_mut().enumerate() {
                    let mut s = Complex64::new(0.0, 0.0);
                    for (k, gk) in g.iter().enumerate() {
                        s += gk * self.binom[k * p1 + l];
                    }
                    *b += pre * s;
                    pre *= ru;
                }
                m_far += node.count;
                i = node.skip as usize;
            } else if node.leaf {
                let (s, e) = (node.start as usize, node.end as usize);
                near_x.extend_from_slice(&chart.xs[s..e]);
                near_y.extend_from_slice(&chart.ys[s..e]);
                near_z.extend_from_slice(&chart.zs[s..e]);
                i = node.skip as usize;
            } else {
                i += 1;
            }
        }
        Patch {
            params: self.params,
            sign: chart.sign,
            w0,
            radius,
            beta,
            m_far: m_far as usize,
            near_x,
            near_y,
            near_z,
        }
    }
}

/// Far-field force converted to the sphere in the chart frame.
#[inline]
fn far_force(w: &Vector2<f64>, s: Complex64, m_far: usize, params: &SphereParams) -> Vector3<f64> {
    let n = params.area();
    let rho2 = 1.0 + w.norm_squared() / n;
    let corr = m_far as f64 / (n * rho2);
    // (y − w)/|y − w|² is the conjugate of 1/(y − w).
    let f = Vector2::new(s.re + corr * w.x, -s.im + corr * w.y);
    let wp = PlanarPoint(*w);
    lift_jacobian(&wp, params) * f * (PI * rho2 * rho2)
}

#[inline]
fn frame_image(fx: &Vector3<f64>, params: &SphereParams) -> Vector2<f64> {
    match project_to_plane(&SpherePoint::from_coords_unchecked(*fx), params) {
        Ok(w) => w.0,
        // Unreachable for queries in the lower hemisphere of the frame.
        Err(_) => Vector2::new(f64::INFINITY, f64::INFINITY),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut b = 1.0;
    for i in 0..k {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b.round()
}

impl Chart {
    fn build(sign: f64, params: &SphereParams, sources: &[SpherePoint], opts: &TreeOptions) -> Self {
        let limit = EXCEPTIONAL_RADIUS * params.sqrt_n();
        let mut items: Vec<(Complex64, u32)> = Vec::with_capacity(sources.len());
        let mut chart = Chart {
            sign,
            nodes: Vec::new(),
            moments: Vec::new(),
            xs: Vec::new(),
            ys: Vec::new(),
            zs: Vec::new(),
            exc_x: Vec::new(),
            exc_y: Vec::new(),
            exc_z: Vec::new(),
        };
        for (i, s) in sources.iter().enumerate() {
            let c = s.coords();
            let w = frame_image(&chart.to_frame(c), params);
            if w.x.is_finite() && w.y.is_finite() && w.norm() <= limit {
                items.push((Complex64::new(w.x, w.y), i as u32));
            } else {
                chart.exc_x.push(c.x);
                chart.exc_y.push(c.y);
                chart.exc_z.push(c.z);
            }
        }
        if !items.is_empty() {
            let (mut lo, mut hi) = (items[0].0, items[0].0);
            for (w, _) in &items {
                lo = Complex64::new(lo.re.min(w.re), lo.im.min(w.im));
                hi = Complex64::new(hi.re.max(w.re), hi.im.max(w.im));
            }
            let center = (lo + hi) * 0.5;
            let half = 0.5 * (hi.re - lo.re).max(hi.im - lo.im);
            let len = items.len();
            chart.subdivide(&mut items, 0, len, center, half, 0, opts);
        }
        for (_, i) in &items {
            let c = sources[*i as usize].coords();
            chart.xs.push(c.x);
            chart.ys.push(c.y);
            chart.zs.push(c.z);
        }
        chart.compute_moments(&items, opts.order);
        chart
    }

    #[inline]
    fn to_frame(&self, v: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(v.x, self.sign * v.y, self.sign * v.z)
    }

    #[inline]
    fn frame_to_world(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_frame(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn subdivide(
        &mut self,
        items: &mut [(Complex64, u32)],
        start: usize,
        end: usize,
        center: Complex64,
        half: f64,
        depth: usize,
        opts: &TreeOptions,
    ) {
        let id = self.nodes.len();
        let count = end - start;
        let leaf = count <= opts.leaf_size || depth >= MAX_DEPTH || !(half > 0.0);
        self.nodes.push(Node {
            center,
            radius: 0.0,
            scale: 1.0,
            count: count as u32,
            start: start as u32,
            end: end as u32,
            skip: 0,
            leaf,
        });
        if !leaf {
            let quadrant = |w: &Complex64| -> u8 {
                (u8::from(w.re >= center.re)) | (u8::from(w.im >= center.im) << 1)
            };
            items[start..end].sort_by_key(|(w, i)| (quadrant(w), *i));
            let mut s = start;
            let h = 0.5 * half;
            for q in 0..4u8 {
                let mut e = s;
                while e < end && quadrant(&items[e].0) == q {
                    e += 1;
                }
                if e > s {
                    let c = center
                        + Complex64::new(if q & 1 == 1 { h } else { -h }, if q & 2 == 2 { h } else { -h });
                    self.subdivide(items, s, e, c, h, depth + 1, opts);
                }
                s = e;
            }
        }
        self.nodes[id].skip = self.nodes.len() as u32;
    }

    fn compute_moments(&mut self, items: &[(Complex64, u32)], order: usize) {
        let p1 = order + 1;
        self.moments = vec![Complex64::new(0.0, 0.0); self.nodes.len() * p1];
        for (id, node) in self.nodes.iter_mut().enumerate() {
            let members = &items[node.start as usize..node.end as usize];
            let mut c = Complex64::new(0.0, 0.0);
            for (w, _) in members {
                c += w;
            }
            c /= members.len() as f64;
            let r = members.iter().map(|(w, _)| (w - c).norm()).fold(0.0, f64::max);
            let scale = if r > 0.0 { r } else { 1.0 };
            let a = &mut self.moments[id * p1..(id + 1) * p1];
            for (w, _) in members {
                let t = (w - c) / scale;
                let mut tk = Complex64::new(1.0, 0.0);
                for ak in a.iter_mut() {
                    *ak += tk;
                    tk *= t;
                }
            }
            node.center = c;
            node.radius = r;
            node.scale = scale;
        }
    }
}

/// Far field around a point as a local power series, plus the sources that
/// must still be summed directly.
#[derive(Clone, Debug)]
pub struct Patch {
    params: SphereParams,
    sign: f64,
    w0: Complex64,
    radius: f64,
    beta: Vec<Complex64>,
    m_far: usize,
    near_x: Vec<f64>,
    near_y: Vec<f64>,
    near_z: Vec<f64>,
}

impl Patch {
    /// Number of sources summed directly for every evaluation.
    pub fn near_count(&self) -> usize {
        self.near_x.len()
    }

    /// Tangential force at `x`, or `None` when `x` lies outside the disc on
    /// which the series is valid.
    #[inline]
    pub fn force(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let fx = Vector3::new(x.x, self.sign * x.y, self.sign * x.z);
        if fx.z > 0.5 * self.params.radius() {
            return None;
        }
        let w = frame_image(&fx, &self.params);
        let t = (Complex64::new(w.x, w.y) - self.w0) / self.radius;
        if t.norm_sqr() > 1.0 {
            return None;
        }
        let (near, _) = ambient_sum_slices(x, &self.near_x, &self.near_y, &self.near_z);
        let mut out = tangential(x, &near);
        if self.m_far > 0 {
            let mut s = self.beta[self.beta.len() - 1];
            for b in self.beta.iter().rev().skip(1) {
                s = s * t + b;
            }
            let ff = far_force(&w, s, self.m_far, &self.params);
            out += Vector3::new(ff.x, self.sign * ff.y, self.sign * ff.z);
        }
        Some(out)
    }
}

/// Centre density of a [`PatchAtlas`], per source.
const ATLAS_DENSITY: f64 = 2.0;
/// Radius of atlas patches in units of the source spacing. The lattice
/// covering radius is about 0.4, so every point lies well inside the patch
/// of its nearest centre.
const ATLAS_SCALE: f64 = 1.0;

/// Fixed patches covering the whole sphere, shared read-only by many
/// trajectories.
#[derive(Clone, Debug)]
pub struct PatchAtlas {
    grid: NeighborGrid,
    patches: Vec<Patch>,
}

impl PatchAtlas {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Force from the patch of the nearest centre, when `x` lies inside it.
    #[inline]
    pub fn force(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let (i, _) = self.grid.nearest(x)?;
        self.patches[i].force(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{force_direct, force_tree, Configuration};
    use crate::process::{sample_uniform, Seed};

    fn rel(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn atlas_covers_sphere_and_matches_direct() {
        let c = sample_uniform(800, Seed(17)).unwrap().with_tree(TreeOptions::default());
        let atlas = c.tree().unwrap().atlas(DEFAULT_THETA);
        assert_eq!(atlas.len(), 1600);
        let p = *c.params();
        for k in 0..300 {
            let x = p.point_at(2.39996 * k as f64, (1.0 - (2.0 * k as f64 + 1.0) / 300.0).asin());
            let f = atlas.force(x.coords()).expect("inside a patch");
            let b = force_direct(&x, &c).unwrap();
            assert!(rel(&f, &b.v) <= 1e-6, "{k}");
        }
    }

    #[test]
    fn theta_zero_is_exact() {
        let c = sample_uniform(300, Seed(5)).unwrap().with_tree(TreeOptions::default());
        let p = *c.params();
        for k in 0..100 {
            let x = p.point_at(0.61 * k as f64, (0.017 * k as f64).sin() * 1.5);
            let a = force_tree(&x, &c, 0.0).unwrap();
            let b = force_direct(&x, &c).unwrap();
            assert!(rel(&a.v, &b.v) <= 1e-12);
        }
    }

    #[test]
    fn single_source_is_exact() {
        let c = sample_uniform(1, Seed(8)).unwrap().with_tree(TreeOptions::default());
        let x = c.params().point_at(0.4, 0.1);
        let a = force_tree(&x, &c, DEFAULT_THETA).unwrap();
        let b = force_direct(&x, &c).unwrap();
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn default_theta_accuracy() {
        let c = sample_uniform(2000, Seed(17)).unwrap().with_tree(TreeOptions::default());
        let p = *c.params();
        let mut worst: f64 = 0.0;
        for k in 0..300 {
            let x = p.point_at(2.399 * k as f64, (1.0 - 2.0 * (k as f64 + 0.5) / 300.0).asin());
            let b = force_direct(&x, &c).unwrap();
            if b.norm() < 0.1 {
                continue;
            }
            let a = force_tree(&x, &c, DEFAULT_THETA).unwrap();
            worst = worst.max(rel(&a.v, &b.v));
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn patch_matches_direct_inside_disc() {
        let c = sample_uniform(1500, Seed(23)).unwrap().with_tree(TreeOptions::default());
        let p = *c.params();
        let tree = c.tree().unwrap();
        for k in 0..40 {
            let x = p.point_at(0.9 * k as f64, 1.2 * ((k as f64) * 0.37).sin());
            let patch = tree.patch(x.coords(), DEFAULT_THETA);
            assert!(patch.near_count() < c.len());
            let dir = Vector3::new(0.3, -0.2, 0.5);
            let y = x.geodesic_step(&dir, 0.2, &p);
            if let Some(f) = patch.force(y.coords()) {
                let b = force_direct(&y, &c).unwrap();
                assert!(rel(&f, &b.v) < 1e-6, "k={k}");
            }
            let f0 = patch.force(x.coords()).unwrap();
            let b0 = force_direct(&x, &c).unwrap();
            assert!(rel(&f0, &b0.v) < 1e-6);
        }
    }

    #[test]
    fn tree_not_built_error() {
        let c: Configuration = sample_uniform(3, Seed(1)).unwrap();
        let x = c.params().point_at(0.0, 0.0);
        assert!(matches!(
            force_tree(&x, &c, 0.3),
            Err(crate::error::Error::TreeNotBuilt)
        ));
    }

    #[test]
    fn leaves_partition_sources() {
        let c = sample_uniform(500, Seed(2)).unwrap().with_tree(TreeOptions::default());
        let tree = c.tree().unwrap();
        for chart in &tree.charts {
            let mut covered = chart.exc_x.len();
            for node in chart.nodes.iter().filter(|n| n.leaf) {
                covered += (node.end - node.start) as usize;
            }
            assert_eq!(covered, 500);
            for (id, node) in chart.nodes.iter().enumerate() {
                assert!(node.skip as usize > id);
                assert!(node.radius.is_finite());
            }
        }
    }
}
