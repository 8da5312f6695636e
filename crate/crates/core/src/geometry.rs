//! Sphere coordinates, the rescaled stereographic chart and its conformal
//! bookkeeping.
//!
//! The sphere `S²_n` is centred at the origin with radius `r_n = sqrt(n/4π)`,
//! so its surface area is exactly `n`. The chart sends the sphere minus the
//! north pole `r_n·(0,0,1)` onto the horizontal plane, with the south pole
//! going to the origin and the equator to the circle of radius `√n`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x2, Unit, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this multiple of `r_n` to the north pole cannot be
/// projected.
pub const POLE_EXCLUSION: f64 = 1e-9;

/// Size parameters of the sphere of area `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereParams {
    n: usize,
    radius: f64,
}

impl SphereParams {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("sphere parameter n must be positive".into()));
        }
        Ok(Self {
            n,
            radius: (n as f64 / (4.0 * PI)).sqrt(),
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        self.radius
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.n as f64
    }

    #[inline]
    pub fn sqrt_n(&self) -> f64 {
        (self.n as f64).sqrt()
    }

    pub fn north_pole(&self) -> SpherePoint {
        SpherePoint(Vector3::new(0.0, 0.0, self.radius))
    }

    pub fn south_pole(&self) -> SpherePoint {
        SpherePoint(Vector3::new(0.0, 0.0, -self.radius))
    }

    /// Point at the given longitude and latitude (radians).
    pub fn point_at(&self, lon: f64, lat: f64) -> SpherePoint {
        let (sl, cl) = lat.sin_cos();
        let (so, co) = lon.sin_cos();
        SpherePoint(self.radius * Vector3::new(cl * co, cl * so, sl))
    }
}

/// A location on `S²_n`, stored in ambient coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpherePoint(pub(crate) Vector3<f64>);

impl SpherePoint {
    /// Radially rescales `v` onto the sphere. `v` must be non-zero.
    pub fn from_direction(v: Vector3<f64>, params: &SphereParams) -> Result<Self> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidArgument(format!("cannot place {v:?} on the sphere")));
        }
        Ok(Self(v * (params.radius / norm)))
    }

    /// Wraps coordinates that are already on the sphere.
    pub fn from_coords_unchecked(v: Vector3<f64>) -> Self {
        Self(v)
    }

    #[inline]
    pub fn coords(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    /// Euclidean distance in ambient space.
    #[inline]
    pub fn chordal_distance(&self, other: &SpherePoint) -> f64 {
        (self.0 - other.0).norm()
    }

    pub fn antipode(&self) -> SpherePoint {
        SpherePoint(-self.0)
    }

    /// Moves along the great circle leaving `self` in the tangent direction
    /// `dir` by arc length `s`.
    pub fn geodesic_step(&self, dir: &Vector3<f64>, s: f64, params: &SphereParams) -> SpherePoint {
        let r = params.radius;
        let up = self.0 / r;
        let t = dir - up * up.dot(dir);
        let tn = t.norm();
        if tn == 0.0 || s == 0.0 {
            return *self;
        }
        let angle = s / r;
        let (sa, ca) = angle.sin_cos();
        SpherePoint(r * (up * ca + (t / tn) * sa))
    }
}

/// A point of the chart plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanarPoint(pub Vector2<f64>);

impl PlanarPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self(Vector2::new(x, y))
    }

    pub fn origin() -> Self {
        Self(Vector2::zeros())
    }

    #[inline]
    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.0.x, self.0.y)
    }

    #[inline]
    pub fn from_complex(z: Complex64) -> Self {
        Self(Vector2::new(z.re, z.im))
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// A proper rotation of ambient space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self(*r.matrix())
    }

    /// Rotation from a (not necessarily normalised) quaternion `(w, x, y, z)`.
    /// A standard normal 4-vector gives a Haar-uniform rotation.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        Self(*uq.to_rotation_matrix().matrix())
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn apply(&self, x: &SpherePoint) -> SpherePoint {
        SpherePoint(self.0 * x.0)
    }

    #[inline]
    pub fn apply_vec(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn then(&self, next: &Rotation) -> Self {
        Self(next.0 * self.0)
    }

    /// `RᵀR = I` and `det R = 1`, both to `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let orth = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        orth <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }
}

#[inline]
fn pole_distance_sq(u: &Vector3<f64>) -> f64 {
    // |u - z0|² for a unit vector, written to avoid cancellation near z0.
    let h2 = u.x * u.x + u.y * u.y;
    let dz = if u.z <= 0.0 { 1.0 - u.z } else { h2 / (1.0 + u.z) };
    h2 + dz * dz
}

/// Chart image of `x`: the rescaled stereographic projection from the north
/// pole, returning the two horizontal coordinates.
pub fn project_to_plane(x: &SpherePoint, p: &SphereParams) -> Result<PlanarPoint> {
    let r = p.radius;
    let u = x.0 / r;
    let h2 = u.x * u.x + u.y * u.y;
    // 1 - u_z, accurate on both hemispheres
    let denom = if u.z <= 0.0 { 1.0 - u.z } else { h2 / (1.0 + u.z) };
    if (h2 + denom * denom).sqrt() < POLE_EXCLUSION || denom == 0.0 {
        return Err(Error::PoleSingularity);
    }
    let s = p.sqrt_n() / denom;
    Ok(PlanarPoint::new(u.x * s, u.y * s))
}

/// Inverse chart map; total on the plane.
pub fn lift_to_sphere(w: &PlanarPoint, p: &SphereParams) -> SpherePoint {
    let q = w.0 / p.sqrt_n();
    let q2 = q.norm_squared();
    let s = q2 + 1.0;
    let r = p.radius;
    if q2.is_infinite() {
        return p.north_pole();
    }
    SpherePoint(Vector3::new(
        r * 2.0 * q.x / s,
        r * 2.0 * q.y / s,
        r * (q2 - 1.0) / s,
    ))
}

/// Derivative of [`lift_to_sphere`] at `w`: maps planar vectors to tangent
/// vectors at the lifted point.
pub fn lift_jacobian(w: &PlanarPoint, p: &SphereParams) -> Matrix3x2<f64> {
    let q = w.0 / p.sqrt_n();
    let s = q.norm_squared() + 1.0;
    let s2 = s * s;
    let k = p.radius / p.sqrt_n();
    #[rustfmt::skip]
    let j = Matrix3x2::new(
        2.0 / s - 4.0 * q.x * q.x / s2, -4.0 * q.x * q.y / s2,
        -4.0 * q.x * q.y / s2,          2.0 / s - 4.0 * q.y * q.y / s2,
        4.0 * q.x / s2,                 4.0 * q.y / s2,
    );
    j * k
}

/// `|P_n(x) − P_n(y)|²` from the closed-form chordal identity
/// `4 n r_n² |x − y|² / (|x − r_n z0|² |y − r_n z0|²)`.
pub fn chordal_distance_sq_via_projection(
    x: &SpherePoint,
    y: &SpherePoint,
    p: &SphereParams,
) -> Result<f64> {
    let r = p.radius;
    let dx = pole_distance_sq(&(x.0 / r)) * r * r;
    let dy = pole_distance_sq(&(y.0 / r)) * r * r;
    let lim = (POLE_EXCLUSION * r).powi(2);
    if dx < lim || dy < lim {
        return Err(Error::PoleSingularity);
    }
    let xy = (x.0 - y.0).norm_squared();
    Ok(4.0 * p.area() * r * r * xy / (dx * dy))
}

/// Length-scaling factor of the chart at `x`, `2√n r_n / |x − r_n z0|²`.
pub fn conformal_factor(x: &SpherePoint, p: &SphereParams) -> f64 {
    let r = p.radius;
    2.0 * p.sqrt_n() * r / (pole_distance_sq(&(x.0 / r)) * r * r)
}

/// `ρ_n(w) = sqrt(1 + |w|²/n)`.
#[inline]
pub fn rho(w: &PlanarPoint, p: &SphereParams) -> f64 {
    (1.0 + w.0.norm_squared() / p.area()).sqrt()
}

/// Density of the pushforward of the uniform probability measure on the
/// sphere, `1 / (π n ρ_n(w)⁴)`.
#[inline]
pub fn mu_density(w: &PlanarPoint, p: &SphereParams) -> f64 {
    let r2 = 1.0 + w.0.norm_squared() / p.area();
    1.0 / (PI * p.area() * r2 * r2)
}

/// A proper rotation taking `x` to the south pole.
pub fn recenter_rotation(x: &SpherePoint) -> Rotation {
    let norm = x.0.norm();
    if norm == 0.0 {
        return Rotation::identity();
    }
    let a = x.0 / norm;
    let b = Vector3::new(0.0, 0.0, -1.0);
    let c = a.dot(&b);
    if c > 1.0 - 1e-15 {
        return Rotation::identity();
    }
    // Half-turn about the x-axis first when a is close to the north pole.
    let (pre, a) = if c < 0.0 {
        let flip = Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0));
        (flip, Vector3::new(a.x, -a.y, -a.z))
    } else {
        (Rotation::identity(), a)
    };
    let v = a.cross(&b);
    let c = a.dot(&b);
    let vx = v.cross_matrix();
    let m = Matrix3::identity() + vx + vx * vx * (1.0 / (1.0 + c));
    pre.then(&Rotation(m))
}

/// Component of `v` orthogonal to the radial direction at `x`.
#[inline]
pub fn tangential(x: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let n2 = x.norm_squared();
    v - x * (x.dot(v) / n2)
}

/// `count` points of the spherical Fibonacci lattice.
pub fn fibonacci_points(params: &SphereParams, count: usize) -> Vec<SpherePoint> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let lon = golden * i as f64;
            params.point_at(lon, z.asin())
        })
        .collect()
}
