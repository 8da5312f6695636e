//! The Gaussian polynomial `p(z) = Σ ζ_k √C(n,k) z^k` and its roots.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Seed;
use crate::error::{Error, Result};
use crate::field::Configuration;
use crate::geometry::{lift_to_sphere, PlanarPoint, SphereParams};

/// Sweep limit of the simultaneous iteration.
pub const MAX_SWEEPS: usize = 500;

/// Leading coefficients with `|ζ_n|` at or below this are re-drawn.
const LEADING_FLOOR: f64 = 1e-12;

/// Coefficients are materialised when every log-magnitude lies within this
/// bound; otherwise evaluation stays in log space.
const LOG_RANGE: f64 = 600.0;

const FREEZE: f64 = 1e-14;
const RESIDUAL: f64 = 1e-10;

/// Independent standard complex Gaussians with `E|ζ|² = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGaussianDraw {
    pub zeta: Vec<Complex64>,
}

impl ComplexGaussianDraw {
    pub fn sample<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let zeta = (0..count)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re * s, im * s)
            })
            .collect();
        Self { zeta }
    }
}

/// A draw of the Gaussian polynomial, with `ln √C(n,k)` accumulated
/// incrementally so no factor is ever formed outside log space.
#[derive(Clone, Debug, PartialEq)]
pub struct KostlanPolynomial {
    pub zeta: Vec<Complex64>,
    log_factor: Vec<f64>,
}

impl KostlanPolynomial {
    pub fn from_zeta(zeta: Vec<Complex64>) -> Result<Self> {
        if zeta.len() < 2 {
            return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
        }
        let n = zeta.len() - 1;
        let mut log_factor = Vec::with_capacity(n + 1);
        log_factor.push(0.0);
        for k in 1..=n {
            let prev = log_factor[k - 1];
            log_factor.push(prev + 0.5 * (((n - k + 1) as f64).ln() - (k as f64).ln()));
        }
        Ok(Self { zeta, log_factor })
    }

    pub fn degree(&self) -> usize {
        self.zeta.len() - 1
    }

    /// `ln √C(n, k)`.
    pub fn log_factor(&self, k: usize) -> f64 {
        self.log_factor[k]
    }

    /// `√C(n, k)`; overflows to infinity for large `n`.
    pub fn factor(&self, k: usize) -> f64 {
        self.log_factor[k].exp()
    }

    /// `(ln |c_k|, c_k/|c_k|)` for every coefficient.
    pub fn log_coefficients(&self) -> Vec<(f64, Complex64)> {
        self.zeta
            .iter()
            .zip(&self.log_factor)
            .map(|(z, lf)| {
                let m = z.norm();
                let phase = if m > 0.0 { z / m } else { Complex64::new(1.0, 0.0) };
                (m.ln() + lf, phase)
            })
            .collect()
    }

    /// Materialised coefficients, when all are representable.
    pub fn coefficients(&self) -> Option<Vec<Complex64>> {
        let v: Vec<Complex64> = self
            .zeta
            .iter()
            .zip(&self.log_factor)
            .map(|(z, lf)| z * lf.exp())
            .collect();
        v.iter().all(|c| c.re.is_finite() && c.im.is_finite()).then_some(v)
    }
}

/// Draws the coefficients of a degree-`n` Gaussian polynomial.
pub fn kostlan_coefficients(n: usize, seed: Seed) -> Result<KostlanPolynomial> {
    if n == 0 {
        return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
    }
    let mut rng = seed.rng();
    loop {
        let draw = ComplexGaussianDraw::sample(n + 1, &mut rng);
        if draw.zeta[n].norm() > LEADING_FLOOR {
            return KostlanPolynomial::from_zeta(draw.zeta);
        }
    }
}

/// `a / b` without forming `|b|²`, which overflows for the large
/// coefficients of high-degree draws.
fn scaled_div(a: Complex64, b: Complex64) -> Complex64 {
    let s = b.re.abs().max(b.im.abs());
    if s == 0.0 || !s.is_finite() {
        return a / b;
    }
    (a / s) / (b / s)
}

enum Poly {
    Direct(Vec<Complex64>),
    Log { mag: Vec<f64>, phase: Vec<Complex64> },
}

impl Poly {
    fn new(log_coeffs: &[(f64, Complex64)]) -> Self {
        let direct = log_coeffs
            .iter()
            .all(|(m, _)| *m == f64::NEG_INFINITY || m.abs() < LOG_RANGE);
        if direct {
            Poly::Direct(log_coeffs.iter().map(|(m, ph)| ph * m.exp()).collect())
        } else {
            Poly::Log {
                mag: log_coeffs.iter().map(|c| c.0).collect(),
                phase: log_coeffs.iter().map(|c| c.1).collect(),
            }
        }
    }

    /// Newton correction `p(z)/p'(z)`.
    fn ratio(&self, z: Complex64) -> Complex64 {
        match self {
            Poly::Direct(c) => {
                let n = c.len() - 1;
                if z.norm_sqr() <= 1.0 {
                    let mut p = c[n];
                    let mut dp = Complex64::new(0.0, 0.0);
                    for k in (0..n).rev() {
                        dp = dp * z + p;
                        p = p * z + c[k];
                    }
                    scaled_div(p, dp)
                } else {
                    // p(z) = z^n q(1/z) with q the reversed polynomial.
                    let w = 1.0 / z;
                    let mut q = c[0];
                    let mut dq = Complex64::new(0.0, 0.0);
                    for ck in &c[1..] {
                        dq = dq * w + q;
                        q = q * w + ck;
                    }
                    z * scaled_div(q, q * n as f64 - w * dq)
                }
            }
            Poly::Log { mag, phase } => {
                let r = z.norm();
                if r == 0.0 {
                    let c0 = phase[0] * (mag[0] - mag[1]).exp();
                    return c0 / phase[1];
                }
                let lr = r.ln();
                let u = z / r;
                let top = mag
                    .iter()
                    .enumerate()
                    .map(|(k, m)| m + k as f64 * lr)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = Complex64::new(0.0, 0.0);
                let mut ds = Complex64::new(0.0, 0.0);
                let mut uk = Complex64::new(1.0, 0.0);
                for (k, (m, ph)) in mag.iter().zip(phase).enumerate() {
                    let t = ph * uk * (m + k as f64 * lr - top).exp();
                    s += t;
                    ds += t * k as f64;
                    uk *= u;
                }
                z * s / ds
            }
        }
    }
}

/// Roots of `Σ c_k z^k` from `(ln |c_k|, phase)` pairs, by Aberth–Ehrlich
/// iteration started on a circle, with one Newton polish per root.
/// `start_angle` rotates the starting circle.
pub fn polynomial_roots(log_coeffs: &[(f64, Complex64)], start_angle: f64) -> Result<Vec<Complex64>> {
    if log_coeffs.len() < 2 {
        return Err(Error::InvalidArgument("polynomial degree must be at least 1".into()));
    }
    let n = log_coeffs.len() - 1;
    if log_coeffs[n].0 == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("leading coefficient vanishes".into()));
    }
    let poly = Poly::new(log_coeffs);
    let radius = if log_coeffs[0].0 == f64::NEG_INFINITY {
        1.0
    } else {
        ((log_coeffs[0].0 - log_coeffs[n].0) / n as f64).exp()
    };
    let mut z: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(radius, start_angle + 2.0 * std::f64::consts::PI * k as f64 / n as f64))
        .collect();
    let mut frozen = vec![false; n];
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut active = false;
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let zi = z[i];
            let r = poly.ratio(zi);
            let mut s = Complex64::new(0.0, 0.0);
            for (j, zj) in z.iter().enumerate() {
                if j != i {
                    s += 1.0 / (zi - zj);
                }
            }
            let delta = r / (1.0 - r * s);
            let next = zi - delta;
            if !(next.re.is_finite() && next.im.is_finite()) {
                return Err(Error::RootFindingFailed(format!("iterate {i} became non-finite")));
            }
            z[i] = next;
            if delta.norm() <= FREEZE * next.norm() {
                frozen[i] = true;
            } else {
                active = true;
            }
        }
        if !active {
            converged = true;
            break;
        }
    }
    for zi in z.iter_mut() {
        let r = poly.ratio(*zi);
        if r.re.is_finite() && r.im.is_finite() {
            *zi -= r;
        }
    }
    for (i, zi) in z.iter().enumerate() {
        let res = poly.ratio(*zi).norm();
        if !(res < RESIDUAL * (1.0 + zi.norm())) {
            return Err(Error::RootFindingFailed(format!(
                "root {i} residual {res:e} after {} sweeps (converged: {converged})",
                MAX_SWEEPS
            )));
        }
    }
    Ok(z)
}

/// A polynomial draw together with its roots.
#[derive(Clone, Debug)]
pub struct KostlanSample {
    pub poly: KostlanPolynomial,
    pub roots: Vec<Complex64>,
}

/// Draws a Gaussian polynomial of degree `n` and finds its roots.
pub fn kostlan_roots(n: usize, seed: Seed) -> Result<KostlanSample> {
    let poly = kostlan_coefficients(n, seed)?;
    let roots = if n == 1 {
        vec![-poly.zeta[0] / poly.zeta[1]]
    } else {
        polynomial_roots(&poly.log_coefficients(), 0.4)?
    };
    Ok(KostlanSample { poly, roots })
}

/// The roots `λ_k` placed on the sphere of area `n` at `P_n⁻¹(√n λ_k)`.
pub fn sample_kostlan_roots(n: usize, seed: Seed) -> Result<Configuration> {
    let params = SphereParams::new(n)?;
    let mut last = None;
    // A root on the projection pole or two numerically equal roots have
    // probability zero; such draws are replaced by a fresh one.
    for attempt in 0..8u64 {
        let s = if attempt == 0 { seed } else { seed.substream(u64::MAX - attempt) };
        let sample = kostlan_roots(n, s)?;
        let pts = sample
            .roots
            .iter()
            .map(|l| lift_to_sphere(&PlanarPoint::from_complex(l * params.sqrt_n()), &params))
            .collect();
        match Configuration::new(pts) {
            Ok(c) => return Ok(c),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
