//! Random source configurations and their JSON form.

mod kostlan;

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Configuration;
use crate::geometry::{SphereParams, SpherePoint, POLE_EXCLUSION};

pub use kostlan::{
    kostlan_coefficients, kostlan_roots, polynomial_roots, sample_kostlan_roots, ComplexGaussianDraw,
    KostlanPolynomial, KostlanSample, MAX_SWEEPS,
};

/// A 64-bit seed. Independent streams are derived with [`Seed::substream`],
/// which hashes `(seed, index)` through two rounds of SplitMix64, so any
/// worker can reproduce the stream of sample `index` without coordination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    pub fn substream(self, index: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Which point process produced a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Uniform,
    Kostlan,
}

impl std::str::FromStr for ProcessKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "kostlan" => Ok(Self::Kostlan),
            other => Err(Error::InvalidArgument(format!("unknown process '{other}'"))),
        }
    }
}

/// Draws one configuration of the given process.
pub fn sample(process: ProcessKind, n: usize, seed: Seed) -> Result<Configuration> {
    match process {
        ProcessKind::Uniform => sample_uniform(n, seed),
        ProcessKind::Kostlan => sample_kostlan_roots(n, seed),
    }
}

/// One uniform point on the sphere, avoiding the projection pole.
pub fn uniform_point<R: rand::Rng + ?Sized>(rng: &mut R, params: &SphereParams) -> SpherePoint {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let norm: f64 = v.norm();
        if !(norm > 1e-150) {
            continue;
        }
        let u = v / norm;
        if (u - Vector3::z()).norm() < POLE_EXCLUSION {
            continue;
        }
        return SpherePoint::from_coords_unchecked(u * params.radius());
    }
}

/// `count` independent uniform points from one stream.
pub fn uniform_points(params: &SphereParams, count: usize, seed: Seed) -> Vec<SpherePoint> {
    let mut rng = seed.rng();
    (0..count).map(|_| uniform_point(&mut rng, params)).collect()
}

/// `n` i.i.d. uniform sources on the sphere of area `n`.
pub fn sample_uniform(n: usize, seed: Seed) -> Result<Configuration> {
    let params = SphereParams::new(n)?;
    Configuration::new(uniform_points(&params, n, seed))
}

/// Serialized configuration: `{n, process, seed, points}`. Coordinates are
/// written in shortest round-trip form, so reading restores them bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigurationRecord {
    pub n: usize,
    pub process: ProcessKind,
    pub seed: u64,
    pub points: Vec<[f64; 3]>,
}

impl ConfigurationRecord {
    pub fn new(cfg: &Configuration, process: ProcessKind, seed: Seed) -> Self {
        Self {
            n: cfg.params().n(),
            process,
            seed: seed.0,
            points: cfg.sources().iter().map(|p| p.to_array()).collect(),
        }
    }

    pub fn to_configuration(&self) -> Result<Configuration> {
        let params = SphereParams::new(self.n)?;
        let pts = self
            .points
            .iter()
            .map(|p| SpherePoint::from_coords_unchecked(Vector3::new(p[0], p[1], p[2])))
            .collect();
        Configuration::on_sphere(params, pts)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
