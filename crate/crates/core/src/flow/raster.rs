//! Equirectangular basin images.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{allocate_all, FlowOptions, Target};
use crate::error::{Error, Result};
use crate::field::Configuration;
use crate::geometry::SpherePoint;

/// Basin owner of every pixel centre, row-major from the north-west corner.
#[derive(Clone, Debug, PartialEq)]
pub struct BasinRaster {
    pub width: usize,
    pub height: usize,
    pub targets: Vec<Target>,
}

/// Pixel-to-sphere mapping written next to a raster image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterSidecar {
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub radius: f64,
    pub projection: String,
    /// Longitude of pixel column centres, `lon_j = −π + 2π(j + ½)/width`.
    pub longitudes: Vec<f64>,
    /// Latitude of pixel row centres, `lat_i = π/2 − π(i + ½)/height`.
    pub latitudes: Vec<f64>,
    pub unassigned_color: [u8; 3],
}

impl BasinRaster {
    pub fn longitude(&self, col: usize) -> f64 {
        -PI + 2.0 * PI * (col as f64 + 0.5) / self.width as f64
    }

    pub fn latitude(&self, row: usize) -> f64 {
        0.5 * PI - PI * (row as f64 + 0.5) / self.height as f64
    }

    /// Pixel counts per source, plus the number of unassigned pixels.
    pub fn histogram(&self, n: usize) -> (Vec<usize>, usize) {
        let mut counts = vec![0; n];
        let mut none = 0;
        for t in &self.targets {
            match t {
                Target::Source(i) => counts[*i] += 1,
                Target::Unassigned => none += 1,
            }
        }
        (counts, none)
    }

    /// Fraction of sphere area owned by each source, weighting pixels by
    /// `cos(latitude)`.
    pub fn area_fractions(&self, n: usize) -> Vec<f64> {
        let mut acc = vec![0.0; n];
        let mut total = 0.0;
        for row in 0..self.height {
            let w = self.latitude(row).cos();
            for col in 0..self.width {
                total += w;
                if let Target::Source(i) = self.targets[row * self.width + col] {
                    acc[i] += w;
                }
            }
        }
        acc.iter().map(|a| a / total).collect()
    }

    /// Effective number of independent samples of the weighted frequencies.
    pub fn effective_samples(&self) -> f64 {
        let (mut s1, mut s2) = (0.0, 0.0);
        for row in 0..self.height {
            let w = self.latitude(row).cos();
            s1 += w * self.width as f64;
            s2 += w * w * self.width as f64;
        }
        s1 * s1 / s2
    }

    /// Binary PPM (P6, maxval 255); unassigned pixels are black.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.targets.len() * 3);
        for t in &self.targets {
            let c = match t {
                Target::Source(i) => golden_angle_color(*i),
                Target::Unassigned => [0, 0, 0],
            };
            out.extend_from_slice(&c);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    pub fn sidecar(&self, cfg: &Configuration) -> RasterSidecar {
        RasterSidecar {
            width: self.width,
            height: self.height,
            n: cfg.params().n(),
            radius: cfg.params().radius(),
            projection: "equirectangular".into(),
            longitudes: (0..self.width).map(|j| self.longitude(j)).collect(),
            latitudes: (0..self.height).map(|i| self.latitude(i)).collect(),
            unassigned_color: [0, 0, 0],
        }
    }
}

/// Colour of source `index`: hue advanced by the golden angle per index.
pub fn golden_angle_color(index: usize) -> [u8; 3] {
    let golden = 0.381_966_011_250_105_1;
    let h = (index as f64 * golden).fract() * 6.0;
    let (s, v) = (0.65, 0.95);
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let byte = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    [byte(r), byte(g), byte(b)]
}

/// Integrates from every pixel centre of a `width × height`
/// longitude–latitude grid.
pub fn basin_raster(cfg: &Configuration, opts: &FlowOptions, width: usize, height: usize) -> Result<BasinRaster> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("raster dimensions must be positive".into()));
    }
    let mut raster = BasinRaster {
        width,
        height,
        targets: Vec::new(),
    };
    let p = cfg.params();
    let starts: Vec<SpherePoint> = (0..height)
        .flat_map(|i| (0..width).map(move |j| (i, j)))
        .map(|(i, j)| p.point_at(raster.longitude(j), raster.latitude(i)))
        .collect();
    raster.targets = allocate_all(&starts, cfg, opts)?.into_iter().map(|o| o.target).collect();
    Ok(raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::process::{sample_uniform, Seed};

    #[test]
    fn single_source_single_colour() {
        let c = sample_uniform(1, Seed(3)).unwrap();
        let r = basin_raster(&c, &FlowOptions::default(), 24, 12).unwrap();
        let (counts, none) = r.histogram(1);
        assert!(none <= 1);
        assert_eq!(counts[0] + none, 24 * 12);
    }

    #[test]
    fn ppm_header_and_size() {
        let r = BasinRaster {
            width: 3,
            height: 2,
            targets: vec![Target::Source(0), Target::Unassigned, Target::Source(1), Target::Source(2), Target::Source(0), Target::Source(1)],
        };
        let bytes = r.to_ppm();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 18);
        assert_eq!(&bytes[header.len() + 3..header.len() + 6], &[0, 0, 0]);
    }

    #[test]
    fn palette_distinguishes_neighbours() {
        let colors: Vec<[u8; 3]> = (0..40).map(golden_angle_color).collect();
        for i in 0..40 {
            for j in 0..i {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }

    #[test]
    fn area_fractions_near_uniform() {
        let c = sample_uniform(8, Seed(21)).unwrap();
        let r = basin_raster(&c, &FlowOptions::default(), 96, 48).unwrap();
        let fr = r.area_fractions(8);
        let tol = 3.0 / r.effective_samples().sqrt();
        for f in fr {
            assert!((f - 0.125).abs() <= tol.max(0.02), "fraction {f}");
        }
    }

    #[test]
    fn rotation_consistency_of_partition() {
        let c = sample_uniform(6, Seed(5)).unwrap();
        let rot = Rotation::about_axis(&nalgebra::Vector3::z(), 2.0 * PI / 16.0);
        let rc = c.rotated(&rot).unwrap();
        let opts = FlowOptions::default();
        let (w, h) = (32, 16);
        let a = basin_raster(&c, &opts, w, h).unwrap();
        let b = basin_raster(&rc, &opts, w, h).unwrap();
        // A rotation by two columns about the axis maps pixel centres onto
        // pixel centres.
        let mut agree = 0;
        for i in 0..h {
            for j in 0..w {
                if a.targets[i * w + j] == b.targets[i * w + (j + 2) % w] {
                    agree += 1;
                }
            }
        }
        assert!(agree >= w * h - 4, "{agree}");
    }
}
