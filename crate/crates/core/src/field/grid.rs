//! Uniform cell grid over the ambient bounding cube, for nearest-source
//! queries inside the flow loop.

use nalgebra::Vector3;

#[derive(Clone, Debug)]
pub struct NeighborGrid {
    origin: f64,
    cell: f64,
    dim: usize,
    starts: Vec<u32>,
    items: Vec<u32>,
    points: Vec<Vector3<f64>>,
}

/// Largest number of cells per axis.
const MAX_DIM: usize = 48;

impl NeighborGrid {
    pub fn build(points: &[Vector3<f64>], radius: f64) -> Self {
        let extent = 2.0 * radius * (1.0 + 1e-9);
        let cell = (extent / MAX_DIM as f64).max(1.0).min(extent.max(f64::MIN_POSITIVE));
        let dim = ((extent / cell).ceil() as usize).clamp(1, MAX_DIM);
        let origin = -radius * (1.0 + 1e-9);
        let mut grid = Self {
            origin,
            cell,
            dim,
            starts: vec![0; dim * dim * dim + 1],
            items: vec![0; points.len()],
            points: points.to_vec(),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(p)).collect();
        for &k in &keys {
            grid.starts[k + 1] += 1;
        }
        for i in 0..dim * dim * dim {
            grid.starts[i + 1] += grid.starts[i];
        }
        let mut fill = grid.starts.clone();
        for (i, &k) in keys.iter().enumerate() {
            grid.items[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        grid
    }

    #[inline]
    fn axis(&self, v: f64) -> usize {
        (((v - self.origin) / self.cell).floor().max(0.0) as usize).min(self.dim - 1)
    }

    #[inline]
    fn key(&self, p: &Vector3<f64>) -> usize {
        let (i, j, k) = (self.axis(p.x), self.axis(p.y), self.axis(p.z));
        (i * self.dim + j) * self.dim + k
    }

    /// Index of, and distance to, the source closest to `x`. Ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let c = [self.axis(x.x), self.axis(x.y), self.axis(x.z)];
        let dim = self.dim as isize;
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..self.dim as isize {
            let lo = [c[0] as isize - ring, c[1] as isize - ring, c[2] as isize - ring];
            let hi = [c[0] as isize + ring, c[1] as isize + ring, c[2] as isize + ring];
            for i in lo[0].max(0)..=hi[0].min(dim - 1) {
                for j in lo[1].max(0)..=hi[1].min(dim - 1) {
                    for k in lo[2].max(0)..=hi[2].min(dim - 1) {
                        let on_shell = i == lo[0]
                            || i == hi[0]
                            || j == lo[1]
                            || j == hi[1]
                            || k == lo[2]
                            || k == hi[2];
                        if !on_shell {
                            continue;
                        }
                        let key = ((i * dim + j) * dim + k) as usize;
                        let (s, e) = (self.starts[key] as usize, self.starts[key + 1] as usize);
                        for &idx in &self.items[s..e] {
                            let d2 = (self.points[idx as usize] - x).norm_squared();
                            best = match best {
                                Some((bi, bd)) if bd < d2 || (bd == d2 && bi < idx as usize) => {
                                    Some((bi, bd))
                                }
                                _ => Some((idx as usize, d2)),
                            };
                        }
                    }
                }
            }
            if let Some((_, d2)) = best {
                // Cells outside this ring lie at least ring·cell away along some axis.
                let reach = ring as f64 * self.cell;
                if d2 <= reach * reach {
                    break;
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}
