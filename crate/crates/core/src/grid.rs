//! Uniform hash grid for fixed-radius neighbor queries.

use std::collections::HashMap;

use crate::Vec3;

type Cell = (i64, i64, i64);

pub struct SpatialGrid {
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl SpatialGrid {
    /// Buckets `points` into cubic cells of edge `cell_size` (> 0).
    pub fn new(points: &[Vec3], cell_size: f64) -> Self {
        debug_assert!(cell_size > 0.0);
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell_size)).or_default().push(i);
        }
        Self { cell_size, cells }
    }

    /// Calls `f` with every point index whose cell touches the ball of radius
    /// `radius` around `center`. Candidates still need an exact distance check.
    pub fn for_each_candidate(&self, center: &Vec3, radius: f64, mut f: impl FnMut(usize)) {
        let reach = (radius / self.cell_size).ceil() as i64;
        let (cx, cy, cz) = cell_of(center, self.cell_size);
        // fall back to a full scan when the stencil would be larger than the map
        let span = (2 * reach.saturating_add(1)).saturating_pow(3);
        if span < 0 || span as usize > self.cells.len() * 4 {
            for ids in self.cells.values() {
                ids.iter().for_each(|&i| f(i));
            }
            return;
        }
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = (
                        cx.saturating_add(dx),
                        cy.saturating_add(dy),
                        cz.saturating_add(dz),
                    );
                    if let Some(ids) = self.cells.get(&key) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    /// Indices within `radius` (inclusive) of `center`, ascending.
    pub fn within(&self, points: &[Vec3], center: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_candidate(center, radius, |i| {
            if (points[i] - center).norm() <= radius {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }
}

fn cell_of(p: &Vec3, size: f64) -> Cell {
    // float -> int casts saturate, so far-away points share boundary cells
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        for radius in [0.01, 0.1, 0.35, 2.0] {
            let grid = SpatialGrid::new(&pts, radius);
            for c in pts.iter().take(30) {
                let got = grid.within(&pts, c, radius);
                let want: Vec<usize> = (0..pts.len())
                    .filter(|&i| (pts[i] - c).norm() <= radius)
                    .collect();
                assert_eq!(got, want);
            }
        }
    }
}
