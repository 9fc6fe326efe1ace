use std::collections::HashMap;

use nalgebra::Vector3;

type Cell = (i64, i64, i64);

/// Uniform hash grid for nearest-neighbour queries on a static point set.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { points, cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> Cell {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Distances to the `k` nearest points other than `skip`, ascending.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<f64> {
        let available = self.points.len() - usize::from(skip.is_some());
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let c = Self::key(query, self.cell);
        let mut ring = 0i64;
        loop {
            let mut found: Vec<f64> = Vec::new();
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if let Some(list) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            found.extend(
                                list.iter()
                                    .filter(|&&j| Some(j) != skip)
                                    .map(|&j| (self.points[j] - query).norm()),
                            );
                        }
                    }
                }
            }
            // everything within `ring · cell` of the query has been visited
            found.sort_by(f64::total_cmp);
            let covered = ring as f64 * self.cell;
            if found.len() >= k && found[k - 1] <= covered || found.len() == available {
                found.truncate(k);
                return found;
            }
            ring += 1;
        }
    }
}

/// Mean distance from each point to its `k` nearest neighbours.
/// NaN where a point has no neighbours.
pub fn mean_neighbor_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    if points.len() < 2 {
        return vec![f64::NAN; points.len()];
    }
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let extent = (hi - lo).max().max(1e-9);
    let cell = extent / (points.len() as f64).cbrt().max(1.0);
    let grid = PointGrid::new(points, cell);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = grid.nearest(p, k, Some(i));
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect()
}
