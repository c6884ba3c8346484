use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Brute,
    /// Uniform cell grid; only built for dimensions 1 to 3.
    Grid,
}

/// Neighbors of one query, ascending by `(squared distance, index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub dist2: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Grid {
    lo: Vec<f64>,
    cell: f64,
    dims: Vec<usize>,
    cells: Vec<Vec<usize>>,
}

/// Exact k-nearest-neighbor index under squared Euclidean distance.
///
/// The grid strategy only prunes candidates; it returns exactly what the
/// brute-force scan returns, including the lower-index tie-break.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Matrix,
    grid: Option<Grid>,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

impl NeighborIndex {
    /// Brute force for high dimensions, grid for `D <= 3`.
    pub fn new(points: Matrix) -> Self {
        let strategy = if points.cols() <= 3 && points.rows() > 32 { Strategy::Grid } else { Strategy::Brute };
        Self::with_strategy(points, strategy)
    }

    /// A grid request in more than 3 dimensions falls back to brute force.
    pub fn with_strategy(points: Matrix, strategy: Strategy) -> Self {
        let grid = match strategy {
            Strategy::Grid if (1..=3).contains(&points.cols()) && points.rows() > 0 => Some(Grid::build(&points)),
            _ => None,
        };
        Self { points, grid }
    }

    pub fn strategy(&self) -> Strategy {
        if self.grid.is_some() {
            Strategy::Grid
        } else {
            Strategy::Brute
        }
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn knn(&self, queries: &Matrix, k: usize) -> Result<Vec<Neighbors>> {
        if k == 0 || k > self.len() {
            return Err(Error::Range { what: "k", value: k, lo: 1, hi: self.len() });
        }
        if queries.cols() != self.points.cols() {
            return Err(Error::Dimension { op: "knn queries", expected: (queries.rows(), self.points.cols()), got: queries.shape() });
        }
        Ok(queries.iter_rows().map(|q| self.query(q, k)).collect())
    }

    pub fn query(&self, q: &[f64], k: usize) -> Neighbors {
        match &self.grid {
            Some(g) => g.query(&self.points, q, k),
            None => brute(&self.points, q, k),
        }
    }
}

fn brute(points: &Matrix, q: &[f64], k: usize) -> Neighbors {
    let mut best = TopK::new(k);
    for (i, p) in points.iter_rows().enumerate() {
        best.offer(squared_distance(p, q), i);
    }
    best.finish()
}

/// Bounded sorted buffer of the `k` smallest `(dist2, index)` pairs.
struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, items: Vec::with_capacity(k + 1) }
    }

    #[inline]
    fn less(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    fn offer(&mut self, d: f64, i: usize) {
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if !Self::less((d, i), worst) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&e| Self::less(e, (d, i)));
        self.items.insert(pos, (d, i));
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |e| e.0)
    }

    fn finish(self) -> Neighbors {
        Neighbors { indices: self.items.iter().map(|e| e.1).collect(), dist2: self.items.iter().map(|e| e.0).collect() }
    }
}

const MAX_CELLS_PER_POINT: usize = 4;

impl Grid {
    fn build(points: &Matrix) -> Self {
        let d = points.cols();
        let n = points.rows();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points.iter_rows() {
            for j in 0..d {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        let extent: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l).max(1e-12)).collect();
        let volume: f64 = extent.iter().product();
        // about two points per occupied cell
        let mut cell = libm::pow(2.0 * volume / n as f64, 1.0 / d as f64).max(1e-9);
        let dims = loop {
            let dims: Vec<usize> = extent.iter().map(|e| (e / cell) as usize + 1).collect();
            if dims.iter().product::<usize>() <= MAX_CELLS_PER_POINT * n + 8 {
                break dims;
            }
            cell *= 1.5;
        };
        let mut grid = Grid { lo, cell, dims, cells: Vec::new() };
        grid.cells = vec![Vec::new(); grid.dims.iter().product()];
        for (i, p) in points.iter_rows().enumerate() {
            let c = grid.cell_of(p);
            let flat = grid.flat(&c);
            grid.cells[flat].push(i);
        }
        grid
    }

    fn cell_of(&self, p: &[f64]) -> Vec<usize> {
        p.iter()
            .enumerate()
            .map(|(j, &v)| {
                let c = libm::floor((v - self.lo[j]) / self.cell);
                if c <= 0.0 {
                    0
                } else {
                    (c as usize).min(self.dims[j] - 1)
                }
            })
            .collect()
    }

    fn flat(&self, c: &[usize]) -> usize {
        let mut f = 0;
        for (j, &v) in c.iter().enumerate().rev() {
            f = f * self.dims[j] + v;
        }
        f
    }

    /// Lower bound on the distance from `q` to any point outside the cell box
    /// `[center - r, center + r]`. Infinite when that box covers the grid.
    fn outside_bound(&self, q: &[f64], center: &[usize], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for j in 0..q.len() {
            if center[j] > r {
                let face = self.lo[j] + (center[j] - r) as f64 * self.cell;
                bound = bound.min((q[j] - face).max(0.0));
            }
            if center[j] + r + 1 < self.dims[j] {
                let face = self.lo[j] + (center[j] + r + 1) as f64 * self.cell;
                bound = bound.min((face - q[j]).max(0.0));
            }
        }
        bound
    }

    fn query(&self, points: &Matrix, q: &[f64], k: usize) -> Neighbors {
        let d = q.len();
        let center = self.cell_of(q);
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        let mut best = TopK::new(k);
        let mut cell = vec![0usize; d];
        for r in 0..=max_r {
            self.visit_ring(&center, r, &mut cell, 0, false, &mut |flat| {
                for &i in &self.cells[flat] {
                    best.offer(squared_distance(points.row(i), q), i);
                }
            });
            let bound = self.outside_bound(q, &center, r);
            if bound.is_infinite() {
                break;
            }
            // strict: a point at exactly the bound could still win a tie on index
            if best.full() && best.worst() < bound * bound {
                break;
            }
        }
        best.finish()
    }

    /// Calls `f` for every in-grid cell at Chebyshev distance exactly `r`.
    fn visit_ring(&self, center: &[usize], r: usize, cell: &mut [usize], j: usize, on_shell: bool, f: &mut impl FnMut(usize)) {
        if j == center.len() {
            if on_shell || r == 0 {
                f(self.flat(cell));
            }
            return;
        }
        let c = center[j] as isize;
        let r_i = r as isize;
        for off in -r_i..=r_i {
            let v = c + off;
            if v < 0 || v >= self.dims[j] as isize {
                continue;
            }
            cell[j] = v as usize;
            self.visit_ring(center, r, cell, j + 1, on_shell || off.unsigned_abs() == r, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{gauss, RngStream};

    #[test]
    fn exact_hit() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0], [3.0, 3.0]]).unwrap();
        let idx = NeighborIndex::new(pts);
        let n = idx.knn(&Matrix::row_vector(&[1.0, 2.0]), 1).unwrap();
        assert_eq!(n[0].indices, vec![1]);
        assert_eq!(n[0].dist2, vec![0.0]);
    }

    #[test]
    fn one_dimensional_hand_case() {
        let pts = Matrix::column(&[0.0, 3.0, 10.0]);
        for s in [Strategy::Brute, Strategy::Grid] {
            let idx = NeighborIndex::with_strategy(pts.clone(), s);
            let n = idx.knn(&Matrix::column(&[4.0]), 2).unwrap();
            assert_eq!(n[0].indices, vec![1, 0]);
            assert_eq!(n[0].dist2, vec![1.0, 16.0]);
        }
    }

    #[test]
    fn k_too_large() {
        let idx = NeighborIndex::new(Matrix::zeros(3, 2));
        assert!(matches!(idx.knn(&Matrix::zeros(1, 2), 4), Err(Error::Range { .. })));
    }

    #[test]
    fn grid_equals_brute() {
        let mut rng = RngStream::new(17);
        for d in 1..=3 {
            let pts = gauss(&mut rng, 64, d);
            let queries = gauss(&mut rng, 40, d).scale(2.0);
            let brute = NeighborIndex::with_strategy(pts.clone(), Strategy::Brute);
            let grid = NeighborIndex::with_strategy(pts, Strategy::Grid);
            assert_eq!(grid.strategy(), Strategy::Grid);
            for k in [1, 5, 64] {
                assert_eq!(grid.knn(&queries, k).unwrap(), brute.knn(&queries, k).unwrap());
            }
        }
    }

    #[test]
    fn ties_break_on_lower_index() {
        let pts = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        for s in [Strategy::Brute, Strategy::Grid] {
            let idx = NeighborIndex::with_strategy(pts.clone(), s);
            let n = idx.query(&[0.0, 0.0], 4);
            assert_eq!(n.indices, vec![0, 1, 2, 3]);
        }
    }
}
