//! Uniform hash grid for exact fixed-radius nearest-neighbor queries.
//!
//! A point `p` lives in cell `floor((p - center) / cell_length)`, with `center`
//! the centroid of the indexed cloud, so translating the cloud and the query
//! together leaves every lookup unchanged. Queries scan all cells within
//! `ceil(d / cell_length)` of the query cell, which keeps results exact for
//! any search distance.

use nalgebra::Vector3;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub type CellIndex = [i64; 3];

/// Dense slot tables are used when the occupied bounding box has at most
/// this many cells per indexed point (or `DENSE_MIN_CELLS` overall).
const DENSE_CELLS_PER_POINT: usize = 8;
const DENSE_MIN_CELLS: usize = 1 << 21;
const DENSE_MAX_CELLS: usize = 1 << 24;
const EMPTY_SLOT: u32 = u32::MAX;

/// The 27 unit-reach offsets ordered by distance from the center cell.
const NEAR_FIRST: [[i64; 3]; 27] = {
    let mut out = [[0i64; 3]; 27];
    let mut n = 0;
    let mut ring = 0;
    while ring <= 3 {
        let mut k = 0;
        while k < 27 {
            let o = [k as i64 / 9 - 1, (k as i64 / 3) % 3 - 1, k as i64 % 3 - 1];
            if o[0].abs() + o[1].abs() + o[2].abs() == ring {
                out[n] = o;
                n += 1;
            }
            k += 1;
        }
        ring += 1;
    }
    out
};

/// Cell indices of `p` relative to `center`.
pub fn grid_index(p: &Point, center: &Point, cell_length: f64) -> CellIndex {
    let rel = (p - center) / cell_length;
    [
        rel.x.floor() as i64,
        rel.y.floor() as i64,
        rel.z.floor() as i64,
    ]
}

#[derive(Debug, Clone)]
struct DenseSlots {
    origin: CellIndex,
    dims: [usize; 3],
    slots: Vec<u32>,
}

impl DenseSlots {
    #[inline]
    fn get(&self, k: &CellIndex) -> Option<u32> {
        let x = k[0] - self.origin[0];
        let y = k[1] - self.origin[1];
        let z = k[2] - self.origin[2];
        if x < 0
            || y < 0
            || z < 0
            || x as usize >= self.dims[0]
            || y as usize >= self.dims[1]
            || z as usize >= self.dims[2]
        {
            return None;
        }
        let s = self.slots[(x as usize * self.dims[1] + y as usize) * self.dims[2] + z as usize];
        (s != EMPTY_SLOT).then_some(s)
    }
}

/// Build-once, read-many spatial index over a point set.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    cell_length: f64,
    center: Point,
    points: Vec<Point>,
    cell_of_slot: Vec<CellIndex>,
    slot_of_cell: FxHashMap<CellIndex, u32>,
    dense: Option<DenseSlots>,
    // CSR layout: the members of slot s are `order[starts[s]..starts[s + 1]]`,
    // ascending by point index, with positions mirrored in `packed`.
    starts: Vec<u32>,
    order: Vec<u32>,
    packed: Vec<Point>,
}

/// Indexes every point of `cloud`; the grid center is the cloud centroid.
pub fn build_grid(cloud: &PointCloud, cell_length: f64) -> Result<SearchGrid> {
    SearchGrid::new(&cloud.positions, cell_length)
}

impl SearchGrid {
    pub fn new(points: &[Point], cell_length: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !(cell_length > 0.0) {
            return Err(Error::InvalidArgument("cell_length must be > 0".into()));
        }
        let center = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;

        let keys: Vec<CellIndex> = points
            .iter()
            .map(|p| grid_index(p, &center, cell_length))
            .collect();
        let mut slot_of_cell: FxHashMap<CellIndex, u32> = FxHashMap::default();
        let mut cell_of_slot = Vec::new();
        let mut counts: Vec<u32> = Vec::new();
        let mut slot_of_point = Vec::with_capacity(points.len());
        for k in &keys {
            let slot = *slot_of_cell.entry(*k).or_insert_with(|| {
                cell_of_slot.push(*k);
                counts.push(0);
                (cell_of_slot.len() - 1) as u32
            });
            counts[slot as usize] += 1;
            slot_of_point.push(slot);
        }
        let mut starts = Vec::with_capacity(counts.len() + 1);
        starts.push(0u32);
        for c in &counts {
            starts.push(starts.last().unwrap() + c);
        }
        let mut fill = starts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &slot) in slot_of_point.iter().enumerate() {
            order[fill[slot as usize] as usize] = i as u32;
            fill[slot as usize] += 1;
        }
        let packed = order.iter().map(|&i| points[i as usize]).collect();

        let dense = Self::dense_slots(&cell_of_slot, points.len());
        Ok(Self {
            cell_length,
            center,
            points: points.to_vec(),
            cell_of_slot,
            slot_of_cell,
            dense,
            starts,
            order,
            packed,
        })
    }

    fn dense_slots(cell_of_slot: &[CellIndex], n: usize) -> Option<DenseSlots> {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for k in cell_of_slot {
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        let dims = [
            (hi[0] - lo[0] + 1) as usize,
            (hi[1] - lo[1] + 1) as usize,
            (hi[2] - lo[2] + 1) as usize,
        ];
        let total = dims[0].checked_mul(dims[1])?.checked_mul(dims[2])?;
        let budget = (n * DENSE_CELLS_PER_POINT).max(DENSE_MIN_CELLS).min(DENSE_MAX_CELLS);
        if total > budget {
            return None;
        }
        let mut slots = vec![EMPTY_SLOT; total];
        for (s, k) in cell_of_slot.iter().enumerate() {
            let idx = ((k[0] - lo[0]) as usize * dims[1] + (k[1] - lo[1]) as usize) * dims[2]
                + (k[2] - lo[2]) as usize;
            slots[idx] = s as u32;
        }
        Some(DenseSlots {
            origin: lo,
            dims,
            slots,
        })
    }

    pub fn cell_length(&self) -> f64 {
        self.cell_length
    }

    pub fn center(&self) -> &Point {
        &self.center
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn occupied_cells(&self) -> usize {
        self.cell_of_slot.len()
    }

    pub fn cell_of(&self, p: &Point) -> CellIndex {
        grid_index(p, &self.center, self.cell_length)
    }

    /// Point indices stored in cell `k` (ascending), empty if unoccupied.
    pub fn cell(&self, k: &CellIndex) -> &[u32] {
        match self.slot(k) {
            Some(s) => &self.order[self.starts[s as usize] as usize..self.starts[s as usize + 1] as usize],
            None => &[],
        }
    }

    /// Iterates `(cell index, member point indices)`.
    pub fn cells(&self) -> impl Iterator<Item = (&CellIndex, &[u32])> {
        self.cell_of_slot.iter().enumerate().map(move |(s, k)| {
            (
                k,
                &self.order[self.starts[s] as usize..self.starts[s + 1] as usize],
            )
        })
    }

    #[inline]
    fn slot(&self, k: &CellIndex) -> Option<u32> {
        match &self.dense {
            Some(d) => d.get(k),
            None => self.slot_of_cell.get(k).copied(),
        }
    }

    /// Squared distance from `q` to the axis-aligned box of cell `k`.
    #[inline]
    fn cell_box_dist2(&self, q: &Point, k: &CellIndex) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let lo = self.center[a] + k[a] as f64 * self.cell_length;
            let hi = lo + self.cell_length;
            let v = q[a];
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    #[inline]
    fn reach(&self, d: f64) -> i64 {
        (d / self.cell_length).ceil() as i64
    }

    /// Exact nearest indexed point within `d_max` of `q` (inclusive), ties to
    /// the lowest index. Returns `(index, distance)`.
    pub fn nn_within(&self, q: &Point, d_max: f64) -> Option<(usize, f64)> {
        self.nn_within_squared(q, d_max)
            .map(|(i, d2)| (i, d2.sqrt()))
    }

    /// As [`SearchGrid::nn_within`] but returns the squared distance.
    pub fn nn_within_squared(&self, q: &Point, d_max: f64) -> Option<(usize, f64)> {
        let c = self.reach(d_max);
        let kq = self.cell_of(q);
        let mut best_d2 = d_max * d_max;
        let mut best_idx = u32::MAX;
        let mut visit = |k: CellIndex| {
            let Some(s) = self.slot(&k) else { return };
            // Slack keeps cells whose box distance equals the current best
            // under rounding, so tie-breaking stays exact.
            if self.cell_box_dist2(q, &k) > best_d2 * (1.0 + 1e-9) + 1e-300 {
                return;
            }
            let (a, b) = (self.starts[s as usize] as usize, self.starts[s as usize + 1] as usize);
            for (p, &idx) in self.packed[a..b].iter().zip(&self.order[a..b]) {
                let d2 = (p - q).norm_squared();
                if d2 < best_d2 || (d2 == best_d2 && idx < best_idx) {
                    best_d2 = d2;
                    best_idx = idx;
                }
            }
        };
        if c == 1 {
            // Near cells first so the box test prunes the rest early.
            for o in &NEAR_FIRST {
                visit([kq[0] + o[0], kq[1] + o[1], kq[2] + o[2]]);
            }
        } else {
            for dx in -c..=c {
                for dy in -c..=c {
                    for dz in -c..=c {
                        visit([kq[0] + dx, kq[1] + dy, kq[2] + dz]);
                    }
                }
            }
        }
        (best_idx != u32::MAX).then_some((best_idx as usize, best_d2))
    }

    /// Exact nearest indexed point at any distance, ties to the lowest index.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let mut r = self.cell_length;
        // Grow the search while visiting cells stays cheaper than a full scan.
        while (2 * self.reach(r) + 1).pow(3) as usize <= self.points.len().max(27) {
            if let Some((i, d2)) = self.nn_within_squared(q, r) {
                return (i, d2.sqrt());
            }
            r *= 2.0;
        }
        let (i, d2) = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
        (i, d2.sqrt())
    }

    /// Indices of all points with `|p - q| <= r`, in ascending order.
    pub fn radius_search(&self, q: &Point, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_search_with(q, r, |idx, _| out.push(idx));
        out.sort_unstable();
        out
    }

    /// Calls `visit(index, squared_distance)` for every point with `|p - q| <= r`.
    pub fn radius_search_with(&self, q: &Point, r: f64, mut visit: impl FnMut(usize, f64)) {
        let c = self.reach(r);
        let kq = self.cell_of(q);
        let r2 = r * r;
        for dx in -c..=c {
            for dy in -c..=c {
                for dz in -c..=c {
                    let k = [kq[0] + dx, kq[1] + dy, kq[2] + dz];
                    let Some(s) = self.slot(&k) else { continue };
                    if self.cell_box_dist2(q, &k) > r2 * (1.0 + 1e-9) + 1e-300 {
                        continue;
                    }
                    let (a, b) = (self.starts[s as usize] as usize, self.starts[s as usize + 1] as usize);
                    for (p, &idx) in self.packed[a..b].iter().zip(&self.order[a..b]) {
                        let d2 = (p - q).norm_squared();
                        if d2 <= r2 {
                            visit(idx as usize, d2);
                        }
                    }
                }
            }
        }
    }
}

/// Free-function form of [`SearchGrid::nn_within`].
pub fn nn_within(grid: &SearchGrid, q: &Point, d_max: f64) -> Option<(usize, f64)> {
    grid.nn_within(q, d_max)
}

/// Free-function form of [`SearchGrid::radius_search`].
pub fn radius_search(grid: &SearchGrid, q: &Point, r: f64) -> Vec<usize> {
    grid.radius_search(q, r)
}

/// For every descriptor in `features_p`, the index of its L2-nearest
/// descriptor in `features_q` (exhaustive scan, ties to the lowest index).
pub fn feature_nn_cache<const D: usize>(features_p: &[[f64; D]], features_q: &[[f64; D]]) -> Result<Vec<usize>> {
    if features_p.is_empty() || features_q.is_empty() {
        return Err(Error::MissingData("feature lists must be non-empty".into()));
    }
    Ok(features_p
        .par_iter()
        .map(|fp| nearest_descriptor(fp, features_q))
        .collect())
}

#[inline]
fn nearest_descriptor<const D: usize>(fp: &[f64; D], features_q: &[[f64; D]]) -> usize {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    'outer: for (j, fq) in features_q.iter().enumerate() {
        let mut d2 = 0.0;
        // Partial sums only grow, so a candidate can be abandoned as soon as
        // it reaches the current best (later equal distances lose the tie).
        for chunk in (0..D).step_by(11) {
            let end = (chunk + 11).min(D);
            for k in chunk..end {
                let d = fp[k] - fq[k];
                d2 += d * d;
            }
            if d2 >= best {
                continue 'outer;
            }
        }
        best = d2;
        best_idx = j;
    }
    best_idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nn(points: &[Point], q: &Point, d_max: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 <= d_max * d_max && best.is_none_or(|(_, b)| d2 < b) {
                best = Some((i, d2));
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    #[test]
    fn grid_index_examples() {
        let o = Vector3::zeros();
        assert_eq!(grid_index(&o, &o, 0.05), [0, 0, 0]);
        assert_eq!(grid_index(&Vector3::new(0.12, -0.03, 0.07), &o, 0.05), [2, -1, 1]);
        let c = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(grid_index(&(c + Vector3::new(0.049, 0.049, 0.049)), &c, 0.05), [0, 0, 0]);
    }

    #[test]
    fn build_examples() {
        let g = SearchGrid::new(&[Vector3::new(1.0, 2.0, 3.0)], 0.05).unwrap();
        assert_eq!(g.occupied_cells(), 1);

        let g = SearchGrid::new(&[Vector3::zeros(), Vector3::new(0.2, 0.0, 0.0)], 0.05).unwrap();
        assert_eq!(g.occupied_cells(), 2);

        // Cluster straddling the centroid splits at the centroid plane.
        let pts: Vec<Point> = (0..8)
            .map(|i| Vector3::new(0.01 + 0.001 * i as f64, 0.0, 0.0))
            .collect();
        let g = SearchGrid::new(&pts, 0.05).unwrap();
        assert_eq!(g.occupied_cells(), 2);
        let mut cells: Vec<_> = g.cells().map(|(k, m)| (*k, m.to_vec())).collect();
        cells.sort();
        assert_eq!(cells[0], ([-1, 0, 0], vec![0u32, 1, 2, 3]));
        assert_eq!(cells[1], ([0, 0, 0], vec![4u32, 5, 6, 7]));

        assert!(matches!(SearchGrid::new(&[], 0.05), Err(Error::EmptyCloud)));
    }

    #[test]
    fn every_point_in_exactly_one_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = SearchGrid::new(&pts, 0.07).unwrap();
        let mut seen = vec![0; pts.len()];
        for (k, members) in g.cells() {
            for &m in members {
                seen[m as usize] += 1;
                assert_eq!(g.cell_of(&pts[m as usize]), *k);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn nn_examples() {
        let g = SearchGrid::new(&[Vector3::new(0.3, 0.1, -0.2)], 0.05).unwrap();
        assert_eq!(g.nn_within(&Vector3::new(0.3, 0.1, -0.2), 0.075), Some((0, 0.0)));
        assert_eq!(g.nn_within(&Vector3::new(0.4, 0.1, -0.2), 0.075), None);
    }

    #[test]
    fn nn_ties_to_lowest_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let g = SearchGrid::new(&pts, 0.3).unwrap();
        assert_eq!(g.nn_within(&Vector3::zeros(), 1.5).unwrap().0, 0);
        assert_eq!(g.nn_within(&Vector3::new(1.0, 0.0, 0.0), 0.1).unwrap().0, 0);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point> = (0..2000)
            .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.1)))
            .collect();
        let g = SearchGrid::new(&pts, 0.05).unwrap();
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
            let got = g.nearest(&q);
            assert_eq!(got.0, brute.0);
            assert!((got.1 - brute.1).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_examples() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let g = SearchGrid::new(&pts, 0.05).unwrap();
        assert!(g.radius_search(&Vector3::new(0.5, 0.5, 0.0), 0.1).is_empty());
        assert_eq!(g.radius_search(&Vector3::new(1.0, 0.0, 0.0), 0.0), vec![1]);
    }

    #[test]
    fn nn_matches_brute_force_10k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point> = (0..10_000)
            .map(|_| Vector3::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
            .collect();
        let g = SearchGrid::new(&pts, 0.05).unwrap();
        for _ in 0..1000 {
            let q = Vector3::new(rng.random_range(-0.1..2.1), rng.random_range(-0.1..2.1), rng.random_range(-0.1..2.1));
            assert_eq!(g.nn_within(&q, 0.075), brute_nn(&pts, &q, 0.075));
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<Point> = (0..3000)
            .map(|_| Vector3::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(0.0..1.5)))
            .collect();
        let g = SearchGrid::new(&pts, 0.05).unwrap();
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
            let expected: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - q).norm_squared() <= 0.25 * 0.25).collect();
            assert_eq!(g.radius_search(&q, 0.25), expected);
        }
    }

    #[test]
    fn sparse_fallback_agrees_with_dense() {
        // Two clusters far apart force the hash-map path.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<Point> = Vec::new();
        for _ in 0..200 {
            pts.push(Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
            pts.push(Vector3::new(rng.random_range(5000.0..5001.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
        }
        let g = SearchGrid::new(&pts, 0.01).unwrap();
        assert!(g.dense.is_none());
        for p in pts.iter().take(50) {
            let q = p + Vector3::new(0.01, -0.02, 0.005);
            assert_eq!(g.nn_within(&q, 0.08), brute_nn(&pts, &q, 0.08));
        }
    }

    #[test]
    fn feature_cache_examples() {
        let f: Vec<[f64; 4]> = vec![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        assert_eq!(feature_nn_cache(&f, &f).unwrap(), vec![0, 1, 2]);
        let single = vec![[5.0, 5.0, 5.0, 5.0]];
        assert_eq!(feature_nn_cache(&f, &single).unwrap(), vec![0, 0, 0]);
        // Equidistant candidates resolve to the lowest index.
        let q = vec![[2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        assert_eq!(feature_nn_cache(&[[1.0, 0.0, 0.0, 0.0]], &q).unwrap(), vec![0]);
        assert!(feature_nn_cache::<4>(&[], &q).is_err());
    }

    #[test]
    fn feature_cache_matches_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gen = |n: usize| -> Vec<[f64; 33]> {
            (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..100.0))).collect()
        };
        let p = gen(100);
        let q = gen(100);
        let cache = feature_nn_cache(&p, &q).unwrap();
        for (i, fp) in p.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (j, fq) in q.iter().enumerate() {
                let d: f64 = fp.iter().zip(fq).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            assert_eq!(cache[i], best.1);
        }
    }
}
