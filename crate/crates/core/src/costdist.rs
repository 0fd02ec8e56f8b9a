//! Multi-source accumulated cost distance on an 8-connected raster.
//!
//! Moving between orthogonal neighbours costs the mean of the two
//! cells' cost-of-passage; diagonal moves cost `sqrt(2)` times that. A
//! single Dijkstra pass seeded with every source yields, for each cell, the
//! least accumulated cost and the source cell that attains it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::raster::{Grid, GridPair};

/// Cost of one step between cells of cost `ci` and `cj`.
pub fn edge_cost(ci: f64, cj: f64, diagonal: bool) -> Result<f64> {
    for c in [ci, cj] {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::invalid(format!(
                "cost-of-passage must be finite and >= 0, got {c}"
            )));
        }
    }
    Ok(step(ci, cj, diagonal))
}

#[inline]
fn step(ci: f64, cj: f64, diagonal: bool) -> f64 {
    let adjacent = (ci + cj) / 2.0;
    if diagonal {
        SQRT_2 * adjacent
    } else {
        adjacent
    }
}

/// Accumulated cost and least-cost source for every cell.
#[derive(Debug, Clone)]
pub struct CostField {
    /// Accumulated cost; nodata on unreachable or impassable cells.
    pub accumulated: Grid,
    source: Vec<Option<usize>>,
}

impl CostField {
    /// Linear index of the least-cost source of `idx`, `None` if unreachable.
    #[inline]
    pub fn source(&self, idx: usize) -> Option<usize> {
        self.source[idx]
    }

    #[inline]
    pub fn reachable(&self, idx: usize) -> bool {
        self.source[idx].is_some()
    }

    pub fn sources(&self) -> &[Option<usize>] {
        &self.source
    }

    /// Accumulated cost at `idx`, `None` if unreachable.
    pub fn cost(&self, idx: usize) -> Option<f64> {
        self.source[idx].map(|_| self.accumulated.value(idx))
    }
}

/// Options for [`cost_distance_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CostOptions {
    /// Added to every cost before routing. Least-cost routes depend on it,
    /// since per-cell costs accumulate once per step; use only to lift
    /// negative elevations.
    pub offset: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    cost: f64,
    source: usize,
    cell: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl Ord for Entry {
    // reversed for a min-heap on (cost, source, cell)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.source.cmp(&self.source))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source cost distance with default options.
pub fn cost_distance(cost_grid: &Grid, sources: &[usize]) -> Result<CostField> {
    cost_distance_with(cost_grid, sources, CostOptions::default())
}

/// Multi-source cost distance.
///
/// Nodata cells are impassable. Ties between sources at equal accumulated
/// cost resolve to the smallest source index.
pub fn cost_distance_with(cost_grid: &Grid, sources: &[usize], opts: CostOptions) -> Result<CostField> {
    if sources.is_empty() {
        return Err(Error::invalid("cost distance needs at least one source cell"));
    }
    let n = cost_grid.len();
    let offset = opts.offset.unwrap_or(0.0);
    if !offset.is_finite() {
        return Err(Error::invalid("cost offset must be finite"));
    }
    let mut cost = vec![f64::NAN; n];
    let mut passable = vec![false; n];
    for idx in 0..n {
        if let Some(c) = cost_grid.valid(idx) {
            let c = c + offset;
            if c < 0.0 {
                let (r, col) = cost_grid.row_col(idx);
                return Err(Error::invalid(format!(
                    "negative cost-of-passage {c} at row {r}, col {col}; supply an offset to lift it"
                )));
            }
            cost[idx] = c;
            passable[idx] = true;
        }
    }

    let mut dist = vec![f64::INFINITY; n];
    let mut src = vec![usize::MAX; n];
    let mut heap = BinaryHeap::with_capacity(sources.len().max(1024));
    for &s in sources {
        if s >= n {
            return Err(Error::invalid(format!("source index {s} outside grid of {n} cells")));
        }
        if !passable[s] {
            let (r, c) = cost_grid.row_col(s);
            return Err(Error::invalid(format!("source cell (row {r}, col {c}) is nodata")));
        }
        if dist[s] > 0.0 || s < src[s] {
            dist[s] = 0.0;
            src[s] = s;
        }
    }
    for (cell, &s) in src.iter().enumerate() {
        if s == cell {
            heap.push(Entry { cost: 0.0, source: s, cell });
        }
    }

    let nrows = cost_grid.nrows() as isize;
    let ncols = cost_grid.ncols() as isize;
    const NEIGHBOURS: [(isize, isize, bool); 8] = [
        (-1, 0, false),
        (1, 0, false),
        (0, -1, false),
        (0, 1, false),
        (-1, -1, true),
        (-1, 1, true),
        (1, -1, true),
        (1, 1, true),
    ];

    while let Some(Entry { cost: d, source, cell }) = heap.pop() {
        if d != dist[cell] || source != src[cell] {
            continue;
        }
        let r = (cell / ncols as usize) as isize;
        let c = (cell % ncols as usize) as isize;
        let cu = cost[cell];
        for &(dr, dc, diagonal) in &NEIGHBOURS {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= nrows || nc >= ncols {
                continue;
            }
            let next = (nr * ncols + nc) as usize;
            if !passable[next] {
                continue;
            }
            let nd = d + step(cu, cost[next], diagonal);
            if nd < dist[next] || (nd == dist[next] && source < src[next]) {
                dist[next] = nd;
                src[next] = source;
                heap.push(Entry { cost: nd, source, cell: next });
            }
        }
    }

    let nodata = cost_grid.nodata();
    let values = dist
        .iter()
        .map(|&d| if d.is_finite() { d } else { nodata })
        .collect();
    let accumulated = cost_grid.with_values(values)?;
    let source = src
        .into_iter()
        .map(|s| (s != usize::MAX).then_some(s))
        .collect();
    Ok(CostField { accumulated, source })
}

/// Fine cells whose coarse parent is wet (`depth > wet_threshold`) and whose
/// fine cost cell is valid, in ascending linear order.
pub fn flood_sources(pair: &GridPair, coarse_depth: &Grid, wet_threshold: f64) -> Result<Vec<usize>> {
    coarse_depth.require_same_lattice(&pair.coarse, "coarse depth vs coarse elevation")?;
    if !(wet_threshold >= 0.0) {
        return Err(Error::invalid(format!("wet threshold must be >= 0, got {wet_threshold}")));
    }
    Ok((0..pair.fine.len())
        .filter(|&idx| {
            !pair.fine.is_nodata(idx)
                && coarse_depth
                    .valid(pair.parent(idx))
                    .is_some_and(|d| d > wet_threshold)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(nrows: usize, ncols: usize, values: Vec<f64>) -> Grid {
        Grid::new(nrows, ncols, 1.0, 0.0, 0.0, -9999.0, values).unwrap()
    }

    #[test]
    fn edge_cost_formula() {
        assert_eq!(edge_cost(2.0, 4.0, false).unwrap(), 3.0);
        assert_abs_diff_eq!(edge_cost(2.0, 4.0, true).unwrap(), 3.0 * SQRT_2, epsilon = 1e-15);
        assert_eq!(edge_cost(7.5, 7.5, false).unwrap(), 7.5);
        assert_eq!(edge_cost(1.0, 9.0, true).unwrap(), edge_cost(9.0, 1.0, true).unwrap());
        assert!(edge_cost(-1.0, 2.0, false).is_err());
        assert!(edge_cost(f64::INFINITY, 2.0, false).is_err());
    }

    #[test]
    fn strip_accumulates_edge_costs() {
        let g = grid(1, 3, vec![2.0, 4.0, 6.0]);
        let f = cost_distance(&g, &[0]).unwrap();
        assert_eq!(f.accumulated.values(), &[0.0, 3.0, 8.0]);
        assert!((0..3).all(|k| f.source(k) == Some(0)));
    }

    #[test]
    fn two_by_two_prefers_direct_step() {
        // row 0 is south: top row [1, 10], bottom row [1, 1]
        let g = grid(2, 2, vec![1.0, 1.0, 1.0, 10.0]);
        let top_left = g.index(1, 0);
        let top_right = g.index(1, 1);
        let f = cost_distance(&g, &[top_left]).unwrap();
        assert_eq!(f.cost(top_right), Some(5.5));
    }

    #[test]
    fn uniform_field_is_step_count() {
        let g = Grid::filled(1, 9, 1.0, 0.0, 0.0, 2.5).unwrap();
        let f = cost_distance(&g, &[0]).unwrap();
        for k in 0..9 {
            assert_abs_diff_eq!(f.accumulated.value(k), k as f64 * 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn ties_go_to_smallest_source() {
        let g = Grid::filled(1, 5, 1.0, 0.0, 0.0, 1.0).unwrap();
        let f = cost_distance(&g, &[4, 0]).unwrap();
        assert_eq!(f.source(2), Some(0));
        assert_eq!(f.source(3), Some(4));
    }

    #[test]
    fn nodata_is_impassable() {
        let g = grid(1, 3, vec![1.0, -9999.0, 1.0]);
        let f = cost_distance(&g, &[0]).unwrap();
        assert!(!f.reachable(1));
        assert!(!f.reachable(2));
        assert!(f.accumulated.is_nodata(2));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = grid(1, 3, vec![1.0, -2.0, 1.0]);
        assert!(cost_distance(&g, &[0]).is_err());
        assert!(cost_distance_with(&g, &[0], CostOptions { offset: Some(2.0) }).is_ok());
        let g = grid(1, 3, vec![1.0, 2.0, 1.0]);
        assert!(cost_distance(&g, &[]).is_err());
        assert!(cost_distance(&g, &[3]).is_err());
    }

    #[test]
    fn flood_sources_by_containment() {
        let fine = Grid::filled(4, 4, 5.0, 0.0, 0.0, 1.0).unwrap();
        let coarse = Grid::filled(2, 2, 10.0, 0.0, 0.0, 1.0).unwrap();
        let pair = GridPair::new(fine, coarse.clone()).unwrap();

        let depth = coarse.with_values(vec![0.0, 0.7, 0.0, 0.0]).unwrap();
        let s = flood_sources(&pair, &depth, 0.0).unwrap();
        let expected: Vec<usize> = vec![pair.fine.index(0, 2), pair.fine.index(0, 3), pair.fine.index(1, 2), pair.fine.index(1, 3)];
        assert_eq!(s, expected);

        let dry = coarse.with_values(vec![0.0; 4]).unwrap();
        assert!(flood_sources(&pair, &dry, 0.0).unwrap().is_empty());

        let wet = coarse.with_values(vec![0.2; 4]).unwrap();
        let all = flood_sources(&pair, &wet, 0.0).unwrap();
        assert_eq!(all.len(), 16);
        let f = cost_distance(&pair.fine, &all).unwrap();
        assert!(f.accumulated.values().iter().all(|&v| v == 0.0));

        let misaligned = Grid::filled(2, 3, 10.0, 0.0, 0.0, 1.0).unwrap();
        assert!(matches!(flood_sources(&pair, &misaligned, 0.0), Err(Error::Alignment(_))));
    }
}
