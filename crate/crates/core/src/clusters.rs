//! Connected clusters of cells on the lattice and surface placement of
//! another cell type relative to them.

use crate::lattice::{Grid, DIRECTIONS};
use crate::model::LabelId;
use crate::World;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub sites: Vec<u32>,
    /// 1 + largest Euclidean distance between two member sites.
    pub diameter: f64,
}

/// Which sites count as adjacent when growing a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// The six face neighbours.
    Face,
    /// All 26 sites of the surrounding cube.
    Full,
}

/// Connected components of the sites where `member` holds.
pub fn clusters(grid: &Grid, conn: Connectivity, member: impl Fn(u32) -> bool) -> Vec<Cluster> {
    let n = grid.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n as u32 {
        if seen[start as usize] || !member(start) {
            continue;
        }
        seen[start as usize] = true;
        let mut stack = vec![start];
        let mut sites = Vec::new();
        while let Some(s) = stack.pop() {
            sites.push(s);
            let p = grid.coords(s);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        if conn == Connectivity::Face && dx.abs() + dy.abs() + dz.abs() != 1 {
                            continue;
                        }
                        let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                        if !grid.contains(q) {
                            continue;
                        }
                        let j = grid.index([q[0] as u32, q[1] as u32, q[2] as u32]);
                        if !seen[j as usize] && member(j) {
                            seen[j as usize] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        sites.sort_unstable();
        let diameter = 1.0 + max_distance(grid, &sites);
        out.push(Cluster { sites, diameter });
    }
    out
}

fn max_distance(grid: &Grid, sites: &[u32]) -> f64 {
    let pts: Vec<[f64; 3]> = sites
        .iter()
        .map(|&s| {
            let c = grid.coords(s);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
            best = best.max(d);
        }
    }
    best.sqrt()
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median of `values` where each value counts `weights[i]` times.
pub fn weighted_median(values: &[f64], weights: &[usize]) -> Option<f64> {
    let mut v: Vec<f64> = values
        .iter()
        .zip(weights)
        .flat_map(|(&x, &w)| std::iter::repeat_n(x, w))
        .collect();
    median(&mut v)
}

/// Sites whose six face neighbours all exist and satisfy `member`.
pub fn is_interior(grid: &Grid, site: u32, member: &impl Fn(u32) -> bool) -> bool {
    (0..DIRECTIONS.len()).all(|d| grid.neighbor(site, d).is_some_and(member))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// Diameters of all clusters over every group.
    pub diameters: Vec<f64>,
    pub sizes: Vec<usize>,
    pub median_diameter: Option<f64>,
    /// Median over member cells of the diameter of the cell's cluster.
    pub cell_median_diameter: Option<f64>,
    /// Probe cells whose six neighbours all belong to some group.
    pub probe_interior: f64,
    /// The same fraction for a probe placed uniformly over non-member sites.
    pub uniform_interior: f64,
    pub probe_cells: usize,
}

/// Clusters each label group separately (a cluster holds cells of one group
/// only) and measures how often `probe` cells sit inside cells with labels
/// in `interior_of`, against uniform placement over the remaining sites.
///
/// Clusters smaller than `min_size` are left out of the diameter statistics.
pub fn cluster_report(
    world: &World,
    comp: usize,
    groups: &[&[LabelId]],
    interior_of: &[LabelId],
    probe: LabelId,
    conn: Connectivity,
    min_size: usize,
) -> ClusterReport {
    let grid = world.compartments()[comp].grid;
    let mut label = vec![None; grid.len()];
    for cell in world.cells().filter(|x| x.comp as usize == comp) {
        label[cell.site as usize] = Some(cell.label);
    }
    let (mut diameters, mut sizes) = (Vec::new(), Vec::new());
    for g in groups {
        let member = |s: u32| label[s as usize].is_some_and(|l| g.contains(&l));
        for c in clusters(&grid, conn, member).into_iter().filter(|c| c.sites.len() >= min_size) {
            diameters.push(c.diameter);
            sizes.push(c.sites.len());
        }
    }
    let member = |s: u32| label[s as usize].is_some_and(|l| interior_of.contains(&l));
    let (mut inner, mut probes) = (0usize, 0usize);
    let (mut open_inner, mut open) = (0usize, 0usize);
    for s in 0..grid.len() as u32 {
        if member(s) {
            continue;
        }
        let interior = is_interior(&grid, s, &member);
        open += 1;
        open_inner += interior as usize;
        if label[s as usize] == Some(probe) {
            probes += 1;
            inner += interior as usize;
        }
    }
    let mut sorted = diameters.clone();
    ClusterReport {
        median_diameter: median(&mut sorted),
        cell_median_diameter: weighted_median(&diameters, &sizes),
        diameters,
        sizes,
        probe_interior: if probes > 0 { inner as f64 / probes as f64 } else { 0.0 },
        uniform_interior: if open > 0 { open_inner as f64 / open as f64 } else { 0.0 },
        probe_cells: probes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_sites_connect() {
        let g = Grid::new([4, 4, 1]);
        let on = [g.index([0, 0, 0]), g.index([1, 1, 0]), g.index([3, 3, 0])];
        let cl = clusters(&g, Connectivity::Full, |s| on.contains(&s));
        assert_eq!(clusters(&g, Connectivity::Face, |s| on.contains(&s)).len(), 3);
        assert_eq!(cl.len(), 2);
        let big = cl.iter().find(|c| c.sites.len() == 2).unwrap();
        assert!((big.diameter - (1.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!(cl.iter().any(|c| c.diameter == 1.0));
    }

    #[test]
    fn interior_needs_all_faces() {
        let g = Grid::new([3, 3, 3]);
        let centre = g.index([1, 1, 1]);
        assert!(is_interior(&g, centre, &|s| s != centre));
        assert!(!is_interior(&g, g.index([0, 1, 1]), &|_| true));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
        assert_eq!(weighted_median(&[1.0, 5.0], &[1, 3]), Some(5.0));
        assert_eq!(weighted_median(&[1.0, 5.0], &[1, 1]), Some(3.0));
    }
}
