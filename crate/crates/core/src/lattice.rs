//! 3D grids with closed walls, per-species count pools and slicing.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{Axis, Face, Placement};

/// The six lattice directions, paired so that `d ^ 1` is the opposite.
pub const DIRECTIONS: [[i32; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

#[inline]
pub fn opposite(d: usize) -> usize {
    d ^ 1
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("index {index} out of range for axis {axis:?} of size {size}")]
    SliceOutOfRange { axis: Axis, index: u32, size: u32 },
    #[error("point ({0}, {1}, {2}) outside the compartment")]
    PointOutOfBounds(u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [u32; 3],
}

impl Grid {
    pub fn new(dims: [u32; 3]) -> Self {
        Self { dims }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [u32; 3]) -> u32 {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }

    #[inline]
    pub fn coords(&self, i: u32) -> [u32; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && p[a] < self.dims[a] as i64)
    }

    /// Neighbour in direction `d`, or `None` across a wall.
    #[inline]
    pub fn neighbor(&self, i: u32, d: usize) -> Option<u32> {
        let [x, y, z] = self.coords(i);
        let v = DIRECTIONS[d];
        let n = [x as i64 + v[0] as i64, y as i64 + v[1] as i64, z as i64 + v[2] as i64];
        if self.contains(n) {
            Some(self.index([n[0] as u32, n[1] as u32, n[2] as u32]))
        } else {
            None
        }
    }

    /// Sites a placement may use, as an explicit list (the whole grid for uniform).
    pub fn placement_sites(&self, placement: &Placement) -> Result<Vec<u32>, LatticeError> {
        match *placement {
            Placement::Uniform {} => Ok((0..self.len() as u32).collect()),
            Placement::Point { x, y, z } => {
                if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
                    return Err(LatticeError::PointOutOfBounds(x, y, z));
                }
                Ok(vec![self.index([x, y, z])])
            }
            Placement::Wall { axis, face } => {
                let a = axis.index();
                let fixed = match face {
                    Face::Low => 0,
                    Face::High => self.dims[a] - 1,
                };
                Ok((0..self.len() as u32)
                    .filter(|&i| self.coords(i)[a] == fixed)
                    .collect())
            }
        }
    }

    /// The two free axes of a slice perpendicular to `axis`, in (row, column) order.
    pub fn slice_axes(axis: Axis) -> (usize, usize) {
        match axis {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }

    pub fn check_slice(&self, axis: Axis, index: u32) -> Result<(), LatticeError> {
        let size = self.dims[axis.index()];
        if index >= size {
            Err(LatticeError::SliceOutOfRange { axis, index, size })
        } else {
            Ok(())
        }
    }

    /// Fills a dense row-major slice from a per-site value function.
    pub fn slice(&self, axis: Axis, index: u32, mut f: impl FnMut(u32) -> f64) -> Result<Slice, LatticeError> {
        self.check_slice(axis, index)?;
        let (ra, ca) = Self::slice_axes(axis);
        let (rows, cols) = (self.dims[ra], self.dims[ca]);
        let mut data = Vec::with_capacity((rows * cols) as usize);
        for r in 0..rows {
            for c in 0..cols {
                let mut p = [0u32; 3];
                p[axis.index()] = index;
                p[ra] = r;
                p[ca] = c;
                data.push(f(self.index(p)));
            }
        }
        Ok(Slice {
            axis,
            index,
            rows,
            cols,
            data,
        })
    }
}

/// A dense row-major 2D cut through a compartment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub axis: Axis,
    pub index: u32,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn get(&self, r: u32, c: u32) -> f64 {
        self.data[(r * self.cols + c) as usize]
    }
}

/// Binomial draw that stays cheap for the tiny `n` common on a lattice.
#[inline]
pub fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u32, p: f64) -> u32 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else if n < 12 {
        (0..n).filter(|_| rng.random::<f64>() < p).count() as u32
    } else {
        Binomial::new(n as u64, p).expect("valid binomial").sample(rng) as u32
    }
}

/// Poisson draw for initial molecule placement.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(lambda).expect("positive rate").sample(rng) as u32
}

/// Counts of one molecular species on every site, with a list of the
/// sites that may hold molecules so sparse populations stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    counts: Vec<u32>,
    active: Vec<u32>,
    listed: Vec<bool>,
    total: u64,
}

impl Pool {
    pub fn new(sites: usize) -> Self {
        Self {
            counts: vec![0; sites],
            active: Vec::new(),
            listed: vec![false; sites],
            total: 0,
        }
    }

    #[inline]
    pub fn get(&self, site: u32) -> u32 {
        self.counts[site as usize]
    }

    #[inline]
    pub fn total(&self) -> u64 {
        self.total
    }

    #[inline]
    pub fn add(&mut self, site: u32, n: u32) {
        if n == 0 {
            return;
        }
        let s = site as usize;
        self.counts[s] += n;
        self.total += n as u64;
        if !self.listed[s] {
            self.listed[s] = true;
            self.active.push(site);
        }
    }

    /// Removes up to `n`, returning how many were removed.
    #[inline]
    pub fn remove(&mut self, site: u32, n: u32) -> u32 {
        let c = &mut self.counts[site as usize];
        let k = n.min(*c);
        *c -= k;
        self.total -= k as u64;
        k
    }

    /// Drops empty sites from the active list and returns it, in insertion order.
    pub fn active_sites(&mut self) -> &[u32] {
        let counts = &self.counts;
        let listed = &mut self.listed;
        self.active.retain(|&s| {
            let keep = counts[s as usize] > 0;
            if !keep {
                listed[s as usize] = false;
            }
            keep
        });
        &self.active
    }

    /// Active sites in ascending order, for order-independent output.
    pub fn sorted_sites(&mut self) -> Vec<u32> {
        let mut v = self.active_sites().to_vec();
        v.sort_unstable();
        v
    }
}
