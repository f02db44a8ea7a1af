//! Finite lattices: periodic tori `T_L` and open rectangular windows of `Z^d`.
//!
//! Sites are stored row-major with the last axis fastest. Windows are used to
//! hold finitely supported configurations of `Z^d`; everything outside the
//! window is taken to equal a fixed background spin.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    shape: Vec<usize>,
    strides: Vec<usize>,
    periodic: bool,
}

impl Lattice {
    /// The torus `T_L` in dimension `d`.
    pub fn torus(d: usize, l: usize) -> Self {
        Self::build(vec![l; d], true)
    }

    /// An open window of `Z^d` with the given side lengths.
    pub fn window(shape: Vec<usize>) -> Self {
        Self::build(shape, false)
    }

    fn build(shape: Vec<usize>, periodic: bool) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&s| s > 0));
        let mut strides = vec![1; shape.len()];
        for k in (0..shape.len() - 1).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        Lattice {
            shape,
            strides,
            periodic,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Side of a torus (first axis for windows).
    pub fn side(&self) -> usize {
        self.shape[0]
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn coords(&self, i: usize) -> Vec<i64> {
        self.shape
            .iter()
            .zip(&self.strides)
            .map(|(&s, &st)| ((i / st) % s) as i64)
            .collect()
    }

    /// Index of a coordinate vector; wraps on the torus, `None` outside a window.
    pub fn index(&self, c: &[i64]) -> Option<usize> {
        let mut i = 0;
        for ((&x, &s), &st) in c.iter().zip(&self.shape).zip(&self.strides) {
            let s = s as i64;
            let x = if self.periodic {
                x.rem_euclid(s)
            } else if (0..s).contains(&x) {
                x
            } else {
                return None;
            };
            i += x as usize * st;
        }
        Some(i)
    }

    pub fn shift(&self, i: usize, off: &[i64]) -> Option<usize> {
        let c: Vec<i64> = self.coords(i).iter().zip(off).map(|(a, b)| a + b).collect();
        self.index(&c)
    }

    /// Nearest neighbours of `i` inside the lattice, without duplicates.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let c = self.coords(i);
        let mut out = Vec::with_capacity(2 * self.dim());
        for k in 0..self.dim() {
            for delta in [-1i64, 1] {
                let mut n = c.clone();
                n[k] += delta;
                if let Some(j) = self.index(&n) {
                    if j != i && !out.contains(&j) {
                        out.push(j);
                    }
                }
            }
        }
        out
    }

    /// Extent along each axis, in sites. On the torus this is the shortest
    /// circular arc covering the projection.
    pub fn extents(&self, sites: &[usize]) -> Vec<usize> {
        (0..self.dim())
            .map(|k| {
                let mut xs: Vec<usize> = sites.iter().map(|&i| (i / self.strides[k]) % self.shape[k]).collect();
                xs.sort_unstable();
                xs.dedup();
                if xs.is_empty() {
                    return 0;
                }
                if !self.periodic {
                    return xs[xs.len() - 1] - xs[0] + 1;
                }
                let l = self.shape[k];
                let mut max_gap = l - 1 - xs[xs.len() - 1] + xs[0];
                for w in xs.windows(2) {
                    max_gap = max_gap.max(w[1] - w[0] - 1);
                }
                l - max_gap
            })
            .collect()
    }

    /// Side of the smallest enclosing cubic box, in sites.
    pub fn diameter(&self, sites: &[usize]) -> usize {
        self.extents(sites).into_iter().max().unwrap_or(0)
    }

    /// Nearest-neighbour connected components of the sites marked in `mask`,
    /// ordered by smallest member; members sorted.
    pub fn components(&self, mask: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut head = 0;
            while head < comp.len() {
                let v = comp[head];
                head += 1;
                for w in self.neighbors(v) {
                    if mask[w] && !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Sites of `set` having a nearest neighbour outside `set`.
    pub fn inner_boundary(&self, set: &[bool]) -> Vec<bool> {
        (0..self.len())
            .map(|i| set[i] && self.neighbors(i).iter().any(|&j| !set[j]))
            .collect()
    }

    /// Translate of site `i` by the site `by` viewed as a vector (torus only).
    pub fn translate(&self, i: usize, by: usize) -> usize {
        assert!(self.periodic);
        let c: Vec<i64> = self.coords(i).iter().zip(self.coords(by)).map(|(a, b)| a + b).collect();
        self.index(&c).unwrap()
    }
}

/// All offsets of the cube `[lo, hi]^d`, last axis fastest.
pub fn cube_offsets(d: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::with_capacity(d)];
    for _ in 0..d {
        let mut next = Vec::with_capacity(out.len() * (hi - lo + 1) as usize);
        for v in &out {
            for x in lo..=hi {
                let mut w = v.clone();
                w.push(x);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Side of the smallest cubic box enclosing a finite set of `Z^d` points.
pub fn zd_diameter(points: &[Vec<i64>]) -> usize {
    if points.is_empty() {
        return 0;
    }
    let d = points[0].len();
    (0..d)
        .map(|k| {
            let lo = points.iter().map(|p| p[k]).min().unwrap();
            let hi = points.iter().map(|p| p[k]).max().unwrap();
            (hi - lo + 1) as usize
        })
        .max()
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_indexing_wraps() {
        let t = Lattice::torus(2, 5);
        assert_eq!(t.len(), 25);
        assert_eq!(t.index(&[-1, 0]), Some(20));
        assert_eq!(t.coords(7), vec![1, 2]);
        assert_eq!(t.neighbors(0).len(), 4);
        let t3 = Lattice::torus(2, 3);
        assert_eq!(t3.neighbors(4).len(), 4);
    }

    #[test]
    fn window_indexing_is_open() {
        let w = Lattice::window(vec![3, 4]);
        assert_eq!(w.index(&[3, 0]), None);
        assert_eq!(w.neighbors(0).len(), 2);
    }

    #[test]
    fn circular_extent_takes_shortest_arc() {
        let t = Lattice::torus(1, 10);
        assert_eq!(t.diameter(&[9, 0, 1]), 3);
        assert_eq!(t.diameter(&[0, 5]), 6);
        let w = Lattice::window(vec![10]);
        assert_eq!(w.diameter(&[9, 0, 1]), 10);
    }

    #[test]
    fn components_split_on_gaps() {
        let t = Lattice::torus(1, 8);
        let mut mask = vec![false; 8];
        for i in [0, 1, 4, 7] {
            mask[i] = true;
        }
        assert_eq!(t.components(&mask), vec![vec![0, 1, 7], vec![4]]);
    }

    #[test]
    fn cube_offsets_count() {
        assert_eq!(cube_offsets(2, -1, 1).len(), 9);
        assert_eq!(cube_offsets(3, 0, 1).len(), 8);
        assert_eq!(zd_diameter(&[vec![0, 0], vec![2, -1]]), 3);
    }
}
