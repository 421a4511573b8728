//! Connected-component labelling and region geometry.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Pixel set of one connected region, stored as row-major indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub pixels: Vec<usize>,
}

fn flood(width: usize, height: usize, allowed: &[bool], start: usize, visited: &mut [bool]) -> Region {
    let mut queue = VecDeque::from([start]);
    visited[start] = true;
    let mut pixels = Vec::new();
    while let Some(p) = queue.pop_front() {
        pixels.push(p);
        let (x, y) = ((p % width) as isize, (p / width) as isize);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                continue;
            }
            let q = ny as usize * width + nx as usize;
            if allowed[q] && !visited[q] {
                visited[q] = true;
                queue.push_back(q);
            }
        }
    }
    pixels.sort_unstable();
    Region { pixels }
}

/// 8-connected components of the `true` pixels, in raster order of their first pixel.
pub fn components(width: usize, height: usize, allowed: &[bool]) -> Vec<Region> {
    assert_eq!(allowed.len(), width * height);
    let mut visited = vec![false; allowed.len()];
    let mut out = Vec::new();
    for p in 0..allowed.len() {
        if allowed[p] && !visited[p] {
            out.push(flood(width, height, allowed, p, &mut visited));
        }
    }
    out
}

/// Components of `allowed` that contain at least one seed pixel (hysteresis growth).
/// Seeds outside `allowed` are ignored.
pub fn grow_from_seeds(width: usize, height: usize, allowed: &[bool], seeds: &[bool]) -> Vec<Region> {
    assert_eq!(allowed.len(), width * height);
    assert_eq!(seeds.len(), width * height);
    let mut visited = vec![false; allowed.len()];
    let mut out = Vec::new();
    for p in 0..allowed.len() {
        if seeds[p] && allowed[p] && !visited[p] {
            out.push(flood(width, height, allowed, p, &mut visited));
        }
    }
    out
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self, width: usize) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(sx, sy), &p| {
            (sx + (p % width) as f64, sy + (p / width) as f64)
        });
        (sx / n, sy / n)
    }

    /// Major/minor axis ratio from the second central moments, treating each
    /// pixel as a unit square so single pixels and lines stay finite.
    pub fn elongation(&self, width: usize) -> f64 {
        let (cx, cy) = self.centroid(width);
        let n = self.pixels.len() as f64;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &p in &self.pixels {
            let dx = (p % width) as f64 - cx;
            let dy = (p / width) as f64 - cy;
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        let a = sxx / n + 1.0 / 12.0;
        let c = syy / n + 1.0 / 12.0;
        let b = sxy / n;
        let mean = 0.5 * (a + c);
        let diff = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let major = mean + diff;
        let minor = (mean - diff).max(f64::MIN_POSITIVE);
        (major / minor).sqrt()
    }

    /// Length of the boundary between the region and everything else, counted in
    /// unit pixel edges (an s-by-s square has perimeter 4s).
    pub fn perimeter(&self, width: usize, height: usize) -> usize {
        let mut inside = vec![false; width * height];
        for &p in &self.pixels {
            inside[p] = true;
        }
        perimeter_of(width, height, &inside)
    }

    /// `4 pi A / P^2` with the edge-count perimeter; in (0, pi/4] for pixel regions.
    pub fn compactness(&self, width: usize, height: usize) -> f64 {
        let p = self.perimeter(width, height) as f64;
        4.0 * std::f64::consts::PI * self.area() as f64 / (p * p)
    }
}

pub(crate) fn perimeter_of(width: usize, height: usize, inside: &[bool]) -> usize {
    let mut edges = 0;
    for y in 0..height {
        for x in 0..width {
            if !inside[y * width + x] {
                continue;
            }
            if x == 0 || !inside[y * width + x - 1] {
                edges += 1;
            }
            if x + 1 == width || !inside[y * width + x + 1] {
                edges += 1;
            }
            if y == 0 || !inside[(y - 1) * width + x] {
                edges += 1;
            }
            if y + 1 == height || !inside[(y + 1) * width + x] {
                edges += 1;
            }
        }
    }
    edges
}
