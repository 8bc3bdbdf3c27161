//! Pyramid region layout and small-to-medium assignment.

use serde::{Deserialize, Serialize};
use vpr_tensor::{DType, Tensor};

use crate::config::NUM_REGIONS;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Global,
    Medium,
    Small,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Global, Level::Medium, Level::Small];

    pub fn name(self) -> &'static str {
        match self {
            Level::Global => "global",
            Level::Medium => "medium",
            Level::Small => "small",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Regions per side at this level.
    pub fn splits(self) -> usize {
        self.index() + 1
    }

    /// Position of the level's first region in the canonical order.
    pub fn offset(self) -> usize {
        match self {
            Level::Global => 0,
            Level::Medium => 1,
            Level::Small => 5,
        }
    }

    pub fn count(self) -> usize {
        self.splits() * self.splits()
    }
}

/// A rectangular region in map coordinates, where the map spans
/// `[0, w] × [0, h]`, sampled on a `grid × grid` lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub level: Level,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub grid: usize,
}

impl RoiSpec {
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Closed-interval containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Evenly spaced relative coordinates in `[-1, 1]`, endpoints included.
    pub fn rel_coords(&self) -> Vec<f64> {
        let n = self.grid;
        if n == 1 {
            return vec![0.0];
        }
        (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
    }

    /// Undeformed sampling lattice `[grid, grid, 2]` in normalized `(x, y)`
    /// coordinates of a `map_h × map_w` map.
    pub fn base_grid(&self, map_h: usize, map_w: usize) -> Tensor {
        let rel = self.rel_coords();
        let (cx, cy) = self.center();
        let mut data = Vec::with_capacity(rel.len() * rel.len() * 2);
        let (mw, mh) = (map_w as f64, map_h as f64);
        // same arithmetic as the deformed lattice, so identity parameters
        // reproduce it bit for bit
        for &ry in &rel {
            for &rx in &rel {
                data.push(rx * (self.width() / mw) + (2.0 * cx / mw - 1.0));
                data.push(ry * (self.height() / mh) + (2.0 * cy / mh - 1.0));
            }
        }
        Tensor::new(&[self.grid, self.grid, 2], data, DType::F64).expect("grid shape")
    }
}

/// The 14 regions in canonical order: global, 2×2 medium row-major, 3×3
/// small row-major. Splits are even and may fall between pixels.
pub fn build_pyramid_rois(map_h: usize, map_w: usize, grid_sizes: [usize; 3]) -> Result<Vec<RoiSpec>> {
    if map_h < 3 || map_w < 3 {
        return Err(config(format!("feature map {map_h}×{map_w} is smaller than 3×3")));
    }
    if grid_sizes.contains(&0) {
        return Err(config("region grid sizes must be positive"));
    }
    let mut rois = Vec::with_capacity(NUM_REGIONS);
    for level in Level::ALL {
        let k = level.splits();
        let (tw, th) = (map_w as f64 / k as f64, map_h as f64 / k as f64);
        for r in 0..k {
            for c in 0..k {
                rois.push(RoiSpec {
                    level,
                    x1: c as f64 * tw,
                    y1: r as f64 * th,
                    x2: (c + 1) as f64 * tw,
                    y2: (r + 1) as f64 * th,
                    grid: grid_sizes[level.index()],
                });
            }
        }
    }
    Ok(rois)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Medium index for each small-region centre: containment in the original
/// medium bounds first, ties and misses resolved by the nearest medium
/// centre, then by the lower index.
pub fn assign_smalls(small_centers: &[(f64, f64)], mediums: &[RoiSpec]) -> Vec<usize> {
    small_centers
        .iter()
        .map(|&c| {
            let containing: Vec<usize> = (0..mediums.len()).filter(|&m| mediums[m].contains(c.0, c.1)).collect();
            let candidates: Vec<usize> = if containing.is_empty() {
                (0..mediums.len()).collect()
            } else {
                containing
            };
            let mut best = candidates[0];
            for &m in &candidates[1..] {
                if dist2(c, mediums[m].center()) < dist2(c, mediums[best].center()) {
                    best = m;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_map_tiles() {
        let r = build_pyramid_rois(16, 16, [8, 4, 3]).unwrap();
        assert_eq!(r.len(), 14);
        assert_eq!((r[0].x1, r[0].y1, r[0].x2, r[0].y2), (0.0, 0.0, 16.0, 16.0));
        for m in &r[1..5] {
            assert_eq!((m.width(), m.height()), (8.0, 8.0));
        }
        for s in &r[5..] {
            assert!((s.width() - 16.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(r[2].x1, 8.0);
        assert_eq!(r[3].y1, 8.0);
    }

    #[test]
    fn fifteen_map_small_regions_are_five_wide() {
        let r = build_pyramid_rois(15, 15, [8, 4, 3]).unwrap();
        for s in &r[5..] {
            assert_eq!((s.width(), s.height()), (5.0, 5.0));
        }
        assert_eq!(r[12].x1, 5.0);
        assert_eq!(r[12].y1, 10.0);
    }

    #[test]
    fn tiny_map_rejected() {
        assert!(build_pyramid_rois(2, 5, [8, 4, 3]).is_err());
    }

    #[test]
    fn global_base_grid_spans_normalized_range() {
        let r = build_pyramid_rois(4, 4, [3, 3, 3]).unwrap();
        let g = r[0].base_grid(4, 4);
        assert_eq!(g.data()[..6], [-1.0, -1.0, 0.0, -1.0, 1.0, -1.0]);
        assert_eq!(g.get(&[2, 2, 1]), 1.0);
    }

    #[test]
    fn far_centre_goes_to_nearest_medium() {
        let r = build_pyramid_rois(6, 6, [3, 3, 3]).unwrap();
        assert_eq!(
            assign_smalls(&[(7.0, 6.5), (-1.0, -1.0), (-1.0, 7.0)], &r[1..5]),
            vec![3, 0, 2]
        );
    }
}
