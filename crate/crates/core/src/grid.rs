//! Grid geometry: the polar quantization contract shared by every stage.
//!
//! Continuous grid coordinates are fractional bin positions: a point whose
//! radial coordinate lies in bin `i` has a continuous radial coordinate in
//! `[i, i + 1)`. BEV pixels are addressed by their integer index `(i, j)`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, Point};

/// Layout of the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Radial bins over `[d_min, d_max]`, angular bins over `[0, 2π)`.
    #[default]
    Polar,
    /// Square `[-d_max, d_max]²` split into `radial_bins` rows along x and
    /// `angular_bins` columns along y. Only meant for polar-vs-Cartesian
    /// comparisons.
    Cartesian,
}

/// What to do with points outside the configured range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    #[default]
    Drop,
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarGridConfig {
    #[serde(default)]
    pub kind: GridKind,
    pub d_min: f64,
    pub d_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// H
    pub radial_bins: usize,
    /// W
    pub angular_bins: usize,
    /// Z
    pub height_bins: usize,
    pub thing_classes: Vec<ClassId>,
    pub stuff_classes: Vec<ClassId>,
    pub ignore_class: ClassId,
    pub min_instance_points: usize,
    #[serde(default)]
    pub out_of_range: RangePolicy,
    /// Add a mirrored heatmap center for instances whose footprint crosses
    /// the angular seam at `j = 0`.
    #[serde(default)]
    pub mirror_seam_centers: bool,
}

impl PolarGridConfig {
    /// SemanticKITTI: 3–50 m, z in [-3, 1.5] m, 480×360×32 voxels.
    pub fn semantic_kitti() -> Self {
        Self {
            kind: GridKind::Polar,
            d_min: 3.0,
            d_max: 50.0,
            z_min: -3.0,
            z_max: 1.5,
            radial_bins: 480,
            angular_bins: 360,
            height_bins: 32,
            // car, bicycle, motorcycle, truck, other-vehicle, person,
            // bicyclist, motorcyclist
            thing_classes: (1..=8).collect(),
            stuff_classes: (9..=19).collect(),
            ignore_class: 0,
            min_instance_points: 50,
            out_of_range: RangePolicy::Drop,
            mirror_seam_centers: false,
        }
    }

    /// nuScenes: 0–50 m, z in [-5, 3] m, 10 thing and 6 stuff classes.
    pub fn nuscenes() -> Self {
        Self {
            d_min: 0.0,
            z_min: -5.0,
            z_max: 3.0,
            thing_classes: (1..=10).collect(),
            stuff_classes: (11..=16).collect(),
            min_instance_points: 20,
            ..Self::semantic_kitti()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let finite = [self.d_min, self.d_max, self.z_min, self.z_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return bad("grid ranges must be finite".into());
        }
        if self.d_min < 0.0 || self.d_min >= self.d_max {
            return bad(format!(
                "need 0 <= d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            ));
        }
        if self.z_min >= self.z_max {
            return bad(format!(
                "need z_min < z_max, got [{}, {}]",
                self.z_min, self.z_max
            ));
        }
        if self.radial_bins == 0 || self.angular_bins == 0 || self.height_bins == 0 {
            return bad("bin counts must be >= 1".into());
        }
        if self.min_instance_points == 0 {
            return bad("min_instance_points must be >= 1".into());
        }
        if let Some(c) = self
            .thing_classes
            .iter()
            .find(|c| self.stuff_classes.contains(c))
        {
            return bad(format!("class {c} is both thing and stuff"));
        }
        if self.thing_classes.contains(&self.ignore_class)
            || self.stuff_classes.contains(&self.ignore_class)
        {
            return bad(format!(
                "ignore class {} must not be a thing or stuff class",
                self.ignore_class
            ));
        }
        Ok(())
    }

    pub fn bev_dims(&self) -> (usize, usize) {
        (self.radial_bins, self.angular_bins)
    }

    pub fn voxel_dims(&self) -> (usize, usize, usize) {
        (self.radial_bins, self.angular_bins, self.height_bins)
    }

    pub fn roles(&self) -> ClassRoles {
        ClassRoles::new(self)
    }

    pub fn is_thing(&self, class: ClassId) -> bool {
        self.thing_classes.contains(&class)
    }

    pub fn is_stuff(&self, class: ClassId) -> bool {
        self.stuff_classes.contains(&class)
    }

    /// Continuous `(radial, angular, height)` grid coordinates of `p`, or
    /// `None` when the point falls outside the grid and the policy is
    /// [`RangePolicy::Drop`].
    pub fn grid_coords(&self, p: &Point) -> Option<[f64; 3]> {
        let clamp = self.out_of_range == RangePolicy::Clamp;
        let (a, b) = match self.kind {
            GridKind::Polar => {
                let (d, theta, _) = to_polar(p.x, p.y, p.z);
                let d = bounded(d, self.d_min, self.d_max, clamp)?;
                (
                    (d - self.d_min) * self.radial_bins as f64 / (self.d_max - self.d_min),
                    theta * self.angular_bins as f64 / TAU,
                )
            }
            GridKind::Cartesian => {
                let span = 2.0 * self.d_max;
                let x = bounded(p.x, -self.d_max, self.d_max, clamp)?;
                let y = bounded(p.y, -self.d_max, self.d_max, clamp)?;
                (
                    (x + self.d_max) * self.radial_bins as f64 / span,
                    (y + self.d_max) * self.angular_bins as f64 / span,
                )
            }
        };
        let z = bounded(p.z, self.z_min, self.z_max, clamp)?;
        let c = (z - self.z_min) * self.height_bins as f64 / (self.z_max - self.z_min);
        Some([a, b, c])
    }

    /// Voxel containing `p`; `None` is the out-of-range outcome.
    pub fn cell_of(&self, p: &Point) -> Option<CellIndex> {
        let [a, b, c] = self.grid_coords(p)?;
        Some(CellIndex {
            i: bin(a, self.radial_bins),
            j: bin(b, self.angular_bins),
            k: bin(c, self.height_bins),
        })
    }

    /// Angular wrap applies only on polar grids.
    pub fn angular_wraps(&self) -> bool {
        self.kind == GridKind::Polar
    }
}

fn bounded(v: f64, lo: f64, hi: f64, clamp: bool) -> Option<f64> {
    if (lo..=hi).contains(&v) {
        Some(v)
    } else if clamp && v.is_finite() {
        Some(v.clamp(lo, hi))
    } else {
        None
    }
}

fn bin(coord: f64, bins: usize) -> usize {
    // the upper boundary maps into the last bin
    (coord.floor().max(0.0) as usize).min(bins - 1)
}

/// Lookup table from class id to role, for hot loops.
#[derive(Debug, Clone)]
pub struct ClassRoles {
    thing: Vec<bool>,
    stuff: Vec<bool>,
    pub ignore: ClassId,
}

impl ClassRoles {
    fn new(cfg: &PolarGridConfig) -> Self {
        let len = cfg
            .thing_classes
            .iter()
            .chain(&cfg.stuff_classes)
            .map(|&c| c as usize + 1)
            .max()
            .unwrap_or(0);
        let mut thing = vec![false; len];
        let mut stuff = vec![false; len];
        for &c in &cfg.thing_classes {
            thing[c as usize] = true;
        }
        for &c in &cfg.stuff_classes {
            stuff[c as usize] = true;
        }
        Self {
            thing,
            stuff,
            ignore: cfg.ignore_class,
        }
    }

    #[inline]
    pub fn is_thing(&self, class: u32) -> bool {
        self.thing.get(class as usize).copied().unwrap_or(false)
    }

    #[inline]
    pub fn is_stuff(&self, class: u32) -> bool {
        self.stuff.get(class as usize).copied().unwrap_or(false)
    }
}

/// Voxel address: radial bin `i`, angular bin `j`, height bin `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl CellIndex {
    pub fn bev(&self) -> PixelIndex {
        PixelIndex {
            i: self.i,
            j: self.j,
        }
    }
}

/// BEV pixel address. Ordering is lexicographic on `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelIndex {
    pub i: usize,
    pub j: usize,
}

/// `(x, y, z)` to `(d, theta, z)` with `theta` in `[0, 2π)`.
pub fn to_polar(x: f64, y: f64, z: f64) -> (f64, f64, f64) {
    let d = x.hypot(y);
    if d == 0.0 {
        return (0.0, 0.0, z);
    }
    let mut theta = y.atan2(x);
    if theta < 0.0 {
        theta += TAU;
    }
    // -tiny + 2π rounds to 2π
    if theta >= TAU {
        theta = 0.0;
    }
    (d, theta, z)
}

pub fn from_polar(d: f64, theta: f64, z: f64) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    (d * c, d * s, z)
}
