//! Point grouping, max-pooled BEV features, voxel label voting and the
//! polar visibility feature.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::grid::{to_polar, CellIndex, GridKind, PolarGridConfig};
use crate::tensor::BevTensor;

/// Width of the default per-point feature row: x, y, z, r, d, θ and the
/// offsets to the voxel center along the three grid axes.
pub const DEFAULT_FEATURE_DIM: usize = 9;

pub const VIS_UNKNOWN: u8 = 0;
pub const VIS_VISIBLE: u8 = 1;
pub const VIS_OCCLUDED: u8 = 2;

/// Points bucketed by BEV cell.
///
/// Buckets are stored CSR-style: occupied cells in ascending flat-index
/// order, member point indices ascending within each bucket.
#[derive(Debug, Clone)]
pub struct GroupedCloud {
    dims: (usize, usize, usize),
    cells: Vec<Option<CellIndex>>,
    occupied: Vec<usize>,
    starts: Vec<usize>,
    members: Vec<usize>,
    features: Vec<f32>,
    feature_dim: usize,
}

impl GroupedCloud {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn num_points(&self) -> usize {
        self.cells.len()
    }

    /// Voxel of point `idx`, `None` if it was dropped as out of range.
    pub fn cell(&self, idx: usize) -> Option<CellIndex> {
        self.cells[idx]
    }

    pub fn cells(&self) -> &[Option<CellIndex>] {
        &self.cells
    }

    pub fn in_range_count(&self) -> usize {
        self.members.len()
    }

    /// `(i, j, member point indices)` for every occupied BEV cell.
    pub fn buckets(&self) -> impl Iterator<Item = (usize, usize, &[usize])> + '_ {
        let w = self.dims.1;
        self.occupied.iter().enumerate().map(move |(b, &flat)| {
            (
                flat / w,
                flat % w,
                &self.members[self.starts[b]..self.starts[b + 1]],
            )
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_row(&self, idx: usize) -> &[f32] {
        &self.features[idx * self.feature_dim..(idx + 1) * self.feature_dim]
    }

    /// Replace the per-point features with externally computed rows
    /// (`num_points × dim`, row-major).
    pub fn with_features(mut self, rows: Vec<f32>, dim: usize) -> Result<Self> {
        if rows.len() != self.cells.len() * dim {
            return Err(Error::FeatureDim {
                expected: self.cells.len() * dim,
                found: rows.len(),
            });
        }
        self.features = rows;
        self.feature_dim = dim;
        Ok(self)
    }
}

/// Assign every in-range point to its BEV cell and compute the default
/// feature rows.
pub fn group(cloud: &PointCloud, cfg: &PolarGridConfig) -> GroupedCloud {
    let dims = cfg.voxel_dims();
    let (h, w, _) = dims;
    let cells: Vec<Option<CellIndex>> = cloud.points.iter().map(|p| cfg.cell_of(p)).collect();

    // counting sort over flat BEV indices keeps buckets ordered
    let mut counts = vec![0usize; h * w];
    for c in cells.iter().flatten() {
        counts[c.i * w + c.j] += 1;
    }
    let mut occupied = Vec::new();
    let mut starts = vec![0];
    let mut slot = vec![0usize; h * w];
    let mut total = 0;
    for (flat, &n) in counts.iter().enumerate() {
        if n > 0 {
            occupied.push(flat);
            slot[flat] = total;
            total += n;
            starts.push(total);
        }
    }
    let mut members = vec![0; total];
    for (idx, c) in cells.iter().enumerate() {
        if let Some(c) = c {
            let flat = c.i * w + c.j;
            members[slot[flat]] = idx;
            slot[flat] += 1;
        }
    }

    let mut features = vec![0f32; cells.len() * DEFAULT_FEATURE_DIM];
    for (idx, (p, c)) in cloud.points.iter().zip(&cells).enumerate() {
        let Some(c) = c else { continue };
        let (d, theta, _) = to_polar(p.x, p.y, p.z);
        let [ci, cj, ck] = voxel_center(cfg, c);
        let (a, b) = match cfg.kind {
            GridKind::Polar => (d, theta),
            GridKind::Cartesian => (p.x, p.y),
        };
        let row = [p.x, p.y, p.z, p.r, d, theta, a - ci, b - cj, p.z - ck];
        for (dst, v) in features[idx * DEFAULT_FEATURE_DIM..].iter_mut().zip(row) {
            *dst = v as f32;
        }
    }

    GroupedCloud {
        dims,
        cells,
        occupied,
        starts,
        members,
        features,
        feature_dim: DEFAULT_FEATURE_DIM,
    }
}

/// Voxel center in the grid's own metric axes: `(d, θ, z)` for polar,
/// `(x, y, z)` for Cartesian grids.
fn voxel_center(cfg: &PolarGridConfig, c: &CellIndex) -> [f64; 3] {
    let z = cfg.z_min + (c.k as f64 + 0.5) * (cfg.z_max - cfg.z_min) / cfg.height_bins as f64;
    match cfg.kind {
        GridKind::Polar => [
            cfg.d_min + (c.i as f64 + 0.5) * (cfg.d_max - cfg.d_min) / cfg.radial_bins as f64,
            (c.j as f64 + 0.5) * TAU / cfg.angular_bins as f64,
            z,
        ],
        GridKind::Cartesian => {
            let span = 2.0 * cfg.d_max;
            [
                -cfg.d_max + (c.i as f64 + 0.5) * span / cfg.radial_bins as f64,
                -cfg.d_max + (c.j as f64 + 0.5) * span / cfg.angular_bins as f64,
                z,
            ]
        }
    }
}

/// Elementwise max of the member feature rows of every occupied cell;
/// empty cells hold zeros.
pub fn scatter_max(grouped: &GroupedCloud, feature_dim: usize) -> Result<BevTensor<f32>> {
    scatter_max_with_fill(grouped, feature_dim, 0.0)
}

pub fn scatter_max_with_fill(
    grouped: &GroupedCloud,
    feature_dim: usize,
    fill: f32,
) -> Result<BevTensor<f32>> {
    if feature_dim != grouped.feature_dim {
        return Err(Error::FeatureDim {
            expected: grouped.feature_dim,
            found: feature_dim,
        });
    }
    let (h, w, _) = grouped.dims;
    let mut out = BevTensor::filled(vec![h, w, feature_dim], fill);
    for (i, j, members) in grouped.buckets() {
        let dst = out.pixel_mut(i, j);
        dst.copy_from_slice(grouped.feature_row(members[0]));
        for &m in &members[1..] {
            for (d, &v) in dst.iter_mut().zip(grouped.feature_row(m)) {
                if v > *d {
                    *d = v;
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel modal class; ties go to the lowest class id, empty voxels get
/// the ignore class.
pub fn voxel_labels(cloud: &PointCloud, cfg: &PolarGridConfig) -> Result<BevTensor<u32>> {
    let semantic = cloud.semantic()?;
    let (h, w, z) = cfg.voxel_dims();
    let mut pairs: Vec<(usize, u16)> = cloud
        .points
        .iter()
        .zip(semantic)
        .filter_map(|(p, &class)| {
            let c = cfg.cell_of(p)?;
            Some(((c.i * w + c.j) * z + c.k, class))
        })
        .collect();
    pairs.sort_unstable();

    let mut out = BevTensor::filled(vec![h, w, z], cfg.ignore_class as u32);
    let data = out.data_mut();
    for voxel in pairs.chunk_by(|a, b| a.0 == b.0) {
        let mut best = (0usize, 0u16);
        for run in voxel.chunk_by(|a, b| a.1 == b.1) {
            // ascending class order: strict > keeps the lowest id on ties
            if run.len() > best.0 {
                best = (run.len(), run[0].1);
            }
        }
        data[voxel[0].0] = best.1 as u32;
    }
    Ok(out)
}

/// Ray-based visibility per voxel column `(j, k)`: every radial bin up to
/// the farthest occupied one is visible, bins beyond it are occluded, and
/// columns without returns stay unknown.
pub fn visibility(cloud: &PointCloud, cfg: &PolarGridConfig) -> BevTensor<u8> {
    let (h, w, z) = cfg.voxel_dims();
    // farthest occupied radial bin + 1 per column, 0 = empty column
    let mut reach = vec![0usize; w * z];
    for p in &cloud.points {
        if let Some(c) = cfg.cell_of(p) {
            let col = &mut reach[c.j * z + c.k];
            *col = (*col).max(c.i + 1);
        }
    }
    let mut out = BevTensor::filled(vec![h, w, z], VIS_UNKNOWN);
    out.data_mut()
        .par_chunks_mut(w * z)
        .enumerate()
        .for_each(|(i, row)| {
            for (v, &r) in row.iter_mut().zip(&reach) {
                *v = match r {
                    0 => VIS_UNKNOWN,
                    r if i < r => VIS_VISIBLE,
                    _ => VIS_OCCLUDED,
                };
            }
        });
    out
}
