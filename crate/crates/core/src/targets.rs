//! Center heatmaps and center-offset fields on the BEV grid.
//!
//! All distances here are Euclidean in grid-index space: pixel `(i, j)`
//! sits at planar coordinates `(i, j)` and instance centers are fractional
//! grid coordinates.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::cloud::{ClassId, InstanceId, PointCloud};
use crate::error::{Error, Result};
use crate::grid::PolarGridConfig;
use crate::tensor::BevTensor;

/// Heatmap values vanish outside `±WINDOW_SIGMAS·σ` of every center.
pub const WINDOW_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetParams {
    /// Gaussian width in grid cells.
    pub sigma: f64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self { sigma: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSummary {
    pub id: InstanceId,
    pub class: ClassId,
    /// Mass center in continuous grid coordinates `(radial, angular)`.
    pub center: [f64; 2],
    pub points: usize,
    /// The instance's angular extent crosses `j = 0`.
    pub crosses_seam: bool,
}

impl InstanceSummary {
    /// Copies of the center used for the heatmap: the center itself, plus
    /// its images one grid width away when mirroring applies.
    fn center_images(&self, cfg: &PolarGridConfig) -> Vec<[f64; 2]> {
        let mut out = vec![self.center];
        if cfg.mirror_seam_centers && self.crosses_seam {
            let w = cfg.angular_bins as f64;
            out.push([self.center[0], self.center[1] - w]);
            out.push([self.center[0], self.center[1] + w]);
        }
        out
    }

    /// The center image closest to pixel column `j`.
    fn nearest_center(&self, j: usize, cfg: &PolarGridConfig) -> [f64; 2] {
        self.center_images(cfg)
            .into_iter()
            .min_by(|a, b| {
                (a[1] - j as f64)
                    .abs()
                    .total_cmp(&(b[1] - j as f64).abs())
            })
            .unwrap_or(self.center)
    }
}

/// One summary per instance id > 0 with at least one in-range point whose
/// modal class is a thing class, sorted by id.
pub fn instance_summaries(cloud: &PointCloud, cfg: &PolarGridConfig) -> Result<Vec<InstanceSummary>> {
    let semantic = cloud.semantic()?;
    let instance = cloud.instance()?;

    #[derive(Default)]
    struct Acc {
        radial: f64,
        angular: Vec<f64>,
        classes: BTreeMap<ClassId, usize>,
    }
    let mut accs: BTreeMap<InstanceId, Acc> = BTreeMap::new();
    for ((p, &class), &id) in cloud.points.iter().zip(semantic).zip(instance) {
        if id == 0 {
            continue;
        }
        let Some([a, b, _]) = cfg.grid_coords(p) else { continue };
        let acc = accs.entry(id).or_default();
        acc.radial += a;
        acc.angular.push(b);
        *acc.classes.entry(class).or_default() += 1;
    }

    let w = cfg.angular_bins as f64;
    let mut out = Vec::with_capacity(accs.len());
    for (id, acc) in accs {
        // BTreeMap iterates ascending, so `>` keeps the lowest class on ties
        let class = acc
            .classes
            .iter()
            .fold((0, 0), |best, (&c, &n)| if n > best.1 { (c, n) } else { best })
            .0;
        if !cfg.is_thing(class) {
            continue;
        }
        let n = acc.angular.len();
        let (angular, crosses_seam) = if cfg.angular_wraps() {
            circular_center(&acc.angular, w)
        } else {
            (acc.angular.iter().sum::<f64>() / n as f64, false)
        };
        out.push(InstanceSummary {
            id,
            class,
            center: [acc.radial / n as f64, angular],
            points: n,
            crosses_seam,
        });
    }
    Ok(out)
}

/// Mean of angular grid coordinates on a circle of circumference `w`.
///
/// Coordinates are unwrapped into a half-turn window around the circular
/// mean direction before averaging, so instances away from the seam get
/// the plain arithmetic mean.
fn circular_center(coords: &[f64], w: f64) -> (f64, bool) {
    let to_rad = TAU / w;
    let (s, c) = coords.iter().fold((0.0, 0.0), |(s, c), &b| {
        let (sb, cb) = (b * to_rad).sin_cos();
        (s + sb, c + cb)
    });
    let reference = if s == 0.0 && c == 0.0 {
        coords[0] * to_rad
    } else {
        s.atan2(c)
    };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &b in coords {
        let mut delta = b * to_rad - reference;
        delta -= TAU * ((delta + PI) / TAU).floor();
        let u = (reference + delta) / to_rad;
        lo = lo.min(u);
        hi = hi.max(u);
        sum += u;
    }
    let mean = (sum / coords.len() as f64).rem_euclid(w);
    // rem_euclid can round up to exactly w
    let mean = if mean >= w { 0.0 } else { mean };
    (mean, lo < 0.0 || hi >= w)
}

/// `H_p = max_i exp(-‖p - c_i‖² / 2σ²)`, truncated to a ±3σ window per axis.
pub fn gaussian_heatmap(
    summaries: &[InstanceSummary],
    sigma: f64,
    cfg: &PolarGridConfig,
) -> Result<BevTensor<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("heatmap sigma must be > 0, got {sigma}")));
    }
    let (h, w) = cfg.bev_dims();
    let mut out = BevTensor::filled(vec![h, w], 0.0);
    let reach = WINDOW_SIGMAS * sigma;
    let denom = 2.0 * sigma * sigma;
    let data = out.data_mut();
    for s in summaries {
        for [ci, cj] in s.center_images(cfg) {
            let Some(rows) = window(ci, reach, h) else { continue };
            let Some(cols) = window(cj, reach, w) else { continue };
            for i in rows {
                let di = i as f64 - ci;
                for j in cols.clone() {
                    let dj = j as f64 - cj;
                    let v = (-(di * di + dj * dj) / denom).exp();
                    let slot = &mut data[i * w + j];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Integer positions within `center ± reach`, clipped to `[0, len)`.
fn window(center: f64, reach: f64, len: usize) -> Option<std::ops::RangeInclusive<usize>> {
    let lo = (center - reach).ceil().max(0.0);
    let hi = (center + reach).floor().min(len as f64 - 1.0);
    (lo <= hi).then_some(lo as usize..=hi as usize)
}

/// Instance owning each BEV pixel: the one contributing the most points to
/// that cell, ties to the lower id. Only instances in `summaries` count.
pub fn pixel_assignment(
    cloud: &PointCloud,
    summaries: &[InstanceSummary],
    cfg: &PolarGridConfig,
) -> Result<BevTensor<u32>> {
    let instance = cloud.instance()?;
    let (h, w) = cfg.bev_dims();
    let known: std::collections::BTreeSet<InstanceId> = summaries.iter().map(|s| s.id).collect();
    let mut pairs: Vec<(usize, InstanceId)> = cloud
        .points
        .iter()
        .zip(instance)
        .filter(|(_, id)| known.contains(id))
        .filter_map(|(p, &id)| {
            let c = cfg.cell_of(p)?;
            Some((c.i * w + c.j, id))
        })
        .collect();
    pairs.sort_unstable();

    let mut out = BevTensor::filled(vec![h, w], 0u32);
    let data = out.data_mut();
    for pixel in pairs.chunk_by(|a, b| a.0 == b.0) {
        let mut best = (0usize, 0);
        for run in pixel.chunk_by(|a, b| a.1 == b.1) {
            if run.len() > best.0 {
                best = (run.len(), run[0].1);
            }
        }
        data[pixel[0].0] = best.1;
    }
    Ok(out)
}

/// Offsets `c - p` (grid cells) from every foreground pixel to the center
/// of the instance owning it, and the foreground mask.
pub fn offset_field(
    cloud: &PointCloud,
    summaries: &[InstanceSummary],
    cfg: &PolarGridConfig,
) -> Result<(BevTensor<f64>, BevTensor<u8>)> {
    let assignment = pixel_assignment(cloud, summaries, cfg)?;
    Ok(offsets_from_assignment(&assignment, summaries, cfg))
}

pub fn offsets_from_assignment(
    assignment: &BevTensor<u32>,
    summaries: &[InstanceSummary],
    cfg: &PolarGridConfig,
) -> (BevTensor<f64>, BevTensor<u8>) {
    let (h, w) = cfg.bev_dims();
    let by_id: BTreeMap<InstanceId, &InstanceSummary> = summaries.iter().map(|s| (s.id, s)).collect();
    let mut offsets = BevTensor::filled(vec![h, w, 2], 0.0);
    let mut mask = BevTensor::filled(vec![h, w], 0u8);
    for i in 0..h {
        for j in 0..w {
            let id = assignment.data()[i * w + j];
            let Some(s) = by_id.get(&id) else { continue };
            let [ci, cj] = s.nearest_center(j, cfg);
            offsets.pixel_mut(i, j).copy_from_slice(&[ci - i as f64, cj - j as f64]);
            mask.data_mut()[i * w + j] = 1;
        }
    }
    (offsets, mask)
}

/// Everything the instance head is trained against, for one scan.
#[derive(Debug, Clone)]
pub struct Targets {
    pub summaries: Vec<InstanceSummary>,
    pub heatmap: BevTensor<f64>,
    pub offsets: BevTensor<f64>,
    pub mask: BevTensor<u8>,
    pub assignment: BevTensor<u32>,
}

pub fn build_targets(cloud: &PointCloud, cfg: &PolarGridConfig, params: &TargetParams) -> Result<Targets> {
    let summaries = instance_summaries(cloud, cfg)?;
    let heatmap = gaussian_heatmap(&summaries, params.sigma, cfg)?;
    let assignment = pixel_assignment(cloud, &summaries, cfg)?;
    let (offsets, mask) = offsets_from_assignment(&assignment, &summaries, cfg);
    Ok(Targets {
        summaries,
        heatmap,
        offsets,
        mask,
        assignment,
    })
}
