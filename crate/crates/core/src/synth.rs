//! Seeded synthetic scenes with exact ground truth.
//!
//! A scene is a ground layer of stuff points plus disk-shaped thing
//! instances standing above it. By default instances are pairwise
//! separated on the BEV grid and never share a cell, so feeding the
//! ground-truth tensors through fusion reproduces the labels exactly.
//! `overlap_pairs` places instances that interpenetrate by half a radial
//! cell to exercise quantization losses.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{ClassId, InstanceId, Point, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{from_polar, PolarGridConfig};
use crate::targets::{build_targets, TargetParams, Targets};
use crate::tensor::BevTensor;
use crate::voxel::voxel_labels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Inclusive range of the number of base instances.
    pub instances: (usize, usize),
    /// Classes to draw instances from; empty means every thing class.
    pub thing_classes: Vec<ClassId>,
    pub points_per_instance: (usize, usize),
    /// Footprint radius range in meters.
    pub footprint_radius: (f64, f64),
    /// Instance centers are placed at ranges within this annulus (m).
    pub annulus: (f64, f64),
    pub stuff_points: usize,
    /// Classes for the ground layer; empty means the first two stuff
    /// classes.
    pub stuff_classes: Vec<ClassId>,
    /// Minimum distance between instance centers, in grid cells.
    pub min_center_separation: f64,
    /// Extra instances placed against an existing one with sub-voxel
    /// interpenetration.
    pub overlap_pairs: usize,
    /// Gaussian noise added to the emitted heatmap and offsets.
    pub noise_std: f64,
    pub max_attempts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: (3, 8),
            thing_classes: Vec::new(),
            points_per_instance: (80, 300),
            footprint_radius: (0.6, 1.5),
            annulus: (8.0, 45.0),
            stuff_points: 20_000,
            stuff_classes: Vec::new(),
            min_center_separation: 11.0,
            overlap_pairs: 0,
            noise_std: 0.0,
            max_attempts: 2_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cloud: PointCloud,
    /// Voxel labels by majority vote, `H × W × Z`.
    pub semantic: BevTensor<u32>,
    /// Exact targets of `cloud`.
    pub targets: Targets,
    /// Heatmap as a network would emit it (the exact one when noise is 0).
    pub heatmap: BevTensor<f64>,
    pub offsets: BevTensor<f64>,
}

struct Placed {
    center: [f64; 2],
    cells: BTreeSet<(usize, usize)>,
}

pub fn synth_scene(spec: &SynthSpec, cfg: &PolarGridConfig, targets: &TargetParams) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let things = if spec.thing_classes.is_empty() {
        cfg.thing_classes.clone()
    } else {
        spec.thing_classes.clone()
    };
    let stuff: Vec<ClassId> = if spec.stuff_classes.is_empty() {
        cfg.stuff_classes.iter().take(2).copied().collect()
    } else {
        spec.stuff_classes.clone()
    };
    if things.is_empty() && spec.instances.1 > 0 {
        return Err(Error::Config("synthetic scene needs at least one thing class".into()));
    }
    if stuff.is_empty() && spec.stuff_points > 0 {
        return Err(Error::Config("synthetic scene needs at least one stuff class".into()));
    }
    let (lo, hi) = spec.instances;
    let count = if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let span = cfg.z_max - cfg.z_min;
    let instance_z = (cfg.z_min + 0.3 * span, cfg.z_min + 0.7 * span);
    let ground_z = (cfg.z_min + 0.2 * span, cfg.z_min + 0.22 * span);

    let mut cloud = PointCloud::labeled(Vec::new(), Vec::new(), Vec::new())?;
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    let mut next_id: InstanceId = 1;

    let mut place = |rng: &mut ChaCha8Rng,
                     cloud: &mut PointCloud,
                     placed: &mut Vec<Placed>,
                     anchor: Option<(f64, f64, f64)>|
     -> Result<(f64, f64, f64)> {
        loop {
            attempts += 1;
            if attempts > spec.max_attempts {
                return Err(Error::InfeasiblePlacement {
                    attempts: spec.max_attempts,
                });
            }
            let radius = uniform(rng, spec.footprint_radius);
            let (rho, phi) = match anchor {
                // butt against the anchor along its ray, half a radial cell deep
                Some((rho, phi, r)) => {
                    let cell = (cfg.d_max - cfg.d_min) / cfg.radial_bins as f64;
                    (rho + r + radius - 0.5 * cell, phi)
                }
                None => {
                    let rho = uniform(rng, spec.annulus);
                    // keep the footprint off the angular seam
                    let margin = 2.0 * radius / rho + TAU / cfg.angular_bins as f64;
                    if 2.0 * margin >= TAU {
                        continue;
                    }
                    (rho, rng.random_range(margin..TAU - margin))
                }
            };
            if rho - radius < cfg.d_min || rho + radius > cfg.d_max {
                continue;
            }
            let n = rng.random_range(spec.points_per_instance.0..=spec.points_per_instance.1.max(spec.points_per_instance.0));
            let (cx, cy, _) = from_polar(rho, phi, 0.0);
            let points: Vec<Point> = (0..n)
                .map(|_| {
                    let r = radius * rng.random::<f64>().sqrt();
                    let a = rng.random_range(0.0..TAU);
                    Point::new(
                        cx + r * a.cos(),
                        cy + r * a.sin(),
                        uniform(rng, instance_z),
                        rng.random_range(0.05..1.0),
                    )
                })
                .collect();
            let mut sum = [0.0, 0.0];
            let mut cells = BTreeSet::new();
            let mut in_range = true;
            for p in &points {
                match cfg.grid_coords(p) {
                    Some([a, b, _]) => {
                        sum[0] += a;
                        sum[1] += b;
                        let c = cfg.cell_of(p).expect("in range");
                        cells.insert((c.i, c.j));
                    }
                    None => in_range = false,
                }
            }
            if !in_range || n < cfg.min_instance_points {
                continue;
            }
            let center = [sum[0] / n as f64, sum[1] / n as f64];
            let anchor_idx = anchor.map(|_| placed.len() - 1);
            let clash = placed.iter().enumerate().any(|(k, other)| {
                let d = (center[0] - other.center[0]).hypot(center[1] - other.center[1]);
                d < spec.min_center_separation
                    || (Some(k) != anchor_idx && !other.cells.is_disjoint(&cells))
            });
            if clash {
                if anchor.is_some() {
                    // the anchor geometry is fixed; a different radius may fit
                    continue;
                }
                continue;
            }
            let class = things[rng.random_range(0..things.len())];
            let id = next_id;
            next_id += 1;
            cloud.points.extend_from_slice(&points);
            cloud.semantic.as_mut().expect("labeled").extend(std::iter::repeat_n(class, n));
            cloud.instance.as_mut().expect("labeled").extend(std::iter::repeat_n(id, n));
            placed.push(Placed { center, cells });
            return Ok((rho, phi, radius));
        }
    };

    let mut anchors = Vec::with_capacity(count);
    for _ in 0..count {
        anchors.push(place(&mut rng, &mut cloud, &mut placed, None)?);
    }
    for k in 0..spec.overlap_pairs {
        let base = place(&mut rng, &mut cloud, &mut placed, None)?;
        let _ = k;
        place(&mut rng, &mut cloud, &mut placed, Some(base))?;
    }

    for _ in 0..spec.stuff_points {
        let rho = rng.random_range(cfg.d_min.max(0.5) + 0.01..cfg.d_max - 0.01);
        let phi = rng.random_range(0.0..TAU);
        let (x, y, _) = from_polar(rho, phi, 0.0);
        // sectors of the ground alternate between stuff classes
        let class = stuff[((phi / TAU) * 2.0 * stuff.len() as f64) as usize % stuff.len()];
        cloud.points.push(Point::new(x, y, uniform(&mut rng, ground_z), rng.random_range(0.05..1.0)));
        cloud.semantic.as_mut().expect("labeled").push(class);
        cloud.instance.as_mut().expect("labeled").push(0);
    }

    let semantic = voxel_labels(&cloud, cfg)?;
    let targets = build_targets(&cloud, cfg, targets)?;
    let mut heatmap = targets.heatmap.clone();
    let mut offsets = targets.offsets.clone();
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in heatmap.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        for v in offsets.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(SynthScene {
        cloud,
        semantic,
        targets,
        heatmap,
        offsets,
    })
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
