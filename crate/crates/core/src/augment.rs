//! Instance oversampling from a bank of stored instances, projection
//! preserving per-instance transforms, and whole-scan augmentation.
//!
//! Global instance transforms are isometries that fix the sensor's vertical
//! axis (rotation about it, reflection across a vertical plane through it),
//! so every point keeps its range to the sensor. Local transforms are small
//! rigid jitters about the instance's own center.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cloud::{ClassId, InstanceId, Point, PointCloud};
use crate::error::{Error, Result};
use crate::grid::PolarGridConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Instances pasted per scan, sampled with replacement.
    pub paste_count: usize,
    pub p_rotation: f64,
    pub p_reflection: f64,
    /// Standard deviation (m) of the per-axis local translation. The
    /// default 0.5 corresponds to a variance of 0.25.
    pub local_translation_std: f64,
    /// Local rotation angle is uniform in `[-range, range]` radians.
    /// Default: 20 degrees.
    pub local_rotation_range: f64,
    /// Probability of mirroring across the x axis, `(x, y) -> (x, -y)`.
    pub scene_flip_x: f64,
    /// Probability of mirroring across the y axis, `(x, y) -> (-x, y)`.
    pub scene_flip_y: f64,
    /// Probability of negating both x and y.
    pub scene_flip_xy: f64,
    /// Rotate the whole scan about Z by a uniform angle.
    pub scene_rotation: bool,
    /// Compute the visibility feature after pasting instances.
    pub visibility_after_paste: bool,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            paste_count: 5,
            p_rotation: 0.2,
            p_reflection: 0.2,
            local_translation_std: 0.5,
            local_rotation_range: PI / 9.0,
            scene_flip_x: 0.25,
            scene_flip_y: 0.25,
            scene_flip_xy: 0.25,
            scene_rotation: true,
            visibility_after_paste: true,
            seed: 0,
        }
    }
}

impl AugmentParams {
    /// Every random draw disabled.
    pub fn identity() -> Self {
        Self {
            paste_count: 0,
            p_rotation: 0.0,
            p_reflection: 0.0,
            local_translation_std: 0.0,
            local_rotation_range: 0.0,
            scene_flip_x: 0.0,
            scene_flip_y: 0.0,
            scene_flip_xy: 0.0,
            scene_rotation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_rotation", self.p_rotation),
            ("p_reflection", self.p_reflection),
            ("scene_flip_x", self.scene_flip_x),
            ("scene_flip_y", self.scene_flip_y),
            ("scene_flip_xy", self.scene_flip_xy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.local_translation_std >= 0.0 && self.local_translation_std.is_finite()) {
            return Err(Error::Config("local_translation_std must be finite and >= 0".into()));
        }
        if !(self.local_rotation_range >= 0.0 && self.local_rotation_range.is_finite()) {
            return Err(Error::Config("local_rotation_range must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class: ClassId,
    /// Sensor-frame coordinates and reflectance, as in the source scan.
    pub points: Vec<Point>,
    pub source_scan: usize,
    pub source_instance: InstanceId,
}

/// Ground-truth instances pooled across scans, sampled with class weights
/// proportional to the reciprocal of each class's share of points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceBank {
    entries: Vec<BankEntry>,
    class_points: BTreeMap<ClassId, u64>,
    weights: BTreeMap<ClassId, f64>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl InstanceBank {
    /// `class_points` holds the labeled point total of each class; classes
    /// without entries get no weight.
    pub fn from_parts(entries: Vec<BankEntry>, class_points: BTreeMap<ClassId, u64>) -> Result<Self> {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (n, e) in entries.iter().enumerate() {
            if e.points.is_empty() {
                return Err(Error::InvalidCloud(format!("bank entry {n} has no points")));
            }
            by_class.entry(e.class).or_default().push(n);
        }
        let mut inverse = BTreeMap::new();
        for &c in by_class.keys() {
            let total = class_points.get(&c).copied().unwrap_or(0);
            if total == 0 {
                return Err(Error::InvalidCloud(format!("class {c} has entries but no point total")));
            }
            inverse.insert(c, 1.0 / total as f64);
        }
        let norm: f64 = inverse.values().sum();
        let weights = inverse.into_iter().map(|(c, v)| (c, v / norm)).collect();
        Ok(Self {
            entries,
            class_points,
            weights,
            by_class,
        })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn class_points(&self) -> &BTreeMap<ClassId, u64> {
        &self.class_points
    }

    /// Normalized sampling weight per class with at least one entry.
    pub fn weights(&self) -> &BTreeMap<ClassId, f64> {
        &self.weights
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Draw a class by weight, then an entry of that class uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&BankEntry> {
        if self.entries.is_empty() {
            return None;
        }
        let classes: Vec<ClassId> = self.weights.keys().copied().collect();
        let dist = WeightedIndex::new(self.weights.values().copied()).ok()?;
        let class = classes[dist.sample(rng)];
        let members = &self.by_class[&class];
        Some(&self.entries[members[rng.random_range(0..members.len())]])
    }
}

/// Collect every thing-class instance with at least `min_instance_points`
/// points. Class totals count every labeled point of the class.
pub fn build_bank(scans: &[PointCloud], cfg: &PolarGridConfig) -> Result<InstanceBank> {
    let mut entries = Vec::new();
    let mut class_points: BTreeMap<ClassId, u64> = BTreeMap::new();
    for (scan_idx, scan) in scans.iter().enumerate() {
        let sem = scan.semantic()?;
        let inst = scan.instance()?;
        let mut instances: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
        for (n, (&c, &id)) in sem.iter().zip(inst).enumerate() {
            if cfg.is_thing(c) {
                *class_points.entry(c).or_default() += 1;
            }
            if id > 0 {
                instances.entry(id).or_default().push(n);
            }
        }
        for (id, members) in instances {
            if members.len() < cfg.min_instance_points {
                continue;
            }
            let class = modal_class(members.iter().map(|&n| sem[n]));
            if !cfg.is_thing(class) {
                continue;
            }
            entries.push(BankEntry {
                class,
                points: members.iter().map(|&n| scan.points[n]).collect(),
                source_scan: scan_idx,
                source_instance: id,
            });
        }
    }
    class_points.retain(|c, _| entries.iter().any(|e| e.class == *c));
    InstanceBank::from_parts(entries, class_points)
}

fn modal_class(classes: impl Iterator<Item = ClassId>) -> ClassId {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for c in classes {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .fold((0, 0), |best, (c, n)| if n > best.1 { (c, n) } else { best })
        .0
}

/// Make sure the scan carries label arrays, filling missing ones with the
/// ignore class / instance 0.
fn ensure_labels(scan: &mut PointCloud, cfg: &PolarGridConfig) {
    let n = scan.len();
    scan.semantic.get_or_insert_with(|| vec![cfg.ignore_class; n]);
    scan.instance.get_or_insert_with(|| vec![0; n]);
}

/// Append `params.paste_count` bank instances at their original sensor
/// coordinates, each under a fresh instance id above the scan's maximum.
pub fn oversample<R: Rng + ?Sized>(
    scan: &PointCloud,
    bank: &InstanceBank,
    params: &AugmentParams,
    cfg: &PolarGridConfig,
    rng: &mut R,
) -> Result<PointCloud> {
    let mut out = scan.clone();
    if params.paste_count == 0 {
        return Ok(out);
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank(params.paste_count));
    }
    ensure_labels(&mut out, cfg);
    let first_id = out.max_instance() + 1;
    for next_id in (first_id..).take(params.paste_count) {
        let entry = bank.sample(rng).expect("bank is non-empty");
        out.points.extend_from_slice(&entry.points);
        let n = entry.points.len();
        out.semantic.as_mut().expect("labels ensured").extend(std::iter::repeat_n(entry.class, n));
        out.instance.as_mut().expect("labels ensured").extend(std::iter::repeat_n(next_id, n));
    }
    Ok(out)
}

/// Rotate about the vertical axis through `pivot` (x, y).
pub fn rotate_z(points: &mut [Point], angle: f64, pivot: [f64; 2]) {
    let (s, c) = angle.sin_cos();
    for p in points {
        let (dx, dy) = (p.x - pivot[0], p.y - pivot[1]);
        p.x = pivot[0] + c * dx - s * dy;
        p.y = pivot[1] + s * dx + c * dy;
    }
}

/// Mirror across the vertical plane through the sensor that contains the
/// horizontal direction at angle `phi`.
pub fn reflect_vertical_plane(points: &mut [Point], phi: f64) {
    // reflection matrix [[cos 2φ, sin 2φ], [sin 2φ, -cos 2φ]]
    let (s, c) = (2.0 * phi).sin_cos();
    for p in points {
        let (x, y) = (p.x, p.y);
        p.x = c * x + s * y;
        p.y = s * x - c * y;
    }
}

pub fn translate(points: &mut [Point], t: [f64; 3]) {
    for p in points {
        p.x += t[0];
        p.y += t[1];
        p.z += t[2];
    }
}

/// Planar mass center.
pub fn planar_center(points: &[Point]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
    [sx / n, sy / n]
}

/// With probability `p_rotation` rotate the instance about the sensor's
/// vertical axis by a uniform angle; independently, with probability
/// `p_reflection`, mirror it across a random vertical plane through the
/// sensor.
pub fn global_augment<R: Rng + ?Sized>(points: &[Point], params: &AugmentParams, rng: &mut R) -> Vec<Point> {
    let mut out = points.to_vec();
    if rng.random_bool(params.p_rotation) {
        let angle = rng.random_range(0.0..TAU);
        rotate_z(&mut out, angle, [0.0, 0.0]);
    }
    if rng.random_bool(params.p_reflection) {
        let phi = rng.random_range(0.0..PI);
        reflect_vertical_plane(&mut out, phi);
    }
    out
}

/// Shared random translation and a small rotation about the instance's
/// planar mass center.
pub fn local_augment<R: Rng + ?Sized>(points: &[Point], params: &AugmentParams, rng: &mut R) -> Vec<Point> {
    let normal = Normal::new(0.0, params.local_translation_std).expect("validated std");
    let t = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
    let range = params.local_rotation_range;
    let angle = if range > 0.0 { rng.random_range(-range..=range) } else { 0.0 };
    let mut out = points.to_vec();
    rotate_z(&mut out, angle, planar_center(points));
    translate(&mut out, t);
    out
}

/// Apply [`global_augment`] then [`local_augment`] to every instance of the
/// scan, in ascending id order.
pub fn augment_instances<R: Rng + ?Sized>(scan: &PointCloud, params: &AugmentParams, rng: &mut R) -> Result<PointCloud> {
    let inst = scan.instance()?;
    let mut members: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (n, &id) in inst.iter().enumerate() {
        if id > 0 {
            members.entry(id).or_default().push(n);
        }
    }
    let mut out = scan.clone();
    for idx in members.values() {
        let pts: Vec<Point> = idx.iter().map(|&n| scan.points[n]).collect();
        let moved = local_augment(&global_augment(&pts, params, rng), params, rng);
        for (&n, p) in idx.iter().zip(moved) {
            out.points[n] = p;
        }
    }
    Ok(out)
}

/// Whole-scan reflections and rotation; labels ride along unchanged.
pub fn scene_augment<R: Rng + ?Sized>(scan: &PointCloud, params: &AugmentParams, rng: &mut R) -> PointCloud {
    let mut out = scan.clone();
    if rng.random_bool(params.scene_flip_x) {
        out.points.iter_mut().for_each(|p| p.y = -p.y);
    }
    if rng.random_bool(params.scene_flip_y) {
        out.points.iter_mut().for_each(|p| p.x = -p.x);
    }
    if rng.random_bool(params.scene_flip_xy) {
        out.points.iter_mut().for_each(|p| {
            p.x = -p.x;
            p.y = -p.y;
        });
    }
    if params.scene_rotation {
        let angle = rng.random_range(0.0..TAU);
        rotate_z(&mut out.points, angle, [0.0, 0.0]);
    }
    out
}

/// Full training-time chain: oversample (when a bank is given), per
/// instance global + local transforms, then scene augmentation.
pub fn augment_scan<R: Rng + ?Sized>(
    scan: &PointCloud,
    bank: Option<&InstanceBank>,
    params: &AugmentParams,
    cfg: &PolarGridConfig,
    rng: &mut R,
) -> Result<PointCloud> {
    params.validate()?;
    let mut out = match bank {
        Some(bank) => oversample(scan, bank, params, cfg, rng)?,
        None => scan.clone(),
    };
    ensure_labels(&mut out, cfg);
    let out = augment_instances(&out, params, rng)?;
    Ok(scene_augment(&out, params, rng))
}

/// Drop the `fraction` of points with the highest externally supplied
/// importance scores (ties: later points first). Hook for gradient-based
/// pruning computed outside this crate.
pub fn prune_by_importance(scan: &PointCloud, importance: &[f32], fraction: f64) -> Result<PointCloud> {
    if importance.len() != scan.len() {
        return Err(Error::InvalidCloud(format!(
            "{} importance scores for {} points",
            importance.len(),
            scan.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction must lie in [0, 1], got {fraction}")));
    }
    let drop = (scan.len() as f64 * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..scan.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(b.cmp(&a)));
    let mut keep = vec![true; scan.len()];
    for &n in &order[..drop] {
        keep[n] = false;
    }
    fn pick<T: Copy>(v: &[T], keep: &[bool]) -> Vec<T> {
        v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect()
    }
    Ok(PointCloud {
        points: pick(&scan.points, &keep),
        semantic: scan.semantic.as_deref().map(|v| pick(v, &keep)),
        instance: scan.instance.as_deref().map(|v| pick(v, &keep)),
    })
}
