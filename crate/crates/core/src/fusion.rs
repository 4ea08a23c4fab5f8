//! Panoptic fusion: heatmap peaks become instance centers, foreground BEV
//! pixels are grouped to the nearest center after applying their offsets,
//! each group votes a thing class, and the result is lifted to points.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::cloud::{ClassId, InstanceId, PointCloud};
use crate::error::{Error, Result};
use crate::grid::{ClassRoles, PixelIndex, PolarGridConfig};
use crate::tensor::BevTensor;
use crate::voxel::{self, GroupedCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    /// Odd NMS window side, in cells.
    pub nms_kernel: usize,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            nms_kernel: 5,
            nms_threshold: 0.1,
            top_k: 100,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.nms_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "nms_kernel must be odd and >= 1, got {}",
                self.nms_kernel
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config(format!(
                "nms_threshold must lie in [0, 1], got {}",
                self.nms_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-point panoptic output. Instance 0 means "no instance".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PanopticLabeling {
    pub semantic: Vec<ClassId>,
    pub instance: Vec<InstanceId>,
}

impl PanopticLabeling {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn from_cloud(cloud: &PointCloud) -> Result<Self> {
        Ok(Self {
            semantic: cloud.semantic()?.to_vec(),
            instance: cloud
                .instance
                .clone()
                .unwrap_or_else(|| vec![0; cloud.len()]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub pixel: PixelIndex,
    pub score: f64,
}

/// Semantic head output in one of the accepted layouts.
#[derive(Debug, Clone)]
pub enum Semantic {
    /// Hard class ids, `H × W × Z`. Voting treats them as one-hot.
    Labels(BevTensor<u32>),
    /// Class probabilities per voxel, `H × W × Z × C` (channel = class id).
    VoxelProbs(BevTensor<f32>),
    /// Class probabilities per pixel, `H × W × C`, shared by the column.
    PixelProbs(BevTensor<f32>),
}

impl Semantic {
    pub fn bev_dims(&self) -> (usize, usize) {
        match self {
            Semantic::Labels(t) => t.bev_dims(),
            Semantic::VoxelProbs(t) | Semantic::PixelProbs(t) => t.bev_dims(),
        }
    }

    fn check(&self, cfg: &PolarGridConfig) -> Result<()> {
        let (h, w, z) = cfg.voxel_dims();
        let needed = cfg.thing_classes.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        match self {
            Semantic::Labels(t) => t.expect_shape("semantic labels", &[h, w, z]),
            Semantic::VoxelProbs(t) => {
                let c = t.shape().get(3).copied().unwrap_or(0);
                t.expect_shape("semantic probabilities", &[h, w, z, c.max(needed)])
            }
            Semantic::PixelProbs(t) => {
                let c = t.shape().get(2).copied().unwrap_or(0);
                t.expect_shape("semantic probabilities", &[h, w, c.max(needed)])
            }
        }
    }

    /// Per-voxel class ids: argmax for probabilities (ties to the lower
    /// class), the labels themselves otherwise. Pixel probabilities yield
    /// an `H × W × 1` tensor.
    pub fn class_labels(&self) -> Cow<'_, BevTensor<u32>> {
        match self {
            Semantic::Labels(t) => Cow::Borrowed(t),
            Semantic::VoxelProbs(t) => Cow::Owned(argmax_last(t)),
            Semantic::PixelProbs(t) => Cow::Owned(argmax_last(t)),
        }
    }
}

fn argmax_last(t: &BevTensor<f32>) -> BevTensor<u32> {
    let shape = t.shape();
    let c = *shape.last().unwrap_or(&1);
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    if out_shape.len() == 2 {
        out_shape.push(1);
    }
    let data = t
        .data()
        .par_chunks(c.max(1))
        .map(|probs| argmax(probs.iter().map(|&p| p as f64)) as u32)
        .collect();
    BevTensor::new(out_shape, data).expect("argmax keeps the element count")
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Local maxima of `heatmap` within the NMS window, at or above the
/// threshold, best first, at most `top_k`.
///
/// Equal values inside a window keep only the lexicographically smallest
/// `(i, j)`. Cells with a non-positive score never survive.
pub fn nms_topk(heatmap: &BevTensor<f64>, params: &FusionParams) -> Result<Vec<Center>> {
    params.validate()?;
    let (h, w) = heatmap.bev_dims();
    if heatmap.depth() != 1 {
        return Err(Error::ShapeMismatch {
            what: "heatmap",
            expected: vec![h, w],
            found: heatmap.shape().to_vec(),
        });
    }
    let r = params.nms_kernel / 2;
    let data = heatmap.data();
    let mut centers: Vec<Center> = (0..h)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..w).filter_map(move |j| {
                let v = data[i * w + j];
                if !(v >= params.nms_threshold && v > 0.0) {
                    return None;
                }
                let rows = i.saturating_sub(r)..=(i + r).min(h - 1);
                for ii in rows {
                    for jj in j.saturating_sub(r)..=(j + r).min(w - 1) {
                        let n = data[ii * w + jj];
                        if n > v || (n == v && (ii, jj) < (i, j)) {
                            return None;
                        }
                    }
                }
                Some(Center {
                    pixel: PixelIndex { i, j },
                    score: v,
                })
            })
        })
        .collect();
    centers.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pixel.cmp(&b.pixel)));
    centers.truncate(params.top_k);
    Ok(centers)
}

/// Pixels where at least one voxel of the column carries a thing class.
pub fn foreground_mask(labels: &BevTensor<u32>, cfg: &PolarGridConfig) -> BevTensor<u8> {
    foreground_with_roles(labels, &cfg.roles())
}

fn foreground_with_roles(labels: &BevTensor<u32>, roles: &ClassRoles) -> BevTensor<u8> {
    let (h, w) = labels.bev_dims();
    let depth = labels.depth().max(1);
    let data = labels
        .data()
        .par_chunks(depth)
        .map(|column| column.iter().any(|&c| roles.is_thing(c)) as u8)
        .collect();
    BevTensor::new(vec![h, w], data).expect("one value per pixel")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// 1-based index into the center list, 0 for background.
    pub groups: BevTensor<u32>,
    /// Foreground pixels left ungrouped because no center was available.
    pub orphaned: usize,
}

/// Assign every foreground pixel to the center minimizing
/// `‖p + offset(p) − c‖`; ties go to the earlier (higher scoring) center.
pub fn group_by_center(
    foreground: &BevTensor<u8>,
    offsets: &BevTensor<f64>,
    centers: &[PixelIndex],
) -> Result<Grouping> {
    let (h, w) = foreground.bev_dims();
    offsets.expect_shape("offsets", &[h, w, 2])?;
    let fg = foreground.data();
    let off = offsets.data();
    let mut groups = BevTensor::filled(vec![h, w], 0u32);
    let orphaned = groups
        .data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .map(|(i, row)| {
            let mut orphans = 0;
            for (j, slot) in row.iter_mut().enumerate() {
                let p = i * w + j;
                if fg[p] == 0 {
                    continue;
                }
                if centers.is_empty() {
                    orphans += 1;
                    continue;
                }
                let si = i as f64 + off[2 * p];
                let sj = j as f64 + off[2 * p + 1];
                let mut best = (0, f64::INFINITY);
                for (n, c) in centers.iter().enumerate() {
                    let di = si - c.i as f64;
                    let dj = sj - c.j as f64;
                    let d = di * di + dj * dj;
                    if d < best.1 {
                        best = (n, d);
                    }
                }
                *slot = best.0 as u32 + 1;
            }
            orphans
        })
        .sum();
    if orphaned > 0 {
        warn!(orphaned, "foreground pixels present but no centers survived NMS");
    }
    Ok(Grouping { groups, orphaned })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Votes {
    /// Voted thing class per non-empty group.
    pub classes: BTreeMap<u32, ClassId>,
    /// Groups whose class came from the argmax-count fallback because the
    /// summed thing-class probability was zero.
    pub fallback: Vec<u32>,
}

/// Per group, the thing class with the largest summed probability over
/// every voxel of the group's pixels (ties to the lower class).
pub fn vote_labels(groups: &BevTensor<u32>, semantic: &Semantic, cfg: &PolarGridConfig) -> Result<Votes> {
    semantic.check(cfg)?;
    let labels = semantic.class_labels();
    vote_with_labels(groups, semantic, &labels, cfg)
}

fn vote_with_labels(
    groups: &BevTensor<u32>,
    semantic: &Semantic,
    labels: &BevTensor<u32>,
    cfg: &PolarGridConfig,
) -> Result<Votes> {
    let (h, w) = cfg.bev_dims();
    groups.expect_shape("groups", &[h, w])?;
    let mut things = cfg.thing_classes.clone();
    things.sort_unstable();
    things.dedup();
    let channel = |c: ClassId| c as usize;

    let mut mass: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..h {
        for j in 0..w {
            let g = groups.data()[i * w + j];
            if g == 0 {
                continue;
            }
            let acc = mass.entry(g).or_insert_with(|| vec![0.0; things.len()]);
            match semantic {
                Semantic::Labels(t) => {
                    for &c in t.pixel(i, j) {
                        if let Ok(n) = things.binary_search(&(c as ClassId)) {
                            acc[n] += 1.0;
                        }
                    }
                }
                Semantic::VoxelProbs(t) => {
                    let probs = t.pixel(i, j);
                    let nc = t.shape()[3];
                    for voxel in probs.chunks(nc) {
                        for (n, &c) in things.iter().enumerate() {
                            acc[n] += voxel[channel(c)] as f64;
                        }
                    }
                }
                Semantic::PixelProbs(t) => {
                    let probs = t.pixel(i, j);
                    for (n, &c) in things.iter().enumerate() {
                        acc[n] += probs[channel(c)] as f64;
                    }
                }
            }
            let cnt = counts.entry(g).or_insert_with(|| vec![0; things.len()]);
            for &c in labels.pixel(i, j) {
                if let Ok(n) = things.binary_search(&(c as ClassId)) {
                    cnt[n] += 1;
                }
            }
        }
    }

    let mut votes = Votes::default();
    for (g, acc) in mass {
        if acc.iter().sum::<f64>() > 0.0 {
            votes.classes.insert(g, things[argmax(acc.iter().copied())]);
            continue;
        }
        let cnt = &counts[&g];
        if cnt.iter().any(|&n| n > 0) {
            let n = argmax(cnt.iter().map(|&n| n as f64));
            votes.classes.insert(g, things[n]);
            votes.fallback.push(g);
        }
    }
    Ok(votes)
}

/// Per point: the class of its voxel, and the group id as instance when the
/// pixel is grouped and the voxel class matches the group's voted class.
pub fn lift_to_points(
    groups: &BevTensor<u32>,
    votes: &Votes,
    labels: &BevTensor<u32>,
    grouped: &GroupedCloud,
    cfg: &PolarGridConfig,
) -> Result<PanopticLabeling> {
    let (h, w, z) = cfg.voxel_dims();
    if grouped.dims() != (h, w, z) {
        return Err(Error::ShapeMismatch {
            what: "grouped cloud",
            expected: vec![h, w, z],
            found: vec![grouped.dims().0, grouped.dims().1, grouped.dims().2],
        });
    }
    groups.expect_shape("groups", &[h, w])?;
    if labels.bev_dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            what: "semantic labels",
            expected: vec![h, w],
            found: labels.shape().to_vec(),
        });
    }
    let roles = cfg.roles();
    let depth = labels.depth().max(1);
    let n = grouped.num_points();
    let mut out = PanopticLabeling {
        semantic: vec![cfg.ignore_class; n],
        instance: vec![0; n],
    };
    for (idx, cell) in grouped.cells().iter().enumerate() {
        let Some(c) = cell else { continue };
        let class = labels.pixel(c.i, c.j)[c.k.min(depth - 1)];
        out.semantic[idx] = class as ClassId;
        let g = groups.data()[c.i * w + c.j];
        if g > 0 && roles.is_thing(class) && votes.classes.get(&g) == Some(&(class as ClassId)) {
            out.instance[idx] = g;
        }
    }
    Ok(out)
}

/// Intermediate products of [`fuse_detailed`].
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub labeling: PanopticLabeling,
    pub centers: Vec<Center>,
    pub grouping: Grouping,
    pub votes: Votes,
}

pub fn fuse(
    semantic: &Semantic,
    heatmap: &BevTensor<f64>,
    offsets: &BevTensor<f64>,
    cloud: &PointCloud,
    cfg: &PolarGridConfig,
    params: &FusionParams,
) -> Result<PanopticLabeling> {
    Ok(fuse_detailed(semantic, heatmap, offsets, cloud, cfg, params)?.labeling)
}

pub fn fuse_detailed(
    semantic: &Semantic,
    heatmap: &BevTensor<f64>,
    offsets: &BevTensor<f64>,
    cloud: &PointCloud,
    cfg: &PolarGridConfig,
    params: &FusionParams,
) -> Result<FusionOutput> {
    cfg.validate()?;
    let (h, w) = cfg.bev_dims();
    semantic.check(cfg)?;
    if heatmap.bev_dims() != (h, w) || heatmap.depth() != 1 {
        return Err(Error::ShapeMismatch {
            what: "heatmap",
            expected: vec![h, w],
            found: heatmap.shape().to_vec(),
        });
    }
    offsets.expect_shape("offsets", &[h, w, 2])?;

    let centers = nms_topk(heatmap, params)?;
    let labels = semantic.class_labels();
    let roles = cfg.roles();
    let foreground = foreground_with_roles(&labels, &roles);
    let pixels: Vec<PixelIndex> = centers.iter().map(|c| c.pixel).collect();
    let grouping = group_by_center(&foreground, offsets, &pixels)?;
    let votes = vote_with_labels(&grouping.groups, semantic, &labels, cfg)?;
    let grouped = voxel::group(cloud, cfg);
    let labeling = lift_to_points(&grouping.groups, &votes, &labels, &grouped, cfg)?;
    Ok(FusionOutput {
        labeling,
        centers,
        grouping,
        votes,
    })
}
