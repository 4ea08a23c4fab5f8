//! Panoptic quality (PQ = SQ · RQ), PQ†, and point-level mIoU.
//!
//! A predicted and a ground-truth segment of the same class match when
//! their IoU is strictly greater than 0.5, which makes matches unique.
//! Ground-truth ignore points and ground-truth thing segments smaller than
//! `min_instance_points` are void: they are removed from both sides before
//! matching.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cloud::{ClassId, InstanceId};
use crate::error::{Error, Result};
use crate::fusion::PanopticLabeling;
use crate::grid::PolarGridConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    /// Unmatched predicted thing segments below `min_instance_points` are
    /// dropped instead of counted as false positives.
    pub small_pred_as_void: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub class: ClassId,
    /// 0 for stuff segments.
    pub instance: InstanceId,
    /// Ascending point indices.
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentSets {
    pub by_class: BTreeMap<ClassId, Vec<Segment>>,
    /// Thing segments below `min_instance_points`.
    pub small: Vec<Segment>,
}

/// Thing classes: one segment per nonzero instance id. Stuff classes: one
/// segment per class. Ignore-class points, unknown classes and points with
/// `keep[n] == false` are skipped.
pub fn segment_sets(labeling: &PanopticLabeling, cfg: &PolarGridConfig, keep: Option<&[bool]>) -> SegmentSets {
    let mut raw: BTreeMap<(ClassId, InstanceId), Vec<usize>> = BTreeMap::new();
    for (n, (&class, &inst)) in labeling.semantic.iter().zip(&labeling.instance).enumerate() {
        if keep.is_some_and(|k| !k[n]) || class == cfg.ignore_class {
            continue;
        }
        let key = if cfg.is_thing(class) {
            if inst == 0 {
                continue;
            }
            (class, inst)
        } else if cfg.is_stuff(class) {
            (class, 0)
        } else {
            continue;
        };
        raw.entry(key).or_default().push(n);
    }
    let mut sets = SegmentSets::default();
    for ((class, instance), points) in raw {
        let seg = Segment {
            class,
            instance,
            points,
        };
        if instance > 0 && seg.points.len() < cfg.min_instance_points {
            sets.small.push(seg);
        } else {
            sets.by_class.entry(class).or_default().push(seg);
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatch {
    /// `(pred index, gt index, IoU)`.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// True positives are pairs with IoU > 0.5; everything else is FP / FN.
pub fn match_segments(pred: &[Segment], gt: &[Segment]) -> ClassMatch {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (g, seg) in gt.iter().enumerate() {
        for &p in &seg.points {
            owner.insert(p, g);
        }
    }
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut out = ClassMatch::default();
    for (q, seg) in pred.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for p in &seg.points {
            if let Some(&g) = owner.get(p) {
                *inter.entry(g).or_default() += 1;
            }
        }
        for (g, overlap) in inter {
            let union = seg.points.len() + gt[g].points.len() - overlap;
            // IoU > 1/2 in integers
            if 2 * overlap > union && !gt_used[g] {
                out.tp.push((q, g, overlap as f64 / union as f64));
                pred_used[q] = true;
                gt_used[g] = true;
                break;
            }
        }
    }
    out.fp = (0..pred.len()).filter(|&q| !pred_used[q]).collect();
    out.fn_ = (0..gt.len()).filter(|&g| !gt_used[g]).collect();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq: f64,
}

impl ClassScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, iou_sum: f64) -> Self {
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        let denom = tp as f64 + 0.5 * fn_ as f64 + 0.5 * fp as f64;
        let rq = if denom > 0.0 { tp as f64 / denom } else { 0.0 };
        Self {
            tp,
            fp,
            fn_,
            iou_sum,
            sq,
            rq,
            pq: sq * rq,
        }
    }

    pub fn from_match(m: &ClassMatch) -> Self {
        Self::from_counts(m.tp.len(), m.fp.len(), m.fn_.len(), m.tp.iter().map(|t| t.2).sum())
    }

    fn evaluated(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Per-class panoptic scores for classes with any GT or prediction.
pub fn panoptic_quality(matches: &BTreeMap<ClassId, ClassMatch>) -> BTreeMap<ClassId, ClassScores> {
    matches
        .iter()
        .map(|(&c, m)| (c, ClassScores::from_match(m)))
        .filter(|(_, s)| s.evaluated())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IouReport {
    pub per_class: BTreeMap<ClassId, f64>,
    pub miou: f64,
}

/// Point-level IoU per class over points whose GT class is not ignored;
/// the mean runs over classes present in GT or prediction.
pub fn miou(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &PolarGridConfig) -> Result<IouReport> {
    check_lengths(pred, gt)?;
    let known = |c: ClassId| cfg.is_thing(c) || cfg.is_stuff(c);
    let mut counts: BTreeMap<ClassId, [usize; 3]> = BTreeMap::new();
    for (&p, &g) in pred.semantic.iter().zip(&gt.semantic) {
        if g == cfg.ignore_class {
            continue;
        }
        if p == g {
            if known(g) {
                counts.entry(g).or_default()[0] += 1;
            }
            continue;
        }
        if known(p) {
            counts.entry(p).or_default()[1] += 1;
        }
        if known(g) {
            counts.entry(g).or_default()[2] += 1;
        }
    }
    let per_class: BTreeMap<ClassId, f64> = counts
        .into_iter()
        .map(|(c, [tp, fp, fn_])| (c, tp as f64 / (tp + fp + fn_) as f64))
        .collect();
    let miou = mean(per_class.values().copied());
    Ok(IouReport { per_class, miou })
}

fn check_lengths(pred: &PanopticLabeling, gt: &PanopticLabeling) -> Result<()> {
    for l in [pred, gt] {
        if l.semantic.len() != l.instance.len() {
            return Err(Error::InvalidCloud(format!(
                "labeling has {} classes but {} instance ids",
                l.semantic.len(),
                l.instance.len()
            )));
        }
    }
    if pred.len() != gt.len() {
        return Err(Error::InvalidCloud(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates are unweighted means over the evaluated classes (0 when no
/// class was evaluated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub pq: f64,
    pub pq_dagger: f64,
    pub rq: f64,
    pub sq: f64,
    pub pq_th: f64,
    pub rq_th: f64,
    pub sq_th: f64,
    pub pq_st: f64,
    pub rq_st: f64,
    pub sq_st: f64,
    pub miou: f64,
    pub classes: BTreeMap<ClassId, ClassScores>,
    pub iou: BTreeMap<ClassId, f64>,
}

impl MetricReport {
    pub fn assemble(scores: BTreeMap<ClassId, ClassScores>, iou: IouReport, cfg: &PolarGridConfig) -> Self {
        let all = || scores.values();
        let thing = || scores.iter().filter(|(c, _)| cfg.is_thing(**c)).map(|(_, s)| s);
        let stuff = || scores.iter().filter(|(c, _)| cfg.is_stuff(**c)).map(|(_, s)| s);
        let dagger = scores.iter().map(|(c, s)| {
            if cfg.is_stuff(*c) {
                iou.per_class.get(c).copied().unwrap_or(0.0)
            } else {
                s.pq
            }
        });
        Self {
            pq: mean(all().map(|s| s.pq)),
            pq_dagger: mean(dagger),
            rq: mean(all().map(|s| s.rq)),
            sq: mean(all().map(|s| s.sq)),
            pq_th: mean(thing().map(|s| s.pq)),
            rq_th: mean(thing().map(|s| s.rq)),
            sq_th: mean(thing().map(|s| s.sq)),
            pq_st: mean(stuff().map(|s| s.pq)),
            rq_st: mean(stuff().map(|s| s.rq)),
            sq_st: mean(stuff().map(|s| s.sq)),
            miou: iou.miou,
            classes: scores,
            iou: iou.per_class,
        }
    }

    /// `key value` lines: aggregates first, then `class.<id>.<metric>`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push(' ');
            out.push_str(&v);
            out.push('\n');
        };
        for (k, v) in [
            ("pq", self.pq),
            ("pq_dagger", self.pq_dagger),
            ("rq", self.rq),
            ("sq", self.sq),
            ("pq_th", self.pq_th),
            ("rq_th", self.rq_th),
            ("sq_th", self.sq_th),
            ("pq_st", self.pq_st),
            ("rq_st", self.rq_st),
            ("sq_st", self.sq_st),
            ("miou", self.miou),
        ] {
            line(k, format!("{v:.6}"));
        }
        for (c, s) in &self.classes {
            line(&format!("class.{c}.pq"), format!("{:.6}", s.pq));
            line(&format!("class.{c}.sq"), format!("{:.6}", s.sq));
            line(&format!("class.{c}.rq"), format!("{:.6}", s.rq));
            line(&format!("class.{c}.tp"), s.tp.to_string());
            line(&format!("class.{c}.fp"), s.fp.to_string());
            line(&format!("class.{c}.fn"), s.fn_.to_string());
        }
        for (c, v) in &self.iou {
            line(&format!("class.{c}.iou"), format!("{v:.6}"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Full evaluation of one prediction against ground truth.
pub fn evaluate(
    pred: &PanopticLabeling,
    gt: &PanopticLabeling,
    cfg: &PolarGridConfig,
    params: &MetricParams,
) -> Result<MetricReport> {
    check_lengths(pred, gt)?;
    let gt_sets = segment_sets(gt, cfg, None);

    // void: GT ignore, GT thing points without an instance, small GT segments
    let mut keep: Vec<bool> = gt
        .semantic
        .iter()
        .zip(&gt.instance)
        .map(|(&c, &i)| c != cfg.ignore_class && !(cfg.is_thing(c) && i == 0))
        .collect();
    for seg in &gt_sets.small {
        for &p in &seg.points {
            keep[p] = false;
        }
    }
    let mut pred_sets = segment_sets(pred, cfg, Some(&keep));
    if !params.small_pred_as_void {
        for seg in std::mem::take(&mut pred_sets.small) {
            pred_sets.by_class.entry(seg.class).or_default().push(seg);
        }
    }

    let mut matches = BTreeMap::new();
    let classes: std::collections::BTreeSet<ClassId> = gt_sets
        .by_class
        .keys()
        .chain(pred_sets.by_class.keys())
        .copied()
        .collect();
    for c in classes {
        let p = pred_sets.by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        let g = gt_sets.by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        matches.insert(c, match_segments(p, g));
    }
    let scores = panoptic_quality(&matches);
    let iou = miou(pred, gt, cfg)?;
    Ok(MetricReport::assemble(scores, iou, cfg))
}
