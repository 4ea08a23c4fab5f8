//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one `PASS` / `FAIL` line; exits nonzero if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::TAU;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use polarpan::augment::{
    build_bank, global_augment, local_augment, scene_augment, AugmentParams, BankEntry,
};
use polarpan::fusion::{foreground_mask, fuse, fuse_detailed, group_by_center, nms_topk, Center};
use polarpan::grid::from_polar;
use polarpan::io::{
    decode_labels, decode_points, decode_tensor, decode_tensor_any, encode_labels, encode_points, encode_tensor,
    read_scan, write_scan, AnyTensor, FormatError,
};
use polarpan::metrics::{evaluate, MetricParams};
use polarpan::synth::{synth_scene, SynthScene, SynthSpec};
use polarpan::targets::{gaussian_heatmap, InstanceSummary, TargetParams};
use polarpan::voxel::{group, scatter_max, visibility, VIS_OCCLUDED, VIS_UNKNOWN, VIS_VISIBLE};
use polarpan::{
    BevTensor, ClassId, Error, FusionParams, InstanceId, PanopticLabeling, PixelIndex, Point, PointCloud,
    PolarGridConfig, Semantic,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle pipeline", oracle_pipeline),
        ("metric oracle equivalence", metric_oracle),
        ("fusion invariants", fusion_invariants),
        ("heatmap/offset correctness", heatmap_offsets),
        ("augmentation isometry", augmentation_isometry),
        ("visibility", visibility_rules),
        ("performance", performance),
        ("i/o round trips and malformed corpus", io_corpus),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn kitti() -> PolarGridConfig {
    PolarGridConfig::semantic_kitti()
}

fn scene(spec: SynthSpec) -> SynthScene {
    synth_scene(&spec, &kitti(), &TargetParams::default()).expect("synthetic scene")
}

/// Round-trips heatmap and offsets through the f32 file encoding, as the
/// command-line pipeline does (u32 labels are stored losslessly).
fn through_files(s: &SynthScene) -> (Semantic, BevTensor<f64>, BevTensor<f64>) {
    let f32_file = |t: &BevTensor<f64>| {
        let bytes = encode_tensor(&t.map(|v| v as f32));
        decode_tensor::<f32>(&bytes).unwrap().map(f64::from)
    };
    (Semantic::Labels(s.semantic.clone()), f32_file(&s.heatmap), f32_file(&s.offsets))
}

fn oracle_pipeline() -> Outcome {
    let start = Instant::now();
    let cfg = kitti();
    let mut worst = 1.0f64;
    for seed in 0..50 {
        let s = scene(SynthSpec {
            seed,
            ..SynthSpec::default()
        });
        let (sem, hm, off) = through_files(&s);
        let pred = fuse(&sem, &hm, &off, &s.cloud, &cfg, &FusionParams::default()).map_err(|e| e.to_string())?;
        let gt = PanopticLabeling::from_cloud(&s.cloud).unwrap();
        let r = evaluate(&pred, &gt, &cfg, &MetricParams::default()).map_err(|e| e.to_string())?;
        worst = worst.min(r.pq);
        ensure!(r.pq == 1.0, "separable scene seed {seed}: PQ {}", r.pq);
    }
    let mut overlap_pq = Vec::new();
    for seed in 0..20 {
        let s = scene(SynthSpec {
            seed: 1000 + seed,
            overlap_pairs: 2,
            ..SynthSpec::default()
        });
        let (sem, hm, off) = through_files(&s);
        let pred = fuse(&sem, &hm, &off, &s.cloud, &cfg, &FusionParams::default()).map_err(|e| e.to_string())?;
        let gt = PanopticLabeling::from_cloud(&s.cloud).unwrap();
        overlap_pq.push(evaluate(&pred, &gt, &cfg, &MetricParams::default()).unwrap().pq);
    }
    let mean = overlap_pq.iter().sum::<f64>() / overlap_pq.len() as f64;
    let elapsed = start.elapsed();
    ensure!(mean >= 0.95, "overlap scenes mean PQ {mean:.4} < 0.95");
    ensure!(elapsed <= Duration::from_secs(10), "took {elapsed:?} > 10 s");
    Ok(format!(
        "50 separable scenes PQ min {worst:.3}; 20 overlap scenes mean PQ {mean:.4} (min {:.4}); {:.2}s",
        overlap_pq.iter().copied().fold(1.0, f64::min),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// metrics

fn small_metric_cfg() -> PolarGridConfig {
    PolarGridConfig {
        thing_classes: vec![1, 2, 3],
        stuff_classes: vec![4, 5, 6],
        ignore_class: 0,
        min_instance_points: 4,
        ..kitti()
    }
}

fn random_labelings(rng: &mut ChaCha8Rng) -> (PanopticLabeling, PanopticLabeling) {
    let n = rng.random_range(1..=200);
    let instances = rng.random_range(0..=8u32);
    let mut gt = PanopticLabeling::default();
    for _ in 0..n {
        let class: ClassId = rng.random_range(0..=6);
        let inst = if (1..=3).contains(&class) && instances > 0 {
            // occasionally leave a thing point without an instance
            if rng.random_bool(0.05) {
                0
            } else {
                rng.random_range(1..=instances)
            }
        } else {
            0
        };
        gt.semantic.push(class);
        gt.instance.push(inst);
    }
    let mut pred = gt.clone();
    let noise = rng.random_range(0.0..0.6);
    for k in 0..n {
        if rng.random_bool(noise) {
            pred.semantic[k] = rng.random_range(0..=6);
        }
        if rng.random_bool(noise) {
            pred.instance[k] = rng.random_range(0..=instances + 2);
        }
    }
    (pred, gt)
}

#[derive(Debug, PartialEq, Clone, Copy)]
struct BruteScores {
    tp: usize,
    fp: usize,
    fn_: usize,
    iou_sum: f64,
}

/// All-pairs matcher written from the definitions, independent of the
/// library's segment bookkeeping.
fn brute_force_pq(pred: &PanopticLabeling, gt: &PanopticLabeling, cfg: &PolarGridConfig) -> BTreeMap<ClassId, BruteScores> {
    let thing = |c: ClassId| cfg.thing_classes.contains(&c);
    let stuff = |c: ClassId| cfg.stuff_classes.contains(&c);
    let key = |l: &PanopticLabeling, k: usize| -> Option<(ClassId, InstanceId)> {
        let c = l.semantic[k];
        if thing(c) && l.instance[k] > 0 {
            Some((c, l.instance[k]))
        } else if stuff(c) {
            Some((c, 0))
        } else {
            None
        }
    };
    let n = gt.len();
    let gt_size = |kk: (ClassId, InstanceId)| (0..n).filter(|&k| key(gt, k) == Some(kk)).count();
    let void: Vec<bool> = (0..n)
        .map(|k| {
            let c = gt.semantic[k];
            c == cfg.ignore_class
                || (thing(c) && gt.instance[k] == 0)
                || key(gt, k).is_some_and(|kk| kk.1 > 0 && gt_size(kk) < cfg.min_instance_points)
        })
        .collect();
    let segments = |l: &PanopticLabeling| -> BTreeSet<(ClassId, InstanceId)> {
        (0..n).filter(|&k| !void[k]).filter_map(|k| key(l, k)).collect()
    };
    let members = |l: &PanopticLabeling, s: (ClassId, InstanceId)| -> BTreeSet<usize> {
        (0..n).filter(|&k| !void[k] && key(l, k) == Some(s)).collect()
    };
    let pred_segs = segments(pred);
    let gt_segs = segments(gt);
    let classes: BTreeSet<ClassId> = pred_segs.iter().chain(&gt_segs).map(|s| s.0).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let ps: Vec<_> = pred_segs.iter().filter(|s| s.0 == c).map(|&s| members(pred, s)).collect();
        let gs: Vec<_> = gt_segs.iter().filter(|s| s.0 == c).map(|&s| members(gt, s)).collect();
        let mut matched_p = vec![false; ps.len()];
        let mut matched_g = vec![false; gs.len()];
        let mut iou_sum = 0.0;
        let mut tp = 0;
        for (a, p) in ps.iter().enumerate() {
            for (b, g) in gs.iter().enumerate() {
                let inter = p.intersection(g).count();
                let union = p.union(g).count();
                if inter as f64 / union as f64 > 0.5 {
                    tp += 1;
                    iou_sum += inter as f64 / union as f64;
                    matched_p[a] = true;
                    matched_g[b] = true;
                }
            }
        }
        out.insert(
            c,
            BruteScores {
                tp,
                fp: matched_p.iter().filter(|m| !**m).count(),
                fn_: matched_g.iter().filter(|m| !**m).count(),
                iou_sum,
            },
        );
    }
    out
}

fn metric_oracle() -> Outcome {
    let cfg = small_metric_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut total_tp = 0;
    for trial in 0..200 {
        let (pred, gt) = random_labelings(&mut rng);
        let report = evaluate(&pred, &gt, &cfg, &MetricParams::default()).map_err(|e| e.to_string())?;
        let brute = brute_force_pq(&pred, &gt, &cfg);
        ensure!(
            report.classes.keys().eq(brute.keys()),
            "trial {trial}: evaluated classes {:?} vs {:?}",
            report.classes.keys().collect::<Vec<_>>(),
            brute.keys().collect::<Vec<_>>()
        );
        for (c, b) in &brute {
            let s = &report.classes[c];
            ensure!(
                (s.tp, s.fp, s.fn_) == (b.tp, b.fp, b.fn_),
                "trial {trial} class {c}: tp/fp/fn {:?} vs brute {:?}",
                (s.tp, s.fp, s.fn_),
                (b.tp, b.fp, b.fn_)
            );
            let pq = b.iou_sum / (b.tp as f64 + 0.5 * b.fp as f64 + 0.5 * b.fn_ as f64);
            ensure!(
                (s.pq - pq).abs() <= 1e-12 && (s.iou_sum - b.iou_sum).abs() <= 1e-12,
                "trial {trial} class {c}: PQ {} vs brute {pq}",
                s.pq
            );
            total_tp += b.tp;
        }
    }

    // one class: GT segment of 10 points; prediction covers 6 of them (IoU
    // 0.6) plus a stray 5-point segment
    let hand_cfg = PolarGridConfig {
        min_instance_points: 1,
        ..small_metric_cfg()
    };
    let gt = PanopticLabeling {
        semantic: [vec![1; 10], vec![4; 5]].concat(),
        instance: [vec![1; 10], vec![0; 5]].concat(),
    };
    let pred = PanopticLabeling {
        semantic: [vec![1; 6], vec![4; 4], vec![1; 5]].concat(),
        instance: [vec![7; 6], vec![0; 4], vec![8; 5]].concat(),
    };
    let r = evaluate(&pred, &gt, &hand_cfg, &MetricParams::default()).unwrap();
    let s = r.classes[&1];
    ensure!(
        (s.tp, s.fp, s.fn_) == (1, 1, 0)
            && (s.sq - 0.6).abs() < 1e-15
            && (s.rq - 2.0 / 3.0).abs() < 1e-15
            && (s.pq - 0.4).abs() < 1e-15,
        "handcrafted case: {s:?}"
    );
    Ok(format!(
        "200 random labelings match the all-pairs matcher ({total_tp} TPs); handcrafted SQ {:.3} RQ {:.4} PQ {:.3}",
        s.sq, s.rq, s.pq
    ))
}

// ---------------------------------------------------------------------------
// fusion

fn small_grid() -> PolarGridConfig {
    PolarGridConfig {
        d_min: 0.0,
        d_max: 40.0,
        z_min: -2.0,
        z_max: 2.0,
        radial_bins: 40,
        angular_bins: 36,
        height_bins: 4,
        min_instance_points: 1,
        ..kitti()
    }
}

fn random_heatmap(rng: &mut ChaCha8Rng, h: usize, w: usize, levels: u32) -> BevTensor<f64> {
    // coarse levels make equal neighbors common
    let data = (0..h * w)
        .map(|_| rng.random_range(0..=levels) as f64 / levels as f64)
        .collect();
    BevTensor::new(vec![h, w], data).unwrap()
}

fn brute_nms(hm: &BevTensor<f64>, p: &FusionParams) -> Vec<Center> {
    let (h, w) = hm.bev_dims();
    let r = (p.nms_kernel / 2) as isize;
    let at = |i: isize, j: isize| hm.data()[i as usize * w + j as usize];
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            let v = at(i, j);
            if v < p.nms_threshold || v <= 0.0 {
                continue;
            }
            let mut keep = true;
            for di in -r..=r {
                for dj in -r..=r {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= h as isize || b >= w as isize || (di, dj) == (0, 0) {
                        continue;
                    }
                    let n = at(a, b);
                    // strictly greater neighbor, or an equal one earlier in row-major order
                    if n > v || (n == v && (a, b) < (i, j)) {
                        keep = false;
                    }
                }
            }
            if keep {
                out.push(Center {
                    pixel: PixelIndex {
                        i: i as usize,
                        j: j as usize,
                    },
                    score: v,
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pixel.cmp(&b.pixel)));
    out.truncate(p.top_k);
    out
}

fn random_fusion_case(rng: &mut ChaCha8Rng, cfg: &PolarGridConfig) -> (Semantic, BevTensor<f64>, BevTensor<f64>, PointCloud) {
    let (h, w, z) = cfg.voxel_dims();
    let classes: [u32; 7] = [0, 1, 2, 3, 9, 10, 11];
    let labels: Vec<u32> = (0..h * w * z).map(|_| classes[rng.random_range(0..classes.len())]).collect();
    let semantic = if rng.random_bool(0.5) {
        Semantic::Labels(BevTensor::new(vec![h, w, z], labels).unwrap())
    } else {
        let c = 12;
        let probs = (0..h * w * z * c).map(|_| rng.random::<f32>()).collect();
        Semantic::VoxelProbs(BevTensor::new(vec![h, w, z, c], probs).unwrap())
    };
    let heatmap = random_heatmap(rng, h, w, 20);
    let offsets = BevTensor::new(vec![h, w, 2], (0..h * w * 2).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
    let points = (0..500)
        .map(|_| {
            let (x, y, zz) = from_polar(
                rng.random_range(0.0..cfg.d_max),
                rng.random_range(0.0..TAU),
                rng.random_range(cfg.z_min..cfg.z_max),
            );
            Point::new(x, y, zz, 0.5)
        })
        .collect();
    (semantic, heatmap, offsets, PointCloud::new(points))
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

fn fusion_invariants() -> Outcome {
    let cfg = kitti();
    let noisy = scene(SynthSpec {
        seed: 77,
        noise_std: 0.05,
        overlap_pairs: 2,
        ..SynthSpec::default()
    });
    let run = || {
        fuse(
            &Semantic::Labels(noisy.semantic.clone()),
            &noisy.heatmap,
            &noisy.offsets,
            &noisy.cloud,
            &cfg,
            &FusionParams::default(),
        )
        .unwrap()
    };
    let reference = run();
    for k in 0..4 {
        ensure!(run() == reference, "run {} differs from run 0", k + 1);
    }
    let one = in_pool(1, run);
    let four = in_pool(4, run);
    ensure!(one == reference && four == reference, "results differ across thread counts");

    let small = small_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut violations = 0;
    let mut instance_points = 0;
    for _ in 0..100 {
        let (sem, hm, off, cloud) = random_fusion_case(&mut rng, &small);
        let params = FusionParams {
            top_k: rng.random_range(1..=30),
            ..FusionParams::default()
        };
        let out = fuse_detailed(&sem, &hm, &off, &cloud, &small, &params).map_err(|e| e.to_string())?;
        let l = &out.labeling;
        let mut class_of: HashMap<InstanceId, ClassId> = HashMap::new();
        for (&c, &i) in l.semantic.iter().zip(&l.instance) {
            if i == 0 {
                continue;
            }
            instance_points += 1;
            if !small.is_thing(c) || i as usize > out.centers.len() || *class_of.entry(i).or_insert(c) != c {
                violations += 1;
            }
        }
    }
    ensure!(violations == 0, "{violations} instance/semantic consistency violations");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let hm = random_heatmap(&mut rng, 60, 50, 50);
        let mut last = usize::MAX;
        for t in 0..=20 {
            let params = FusionParams {
                nms_threshold: t as f64 / 20.0,
                top_k: usize::MAX,
                ..FusionParams::default()
            };
            let n = nms_topk(&hm, &params).unwrap().len();
            ensure!(n <= last, "center count rose from {last} to {n} at threshold {}", params.nms_threshold);
            last = n;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut survivors = 0;
    for trial in 0..100 {
        let h = rng.random_range(1..70);
        let w = rng.random_range(1..70);
        let hm = random_heatmap(&mut rng, h, w, [5, 20, 1000][trial % 3]);
        let params = FusionParams {
            nms_kernel: [1, 3, 5, 7][trial % 4],
            nms_threshold: rng.random_range(0.0..0.5),
            top_k: if trial % 5 == 0 { 7 } else { usize::MAX },
        };
        let fast = nms_topk(&hm, &params).unwrap();
        let slow = brute_nms(&hm, &params);
        ensure!(fast == slow, "heatmap {trial} ({h}×{w}): {} vs {} survivors", fast.len(), slow.len());
        survivors += fast.len();
    }
    Ok(format!(
        "5 runs and 1/4 threads identical; 0 violations over 100 random fusions ({instance_points} instance points); \
         monotone center counts; NMS equals brute force on 100 heatmaps ({survivors} survivors)"
    ))
}

// ---------------------------------------------------------------------------
// targets

fn heatmap_offsets() -> Outcome {
    let cfg = kitti();
    let w = cfg.angular_bins;
    let summary = InstanceSummary {
        id: 1,
        class: 1,
        center: [40.0, 100.0],
        points: 100,
        crosses_seam: false,
    };
    let hm = gaussian_heatmap(&[summary], 5.0, &cfg).unwrap();
    let expected = (-0.5f64).exp();
    for (i, j) in [(45, 100), (35, 100), (40, 105), (40, 95), (43, 104)] {
        let v = hm.data()[i * w + j];
        ensure!((v - expected).abs() <= 1e-12, "distance-5 pixel ({i},{j}): {v} vs {expected}");
    }

    let mut pixels = 0;
    for seed in 0..50 {
        let s = scene(SynthSpec {
            seed: 500 + seed,
            ..SynthSpec::default()
        });
        let t = &s.targets;
        let (h, w) = t.mask.bev_dims();
        let centers: HashMap<InstanceId, [f64; 2]> = t.summaries.iter().map(|s| (s.id, s.center)).collect();
        for i in 0..h {
            for j in 0..w {
                if t.mask.pixel(i, j)[0] == 0 {
                    continue;
                }
                pixels += 1;
                let c = centers[&t.assignment.pixel(i, j)[0]];
                let o = t.offsets.pixel(i, j);
                let d = (i as f64 + o[0] - c[0]).hypot(j as f64 + o[1] - c[1]);
                ensure!(d == 0.0, "seed {seed} pixel ({i},{j}): |p + offset - c| = {d}");
            }
        }

        let peaks: Vec<PixelIndex> = nms_topk(&t.heatmap, &FusionParams::default())
            .unwrap()
            .into_iter()
            .map(|c| c.pixel)
            .collect();
        ensure!(peaks.len() == t.summaries.len(), "seed {seed}: {} peaks for {} instances", peaks.len(), t.summaries.len());
        let fg = foreground_mask(&s.semantic, &cfg);
        ensure!(fg.data() == t.mask.data(), "seed {seed}: semantic foreground differs from the target mask");
        let groups = group_by_center(&fg, &t.offsets, &peaks).unwrap().groups;
        let mut forward: HashMap<u32, u32> = HashMap::new();
        let mut backward: HashMap<u32, u32> = HashMap::new();
        for (&g, &a) in groups.data().iter().zip(t.assignment.data()) {
            ensure!((g == 0) == (a == 0), "seed {seed}: grouped and assigned pixels differ");
            if g > 0 && (*forward.entry(g).or_insert(a) != a || *backward.entry(a).or_insert(g) != g) {
                return Err(format!("seed {seed}: group {g} and instance {a} are not in bijection"));
            }
        }
        ensure!(forward.len() == t.summaries.len(), "seed {seed}: {} groups", forward.len());
    }
    Ok(format!(
        "exp(-1/2) to 1e-12 at five distance-5 pixels; {pixels} foreground pixels with zero residual; \
         GT partition recovered on 50 scenes"
    ))
}

// ---------------------------------------------------------------------------
// augmentation

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let (cx, cy, _) = from_polar(rng.random_range(3.0..50.0), rng.random_range(0.0..TAU), 0.0);
    let radius = rng.random_range(0.2..3.0);
    (0..rng.random_range(2..60))
        .map(|_| {
            Point::new(
                cx + rng.random_range(-radius..radius),
                cy + rng.random_range(-radius..radius),
                rng.random_range(-2.0..1.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect()
}

fn max_distance_drift(a: &[Point], b: &[Point]) -> f64 {
    let dist = |p: &Point, q: &Point| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            worst = worst.max((dist(&a[i], &a[j]) - dist(&b[i], &b[j])).abs());
        }
    }
    worst
}

fn augmentation_isometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let always = AugmentParams {
        p_rotation: 1.0,
        p_reflection: 1.0,
        scene_flip_x: 0.5,
        scene_flip_y: 0.5,
        scene_flip_xy: 0.5,
        ..AugmentParams::default()
    };
    let mut range_err = 0.0f64;
    let mut dist_err = 0.0f64;
    for k in 0..1000 {
        let params = if k % 2 == 0 { AugmentParams::default() } else { always.clone() };
        let inst = random_instance(&mut rng);
        let g = global_augment(&inst, &params, &mut rng);
        for (p, q) in inst.iter().zip(&g) {
            let r0 = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
            let r1 = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
            range_err = range_err.max((r0 - r1).abs()).max((p.planar_range() - q.planar_range()).abs());
        }
        let l = local_augment(&g, &params, &mut rng);
        let s = scene_augment(&PointCloud::new(l.clone()), &params, &mut rng).points;
        dist_err = dist_err
            .max(max_distance_drift(&inst, &g))
            .max(max_distance_drift(&g, &l))
            .max(max_distance_drift(&l, &s));
    }
    ensure!(range_err <= 1e-9, "global augmentation moved a point's range by {range_err:e} m");
    ensure!(dist_err <= 1e-9, "pairwise distances drifted by {dist_err:e} m");

    // bank with 4 classes of very different sizes
    let cfg = PolarGridConfig {
        min_instance_points: 1,
        ..kitti()
    };
    let sizes: [(ClassId, usize); 4] = [(1, 5000), (2, 1200), (3, 300), (5, 40)];
    let mut points = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for (n, &(class, count)) in sizes.iter().enumerate() {
        // two instances per class
        for half in 0..2 {
            for _ in 0..count / 2 {
                let (x, y, z) = from_polar(10.0 + 5.0 * n as f64, rng.random_range(0.0..1.0), 0.0);
                points.push(Point::new(x, y, z, 0.1));
                semantic.push(class);
                instance.push((2 * n + half + 1) as InstanceId);
            }
        }
    }
    let bank = build_bank(&[PointCloud::labeled(points, semantic, instance).unwrap()], &cfg).map_err(|e| e.to_string())?;
    // reciprocal-ratio weights from the class totals, computed here
    let inv: Vec<f64> = sizes.iter().map(|&(_, n)| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    let draws = 100_000;
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    for _ in 0..draws {
        let e: &BankEntry = bank.sample(&mut rng).unwrap();
        *counts.entry(e.class).or_default() += 1;
    }
    let mut worst_z = 0.0f64;
    for (&(class, _), w) in sizes.iter().zip(&inv) {
        let p = w / total;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let got = counts.get(&class).copied().unwrap_or(0) as f64;
        let z = (got - mean).abs() / sd;
        worst_z = worst_z.max(z);
        ensure!(z <= 3.0, "class {class}: {got} draws, expected {mean:.1} ± {:.1}", 3.0 * sd);
    }
    Ok(format!(
        "1000 instances: range drift {range_err:.1e} m, pairwise drift {dist_err:.1e} m; \
         bank frequencies over 1e5 draws within {worst_z:.2}σ"
    ))
}

// ---------------------------------------------------------------------------
// visibility

fn visibility_rules() -> Outcome {
    let cfg = kitti();
    let (h, w, z) = cfg.voxel_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut columns = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(0..5000);
        let points = (0..n)
            .map(|_| {
                let (x, y, zz) = from_polar(
                    rng.random_range(0.0..60.0),
                    rng.random_range(0.0..TAU),
                    rng.random_range(-4.0..2.5),
                );
                Point::new(x, y, zz, 0.5)
            })
            .collect();
        let vis = visibility(&PointCloud::new(points), &cfg);
        for j in 0..w {
            for k in 0..z {
                let mut seen_occluded = false;
                let mut state = None;
                for i in 0..h {
                    let v = vis.pixel(i, j)[k];
                    match v {
                        VIS_OCCLUDED => seen_occluded = true,
                        VIS_VISIBLE if seen_occluded => {
                            return Err(format!("column ({j},{k}) visible at bin {i} after an occluded bin"))
                        }
                        _ => {}
                    }
                    // a column is either entirely unknown or has no unknown bins
                    let unknown = v == VIS_UNKNOWN;
                    if *state.get_or_insert(unknown) != unknown {
                        return Err(format!("column ({j},{k}) mixes unknown and observed bins"));
                    }
                }
                columns += 1;
            }
        }
    }

    // a single return at radial bin 10 of column (j, k)
    let (j, k) = (17, 12);
    let d = cfg.d_min + (10.5) * (cfg.d_max - cfg.d_min) / h as f64;
    let theta = (j as f64 + 0.5) * TAU / w as f64;
    let zz = cfg.z_min + (k as f64 + 0.5) * (cfg.z_max - cfg.z_min) / z as f64;
    let (x, y, _) = from_polar(d, theta, 0.0);
    let vis = visibility(&PointCloud::new(vec![Point::new(x, y, zz, 0.3)]), &cfg);
    for i in 0..h {
        for jj in 0..w {
            for kk in 0..z {
                let v = vis.pixel(i, jj)[kk];
                let expected = if (jj, kk) != (j, k) {
                    VIS_UNKNOWN
                } else if i <= 10 {
                    VIS_VISIBLE
                } else {
                    VIS_OCCLUDED
                };
                ensure!(v == expected, "single return: voxel ({i},{jj},{kk}) = {v}, expected {expected}");
            }
        }
    }
    Ok(format!("{columns} columns over 100 scans monotone; single-return column exact"))
}

// ---------------------------------------------------------------------------
// performance

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn performance() -> Outcome {
    let cfg = kitti();
    let s = scene(SynthSpec {
        seed: 4242,
        instances: (100, 100),
        points_per_instance: (300, 300),
        footprint_radius: (0.5, 1.0),
        stuff_points: 70_000,
        max_attempts: 100_000,
        ..SynthSpec::default()
    });
    ensure!(s.cloud.len() == 100_000, "scene has {} points", s.cloud.len());
    let semantic = Semantic::Labels(s.semantic.clone());
    let params = FusionParams::default();
    let (fuse_time, voxel_time, centers) = in_pool(1, || {
        let mut fuse_times = Vec::new();
        let mut centers = 0;
        for _ in 0..5 {
            let t = Instant::now();
            let out = fuse_detailed(&semantic, &s.heatmap, &s.offsets, &s.cloud, &cfg, &params).unwrap();
            fuse_times.push(t.elapsed());
            centers = out.centers.len();
        }
        let mut voxel_times = Vec::new();
        for _ in 0..5 {
            let t = Instant::now();
            let grouped = group(&s.cloud, &cfg);
            let features = scatter_max(&grouped, grouped.feature_dim()).unwrap();
            let vis = visibility(&s.cloud, &cfg);
            voxel_times.push(t.elapsed());
            assert_eq!((features.bev_dims(), vis.bev_dims()), ((480, 360), (480, 360)));
        }
        (median(fuse_times), median(voxel_times), centers)
    });
    ensure!(centers == 100, "{centers} centers survived NMS, expected 100");
    let detail = format!(
        "single-threaded medians on 480×360×32, 1e5 points: fuse {:.1} ms with 100 centers (≤ 100), \
         voxelize + visibility {:.1} ms (≤ 150)",
        fuse_time.as_secs_f64() * 1e3,
        voxel_time.as_secs_f64() * 1e3
    );
    ensure!(fuse_time <= Duration::from_millis(100) && voxel_time <= Duration::from_millis(150), "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------------------
// i/o

fn random_tensor(rng: &mut ChaCha8Rng) -> AnyTensor {
    let ndim = rng.random_range(1..=4);
    let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(0..6)).collect();
    let n: usize = shape.iter().product();
    match rng.random_range(0..3) {
        0 => AnyTensor::F32(BevTensor::new(shape, (0..n).map(|_| f32::from_bits(rng.random())).collect()).unwrap()),
        1 => AnyTensor::U32(BevTensor::new(shape, (0..n).map(|_| rng.random()).collect()).unwrap()),
        _ => AnyTensor::U8(BevTensor::new(shape, (0..n).map(|_| rng.random()).collect()).unwrap()),
    }
}

fn encode_any(t: &AnyTensor) -> Vec<u8> {
    match t {
        AnyTensor::F32(t) => encode_tensor(t),
        AnyTensor::U32(t) => encode_tensor(t),
        AnyTensor::U8(t) => encode_tensor(t),
    }
}

fn io_corpus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for trial in 0..100 {
        let t = random_tensor(&mut rng);
        let bytes = encode_any(&t);
        let back = decode_tensor_any(&bytes).map_err(|e| format!("tensor {trial}: {e}"))?;
        // compare bytes rather than values: random f32 bit patterns include NaNs
        ensure!(encode_any(&back) == bytes && back.shape() == t.shape(), "tensor {trial} not byte-exact");

        let n = rng.random_range(0..300);
        let mut raw = Vec::with_capacity(16 * n);
        for _ in 0..4 * n {
            raw.extend_from_slice(&(rng.random_range(-80.0f32..80.0)).to_le_bytes());
        }
        let labels: Vec<u8> = (0..n).flat_map(|_| rng.random::<u32>().to_le_bytes()).collect();
        let (p, l) = (dir.path().join(format!("{trial}.bin")), dir.path().join(format!("{trial}.label")));
        std::fs::write(&p, &raw).unwrap();
        std::fs::write(&l, &labels).unwrap();
        let cloud = read_scan(&p, Some(&l)).map_err(|e| format!("scan {trial}: {e}"))?;
        let (p2, l2) = (dir.path().join(format!("{trial}b.bin")), dir.path().join(format!("{trial}b.label")));
        write_scan(&cloud, &p2, Some(&l2)).map_err(|e| e.to_string())?;
        ensure!(
            std::fs::read(&p2).unwrap() == raw && std::fs::read(&l2).unwrap() == labels,
            "scan {trial} not byte-exact"
        );
    }

    let mut cases = 0;
    let valid = encode_tensor(&BevTensor::new(vec![2, 3], vec![1u32, 2, 3, 4, 5, 6]).unwrap());
    for cut in 0..valid.len() {
        ensure!(
            matches!(decode_tensor_any(&valid[..cut]), Err(FormatError::Truncated { .. } | FormatError::BadMagic { .. })),
            "tensor truncated at {cut} not rejected as truncated"
        );
        cases += 1;
    }
    let mut bad = valid.clone();
    bad[..4].copy_from_slice(b"PPT2");
    ensure!(matches!(decode_tensor_any(&bad), Err(FormatError::BadMagic { .. })), "bad magic accepted");
    let mut bad = valid.clone();
    bad[4] = 9;
    ensure!(matches!(decode_tensor_any(&bad), Err(FormatError::UnknownDtype { code: 9 })), "dtype 9 accepted");
    let mut bad = valid.clone();
    bad.push(0);
    ensure!(matches!(decode_tensor_any(&bad), Err(FormatError::TrailingBytes { count: 1, .. })), "trailing byte accepted");
    ensure!(
        matches!(decode_tensor::<f32>(&valid), Err(FormatError::DtypeMismatch { .. })),
        "u32 file decoded as f32"
    );
    let mut huge = b"PPT1\x00\x02".to_vec();
    huge.extend_from_slice(&u64::MAX.to_le_bytes());
    huge.extend_from_slice(&u64::MAX.to_le_bytes());
    ensure!(matches!(decode_tensor_any(&huge), Err(FormatError::DimsOverflow { .. })), "overflowing dims accepted");
    cases += 5;

    let points = encode_points(&[Point::new(0.0, 0.0, 0.0, 0.5), Point::new(1.0, 2.0, 3.0, 0.25)]);
    for cut in [1, 15, 17, 31] {
        ensure!(
            matches!(decode_points(&points[..cut]), Err(FormatError::Truncated { .. })),
            "point file cut at {cut} accepted"
        );
        ensure!(
            matches!(decode_labels(&points[..cut.min(7)]), Err(FormatError::Truncated { .. }) | Ok(_)),
            "label decode crashed"
        );
        cases += 1;
    }
    let mut nan = points.clone();
    nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
    ensure!(matches!(decode_points(&nan), Err(FormatError::NonFinite { index: 1 })), "NaN point accepted");
    let p = dir.path().join("m.bin");
    let l = dir.path().join("m.label");
    std::fs::write(&p, &points).unwrap();
    std::fs::write(&l, encode_labels(&[1], &[0]).unwrap()).unwrap();
    ensure!(
        matches!(read_scan(&p, Some(&l)), Err(Error::Format(FormatError::CountMismatch { points: 2, labels: 1 }))),
        "count mismatch accepted"
    );
    ensure!(
        matches!(read_scan(&dir.path().join("missing.bin"), None), Err(Error::Io { .. })),
        "missing file not an I/O error"
    );
    cases += 3;
    Ok(format!("100 tensor and scan round trips byte-exact; {cases} malformed inputs rejected with typed errors"))
}
