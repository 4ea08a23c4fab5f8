use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use polarpan::augment::{augment_scan, build_bank};
use polarpan::config::load_fusion_params;
use polarpan::fusion::{fuse_detailed, nms_topk};
use polarpan::io::{
    encode_labels, load_bank, read_scan, read_tensor, read_tensor_any, save_bank, write_atomic, write_scan,
    write_tensor, AnyTensor,
};
use polarpan::metrics::evaluate;
use polarpan::render::write_bev;
use polarpan::synth::{synth_scene, SynthSpec};
use polarpan::targets::build_targets;
use polarpan::voxel::{group, scatter_max, visibility, voxel_labels};
use polarpan::{BevTensor, Config, PanopticLabeling, PixelIndex, Semantic};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing_subscriber::EnvFilter;

/// Polar BEV panoptic segmentation pipeline.
#[derive(Parser)]
#[command(name = "polarpan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Preset name (semantickitti, nuscenes), TOML path, or a name under
    /// $POLARPAN_CONFIG_DIR.
    #[arg(long, default_value = "semantickitti")]
    config: String,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        Config::resolve(&self.config).with_context(|| format!("loading config {:?}", self.config))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a scan: BEV features, optional voxel labels and visibility.
    Voxelize {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        /// Max-pooled point features, f32 H×W×F.
        #[arg(long)]
        features: PathBuf,
        /// Majority voxel labels, u32 H×W×Z (needs --labels).
        #[arg(long)]
        semantic: Option<PathBuf>,
        /// Visibility codes, u8 H×W×Z.
        #[arg(long)]
        visibility: Option<PathBuf>,
    },
    /// Ground-truth heatmap, offsets and mask for a labeled scan.
    Targets {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Panoptic fusion of semantic, heatmap and offset tensors.
    Fuse {
        /// u32 labels H×W×Z, f32 probabilities H×W×Z×C or H×W×C.
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        offsets: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Fusion parameter overrides (TOML).
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output label file.
        #[arg(long)]
        out: PathBuf,
        /// Optional u32 H×W group map.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// PQ / mIoU of predicted against ground-truth label files.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Training-time augmentation of a labeled scan.
    Augment {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Instance bank directory for oversampling.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_points: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        /// Visibility of the augmented scan, u8 H×W×Z.
        #[arg(long)]
        visibility: Option<PathBuf>,
    },
    /// Build an instance bank from labeled scans.
    Bank {
        /// Point files; pair each with a --labels file in order.
        #[arg(long, required = true, num_args = 1..)]
        points: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        labels: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene with exact targets.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        overlap_pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
    },
    /// Render a BEV image (PPM).
    Render {
        /// u32 labels H×W×Z.
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Centers are marked at the NMS peaks of this heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(summary) => {
            // a closed pipe (`| head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Voxelize {
            points,
            labels,
            config,
            features,
            semantic,
            visibility: vis_out,
        } => {
            let cfg = config.load()?;
            let cloud = read_scan(&points, labels.as_deref())?;
            let grouped = group(&cloud, &cfg.grid);
            let pooled = scatter_max(&grouped, grouped.feature_dim())?;
            write_tensor(&features, &pooled)?;
            if let Some(path) = semantic {
                ensure!(labels.is_some(), "--semantic needs --labels");
                write_tensor(&path, &voxel_labels(&cloud, &cfg.grid)?)?;
            }
            if let Some(path) = vis_out {
                write_tensor(&path, &visibility(&cloud, &cfg.grid))?;
            }
            Ok(format!(
                "voxelized {} points ({} in range) into {:?}",
                cloud.len(),
                grouped.in_range_count(),
                pooled.shape()
            ))
        }
        Command::Targets {
            points,
            labels,
            config,
            out,
        } => {
            let cfg = config.load()?;
            let cloud = read_scan(&points, Some(&labels))?;
            let t = build_targets(&cloud, &cfg.grid, &cfg.targets)?;
            create_dir(&out)?;
            write_tensor(&out.join("heatmap.ppt"), &to_f32(&t.heatmap))?;
            write_tensor(&out.join("offsets.ppt"), &to_f32(&t.offsets))?;
            write_tensor(&out.join("mask.ppt"), &t.mask)?;
            Ok(format!("targets for {} instances written to {}", t.summaries.len(), out.display()))
        }
        Command::Fuse {
            semantic,
            heatmap,
            offsets,
            points,
            config,
            params,
            out,
            groups,
        } => {
            let cfg = config.load()?;
            let fusion = match params {
                Some(path) => load_fusion_params(&path)?,
                None => cfg.fusion,
            };
            let semantic = match read_tensor_any(&semantic)? {
                AnyTensor::U32(t) if t.shape().len() == 3 => Semantic::Labels(t),
                AnyTensor::F32(t) if t.shape().len() == 4 => Semantic::VoxelProbs(t),
                AnyTensor::F32(t) if t.shape().len() == 3 => Semantic::PixelProbs(t),
                other => bail!(
                    "semantic tensor must be u32 H×W×Z or f32 H×W×Z×C / H×W×C, got {} {:?}",
                    other.dtype_name(),
                    other.shape()
                ),
            };
            let heatmap = read_tensor::<f32>(&heatmap)?.map(f64::from);
            let offsets = read_tensor::<f32>(&offsets)?.map(f64::from);
            let cloud = read_scan(&points, None)?;
            let fused = fuse_detailed(&semantic, &heatmap, &offsets, &cloud, &cfg.grid, &fusion)?;
            write_labeling(&out, &fused.labeling)?;
            if let Some(path) = groups {
                write_tensor(&path, &fused.grouping.groups)?;
            }
            let instances = fused.labeling.instance.iter().filter(|&&i| i > 0).count();
            Ok(format!(
                "fused {} points: {} centers, {} instance points",
                fused.labeling.len(),
                fused.centers.len(),
                instances
            ))
        }
        Command::Eval {
            pred,
            gt,
            config,
            json,
        } => {
            let cfg = config.load()?;
            let pred = read_labeling(&pred)?;
            let gt = read_labeling(&gt)?;
            let report = evaluate(&pred, &gt, &cfg.grid, &cfg.metrics)?;
            if let Some(path) = json {
                write_atomic(&path, report.to_json().as_bytes())?;
            }
            Ok(format!(
                "PQ {:.3} SQ {:.3} RQ {:.3} mIoU {:.3}\n{}",
                report.pq,
                report.sq,
                report.rq,
                report.miou,
                report.to_table().trim_end()
            ))
        }
        Command::Augment {
            points,
            labels,
            config,
            bank,
            seed,
            out_points,
            out_labels,
            visibility: vis_out,
        } => {
            let cfg = config.load()?;
            let scan = read_scan(&points, Some(&labels))?;
            let bank = bank.as_deref().map(load_bank).transpose()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_scan(&scan, bank.as_ref(), &cfg.augment, &cfg.grid, &mut rng)?;
            write_scan(&out, &out_points, Some(&out_labels))?;
            if let Some(path) = vis_out {
                write_tensor(&path, &visibility(&out, &cfg.grid))?;
            }
            Ok(format!("augmented scan: {} -> {} points", scan.len(), out.len()))
        }
        Command::Bank {
            points,
            labels,
            config,
            out,
        } => {
            ensure!(
                points.len() == labels.len(),
                "{} --points files but {} --labels files",
                points.len(),
                labels.len()
            );
            let cfg = config.load()?;
            let scans = points
                .iter()
                .zip(&labels)
                .map(|(p, l)| read_scan(p, Some(l)))
                .collect::<polarpan::Result<Vec<_>>>()?;
            let bank = build_bank(&scans, &cfg.grid)?;
            save_bank(&bank, &out)?;
            Ok(format!("bank of {} instances written to {}", bank.len(), out.display()))
        }
        Command::Synth {
            seed,
            config,
            out,
            overlap_pairs,
            noise_std,
        } => {
            let cfg = config.load()?;
            let spec = SynthSpec {
                seed,
                overlap_pairs,
                noise_std,
                ..SynthSpec::default()
            };
            let scene = synth_scene(&spec, &cfg.grid, &cfg.targets)?;
            create_dir(&out)?;
            write_scan(&scene.cloud, &out.join("points.bin"), Some(&out.join("labels.label")))?;
            write_tensor(&out.join("semantic.ppt"), &scene.semantic)?;
            write_tensor(&out.join("heatmap.ppt"), &to_f32(&scene.heatmap))?;
            write_tensor(&out.join("offsets.ppt"), &to_f32(&scene.offsets))?;
            write_tensor(&out.join("mask.ppt"), &scene.targets.mask)?;
            Ok(format!(
                "synthetic scene: {} points, {} instances, written to {}",
                scene.cloud.len(),
                scene.targets.summaries.len(),
                out.display()
            ))
        }
        Command::Render {
            semantic,
            groups,
            heatmap,
            config,
            out,
        } => {
            let cfg = config.load()?;
            let labels = read_tensor::<u32>(&semantic)?;
            let groups = groups.as_deref().map(read_tensor::<u32>).transpose()?;
            let centers: Vec<PixelIndex> = match heatmap {
                Some(path) => nms_topk(&read_tensor::<f32>(&path)?.map(f64::from), &cfg.fusion)?
                    .into_iter()
                    .map(|c| c.pixel)
                    .collect(),
                None => Vec::new(),
            };
            write_bev(&out, &labels, groups.as_ref(), &centers, &cfg.grid)?;
            Ok(format!("rendered {} centers to {}", centers.len(), out.display()))
        }
    }
}

fn to_f32(t: &BevTensor<f64>) -> BevTensor<f32> {
    t.map(|v| v as f32)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_labeling(path: &Path) -> Result<PanopticLabeling> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (semantic, instance) =
        polarpan::io::decode_labels(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(PanopticLabeling { semantic, instance })
}

fn write_labeling(path: &Path, labeling: &PanopticLabeling) -> Result<()> {
    write_atomic(path, &encode_labels(&labeling.semantic, &labeling.instance)?)?;
    Ok(())
}
