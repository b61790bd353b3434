//! The work behind each subcommand, callable without the argument parser.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use rcv_core::boxops::{evaluate, iou3d, mean_ap, EvalReport, SceneBoxes};
use rcv_core::detect::DetectorNoise;
use rcv_core::io::{self, MANIFEST_FILE};
use rcv_core::recursion::{detect_scene, FrameData};
use rcv_core::synthscene::{class_table_for, generate_scene, SceneFrame, SceneSpec};
use rcv_core::OrientedBox3D;

use crate::config::{DetectorHandle, DetectorSpec, PipelineConfig};

/// Writes `out/scene_<k>` for `k in 0..n`, scene `k` seeded with `seed + k`.
pub fn synth(cfg: &PipelineConfig, n: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let frames: Vec<SceneFrame> = (0..n)
        .into_par_iter()
        .map(|k| {
            let spec = SceneSpec {
                seed: seed.wrapping_add(k as u64),
                ..cfg.synth.clone()
            };
            generate_scene(&spec).with_context(|| format!("scene {k} (seed {})", spec.seed))
        })
        .collect::<Result<_>>()?;
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| Ok(io::write_scene(&out.join(format!("scene_{k}")), f)?))
        .collect()
}

/// Expands inputs into manifest paths: a manifest file, a directory holding
/// one, or a directory whose subdirectories hold one (sorted by name).
pub fn find_manifests(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_file() {
            out.push(input.clone());
        } else if input.join(MANIFEST_FILE).is_file() {
            out.push(input.join(MANIFEST_FILE));
        } else if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("{}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path().join(MANIFEST_FILE)))
                .filter(|p| p.is_file())
                .collect();
            if found.is_empty() {
                bail!("{}: no {MANIFEST_FILE} here or in subdirectories", input.display());
            }
            found.sort();
            out.extend(found);
        } else {
            bail!("{}: no such file or directory", input.display());
        }
    }
    Ok(out)
}

/// Name of the frame a manifest describes: its directory name.
pub fn frame_name(manifest: &Path) -> String {
    manifest
        .parent()
        .and_then(|d| d.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frame".to_string())
}

pub struct Detectors {
    rgb: DetectorHandle,
    pv: DetectorHandle,
}

impl Detectors {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            rgb: DetectorHandle::build(&cfg.detector_rgb, &cfg.scratch_dir)?,
            pv: DetectorHandle::build(&cfg.detector_pv, &cfg.scratch_dir)?,
        })
    }
}

/// Boxes for one loaded frame.
pub fn detect_frame(cfg: &PipelineConfig, det: &Detectors, frame: &FrameData, gt: Option<&[OrientedBox3D]>) -> Result<Vec<OrientedBox3D>> {
    let classes = gt.map(class_table_for);
    let rgb = det.rgb.for_frame(classes.as_ref())?;
    let pv = det.pv.for_frame(classes.as_ref())?;
    let out = detect_scene(frame, rgb.as_ref(), pv.as_ref(), &cfg.recursion, cfg.nms_tau, cfg.parallelism)?;
    Ok(out.boxes)
}

/// Runs detection on every manifest. Output goes to `out/<frame>/boxes.json`,
/// or next to the manifest without `out`.
pub fn detect(cfg: &PipelineConfig, inputs: &[PathBuf], out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let det = Detectors::from_config(cfg)?;
    let mut written = Vec::new();
    for m in find_manifests(inputs)? {
        let frame = io::load_frame(&m)?;
        let boxes = detect_frame(cfg, &det, &frame.frame, frame.gt_boxes.as_deref()).with_context(|| format!("{}", m.display()))?;
        let dir = match out {
            Some(o) => o.join(frame_name(&m)),
            None => m.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        fs::create_dir_all(&dir).with_context(|| format!("{}", dir.display()))?;
        let path = dir.join("boxes.json");
        io::write_boxes(&path, &boxes)?;
        log::info!("{}: {} boxes", m.display(), boxes.len());
        written.push(path);
    }
    Ok(written)
}

/// Pairs ground truth under `gt` with `pred/<frame>/boxes.json` and scores them.
pub fn eval(cfg: &PipelineConfig, gt: &Path, pred: &Path) -> Result<Vec<EvalReport>> {
    let mut scenes = Vec::new();
    for m in find_manifests(&[gt.to_path_buf()])? {
        let frame = io::load_frame(&m)?;
        let gts = frame
            .gt_boxes
            .with_context(|| format!("{}: manifest has no gt_boxes", m.display()))?;
        let pred_path = pred.join(frame_name(&m)).join("boxes.json");
        let preds = io::read_boxes(&pred_path)?;
        scenes.push(SceneBoxes { preds, gts });
    }
    Ok(evaluate(&scenes, cfg.eval.iou_thresh, cfg.eval.mode))
}

pub fn format_ap_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    if let Some(r) = reports.first() {
        s.push_str(&format!("AP@{} ({})\n", r.iou_thresh, r.mode.as_str()));
    }
    s.push_str(&format!("{:<16} {:>8} {:>7} {:>7}\n", "class", "AP", "gt", "pred"));
    for r in reports {
        s.push_str(&format!("{:<16} {:>8.4} {:>7} {:>7}\n", r.class, r.ap, r.num_gt, r.num_pred));
    }
    match mean_ap(reports) {
        Some(m) => s.push_str(&format!("{:<16} {:>8.4}\n", "mAP", m)),
        None => s.push_str("mAP: no ground truth\n"),
    }
    s
}

/// One row of the noise sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub jitter_sigma_px: f64,
    pub miss_prob: f64,
    /// Mean over ground-truth objects of the best same-class IoU (0 if none).
    pub mean_iou: f64,
    /// Share of output boxes that reached a fixed point.
    pub convergence_rate: f64,
    pub mean_steps: f64,
}

pub const SWEEP_HEADER: &str = "jitter_sigma_px,miss_prob,mean_iou,convergence_rate,mean_steps";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.jitter_sigma_px, self.miss_prob, self.mean_iou, self.convergence_rate, self.mean_steps
        )
    }
}

/// Runs the pseudo-view detector at every (sigma, miss) grid point over the
/// same `n` synthetic scenes. The camera-image detector is left as configured.
pub fn sweep(cfg: &PipelineConfig, n: usize, seed: u64, sigmas: &[f64], misses: &[f64]) -> Result<Vec<SweepRow>> {
    let DetectorSpec::Oracle { noise: base } = cfg.detector_pv else {
        bail!("sweep varies oracle noise; detector_pv must be an oracle");
    };
    let rgb = DetectorHandle::build(&cfg.detector_rgb, &cfg.scratch_dir)?;
    let frames: Vec<SceneFrame> = (0..n)
        .into_par_iter()
        .map(|k| {
            let spec = SceneSpec {
                seed: seed.wrapping_add(k as u64),
                ..cfg.synth.clone()
            };
            generate_scene(&spec).with_context(|| format!("sweep scene {k} (seed {})", spec.seed))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &miss_prob in misses {
        for &jitter_sigma_px in sigmas {
            let noise = DetectorNoise {
                jitter_sigma_px,
                miss_prob,
                ..base
            };
            noise.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
            let det = Detectors {
                rgb: rgb.clone(),
                pv: DetectorHandle::Oracle(noise),
            };
            let per_scene: Vec<(Vec<f64>, Vec<OrientedBox3D>)> = frames
                .par_iter()
                .map(|f| {
                    let boxes = detect_frame(cfg, &det, &f.frame_data(), Some(&f.gt_boxes))?;
                    let ious = f
                        .gt_boxes
                        .iter()
                        .map(|g| {
                            boxes
                                .iter()
                                .filter(|b| b.class_label == g.class_label)
                                .map(|b| iou3d(b, g))
                                .fold(0.0, f64::max)
                        })
                        .collect();
                    Ok((ious, boxes))
                })
                .collect::<Result<_>>()?;
            let ious: Vec<f64> = per_scene.iter().flat_map(|(i, _)| i.iter().copied()).collect();
            let boxes: Vec<&OrientedBox3D> = per_scene.iter().flat_map(|(_, b)| b.iter()).collect();
            let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
            rows.push(SweepRow {
                jitter_sigma_px,
                miss_prob,
                mean_iou: mean(&mut ious.iter().copied(), ious.len()),
                convergence_rate: mean(&mut boxes.iter().map(|b| b.converged as u8 as f64), boxes.len()),
                mean_steps: mean(&mut boxes.iter().map(|b| b.steps as f64), boxes.len()),
            });
            log::info!("{}", rows.last().expect("just pushed").csv());
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    fs::write(path, s).with_context(|| format!("{}", path.display()))
}
