//! The recursive project, detect, prune and cross-view loop.
//!
//! A [`Branch`] follows one object through the recursion. Each step renders
//! the retained points from the current frame, takes one front and one side
//! detection, prunes to the points inside both, and fuses the two rectangles
//! into a box. The next frame is fitted to the survivors and linked to the
//! previous one by a rigid transform, so the final box can be chained back to
//! the sensor frame.
//!
//! Frames are stored in sensor coordinates; `chain[k]` maps frame `k + 1`
//! coordinates into frame `k` coordinates, frame 0 being the sensor frame.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::axes::{estimate_axes, AxesConfig, AxesError};
use crate::boxops::nms3d;
use crate::crossview::{cross_view, pair_boxes, BoxPair, CrossViewError};
use crate::detect::{DetectError, Detector, DetectorInput, InstancePixelMap};
use crate::geometry::{
    chain_to_origin, compose, AxesTriad, CameraIntrinsics, Detection2D, OrientedBox3D, PointCloud, Rect,
    RigidTransform, Vec3,
};
use crate::views::{coarse_box, extract_frustum, prune_by_boxes, render_pseudo_view, PseudoView, RenderConfig, StepFrame, ViewError, ViewKind};

#[derive(Debug, Error)]
pub enum RecursionError {
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    CrossView(#[from] CrossViewError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Axes(#[from] AxesError),
    #[error("invalid recursion config: {0}")]
    BadConfig(String),
    #[error("branch already finished")]
    Finished,
}

/// What to do when a pseudo-view detection comes back empty after step 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    /// Keep the last box, flagged not converged.
    ReturnLast,
    /// Discard the branch.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecursionConfig {
    pub axes_cfg: AxesConfig,
    pub max_steps: usize,
    pub eps_axes_deg: f64,
    pub eps_box_m: f64,
    pub emit_coarse_box: bool,
    pub on_detector_miss: MissPolicy,
    pub render: RenderConfig,
    pub pair_min_quality: f64,
}

impl Default for RecursionConfig {
    fn default() -> Self {
        Self {
            axes_cfg: AxesConfig::default(),
            max_steps: 8,
            eps_axes_deg: 3.0,
            eps_box_m: 0.02,
            emit_coarse_box: false,
            on_detector_miss: MissPolicy::ReturnLast,
            render: RenderConfig::default(),
            pair_min_quality: 0.25,
        }
    }
}

impl RecursionConfig {
    pub fn validate(&self) -> Result<(), RecursionError> {
        if self.max_steps < 1 {
            return Err(RecursionError::BadConfig("max_steps must be at least 1".into()));
        }
        if !(self.eps_axes_deg > 0.0 && self.eps_box_m > 0.0) {
            return Err(RecursionError::BadConfig("eps_axes_deg and eps_box_m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pair_min_quality) {
            return Err(RecursionError::BadConfig("pair_min_quality must be in [0, 1]".into()));
        }
        self.axes_cfg.validate()?;
        Ok(())
    }
}

/// Why a branch stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AxesStable,
    BoxStable,
    StepCap,
    DetectorMiss,
}

impl StopReason {
    /// A fixed point was reached, as opposed to giving up.
    pub fn is_convergence(self) -> bool {
        matches!(self, StopReason::AxesStable | StopReason::BoxStable)
    }
}

/// One step of a branch, serializable for the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Frame axes as columns `[a1, a2, a3]`, sensor coordinates.
    pub axes: [[f64; 3]; 3],
    pub origin: [f64; 3],
    pub points_in: usize,
    pub points_kept: usize,
    pub front_rect: [f64; 4],
    pub side_rect: [f64; 4],
    pub center: [f64; 3],
    pub extent: [f64; 3],
    /// Row-major box rotation, sensor coordinates.
    pub rotation: [f64; 9],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionState {
    pub step: usize,
    /// Points entering this step.
    pub indices: Vec<usize>,
    pub frame: StepFrame,
    pub chain: Vec<RigidTransform>,
    /// Box of this step in frame coordinates, once the step is applied.
    pub local_box: Option<OrientedBox3D>,
    pub trace: Vec<StepRecord>,
}

impl RecursionState {
    fn initial(indices: Vec<usize>) -> Self {
        Self {
            step: 0,
            indices,
            frame: StepFrame::new(AxesTriad::camera(), Vec3::zeros()),
            chain: Vec::new(),
            local_box: None,
            trace: Vec::new(),
        }
    }

    /// The step box chained back to the sensor frame.
    pub fn sensor_box(&self) -> Option<OrientedBox3D> {
        self.local_box.as_ref().map(|b| chain_to_origin(b, &self.chain))
    }
}

/// Largest distance from a corner of one box to the nearest corner of the other.
pub fn corner_hausdorff(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let (ca, cb) = (a.corner_points(), b.corner_points());
    let one_way = |x: &[Vec3; 8], y: &[Vec3; 8]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(&ca, &cb).max(one_way(&cb, &ca))
}

/// Stop test between consecutive applied states of one branch.
pub fn stop_reason(prev: &RecursionState, cur: &RecursionState, cfg: &RecursionConfig) -> Option<StopReason> {
    if prev.frame.axes.max_angle_deg(&cur.frame.axes) < cfg.eps_axes_deg {
        return Some(StopReason::AxesStable);
    }
    if let (Some(a), Some(b)) = (prev.sensor_box(), cur.sensor_box()) {
        if corner_hausdorff(&a, &b) < cfg.eps_box_m {
            return Some(StopReason::BoxStable);
        }
    }
    (cur.step >= cfg.max_steps).then_some(StopReason::StepCap)
}

/// True iff the axes settled, the box settled, or the step cap was hit.
pub fn converged(prev: &RecursionState, cur: &RecursionState, cfg: &RecursionConfig) -> bool {
    stop_reason(prev, cur, cfg).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    AwaitingLabels,
    Converged,
    Failed,
}

/// One object's recursion, advanced one step at a time.
#[derive(Debug, Clone)]
pub struct Branch {
    pub class_label: String,
    pub score: f64,
    pub state: RecursionState,
    prev: Option<RecursionState>,
    stop: Option<StopReason>,
    last_box: Option<OrientedBox3D>,
}

impl Branch {
    /// A branch at step 0 over `indices`, labelled by its seed detection.
    pub fn new(seed: &Detection2D, indices: Vec<usize>) -> Self {
        Self {
            class_label: seed.class_label.clone(),
            score: seed.score,
            state: RecursionState::initial(indices),
            prev: None,
            stop: None,
            last_box: None,
        }
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn is_finished(&self) -> bool {
        self.stop.is_some()
    }

    /// Finished by the stop rule (fixed point or step cap) is `Converged`;
    /// the box's own `converged` flag is stricter and excludes the cap.
    pub fn status(&self) -> BranchStatus {
        match self.stop {
            None => BranchStatus::AwaitingLabels,
            Some(StopReason::DetectorMiss) => BranchStatus::Failed,
            Some(_) => BranchStatus::Converged,
        }
    }

    /// Latest box in the sensor frame, carrying the seed's class and score.
    pub fn current_box(&self) -> Option<&OrientedBox3D> {
        self.last_box.as_ref()
    }

    /// Front and side pseudo-views for the pending step.
    pub fn views(&self, cloud: &PointCloud, render: &RenderConfig) -> Result<(PseudoView, PseudoView), RecursionError> {
        let s = &self.state;
        let front = render_pseudo_view(cloud, &s.indices, &s.frame, ViewKind::Front, render)?;
        let side = render_pseudo_view(cloud, &s.indices, &s.frame, ViewKind::Side, render)?;
        Ok((front, side))
    }

    /// Applies one front/side detection pair to the pending step.
    ///
    /// Errors leave the branch unchanged so a caller may retry with other rects.
    pub fn apply(
        &mut self,
        cloud: &PointCloud,
        front: &PseudoView,
        side: &PseudoView,
        det_front: &Detection2D,
        det_side: &Detection2D,
        cfg: &RecursionConfig,
    ) -> Result<Option<StopReason>, RecursionError> {
        if self.stop.is_some() {
            return Err(RecursionError::Finished);
        }
        // fuse first: contradictory rects are reported as such, not as an empty prune
        let pair = BoxPair {
            front: det_front.clone(),
            side: det_side.clone(),
            pair_quality: 1.0,
        };
        let fused = cross_view(&pair, front, side)?;
        let kept = prune_by_boxes(&self.state.indices, front, side, det_front, det_side)?;
        let to_frame = self.state.frame.as_transform().inverse();
        let local = fused.transformed(&to_frame);

        let mut cur = self.state.clone();
        cur.local_box = Some(local);
        let sensor = cur.sensor_box().expect("box just set");
        cur.trace.push(step_record(&cur, kept.len(), det_front, det_side, &sensor));

        let reason = match &self.prev {
            Some(prev) => stop_reason(prev, &cur, cfg),
            None => None,
        };
        self.last_box = Some(self.labelled(sensor, cur.step, reason.is_some_and(StopReason::is_convergence)));
        match reason {
            Some(r) => {
                self.state = cur;
                self.stop = Some(r);
            }
            None => self.advance(cloud, cur, kept, cfg),
        }
        Ok(reason)
    }

    /// Ends the branch after a detector miss. Returns the box to report, if any.
    pub fn miss(&mut self, policy: MissPolicy) -> Option<OrientedBox3D> {
        self.stop = Some(StopReason::DetectorMiss);
        if let Some(b) = self.last_box.as_mut() {
            b.converged = false;
        }
        match policy {
            MissPolicy::ReturnLast => self.last_box.clone(),
            MissPolicy::Drop => {
                self.last_box = None;
                None
            }
        }
    }

    fn labelled(&self, mut b: OrientedBox3D, steps: usize, converged: bool) -> OrientedBox3D {
        b.class_label = self.class_label.clone();
        b.score = self.score;
        b.converged = converged;
        b.steps = steps as u32;
        b
    }

    fn advance(&mut self, cloud: &PointCloud, applied: RecursionState, kept: Vec<usize>, cfg: &RecursionConfig) {
        let positions: Vec<Vec3> = kept.iter().map(|&i| cloud.positions()[i]).collect();
        let prev_axes = applied.frame.axes;
        let axes = estimate_axes(&positions, &cfg.axes_cfg, Some(&prev_axes), &Vec3::zeros()).unwrap_or_else(|e| {
            log::debug!("keeping previous axes at step {}: {e}", applied.step + 1);
            prev_axes
        });
        let centroid = positions.iter().sum::<Vec3>() / positions.len() as f64;
        let frame = StepFrame::new(axes, centroid);
        let link = compose(&applied.frame.as_transform().inverse(), &frame.as_transform());

        let mut next = applied.clone();
        next.step += 1;
        next.indices = kept;
        next.frame = frame;
        next.chain.push(link);
        next.local_box = None;
        self.prev = Some(applied);
        self.state = next;
    }
}

fn step_record(s: &RecursionState, kept: usize, f: &Detection2D, sd: &Detection2D, b: &OrientedBox3D) -> StepRecord {
    let m = s.frame.axes.matrix();
    let r = b.pose.rotation();
    StepRecord {
        step: s.step,
        axes: std::array::from_fn(|k| [m[(0, k)], m[(1, k)], m[(2, k)]]),
        origin: s.frame.origin.into(),
        points_in: s.indices.len(),
        points_kept: kept,
        front_rect: f.rect.as_array(),
        side_rect: sd.rect.as_array(),
        center: (*b.center()).into(),
        extent: (*b.extent()).into(),
        rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
    }
}

fn detect_view(detector: &dyn Detector, view: &PseudoView, class: &str) -> Result<Vec<Detection2D>, DetectError> {
    let input = DetectorInput {
        image: &view.image,
        instances: view.instances.as_ref(),
    };
    detector.detect(&input, Some(class))
}

/// Highest-scoring detection; ties go to the earlier one.
fn best(dets: &[Detection2D]) -> Option<&Detection2D> {
    dets.iter().reduce(|a, b| if b.score > a.score { b } else { a })
}

/// A finished branch: its sensor-frame box and step trace.
#[derive(Debug, Clone)]
pub struct BranchResult {
    pub bbox: OrientedBox3D,
    pub trace: Vec<StepRecord>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Default)]
pub struct FrustumOutput {
    pub branches: Vec<BranchResult>,
    /// Camera-axes box over the whole frustum, when requested.
    pub coarse: Option<OrientedBox3D>,
}

impl FrustumOutput {
    pub fn boxes(&self) -> Vec<OrientedBox3D> {
        self.branches.iter().map(|b| b.bbox.clone()).collect()
    }
}

/// Runs the recursion on one frustum, branching on multiple objects at step 0.
pub fn run_frustum(
    cloud: &PointCloud,
    frustum: &[usize],
    seed: &Detection2D,
    detector: &dyn Detector,
    cfg: &RecursionConfig,
) -> Result<FrustumOutput, RecursionError> {
    cfg.validate()?;
    if frustum.is_empty() {
        return Err(ViewError::EmptyFrustum.into());
    }
    let root = Branch::new(seed, frustum.to_vec());
    let coarse = cfg.emit_coarse_box.then(|| {
        let pts: Vec<Vec3> = frustum.iter().map(|&i| cloud.positions()[i]).collect();
        let mut b = coarse_box(&pts, &root.state.frame);
        b.class_label = seed.class_label.clone();
        b.score = seed.score;
        b
    });
    let (front, side) = root.views(cloud, &cfg.render)?;
    let class = seed.class_label.as_str();
    let (front_dets, side_dets) = match (detect_view(detector, &front, class), detect_view(detector, &side, class)) {
        (Ok(f), Ok(s)) => (f, s),
        (Err(e), _) | (_, Err(e)) => {
            log::warn!("seeding detection failed, treating as miss: {e}");
            return Ok(FrustumOutput { branches: vec![], coarse });
        }
    };
    let pairs = pair_boxes(&front_dets, &side_dets, &front, &side, cfg.pair_min_quality);

    let mut branches = Vec::new();
    for pair in pairs {
        let mut branch = root.clone();
        match branch.apply(cloud, &front, &side, &pair.front, &pair.side, cfg) {
            Ok(_) => {}
            Err(e) => {
                log::debug!("step-0 pair rejected: {e}");
                continue;
            }
        }
        if let Some(r) = drive(&mut branch, cloud, detector, cfg) {
            branches.push(r);
        }
    }
    Ok(FrustumOutput { branches, coarse })
}

/// Runs a branch's remaining steps with `detector`, keeping the top detection per view.
pub fn drive(branch: &mut Branch, cloud: &PointCloud, detector: &dyn Detector, cfg: &RecursionConfig) -> Option<BranchResult> {
    while !branch.is_finished() {
        let step = branch.state.step;
        let outcome = (|| -> Result<bool, RecursionError> {
            let (front, side) = branch.views(cloud, &cfg.render)?;
            let fd = detect_view(detector, &front, &branch.class_label)?;
            let sd = detect_view(detector, &side, &branch.class_label)?;
            let (Some(f), Some(s)) = (best(&fd), best(&sd)) else {
                return Ok(false);
            };
            branch.apply(cloud, &front, &side, f, s, cfg)?;
            Ok(true)
        })();
        match outcome {
            Ok(true) => {}
            Ok(false) => {
                branch.miss(cfg.on_detector_miss);
            }
            Err(e) => {
                log::debug!("branch stopped at step {step}: {e}");
                branch.miss(cfg.on_detector_miss);
            }
        }
    }
    let bbox = branch.current_box()?.clone();
    Some(BranchResult {
        bbox,
        trace: branch.state.trace.clone(),
        stop: branch.stop_reason().expect("finished"),
    })
}

/// One RGB-D frame.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub image: RgbImage,
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    /// Per-pixel instance ids of `image`, for oracle seeding.
    pub image_instances: Option<InstancePixelMap>,
}

#[derive(Debug, Clone, Default)]
pub struct SceneDetections {
    /// Refined boxes after NMS, by descending score.
    pub boxes: Vec<OrientedBox3D>,
    /// Step-0 camera-axes boxes, one per seed, when requested. Never suppressed.
    pub coarse: Vec<OrientedBox3D>,
}

/// Seeds frustums from the image detector and refines each independently.
pub fn detect_scene(
    frame: &FrameData,
    rgb_detector: &dyn Detector,
    pv_detector: &dyn Detector,
    cfg: &RecursionConfig,
    nms_tau: f64,
    parallelism: usize,
) -> Result<SceneDetections, RecursionError> {
    cfg.validate()?;
    let input = DetectorInput {
        image: &frame.image,
        instances: frame.image_instances.as_ref(),
    };
    let seeds = match rgb_detector.detect(&input, None) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("image detector failed, no seeds: {e}");
            Vec::new()
        }
    };
    if seeds.is_empty() {
        return Ok(SceneDetections::default());
    }
    // a canonical point order makes the result independent of input order
    let cloud = frame.cloud.canonicalized();
    let run = |seed: &Detection2D| -> Option<FrustumOutput> {
        let indices = match extract_frustum(&cloud, &frame.intrinsics, seed) {
            Ok(ix) => ix,
            Err(e) => {
                log::debug!("seed {:?} skipped: {e}", seed.rect);
                return None;
            }
        };
        match run_frustum(&cloud, &indices, seed, pv_detector, cfg) {
            Ok(out) => Some(out),
            Err(e) => {
                log::warn!("frustum for seed {:?} failed: {e}", seed.rect);
                None
            }
        }
    };
    let outputs: Vec<Option<FrustumOutput>> = if parallelism <= 1 {
        seeds.iter().map(run).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| RecursionError::BadConfig(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(run).collect())
    };
    let mut all = Vec::new();
    let mut coarse = Vec::new();
    for out in outputs.into_iter().flatten() {
        all.extend(out.boxes());
        coarse.extend(out.coarse);
    }
    Ok(SceneDetections {
        boxes: nms3d(&all, nms_tau),
        coarse,
    })
}

/// Clamps a rect to a view, for labels drawn past the raster edge.
pub fn clamp_to_view(rect: &Rect, view: &PseudoView) -> Option<Rect> {
    rect.clamped(view.width(), view.height())
}
