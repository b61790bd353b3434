//! Oriented-box overlap, suppression and detection metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{OrientedBox3D, Vec3};

/// Default NMS overlap threshold.
pub const NMS_TAU: f64 = 0.25;

const PLANE_EPS: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum BoxOpsError {
    #[error("no ground-truth boxes; average precision is undefined")]
    NoGroundTruth,
}

// Face vertex order of a box, counter-clockwise seen from outside, in the
// corner numbering of `CORNER_SIGNS` (bit 2 = x, bit 1 = y, bit 0 = z).
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2], // -x
    [4, 6, 7, 5], // +x
    [0, 4, 5, 1], // -y
    [2, 3, 7, 6], // +y
    [0, 2, 6, 4], // -z
    [1, 5, 7, 3], // +z
];

type Polygon = Vec<Vec3>;

fn box_polytope(b: &OrientedBox3D) -> Vec<Polygon> {
    let c = b.corner_points();
    BOX_FACES.iter().map(|f| f.iter().map(|&j| c[j]).collect()).collect()
}

/// Outward half-spaces `n·x <= d` of a box.
fn box_halfspaces(b: &OrientedBox3D) -> [(Vec3, f64); 6] {
    let r = b.pose.rotation();
    let c = b.center();
    let e = b.extent();
    std::array::from_fn(|k| {
        let axis = r.column(k / 2).into_owned();
        let n = if k % 2 == 0 { -axis } else { axis };
        (n, n.dot(c) + 0.5 * e[k / 2])
    })
}

fn clip_polygon(poly: &Polygon, n: &Vec3, d: f64) -> Polygon {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let dp = n.dot(&p) - d;
        let dq = n.dot(&q) - d;
        if dp <= PLANE_EPS {
            out.push(p);
        }
        if (dp < -PLANE_EPS && dq > PLANE_EPS) || (dp > PLANE_EPS && dq < -PLANE_EPS) {
            let t = dp / (dp - dq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

/// Clips a closed polytope (outward CCW faces) by `n·x <= d`, capping the cut.
fn clip_polytope(faces: Vec<Polygon>, n: &Vec3, d: f64) -> Vec<Polygon> {
    let mut out: Vec<Polygon> = faces
        .iter()
        .map(|f| clip_polygon(f, n, d))
        .filter(|f| f.len() >= 3)
        .collect();
    let on_plane = |p: &Vec3| (n.dot(p) - d).abs() <= 1e-9;
    if out.iter().any(|f| f.iter().all(on_plane)) {
        // an existing face already lies in the cutting plane
        return out;
    }
    let mut cap: Vec<Vec3> = Vec::new();
    for p in out.iter().flatten().filter(|p| on_plane(p)) {
        if cap.iter().all(|q| (q - p).norm() > 1e-9) {
            cap.push(*p);
        }
    }
    if cap.len() >= 3 {
        let centroid = cap.iter().sum::<Vec3>() / cap.len() as f64;
        let e1 = any_perpendicular(n);
        let e2 = n.cross(&e1);
        let angle = |p: &Vec3| {
            let w = p - centroid;
            w.dot(&e2).atan2(w.dot(&e1))
        };
        cap.sort_by(|a, b| angle(a).total_cmp(&angle(b)));
        out.push(cap);
    }
    out
}

fn any_perpendicular(n: &Vec3) -> Vec3 {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    n.cross(&helper).normalize()
}

/// Volume of a closed polytope from its outward faces (divergence theorem).
fn polytope_volume(faces: &[Polygon]) -> f64 {
    let mut six_v = 0.0;
    for f in faces {
        for i in 1..f.len() - 1 {
            six_v += f[0].dot(&f[i].cross(&f[i + 1]));
        }
    }
    six_v / 6.0
}

/// Volume of the intersection of two oriented boxes.
pub fn intersection_volume(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let reach = 0.5 * (a.extent().norm() + b.extent().norm());
    if (a.center() - b.center()).norm() > reach {
        return 0.0;
    }
    let mut poly = box_polytope(a);
    for (n, d) in box_halfspaces(b) {
        poly = clip_polytope(poly, &n, d);
        if poly.len() < 4 {
            return 0.0;
        }
    }
    polytope_volume(&poly).max(0.0)
}

/// Exact intersection over union of two oriented boxes.
pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn center_key(b: &OrientedBox3D) -> [f64; 3] {
    let c = b.center();
    [c.x, c.y, c.z]
}

/// Descending score, ties broken by center in lexicographic order.
pub fn score_order(a: &OrientedBox3D, b: &OrientedBox3D) -> std::cmp::Ordering {
    let (ca, cb) = (center_key(a), center_key(b));
    b.score
        .total_cmp(&a.score)
        .then(ca[0].total_cmp(&cb[0]))
        .then(ca[1].total_cmp(&cb[1]))
        .then(ca[2].total_cmp(&cb[2]))
}

/// Greedy class-wise non-maximum suppression. Output is in keep order.
pub fn nms3d(boxes: &[OrientedBox3D], tau: f64) -> Vec<OrientedBox3D> {
    let mut order: Vec<&OrientedBox3D> = boxes.iter().collect();
    order.sort_by(|a, b| score_order(a, b));
    let mut kept: Vec<OrientedBox3D> = Vec::new();
    for b in order {
        let clear = kept
            .iter()
            .filter(|k| k.class_label == b.class_label)
            .all(|k| iou3d(k, b) < tau);
        if clear {
            kept.push(b.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    #[serde(rename = "allpoint")]
    AllPoint,
    R40,
}

impl ApMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ApMode::AllPoint => "allpoint",
            ApMode::R40 => "R40",
        }
    }
}

impl std::str::FromStr for ApMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allpoint" => Ok(ApMode::AllPoint),
            "R40" | "r40" => Ok(ApMode::R40),
            other => Err(format!("unknown AP mode {other:?}")),
        }
    }
}

/// Per-prediction outcome of greedy matching, in processing order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the prediction list, by descending score.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub matched_gt: Vec<Option<usize>>,
    /// IoU with the best unmatched ground truth at the time (0 if none left).
    pub ious: Vec<f64>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matched_gt.iter().filter(|m| m.is_some()).count()
    }
}

/// Greedy matching in descending score: a prediction is a true positive iff
/// its best-overlapping unmatched ground truth reaches `iou_thresh`.
pub fn match_predictions(preds: &[OrientedBox3D], gts: &[OrientedBox3D], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| score_order(&preds[i], &preds[j]).then(i.cmp(&j)));
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(preds.len());
    let mut ious = Vec::with_capacity(preds.len());
    for &i in &order {
        let best = (0..gts.len())
            .filter(|&g| !taken[g])
            .map(|g| (g, iou3d(&preds[i], &gts[g])))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((g, iou)) if iou >= iou_thresh => {
                taken[g] = true;
                matched_gt.push(Some(g));
                ious.push(iou);
            }
            Some((_, iou)) => {
                matched_gt.push(None);
                ious.push(iou);
            }
            None => {
                matched_gt.push(None);
                ious.push(0.0);
            }
        }
    }
    MatchResult {
        scores: order.iter().map(|&i| preds[i].score).collect(),
        order,
        matched_gt,
        ious,
        num_gt: gts.len(),
    }
}

/// Precision and recall after each ranked prediction.
pub fn pr_curve(tp: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut hits = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    (precision, recall)
}

/// Average precision of ranked true-positive flags against `num_gt` objects.
pub fn ap_from_ranked(tp: &[bool], num_gt: usize, mode: ApMode) -> Result<f64, BoxOpsError> {
    if num_gt == 0 {
        return Err(BoxOpsError::NoGroundTruth);
    }
    let (mut precision, recall) = pr_curve(tp, num_gt);
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match mode {
        ApMode::AllPoint => {
            let mut prev_r = 0.0;
            let mut area = 0.0;
            for (p, r) in precision.iter().zip(&recall) {
                area += (r - prev_r) * p;
                prev_r = *r;
            }
            area
        }
        ApMode::R40 => {
            let sum: f64 = (1..=40)
                .map(|k| {
                    let level = k as f64 / 40.0;
                    // precision is monotone, so the first index reaching the level is the max
                    recall
                        .iter()
                        .position(|&r| r >= level - 1e-12)
                        .map_or(0.0, |i| precision[i])
                })
                .sum();
            sum / 40.0
        }
    };
    Ok(ap.clamp(0.0, 1.0))
}

/// Single-scene, single-class average precision.
pub fn average_precision(
    preds: &[OrientedBox3D],
    gts: &[OrientedBox3D],
    iou_thresh: f64,
    mode: ApMode,
) -> Result<f64, BoxOpsError> {
    let m = match_predictions(preds, gts, iou_thresh);
    let tp: Vec<bool> = m.matched_gt.iter().map(Option::is_some).collect();
    ap_from_ranked(&tp, gts.len(), mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class: String,
    pub iou_thresh: f64,
    pub mode: ApMode,
    pub ap: f64,
    pub num_gt: usize,
    pub num_pred: usize,
}

/// Predictions and ground truth of one scene.
#[derive(Debug, Clone, Default)]
pub struct SceneBoxes {
    pub preds: Vec<OrientedBox3D>,
    pub gts: Vec<OrientedBox3D>,
}

/// One report per class with ground truth. Matching stays within a scene;
/// ranking pools all scenes.
pub fn evaluate(scenes: &[SceneBoxes], iou_thresh: f64, mode: ApMode) -> Vec<EvalReport> {
    let classes: BTreeSet<&str> = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(|b| b.class_label.as_str()))
        .collect();
    classes
        .into_iter()
        .filter_map(|class| {
            let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
            let mut num_gt = 0;
            for (si, s) in scenes.iter().enumerate() {
                let preds: Vec<OrientedBox3D> = s.preds.iter().filter(|b| b.class_label == class).cloned().collect();
                let gts: Vec<OrientedBox3D> = s.gts.iter().filter(|b| b.class_label == class).cloned().collect();
                num_gt += gts.len();
                let m = match_predictions(&preds, &gts, iou_thresh);
                for (rank, (score, hit)) in m.scores.iter().zip(&m.matched_gt).enumerate() {
                    ranked.push((*score, si, rank, hit.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let tp: Vec<bool> = ranked.iter().map(|r| r.3).collect();
            let ap = ap_from_ranked(&tp, num_gt, mode).ok()?;
            Some(EvalReport {
                class: class.to_string(),
                iou_thresh,
                mode,
                ap,
                num_gt,
                num_pred: ranked.len(),
            })
        })
        .collect()
}

/// Mean of the per-class APs, `None` when no class has ground truth.
pub fn mean_ap(reports: &[EvalReport]) -> Option<f64> {
    (!reports.is_empty()).then(|| reports.iter().map(|r| r.ap).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::testutil::{random_rotation, random_transform, rng};
    use nalgebra::{Matrix3, Rotation3};
    use proptest::prelude::*;
    use rand::Rng;

    fn cube(center: Vec3, rot: Matrix3<f64>, ext: Vec3, score: f64) -> OrientedBox3D {
        OrientedBox3D::new(RigidTransform::new(rot, center).unwrap(), ext, "obj", score).unwrap()
    }

    fn unit(center: Vec3, score: f64) -> OrientedBox3D {
        cube(center, Matrix3::identity(), Vec3::repeat(1.0), score)
    }

    fn monte_carlo_iou(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, seed: u64) -> f64 {
        // sample the axis-aligned hull of both boxes
        let pts: Vec<Vec3> = a.corner_points().into_iter().chain(b.corner_points()).collect();
        let lo = pts.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
        let hi = pts.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
        let mut r = rng(seed);
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..n {
            let p = Vec3::new(r.random_range(lo.x..hi.x), r.random_range(lo.y..hi.y), r.random_range(lo.z..hi.z));
            let (ia, ib) = (a.contains(&p, 0.0), b.contains(&p, 0.0));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
        both as f64 / either as f64
    }

    #[test]
    fn self_iou_is_one() {
        let mut r = rng(1);
        for _ in 0..20 {
            let b = cube(
                Vec3::new(r.random(), r.random(), r.random()),
                random_rotation(&mut r),
                Vec3::new(r.random_range(0.1..2.0), r.random_range(0.1..2.0), r.random_range(0.1..2.0)),
                0.5,
            );
            assert!((iou3d(&b, &b) - 1.0).abs() < 1e-9, "{}", iou3d(&b, &b));
        }
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(iou3d(&unit(Vec3::zeros(), 1.0), &unit(Vec3::new(10.0, 0.0, 0.0), 1.0)), 0.0);
        // touching faces share no volume
        assert!(iou3d(&unit(Vec3::zeros(), 1.0), &unit(Vec3::new(1.0, 0.0, 0.0), 1.0)) < 1e-9);
    }

    #[test]
    fn axis_aligned_overlap_is_exact() {
        let a = unit(Vec3::zeros(), 1.0);
        let b = unit(Vec3::new(0.5, 0.25, 0.0), 1.0);
        let inter = 0.5 * 0.75;
        assert!((iou3d(&a, &b) - inter / (2.0 - inter)).abs() < 1e-12);
    }

    #[test]
    fn rotated_cube_matches_closed_form_and_monte_carlo() {
        let a = unit(Vec3::zeros(), 1.0);
        let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_4).matrix();
        let b = cube(Vec3::zeros(), rot, Vec3::repeat(1.0), 1.0);
        // the intersection is a regular octagon prism of area 2(√2 − 1)
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let exact = inter / (2.0 - inter);
        assert!((iou3d(&a, &b) - exact).abs() < 1e-12);
        let mc = monte_carlo_iou(&a, &b, 1_000_000, 7);
        assert!((iou3d(&a, &b) - mc).abs() < 0.005, "exact {} vs mc {mc}", iou3d(&a, &b));
    }

    #[test]
    fn random_pairs_match_monte_carlo() {
        let mut r = rng(2);
        for _ in 0..6 {
            let a = cube(
                Vec3::zeros(),
                random_rotation(&mut r),
                Vec3::new(r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)),
                1.0,
            );
            let b = cube(
                Vec3::new(r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), r.random_range(-0.4..0.4)),
                random_rotation(&mut r),
                Vec3::new(r.random_range(0.5..1.5), r.random_range(0.5..1.5), r.random_range(0.5..1.5)),
                1.0,
            );
            let mc = monte_carlo_iou(&a, &b, 200_000, r.random());
            assert!((iou3d(&a, &b) - mc).abs() < 0.01, "exact {} vs mc {mc}", iou3d(&a, &b));
        }
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox3D> {
        (any::<u64>(), -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.2f64..2.0, 0.2f64..2.0, 0.2f64..2.0).prop_map(
            |(seed, x, y, z, ex, ey, ez)| {
                let mut r = rng(seed);
                cube(Vec3::new(x, y, z), random_rotation(&mut r), Vec3::new(ex, ey, ez), 0.5)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn iou_symmetric_bounded_and_rigid_invariant(a in arb_box(), b in arb_box(), seed in any::<u64>()) {
            let ab = iou3d(&a, &b);
            let ba = iou3d(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
            let t = random_transform(&mut rng(seed));
            let moved = iou3d(&a.transformed(&t), &b.transformed(&t));
            prop_assert!((ab - moved).abs() < 1e-6);
        }

        #[test]
        fn iou_below_one_for_distinct_boxes(a in arb_box(), dx in 0.05f64..0.5) {
            let mut b = a.clone();
            b = b.transformed(&RigidTransform::translation_only(Vec3::new(dx, 0.0, 0.0)));
            prop_assert!(iou3d(&a, &b) < 1.0 - 1e-6);
        }
    }

    #[test]
    fn nms_singleton_and_duplicate() {
        let a = unit(Vec3::zeros(), 0.9);
        assert_eq!(nms3d(std::slice::from_ref(&a), NMS_TAU), vec![a.clone()]);
        let b = unit(Vec3::zeros(), 0.8);
        let kept = nms3d(&[b, a.clone()], NMS_TAU);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_is_class_wise() {
        let a = unit(Vec3::zeros(), 0.9);
        let mut b = unit(Vec3::zeros(), 0.8);
        b.class_label = "other".into();
        assert_eq!(nms3d(&[a, b], NMS_TAU).len(), 2);
    }

    fn reference_nms(boxes: &[OrientedBox3D], tau: f64) -> Vec<OrientedBox3D> {
        // plain quadratic greedy: repeatedly take the best remaining box and
        // drop everything of its class that overlaps it too much
        let mut left: Vec<OrientedBox3D> = boxes.to_vec();
        let mut out = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for i in 1..left.len() {
                if score_order(&left[i], &left[best]) == std::cmp::Ordering::Less {
                    best = i;
                }
            }
            let b = left.remove(best);
            left.retain(|o| o.class_label != b.class_label || iou3d(o, &b) < tau);
            out.push(b);
        }
        out
    }

    #[test]
    fn nms_matches_reference_on_chains() {
        let mut r = rng(5);
        for _ in 0..50 {
            let n = r.random_range(1..=10);
            let boxes: Vec<OrientedBox3D> = (0..n)
                .map(|k| {
                    // a chain along x whose neighbor overlaps straddle tau
                    unit(Vec3::new(k as f64 * r.random_range(0.45..0.75), 0.0, 0.0), (r.random_range(0..5) as f64) / 5.0)
                })
                .collect();
            let got = nms3d(&boxes, NMS_TAU);
            assert_eq!(got, reference_nms(&boxes, NMS_TAU));
            for i in 0..got.len() {
                for j in i + 1..got.len() {
                    assert!(iou3d(&got[i], &got[j]) < NMS_TAU);
                }
            }
            let top = boxes.iter().min_by(|a, b| score_order(a, b)).unwrap();
            assert_eq!(&got[0], top);
        }
    }

    #[test]
    fn perfect_and_empty_ap() {
        let gts: Vec<_> = (0..3).map(|k| unit(Vec3::new(3.0 * k as f64, 0.0, 0.0), 1.0)).collect();
        for mode in [ApMode::AllPoint, ApMode::R40] {
            assert_eq!(average_precision(&gts, &gts, 0.5, mode).unwrap(), 1.0);
            assert_eq!(average_precision(&[], &gts, 0.5, mode).unwrap(), 0.0);
            assert_eq!(average_precision(&gts, &[], 0.5, mode), Err(BoxOpsError::NoGroundTruth));
        }
    }

    #[test]
    fn hand_built_staircase() {
        // ranks: TP, FP, TP, TP against three objects
        let gts: Vec<_> = (0..3).map(|k| unit(Vec3::new(3.0 * k as f64, 0.0, 0.0), 1.0)).collect();
        let preds = vec![
            unit(Vec3::new(0.0, 0.0, 0.0), 0.9),
            unit(Vec3::new(20.0, 0.0, 0.0), 0.8),
            unit(Vec3::new(3.0, 0.0, 0.0), 0.7),
            unit(Vec3::new(6.1, 0.0, 0.0), 0.6),
        ];
        let m = match_predictions(&preds, &gts, 0.5);
        assert_eq!(m.matched_gt, vec![Some(0), None, Some(1), Some(2)]);
        // precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1; monotone envelope 1, 3/4, 3/4, 3/4
        let all = average_precision(&preds, &gts, 0.5, ApMode::AllPoint).unwrap();
        assert!((all - 5.0 / 6.0).abs() < 1e-12, "{all}");
        let r40 = average_precision(&preds, &gts, 0.5, ApMode::R40).unwrap();
        assert!((r40 - (13.0 + 27.0 * 0.75) / 40.0).abs() < 1e-12, "{r40}");
    }

    #[test]
    fn each_gt_matched_once() {
        let gts = vec![unit(Vec3::zeros(), 1.0)];
        let preds = vec![unit(Vec3::zeros(), 0.9), unit(Vec3::new(0.05, 0.0, 0.0), 0.8)];
        let m = match_predictions(&preds, &gts, 0.5);
        assert_eq!(m.true_positives(), 1);
        let all = average_precision(&preds, &gts, 0.5, ApMode::AllPoint).unwrap();
        assert_eq!(all, 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn ap_monotone_when_a_hit_is_lost(flags in proptest::collection::vec(any::<bool>(), 1..20), extra in 0usize..5, pick in any::<usize>()) {
            let num_gt = flags.iter().filter(|&&f| f).count() + extra;
            prop_assume!(num_gt > 0);
            for mode in [ApMode::AllPoint, ApMode::R40] {
                let ap = ap_from_ranked(&flags, num_gt, mode).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
                let hits: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
                if !hits.is_empty() {
                    let mut worse = flags.clone();
                    worse[hits[pick % hits.len()]] = false;
                    prop_assert!(ap_from_ranked(&worse, num_gt, mode).unwrap() <= ap + 1e-12);
                }
            }
        }
    }

    #[test]
    fn evaluate_pools_scenes_and_skips_classes_without_gt() {
        let a = SceneBoxes {
            preds: vec![unit(Vec3::zeros(), 0.9)],
            gts: vec![unit(Vec3::zeros(), 1.0)],
        };
        let mut stray = unit(Vec3::new(5.0, 0.0, 0.0), 0.5);
        stray.class_label = "ghost".into();
        let b = SceneBoxes {
            // overlaps scene a's object but must not match across scenes
            preds: vec![unit(Vec3::zeros(), 0.95), stray],
            gts: vec![],
        };
        let reports = evaluate(&[a, b], 0.5, ApMode::AllPoint);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].class, "obj");
        assert_eq!(reports[0].num_gt, 1);
        assert_eq!(reports[0].num_pred, 2);
        assert!((reports[0].ap - 0.5).abs() < 1e-12);
        let json = serde_json::to_value(&reports[0]).unwrap();
        assert_eq!(json["mode"], "allpoint");
        assert_eq!(serde_json::to_value(ApMode::R40).unwrap(), "R40");
    }
}
