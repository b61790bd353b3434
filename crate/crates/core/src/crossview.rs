//! Box synthesis from one front-view and one side-view rectangle.
//!
//! Front gives the first and second local axes, side gives the third and
//! second. The second (image v) axis is seen by both and is intersected.

use thiserror::Error;

use crate::geometry::{Detection2D, OrientedBox3D, RigidTransform, Vec3, MIN_EXTENT};
use crate::views::PseudoView;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrossViewError {
    #[error("front and side boxes disagree on height: [{front_lo:.3}, {front_hi:.3}] vs [{side_lo:.3}, {side_hi:.3}] m")]
    InconsistentViews {
        front_lo: f64,
        front_hi: f64,
        side_lo: f64,
        side_hi: f64,
    },
    #[error("front and side views use different frames")]
    FrameMismatch,
}

/// A front and a side detection believed to show the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPair {
    pub front: Detection2D,
    pub side: Detection2D,
    pub pair_quality: f64,
}

fn u_span(view: &PseudoView, det: &Detection2D) -> (f64, f64) {
    let (u0, _, u1, _) = det.rect.pixel_bounds();
    view.u_interval(u0, u1)
}

fn v_span(view: &PseudoView, det: &Detection2D) -> (f64, f64) {
    let (_, v0, _, v1) = det.rect.pixel_bounds();
    view.v_interval(v0, v1)
}

fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        // two zero-length spans: overlapping only if they coincide
        return if a.0 == b.0 { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Box spanned by the two rectangles, expressed in the views' parent frame.
/// The result carries the pair's class and a zero score.
pub fn cross_view(pair: &BoxPair, front: &PseudoView, side: &PseudoView) -> Result<OrientedBox3D, CrossViewError> {
    if front.frame != side.frame {
        return Err(CrossViewError::FrameMismatch);
    }
    let ix = u_span(front, &pair.front);
    let iy_f = v_span(front, &pair.front);
    let iz = u_span(side, &pair.side);
    let iy_s = v_span(side, &pair.side);
    let iy = (iy_f.0.max(iy_s.0), iy_f.1.min(iy_s.1));
    if iy.0 > iy.1 {
        return Err(CrossViewError::InconsistentViews {
            front_lo: iy_f.0,
            front_hi: iy_f.1,
            side_lo: iy_s.0,
            side_hi: iy_s.1,
        });
    }
    let lo = Vec3::new(ix.0, iy.0, iz.0);
    let hi = Vec3::new(ix.1, iy.1, iz.1);
    let center = front.frame.to_parent(&((lo + hi) * 0.5));
    let extent = (hi - lo).map(|e| e.max(MIN_EXTENT));
    let pose = RigidTransform::from_parts(*front.frame.axes.matrix(), center);
    Ok(OrientedBox3D::new(pose, extent, pair.front.class_label.clone(), 0.0).expect("extent clamped positive"))
}

/// Greedy association of front and side detections by the overlap of their
/// shared-dimension intervals, in meters.
pub fn pair_boxes(
    front_dets: &[Detection2D],
    side_dets: &[Detection2D],
    front: &PseudoView,
    side: &PseudoView,
    min_quality: f64,
) -> Vec<BoxPair> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, f) in front_dets.iter().enumerate() {
        let fv = v_span(front, f);
        for (j, s) in side_dets.iter().enumerate() {
            if f.class_label != s.class_label {
                continue;
            }
            let q = interval_iou(fv, v_span(side, s));
            if q >= min_quality && q > 0.0 {
                candidates.push((q, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_f = vec![false; front_dets.len()];
    let mut used_s = vec![false; side_dets.len()];
    let mut pairs = Vec::new();
    for (q, i, j) in candidates {
        if used_f[i] || used_s[j] {
            continue;
        }
        used_f[i] = true;
        used_s[j] = true;
        pairs.push(BoxPair {
            front: front_dets[i].clone(),
            side: side_dets[j].clone(),
            pair_quality: q,
        });
    }
    pairs
}
