//! Perspective frustums and orthographic pseudo-views.
//!
//! A pseudo-view rasterizes a point subset along one axis of a [`StepFrame`].
//! Pixel `u` is centered on the continuous coordinate `u`, so back-mapping a
//! point's pixel with `(u - offset_u) / scale` lands within half a pixel of
//! the point. Image `v` grows with the frame's second axis in both views,
//! which is what lets front and side detections share a dimension.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::InstancePixelMap;
use crate::geometry::{
    AxesTriad, CameraIntrinsics, Detection2D, OrientedBox3D, PointCloud, RigidTransform, Vec3,
    MIN_EXTENT,
};

/// In-plane extent below which a view is considered collapsed.
pub const MIN_VIEW_EXTENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("no point projects inside the seed rectangle")]
    EmptyFrustum,
    #[error("cannot render an empty point subset")]
    EmptySubset,
    #[error("points collapse in the {kind:?} view ({width:.3e} m x {height:.3e} m)")]
    DegenerateExtent { kind: ViewKind, width: f64, height: f64 },
    #[error("no point survives both detections")]
    EmptyAfterPrune,
    #[error("front and side views were rendered from different point subsets")]
    MismatchedViews,
    #[error("render config needs max_side > 2 * margin + 1")]
    BadConfig,
}

/// Coordinate system of one recursion step, expressed in its parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFrame {
    pub axes: AxesTriad,
    pub origin: Vec3,
}

impl StepFrame {
    pub fn new(axes: AxesTriad, origin: Vec3) -> Self {
        Self { axes, origin }
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.axes.matrix().transpose() * (p - self.origin)
    }

    pub fn to_parent(&self, local: &Vec3) -> Vec3 {
        self.axes.matrix() * local + self.origin
    }

    /// Local → parent rigid transform.
    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform::from_parts(*self.axes.matrix(), self.origin)
    }

    /// The same frame seen from the coordinates `t` maps into.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            axes: self.axes.rotated(t.rotation()),
            origin: t.apply(&self.origin),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Front,
    Side,
}

impl ViewKind {
    /// `(u, v, depth)` for local coordinates.
    pub fn project(self, local: &Vec3) -> (f64, f64, f64) {
        match self {
            ViewKind::Front => (local.x, local.y, local.z),
            ViewKind::Side => (local.z, local.y, local.x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Front => "front",
            ViewKind::Side => "side",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub max_side: u32,
    pub margin: u32,
    pub splat_radius: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            max_side: 640,
            margin: 8,
            splat_radius: 1,
        }
    }
}

/// Orthographic raster of a point subset with its exact pixel mapping.
#[derive(Debug, Clone)]
pub struct PseudoView {
    pub kind: ViewKind,
    pub image: RgbImage,
    pub scale: f64,
    pub offset_u: f64,
    pub offset_v: f64,
    pub frame: StepFrame,
    /// Cloud indices rendered, in the order of `point_pixels`.
    pub indices: Vec<usize>,
    pub point_pixels: Vec<(u32, u32)>,
    /// Winning instance id per pixel, when the cloud carries ground truth.
    pub instances: Option<InstancePixelMap>,
}

impl PseudoView {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Local in-plane coordinate of pixel column `u`.
    pub fn u_to_metric(&self, u: f64) -> f64 {
        (u - self.offset_u) / self.scale
    }

    pub fn v_to_metric(&self, v: f64) -> f64 {
        (v - self.offset_v) / self.scale
    }

    /// Metric interval spanned by the pixel centers of `[p0, p1)` in u.
    pub fn u_interval(&self, p0: i64, p1: i64) -> (f64, f64) {
        (self.u_to_metric(p0 as f64), self.u_to_metric((p1 - 1) as f64))
    }

    pub fn v_interval(&self, p0: i64, p1: i64) -> (f64, f64) {
        (self.v_to_metric(p0 as f64), self.v_to_metric((p1 - 1) as f64))
    }
}

/// Indices of points whose pinhole projection falls inside the seed rectangle.
pub fn extract_frustum(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    seed: &Detection2D,
) -> Result<Vec<usize>, ViewError> {
    let r = seed.rect;
    let inside: Vec<usize> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (u, v) = intr.project(p)?;
            (u >= r.u0 && u < r.u1 && v >= r.v0 && v < r.v1).then_some(i)
        })
        .collect();
    if inside.is_empty() {
        Err(ViewError::EmptyFrustum)
    } else {
        Ok(inside)
    }
}

/// Axis-aligned (in `frame`'s axes) bounding box of `points`, in the parent frame.
///
/// Panics if `points` is empty.
pub fn coarse_box(points: &[Vec3], frame: &StepFrame) -> OrientedBox3D {
    assert!(!points.is_empty(), "coarse_box needs at least one point");
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        let l = frame.to_local(p);
        lo = lo.inf(&l);
        hi = hi.sup(&l);
    }
    let center = (lo + hi) * 0.5;
    let extent = (hi - lo).map(|e| e.max(MIN_EXTENT));
    let pose = RigidTransform::from_parts(*frame.axes.matrix(), frame.to_parent(&center));
    OrientedBox3D::new(pose, extent, "", 0.0).expect("clamped extent is positive")
}

/// Rasterizes `indices` of `cloud` orthographically along one axis of `frame`.
pub fn render_pseudo_view(
    cloud: &PointCloud,
    indices: &[usize],
    frame: &StepFrame,
    kind: ViewKind,
    cfg: &RenderConfig,
) -> Result<PseudoView, ViewError> {
    if indices.is_empty() {
        return Err(ViewError::EmptySubset);
    }
    if cfg.max_side <= 2 * cfg.margin + 1 {
        return Err(ViewError::BadConfig);
    }
    let positions = cloud.positions();
    let projected: Vec<(f64, f64, f64)> = indices
        .iter()
        .map(|&i| kind.project(&frame.to_local(&positions[i])))
        .collect();

    let (mut h_lo, mut h_hi, mut v_lo, mut v_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(h, v, _) in &projected {
        h_lo = h_lo.min(h);
        h_hi = h_hi.max(h);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    let (h_ext, v_ext) = (h_hi - h_lo, v_hi - v_lo);
    if h_ext < MIN_VIEW_EXTENT || v_ext < MIN_VIEW_EXTENT {
        return Err(ViewError::DegenerateExtent {
            kind,
            width: h_ext,
            height: v_ext,
        });
    }

    let margin = cfg.margin as f64;
    let usable = (cfg.max_side - 1 - 2 * cfg.margin) as f64;
    let scale = usable / h_ext.max(v_ext);
    let offset_u = margin - h_lo * scale;
    let offset_v = margin - v_lo * scale;
    let width = ((h_ext * scale).ceil() as u32 + 2 * cfg.margin + 1).min(cfg.max_side);
    let height = ((v_ext * scale).ceil() as u32 + 2 * cfg.margin + 1).min(cfg.max_side);

    let point_pixels: Vec<(u32, u32)> = projected
        .iter()
        .map(|&(h, v, _)| {
            let u = ((h - h_lo) * scale + margin).round() as u32;
            let v = ((v - v_lo) * scale + margin).round() as u32;
            (u.min(width - 1), v.min(height - 1))
        })
        .collect();

    // z-buffer keyed by (depth, cloud index); the smaller key wins.
    let (w, hgt) = (width as usize, height as usize);
    let mut zbuf: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); w * hgt];
    let r = cfg.splat_radius as i64;
    let r2 = r * r;
    for (k, (&(pu, pv), &(_, _, depth))) in point_pixels.iter().zip(&projected).enumerate() {
        let key = (depth, indices[k]);
        for dv in -r..=r {
            let y = pv as i64 + dv;
            if y < 0 || y >= hgt as i64 {
                continue;
            }
            for du in -r..=r {
                let x = pu as i64 + du;
                if du * du + dv * dv > r2 || x < 0 || x >= w as i64 {
                    continue;
                }
                let slot = &mut zbuf[y as usize * w + x as usize];
                if key.0 < slot.0 || (key.0 == slot.0 && key.1 < slot.1) {
                    *slot = key;
                }
            }
        }
    }

    let colors = cloud.colors();
    let mut image = RgbImage::new(width, height);
    for (px, &(_, idx)) in zbuf.iter().enumerate() {
        if idx != usize::MAX {
            image.put_pixel((px % w) as u32, (px / w) as u32, Rgb(colors[idx]));
        }
    }
    let instances = cloud.instance_ids().map(|ids| InstancePixelMap {
        width,
        height,
        ids: zbuf
            .iter()
            .map(|&(_, idx)| if idx == usize::MAX { 0 } else { ids[idx] })
            .collect(),
    });

    Ok(PseudoView {
        kind,
        image,
        scale,
        offset_u,
        offset_v,
        frame: *frame,
        indices: indices.to_vec(),
        point_pixels,
        instances,
    })
}

/// Keeps the points whose front pixel lies in `det_front` and side pixel in `det_side`.
pub fn prune_by_boxes(
    indices: &[usize],
    front: &PseudoView,
    side: &PseudoView,
    det_front: &Detection2D,
    det_side: &Detection2D,
) -> Result<Vec<usize>, ViewError> {
    if front.indices != indices || side.indices != indices {
        return Err(ViewError::MismatchedViews);
    }
    let kept: Vec<usize> = indices
        .iter()
        .zip(front.point_pixels.iter().zip(&side.point_pixels))
        .filter(|(_, (&(fu, fv), &(su, sv)))| {
            det_front.rect.contains_pixel(fu, fv) && det_side.rect.contains_pixel(su, sv)
        })
        .map(|(&i, _)| i)
        .collect();
    if kept.is_empty() {
        Err(ViewError::EmptyAfterPrune)
    } else {
        Ok(kept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use crate::testutil::{random_rotation, rng};
    use rand::Rng;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        let n = points.len();
        let colors = (0..n).map(|i| [(i % 251) as u8, 7, 9]).collect();
        PointCloud::new(points, colors, None).unwrap()
    }

    fn det(u0: f64, v0: f64, u1: f64, v1: f64) -> Detection2D {
        Detection2D::new("obj", 1.0, Rect::new(u0, v0, u1, v1).unwrap()).unwrap()
    }

    fn identity_frame() -> StepFrame {
        StepFrame::new(AxesTriad::camera(), Vec3::zeros())
    }

    #[test]
    fn on_axis_point_is_in_frustum() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let c = cloud(vec![Vec3::new(0.0, 0.0, 2.0)]);
        assert_eq!(extract_frustum(&c, &intr, &det(40.0, 40.0, 60.0, 60.0)).unwrap(), vec![0]);
        assert_eq!(extract_frustum(&c, &intr, &det(0.0, 0.0, 10.0, 10.0)), Err(ViewError::EmptyFrustum));
    }

    #[test]
    fn frustum_matches_reprojection_oracle() {
        let mut rng = rng(21);
        let intr = CameraIntrinsics::new(300.0, 310.0, 160.0, 120.0, 320, 240).unwrap();
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..6.0)))
            .collect();
        let c = cloud(pts.clone());
        let seed = det(50.5, 20.0, 200.25, 180.0);
        let got = extract_frustum(&c, &intr, &seed).unwrap();
        let want: Vec<usize> = (0..pts.len())
            .filter(|&i| {
                let p = pts[i];
                if p.z <= 0.0 {
                    return false;
                }
                let u = 300.0 * p.x / p.z + 160.0;
                let v = 310.0 * p.y / p.z + 120.0;
                (50.5..200.25).contains(&u) && (20.0..180.0).contains(&v)
            })
            .collect();
        assert_eq!(got, want);
        // idempotent on its own output
        let sub = c.select(&got);
        assert_eq!(extract_frustum(&sub, &intr, &seed).unwrap(), (0..got.len()).collect::<Vec<_>>());
    }

    #[test]
    fn coarse_box_single_point_and_cube() {
        let b = coarse_box(&[Vec3::new(1.0, 2.0, 3.0)], &identity_frame());
        assert_eq!(*b.extent(), Vec3::repeat(MIN_EXTENT));
        assert_eq!(*b.center(), Vec3::new(1.0, 2.0, 3.0));
        let corners = OrientedBox3D::new(RigidTransform::identity(), Vec3::repeat(1.0), "c", 1.0)
            .unwrap()
            .corner_points();
        let b = coarse_box(&corners, &identity_frame());
        assert!((b.extent() - Vec3::repeat(1.0)).norm() < 1e-12);
        assert!(b.center().norm() < 1e-12);
    }

    #[test]
    fn coarse_box_contains_points_in_rotated_frame() {
        let mut rng = rng(4);
        for _ in 0..50 {
            let axes = AxesTriad::from_matrix(random_rotation(&mut rng)).unwrap();
            let frame = StepFrame::new(axes, Vec3::new(0.3, -0.2, 1.0));
            let pts: Vec<Vec3> = (0..200)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)))
                .collect();
            let b = coarse_box(&pts, &frame);
            assert!(pts.iter().all(|p| b.contains(p, 1e-9)));
            assert!((b.pose.rotation() - axes.matrix()).abs().max() == 0.0);
        }
    }

    #[test]
    fn v_axis_ordering_and_shared_u() {
        let c = cloud(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.5, 1.0)]);
        let v = render_pseudo_view(&c, &[0, 1, 2], &identity_frame(), ViewKind::Front, &RenderConfig::default()).unwrap();
        let (p0, p1) = (v.point_pixels[0], v.point_pixels[1]);
        assert_eq!(p0.0, p1.0);
        assert!(p0.1 < p1.1);
    }

    #[test]
    fn zbuffer_keeps_nearer_point() {
        let mut c = cloud(vec![
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.5),
        ]);
        c = PointCloud::new(c.positions().to_vec(), vec![[255, 0, 0], [0, 255, 0], [0, 0, 255]], None).unwrap();
        let cfg = RenderConfig {
            splat_radius: 0,
            ..Default::default()
        };
        let v = render_pseudo_view(&c, &[0, 1, 2], &identity_frame(), ViewKind::Front, &cfg).unwrap();
        assert_eq!(v.point_pixels[0], v.point_pixels[1]);
        let (u, vv) = v.point_pixels[0];
        assert_eq!(v.image.get_pixel(u, vv).0, [0, 255, 0]);
    }

    #[test]
    fn equal_depth_tie_goes_to_lowest_index() {
        let c = PointCloud::new(
            vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 1.0, 0.0)],
            vec![[1, 1, 1], [2, 2, 2], [3, 3, 3]],
            None,
        )
        .unwrap();
        let v = render_pseudo_view(&c, &[1, 0, 2], &identity_frame(), ViewKind::Front, &RenderConfig::default()).unwrap();
        let (u, vv) = v.point_pixels[0];
        assert_eq!(v.image.get_pixel(u, vv).0, [1, 1, 1]);
    }

    #[test]
    fn back_mapping_recovers_local_coordinates() {
        let mut rng = rng(8);
        for kind in [ViewKind::Front, ViewKind::Side] {
            let axes = AxesTriad::from_matrix(random_rotation(&mut rng)).unwrap();
            let frame = StepFrame::new(axes, Vec3::new(0.1, 0.2, 2.0));
            let pts: Vec<Vec3> = (0..2000)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..4.0)))
                .collect();
            let c = cloud(pts.clone());
            let idx: Vec<usize> = (0..pts.len()).collect();
            let v = render_pseudo_view(&c, &idx, &frame, kind, &RenderConfig::default()).unwrap();
            assert!(v.width() <= 640 && v.height() <= 640);
            assert!(v.width() == 640 || v.height() == 640);
            let half = 0.5 / v.scale + 1e-12;
            for (k, p) in pts.iter().enumerate() {
                let (h, vv, _) = kind.project(&frame.to_local(p));
                let (pu, pv) = v.point_pixels[k];
                assert!(pu < v.width() && pv < v.height());
                assert!((v.u_to_metric(pu as f64) - h).abs() <= half);
                assert!((v.v_to_metric(pv as f64) - vv).abs() <= half);
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let c = cloud(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0)]);
        let err = render_pseudo_view(&c, &[0, 1], &identity_frame(), ViewKind::Front, &RenderConfig::default());
        assert!(matches!(err, Err(ViewError::DegenerateExtent { .. })));
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = rng(9);
        let pts: Vec<Vec3> = (0..500).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let c = cloud(pts);
        let idx: Vec<usize> = (0..500).collect();
        let a = render_pseudo_view(&c, &idx, &identity_frame(), ViewKind::Side, &RenderConfig::default()).unwrap();
        let b = render_pseudo_view(&c, &idx, &identity_frame(), ViewKind::Side, &RenderConfig::default()).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.point_pixels, b.point_pixels);
    }

    fn two_views(n: usize, seed: u64) -> (PointCloud, Vec<usize>, PseudoView, PseudoView) {
        let mut rng = rng(seed);
        let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let c = cloud(pts);
        let idx: Vec<usize> = (0..n).collect();
        let f = render_pseudo_view(&c, &idx, &identity_frame(), ViewKind::Front, &RenderConfig::default()).unwrap();
        let s = render_pseudo_view(&c, &idx, &identity_frame(), ViewKind::Side, &RenderConfig::default()).unwrap();
        (c, idx, f, s)
    }

    #[test]
    fn prune_full_rects_is_identity() {
        let (_, idx, f, s) = two_views(300, 1);
        let df = det(0.0, 0.0, f.width() as f64, f.height() as f64);
        let ds = det(0.0, 0.0, s.width() as f64, s.height() as f64);
        assert_eq!(prune_by_boxes(&idx, &f, &s, &df, &ds).unwrap(), idx);
    }

    #[test]
    fn prune_left_half_matches_membership_oracle() {
        let (_, idx, f, s) = two_views(300, 2);
        let half = f.width() as f64 / 2.0;
        let df = det(0.0, 0.0, half, f.height() as f64);
        let ds = det(0.0, 0.0, s.width() as f64, s.height() as f64);
        let got = prune_by_boxes(&idx, &f, &s, &df, &ds).unwrap();
        let want: Vec<usize> = idx.iter().copied().filter(|&i| (f.point_pixels[i].0 as f64) < half).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn prune_disjoint_shared_dimension_is_empty() {
        let (_, idx, f, s) = two_views(300, 3);
        let hv = f.height() as f64 / 2.0;
        let df = det(0.0, 0.0, f.width() as f64, hv - 1.0);
        let ds = det(0.0, hv + 1.0, s.width() as f64, s.height() as f64);
        assert_eq!(prune_by_boxes(&idx, &f, &s, &df, &ds), Err(ViewError::EmptyAfterPrune));
    }

    proptest::proptest! {
        #[test]
        fn prune_is_monotone_and_idempotent(seed in 0u64..500, cut in 0.1f64..0.9, cut2 in 0.1f64..0.9) {
            let (_, idx, f, s) = two_views(200, seed);
            let (w, h) = (f.width() as f64, f.height() as f64);
            let ds = det(0.0, 0.0, s.width() as f64, s.height() as f64);
            let big = det(0.0, 0.0, w * cut.max(cut2), h);
            let small = det(0.0, 0.0, w * cut.min(cut2), h);
            let a = prune_by_boxes(&idx, &f, &s, &big, &ds).unwrap_or_default();
            let b = prune_by_boxes(&idx, &f, &s, &small, &ds).unwrap_or_default();
            proptest::prop_assert!(b.iter().all(|i| a.contains(i)));
            // pruning the retained set again with the same rects keeps it
            let again: Vec<usize> = a.iter().copied().filter(|&i| big.rect.contains_pixel(f.point_pixels[i].0, f.point_pixels[i].1)).collect();
            proptest::prop_assert_eq!(again, a);
        }
    }
}
