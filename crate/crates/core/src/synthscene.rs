//! Seeded synthetic RGB-D frames with ground-truth boxes.
//!
//! The camera sits at the origin looking down +z with y pointing down; the
//! ground is the plane `y = camera_height`. Objects are cuboids whose faces
//! are sampled uniformly, each face in its own shade. Positions are rounded
//! to `f32` so that a frame survives a PLY round trip bit for bit.

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxops::intersection_volume;
use crate::detect::{ClassTable, InstancePixelMap};
use crate::geometry::{CameraIntrinsics, GeometryError, OrientedBox3D, PointCloud, RigidTransform, Vec3};
use crate::recursion::FrameData;

/// Placement attempts per object before the spec is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Corners must project at least this far inside the image.
const IMAGE_MARGIN_PX: f64 = 2.0;
const BACKGROUND: [u8; 3] = [0, 0, 0];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot place object {index} without overlap after {attempts} attempts")]
    InfeasibleSpec { index: usize, attempts: usize },
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    /// Random yaw about the vertical, resting on the ground.
    Upright,
    /// Uniform random rotation, floating above the ground.
    FullSo3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive range of the object count.
    pub n_objects: [usize; 2],
    pub classes: Vec<ClassSpec>,
    pub orientation_mode: OrientationMode,
    pub partial_view: bool,
    /// Ground clutter, points per m².
    pub clutter_density: f64,
    pub occluder_prob: f64,
    pub intrinsics: CameraIntrinsics,
    pub points_per_m2: f64,
    pub camera_height: f64,
    /// Range of object center depths.
    pub depth_range: [f64; 2],
    /// Largest allowed IoU between the image rectangles of two objects.
    pub max_rect_overlap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: [1, 3],
            classes: default_classes(),
            orientation_mode: OrientationMode::Upright,
            partial_view: true,
            clutter_density: 40.0,
            occluder_prob: 0.0,
            intrinsics: CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("valid default intrinsics"),
            points_per_m2: 2500.0,
            camera_height: 1.0,
            depth_range: [2.5, 5.5],
            max_rect_overlap: 1.0,
        }
    }
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "crate".into(),
            size_min: [0.4, 0.4, 0.4],
            size_max: [0.9, 0.9, 0.9],
            color: [196, 140, 80],
        },
        ClassSpec {
            name: "cabinet".into(),
            size_min: [0.5, 0.8, 0.4],
            size_max: [0.9, 1.3, 0.7],
            color: [70, 110, 200],
        },
        ClassSpec {
            name: "table".into(),
            size_min: [0.8, 0.5, 0.6],
            size_max: [1.4, 0.8, 1.0],
            color: [90, 180, 90],
        },
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::BadSpec(m.to_string()));
        if self.n_objects[0] > self.n_objects[1] {
            return bad("n_objects range is reversed");
        }
        if self.n_objects[1] > 0 && self.classes.is_empty() {
            return bad("objects requested but no classes given");
        }
        for c in &self.classes {
            if c.size_min.iter().zip(&c.size_max).any(|(lo, hi)| !(*lo > 0.0 && lo <= hi)) {
                return bad(&format!("class {} has an invalid size range", c.name));
            }
        }
        if !(self.clutter_density >= 0.0 && self.points_per_m2 > 0.0) {
            return bad("densities must be non-negative and points_per_m2 positive");
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return bad("occluder_prob must be in [0, 1]");
        }
        if !(self.camera_height > 0.0 && self.depth_range[0] > 0.0 && self.depth_range[0] <= self.depth_range[1]) {
            return bad("camera_height and depth_range must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    /// Instance id `k > 0` belongs to `gt_boxes[k - 1]`; 0 is background.
    pub cloud: PointCloud,
    pub image: RgbImage,
    pub image_instances: InstancePixelMap,
    pub gt_boxes: Vec<OrientedBox3D>,
    pub intrinsics: CameraIntrinsics,
}

impl SceneFrame {
    pub fn class_table(&self) -> ClassTable {
        class_table_for(&self.gt_boxes)
    }

    pub fn frame_data(&self) -> FrameData {
        FrameData {
            image: self.image.clone(),
            cloud: self.cloud.clone(),
            intrinsics: self.intrinsics,
            image_instances: Some(self.image_instances.clone()),
        }
    }
}

/// Instance id → class for a ground-truth list.
pub fn class_table_for(gt_boxes: &[OrientedBox3D]) -> ClassTable {
    gt_boxes
        .iter()
        .enumerate()
        .map(|(k, b)| (k as u32 + 1, b.class_label.clone()))
        .collect()
}

/// Raw samples before visibility culling.
struct Samples {
    positions: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
    ids: Vec<u32>,
    /// Occlusion group: one per object and per occluder, ground is its own.
    groups: Vec<u32>,
    /// Outward surface normal, for back-face culling.
    normals: Vec<Vec3>,
    /// Splat radius in pixels when projected.
    radii: Vec<u32>,
}

impl Samples {
    fn new() -> Self {
        Self {
            positions: vec![],
            colors: vec![],
            ids: vec![],
            groups: vec![],
            normals: vec![],
            radii: vec![],
        }
    }

    fn push(&mut self, p: Vec3, c: [u8; 3], id: u32, group: u32, n: Vec3, r: u32) {
        self.positions.push(p);
        self.colors.push(c);
        self.ids.push(id);
        self.groups.push(group);
        self.normals.push(n);
        self.radii.push(r);
    }
}

fn quantize(p: Vec3) -> Vec3 {
    p.map(|c| c as f32 as f64)
}

fn uniform_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    *UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q)).to_rotation_matrix().matrix()
}

fn image_rect(b: &OrientedBox3D, intr: &CameraIntrinsics) -> Option<[f64; 4]> {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corner_points() {
        let (u, v) = intr.project(&c)?;
        r = [r[0].min(u), r[1].min(v), r[2].max(u), r[3].max(v)];
    }
    let inside = r[0] >= IMAGE_MARGIN_PX
        && r[1] >= IMAGE_MARGIN_PX
        && r[2] <= intr.width() as f64 - IMAGE_MARGIN_PX
        && r[3] <= intr.height() as f64 - IMAGE_MARGIN_PX;
    inside.then_some(r)
}

fn rect_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

fn sample_pose(spec: &SceneSpec, rng: &mut ChaCha8Rng, extent: &Vec3) -> RigidTransform {
    let z = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
    let x = rng.random_range(-0.5..=0.5) * z * spec.intrinsics.width() as f64 / spec.intrinsics.fx();
    match spec.orientation_mode {
        OrientationMode::Upright => {
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = *Rotation3::from_axis_angle(&Vec3::y_axis(), yaw).matrix();
            let y = spec.camera_height - 0.5 * extent.y;
            RigidTransform::new(rot, Vec3::new(x, y, z)).expect("rotation from axis-angle")
        }
        OrientationMode::FullSo3 => {
            let rot = uniform_rotation(rng);
            let y = rng.random_range(-0.6..=0.4) * spec.camera_height;
            RigidTransform::new(rot, Vec3::new(x, y, z)).expect("rotation from quaternion")
        }
    }
}

/// Shade of face `f` (0..6) of a base color.
fn face_color(base: [u8; 3], f: usize) -> [u8; 3] {
    let k = 0.45 + 0.11 * f as f64;
    base.map(|c| (c as f64 * k).round().min(255.0) as u8)
}

fn splat_radius(spec: &SceneSpec, depth: f64) -> u32 {
    let spacing = 1.0 / spec.points_per_m2.sqrt();
    (0.75 * spec.intrinsics.fx() * spacing / depth).ceil().max(1.0) as u32
}

fn sample_box_faces(spec: &SceneSpec, rng: &mut ChaCha8Rng, b: &OrientedBox3D, base: [u8; 3], id: u32, group: u32, out: &mut Samples) {
    let e = *b.extent();
    let r = *b.pose.rotation();
    let mut f = 0;
    for axis in 0..3 {
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let area = e[i] * e[j];
        let count = (area * spec.points_per_m2).round() as usize;
        for sign in [-1.0, 1.0] {
            let normal = r.column(axis) * sign;
            let color = face_color(base, f);
            for _ in 0..count {
                let mut local = Vec3::zeros();
                local[axis] = 0.5 * sign * e[axis];
                local[i] = rng.random_range(-0.5..=0.5) * e[i];
                local[j] = rng.random_range(-0.5..=0.5) * e[j];
                let p = quantize(b.pose.apply(&local));
                out.push(p, color, id, group, normal, splat_radius(spec, p.z));
            }
            f += 1;
        }
    }
}

/// Generates one frame from `spec`. Deterministic given `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneFrame, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let intr = spec.intrinsics;
    let n = rng.random_range(spec.n_objects[0]..=spec.n_objects[1]);

    let mut boxes: Vec<OrientedBox3D> = Vec::new();
    let mut rects: Vec<[f64; 4]> = Vec::new();
    let mut class_of: Vec<usize> = Vec::new();
    for index in 0..n {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ci = rng.random_range(0..spec.classes.len());
            let c = &spec.classes[ci];
            let extent = Vec3::from_fn(|k, _| rng.random_range(c.size_min[k]..=c.size_max[k]));
            let pose = sample_pose(spec, &mut rng, &extent);
            let b = OrientedBox3D::new(pose, extent, c.name.clone(), 1.0)?;
            if b.corner_points().iter().any(|p| p.y > spec.camera_height + 1e-9) {
                continue;
            }
            let Some(rect) = image_rect(&b, &intr) else { continue };
            if boxes.iter().any(|o| intersection_volume(o, &b) > 0.0) {
                continue;
            }
            if rects.iter().any(|r| rect_iou(r, &rect) > spec.max_rect_overlap) {
                continue;
            }
            boxes.push(b);
            rects.push(rect);
            class_of.push(ci);
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::InfeasibleSpec {
                index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let mut samples = Samples::new();
    for (k, b) in boxes.iter().enumerate() {
        let id = k as u32 + 1;
        sample_box_faces(spec, &mut rng, b, spec.classes[class_of[k]].color, id, id, &mut samples);
    }

    // ground clutter over the visible floor
    let ground_group = boxes.len() as u32 + 1;
    let (z0, z1) = (1.0, spec.depth_range[1] + 1.5);
    let half_w = 0.5 * z1 * intr.width() as f64 / intr.fx();
    let count = (spec.clutter_density * 2.0 * half_w * (z1 - z0)).round() as usize;
    for _ in 0..count {
        let p = quantize(Vec3::new(
            rng.random_range(-half_w..=half_w),
            spec.camera_height,
            rng.random_range(z0..=z1),
        ));
        let g: u8 = rng.random_range(60..=110);
        samples.push(p, [g, g, g], 0, ground_group, -Vec3::y(), 0);
    }

    // occluding slabs between the camera and some objects
    let mut next_group = ground_group + 1;
    for b in boxes.clone() {
        let occlude = rng.random_range(0.0..1.0) < spec.occluder_prob;
        let w = rng.random_range(0.25..=0.45);
        let h = rng.random_range(0.6..=1.2);
        let side = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        if !occlude {
            continue;
        }
        let c = b.center();
        let depth = (c.z - 0.5 * b.extent().norm() - 0.4).max(1.0);
        let center = Vec3::new(c.x * depth / c.z + side * 0.5 * w, spec.camera_height - 0.5 * h, depth);
        let slab = OrientedBox3D::new(RigidTransform::translation_only(center), Vec3::new(w, h, 0.03), "", 0.0)?;
        if boxes.iter().any(|o| intersection_volume(o, &slab) > 0.0) {
            continue;
        }
        sample_box_faces(spec, &mut rng, &slab, [150, 150, 150], 0, next_group, &mut samples);
        next_group += 1;
    }

    let keep: Vec<bool> = if spec.partial_view {
        visible(&samples, &intr)
    } else {
        vec![true; samples.positions.len()]
    };
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let positions: Vec<Vec3> = idx.iter().map(|&i| samples.positions[i]).collect();
    let colors: Vec<[u8; 3]> = idx.iter().map(|&i| samples.colors[i]).collect();
    let ids: Vec<u32> = idx.iter().map(|&i| samples.ids[i]).collect();
    let radii: Vec<u32> = idx.iter().map(|&i| samples.radii[i]).collect();
    let cloud = PointCloud::new(positions, colors, Some(ids))?;
    let (image, image_instances) = render_camera_view(&cloud, &intr, &radii);
    Ok(SceneFrame {
        cloud,
        image,
        image_instances,
        gt_boxes: boxes,
        intrinsics: intr,
    })
}

fn disc(u: i64, v: i64, r: u32, w: u32, h: u32) -> impl Iterator<Item = usize> {
    let r = r as i64;
    (-r..=r).flat_map(move |dv| {
        (-r..=r).filter_map(move |du| {
            let (x, y) = (u + du, v + dv);
            let ok = du * du + dv * dv <= r * r && x >= 0 && y >= 0 && x < w as i64 && y < h as i64;
            ok.then(|| y as usize * w as usize + x as usize)
        })
    })
}

fn pixel_of(p: &Vec3, intr: &CameraIntrinsics) -> Option<(i64, i64)> {
    let (u, v) = intr.project(p)?;
    Some((u.floor() as i64, v.floor() as i64))
}

/// Back-face culling, occlusion by other surfaces through a z-buffer that
/// keeps the nearest depth of the two nearest distinct groups, then at most
/// one point per pixel.
fn visible(s: &Samples, intr: &CameraIntrinsics) -> Vec<bool> {
    let (w, h) = (intr.width(), intr.height());
    let empty = (f64::INFINITY, u32::MAX);
    let mut zbuf: Vec<[(f64, u32); 2]> = vec![[empty; 2]; w as usize * h as usize];
    let front_facing = |i: usize| s.normals[i].dot(&(-s.positions[i])) > 0.0;
    for i in 0..s.positions.len() {
        if !front_facing(i) {
            continue;
        }
        let Some((u, v)) = pixel_of(&s.positions[i], intr) else { continue };
        let (d, g) = (s.positions[i].z, s.groups[i]);
        for px in disc(u, v, s.radii[i], w, h) {
            let slot = &mut zbuf[px];
            if slot[0].1 == g {
                slot[0].0 = slot[0].0.min(d);
            } else if slot[1].1 == g {
                slot[1].0 = slot[1].0.min(d);
            } else if d < slot[1].0 {
                slot[1] = (d, g);
            }
            if slot[1].0 < slot[0].0 {
                slot.swap(0, 1);
            }
        }
    }
    let unoccluded: Vec<Option<usize>> = (0..s.positions.len())
        .map(|i| {
            if !front_facing(i) {
                return None;
            }
            let (u, v) = pixel_of(&s.positions[i], intr)?;
            if u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
                return None;
            }
            let px = v as usize * w as usize + u as usize;
            let slot = zbuf[px];
            let other = if slot[0].1 == s.groups[i] { slot[1].0 } else { slot[0].0 };
            (other >= s.positions[i].z).then_some(px)
        })
        .collect();
    // one return per pixel, like a depth sensor: faces seen at grazing
    // angles thin out with their projected area
    let mut nearest: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); w as usize * h as usize];
    for (i, px) in unoccluded.iter().enumerate() {
        if let Some(px) = *px {
            if s.positions[i].z < nearest[px].0 {
                nearest[px] = (s.positions[i].z, i);
            }
        }
    }
    unoccluded
        .iter()
        .enumerate()
        .map(|(i, px)| px.is_some_and(|px| nearest[px].1 == i))
        .collect()
}

/// Pinhole z-buffer splat of `cloud`: disc of `radii[i]` pixels per point,
/// nearest `(depth, index)` wins each pixel.
pub fn render_camera_view(cloud: &PointCloud, intr: &CameraIntrinsics, radii: &[u32]) -> (RgbImage, InstancePixelMap) {
    let (w, h) = (intr.width(), intr.height());
    let mut zbuf: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); w as usize * h as usize];
    for (i, p) in cloud.positions().iter().enumerate() {
        let Some((u, v)) = pixel_of(p, intr) else { continue };
        for px in disc(u, v, radii[i], w, h) {
            let slot = &mut zbuf[px];
            if (p.z, i) < *slot {
                *slot = (p.z, i);
            }
        }
    }
    let mut image = RgbImage::from_pixel(w, h, Rgb(BACKGROUND));
    let mut map = InstancePixelMap::new(w, h);
    let ids = cloud.instance_ids();
    for (px, &(_, i)) in zbuf.iter().enumerate() {
        if i == usize::MAX {
            continue;
        }
        let (u, v) = ((px % w as usize) as u32, (px / w as usize) as u32);
        image.put_pixel(u, v, Rgb(cloud.colors()[i]));
        if let Some(ids) = ids {
            map.set(u, v, ids[i]);
        }
    }
    (image, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            intrinsics: CameraIntrinsics::new(70.0, 70.0, 39.5, 29.5, 80, 60).unwrap(),
            points_per_m2: 400.0,
            clutter_density: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_is_clutter_only() {
        let f = generate_scene(&SceneSpec {
            n_objects: [0, 0],
            ..Default::default()
        })
        .unwrap();
        assert!(f.gt_boxes.is_empty());
        assert!(!f.cloud.is_empty());
        assert!(f.cloud.instance_ids().unwrap().iter().all(|&i| i == 0));
    }

    #[test]
    fn same_seed_same_frame() {
        let spec = SceneSpec {
            seed: 11,
            occluder_prob: 0.5,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = generate_scene(&SceneSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(other.cloud, generate_scene(&SceneSpec { seed: 11, ..Default::default() }).unwrap().cloud);
    }

    #[test]
    fn every_object_point_lies_in_its_box() {
        for mode in [OrientationMode::Upright, OrientationMode::FullSo3] {
            for seed in 0..10 {
                let f = generate_scene(&SceneSpec {
                    seed,
                    orientation_mode: mode,
                    partial_view: false,
                    ..Default::default()
                })
                .unwrap();
                let ids = f.cloud.instance_ids().unwrap();
                let max_id = *ids.iter().max().unwrap() as usize;
                assert!(max_id <= f.gt_boxes.len());
                for (p, &id) in f.cloud.positions().iter().zip(ids) {
                    if id > 0 {
                        assert!(f.gt_boxes[id as usize - 1].contains(p, 1e-6));
                    }
                }
            }
        }
    }

    #[test]
    fn unit_cube_all_faces_sampled() {
        let spec = SceneSpec {
            n_objects: [1, 1],
            classes: vec![ClassSpec {
                name: "cube".into(),
                size_min: [1.0; 3],
                size_max: [1.0; 3],
                color: [200, 100, 50],
            }],
            partial_view: false,
            clutter_density: 0.0,
            points_per_m2: 500.0,
            ..Default::default()
        };
        let f = generate_scene(&spec).unwrap();
        let b = &f.gt_boxes[0];
        assert_eq!(f.cloud.len(), 6 * 500);
        let mut per_face = [0usize; 6];
        for p in f.cloud.positions() {
            assert!(b.contains(p, 1e-6));
            let l = b.pose.apply_inverse(p);
            let (axis, val) = (0..3).map(|k| (k, l[k])).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
            per_face[2 * axis + (val > 0.0) as usize] += 1;
        }
        assert!(per_face.iter().all(|&c| c == 500), "{per_face:?}");
    }

    #[test]
    fn partial_view_is_a_strict_subset() {
        for seed in 0..5 {
            let spec = SceneSpec {
                seed,
                occluder_prob: 0.5,
                ..Default::default()
            };
            let full = generate_scene(&SceneSpec {
                partial_view: false,
                ..spec.clone()
            })
            .unwrap();
            let part = generate_scene(&spec).unwrap();
            assert!(part.cloud.len() < full.cloud.len());
            let all: std::collections::HashSet<[u64; 3]> =
                full.cloud.positions().iter().map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]).collect();
            assert!(part.cloud.positions().iter().all(|p| all.contains(&[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])));
        }
    }

    #[test]
    fn partial_view_hides_back_faces() {
        let f = generate_scene(&SceneSpec {
            seed: 3,
            n_objects: [1, 1],
            clutter_density: 0.0,
            ..Default::default()
        })
        .unwrap();
        let b = &f.gt_boxes[0];
        for p in f.cloud.positions() {
            // a visible point sits on a face whose outward normal faces the camera
            let l = b.pose.apply_inverse(p);
            let (axis, val) = (0..3).map(|k| (k, l[k] / b.extent()[k])).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
            let n = b.pose.rotation().column(axis) * val.signum();
            assert!(n.dot(&(-p)) > 0.0);
        }
    }

    #[test]
    fn instance_map_matches_brute_force_zbuffer() {
        for seed in 0..3 {
            let spec = small_spec(seed);
            let f = generate_scene(&spec).unwrap();
            let intr = spec.intrinsics;
            let ids = f.cloud.instance_ids().unwrap();
            let radii: Vec<u32> = f
                .cloud
                .positions()
                .iter()
                .zip(ids)
                .map(|(p, &id)| if id == 0 && (p.y - spec.camera_height).abs() < 1e-6 { 0 } else { splat_radius(&spec, p.z) })
                .collect();
            for v in 0..intr.height() {
                for u in 0..intr.width() {
                    let mut best = (f64::INFINITY, usize::MAX);
                    for (i, p) in f.cloud.positions().iter().enumerate() {
                        let (pu, pv) = intr.project(p).unwrap();
                        let (du, dv) = (u as i64 - pu.floor() as i64, v as i64 - pv.floor() as i64);
                        let r = radii[i] as i64;
                        if du * du + dv * dv <= r * r && (p.z, i) < best {
                            best = (p.z, i);
                        }
                    }
                    let want = if best.1 == usize::MAX { 0 } else { ids[best.1] };
                    assert_eq!(f.image_instances.get(u, v), want, "pixel ({u}, {v})");
                }
            }
        }
    }

    #[test]
    fn crowded_spec_is_infeasible() {
        let spec = SceneSpec {
            n_objects: [40, 40],
            max_rect_overlap: 0.0,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&spec), Err(SceneError::InfeasibleSpec { .. })));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SceneSpec::default();
        spec.classes[0].size_min[1] = 0.0;
        assert!(generate_scene(&spec).is_err());
        let spec = SceneSpec {
            occluder_prob: 2.0,
            ..Default::default()
        };
        assert!(generate_scene(&spec).is_err());
    }
}
