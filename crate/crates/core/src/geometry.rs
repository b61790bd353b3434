//! Foundational geometric types shared by every stage of the pipeline.
//!
//! Positions are meters in the sensor frame unless a type says otherwise.
//! Boxes are stored as a rigid pose plus full side lengths; the homogeneous
//! 4×8 corner matrix is derived on demand and is what transform chains act on.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Homogeneous corner matrix: one box corner per column, fourth row all ones.
pub type CornerMatrix = SMatrix<f64, 4, 8>;

/// Orthonormality / determinant tolerance for rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Smallest side length a box may have.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud arrays differ in length: {positions} positions, {colors} colors, {ids:?} instance ids")]
    LengthMismatch {
        positions: usize,
        colors: usize,
        ids: Option<usize>,
    },
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (error {0:.3e})")]
    NotARotation(f64),
    #[error("axes are not a right-handed orthonormal triad (error {0:.3e})")]
    BadTriad(f64),
    #[error("box extent must be positive, got {0:?}")]
    BadExtent([f64; 3]),
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("rectangle ({0}, {1}, {2}, {3}) is empty or not finite")]
    BadRect(f64, f64, f64, f64),
}

/// Colored point set; `instance_ids` only exists for synthetic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
    instance_ids: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Vec3>,
        colors: Vec<[u8; 3]>,
        instance_ids: Option<Vec<u32>>,
    ) -> Result<Self, GeometryError> {
        let ids_len = instance_ids.as_ref().map(Vec::len);
        if positions.len() != colors.len() || ids_len.is_some_and(|n| n != positions.len()) {
            return Err(GeometryError::LengthMismatch {
                positions: positions.len(),
                colors: colors.len(),
                ids: ids_len,
            });
        }
        if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self {
            positions,
            colors,
            instance_ids,
        })
    }

    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            colors: Vec::new(),
            instance_ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn instance_ids(&self) -> Option<&[u32]> {
        self.instance_ids.as_deref()
    }

    pub fn without_instances(mut self) -> Self {
        self.instance_ids = None;
        self
    }

    /// Copy of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            instance_ids: self
                .instance_ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i]).collect()),
        }
    }

    /// Reorders points into a canonical order that depends only on the point
    /// multiset (position bits, then color, then instance id). Every later
    /// reduction then sees the same summation order no matter how the
    /// input was shuffled.
    pub fn canonicalized(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let key = |i: usize| {
            let p = self.positions[i];
            (
                total_order_bits(p.x),
                total_order_bits(p.y),
                total_order_bits(p.z),
                self.colors[i],
                self.instance_ids.as_ref().map_or(0, |ids| ids[i]),
            )
        };
        order.sort_by_key(|&i| key(i));
        self.select(&order)
    }
}

fn total_order_bits(v: f64) -> i64 {
    let bits = v.to_bits() as i64;
    bits ^ ((((bits >> 63) as u64) >> 1) as i64)
}

/// Ideal pinhole camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = GeometryError;
    fn try_from(r: RawIntrinsics) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(c: CameraIntrinsics) -> Self {
        RawIntrinsics {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::Intrinsics(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::Intrinsics("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::Intrinsics(format!("image size must be positive, got {width}x{height}")));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Continuous image coordinates of `p`, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z > 0.0 {
            Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
        } else {
            None
        }
    }

    /// Pixel containing `p` (pixel `u` covers `[u, u + 1)`), if inside the image.
    pub fn pixel(&self, p: &Vec3) -> Option<(u32, u32)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.floor(), v.floor());
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }
}

fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let err = rotation_error(&rotation);
        if !(err <= ROTATION_TOL) {
            return Err(GeometryError::NotARotation(err));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite(0));
        }
        Ok(Self { rotation, translation })
    }

    /// Skips validation; callers guarantee `rotation` came from valid parts.
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::from_parts(Matrix3::identity(), Vec3::zeros())
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::from_parts(rt, -(rt * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Transform equivalent to applying `inner` first, then `outer`.
pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
    RigidTransform::from_parts(
        outer.rotation * inner.rotation,
        outer.rotation * inner.translation + outer.translation,
    )
}

/// Right-handed orthonormal projection axes, stored as matrix columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxesTriad {
    m: Matrix3<f64>,
}

impl AxesTriad {
    pub fn new(a1: Vec3, a2: Vec3, a3: Vec3) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_columns(&[a1, a2, a3]))
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let mut err = rotation_error(&m);
        let cross = m.column(0).cross(&m.column(1)) - m.column(2);
        err = err.max(cross.abs().max());
        if !(err <= ROTATION_TOL) {
            return Err(GeometryError::BadTriad(err));
        }
        Ok(Self { m })
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    /// Sensor axes.
    pub fn camera() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn a1(&self) -> Vec3 {
        self.m.column(0).into_owned()
    }
    pub fn a2(&self) -> Vec3 {
        self.m.column(1).into_owned()
    }
    pub fn a3(&self) -> Vec3 {
        self.m.column(2).into_owned()
    }

    pub fn axis(&self, k: usize) -> Vec3 {
        self.m.column(k).into_owned()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// The same triad expressed in the frame reached through `t`'s rotation.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        Self { m: r * self.m }
    }

    /// Largest angle (degrees) between corresponding axes, ignoring sign.
    pub fn max_angle_deg(&self, other: &AxesTriad) -> f64 {
        (0..3)
            .map(|k| {
                let c = self.axis(k).dot(&other.axis(k)).abs().min(1.0);
                c.acos().to_degrees()
            })
            .fold(0.0, f64::max)
    }
}

/// Binary sign order of box corners: bit 2 → x, bit 1 → y, bit 0 → z.
pub const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, 1.0, 1.0],
];

/// Oriented box: `pose` maps box coordinates to the sensor (or parent) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedBox3D {
    pub pose: RigidTransform,
    extent: Vec3,
    pub class_label: String,
    pub score: f64,
    pub converged: bool,
    pub steps: u32,
}

impl OrientedBox3D {
    pub fn new(pose: RigidTransform, extent: Vec3, class_label: impl Into<String>, score: f64) -> Result<Self, GeometryError> {
        if !extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(GeometryError::BadExtent([extent.x, extent.y, extent.z]));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::BadScore(score));
        }
        Ok(Self {
            pose,
            extent,
            class_label: class_label.into(),
            score,
            converged: false,
            steps: 0,
        })
    }

    pub fn extent(&self) -> &Vec3 {
        &self.extent
    }

    pub fn center(&self) -> &Vec3 {
        self.pose.translation()
    }

    pub fn volume(&self) -> f64 {
        self.extent.x * self.extent.y * self.extent.z
    }

    /// Corner `j` in the pose's target frame.
    pub fn corner(&self, j: usize) -> Vec3 {
        let s = CORNER_SIGNS[j];
        let local = Vec3::new(s[0] * self.extent.x, s[1] * self.extent.y, s[2] * self.extent.z) * 0.5;
        self.pose.apply(&local)
    }

    pub fn corner_points(&self) -> [Vec3; 8] {
        std::array::from_fn(|j| self.corner(j))
    }

    /// Homogeneous 4×8 corner matrix.
    pub fn corners(&self) -> CornerMatrix {
        let mut m = CornerMatrix::zeros();
        for j in 0..8 {
            let c = self.corner(j);
            m[(0, j)] = c.x;
            m[(1, j)] = c.y;
            m[(2, j)] = c.z;
            m[(3, j)] = 1.0;
        }
        m
    }

    /// Same box with its pose pre-multiplied by `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            pose: compose(t, &self.pose),
            ..self.clone()
        }
    }

    /// Whether `p` lies inside the box grown by `tol` on every face.
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        let local = self.pose.apply_inverse(p);
        (0..3).all(|k| local[k].abs() <= self.extent[k] * 0.5 + tol)
    }
}

/// Maps a box expressed in the innermost frame of `chain` back to the
/// outermost one. `chain[i]` maps frame `i + 1` coordinates into frame `i`.
pub fn chain_to_origin(box_n: &OrientedBox3D, chain: &[RigidTransform]) -> OrientedBox3D {
    let total = chain
        .iter()
        .fold(RigidTransform::identity(), |acc, t| compose(&acc, t));
    box_n.transformed(&total)
}

/// Half-open pixel rectangle `[u0, u1) × [v0, v1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl Rect {
    pub fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Result<Self, GeometryError> {
        let finite = [u0, v0, u1, v1].iter().all(|c| c.is_finite());
        if !finite || u0 >= u1 || v0 >= v1 {
            return Err(GeometryError::BadRect(u0, v0, u1, v1));
        }
        Ok(Self { u0, v0, u1, v1 })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.u0, self.v0, self.u1, self.v1]
    }

    /// Integer pixel bounds after snapping outward to the grid.
    pub fn pixel_bounds(&self) -> (i64, i64, i64, i64) {
        (
            self.u0.floor() as i64,
            self.v0.floor() as i64,
            self.u1.ceil() as i64,
            self.v1.ceil() as i64,
        )
    }

    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        let (u0, v0, u1, v1) = self.pixel_bounds();
        let (u, v) = (u as i64, v as i64);
        u >= u0 && u < u1 && v >= v0 && v < v1
    }

    /// Clamps to `[0, width) × [0, height)`; `None` if nothing is left.
    pub fn clamped(&self, width: u32, height: u32) -> Option<Rect> {
        let r = Rect {
            u0: self.u0.clamp(0.0, width as f64),
            v0: self.v0.clamp(0.0, height as f64),
            u1: self.u1.clamp(0.0, width as f64),
            v1: self.v1.clamp(0.0, height as f64),
        };
        (r.u0 < r.u1 && r.v0 < r.v1).then_some(r)
    }

    pub fn area(&self) -> f64 {
        (self.u1 - self.u0) * (self.v1 - self.v0)
    }
}

/// A 2D detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub class_label: String,
    pub score: f64,
    pub rect: Rect,
}

impl Detection2D {
    pub fn new(class_label: impl Into<String>, score: f64, rect: Rect) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::BadScore(score));
        }
        Ok(Self {
            class_label: class_label.into(),
            score,
            rect,
        })
    }
}
