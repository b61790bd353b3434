//! On-disk formats: box JSON, binary PLY clouds, PNG rasters, frame
//! manifests and synthetic scene directories.
//!
//! Relative paths inside a manifest resolve against the manifest's own
//! directory, so a scene directory can be moved as a unit.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::InstancePixelMap;
use crate::geometry::{CameraIntrinsics, GeometryError, OrientedBox3D, PointCloud, RigidTransform, Vec3};
use crate::recursion::FrameData;
use crate::synthscene::SceneFrame;

/// Stored corners may drift from the pose by at most this much.
pub const CORNER_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {msg}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Ply { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid box: {0}")]
    Schema(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> IoError {
    IoError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

/// Reads and parses a JSON file, reporting the path and position on failure.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Pretty JSON plus a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| json_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Wire form of an [`OrientedBox3D`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxJson {
    pub class: String,
    pub score: f64,
    pub center: [f64; 3],
    /// Row-major.
    pub rotation: [f64; 9],
    pub extent: [f64; 3],
    pub corners: Vec<[f64; 3]>,
    pub converged: bool,
    pub steps: u32,
}

impl From<&OrientedBox3D> for BoxJson {
    fn from(b: &OrientedBox3D) -> Self {
        let r = b.pose.rotation();
        let c = b.center();
        let e = b.extent();
        BoxJson {
            class: b.class_label.clone(),
            score: b.score,
            center: [c.x, c.y, c.z],
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            extent: [e.x, e.y, e.z],
            corners: b.corner_points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            converged: b.converged,
            steps: b.steps,
        }
    }
}

impl TryFrom<&BoxJson> for OrientedBox3D {
    type Error = IoError;

    fn try_from(j: &BoxJson) -> Result<Self, IoError> {
        if j.corners.len() != 8 {
            return Err(IoError::Schema(format!("expected 8 corners, got {}", j.corners.len())));
        }
        let rotation = Matrix3::from_row_slice(&j.rotation);
        let pose = RigidTransform::new(rotation, Vec3::from(j.center))?;
        let mut b = OrientedBox3D::new(pose, Vec3::from(j.extent), j.class.clone(), j.score)?;
        b.converged = j.converged;
        b.steps = j.steps;
        for (k, (want, got)) in b.corner_points().iter().zip(&j.corners).enumerate() {
            let err = (want - Vec3::from(*got)).amax();
            if !(err <= CORNER_TOL) {
                return Err(IoError::Schema(format!("corner {k} is {err:.3e} m away from the pose")));
            }
        }
        Ok(b)
    }
}

pub fn boxes_to_json(boxes: &[OrientedBox3D]) -> Vec<BoxJson> {
    boxes.iter().map(BoxJson::from).collect()
}

pub fn boxes_from_json(json: &[BoxJson]) -> Result<Vec<OrientedBox3D>, IoError> {
    json.iter().map(OrientedBox3D::try_from).collect()
}

/// Serialized box list, byte-stable for equal boxes.
pub fn boxes_json_string(boxes: &[OrientedBox3D]) -> String {
    let mut s = serde_json::to_string_pretty(&boxes_to_json(boxes)).expect("box JSON is always serializable");
    s.push('\n');
    s
}

pub fn write_boxes(path: &Path, boxes: &[OrientedBox3D]) -> Result<(), IoError> {
    fs::write(path, boxes_json_string(boxes)).map_err(io_err(path))
}

pub fn read_boxes(path: &Path) -> Result<Vec<OrientedBox3D>, IoError> {
    let json: Vec<BoxJson> = read_json(path)?;
    boxes_from_json(&json).map_err(|e| match e {
        IoError::Schema(m) => IoError::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Binary little-endian PLY: float32 xyz, uchar rgb, and a ushort
/// `instance` when the cloud carries ids.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let ids = cloud.instance_ids();
    if let Some(max) = ids.and_then(|ids| ids.iter().max()) {
        if *max > u16::MAX as u32 {
            return Err(IoError::Ply {
                path: path.to_path_buf(),
                msg: format!("instance id {max} does not fit in a ushort"),
            });
        }
    }
    let mut out = Vec::with_capacity(256 + cloud.len() * 17);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", cloud.len()).as_bytes());
    for p in ["x", "y", "z"] {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    for c in ["red", "green", "blue"] {
        out.extend_from_slice(format!("property uchar {c}\n").as_bytes());
    }
    if ids.is_some() {
        out.extend_from_slice(b"property ushort instance\n");
    }
    out.extend_from_slice(b"end_header\n");
    for (i, (p, c)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(c);
        if let Some(ids) = ids {
            out.extend_from_slice(&(ids[i] as u16).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Reads a binary little-endian PLY with a single `vertex` element. Any
/// scalar property types are accepted; x, y, z are required, colors default
/// to black and `instance` is optional.
pub fn read_ply(path: &Path) -> Result<PointCloud, IoError> {
    let bad = |msg: String| IoError::Ply {
        path: path.to_path_buf(),
        msg,
    };
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let header_line = |r: &mut BufReader<fs::File>, line: &mut String| -> Result<(), IoError> {
        line.clear();
        if r.read_line(line).map_err(io_err(path))? == 0 {
            return Err(bad("header ended before end_header".into()));
        }
        Ok(())
    };
    header_line(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("not a PLY file".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        header_line(&mut r, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if count.is_some() {
                    return Err(bad(format!("unsupported extra element {name}")));
                }
                if *name != "vertex" {
                    return Err(bad(format!("unsupported element {name}")));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["property", "list", ..] => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => return Err(bad(format!("unexpected header line {:?}", line.trim_end()))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|(p, _)| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(bad("vertex element lacks x, y or z".into()));
    };
    let rgb = [find("red"), find("green"), find("blue")];
    let inst = find("instance");
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s)| {
            let o = *acc;
            *acc += s.size();
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() < n * stride {
        return Err(bad(format!("expected {} bytes of vertex data, found {}", n * stride, body.len())));
    }
    let get = |rec: &[u8], k: usize| props[k].1.read(&rec[offsets[k]..]);
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut ids = inst.map(|_| Vec::with_capacity(n));
    for rec in body.chunks_exact(stride).take(n) {
        positions.push(Vec3::new(get(rec, ix), get(rec, iy), get(rec, iz)));
        colors.push(rgb.map(|k| k.map_or(0, |k| get(rec, k).clamp(0.0, 255.0) as u8)));
        if let (Some(ids), Some(k)) = (ids.as_mut(), inst) {
            ids.push(get(rec, k) as u32);
        }
    }
    PointCloud::new(positions, colors, ids).map_err(|e| bad(e.to_string()))
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), IoError> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("PNG encoding into memory does not fail");
    buf.into_inner()
}

pub fn read_png(path: &Path) -> Result<RgbImage, IoError> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Instance map as a 16-bit grayscale PNG.
pub fn write_instances(path: &Path, map: &InstancePixelMap) -> Result<(), IoError> {
    let bad = |msg: String| IoError::Image {
        path: path.to_path_buf(),
        msg,
    };
    let data = map
        .ids
        .iter()
        .map(|&id| u16::try_from(id).map_err(|_| bad(format!("instance id {id} does not fit in 16 bits"))))
        .collect::<Result<Vec<u16>, _>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width, map.height, data).ok_or_else(|| bad("instance map size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| bad(e.to_string()))
}

pub fn read_instances(path: &Path) -> Result<InstancePixelMap, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_luma16();
    Ok(InstancePixelMap {
        width: img.width(),
        height: img.height(),
        ids: img.into_raw().into_iter().map(u32::from).collect(),
    })
}

/// The minimal description of one RGB-D frame on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image: PathBuf,
    pub cloud: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Synthetic only: 16-bit instance map aligned with `image`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    /// Synthetic only: ground-truth boxes; instance `k` is entry `k - 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<PathBuf>,
}

/// A frame loaded through its manifest.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub frame: FrameData,
    pub gt_boxes: Option<Vec<OrientedBox3D>>,
    pub manifest: Manifest,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a frame; relative paths resolve against `base`.
pub fn load_manifest(manifest: &Manifest, base: &Path) -> Result<LoadedFrame, IoError> {
    let image = read_png(&resolve(base, &manifest.image))?;
    let cloud = read_ply(&resolve(base, &manifest.cloud))?;
    let (w, h) = (manifest.intrinsics.width(), manifest.intrinsics.height());
    if image.dimensions() != (w, h) {
        return Err(IoError::Image {
            path: resolve(base, &manifest.image),
            msg: format!("image is {}x{}, intrinsics say {w}x{h}", image.width(), image.height()),
        });
    }
    let image_instances = match &manifest.instances {
        Some(p) => {
            let path = resolve(base, p);
            let map = read_instances(&path)?;
            if (map.width, map.height) != (w, h) {
                return Err(IoError::Image {
                    path,
                    msg: "instance map size differs from the image".into(),
                });
            }
            Some(map)
        }
        None => None,
    };
    let gt_boxes = match &manifest.gt_boxes {
        Some(p) => Some(read_boxes(&resolve(base, p))?),
        None => None,
    };
    Ok(LoadedFrame {
        frame: FrameData {
            image,
            cloud,
            intrinsics: manifest.intrinsics,
            image_instances,
        },
        gt_boxes,
        manifest: manifest.clone(),
    })
}

pub fn load_frame(manifest_path: &Path) -> Result<LoadedFrame, IoError> {
    let manifest: Manifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_manifest(&manifest, base)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `scene_dir/{image.png, cloud.ply, instances.png, gt_boxes.json,
/// manifest.json}` and returns the manifest path.
pub fn write_scene(scene_dir: &Path, frame: &SceneFrame) -> Result<PathBuf, IoError> {
    fs::create_dir_all(scene_dir).map_err(io_err(scene_dir))?;
    write_png(&scene_dir.join("image.png"), &frame.image)?;
    write_ply(&scene_dir.join("cloud.ply"), &frame.cloud)?;
    write_instances(&scene_dir.join("instances.png"), &frame.image_instances)?;
    write_boxes(&scene_dir.join("gt_boxes.json"), &frame.gt_boxes)?;
    let manifest = Manifest {
        image: "image.png".into(),
        cloud: "cloud.ply".into(),
        intrinsics: frame.intrinsics,
        instances: Some("instances.png".into()),
        gt_boxes: Some("gt_boxes.json".into()),
    };
    let path = scene_dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// An annotated record: `{image.png, cloud.ply, boxes.json}` in `dir`.
pub fn write_record(dir: &Path, image: &RgbImage, cloud: &PointCloud, boxes: &[OrientedBox3D]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_png(&dir.join("image.png"), image)?;
    write_ply(&dir.join("cloud.ply"), cloud)?;
    write_boxes(&dir.join("boxes.json"), boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{generate_scene, SceneSpec};
    use proptest::prelude::*;

    fn sample_box() -> OrientedBox3D {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.9);
        let pose = RigidTransform::new(*r.matrix(), Vec3::new(0.5, -1.25, 3.0)).unwrap();
        let mut b = OrientedBox3D::new(pose, Vec3::new(0.4, 0.9, 1.3), "sofa", 0.875).unwrap();
        b.converged = true;
        b.steps = 3;
        b
    }

    #[test]
    fn box_json_shape() {
        let v = serde_json::to_value(BoxJson::from(&sample_box())).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, ["center", "class", "converged", "corners", "extent", "rotation", "score", "steps"]);
        assert_eq!(obj["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(obj["corners"].as_array().unwrap().len(), 8);
        assert_eq!(obj["steps"], 3);
    }

    #[test]
    fn rotation_is_row_major() {
        let b = sample_box();
        let j = BoxJson::from(&b);
        let r = b.pose.rotation();
        assert_eq!(j.rotation[1], r[(0, 1)]);
        assert_eq!(j.rotation[3], r[(1, 0)]);
    }

    #[test]
    fn inconsistent_corners_rejected() {
        let mut j = BoxJson::from(&sample_box());
        j.corners[4][1] += 1e-3;
        assert!(matches!(OrientedBox3D::try_from(&j), Err(IoError::Schema(_))));
        j.corners.pop();
        assert!(matches!(OrientedBox3D::try_from(&j), Err(IoError::Schema(_))));
    }

    #[test]
    fn missing_field_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        fs::write(&p, "[\n  {\"class\": \"a\"}\n]\n").unwrap();
        match read_boxes(&p) {
            Err(IoError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ply_header_literal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        let cloud = PointCloud::new(vec![Vec3::new(1.0, -2.0, 0.5)], vec![[1, 2, 3]], Some(vec![7])).unwrap();
        write_ply(&p, &cloud).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                      property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                      property ushort instance\nend_header\n";
        assert!(bytes.starts_with(header.as_bytes()));
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 17);
        assert_eq!(&body[..4], &1.0f32.to_le_bytes());
        assert_eq!(&body[12..15], &[1, 2, 3]);
        assert_eq!(&body[15..], &7u16.to_le_bytes());
    }

    #[test]
    fn ply_reads_foreign_layout() {
        // double positions, extra property, no colors
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 2\n\
property double x\nproperty double y\nproperty double z\nproperty float intensity\nend_header\n"
            .to_vec();
        for (i, v) in [[0.1, 0.2, 0.3], [4.0, 5.0, 6.0]].iter().enumerate() {
            for c in v {
                bytes.extend_from_slice(&f64::to_le_bytes(*c));
            }
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let c = read_ply(&p).unwrap();
        assert_eq!(c.positions()[0], Vec3::new(0.1, 0.2, 0.3));
        assert_eq!(c.colors()[1], [0, 0, 0]);
        assert!(c.instance_ids().is_none());
    }

    #[test]
    fn ply_rejects_ascii_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(matches!(read_ply(&p), Err(IoError::Ply { .. })));
        fs::write(&p, "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\nabc").unwrap();
        assert!(matches!(read_ply(&p), Err(IoError::Ply { .. })));
    }

    #[test]
    fn scene_round_trip_is_exact() {
        let frame = generate_scene(&SceneSpec {
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_scene(&dir.path().join("scene_0"), &frame).unwrap();
        let loaded = load_frame(&manifest).unwrap();
        assert_eq!(loaded.frame.cloud, frame.cloud);
        assert_eq!(loaded.frame.image, frame.image);
        assert_eq!(loaded.frame.image_instances.as_ref(), Some(&frame.image_instances));
        assert_eq!(loaded.gt_boxes.as_deref(), Some(&frame.gt_boxes[..]));
        assert_eq!(loaded.frame.intrinsics, frame.intrinsics);
    }

    #[test]
    fn manifest_size_mismatch_rejected() {
        let frame = generate_scene(&SceneSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(dir.path(), &frame).unwrap();
        let mut m: Manifest = read_json(&path).unwrap();
        m.intrinsics = CameraIntrinsics::new(500.0, 500.0, 10.0, 10.0, 20, 20).unwrap();
        assert!(matches!(load_manifest(&m, dir.path()), Err(IoError::Image { .. })));
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox3D> {
        (
            prop::array::uniform3(-10.0f64..10.0),
            prop::array::uniform3(-3.2f64..3.2),
            prop::array::uniform3(0.01f64..5.0),
            0.0f64..=1.0,
            any::<bool>(),
            0u32..20,
        )
            .prop_map(|(c, a, e, s, conv, steps)| {
                let r = nalgebra::Rotation3::from_euler_angles(a[0], a[1], a[2]);
                let pose = RigidTransform::new(*r.matrix(), Vec3::from(c)).unwrap();
                let mut b = OrientedBox3D::new(pose, Vec3::from(e), "thing", s).unwrap();
                b.converged = conv;
                b.steps = steps;
                b
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn box_json_round_trip_is_byte_identical(boxes in prop::collection::vec(arb_box(), 0..5)) {
            let text = boxes_json_string(&boxes);
            let parsed: Vec<BoxJson> = serde_json::from_str(&text).unwrap();
            let back = boxes_from_json(&parsed).unwrap();
            prop_assert_eq!(&back, &boxes);
            prop_assert_eq!(boxes_json_string(&back), text);
        }

        #[test]
        fn ply_round_trip(pts in prop::collection::vec((prop::array::uniform3(-100.0f32..100.0), prop::array::uniform3(any::<u8>()), any::<u16>()), 0..50)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.ply");
            let cloud = PointCloud::new(
                pts.iter().map(|(x, _, _)| Vec3::new(x[0] as f64, x[1] as f64, x[2] as f64)).collect(),
                pts.iter().map(|(_, c, _)| *c).collect(),
                Some(pts.iter().map(|(_, _, i)| *i as u32).collect()),
            ).unwrap();
            write_ply(&p, &cloud).unwrap();
            prop_assert_eq!(read_ply(&p).unwrap(), cloud);
        }
    }
}
