//! Dataset layout, artifact files and the plain-text config format.
//!
//! Dataset directory:
//!
//! ```text
//! root/
//!   images/          grayscale edge maps (.png or .pgm)
//!   cameras.json     per-view intrinsics and 4x4 row-major world-to-camera
//!   init_points.ply  optional initial Gaussian centers
//!   gt_edges.json    optional ground-truth edges
//! ```
//!
//! Every JSON artifact carries a `format` tag and loaders reject other tags.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::ExtractConfig;
use crate::geom::{CameraView, EdgeKind, OrientedPoint, ParametricEdge, RigidTransform};
use crate::image::GrayImage;
use crate::metrics::{MetricReport, METRICS_FORMAT};
use crate::train::{Checkpoint, TrainConfig, TrainReport};
use crate::{Camera, Edge, Image, Real};

pub const CAMERAS_FORMAT: &str = "edgegs-cameras/v1";
pub const EDGES_FORMAT: &str = "edgegs-edges/v1";
pub const POINTS_FORMAT: &str = "edgegs-points/v1";
pub const REPORT_FORMAT: &str = "edgegs-train-report/v1";
/// Largest accepted deviation of `RᵀR` from identity.
pub const ORTHONORMALITY_TOL: f64 = 1e-4;

fn check_format(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Version {
            found: found.into(),
            expected: expected.into(),
        });
    }
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Probe just the `format` field so version errors win over schema errors.
fn probe_format(path: &Path, expected: &str) -> Result<()> {
    #[derive(Deserialize)]
    struct Tag {
        format: String,
    }
    let tag: Tag = read_json(path)?;
    check_format(&tag.format, expected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Image file name inside `images/`.
    pub image: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4x4 world-to-camera matrix.
    pub world_to_camera: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub format: String,
    pub views: Vec<CameraRecord>,
}

impl CameraRecord {
    pub fn from_camera(image: &str, cam: &Camera) -> Self {
        let r = &cam.world_to_cam.rotation;
        let t = &cam.world_to_cam.translation;
        let mut m = Vec::with_capacity(16);
        for i in 0..3 {
            m.extend([r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]]);
        }
        m.extend([0.0, 0.0, 0.0, 1.0]);
        Self {
            image: image.into(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera: m,
        }
    }

    /// Validated camera without its target image.
    pub fn to_camera(&self) -> Result<Camera> {
        let view = |msg: String| Error::Parse(format!("camera for {:?}: {msg}", self.image));
        let m = &self.world_to_camera;
        if m.len() != 16 {
            return Err(view(format!("world_to_camera has {} entries, expected 16", m.len())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(view("world_to_camera has non-finite entries".into()));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(view("world_to_camera bottom row must be 0 0 0 1".into()));
        }
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let pose = RigidTransform {
            rotation,
            translation: Vector3::new(m[3], m[7], m[11]),
        };
        let err = pose.orthonormality_error();
        if !(err <= ORTHONORMALITY_TOL) || rotation.determinant() < 0.0 {
            return Err(view(format!("rotation is not a proper orthonormal matrix (error {err:.3e})")));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(view("principal point is not finite".into()));
        }
        CameraView::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose).map_err(|e| view(e.to_string()))
    }
}

/// Paths of the canonical dataset layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.json")
    }

    pub fn init_points(&self) -> PathBuf {
        self.root.join("init_points.ply")
    }

    pub fn gt_edges(&self) -> PathBuf {
        self.root.join("gt_edges.json")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Image file names, parallel to `views`.
    pub names: Vec<String>,
    pub views: Vec<Camera>,
    pub init_points: Option<Vec<Vector3<Real>>>,
    pub gt_edges: Option<Vec<Edge>>,
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pgm"))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let layout = DatasetLayout::new(root);
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("dataset directory {} does not exist", root.display())));
    }
    let cams_path = layout.cameras();
    probe_format(&cams_path, CAMERAS_FORMAT)?;
    let cams: CamerasFile = read_json(&cams_path)?;

    let mut files: Vec<String> = fs::read_dir(layout.images())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no images in {}", layout.images().display())));
    }
    for rec in &cams.views {
        if !files.contains(&rec.image) {
            return Err(Error::InvalidInput(format!("camera entry {:?} has no image file", rec.image)));
        }
    }

    let mut views = Vec::with_capacity(files.len());
    let mut shape = None;
    for name in &files {
        let rec = cams
            .views
            .iter()
            .find(|r| &r.image == name)
            .ok_or_else(|| Error::InvalidInput(format!("image {name:?} has no camera entry")))?;
        let cam = rec.to_camera()?;
        let img: Image = GrayImage::load(&layout.images().join(name))?;
        if *shape.get_or_insert((img.width, img.height)) != (img.width, img.height) {
            return Err(Error::Dimension(format!(
                "image {name:?} is {}x{} but earlier images are {}x{}",
                img.width,
                img.height,
                shape.unwrap().0,
                shape.unwrap().1
            )));
        }
        views.push(cam.with_target(img).map_err(|e| Error::Dimension(format!("image {name:?}: {e}")))?);
    }

    let init_points = if layout.init_points().exists() {
        Some(read_ply(&layout.init_points())?.into_iter().map(|p| p.position).collect())
    } else {
        None
    };
    let gt_edges = if layout.gt_edges().exists() {
        Some(read_edges(&layout.gt_edges())?)
    } else {
        None
    };
    Ok(Dataset {
        names: files,
        views,
        init_points,
        gt_edges,
    })
}

/// Write cameras, PNG edge maps and optional ground truth in the dataset layout.
pub fn write_dataset(root: &Path, views: &[Camera], gt_edges: Option<&[Edge]>) -> Result<()> {
    let layout = DatasetLayout::new(root);
    fs::create_dir_all(layout.images())?;
    let mut records = Vec::with_capacity(views.len());
    for (i, cam) in views.iter().enumerate() {
        let name = format!("view_{i:03}.png");
        cam.target.save(&layout.images().join(&name))?;
        records.push(CameraRecord::from_camera(&name, cam));
    }
    write_json(
        &layout.cameras(),
        &CamerasFile {
            format: CAMERAS_FORMAT.into(),
            views: records,
        },
    )?;
    if let Some(edges) = gt_edges {
        write_edges(&layout.gt_edges(), edges)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgesFile {
    pub format: String,
    pub edges: Vec<EdgeRecord>,
}

impl From<&Edge> for EdgeRecord {
    fn from(e: &Edge) -> Self {
        Self {
            kind: match e.kind() {
                EdgeKind::Line => "line".into(),
                EdgeKind::Curve => "bezier".into(),
            },
            points: e.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

impl EdgeRecord {
    pub fn to_edge(&self) -> Result<Edge> {
        let kind = match self.kind.as_str() {
            "line" => EdgeKind::Line,
            "bezier" => EdgeKind::Curve,
            other => return Err(Error::Parse(format!("unknown edge type {other:?}"))),
        };
        let pts: Vec<Vector3<Real>> = self.points.iter().map(|p| Vector3::from(*p)).collect();
        ParametricEdge::from_points(kind, &pts)
    }
}

pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    write_json(
        path,
        &EdgesFile {
            format: EDGES_FORMAT.into(),
            edges: edges.iter().map(EdgeRecord::from).collect(),
        },
    )
}

pub fn read_edges(path: &Path) -> Result<Vec<Edge>> {
    probe_format(path, EDGES_FORMAT)?;
    let file: EdgesFile = read_json(path)?;
    file.edges
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_edge().map_err(|e| Error::Parse(format!("{} edge {i}: {e}", path.display()))))
        .collect()
}

/// ASCII PLY with `x y z nx ny nz`; the direction goes in the normal fields.
pub fn write_ply(path: &Path, points: &[OrientedPoint<Real>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment format {POINTS_FORMAT}")?;
    writeln!(w, "element vertex {}", points.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for p in points {
        let (a, d) = (&p.position, &p.direction);
        writeln!(w, "{} {} {} {} {} {}", a.x, a.y, a.z, d.x, d.y, d.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an ASCII PLY vertex list. Missing normals read as zero directions.
/// Files from other tools (no format comment) are accepted.
pub fn read_ply(path: &Path) -> Result<Vec<OrientedPoint<Real>>> {
    let bad = |msg: String| Error::Parse(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let mut next = || -> Result<Option<String>> { Ok(lines.next().transpose()?) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?.ok_or_else(|| bad("truncated header".into()))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported ply encoding {other}"))),
            ["comment", "format", tag] => check_format(tag, POINTS_FORMAT)?,
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertex element lacks x, y or z".into())),
    };
    let normals = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let line = next()?.ok_or_else(|| bad(format!("expected {count} vertices, found {i}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("vertex {i}: bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() < props.len() {
            return Err(bad(format!("vertex {i} has {} values, expected {}", vals.len(), props.len())));
        }
        let direction = normals.map(|(a, b, c)| Vector3::new(vals[a], vals[b], vals[c])).unwrap_or_else(Vector3::zeros);
        out.push(OrientedPoint {
            position: Vector3::new(vals[x], vals[y], vals[z]),
            direction,
        });
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    probe_format(path, crate::train::CHECKPOINT_FORMAT)?;
    let ckpt: Checkpoint = read_json(path)?;
    ckpt.check_format()?;
    if ckpt.adam_m.len() != ckpt.gaussians.len() || ckpt.adam_v.len() != ckpt.gaussians.len() {
        return Err(Error::Parse(format!("{}: optimizer state does not match the cloud", path.display())));
    }
    Ok(ckpt)
}

pub fn write_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    probe_format(path, METRICS_FORMAT)?;
    read_json(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub report: TrainReport,
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    write_json(
        path,
        &ReportFile {
            format: REPORT_FORMAT.into(),
            report: report.clone(),
        },
    )
}

/// Training and extraction settings gathered from a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub extract: ExtractConfig,
}


/// Parse `key = value` lines onto `base`. `#` starts a comment. A `preset`
/// key resets the training section and must come before other training keys.
///
/// Keys: preset, epochs, position_only_epochs, regularizer_start_epoch,
/// regularizer_every, lambda_orient, lambda_shape, k, lr_position,
/// lr_rotation, lr_scale, lr_opacity, position_lr_decay,
/// position_lr_decay_every, position_lr_decay_times, cull_opacity,
/// densify_grad_threshold, densify_every, densify_stop_epoch,
/// edge_threshold, init_count, init_scale, init_opacity, seed, theta, delta,
/// neighbor_radius_factor, min_cluster_size, opacity_filter, bezier_samples.
pub fn parse_config(text: &str, base: Settings) -> Result<Settings> {
    let mut s = base;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse(format!("config line {}: {msg}", no + 1));
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let f = || value.parse::<f64>().map_err(|_| bad(format!("{key}: {value:?} is not a number")));
        let u = || value.parse::<usize>().map_err(|_| bad(format!("{key}: {value:?} is not a count")));
        let t = &mut s.train;
        let x = &mut s.extract;
        match key {
            "preset" => {
                let seed = t.seed;
                *t = TrainConfig::preset(value).map_err(|e| bad(e.to_string()))?;
                t.seed = seed;
            }
            "epochs" => t.epochs = u()?,
            "position_only_epochs" => t.position_only_epochs = u()?,
            "regularizer_start_epoch" => t.regularizer_start_epoch = u()?,
            "regularizer_every" => t.regularizer_every = u()?,
            "lambda_orient" => t.lambda_orient = f()?,
            "lambda_shape" => t.lambda_shape = f()?,
            "k" => t.k = u()?,
            "lr_position" => t.lr.position = f()?,
            "lr_rotation" => t.lr.rotation = f()?,
            "lr_scale" => t.lr.scale = f()?,
            "lr_opacity" => t.lr.opacity = f()?,
            "position_lr_decay" => t.position_lr_decay = f()?,
            "position_lr_decay_every" => t.position_lr_decay_every = u()?,
            "position_lr_decay_times" => t.position_lr_decay_times = u()?,
            "cull_opacity" => t.density.cull_opacity = f()?,
            "densify_grad_threshold" => t.density.grad_threshold = f()?,
            "densify_every" => t.density.every = u()?,
            "densify_stop_epoch" => t.density.stop_epoch = u()?,
            "edge_threshold" => t.edge_threshold = f()?,
            "init_count" => t.init_count = u()?,
            "init_scale" => t.init_scale = f()?,
            "init_opacity" => t.init_opacity = f()?,
            "seed" => t.seed = value.parse().map_err(|_| bad(format!("seed: {value:?} is not an integer")))?,
            "theta" => x.theta = f()?,
            "delta" => x.delta = f()?,
            "neighbor_radius_factor" => x.neighbor_radius_factor = f()?,
            "min_cluster_size" => x.min_cluster_size = u()?,
            "opacity_filter" => x.opacity_filter = f()?,
            "bezier_samples" => x.bezier_samples = u()?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    s.train.validate()?;
    s.extract.validate()?;
    Ok(s)
}

pub fn load_config(path: &Path, base: Settings) -> Result<Settings> {
    parse_config(&fs::read_to_string(path)?, base)
}
