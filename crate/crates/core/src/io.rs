//! CSV ingestion with odometry/measurement synchronization, JSON map export and
//! SVG rendering.
//!
//! Odometry rows (`state_id,v_l,v_r`) describe the motion from `state_id` to the
//! next state. Subsampling by `k` sums each run of `k` consecutive rows into one
//! interval, and every measurement (`state_id,tag_id,dx,dy`) is attached to the
//! surviving state with the greatest id not exceeding its own.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{Landmark2, Pose2};
use crate::merge::{GlobalMap, Trajectory};
use crate::models::{LandmarkMeasurement, ModelError, RobotParams, WheelOdometry};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid map document: {message}")]
    Json { path: PathBuf, message: String },
    #[error("odometry state ids must be strictly increasing (row {row}: {prev} then {next})")]
    Unordered { row: usize, prev: usize, next: usize },
    #[error("measurement of tag {tag} at state {state} is outside the odometry span {first}..={last}")]
    Sync {
        tag: u32,
        state: usize,
        first: usize,
        last: usize,
    },
    #[error("no odometry rows")]
    Empty,
    #[error("nothing to render")]
    NothingToRender,
    #[error(transparent)]
    Params(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One robot's synchronized odometry and landmark measurements. After
/// synchronization `odometry[k].state_id == k` and pose count is `odometry.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub robot_id: u32,
    pub odometry: Vec<WheelOdometry>,
    pub measurements: Vec<LandmarkMeasurement>,
    pub params: RobotParams,
}

impl Dataset {
    pub fn pose_count(&self) -> usize {
        self.odometry.len() + 1
    }

    pub fn tags(&self) -> BTreeSet<u32> {
        self.measurements.iter().map(|m| m.tag_id).collect()
    }

    /// Applies `params.odom_subsample` and renumbers states densely from 0.
    pub fn synchronized(&self) -> Result<Dataset, IoError> {
        self.params.validate()?;
        let (odometry, measurements) =
            synchronize(&self.odometry, &self.measurements, self.params.odom_subsample)?;
        Ok(Dataset {
            robot_id: self.robot_id,
            odometry,
            measurements,
            params: self.params,
        })
    }
}

/// Groups raw odometry rows into runs of `subsample`, summing displacements, and
/// re-attaches measurements to the surviving states.
pub fn synchronize(
    odometry: &[WheelOdometry],
    measurements: &[LandmarkMeasurement],
    subsample: usize,
) -> Result<(Vec<WheelOdometry>, Vec<LandmarkMeasurement>), IoError> {
    if subsample == 0 {
        return Err(ModelError::Subsample.into());
    }
    if odometry.is_empty() {
        return Err(IoError::Empty);
    }
    for (row, w) in odometry.windows(2).enumerate() {
        if w[1].state_id <= w[0].state_id {
            return Err(IoError::Unordered {
                row: row + 1,
                prev: w[0].state_id,
                next: w[1].state_id,
            });
        }
    }
    let mut survivors = Vec::with_capacity(odometry.len() / subsample + 2);
    let mut intervals = Vec::with_capacity(odometry.len() / subsample + 1);
    for (k, chunk) in odometry.chunks(subsample).enumerate() {
        survivors.push(chunk[0].state_id);
        intervals.push(WheelOdometry {
            state_id: k,
            v_l: chunk.iter().map(|o| o.v_l).sum(),
            v_r: chunk.iter().map(|o| o.v_r).sum(),
        });
    }
    let last_state = odometry[odometry.len() - 1].state_id + 1;
    survivors.push(last_state);

    let first = survivors[0];
    let mut synced = Vec::with_capacity(measurements.len());
    for m in measurements {
        if m.state_id < first || m.state_id > last_state {
            return Err(IoError::Sync {
                tag: m.tag_id,
                state: m.state_id,
                first,
                last: last_state,
            });
        }
        let dense = survivors.partition_point(|&s| s <= m.state_id) - 1;
        synced.push(LandmarkMeasurement {
            state_id: dense,
            ..*m
        });
    }
    Ok((intervals, synced))
}

#[derive(Deserialize)]
struct OdometryRow {
    state_id: usize,
    v_l: f64,
    v_r: f64,
}

#[derive(Deserialize)]
struct MeasurementRow {
    state_id: usize,
    tag_id: u32,
    dx: f64,
    dy: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: u64, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: T = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_odometry_csv(path: &Path) -> Result<Vec<WheelOdometry>, IoError> {
    let rows: Vec<OdometryRow> = read_rows(path)?;
    for (i, r) in rows.iter().enumerate() {
        if !(r.v_l.is_finite() && r.v_r.is_finite()) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: "non-finite wheel displacement".into(),
            });
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| WheelOdometry {
            state_id: r.state_id,
            v_l: r.v_l,
            v_r: r.v_r,
        })
        .collect())
}

pub fn read_measurements_csv(path: &Path) -> Result<Vec<LandmarkMeasurement>, IoError> {
    let rows: Vec<MeasurementRow> = read_rows(path)?;
    for (i, r) in rows.iter().enumerate() {
        if !(r.dx.is_finite() && r.dy.is_finite()) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: "non-finite landmark offset".into(),
            });
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| LandmarkMeasurement {
            state_id: r.state_id,
            tag_id: r.tag_id,
            dx: r.dx,
            dy: r.dy,
        })
        .collect())
}

/// Reads both CSV files and synchronizes them with `params.odom_subsample`.
pub fn load_dataset(
    odometry_file: &Path,
    measurements_file: &Path,
    params: RobotParams,
    robot_id: u32,
) -> Result<Dataset, IoError> {
    params.validate()?;
    let raw = Dataset {
        robot_id,
        odometry: read_odometry_csv(odometry_file)?,
        measurements: read_measurements_csv(measurements_file)?,
        params,
    };
    raw.synchronized()
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn odometry_csv(rows: &[WheelOdometry]) -> String {
    let mut out = String::from("state_id,v_l,v_r\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.state_id, r.v_l, r.v_r);
    }
    out
}

pub fn measurements_csv(rows: &[LandmarkMeasurement]) -> String {
    let mut out = String::from("state_id,tag_id,dx,dy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.state_id, r.tag_id, r.dx, r.dy);
    }
    out
}

/// Formats `v` rounded to 9 significant digits, shortest form.
pub fn fmt_sig9(v: f64) -> String {
    if !v.is_finite() {
        return "null".into();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// JSON document for a solved map; key order and number format are fixed.
pub fn map_to_json(map: &GlobalMap) -> String {
    let mut out = String::from("{\"robots\":[");
    for (i, t) in map.trajectories.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"id\":{},\"poses\":[", t.robot_id);
        for (k, p) in t.poses.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "[{},{},{}]", fmt_sig9(p.x), fmt_sig9(p.y), fmt_sig9(p.theta));
        }
        out.push_str("]}");
    }
    out.push_str("],\"landmarks\":[");
    for (i, l) in map.landmarks.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(
            out,
            "{{\"tag_id\":{},\"x\":{},\"y\":{}}}",
            l.tag_id,
            fmt_sig9(l.x),
            fmt_sig9(l.y)
        );
    }
    let _ = writeln!(
        out,
        "],\"origin_distance_m\":{},\"converged\":{}}}",
        fmt_sig9(exported_origin_distance(map)),
        map.converged
    );
    out
}

/// Origin distance recomputed from the rounded origins, so the exported value is
/// consistent with the exported poses.
fn exported_origin_distance(map: &GlobalMap) -> f64 {
    let round = |v: f64| fmt_sig9(v).parse::<f64>().unwrap_or(v);
    match &map.trajectories[..] {
        [a, b, ..] => match (a.poses.first(), b.poses.first()) {
            (Some(p), Some(q)) => (round(p.x) - round(q.x)).hypot(round(p.y) - round(q.y)),
            _ => 0.0,
        },
        _ => 0.0,
    }
}

pub fn export_map(map: &GlobalMap, path: &Path) -> Result<(), IoError> {
    write_atomic(path, map_to_json(map).as_bytes())
}

#[derive(Deserialize)]
struct MapDoc {
    robots: Vec<RobotDoc>,
    landmarks: Vec<LandmarkDoc>,
    origin_distance_m: f64,
    #[serde(default = "yes")]
    converged: bool,
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
struct RobotDoc {
    id: u32,
    poses: Vec<[f64; 3]>,
}

#[derive(Deserialize)]
struct LandmarkDoc {
    tag_id: u32,
    x: f64,
    y: f64,
}

pub fn map_from_json(text: &str) -> Result<GlobalMap, String> {
    let doc: MapDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let trajectories = doc
        .robots
        .into_iter()
        .map(|r| Trajectory {
            robot_id: r.id,
            poses: r
                .poses
                .into_iter()
                .map(|[x, y, theta]| Pose2 { x, y, theta })
                .collect(),
        })
        .collect();
    let landmarks: Vec<Landmark2> = doc
        .landmarks
        .into_iter()
        .map(|l| Landmark2::new(l.tag_id, l.x, l.y))
        .collect();
    let mut seen = BTreeSet::new();
    if let Some(dup) = landmarks.iter().find(|l| !seen.insert(l.tag_id)) {
        return Err(format!("tag {} listed twice", dup.tag_id));
    }
    let mut map = GlobalMap::new(trajectories, landmarks, doc.converged);
    map.origin_distance = doc.origin_distance_m;
    Ok(map)
}

pub fn load_map(path: &Path) -> Result<GlobalMap, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    map_from_json(&text).map_err(|message| IoError::Json {
        path: path.to_path_buf(),
        message,
    })
}

/// One overlay in a rendered figure.
#[derive(Debug, Clone, PartialEq)]
pub struct MapLayer {
    pub label: String,
    pub trajectory: Vec<Pose2>,
    pub landmarks: Vec<Landmark2>,
}

impl MapLayer {
    pub fn new(label: impl Into<String>, trajectory: Vec<Pose2>, landmarks: Vec<Landmark2>) -> Self {
        Self {
            label: label.into(),
            trajectory,
            landmarks,
        }
    }

    /// One layer per trajectory; landmarks go with the first.
    pub fn from_map(map: &GlobalMap, label: &str) -> Vec<MapLayer> {
        map.trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| MapLayer {
                label: format!("{label} robot {}", t.robot_id),
                trajectory: t.poses.clone(),
                landmarks: if i == 0 { map.landmarks.clone() } else { Vec::new() },
            })
            .collect()
    }
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Landmarks of the first layer are drawn as circles, the second as asterisks,
/// further layers as crosses. The y axis points up.
pub fn svg_string(layers: &[MapLayer]) -> Result<String, IoError> {
    if layers.is_empty() {
        return Err(IoError::NothingToRender);
    }
    let points = layers.iter().flat_map(|l| {
        l.trajectory
            .iter()
            .map(|p| (p.x, p.y))
            .chain(l.landmarks.iter().map(|m| (m.x, m.y)))
    });
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (0.0, 0.0, 0.0, 0.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1.0);
    let pad = 0.05 * span;
    let legend_h = 0.06 * span * layers.len() as f64;
    let (vx, vy) = (x0 - pad, -y1 - pad - legend_h);
    let (vw, vh) = (x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad + legend_h);
    let glyph = 0.012 * span;
    let stroke = 0.003 * span;
    let f = |v: f64| fmt_sig9(v);

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{} {} {} {}" width="800" height="{}">"#,
        f(vx),
        f(vy),
        f(vw),
        f(vh),
        f((800.0 * vh / vw).round())
    );
    for (i, layer) in layers.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let label = xml_escape(&layer.label);
        let _ = writeln!(out, r#"<g class="layer" id="layer{i}" data-label="{label}">"#);
        let pts: Vec<String> = layer
            .trajectory
            .iter()
            .map(|p| format!("{},{}", f(p.x), f(-p.y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="trajectory" fill="none" stroke="{color}" stroke-width="{}" points="{}"/>"#,
            f(stroke),
            pts.join(" ")
        );
        for m in &layer.landmarks {
            let (cx, cy) = (f(m.x), f(-m.y));
            match i {
                0 => {
                    let _ = writeln!(
                        out,
                        r#"<circle class="landmark" data-tag="{}" cx="{cx}" cy="{cy}" r="{}" fill="none" stroke="{color}" stroke-width="{}"/>"#,
                        m.tag_id,
                        f(glyph),
                        f(stroke)
                    );
                }
                _ => {
                    let arms: &[f64] = if i == 1 { &[0.0, 60.0, 120.0] } else { &[45.0, 135.0] };
                    let _ = writeln!(
                        out,
                        r#"<g class="{}" data-tag="{}" transform="translate({cx},{cy})" stroke="{color}" stroke-width="{}">"#,
                        if i == 1 { "asterisk" } else { "cross" },
                        m.tag_id,
                        f(stroke)
                    );
                    for deg in arms {
                        let (s, c) = deg.to_radians().sin_cos();
                        let _ = writeln!(
                            out,
                            r#"<line x1="{}" y1="{}" x2="{}" y2="{}"/>"#,
                            f(-glyph * c),
                            f(-glyph * s),
                            f(glyph * c),
                            f(glyph * s)
                        );
                    }
                    let _ = writeln!(out, "</g>");
                }
            }
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(out, r#"<g class="legend" font-size="{}">"#, f(0.035 * span));
    for (i, layer) in layers.iter().enumerate() {
        let y = vy + 0.05 * span * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            f(vx + pad),
            f(y),
            COLORS[i % COLORS.len()],
            xml_escape(&layer.label)
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg(layers: &[MapLayer], path: &Path) -> Result<(), IoError> {
    write_atomic(path, svg_string(layers)?.as_bytes())
}
