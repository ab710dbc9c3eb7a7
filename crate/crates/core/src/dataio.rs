//! Line-delimited sample files, dataset cleaning and train/test splitting.
//!
//! A dataset file is one JSON object per line. The first line is a header
//! carrying the schema name, version and joint order; every following line is
//! a sample record:
//!
//! ```text
//! {"schema":"fusionpose.samples","version":1,"joints":["nose",...]}
//! {"id":"...","camera":{"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..,
//!   "extrinsics":[16 reals, row-major]},"bbox3d_center":[x,y,z],
//!   "points":[[x,y,z],...],"keypoints2d":[[u,v,c] x 13],
//!   "gt3d":[[x,y,z,valid] x 13],"pseudo3d":[[x,y,z,valid] x 13]}
//! ```
//!
//! `gt3d` and `pseudo3d` are optional. Fields are written in the order above,
//! and every real is rounded to 9 significant digits, so equal data gives
//! byte-identical files. Paths ending in `.gz` are gzip-compressed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::Compression;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use nalgebra::{Matrix4, Vector2, Vector3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    Camera, FilterThresholds, JOINT_NAMES, Keypoints2D, NUM_JOINTS, PointCloud, Pose3D,
    RejectReason, Sample, validate_sample,
};
use crate::rng::{self, stream};

pub const SCHEMA_NAME: &str = "fusionpose.samples";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
}

/// Rounds to 9 significant digits.
pub fn quantize(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn q3(v: &Vector3<f64>) -> [f64; 3] {
    [quantize(v.x), quantize(v.y), quantize(v.z)]
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
    joints: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
    extrinsics: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    camera: CameraRecord,
    bbox3d_center: [f64; 3],
    points: Vec<[f64; 3]>,
    keypoints2d: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt3d: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo3d: Option<Vec<[f64; 4]>>,
}

fn pose_record(p: &Pose3D) -> Vec<[f64; 4]> {
    p.joints
        .iter()
        .zip(&p.valid)
        .map(|(j, &v)| {
            if v {
                let [x, y, z] = q3(j);
                [x, y, z, 1.0]
            } else {
                [0.0, 0.0, 0.0, 0.0]
            }
        })
        .collect()
}

fn to_record(s: &Sample) -> SampleRecord {
    let c = &s.camera;
    let mut extrinsics = Vec::with_capacity(16);
    for r in 0..4 {
        for col in 0..4 {
            extrinsics.push(quantize(c.extrinsics[(r, col)]));
        }
    }
    SampleRecord {
        id: s.id.clone(),
        camera: CameraRecord {
            fx: quantize(c.fx),
            fy: quantize(c.fy),
            cx: quantize(c.cx),
            cy: quantize(c.cy),
            width: quantize(c.width),
            height: quantize(c.height),
            extrinsics,
        },
        bbox3d_center: q3(&s.bbox3d_center),
        points: s.cloud.points.iter().map(q3).collect(),
        keypoints2d: (0..NUM_JOINTS)
            .map(|i| {
                let c = s.keypoints2d.confidence[i];
                if c > 0.0 {
                    let j = s.keypoints2d.joints[i];
                    [quantize(j.x), quantize(j.y), quantize(c)]
                } else {
                    [0.0, 0.0, 0.0]
                }
            })
            .collect(),
        gt3d: s.gt3d.as_ref().map(pose_record),
        pseudo3d: s.pseudo3d.as_ref().map(pose_record),
    }
}

fn pose_from_record(rows: &[[f64; 4]], field: &str) -> Result<Pose3D, String> {
    if rows.len() != NUM_JOINTS {
        return Err(format!("{field}: expected {NUM_JOINTS} joints, found {}", rows.len()));
    }
    let mut pose = Pose3D::invalid();
    for (i, r) in rows.iter().enumerate() {
        pose.valid[i] = match r[3] {
            0.0 => false,
            1.0 => true,
            other => return Err(format!("{field}[{i}]: validity flag must be 0 or 1, found {other}")),
        };
        pose.joints[i] = Vector3::new(r[0], r[1], r[2]);
    }
    Ok(pose)
}

fn from_record(r: SampleRecord) -> Result<Sample, String> {
    if r.camera.extrinsics.len() != 16 {
        return Err(format!(
            "camera.extrinsics: expected 16 values, found {}",
            r.camera.extrinsics.len()
        ));
    }
    if r.keypoints2d.len() != NUM_JOINTS {
        return Err(format!(
            "keypoints2d: expected {NUM_JOINTS} joints, found {}",
            r.keypoints2d.len()
        ));
    }
    let camera = Camera {
        fx: r.camera.fx,
        fy: r.camera.fy,
        cx: r.camera.cx,
        cy: r.camera.cy,
        width: r.camera.width,
        height: r.camera.height,
        extrinsics: Matrix4::from_row_slice(&r.camera.extrinsics),
    };
    let keypoints2d = Keypoints2D {
        joints: std::array::from_fn(|i| Vector2::new(r.keypoints2d[i][0], r.keypoints2d[i][1])),
        confidence: std::array::from_fn(|i| r.keypoints2d[i][2]),
    };
    Ok(Sample {
        id: r.id,
        camera,
        bbox3d_center: Vector3::from(r.bbox3d_center),
        cloud: PointCloud::new(r.points.into_iter().map(Vector3::from).collect()),
        keypoints2d,
        gt3d: r.gt3d.as_deref().map(|p| pose_from_record(p, "gt3d")).transpose()?,
        pseudo3d: r.pseudo3d.as_deref().map(|p| pose_from_record(p, "pseudo3d")).transpose()?,
    })
}

/// The sample exactly as it reads back from a file.
pub fn canonicalize(s: &Sample) -> Sample {
    from_record(to_record(s)).expect("record built from a sample is well-shaped")
}

fn header_line() -> String {
    serde_json::to_string(&Header {
        schema: SCHEMA_NAME.into(),
        version: SCHEMA_VERSION,
        joints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
    })
    .expect("header serializes")
}

/// Serializes samples to the line format, header first.
pub fn encode_samples(samples: &[Sample]) -> String {
    let mut out = header_line();
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(&to_record(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses the line format. An empty input holds no samples.
pub fn decode_samples(reader: impl BufRead) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    let mut seen_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            line: line_no,
            message,
        };
        if !seen_header {
            let h: Header =
                serde_json::from_str(&line).map_err(|e| parse_err(format!("bad header: {e}")))?;
            if h.schema != SCHEMA_NAME {
                return Err(parse_err(format!("unknown schema {:?}", h.schema)));
            }
            if h.version != SCHEMA_VERSION {
                return Err(DataError::SchemaVersion { found: h.version });
            }
            if h.joints != JOINT_NAMES {
                return Err(parse_err("joint order differs from the canonical table".into()));
            }
            seen_header = true;
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        samples.push(from_record(rec).map_err(parse_err)?);
    }
    Ok(samples)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    decode_samples(BufReader::new(reader))
}

/// What was written, for dataset manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrittenFile {
    pub path: String,
    pub n_samples: usize,
    /// SHA-256 of the uncompressed text.
    pub sha256: String,
}

pub fn write_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<WrittenFile, DataError> {
    let path = path.as_ref();
    let text = encode_samples(samples);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    if is_gz(path) {
        let mut gz = GzEncoder::new(&mut w, Compression::default());
        gz.write_all(text.as_bytes()).map_err(io_err(path))?;
        gz.finish().map_err(io_err(path))?;
    } else {
        w.write_all(text.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(WrittenFile {
        path: path.display().to_string(),
        n_samples: samples.len(),
        sha256: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

/// Per-stage survivor counts and per-reason rejection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FilterStats {
    /// `(stage, samples remaining)`, starting with the input count. Rules are
    /// applied in the order malformed, points, keypoints, camera overlap.
    pub stages: Vec<(String, usize)>,
    /// Number of samples violating each rule. A sample may violate several.
    pub rejections: BTreeMap<RejectReason, usize>,
}

/// Provenance of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub filter: FilterStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<(usize, usize)>,
    pub files: Vec<WrittenFile>,
}

impl DatasetManifest {
    /// Hashes the canonical JSON of `config`.
    pub fn with_config<T: Serialize>(seed: u64, config: &T) -> Self {
        let value = serde_json::to_value(config).expect("config serializes");
        let text = serde_json::to_string(&value).expect("config serializes");
        DatasetManifest {
            seed,
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
            config: Some(value),
            ..Default::default()
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// Keeps the samples that pass every cleaning rule.
pub fn filter_dataset(samples: Vec<Sample>, thresholds: &FilterThresholds) -> (Vec<Sample>, FilterStats) {
    const ORDER: [(RejectReason, &str); 4] = [
        (RejectReason::Malformed, "well_formed"),
        (RejectReason::TooFewPoints, "min_points"),
        (RejectReason::TooFewKeypoints, "min_keypoints"),
        (RejectReason::CameraOverlap, "camera_overlap"),
    ];
    let reports: Vec<_> = samples.iter().map(|s| validate_sample(s, thresholds)).collect();
    let mut stats = FilterStats {
        stages: vec![("input".into(), samples.len())],
        rejections: RejectReason::ALL.iter().map(|&r| (r, 0)).collect(),
    };
    for r in &reports {
        for reason in &r.reasons {
            *stats.rejections.entry(*reason).or_default() += 1;
        }
    }
    for k in 0..ORDER.len() {
        let survivors = reports
            .iter()
            .filter(|r| !ORDER[..=k].iter().any(|(reason, _)| r.reasons.contains(reason)))
            .count();
        stats.stages.push((ORDER[k].1.into(), survivors));
    }
    let kept = samples
        .into_iter()
        .zip(&reports)
        .filter(|(_, r)| r.accepted())
        .map(|(s, _)| s)
        .collect();
    (kept, stats)
}

/// Seeded shuffle, then `floor((1 - fraction) n)` samples go to the test side.
/// Both sides keep the input order.
pub fn split(samples: Vec<Sample>, fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Fraction(fraction));
    }
    let n = samples.len();
    let n_test = (((1.0 - fraction) * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(seed, stream::SPLIT, 0));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n - n_test), Vec::with_capacity(n_test));
    for (s, t) in samples.into_iter().zip(is_test) {
        if t {
            test.push(s)
        } else {
            train.push(s)
        }
    }
    Ok((train, test))
}
