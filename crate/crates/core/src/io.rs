//! File formats: line-delimited JSON records behind a header line, the
//! binary embedding file, and the run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform;
use crate::metrics::EvalConfig;
use crate::model::{
    AgentId, AgentPose, Box3D, CameraModel, ClassName, Detection, EmbeddingKey, FrameBundle,
    GtObject,
};
use crate::reid::EmbeddingStore;
use crate::simulator::{CropRecord, Scenario};
use crate::tracker::{FrameOutput, TrackEvent, TrackOutput, TrackerConfig};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable that relative output directories resolve against.
pub const OUT_ROOT_ENV: &str = "COTRACK_OUT_ROOT";

pub const DEFAULT_OUTPUT_DIR: &str = "out";

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const CROPS_FILE: &str = "crops.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// Where a run gets its frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// A built-in scenario by name.
    Canned { name: String },
    /// A fully specified scenario.
    Scenario { scenario: Box<Scenario> },
    /// A directory written by `simulate` or by an external detector.
    Files { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: Source,
    /// Overrides the scenario seed when set.
    pub seed: Option<u64>,
    pub tracker: TrackerConfig,
    pub metrics: EvalConfig,
    /// Left out of file headers so identical runs in different directories
    /// produce identical bytes.
    #[serde(skip_serializing_if = "is_empty_path")]
    pub output_dir: PathBuf,
}

fn is_empty_path(p: &Path) -> bool {
    p.as_os_str().is_empty()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: Source::Canned {
                name: "occlusion_crossing".into(),
            },
            seed: None,
            tracker: TrackerConfig::default(),
            metrics: EvalConfig::default(),
            output_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.metrics.validate()?;
        if let Source::Scenario { scenario } = &self.source {
            scenario.validate()?;
        }
        Ok(())
    }

    /// The scenario this config describes, with the seed override applied.
    pub fn scenario(&self) -> Result<Option<Scenario>> {
        let mut scn = match &self.source {
            Source::Canned { name } => crate::simulator::canned(name, 0)?,
            Source::Scenario { scenario } => (**scenario).clone(),
            Source::Files { .. } => return Ok(None),
        };
        if let Some(seed) = self.seed {
            scn.seed = seed;
        }
        Ok(Some(scn))
    }

    /// Output directory (`out` when unset), resolved against the
    /// output-root variable when relative.
    pub fn resolved_output(&self) -> PathBuf {
        if self.output_dir.as_os_str().is_empty() {
            resolve_output(Path::new(DEFAULT_OUTPUT_DIR))
        } else {
            resolve_output(&self.output_dir)
        }
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// First line of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub schema: String,
    pub schema_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
}

impl Header {
    pub fn new(schema: &str, config: &RunConfig) -> Self {
        Header {
            schema: schema.to_string(),
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config: RunConfig {
                output_dir: PathBuf::new(),
                ..config.clone()
            },
        }
    }
}

/// One detection line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u64,
    pub agent_id: AgentId,
    pub class: ClassName,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: Box3D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingKey>,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        DetectionRecord {
            frame: d.frame,
            agent_id: d.agent,
            class: d.class.clone(),
            score: d.score,
            bbox: d.bbox,
            embedding: d.embedding,
        }
    }
}

impl From<DetectionRecord> for Detection {
    fn from(r: DetectionRecord) -> Self {
        Detection {
            frame: r.frame,
            agent: r.agent_id,
            class: r.class,
            bbox: r.bbox,
            score: r.score,
            embedding: r.embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        let r = &t.rotation;
        TransformRecord {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TransformRecord {
    pub fn to_transform(&self) -> Result<RigidTransform> {
        let r = &self.rotation;
        let t = RigidTransform {
            rotation: Matrix3::from_fn(|i, j| r[i][j]),
            translation: Vector3::from(self.translation),
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub index: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: TransformRecord,
}

/// Per-frame sensor metadata line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: u64,
    pub timestamp: f64,
    pub poses: BTreeMap<AgentId, TransformRecord>,
    #[serde(default)]
    pub cameras: BTreeMap<AgentId, Vec<CameraRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub frame: u64,
    #[serde(flatten)]
    pub object: GtObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    #[serde(flatten)]
    pub track: TrackOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub frame: u64,
    #[serde(flatten)]
    pub event: TrackEvent,
}

/// Anything that lives on a frame.
pub trait Framed {
    fn frame(&self) -> Option<u64>;
}

macro_rules! framed {
    ($($t:ty),*) => {
        $(impl Framed for $t {
            fn frame(&self) -> Option<u64> {
                Some(self.frame)
            }
        })*
    };
}
framed!(
    DetectionRecord,
    FrameRecord,
    GroundTruthRecord,
    TrackRecord,
    EventRecord
);

impl Framed for CropRecord {
    fn frame(&self) -> Option<u64> {
        Some(self.key.frame)
    }
}

/// Writes a header line followed by one JSON object per record.
pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    line(to_json(header)?)?;
    for r in records {
        line(to_json(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Invariant(format!("serialization failed: {e}")))
}

/// Reads a file written by [`write_jsonl`], checking the schema name and
/// version and that frames never decrease.
pub fn read_jsonl<T: DeserializeOwned + Framed>(
    path: &Path,
    schema: &str,
) -> Result<(Header, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected a header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.schema != schema {
        return Err(parse_err(
            1,
            format!("schema `{}`, expected `{schema}`", header.schema),
        ));
    }
    if header.schema_version != SCHEMA_VERSION {
        return Err(parse_err(
            1,
            format!(
                "schema version {}, this tool reads {SCHEMA_VERSION}",
                header.schema_version
            ),
        ));
    }
    let mut out = Vec::new();
    let mut last = 0;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        if let Some(f) = rec.frame() {
            if f < last {
                return Err(parse_err(n, format!("frame {f} after frame {last}")));
            }
            last = f;
        }
        out.push(rec);
    }
    Ok((header, out))
}

/// Header of the binary embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub model: String,
    pub layer: u32,
    pub dim: usize,
    pub normalized: bool,
    pub count: usize,
}

/// Rows are `None` for crops the extractor could not embed (NaN sentinel).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub header: EmbeddingHeader,
    pub rows: Vec<Option<Vec<f32>>>,
}

/// Norm tolerance for rows flagged as normalized (f32 storage).
pub const NORM_TOLERANCE: f64 = 1e-4;

impl EmbeddingFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.rows.len() != self.header.count {
            return Err(Error::Invariant(format!(
                "{} rows but header count {}",
                self.rows.len(),
                self.header.count
            )));
        }
        let head = to_json(&self.header)?;
        let mut bytes = Vec::with_capacity(8 + head.len() + 4 * self.header.dim * self.rows.len());
        bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
        bytes.extend_from_slice(head.as_bytes());
        for row in &self.rows {
            match row {
                Some(v) => {
                    if v.len() != self.header.dim {
                        return Err(Error::Shape {
                            dim: "embedding",
                            expected: self.header.dim,
                            got: v.len(),
                        });
                    }
                    for x in v {
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
                None => {
                    for _ in 0..self.header.dim {
                        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
                    }
                }
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads and checks row count, finiteness and (when flagged) unit norm.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason,
        };
        if bytes.len() < 8 {
            return Err(bad("truncated header length".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let head = bytes
            .get(8..8 + n)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: EmbeddingHeader =
            serde_json::from_slice(head).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.dim == 0 {
            return Err(bad("embedding dim must be positive".into()));
        }
        let payload = &bytes[8 + n..];
        let expected = header.count * header.dim * 4;
        if payload.len() != expected {
            return Err(bad(format!(
                "row count mismatch: header says {} rows of {} floats ({expected} bytes), found {} bytes",
                header.count,
                header.dim,
                payload.len()
            )));
        }
        let mut rows = Vec::with_capacity(header.count);
        for (i, chunk) in payload.chunks_exact(4 * header.dim).enumerate() {
            let v: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if v.iter().all(|x| x.is_nan()) {
                rows.push(None);
                continue;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("row {i} has non-finite values")));
            }
            if header.normalized {
                let norm = crate::reid::l2_norm(&v);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(bad(format!("row {i} has norm {norm}, expected 1")));
                }
            }
            rows.push(Some(v));
        }
        Ok(EmbeddingFile { header, rows })
    }
}

/// Builds a provider from an embedding file and the crop manifest that
/// produced it; row `i` belongs to manifest line `i`.
pub fn load_embedding_store(embeddings: &Path, manifest: &Path) -> Result<EmbeddingStore> {
    let file = EmbeddingFile::read(embeddings)?;
    let (_, crops) = read_jsonl::<CropRecord>(manifest, "crops")?;
    if crops.len() != file.rows.len() {
        return Err(Error::Parse {
            path: embeddings.to_path_buf(),
            line: 0,
            reason: format!(
                "{} rows for {} manifest entries",
                file.rows.len(),
                crops.len()
            ),
        });
    }
    let mut store = EmbeddingStore::new(file.header.dim);
    for (crop, row) in crops.iter().zip(file.rows) {
        if let Some(v) = row {
            store.insert(crop.key, v)?;
        }
    }
    Ok(store)
}

/// Splits bundles into the simulate-output record streams.
pub fn bundle_records(
    bundles: &[FrameBundle],
) -> (
    Vec<FrameRecord>,
    Vec<DetectionRecord>,
    Vec<GroundTruthRecord>,
) {
    let mut frames = Vec::with_capacity(bundles.len());
    let mut dets = Vec::new();
    let mut gt = Vec::new();
    for b in bundles {
        frames.push(FrameRecord {
            frame: b.frame,
            timestamp: b.timestamp,
            poses: b
                .poses
                .iter()
                .map(|(a, p)| (*a, TransformRecord::from(p.to_world())))
                .collect(),
            cameras: b
                .cameras
                .iter()
                .map(|(a, cams)| {
                    let recs = cams
                        .iter()
                        .map(|c| CameraRecord {
                            index: c.index,
                            fx: c.fx,
                            fy: c.fy,
                            cx: c.cx,
                            cy: c.cy,
                            width: c.width,
                            height: c.height,
                            extrinsic: TransformRecord::from(&c.extrinsic),
                        })
                        .collect();
                    (*a, recs)
                })
                .collect(),
        });
        for ds in b.detections.values() {
            dets.extend(ds.iter().map(DetectionRecord::from));
        }
        for g in b.ground_truth.iter().flatten() {
            gt.push(GroundTruthRecord {
                frame: b.frame,
                object: g.clone(),
            });
        }
    }
    (frames, dets, gt)
}

/// Reassembles bundles from frame, detection and optional ground-truth
/// records. Every detection and ground-truth frame must have a frame record.
pub fn assemble_bundles(
    frames: Vec<FrameRecord>,
    dets: Vec<DetectionRecord>,
    gt: Option<Vec<GroundTruthRecord>>,
) -> Result<Vec<FrameBundle>> {
    let mut bundles = Vec::with_capacity(frames.len());
    let mut index = BTreeMap::new();
    for f in frames {
        let mut b = FrameBundle {
            frame: f.frame,
            timestamp: f.timestamp,
            ground_truth: gt.as_ref().map(|_| Vec::new()),
            ..Default::default()
        };
        for (agent, pose) in &f.poses {
            b.poses.insert(*agent, AgentPose(pose.to_transform()?));
            b.detections.insert(*agent, Vec::new());
        }
        for (agent, cams) in &f.cameras {
            let mut out = Vec::with_capacity(cams.len());
            for c in cams {
                let cam = CameraModel {
                    agent: *agent,
                    index: c.index,
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                    width: c.width,
                    height: c.height,
                    extrinsic: c.extrinsic.to_transform()?,
                };
                cam.validate()?;
                out.push(cam);
            }
            b.cameras.insert(*agent, out);
        }
        if index.insert(f.frame, bundles.len()).is_some() {
            return Err(Error::validation(
                "frames",
                format!("frame {} listed twice", f.frame),
            ));
        }
        bundles.push(b);
    }
    let slot = |frame: u64| {
        index
            .get(&frame)
            .copied()
            .ok_or_else(|| Error::validation("frame", format!("frame {frame} has no frame record")))
    };
    for d in dets {
        let i = slot(d.frame)?;
        bundles[i]
            .detections
            .entry(d.agent_id)
            .or_default()
            .push(Detection::from(d));
    }
    for g in gt.into_iter().flatten() {
        let i = slot(g.frame)?;
        bundles[i]
            .ground_truth
            .get_or_insert_with(Vec::new)
            .push(g.object);
    }
    for b in &bundles {
        b.validate()?;
    }
    Ok(bundles)
}

/// Flattens tracker output into track and event lines.
pub fn output_records(outputs: &[FrameOutput]) -> (Vec<TrackRecord>, Vec<EventRecord>) {
    let mut tracks = Vec::new();
    let mut events = Vec::new();
    for o in outputs {
        tracks.extend(o.tracks.iter().map(|t| TrackRecord {
            frame: o.frame,
            track: t.clone(),
        }));
        events.extend(o.events.iter().map(|e| EventRecord {
            frame: o.frame,
            event: e.clone(),
        }));
    }
    (tracks, events)
}

/// Regroups track and event lines by frame over `frames`.
pub fn outputs_from_records(
    frames: &[u64],
    tracks: Vec<TrackRecord>,
    events: Vec<EventRecord>,
) -> Result<Vec<FrameOutput>> {
    let mut by_frame: BTreeMap<u64, FrameOutput> = frames
        .iter()
        .map(|&f| {
            (
                f,
                FrameOutput {
                    frame: f,
                    ..Default::default()
                },
            )
        })
        .collect();
    for t in tracks {
        by_frame
            .get_mut(&t.frame)
            .ok_or_else(|| {
                Error::validation(
                    "frame",
                    format!("track frame {} outside ground truth", t.frame),
                )
            })?
            .tracks
            .push(t.track);
    }
    for e in events {
        if let Some(o) = by_frame.get_mut(&e.frame) {
            o.events.push(e.event);
        }
    }
    Ok(by_frame.into_values().collect())
}
