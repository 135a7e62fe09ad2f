//! The command-line operations, minus argument parsing: each reads and
//! writes files under the run's output directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::gsaf::{
    interagent_fuse, multiscale_attention, reference_attention, residual_ffn, AttentionTrace,
    FeatureMap, GsafConfig, GsafWeights,
};
use crate::io::{
    assemble_bundles, bundle_records, load_embedding_store, output_records, outputs_from_records,
    read_jsonl, write_jsonl, DetectionRecord, EmbeddingFile, EmbeddingHeader, EventRecord,
    FrameRecord, GroundTruthRecord, Header, RunConfig, Source, TrackRecord, CROPS_FILE,
    DETECTIONS_FILE, EMBEDDINGS_FILE, EVENTS_FILE, FRAMES_FILE, GROUND_TRUTH_FILE, METRICS_FILE,
    TRACKS_FILE,
};
use crate::metrics::{report, MetricsReport};
use crate::model::{AgentId, FrameBundle};
use crate::pipeline::{
    detection_frames, grid, sweep, sweep_csv, tracking_frames, SweepParam, SweepRow,
};
use crate::reid::{EmbeddingProvider, NullProvider};
use crate::simulator::generate;
use crate::tracker::Tracker;
use crate::{Error, Result};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub dir: PathBuf,
    pub frames: usize,
    pub detections: usize,
    pub ground_truth: usize,
    pub embeddings: usize,
}

/// Generates the configured scenario and writes frames, detections, ground
/// truth, the crop manifest and the embedding file.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let scn = cfg
        .scenario()?
        .ok_or_else(|| Error::Config("simulate needs a canned or inline scenario source".into()))?;
    let sim = generate(&scn)?;
    let dir = cfg.resolved_output();
    ensure_dir(&dir)?;

    let (frames, dets, gt) = bundle_records(&sim.bundles);
    write_jsonl(&dir.join(FRAMES_FILE), &Header::new("frames", cfg), &frames)?;
    write_jsonl(
        &dir.join(DETECTIONS_FILE),
        &Header::new("detections", cfg),
        &dets,
    )?;
    write_jsonl(
        &dir.join(GROUND_TRUTH_FILE),
        &Header::new("ground_truth", cfg),
        &gt,
    )?;
    write_jsonl(
        &dir.join(CROPS_FILE),
        &Header::new("crops", cfg),
        &sim.crops,
    )?;

    let rows: Vec<Option<Vec<f32>>> = sim
        .crops
        .iter()
        .map(|c| sim.embeddings.get(&c.key).map(|e| e.to_vec()))
        .collect();
    let file = EmbeddingFile {
        header: EmbeddingHeader {
            model: "synthetic".into(),
            layer: 0,
            dim: scn.embedding_dim,
            normalized: true,
            count: rows.len(),
        },
        rows,
    };
    file.write(&dir.join(EMBEDDINGS_FILE))?;

    Ok(SimulateSummary {
        dir,
        frames: frames.len(),
        detections: dets.len(),
        ground_truth: gt.len(),
        embeddings: file.header.count,
    })
}

/// Frames and an embedding provider, from files or a fresh simulation.
pub struct Loaded {
    pub bundles: Vec<FrameBundle>,
    pub provider: Arc<dyn EmbeddingProvider>,
}

/// Reads a detection directory. Ground truth is attached when `with_gt` is
/// set; embeddings are used when both the manifest and the embedding file
/// exist.
pub fn load_dir(dir: &Path, with_gt: bool) -> Result<Loaded> {
    let (_, frames) = read_jsonl::<FrameRecord>(&dir.join(FRAMES_FILE), "frames")?;
    let (_, dets) = read_jsonl::<DetectionRecord>(&dir.join(DETECTIONS_FILE), "detections")?;
    let gt = if with_gt {
        Some(read_jsonl::<GroundTruthRecord>(&dir.join(GROUND_TRUTH_FILE), "ground_truth")?.1)
    } else {
        None
    };
    let bundles = assemble_bundles(frames, dets, gt)?;
    let (emb, crops) = (dir.join(EMBEDDINGS_FILE), dir.join(CROPS_FILE));
    let provider: Arc<dyn EmbeddingProvider> = if emb.exists() && crops.exists() {
        Arc::new(load_embedding_store(&emb, &crops)?)
    } else {
        Arc::new(NullProvider)
    };
    Ok(Loaded { bundles, provider })
}

/// Files source, explicit input directory, or an in-memory simulation.
pub fn load_source(cfg: &RunConfig, input: Option<&Path>, with_gt: bool) -> Result<Loaded> {
    if let Some(dir) = input {
        return load_dir(dir, with_gt);
    }
    if let Source::Files { dir } = &cfg.source {
        return load_dir(dir, with_gt);
    }
    let scn = cfg.scenario()?.expect("non-file source has a scenario");
    let sim = generate(&scn)?;
    Ok(Loaded {
        bundles: sim.bundles,
        provider: Arc::new(sim.embeddings),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackSummary {
    pub dir: PathBuf,
    pub frames: usize,
    pub track_ids: usize,
    pub track_lines: usize,
    pub events: usize,
}

/// Runs the tracker and writes the track file and event log.
pub fn cmd_track(cfg: &RunConfig, input: Option<&Path>) -> Result<TrackSummary> {
    cfg.validate()?;
    let loaded = load_source(cfg, input, false)?;
    let mut tracker = Tracker::new(cfg.tracker.clone(), loaded.provider)?;
    let outputs = tracker.run(&loaded.bundles)?;
    let (tracks, events) = output_records(&outputs);
    let dir = cfg.resolved_output();
    ensure_dir(&dir)?;
    write_jsonl(&dir.join(TRACKS_FILE), &Header::new("tracks", cfg), &tracks)?;
    write_jsonl(&dir.join(EVENTS_FILE), &Header::new("events", cfg), &events)?;
    let ids: BTreeSet<u64> = tracks.iter().map(|t| t.track.track_id.0).collect();
    Ok(TrackSummary {
        dir,
        frames: outputs.len(),
        track_ids: ids.len(),
        track_lines: tracks.len(),
        events: events.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub header: Header,
    /// Header config of the evaluated track file.
    pub tracks_config: RunConfig,
    pub report: MetricsReport,
}

/// Scores `tracks.jsonl` in `tracks_dir` against `ground_truth.jsonl` (and
/// AP over `detections.jsonl`) in `data_dir`, writing `metrics.json` to the
/// output directory. Both directories default to the output directory.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
    tracks_dir: Option<&Path>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let out = cfg.resolved_output();
    let dir = data_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.clone());
    let tracks_dir = tracks_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.clone());
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    if !gt_path.exists() {
        return Err(Error::validation(
            "ground_truth",
            format!("missing ground-truth file {}", gt_path.display()),
        ));
    }
    let (_, frames) = read_jsonl::<FrameRecord>(&dir.join(FRAMES_FILE), "frames")?;
    let (_, gt) = read_jsonl::<GroundTruthRecord>(&gt_path, "ground_truth")?;
    let (track_header, tracks) =
        read_jsonl::<TrackRecord>(&tracks_dir.join(TRACKS_FILE), "tracks")?;
    let events_path = tracks_dir.join(EVENTS_FILE);
    let events = if events_path.exists() {
        read_jsonl::<EventRecord>(&events_path, "events")?.1
    } else {
        Vec::new()
    };
    let det_path = dir.join(DETECTIONS_FILE);
    let dets = if det_path.exists() {
        read_jsonl::<DetectionRecord>(&det_path, "detections")?.1
    } else {
        Vec::new()
    };

    let frame_ids: Vec<u64> = frames.iter().map(|f| f.frame).collect();
    let bundles = assemble_bundles(frames, dets, Some(gt))?;
    let outputs = outputs_from_records(&frame_ids, tracks, events)?;
    let tracking = tracking_frames(&bundles, &outputs)?;
    let detections = if det_path.exists() {
        detection_frames(&bundles, &cfg.tracker)?
    } else {
        Default::default()
    };
    let rep = report(&tracking, &detections, &cfg.metrics);

    ensure_dir(&out)?;
    let file = MetricsFile {
        header: Header::new("metrics", cfg),
        tracks_config: track_header.config,
        report: rep.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invariant(format!("serialization failed: {e}")))?;
    let path = out.join(METRICS_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(rep)
}

/// Runs the grid and writes `sweep_<param>.csv` to the output directory.
pub fn cmd_sweep(
    cfg: &RunConfig,
    input: Option<&Path>,
    param: SweepParam,
    start: f64,
    end: f64,
    step: f64,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    cfg.validate()?;
    let values = grid(start, end, step)?;
    let loaded = load_source(cfg, input, true)?;
    let rows = sweep(
        &loaded.bundles,
        loaded.provider,
        &cfg.tracker,
        &cfg.metrics,
        param,
        &values,
    )?;
    let dir = cfg.resolved_output();
    ensure_dir(&dir)?;
    let path = dir.join(format!("sweep_{}.csv", param.name()));
    fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok((path, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseDemoOptions {
    pub agents: usize,
    pub height: usize,
    pub width: usize,
    pub gsaf: GsafConfig,
    pub seed: u64,
}

impl Default for FuseDemoOptions {
    fn default() -> Self {
        FuseDemoOptions {
            agents: 3,
            height: 16,
            width: 16,
            gsaf: GsafConfig::default(),
            seed: 0,
        }
    }
}

/// Tolerance for the softmax and identity checks.
pub const FUSE_TOLERANCE: f64 = 1e-6;
/// Tolerance for the loop-oracle comparison.
pub const ORACLE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuseDemoReport {
    pub agents: usize,
    pub shape: [usize; 3],
    pub row_sum_error: f64,
    pub min_weight: f64,
    /// Largest distance of a fused value outside the per-location agent range.
    pub hull_violation: f64,
    pub oracle_max_diff: f64,
    /// Fusing the ego map alone returns it.
    pub single_agent_diff: f64,
    /// Fusing N copies of one map returns it.
    pub identical_agents_diff: f64,
    pub output_finite: bool,
    pub elapsed_ms: f64,
    pub passed: bool,
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs the attention fusion on seeded random maps and checks its
/// invariants.
pub fn cmd_fuse_demo(opts: &FuseDemoOptions) -> Result<FuseDemoReport> {
    if opts.agents == 0 {
        return Err(Error::validation("agents", "need at least one agent"));
    }
    let cfg = GsafConfig {
        seed: opts.seed,
        ..opts.gsaf.clone()
    };
    cfg.validate()?;
    let weights = GsafWeights::seeded(&cfg)?;
    let maps: Vec<FeatureMap> = (0..opts.agents)
        .map(|a| {
            FeatureMap::random(
                AgentId(a as u32),
                opts.height,
                opts.width,
                cfg.channels,
                opts.seed.wrapping_add(a as u64),
            )
        })
        .collect();
    let ego = AgentId(0);

    let start = Instant::now();
    let mut trace = AttentionTrace::default();
    let attended = maps
        .iter()
        .map(|m| multiscale_attention(m, &weights, Some(&mut trace)))
        .collect::<Result<Vec<_>>>()?;
    let fused = interagent_fuse(&attended, ego, &weights, Some(&mut trace))?;
    let out = residual_ffn(&fused, &weights)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut oracle_max_diff: f64 = 0.0;
    for (m, a) in maps.iter().zip(&attended) {
        oracle_max_diff = oracle_max_diff.max(max_abs_diff(&reference_attention(m, &weights)?, a));
    }

    let mut hull_violation: f64 = 0.0;
    for ((i, j, k), &v) in fused.data.indexed_iter() {
        let (lo, hi) = attended
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| {
                let x = a.data[[i, j, k]];
                (lo.min(x), hi.max(x))
            });
        hull_violation = hull_violation.max(lo - v).max(v - hi);
    }

    let ego_map = &attended[0];
    let single = interagent_fuse(std::slice::from_ref(ego_map), ego, &weights, None)?;
    let copies: Vec<FeatureMap> = (0..opts.agents)
        .map(|a| FeatureMap {
            agent: AgentId(a as u32),
            data: ego_map.data.clone(),
        })
        .collect();
    let identical = interagent_fuse(&copies, ego, &weights, None)?;

    let (h, w, c) = out.dims();
    let mut report = FuseDemoReport {
        agents: opts.agents,
        shape: [h, w, c],
        row_sum_error: trace.max_row_sum_error(),
        min_weight: trace.min_weight(),
        hull_violation,
        oracle_max_diff,
        single_agent_diff: max_abs_diff(&single, ego_map),
        identical_agents_diff: max_abs_diff(&identical, ego_map),
        output_finite: out.data.iter().all(|v| v.is_finite()),
        elapsed_ms,
        passed: false,
    };
    report.passed = report.row_sum_error <= FUSE_TOLERANCE
        && report.min_weight >= 0.0
        && report.hull_violation <= FUSE_TOLERANCE
        && report.oracle_max_diff <= ORACLE_TOLERANCE
        && report.single_agent_diff <= FUSE_TOLERANCE
        && report.identical_agents_diff <= FUSE_TOLERANCE
        && report.output_finite;
    Ok(report)
}
