//! Appearance re-identification: embedding lookup table, windowed cosine
//! matching and the cross-agent fallback.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{AgentId, ClassName, EmbeddingKey, TrackId};
use crate::{Error, Result};

/// Shared, immutable embedding vector.
pub type Embedding = Arc<[f32]>;

const NORM_TOL: f64 = 1e-6;

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            dim: "embedding",
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scales `v` to unit length. Zero vectors are returned unchanged.
pub fn normalize(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.iter().map(|&x| x as f32).collect();
    }
    v.iter().map(|&x| (x / n) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub vector: Embedding,
    pub agent: AgentId,
    pub track: TrackId,
    pub frame: u64,
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        let n = l2_norm(&self.vector);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::validation(
                "vector",
                format!("embedding norm {n} is not 1"),
            ));
        }
        Ok(())
    }
}

/// Per-agent map of track id to a bounded, frame-ordered record buffer.
#[derive(Debug, Clone)]
pub struct FeatureLut {
    window: u64,
    agents: BTreeMap<AgentId, BTreeMap<TrackId, VecDeque<EmbeddingRecord>>>,
    dim: Option<usize>,
}

impl FeatureLut {
    pub fn new(window: u64) -> Self {
        FeatureLut {
            window: window.max(1),
            agents: BTreeMap::new(),
            dim: None,
        }
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn insert(&mut self, rec: EmbeddingRecord) -> Result<()> {
        rec.validate()?;
        match self.dim {
            Some(d) if d != rec.vector.len() => {
                return Err(Error::Shape {
                    dim: "embedding",
                    expected: d,
                    got: rec.vector.len(),
                })
            }
            _ => self.dim = Some(rec.vector.len()),
        }
        let horizon = rec.frame.saturating_sub(self.window);
        let buf = self
            .agents
            .entry(rec.agent)
            .or_default()
            .entry(rec.track)
            .or_default();
        // Keep frame order even if an older record arrives late.
        let pos = buf.partition_point(|r| r.frame <= rec.frame);
        buf.insert(pos, rec);
        while buf.len() as u64 > self.window {
            buf.pop_front();
        }
        while buf.front().is_some_and(|r| r.frame < horizon) {
            buf.pop_front();
        }
        Ok(())
    }

    /// Drops every record older than `frame - window`.
    pub fn prune(&mut self, frame: u64) {
        let horizon = frame.saturating_sub(self.window);
        for tracks in self.agents.values_mut() {
            for buf in tracks.values_mut() {
                while buf.front().is_some_and(|r| r.frame < horizon) {
                    buf.pop_front();
                }
            }
            tracks.retain(|_, b| !b.is_empty());
        }
        self.agents.retain(|_, t| !t.is_empty());
    }

    /// Records of `track` held by `agent`, oldest first.
    pub fn records(
        &self,
        agent: AgentId,
        track: TrackId,
    ) -> impl Iterator<Item = &EmbeddingRecord> {
        self.agents
            .get(&agent)
            .and_then(|t| t.get(&track))
            .into_iter()
            .flatten()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agents.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.agents
            .values()
            .flat_map(|t| t.values())
            .map(|b| b.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Best cosine between `query` and records of `track` on `agent` that are
    /// no older than `frame - window`.
    fn best_similarity(
        &self,
        agent: AgentId,
        track: TrackId,
        query: &[f32],
        frame: u64,
    ) -> Result<Option<f64>> {
        let horizon = frame.saturating_sub(self.window);
        let mut best: Option<f64> = None;
        for rec in self.records(agent, track) {
            if rec.frame < horizon || rec.frame > frame {
                continue;
            }
            let s = cosine(query, &rec.vector)?;
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
        Ok(best)
    }
}

/// Source of appearance vectors for detections.
pub trait EmbeddingProvider: Send + Sync {
    /// Declared vector width, if known.
    fn dim(&self) -> Option<usize>;

    fn embedding(&self, key: &EmbeddingKey) -> Option<Embedding>;
}

/// Provider that never returns an embedding; disables appearance matching.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullProvider;

impl EmbeddingProvider for NullProvider {
    fn dim(&self) -> Option<usize> {
        None
    }

    fn embedding(&self, _key: &EmbeddingKey) -> Option<Embedding> {
        None
    }
}

/// In-memory embedding table. Filled by the simulator or loaded from an
/// embedding file written by the extraction sidecar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    rows: BTreeMap<EmbeddingKey, Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, key: EmbeddingKey, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                dim: "embedding",
                expected: self.dim,
                got: v.len(),
            });
        }
        self.rows.insert(key, v.into());
        Ok(())
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&Embedding> {
        self.rows.get(key)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EmbeddingKey, &Embedding)> {
        self.rows.iter()
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embedding(&self, key: &EmbeddingKey) -> Option<Embedding> {
        self.rows.get(key).cloned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReidConfig {
    /// Minimum cosine for a temporal match on the ego agent.
    pub sim_thresh: f64,
    /// Minimum cosine for a match against peer agents' memories.
    pub inter_agent_thresh: f64,
    /// Temporal window in frames.
    pub window: u64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            sim_thresh: 0.8,
            inter_agent_thresh: 0.85,
            window: 10,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("sim_thresh", self.sim_thresh),
            ("inter_agent_thresh", self.inter_agent_thresh),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::validation(field, format!("{v} outside [-1, 1]")));
            }
        }
        if self.window == 0 {
            return Err(Error::validation("window", "must be at least 1 frame"));
        }
        Ok(())
    }
}

/// An unmatched detection with whatever views carry an embedding.
#[derive(Debug, Clone)]
pub struct ReidQuery {
    pub det: usize,
    pub class: ClassName,
    pub embeddings: Vec<Embedding>,
}

#[derive(Debug, Clone)]
pub struct ReidCandidate {
    pub track: TrackId,
    pub class: ClassName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReidStage {
    Temporal,
    CrossAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub det: usize,
    pub track: TrackId,
    pub similarity: f64,
    pub stage: ReidStage,
}

/// Recovers historical track ids for unmatched detections.
///
/// Stage A compares each query against the ego agent's windowed records and
/// accepts at `sim_thresh`. Queries left over are compared against the peer
/// agents' records at `inter_agent_thresh`. Each stage assigns greedily by
/// descending similarity, ties broken by detection then track order.
pub fn reid_match(
    queries: &[ReidQuery],
    candidates: &[ReidCandidate],
    lut: &FeatureLut,
    ego: AgentId,
    frame: u64,
    cfg: &ReidConfig,
) -> Result<Vec<Recovery>> {
    let mut used_dets = BTreeSet::new();
    let mut used_tracks = BTreeSet::new();
    let mut out = Vec::new();

    let ego_only = [ego];
    let peers: Vec<AgentId> = lut.agents().filter(|&a| a != ego).collect();
    let stages: [(ReidStage, &[AgentId], f64); 2] = [
        (ReidStage::Temporal, &ego_only, cfg.sim_thresh),
        (ReidStage::CrossAgent, &peers, cfg.inter_agent_thresh),
    ];

    for (stage, agents, thresh) in stages {
        let mut pairs: Vec<(f64, usize, TrackId)> = Vec::new();
        for q in queries {
            if used_dets.contains(&q.det) || q.embeddings.is_empty() {
                continue;
            }
            for c in candidates {
                if c.class != q.class || used_tracks.contains(&c.track) {
                    continue;
                }
                let mut best: Option<f64> = None;
                for &agent in agents {
                    for e in &q.embeddings {
                        if let Some(s) = lut.best_similarity(agent, c.track, e, frame)? {
                            best = Some(best.map_or(s, |b: f64| b.max(s)));
                        }
                    }
                }
                if let Some(s) = best.filter(|&s| s >= thresh) {
                    pairs.push((s, q.det, c.track));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (s, det, track) in pairs {
            if used_dets.contains(&det) || used_tracks.contains(&track) {
                continue;
            }
            used_dets.insert(det);
            used_tracks.insert(track);
            out.push(Recovery {
                det,
                track,
                similarity: s,
                stage,
            });
        }
    }
    out.sort_by_key(|r| r.det);
    Ok(out)
}
