//! Per-frame tracking loop: preprocessing, cross-agent merging, class-wise
//! prediction and association, appearance recovery and the velocity-adaptive
//! track lifecycle.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::association::{associate_two_stage, DetBox, TrackBox};
use crate::geometry::iou3d;
use crate::model::{
    AgentId, Box3D, ClassName, ClassRegistry, Detection, EmbeddingKey, FrameBundle, IdSource,
    ObjectClass, Track, TrackId,
};
use crate::motion::KalmanState;
use crate::reid::{
    l2_norm, reid_match, Embedding, EmbeddingProvider, EmbeddingRecord, FeatureLut, NullProvider,
    ReidCandidate, ReidConfig, ReidQuery, ReidStage,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Detections scoring below this are dropped before tracking.
    pub confidence_floor: f64,
    /// Extra frames of max age per m/s of estimated speed.
    pub alpha: f64,
    pub reid_enabled: bool,
    /// Detections from different agents also merge when their BEV centers
    /// lie within this multiple of the stronger box's longer side.
    pub merge_distance: f64,
    pub reid: ReidConfig,
    pub ego: AgentId,
    pub classes: ClassRegistry,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            confidence_floor: 0.1,
            alpha: 1.0,
            reid_enabled: true,
            merge_distance: 1.0,
            reid: ReidConfig::default(),
            ego: AgentId(0),
            classes: ClassRegistry::default(),
        }
    }
}

impl TrackerConfig {
    /// Fixed max age and no appearance matching.
    pub fn baseline() -> Self {
        TrackerConfig {
            alpha: 0.0,
            reid_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::validation(
                "confidence_floor",
                format!("{} outside [0, 1]", self.confidence_floor),
            ));
        }
        if !(self.merge_distance >= 0.0 && self.merge_distance.is_finite()) {
            return Err(Error::validation(
                "merge_distance",
                format!("{} must be >= 0", self.merge_distance),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(
                "alpha",
                format!("{} must be >= 0", self.alpha),
            ));
        }
        self.reid.validate()?;
        self.classes.validate()
    }

    /// Sets the first-stage association threshold on every class, keeping
    /// the second stage at or below it.
    pub fn set_iou_thresh(&mut self, tau1: f64) {
        for c in self.classes.iter_mut() {
            c.association.tau1 = tau1;
            c.association.tau2 = c.association.tau2.min(tau1);
        }
    }
}

/// A_tj = A_c + α·speed, real-valued.
pub fn adaptive_max_age(track: &Track, class: &ObjectClass, alpha: f64) -> f64 {
    class.max_age as f64 + alpha * track.state.speed()
}

/// Drops low-confidence detections and runs per-class NMS. Output keeps
/// class order, then score order within a class.
pub fn preprocess(
    dets: &[Detection],
    classes: &ClassRegistry,
    confidence_floor: f64,
) -> Result<Vec<Detection>> {
    let mut by_class: BTreeMap<&ClassName, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        classes.get(&d.class)?;
        if d.score >= confidence_floor {
            by_class.entry(&d.class).or_default().push(d.clone());
        }
    }
    let mut out = Vec::new();
    for (class, group) in by_class {
        let thresh = classes.get(class)?.nms_iou;
        out.extend(crate::geometry::nms(&group, thresh));
    }
    Ok(out)
}

/// One agent's sighting folded into a merged detection.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub agent: AgentId,
    pub score: f64,
    pub embedding: Option<EmbeddingKey>,
}

/// Detection in the world frame after cross-agent duplicate merging.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDetection {
    pub class: ClassName,
    pub bbox: Box3D,
    pub score: f64,
    /// Highest-scoring view first.
    pub views: Vec<View>,
}

/// Score-descending grouping. A box joins the first group whose leader
/// overlaps it above `iou_thresh` or, when the group has no view from the
/// box's agent yet, sits within `distance` leader lengths.
fn merge_groups(items: &[(Box3D, View)], iou_thresh: f64, distance: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| {
        items[j]
            .1
            .score
            .total_cmp(&items[i].1.score)
            .then(i.cmp(&j))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let (b, v) = &items[i];
        let joins = |g: &Vec<usize>| {
            let lead = &items[g[0]].0;
            if iou3d(lead, b) > iou_thresh {
                return true;
            }
            let fresh = g.iter().all(|&k| items[k].1.agent != v.agent);
            fresh && (lead.x - b.x).hypot(lead.y - b.y) < distance * lead.l.max(lead.w)
        };
        match groups.iter_mut().find(|g| joins(g)) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

/// Projects every agent's detections into the world frame and merges
/// duplicates across agents with class NMS.
pub fn merge_agents(bundle: &FrameBundle, cfg: &TrackerConfig) -> Result<Vec<MergedDetection>> {
    let mut by_class: BTreeMap<ClassName, Vec<(Box3D, View)>> = BTreeMap::new();
    for (agent, dets) in &bundle.detections {
        let pose = bundle.poses.get(agent).ok_or_else(|| {
            Error::validation("poses", format!("agent {agent} has detections but no pose"))
        })?;
        for d in preprocess(dets, &cfg.classes, cfg.confidence_floor)? {
            let world = d.bbox.transformed(pose.to_world());
            by_class.entry(d.class.clone()).or_default().push((
                world,
                View {
                    agent: *agent,
                    score: d.score,
                    embedding: d.embedding,
                },
            ));
        }
    }
    let mut out = Vec::new();
    for (class, items) in by_class {
        let thresh = cfg.classes.get(&class)?.nms_iou;
        for group in merge_groups(&items, thresh, cfg.merge_distance) {
            let (top, view) = &items[group[0]];
            out.push(MergedDetection {
                class: class.clone(),
                bbox: *top,
                score: view.score,
                views: group.iter().map(|&i| items[i].1.clone()).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackEvent {
    Birth {
        track: TrackId,
        class: ClassName,
    },
    Confirm {
        track: TrackId,
    },
    Death {
        track: TrackId,
        misses: u32,
        max_age: f64,
    },
    Recovery {
        track: TrackId,
        stage: ReidStage,
        similarity: f64,
    },
    /// A detection took over a historical id instead of spawning a track.
    /// `revived` marks ids brought back from the dead.
    IdCorrection {
        track: TrackId,
        revived: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub track_id: TrackId,
    pub class: ClassName,
    #[serde(flatten)]
    pub bbox: Box3D,
    pub speed: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameOutput {
    pub frame: u64,
    pub tracks: Vec<TrackOutput>,
    pub events: Vec<TrackEvent>,
}

#[derive(Debug, Clone)]
struct DeadTrack {
    track: Track,
    death_frame: u64,
}

pub struct Tracker {
    cfg: TrackerConfig,
    provider: Arc<dyn EmbeddingProvider>,
    tracks: Vec<Track>,
    graveyard: Vec<DeadTrack>,
    lut: FeatureLut,
    ids: IdSource,
    last: Option<(u64, f64)>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, provider: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        cfg.validate()?;
        let lut = FeatureLut::new(cfg.reid.window);
        Ok(Tracker {
            cfg,
            provider,
            tracks: Vec::new(),
            graveyard: Vec::new(),
            lut,
            ids: IdSource::new(0),
            last: None,
        })
    }

    pub fn without_embeddings(cfg: TrackerConfig) -> Result<Self> {
        Tracker::new(cfg, Arc::new(NullProvider))
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Live tracks, tentative ones included, in id order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn lut(&self) -> &FeatureLut {
        &self.lut
    }

    fn class(&self, name: &ClassName) -> Result<&ObjectClass> {
        self.cfg.classes.get(name)
    }

    fn reid_on(&self, class: &ClassName) -> bool {
        self.cfg.reid_enabled && self.class(class).is_ok_and(|c| c.reid)
    }

    fn view_embeddings(&self, det: &MergedDetection) -> Vec<(AgentId, Embedding)> {
        det.views
            .iter()
            .filter_map(|v| {
                let key = v.embedding.as_ref()?;
                let e = self.provider.embedding(key)?;
                unit(e).map(|e| (v.agent, e))
            })
            .collect()
    }

    fn remember(&mut self, track: TrackId, det: &MergedDetection, frame: u64) -> Result<()> {
        if !self.reid_on(&det.class) {
            return Ok(());
        }
        for (agent, vector) in self.view_embeddings(det) {
            self.lut.insert(EmbeddingRecord {
                vector,
                agent,
                track,
                frame,
            })?;
        }
        Ok(())
    }

    fn update_track(
        &mut self,
        pos: usize,
        det: &MergedDetection,
        events: &mut Vec<TrackEvent>,
    ) -> Result<()> {
        let class = self.class(&det.class)?.clone();
        let t = &mut self.tracks[pos];
        t.state = t.state.update(&det.bbox, &class.noise)?;
        t.hits += 1;
        t.misses = 0;
        t.score = det.score;
        if !t.confirmed && t.hits >= class.min_hits {
            t.confirmed = true;
            events.push(TrackEvent::Confirm { track: t.id });
        }
        Ok(())
    }

    fn position(&self, id: TrackId) -> Option<usize> {
        self.tracks.binary_search_by_key(&id, |t| t.id).ok()
    }

    /// Hands each recovered detection to its historical track, reviving
    /// recently dead ones. Fails if two recoveries name one track.
    pub fn apply_id_correction(
        &mut self,
        recoveries: &[(usize, TrackId)],
        dets: &[MergedDetection],
        frame: u64,
        events: &mut Vec<TrackEvent>,
    ) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (_, track) in recoveries {
            if !seen.insert(*track) {
                return Err(Error::RecoveryConflict(track.0));
            }
        }
        for &(det, track) in recoveries {
            let revived = match self.position(track) {
                Some(_) => false,
                None => {
                    let g = self
                        .graveyard
                        .iter()
                        .position(|d| d.track.id == track)
                        .ok_or_else(|| {
                            Error::Invariant(format!("recovered track {track} does not exist"))
                        })?;
                    let dead = self.graveyard.remove(g);
                    let pos = self.tracks.partition_point(|t| t.id < track);
                    self.tracks.insert(pos, dead.track);
                    true
                }
            };
            let pos = self.position(track).expect("track present");
            self.update_track(pos, &dets[det], events)?;
            self.remember(track, &dets[det], frame)?;
            events.push(TrackEvent::IdCorrection { track, revived });
        }
        Ok(())
    }

    /// Advances the tracker by one frame.
    pub fn step(&mut self, bundle: &FrameBundle) -> Result<FrameOutput> {
        bundle.validate()?;
        let frame = bundle.frame;
        let dt = match self.last {
            Some((prev, _)) if frame != prev + 1 => {
                return Err(Error::OutOfOrderFrame {
                    expected: prev + 1,
                    got: frame,
                })
            }
            Some((_, ts)) => {
                let dt = bundle.timestamp - ts;
                if dt.is_nan() || dt <= 0.0 {
                    return Err(Error::NonPositiveDt(dt));
                }
                Some(dt)
            }
            None => None,
        };
        let dets = merge_agents(bundle, &self.cfg)?;
        let mut events = Vec::new();

        if let Some(dt) = dt {
            for t in &mut self.tracks {
                let noise = &self.cfg.classes.get(&t.class)?.noise;
                t.state = t.state.predict(dt, noise)?;
            }
            for d in &mut self.graveyard {
                let noise = &self.cfg.classes.get(&d.track.class)?.noise;
                d.track.state = d.track.state.predict(dt, noise)?;
            }
        }
        self.lut.prune(frame);
        let window = self.cfg.reid.window;
        self.graveyard.retain(|d| frame - d.death_frame <= window);

        let mut det_used = vec![false; dets.len()];
        let mut track_matched: BTreeMap<TrackId, bool> =
            self.tracks.iter().map(|t| (t.id, false)).collect();
        let mut matched: Vec<(TrackId, usize)> = Vec::new();

        let class_names: Vec<ClassName> = self.cfg.classes.names().cloned().collect();
        for class_name in &class_names {
            let class = self.class(class_name)?;
            let tracks: Vec<TrackBox> = self
                .tracks
                .iter()
                .filter(|t| &t.class == class_name)
                .map(|t| TrackBox {
                    id: t.id,
                    bbox: t.state.to_box(),
                    lost: t.misses > 0,
                })
                .collect();
            let cdets: Vec<DetBox> = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| &d.class == class_name)
                .map(|(i, d)| DetBox {
                    index: i,
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect();
            if tracks.is_empty() || cdets.is_empty() {
                continue;
            }
            let result = associate_two_stage(&tracks, &cdets, class.matcher, &class.association);
            for m in result.matches {
                matched.push((m.track, m.det));
                det_used[m.det] = true;
                track_matched.insert(m.track, true);
            }
        }

        for &(track, det) in &matched {
            let pos = self.position(track).expect("matched track is live");
            self.update_track(pos, &dets[det], &mut events)?;
            self.remember(track, &dets[det], frame)?;
        }

        // Appearance recovery for what geometry left over.
        let queries: Vec<ReidQuery> = dets
            .iter()
            .enumerate()
            .filter(|(i, d)| !det_used[*i] && self.reid_on(&d.class))
            .filter_map(|(i, d)| {
                let embeddings: Vec<Embedding> = self
                    .view_embeddings(d)
                    .into_iter()
                    .map(|(_, e)| e)
                    .collect();
                (!embeddings.is_empty()).then(|| ReidQuery {
                    det: i,
                    class: d.class.clone(),
                    embeddings,
                })
            })
            .collect();
        if !queries.is_empty() {
            let mut candidates: Vec<ReidCandidate> = self
                .tracks
                .iter()
                .filter(|t| t.confirmed && !track_matched[&t.id] && self.reid_on(&t.class))
                .map(|t| ReidCandidate {
                    track: t.id,
                    class: t.class.clone(),
                })
                .collect();
            candidates.extend(self.graveyard.iter().map(|d| ReidCandidate {
                track: d.track.id,
                class: d.track.class.clone(),
            }));
            let recoveries = reid_match(
                &queries,
                &candidates,
                &self.lut,
                self.cfg.ego,
                frame,
                &self.cfg.reid,
            )?;
            let mut pairs = Vec::with_capacity(recoveries.len());
            for r in &recoveries {
                events.push(TrackEvent::Recovery {
                    track: r.track,
                    stage: r.stage,
                    similarity: r.similarity,
                });
                det_used[r.det] = true;
                track_matched.insert(r.track, true);
                pairs.push((r.det, r.track));
            }
            self.apply_id_correction(&pairs, &dets, frame, &mut events)?;
        }

        // Misses and deaths for live tracks that found nothing.
        let mut survivors = Vec::with_capacity(self.tracks.len());
        for mut t in std::mem::take(&mut self.tracks) {
            if track_matched.get(&t.id).copied().unwrap_or(false) {
                survivors.push(t);
                continue;
            }
            t.misses += 1;
            let class = self.cfg.classes.get(&t.class)?;
            let max_age = adaptive_max_age(&t, class, self.cfg.alpha);
            if t.misses as f64 > max_age {
                events.push(TrackEvent::Death {
                    track: t.id,
                    misses: t.misses,
                    max_age,
                });
                // Tentative tracks are mostly clutter or duplicates; only
                // confirmed identities are worth recovering.
                if self.cfg.reid_enabled && class.reid && t.confirmed {
                    self.graveyard.push(DeadTrack {
                        track: t,
                        death_frame: frame,
                    });
                }
            } else {
                survivors.push(t);
            }
        }
        self.tracks = survivors;

        // Births.
        for (i, d) in dets.iter().enumerate() {
            if det_used[i] {
                continue;
            }
            let class = self.class(&d.class)?.clone();
            let id = self.ids.issue();
            let state = KalmanState::from_box(class.motion_model, &d.bbox, &class.noise);
            self.tracks.push(Track {
                id,
                class: d.class.clone(),
                state,
                hits: 1,
                misses: 0,
                birth_frame: frame,
                confirmed: class.min_hits <= 1,
                score: d.score,
            });
            events.push(TrackEvent::Birth {
                track: id,
                class: d.class.clone(),
            });
            if class.min_hits <= 1 {
                events.push(TrackEvent::Confirm { track: id });
            }
            self.remember(id, d, frame)?;
        }

        self.last = Some((frame, bundle.timestamp));
        let tracks = self
            .tracks
            .iter()
            .filter(|t| t.confirmed && t.misses == 0)
            .map(|t| TrackOutput {
                track_id: t.id,
                class: t.class.clone(),
                bbox: t.state.to_box(),
                speed: t.state.speed(),
                score: t.score,
            })
            .collect();
        Ok(FrameOutput {
            frame,
            tracks,
            events,
        })
    }

    /// Runs every bundle in order.
    pub fn run(&mut self, bundles: &[FrameBundle]) -> Result<Vec<FrameOutput>> {
        bundles.iter().map(|b| self.step(b)).collect()
    }
}

/// Accepts unit vectors as-is and rescales anything else that is finite and
/// nonzero.
fn unit(e: Embedding) -> Option<Embedding> {
    let n = l2_norm(&e);
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    if (n - 1.0).abs() <= 1e-6 {
        return Some(e);
    }
    Some(e.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentPose, MotionModelKind};
    use crate::reid::EmbeddingStore;

    fn det(frame: u64, class: &str, x: f64, y: f64, score: f64) -> Detection {
        Detection {
            frame,
            agent: AgentId(0),
            class: ClassName::from(class),
            bbox: Box3D::new(x, y, 0.0, 2.0, 4.5, 1.6, 0.0),
            score,
            embedding: None,
        }
    }

    fn bundle(frame: u64, dets: Vec<Detection>) -> FrameBundle {
        let mut b = FrameBundle {
            frame,
            timestamp: frame as f64 * 0.1,
            ..Default::default()
        };
        b.poses
            .insert(AgentId(0), AgentPose::planar(0.0, 0.0, 0.0, 0.0));
        b.detections.insert(AgentId(0), dets);
        b
    }

    fn ids(out: &FrameOutput) -> Vec<u64> {
        out.tracks.iter().map(|t| t.track_id.0).collect()
    }

    #[test]
    fn preprocess_examples() {
        let reg = ClassRegistry::default();
        assert!(preprocess(&[det(0, "Vehicle", 0.0, 0.0, 0.05)], &reg, 0.1)
            .unwrap()
            .is_empty());
        let mut a = det(0, "Vehicle", 0.0, 0.0, 0.9);
        let b = Detection {
            score: 0.8,
            bbox: Box3D::new(0.1, 0.0, 0.0, 2.0, 4.5, 1.6, 0.0),
            ..a.clone()
        };
        let out = preprocess(&[b, a.clone()], &reg, 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert!(preprocess(&[], &reg, 0.1).unwrap().is_empty());
        a.class = ClassName::from("Bicycle");
        assert!(matches!(
            preprocess(&[a], &reg, 0.1),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn adaptive_age_examples() {
        let class = ClassRegistry::default()
            .class_config("Vehicle")
            .unwrap()
            .clone();
        let mut state = KalmanState::from_box(
            MotionModelKind::Cv,
            &Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
            &class.noise,
        );
        state.mean[7] = 3.0;
        state.mean[8] = 4.0;
        let t = Track {
            id: TrackId(0),
            class: class.name.clone(),
            state,
            hits: 1,
            misses: 0,
            birth_frame: 0,
            confirmed: false,
            score: 1.0,
        };
        assert_eq!(adaptive_max_age(&t, &class, 1.0), 8.0);
        assert_eq!(adaptive_max_age(&t, &class, 0.0), 3.0);
    }

    #[test]
    fn steady_object_keeps_one_id() {
        let mut tr = Tracker::without_embeddings(TrackerConfig::default()).unwrap();
        let mut seen = Vec::new();
        for f in 0..10 {
            let out = tr
                .step(&bundle(f, vec![det(f, "Vehicle", f as f64, 0.0, 0.9)]))
                .unwrap();
            seen.extend(ids(&out));
        }
        assert_eq!(seen.len(), 8); // confirmed on the third hit
        assert!(seen.iter().all(|&i| i == 0));
    }

    #[test]
    fn short_gap_resumes_same_id() {
        let mut tr = Tracker::without_embeddings(TrackerConfig::baseline()).unwrap();
        let mut last = Vec::new();
        for f in 0..10 {
            let dets = if (5..=7).contains(&f) {
                vec![]
            } else {
                vec![det(f, "Vehicle", 0.0, 0.0, 0.9)]
            };
            last = ids(&tr.step(&bundle(f, dets)).unwrap());
            if (5..=7).contains(&f) {
                assert!(last.is_empty());
            }
        }
        assert_eq!(last, vec![0]);
    }

    fn fast_gap(alpha: f64) -> (Vec<u64>, Vec<TrackEvent>) {
        let cfg = TrackerConfig {
            alpha,
            reid_enabled: false,
            ..Default::default()
        };
        let mut tr = Tracker::without_embeddings(cfg).unwrap();
        let mut ids_seen = Vec::new();
        let mut events = Vec::new();
        for f in 0..30 {
            let x = f as f64; // 10 m/s at 10 Hz
            let dets = if (10..20).contains(&f) {
                vec![]
            } else {
                vec![det(f, "Vehicle", x, 0.0, 0.9)]
            };
            let out = tr.step(&bundle(f, dets)).unwrap();
            ids_seen.extend(ids(&out));
            events.extend(out.events);
        }
        ids_seen.dedup();
        (ids_seen, events)
    }

    #[test]
    fn fast_object_survives_gap_with_velocity_scaling() {
        let (ids_on, ev_on) = fast_gap(1.0);
        assert_eq!(ids_on, vec![0]);
        assert!(!ev_on.iter().any(|e| matches!(e, TrackEvent::Death { .. })));

        let (ids_off, ev_off) = fast_gap(0.0);
        assert_eq!(ids_off, vec![0, 1]);
        let deaths = ev_off
            .iter()
            .filter(|e| matches!(e, TrackEvent::Death { .. }))
            .count();
        let births = ev_off
            .iter()
            .filter(|e| matches!(e, TrackEvent::Birth { .. }))
            .count();
        assert_eq!((births, deaths), (2, 1));
    }

    #[test]
    fn rejects_out_of_order_frames() {
        let mut tr = Tracker::without_embeddings(TrackerConfig::default()).unwrap();
        tr.step(&bundle(0, vec![])).unwrap();
        assert!(matches!(
            tr.step(&bundle(2, vec![])),
            Err(Error::OutOfOrderFrame {
                expected: 1,
                got: 2
            })
        ));
    }

    fn ped_det(frame: u64, x: f64, key: Option<EmbeddingKey>) -> Detection {
        Detection {
            frame,
            agent: AgentId(0),
            class: ClassName::from("Pedestrian"),
            bbox: Box3D::new(x, 0.0, 0.0, 0.6, 0.6, 1.7, 0.0),
            score: 0.9,
            embedding: key,
        }
    }

    fn key(frame: u64) -> EmbeddingKey {
        EmbeddingKey {
            frame,
            agent: AgentId(0),
            index: 0,
        }
    }

    /// Pedestrian seen on frames 0-4, unseen, then reappearing 3 m away on
    /// frame `back`, where geometry cannot match it.
    fn jump_run(reid: bool, back: u64) -> (Vec<Vec<u64>>, Vec<TrackEvent>) {
        let mut store = EmbeddingStore::new(3);
        for f in 0..=back {
            store.insert(key(f), vec![0.0, 1.0, 0.0]).unwrap();
        }
        let cfg = TrackerConfig {
            alpha: 0.0,
            reid_enabled: reid,
            ..Default::default()
        };
        let mut tr = Tracker::new(cfg, Arc::new(store)).unwrap();
        let mut out_ids = Vec::new();
        let mut events = Vec::new();
        for f in 0..=back {
            let dets = match f {
                0..=4 => vec![ped_det(f, 0.0, Some(key(f)))],
                f if f == back => vec![ped_det(f, 3.0, Some(key(f)))],
                _ => vec![],
            };
            let out = tr.step(&bundle(f, dets)).unwrap();
            out_ids.push(ids(&out));
            events.extend(out.events);
        }
        (out_ids, events)
    }

    #[test]
    fn recovery_keeps_the_historical_id() {
        // Misses reach 2 = A_tj - 1 on frame 6; the recovery on frame 7
        // prevents the death that frame would otherwise bring.
        let (ids_on, ev) = jump_run(true, 7);
        assert_eq!(ids_on[7], vec![0]);
        assert!(ev.iter().any(|e| matches!(
            e,
            TrackEvent::IdCorrection {
                track: TrackId(0),
                revived: false
            }
        )));
        let (ids_off, _) = jump_run(false, 7);
        assert!(ids_off[7].is_empty()); // fresh tentative track
    }

    #[test]
    fn recovery_revives_a_dead_track() {
        let (ids_on, ev) = jump_run(true, 10);
        assert_eq!(ids_on[10], vec![0]);
        assert!(ev.iter().any(|e| matches!(
            e,
            TrackEvent::Death {
                track: TrackId(0),
                ..
            }
        )));
        assert!(ev.iter().any(|e| matches!(
            e,
            TrackEvent::IdCorrection {
                track: TrackId(0),
                revived: true
            }
        )));
    }

    #[test]
    fn conflicting_recoveries_are_rejected() {
        let mut tr = Tracker::without_embeddings(TrackerConfig::default()).unwrap();
        tr.step(&bundle(0, vec![ped_det(0, 0.0, None)])).unwrap();
        let d = MergedDetection {
            class: ClassName::from("Pedestrian"),
            bbox: Box3D::new(0.0, 0.0, 0.0, 0.6, 0.6, 1.7, 0.0),
            score: 0.9,
            views: vec![],
        };
        let mut ev = Vec::new();
        let r = tr.apply_id_correction(
            &[(0, TrackId(0)), (1, TrackId(0))],
            &[d.clone(), d],
            1,
            &mut ev,
        );
        assert!(matches!(r, Err(Error::RecoveryConflict(0))));
        let before = tr.tracks().len();
        tr.apply_id_correction(&[], &[], 1, &mut ev).unwrap();
        assert_eq!(tr.tracks().len(), before);
        assert!(ev.is_empty());
    }

    #[test]
    fn agents_are_merged_in_world_frame() {
        let mut b = bundle(0, vec![det(0, "Vehicle", 10.0, 0.0, 0.9)]);
        // Peer at x = 20 facing backwards sees the same car 10 m ahead.
        b.poses.insert(
            AgentId(1),
            AgentPose::planar(20.0, 0.0, 0.0, std::f64::consts::PI),
        );
        let mut peer = det(0, "Vehicle", 10.0, 0.0, 0.7);
        peer.agent = AgentId(1);
        b.detections.insert(AgentId(1), vec![peer]);
        let merged = merge_agents(&b, &TrackerConfig::default()).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].views.len(), 2);
        assert_eq!(merged[0].views[0].agent, AgentId(0));
    }

    #[test]
    fn nearby_pedestrians_from_two_agents_merge() {
        let mut b = bundle(0, vec![ped_det(0, 10.0, None)]);
        b.poses
            .insert(AgentId(1), AgentPose::planar(0.0, 0.0, 0.0, 0.0));
        // 0.55 m apart: IoU 0.04, below the NMS threshold.
        let mut peer = ped_det(0, 10.55, None);
        peer.agent = AgentId(1);
        peer.score = 0.8;
        b.detections.insert(AgentId(1), vec![peer]);
        assert_eq!(
            merge_agents(&b, &TrackerConfig::default()).unwrap().len(),
            1
        );

        // The same pair seen by one agent stays two people.
        let mut own = ped_det(0, 10.55, None);
        own.score = 0.8;
        let b = bundle(0, vec![ped_det(0, 10.0, None), own]);
        assert_eq!(
            merge_agents(&b, &TrackerConfig::default()).unwrap().len(),
            2
        );
    }
}
