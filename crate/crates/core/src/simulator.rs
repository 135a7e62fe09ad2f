//! Deterministic multi-agent scenario generator: ground truth, noisy
//! per-agent detections with misses, clutter and occlusion, camera rigs and
//! synthetic appearance embeddings.
//!
//! Every random draw comes from a generator keyed by
//! (seed, frame, object, agent, purpose), so adding an agent or an object
//! never perturbs the other streams.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{crop_box_for, CropParams};
use crate::model::{
    wrap_angle, AgentId, AgentPose, Box3D, CameraModel, ClassName, Detection, EmbeddingKey,
    FrameBundle, GtObject,
};
use crate::motion::{cyra_transition, StateVec};
use crate::reid::{normalize, EmbeddingStore};
use crate::{Error, Result};

const PURPOSE_LATENT: u64 = 1;
const PURPOSE_DETECT: u64 = 2;
const PURPOSE_BOX: u64 = 3;
const PURPOSE_SCORE: u64 = 4;
const PURPOSE_EMBED: u64 = 5;
const PURPOSE_CLUTTER: u64 = 6;
const PURPOSE_TURN: u64 = 7;
const PURPOSE_POPULATION: u64 = 8;

/// Counter-style generator for one (seed, frame, object, agent, purpose) key.
pub fn keyed_rng(seed: u64, frame: u64, object: u32, agent: u32, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&frame.to_le_bytes());
    key[16..20].copy_from_slice(&object.to_le_bytes());
    key[20..24].copy_from_slice(&agent.to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Upper speed bound per class, m/s.
pub fn max_speed(class: &ClassName) -> f64 {
    match class.as_str() {
        "Pedestrian" => 3.0,
        "Truck" => 25.0,
        _ => 30.0,
    }
}

/// Default (w, l, h) per class, meters.
pub fn default_size(class: &ClassName) -> [f64; 3] {
    match class.as_str() {
        "Pedestrian" => [0.6, 0.6, 1.75],
        "Truck" => [2.6, 10.0, 3.5],
        _ => [1.9, 4.5, 1.6],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSpec {
    /// (x, y, yaw) at frame 0.
    pub start: [f64; 3],
    /// Forward speed, m/s.
    pub speed: f64,
    /// Sensor range, meters.
    pub range: f64,
    pub cameras: u32,
    pub focal: f64,
    pub image_size: [u32; 2],
    pub mount_height: f64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec {
            start: [0.0, 0.0, 0.0],
            speed: 0.0,
            range: 100.0,
            cameras: 4,
            focal: 640.0,
            image_size: [1280, 720],
            mount_height: 1.7,
        }
    }
}

/// Motion change applied from `frame` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub frame: u64,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub accel: f64,
    #[serde(default)]
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: ClassName,
    /// (w, l, h); class default when absent.
    #[serde(default)]
    pub size: Option<[f64; 3]>,
    /// (x, y, yaw) at the first frame.
    pub start: [f64; 3],
    #[serde(default)]
    pub speed: f64,
    #[serde(default)]
    pub accel: f64,
    #[serde(default)]
    pub yaw_rate: f64,
    #[serde(default)]
    pub segments: Vec<Segment>,
    /// Occasional random yaw-rate changes.
    #[serde(default)]
    pub random_turns: bool,
    /// Inclusive frame ranges during which no agent detects the object.
    #[serde(default)]
    pub dropouts: Vec<[u64; 2]>,
}

/// Randomly placed objects of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub class: ClassName,
    pub count: u32,
    /// (x_min, y_min, x_max, y_max) of the start positions.
    pub region: [f64; 4],
    /// Speed range, m/s.
    pub speed: [f64; 2],
    #[serde(default)]
    pub random_turns: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Detection probability of a visible object at zero distance.
    pub detect_base: f64,
    /// Exponential decay of detection probability per meter.
    pub distance_decay: f64,
    /// Fraction of detection probability lost when occluded.
    pub occlusion_penalty: f64,
    pub pos_sigma: f64,
    pub size_sigma: f64,
    pub yaw_sigma: f64,
    /// Expected false positives per agent per frame.
    pub clutter_rate: f64,
    /// Total norm of the appearance noise added to an object's latent.
    pub embedding_sigma: f64,
    /// Score = base + gain·IoU(noisy, true) + N(0, score_sigma), clamped.
    pub score_base: f64,
    pub score_gain: f64,
    pub score_sigma: f64,
    /// Uniform score range of clutter.
    pub clutter_score: [f64; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            detect_base: 0.95,
            distance_decay: 0.003,
            occlusion_penalty: 0.9,
            pos_sigma: 0.15,
            size_sigma: 0.05,
            yaw_sigma: 0.03,
            clutter_rate: 0.2,
            embedding_sigma: 0.1,
            score_base: 0.35,
            score_gain: 0.6,
            score_sigma: 0.05,
            clutter_score: [0.1, 0.55],
        }
    }
}

impl NoiseSpec {
    /// Perfect sensing: every in-range object detected exactly.
    pub fn noiseless() -> Self {
        NoiseSpec {
            detect_base: 1.0,
            distance_decay: 0.0,
            occlusion_penalty: 0.0,
            pos_sigma: 0.0,
            size_sigma: 0.0,
            yaw_sigma: 0.0,
            clutter_rate: 0.0,
            embedding_sigma: 0.0,
            score_sigma: 0.0,
            ..NoiseSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("detect_base", self.detect_base),
            ("occlusion_penalty", self.occlusion_penalty),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(
                    field,
                    format!("{v} is not a probability"),
                ));
            }
        }
        for (field, v) in [
            ("distance_decay", self.distance_decay),
            ("pos_sigma", self.pos_sigma),
            ("size_sigma", self.size_sigma),
            ("yaw_sigma", self.yaw_sigma),
            ("clutter_rate", self.clutter_rate),
            ("embedding_sigma", self.embedding_sigma),
            ("score_sigma", self.score_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(field, format!("{v} must be >= 0")));
            }
        }
        let [lo, hi] = self.clutter_score;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(
                "clutter_score",
                "need 0 <= lo <= hi <= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub frames: u64,
    pub dt: f64,
    /// (x_min, y_min, x_max, y_max)
    pub bounds: [f64; 4],
    pub agents: Vec<AgentSpec>,
    pub objects: Vec<ObjectSpec>,
    pub populations: Vec<PopulationSpec>,
    pub noise: NoiseSpec,
    pub embedding_dim: usize,
    pub crop: CropParams,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "custom".into(),
            seed: 0,
            frames: 100,
            dt: 0.1,
            bounds: [-100.0, -100.0, 100.0, 100.0],
            agents: vec![AgentSpec::default()],
            objects: Vec::new(),
            populations: Vec::new(),
            noise: NoiseSpec::default(),
            embedding_dim: 64,
            crop: CropParams::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::validation("frames", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation(
                "dt",
                format!("{} must be positive", self.dt),
            ));
        }
        if self.agents.is_empty() {
            return Err(Error::validation("agents", "need at least one agent"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::validation("embedding_dim", "must be positive"));
        }
        let [x0, y0, x1, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::validation("bounds", "min must be below max"));
        }
        for a in &self.agents {
            if a.range.is_nan()
                || a.range <= 0.0
                || a.cameras == 0
                || a.focal.is_nan()
                || a.focal <= 0.0
            {
                return Err(Error::validation(
                    "agents",
                    "range, cameras and focal must be positive",
                ));
            }
        }
        for p in &self.populations {
            let [lo, hi] = p.speed;
            if !(0.0 <= lo && lo <= hi) {
                return Err(Error::validation("populations.speed", "need 0 <= lo <= hi"));
            }
        }
        for o in &self.objects {
            if let Some(s) = o.size {
                if s.iter().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(Error::validation(
                        "objects.size",
                        "dimensions must be positive",
                    ));
                }
            }
        }
        self.noise.validate()?;
        for f in 0..self.frames {
            for a in 0..self.agents.len() {
                let p = self.agent_pose(a, f).position();
                if p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
                    return Err(Error::validation(
                        "bounds",
                        format!("agent {a} leaves the world bounds at frame {f}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn agent_pose(&self, agent: usize, frame: u64) -> AgentPose {
        let a = &self.agents[agent];
        let t = frame as f64 * self.dt;
        let [x, y, yaw] = a.start;
        AgentPose::planar(
            x + a.speed * t * yaw.cos(),
            y + a.speed * t * yaw.sin(),
            0.0,
            yaw,
        )
    }

    pub fn cameras(&self, agent: usize) -> Vec<CameraModel> {
        let a = &self.agents[agent];
        (0..a.cameras)
            .map(|i| {
                CameraModel::looking(
                    AgentId(agent as u32),
                    i,
                    2.0 * PI * i as f64 / a.cameras as f64,
                    Vector3::new(0.0, 0.0, a.mount_height),
                    a.focal,
                    a.image_size[0],
                    a.image_size[1],
                )
            })
            .collect()
    }

    /// Scripted objects followed by sampled population members.
    pub fn object_specs(&self) -> Vec<ObjectSpec> {
        let mut out = self.objects.clone();
        for (pi, p) in self.populations.iter().enumerate() {
            for k in 0..p.count {
                let mut rng = keyed_rng(self.seed, 0, k, pi as u32, PURPOSE_POPULATION);
                let [x0, y0, x1, y1] = p.region;
                let x = x0 + (x1 - x0) * rng.random::<f64>();
                let y = y0 + (y1 - y0) * rng.random::<f64>();
                let yaw = wrap_angle(rng.random_range(-PI..PI));
                let [lo, hi] = p.speed;
                let speed = lo + (hi - lo) * rng.random::<f64>();
                out.push(ObjectSpec {
                    class: p.class.clone(),
                    size: None,
                    start: [x, y, yaw],
                    speed,
                    accel: 0.0,
                    yaw_rate: 0.0,
                    segments: Vec::new(),
                    random_turns: p.random_turns,
                    dropouts: Vec::new(),
                })
            }
        }
        out
    }
}

/// One crop for the embedding sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropRecord {
    pub image: String,
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub key: EmbeddingKey,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub scenario: Scenario,
    pub bundles: Vec<FrameBundle>,
    pub embeddings: EmbeddingStore,
    pub crops: Vec<CropRecord>,
    /// Per frame and agent, the object id behind each detection (None for
    /// clutter).
    pub provenance: Vec<BTreeMap<AgentId, Vec<Option<u64>>>>,
}

#[derive(Debug, Clone, Copy)]
struct Kinematics {
    x: f64,
    y: f64,
    yaw: f64,
    v: f64,
    a: f64,
    w: f64,
}

fn integrate(spec: &ObjectSpec, id: u32, scn: &Scenario) -> Vec<Kinematics> {
    let vmax = max_speed(&spec.class);
    let mut k = Kinematics {
        x: spec.start[0],
        y: spec.start[1],
        yaw: wrap_angle(spec.start[2]),
        v: spec.speed.clamp(0.0, vmax),
        a: spec.accel,
        w: spec.yaw_rate,
    };
    let mut out = Vec::with_capacity(scn.frames as usize);
    for f in 0..scn.frames {
        for s in spec.segments.iter().filter(|s| s.frame == f) {
            if let Some(v) = s.speed {
                k.v = v.clamp(0.0, vmax);
            }
            k.a = s.accel;
            k.w = s.yaw_rate;
        }
        if spec.random_turns {
            let mut rng = keyed_rng(scn.seed, f, id, 0, PURPOSE_TURN);
            if rng.random::<f64>() < 0.05 {
                k.w = rng.random_range(-0.6..0.6);
            }
        }
        out.push(k);
        let mut x = StateVec::zeros();
        x[0] = k.x;
        x[1] = k.y;
        x[3] = k.yaw;
        x[7] = k.v;
        x[8] = k.a;
        x[9] = k.w;
        let (n, _) = cyra_transition(&x, scn.dt);
        k.x = n[0];
        k.y = n[1];
        k.yaw = wrap_angle(n[3]);
        k.v = n[7];
        if k.v < 0.0 || k.v > vmax {
            k.v = k.v.clamp(0.0, vmax);
            k.a = 0.0;
        }
    }
    out
}

fn to_box(k: &Kinematics, size: [f64; 3]) -> Box3D {
    let [w, l, h] = size;
    Box3D::new(k.x, k.y, h / 2.0, w, l, h, k.yaw)
}

fn segments_cross(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let orient = |o: [f64; 2], s: [f64; 2], t: [f64; 2]| {
        (s[0] - o[0]) * (t[1] - o[1]) - (s[1] - o[1]) * (t[0] - o[0])
    };
    let d1 = orient(a, b, p);
    let d2 = orient(a, b, q);
    let d3 = orient(p, q, a);
    let d4 = orient(p, q, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Whether the sight line from `from` to `to` passes through `footprint`.
pub fn ray_blocked(from: [f64; 2], to: [f64; 2], footprint: &[[f64; 2]; 4]) -> bool {
    let inside = |p: [f64; 2]| {
        (0..4).all(|i| {
            let (a, b) = (footprint[i], footprint[(i + 1) % 4]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    };
    if inside(from) || inside(to) {
        return true;
    }
    (0..4).any(|i| segments_cross(from, to, footprint[i], footprint[(i + 1) % 4]))
}

fn observed_embedding(latent: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let per = sigma / (latent.len() as f64).sqrt();
    let v: Vec<f64> = latent
        .iter()
        .map(|&x| x + per * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&v)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma)
            .expect("sigma validated")
            .sample(rng)
    }
}

struct AgentFrame {
    detections: Vec<Detection>,
    provenance: Vec<Option<u64>>,
    embeddings: Vec<(EmbeddingKey, Vec<f32>)>,
    crops: Vec<CropRecord>,
}

/// Best crop across an agent's cameras (largest area).
fn best_crop(
    bbox: &Box3D,
    pose: &AgentPose,
    cams: &[CameraModel],
    params: &CropParams,
) -> Option<crate::geometry::Bbox2D> {
    cams.iter()
        .filter_map(|c| crop_box_for(bbox, pose, c, params))
        .max_by(|a, b| a.area().total_cmp(&b.area()))
}

/// One frame's bundle, provenance, embeddings and crops.
type FrameSim = (
    FrameBundle,
    BTreeMap<AgentId, Vec<Option<u64>>>,
    Vec<(EmbeddingKey, Vec<f32>)>,
    Vec<CropRecord>,
);

/// Runs the scenario.
pub fn generate(scn: &Scenario) -> Result<SimOutput> {
    scn.validate()?;
    let specs = scn.object_specs();
    let sizes: Vec<[f64; 3]> = specs
        .iter()
        .map(|s| s.size.unwrap_or_else(|| default_size(&s.class)))
        .collect();
    let tracks: Vec<Vec<Kinematics>> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| integrate(s, i as u32, scn))
        .collect();
    let latents: Vec<Vec<f64>> = (0..specs.len())
        .map(|i| {
            let mut rng = keyed_rng(scn.seed, 0, i as u32, 0, PURPOSE_LATENT);
            random_unit(scn.embedding_dim, &mut rng)
        })
        .collect();
    let mut classes: Vec<ClassName> = specs.iter().map(|s| s.class.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        classes.push(ClassName::from("Vehicle"));
    }
    let cameras: Vec<Vec<CameraModel>> = (0..scn.agents.len()).map(|a| scn.cameras(a)).collect();

    let frames: Vec<FrameSim> = (0..scn.frames)
        .into_par_iter()
        .map(|f| {
            let boxes: Vec<Box3D> = tracks
                .iter()
                .zip(&sizes)
                .map(|(t, &s)| to_box(&t[f as usize], s))
                .collect();
            let poses: Vec<AgentPose> = (0..scn.agents.len())
                .map(|a| scn.agent_pose(a, f))
                .collect();

            let gt: Vec<GtObject> = boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    poses.iter().zip(&scn.agents).any(|(p, a)| {
                        let c = p.position();
                        (b.x - c.x).hypot(b.y - c.y) <= a.range
                    })
                })
                .map(|(i, b)| GtObject {
                    id: i as u64,
                    class: specs[i].class.clone(),
                    bbox: *b,
                })
                .collect();

            let mut bundle = FrameBundle {
                frame: f,
                timestamp: f as f64 * scn.dt,
                ground_truth: Some(gt),
                ..Default::default()
            };
            let mut prov = BTreeMap::new();
            let mut embs = Vec::new();
            let mut crops = Vec::new();
            for (ai, pose) in poses.iter().enumerate() {
                let agent = AgentId(ai as u32);
                let af = agent_frame(
                    scn,
                    f,
                    ai,
                    pose,
                    &cameras[ai],
                    &specs,
                    &boxes,
                    &latents,
                    &classes,
                );
                bundle.poses.insert(agent, *pose);
                bundle.cameras.insert(agent, cameras[ai].clone());
                bundle.detections.insert(agent, af.detections);
                prov.insert(agent, af.provenance);
                embs.extend(af.embeddings);
                crops.extend(af.crops);
            }
            (bundle, prov, embs, crops)
        })
        .collect();

    let mut out = SimOutput {
        scenario: scn.clone(),
        bundles: Vec::with_capacity(frames.len()),
        embeddings: EmbeddingStore::new(scn.embedding_dim),
        crops: Vec::new(),
        provenance: Vec::with_capacity(frames.len()),
    };
    for (bundle, prov, embs, crops) in frames {
        for (k, v) in embs {
            out.embeddings.insert(k, v)?;
        }
        out.crops.extend(crops);
        out.bundles.push(bundle);
        out.provenance.push(prov);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn agent_frame(
    scn: &Scenario,
    f: u64,
    ai: usize,
    pose: &AgentPose,
    cams: &[CameraModel],
    specs: &[ObjectSpec],
    boxes: &[Box3D],
    latents: &[Vec<f64>],
    classes: &[ClassName],
) -> AgentFrame {
    let noise = &scn.noise;
    let spec = &scn.agents[ai];
    let agent = AgentId(ai as u32);
    let origin = pose.position();
    let eye = [origin.x, origin.y];
    let to_agent = pose.to_agent();
    let mut out = AgentFrame {
        detections: Vec::new(),
        provenance: Vec::new(),
        embeddings: Vec::new(),
        crops: Vec::new(),
    };
    let footprints: Vec<[[f64; 2]; 4]> = boxes.iter().map(|b| b.footprint()).collect();

    let push = |out: &mut AgentFrame,
                world: Box3D,
                class: ClassName,
                score: f64,
                emb: Option<Vec<f32>>,
                src: Option<u64>| {
        let index = out.detections.len() as u32;
        let key = EmbeddingKey {
            frame: f,
            agent,
            index,
        };
        let crop = emb
            .as_ref()
            .and_then(|_| best_crop(&world, pose, cams, &scn.crop));
        let embedding = match (emb, crop) {
            (Some(v), Some(c)) => {
                out.embeddings.push((key, v));
                out.crops.push(CropRecord {
                    image: format!("agent{}/cam{}/{:06}.png", agent.0, c.camera, f),
                    u_min: c.u_min,
                    v_min: c.v_min,
                    u_max: c.u_max,
                    v_max: c.v_max,
                    key,
                });
                Some(key)
            }
            _ => None,
        };
        out.detections.push(Detection {
            frame: f,
            agent,
            class,
            bbox: world.transformed(&to_agent),
            score,
            embedding,
        });
        out.provenance.push(src);
    };

    for (i, b) in boxes.iter().enumerate() {
        let oid = i as u32;
        let dist = (b.x - eye[0]).hypot(b.y - eye[1]);
        if dist > spec.range {
            continue;
        }
        if specs[i]
            .dropouts
            .iter()
            .any(|&[lo, hi]| (lo..=hi).contains(&f))
        {
            continue;
        }
        let occluded = footprints
            .iter()
            .enumerate()
            .any(|(j, fp)| j != i && ray_blocked(eye, [b.x, b.y], fp));
        let mut p = noise.detect_base * (-noise.distance_decay * dist).exp();
        if occluded {
            p *= 1.0 - noise.occlusion_penalty;
        }
        let mut rng = keyed_rng(scn.seed, f, oid, agent.0, PURPOSE_DETECT);
        if rng.random::<f64>() >= p {
            continue;
        }
        let mut rng = keyed_rng(scn.seed, f, oid, agent.0, PURPOSE_BOX);
        let noisy = Box3D::new(
            b.x + gauss(&mut rng, noise.pos_sigma),
            b.y + gauss(&mut rng, noise.pos_sigma),
            b.z + gauss(&mut rng, noise.pos_sigma / 2.0),
            (b.w + gauss(&mut rng, noise.size_sigma)).max(0.1),
            (b.l + gauss(&mut rng, noise.size_sigma)).max(0.1),
            (b.h + gauss(&mut rng, noise.size_sigma)).max(0.1),
            wrap_angle(b.yaw + gauss(&mut rng, noise.yaw_sigma)),
        );
        let mut rng = keyed_rng(scn.seed, f, oid, agent.0, PURPOSE_SCORE);
        let overlap = crate::geometry::iou3d(&noisy, b);
        let score =
            (noise.score_base + noise.score_gain * overlap + gauss(&mut rng, noise.score_sigma))
                .clamp(0.01, 1.0);
        let mut rng = keyed_rng(scn.seed, f, oid, agent.0, PURPOSE_EMBED);
        let emb = observed_embedding(&latents[i], noise.embedding_sigma, &mut rng);
        push(
            &mut out,
            noisy,
            specs[i].class.clone(),
            score,
            Some(emb),
            Some(i as u64),
        );
    }

    if noise.clutter_rate > 0.0 {
        let mut rng = keyed_rng(scn.seed, f, u32::MAX, agent.0, PURPOSE_CLUTTER);
        let n = Poisson::new(noise.clutter_rate)
            .expect("rate validated")
            .sample(&mut rng) as u64;
        let radius = spec.range.min(50.0);
        let [x0, y0, x1, y1] = scn.bounds;
        for _ in 0..n {
            let r = radius * rng.random::<f64>().sqrt();
            let th = rng.random_range(-PI..PI);
            let x = (eye[0] + r * th.cos()).clamp(x0, x1);
            let y = (eye[1] + r * th.sin()).clamp(y0, y1);
            let class = classes[rng.random_range(0..classes.len())].clone();
            let [w, l, h] = default_size(&class);
            let yaw = rng.random_range(-PI..PI);
            let [lo, hi] = noise.clutter_score;
            let score = lo + (hi - lo) * rng.random::<f64>();
            let emb = normalize(&random_unit(scn.embedding_dim, &mut rng));
            let bbox = Box3D::new(x, y, h / 2.0, w, l, h, wrap_angle(yaw));
            push(&mut out, bbox, class, score, Some(emb), None);
        }
    }
    out
}

pub const CANNED: [&str; 5] = [
    "occlusion_crossing",
    "fast_vehicle_gap",
    "multi_agent_handoff",
    "crowd",
    "mixed_classes",
];

fn object(class: &str, start: [f64; 3], speed: f64) -> ObjectSpec {
    ObjectSpec {
        class: ClassName::from(class),
        size: None,
        start,
        speed,
        accel: 0.0,
        yaw_rate: 0.0,
        segments: Vec::new(),
        random_turns: false,
        dropouts: Vec::new(),
    }
}

fn agent(x: f64, y: f64, yaw: f64, range: f64) -> AgentSpec {
    AgentSpec {
        start: [x, y, yaw],
        range,
        ..AgentSpec::default()
    }
}

/// Named scenario built to provoke one tracking failure mode.
pub fn canned(name: &str, seed: u64) -> Result<Scenario> {
    let half_pi = PI / 2.0;
    let base = Scenario {
        name: name.to_string(),
        seed,
        ..Scenario::default()
    };
    let scn = match name {
        // Two pedestrians pass each other while a truck sweeps across the
        // line of sight of both agents.
        "occlusion_crossing" => Scenario {
            frames: 60,
            agents: vec![agent(0.0, 0.0, 0.0, 60.0), agent(-8.0, 0.0, 0.0, 60.0)],
            objects: vec![
                object("Truck", [10.0, -34.0, half_pi], 12.0),
                object("Pedestrian", [14.0, -4.0, half_pi], 1.4),
                object("Pedestrian", [15.5, 4.0, -half_pi], 1.4),
            ],
            ..base
        },
        // A 10 m/s vehicle that no agent detects for frames 40-49.
        "fast_vehicle_gap" => Scenario {
            frames: 60,
            agents: vec![agent(0.0, 0.0, 0.0, 60.0), agent(-20.0, -10.0, 0.0, 60.0)],
            objects: vec![ObjectSpec {
                dropouts: vec![[40, 49]],
                ..object("Vehicle", [-35.0, 3.0, 0.0], 10.0)
            }],
            ..base
        },
        // A pedestrian walks out of the short-range ego's view, stays with
        // the peer, and is briefly hidden from the peer by a passing truck.
        "multi_agent_handoff" => Scenario {
            frames: 100,
            agents: vec![agent(0.0, 0.0, 0.0, 20.0), agent(40.0, 0.0, PI, 40.0)],
            objects: vec![
                object("Pedestrian", [14.0, 1.0, 0.0], 1.5),
                ObjectSpec {
                    size: Some([2.6, 8.0, 3.5]),
                    ..object("Truck", [27.0, -89.0, half_pi], 15.0)
                },
            ],
            ..base
        },
        "crowd" => Scenario {
            frames: 60,
            agents: vec![agent(0.0, 0.0, 0.0, 60.0), agent(30.0, 0.0, PI, 60.0)],
            populations: vec![PopulationSpec {
                class: ClassName::from("Pedestrian"),
                count: 20,
                region: [5.0, -10.0, 25.0, 10.0],
                speed: [0.5, 1.5],
                random_turns: true,
            }],
            ..base
        },
        "mixed_classes" => Scenario {
            frames: 100,
            agents: vec![
                agent(0.0, 0.0, 0.0, 80.0),
                agent(30.0, 20.0, PI, 80.0),
                agent(-20.0, -15.0, half_pi, 80.0),
            ],
            populations: vec![
                PopulationSpec {
                    class: ClassName::from("Vehicle"),
                    count: 4,
                    region: [-40.0, -30.0, 40.0, 30.0],
                    speed: [5.0, 12.0],
                    random_turns: false,
                },
                PopulationSpec {
                    class: ClassName::from("Truck"),
                    count: 2,
                    region: [-40.0, -30.0, 40.0, 30.0],
                    speed: [4.0, 9.0],
                    random_turns: false,
                },
                PopulationSpec {
                    class: ClassName::from("Pedestrian"),
                    count: 6,
                    region: [-15.0, -15.0, 15.0, 15.0],
                    speed: [0.5, 1.5],
                    random_turns: true,
                },
            ],
            ..base
        },
        other => return Err(Error::Config(format!("unknown scenario `{other}`"))),
    };
    Ok(scn)
}
