//! Shared domain vocabulary: boxes, classes, detections, tracks, agent poses,
//! camera models and per-frame bundles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::motion::{KalmanState, NoiseConfig};

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rotated 3D box. `l` runs along the heading, `w` across it, `h` is vertical.
/// Yaw is counter-clockwise about +z with 0 along +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, yaw: f64) -> Self {
        Box3D {
            x,
            y,
            z,
            w,
            l,
            h,
            yaw,
        }
    }

    /// Checks finiteness and positive dimensions, and wraps yaw into (−π, π].
    pub fn validate(self) -> Result<Box3D> {
        let fields = [
            ("x", self.x),
            ("y", self.y),
            ("z", self.z),
            ("w", self.w),
            ("l", self.l),
            ("h", self.h),
            ("yaw", self.yaw),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::validation(name, format!("{v} is not finite")));
            }
        }
        for (name, v) in [("w", self.w), ("l", self.l), ("h", self.h)] {
            if v <= 0.0 {
                return Err(Error::validation(name, format!("{v} must be positive")));
            }
        }
        Ok(Box3D {
            yaw: wrap_angle(self.yaw),
            ..self
        })
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// Bird's-eye footprint, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        let mut out = [[0.0; 2]; 4];
        for (i, p) in local.iter().enumerate() {
            out[i] = [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]];
        }
        out
    }

    /// The eight corners: bottom face then top face.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let fp = self.footprint();
        let mut out = [Vector3::zeros(); 8];
        for (i, p) in fp.iter().enumerate() {
            out[i] = Vector3::new(p[0], p[1], self.z_min());
            out[i + 4] = Vector3::new(p[0], p[1], self.z_max());
        }
        out
    }

    /// Applies a rigid transform to the box center and rotates the heading.
    pub fn transformed(&self, t: &RigidTransform) -> Box3D {
        let c = t.apply(&Vector3::new(self.x, self.y, self.z));
        let heading = t.rotation * Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0);
        Box3D {
            x: c.x,
            y: c.y,
            z: c.z,
            yaw: heading.y.atan2(heading.x),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassName(pub String);

impl ClassName {
    pub fn new(s: impl Into<String>) -> Self {
        ClassName(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassName {
    fn from(s: &str) -> Self {
        ClassName(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionModelKind {
    #[serde(rename = "CV")]
    Cv,
    #[serde(rename = "CYRA")]
    Cyra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatcherKind {
    Hungarian,
    Greedy,
}

/// Thresholds of the score-split two-stage cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationThresholds {
    /// Detections at or above this score take part in the first stage.
    pub high_score: f64,
    /// First-stage affinity threshold.
    pub tau1: f64,
    /// Second-stage affinity threshold, never above `tau1`.
    pub tau2: f64,
}

impl Default for AssociationThresholds {
    fn default() -> Self {
        AssociationThresholds {
            high_score: 0.5,
            tau1: -0.2,
            tau2: -0.5,
        }
    }
}

/// Per-class tracking record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectClass {
    pub name: ClassName,
    pub motion_model: MotionModelKind,
    /// Base max age in frames before velocity scaling.
    pub max_age: u32,
    pub min_hits: u32,
    pub matcher: MatcherKind,
    pub nms_iou: f64,
    pub association: AssociationThresholds,
    pub reid: bool,
    pub noise: NoiseConfig,
}

impl ObjectClass {
    pub fn validate(&self) -> Result<()> {
        if self.max_age < 1 {
            return Err(Error::validation("max_age", "must be at least 1"));
        }
        if self.min_hits < 1 {
            return Err(Error::validation("min_hits", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::validation("nms_iou", "must lie in [0, 1]"));
        }
        let a = &self.association;
        if a.tau2 > a.tau1 {
            return Err(Error::validation("tau2", "must not exceed tau1"));
        }
        self.noise.validate()
    }
}

/// Named set of class records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassRegistry {
    classes: BTreeMap<ClassName, ObjectClass>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        let mk = |name: &str, motion_model, matcher, reid| ObjectClass {
            name: ClassName::from(name),
            motion_model,
            max_age: 3,
            min_hits: 3,
            matcher,
            nms_iou: 0.1,
            association: AssociationThresholds::default(),
            reid,
            noise: NoiseConfig::default(),
        };
        let mut reg = ClassRegistry {
            classes: BTreeMap::new(),
        };
        reg.insert(mk(
            "Vehicle",
            MotionModelKind::Cyra,
            MatcherKind::Hungarian,
            false,
        ));
        reg.insert(mk(
            "Pedestrian",
            MotionModelKind::Cyra,
            MatcherKind::Greedy,
            true,
        ));
        reg.insert(mk(
            "Truck",
            MotionModelKind::Cv,
            MatcherKind::Hungarian,
            false,
        ));
        reg
    }
}

impl ClassRegistry {
    pub fn insert(&mut self, class: ObjectClass) {
        self.classes.insert(class.name.clone(), class);
    }

    pub fn class_config(&self, name: &str) -> Result<&ObjectClass> {
        self.classes
            .get(&ClassName::from(name))
            .ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }

    pub fn get(&self, name: &ClassName) -> Result<&ObjectClass> {
        self.classes
            .get(name)
            .ok_or_else(|| Error::UnknownClass(name.0.clone()))
    }

    pub fn get_mut(&mut self, name: &ClassName) -> Result<&mut ObjectClass> {
        self.classes
            .get_mut(name)
            .ok_or_else(|| Error::UnknownClass(name.0.clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &ClassName> {
        self.classes.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectClass> {
        self.classes.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ObjectClass> {
        self.classes.values_mut()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, c) in &self.classes {
            if *k != c.name {
                return Err(Error::Config(format!(
                    "class entry `{k}` has mismatched name `{}`",
                    c.name
                )));
            }
            c.validate()?;
        }
        Ok(())
    }
}

/// Defaults from the built-in registry.
pub fn class_config(name: &str) -> Result<ObjectClass> {
    ClassRegistry::default().class_config(name).cloned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Issues strictly increasing track ids; ids are never reused.
#[derive(Debug, Clone, Default)]
pub struct IdSource {
    next: u64,
}

impl IdSource {
    pub fn new(first: u64) -> Self {
        IdSource { next: first }
    }

    pub fn issue(&mut self) -> TrackId {
        let id = TrackId(self.next);
        self.next += 1;
        id
    }
}

/// Key of a precomputed appearance embedding: (frame, agent, detection index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmbeddingKey {
    pub frame: u64,
    pub agent: AgentId,
    pub index: u32,
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.frame, self.agent.0, self.index)
    }
}

impl FromStr for EmbeddingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("embedding key", format!("`{s}` is not frame:agent:index"));
        let mut it = s.split(':');
        let frame = it.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let agent = it.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let index = it.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(EmbeddingKey {
            frame,
            agent: AgentId(agent),
            index,
        })
    }
}

impl Serialize for EmbeddingKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmbeddingKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub agent: AgentId,
    pub class: ClassName,
    pub bbox: Box3D,
    pub score: f64,
    pub embedding: Option<EmbeddingKey>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::validation(
                "score",
                format!("{} outside [0, 1]", self.score),
            ));
        }
        self.bbox.validate().map(|_| ())
    }
}

/// Persistent identity owned by one tracker.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: TrackId,
    pub class: ClassName,
    pub state: KalmanState,
    pub hits: u32,
    pub misses: u32,
    pub birth_frame: u64,
    pub confirmed: bool,
    /// Score of the last detection that updated the track.
    pub score: f64,
}

/// Rigid transform from an agent's body frame to the shared world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose(pub RigidTransform);

impl AgentPose {
    /// Planar pose at height `z` with heading `yaw`.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        AgentPose(RigidTransform::from_yaw(yaw, Vector3::new(x, y, z)))
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(AgentPose(t))
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.translation
    }

    pub fn to_world(&self) -> &RigidTransform {
        &self.0
    }

    pub fn to_agent(&self) -> RigidTransform {
        self.0.inverse()
    }
}

/// Pinhole camera mounted on an agent. `extrinsic` maps the agent body frame
/// to the camera frame (x right, y down, z along the optical axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub agent: AgentId,
    pub index: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("fx/fy", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("width/height", "image must be non-empty"));
        }
        self.extrinsic.validate()
    }

    /// Camera looking along `heading` (radians, agent frame) from `mount`.
    pub fn looking(
        agent: AgentId,
        index: u32,
        heading: f64,
        mount: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let (s, c) = heading.sin_cos();
        let right = Vector3::new(s, -c, 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let fwd = Vector3::new(c, s, 0.0);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let translation = -(rotation * mount);
        CameraModel {
            agent,
            index,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            extrinsic: RigidTransform {
                rotation,
                translation,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    pub class: ClassName,
    #[serde(flatten)]
    pub bbox: Box3D,
}

/// Everything observed at one frame.
#[derive(Debug, Clone, Default)]
pub struct FrameBundle {
    pub frame: u64,
    pub timestamp: f64,
    pub detections: BTreeMap<AgentId, Vec<Detection>>,
    pub poses: BTreeMap<AgentId, AgentPose>,
    pub cameras: BTreeMap<AgentId, Vec<CameraModel>>,
    pub ground_truth: Option<Vec<GtObject>>,
}

impl FrameBundle {
    pub fn validate(&self) -> Result<()> {
        for (agent, dets) in &self.detections {
            if !self.poses.contains_key(agent) {
                return Err(Error::validation(
                    "detections",
                    format!("agent {agent} has detections but no pose"),
                ));
            }
            for d in dets {
                if d.frame != self.frame {
                    return Err(Error::validation(
                        "frame",
                        format!("detection frame {} in bundle {}", d.frame, self.frame),
                    ));
                }
                d.validate()?;
            }
        }
        Ok(())
    }
}
