//! Rigid transforms, pinhole projection, crop boxes, rotated-box overlap and NMS.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::model::{AgentId, AgentPose, Box3D, CameraModel, Detection};

/// Depth below which a camera-frame point counts as behind the camera.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::validation("transform", "bottom row must be 0 0 0 1"));
        }
        let t = RigidTransform {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Orthonormal rotation with determinant +1, finite translation.
    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !err.is_finite() || err > 1e-9 {
            return Err(Error::validation("rotation", "not orthonormal"));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::validation("rotation", "determinant is not +1"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("translation", "not finite"));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// R·p + t.
pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

/// Pinhole projection with perspective division.
pub fn project_to_pixel(cam: &CameraModel, p_cam: &Vector3<f64>) -> Result<(f64, f64)> {
    let z = p_cam.z;
    if z <= DEPTH_EPS {
        return Err(Error::BehindCamera { depth: z });
    }
    let u = (cam.fx * p_cam.x + cam.cx * z) / z;
    let v = (cam.fy * p_cam.y + cam.cy * z) / z;
    Ok((u, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    pub agent: AgentId,
    pub camera: u32,
}

impl Bbox2D {
    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min) * (self.v_max - self.v_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropParams {
    pub min_visible_corners: usize,
    /// Square pixels.
    pub min_crop_area: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            min_visible_corners: 2,
            min_crop_area: 16.0,
        }
    }
}

/// Pixel envelope of a world-frame box in one camera of one agent.
pub fn crop_box_for(
    bbox: &Box3D,
    pose: &AgentPose,
    cam: &CameraModel,
    params: &CropParams,
) -> Option<Bbox2D> {
    let world_to_cam = cam.extrinsic.compose(&pose.to_agent());
    let mut u_min = f64::INFINITY;
    let mut v_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    let mut visible = 0;
    for c in bbox.corners() {
        let pc = world_to_cam.apply(&c);
        if let Ok((u, v)) = project_to_pixel(cam, &pc) {
            visible += 1;
            u_min = u_min.min(u);
            v_min = v_min.min(v);
            u_max = u_max.max(u);
            v_max = v_max.max(v);
        }
    }
    if visible < params.min_visible_corners.max(1) {
        return None;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    let out = Bbox2D {
        u_min: u_min.clamp(0.0, w),
        v_min: v_min.clamp(0.0, h),
        u_max: u_max.clamp(0.0, w),
        v_max: v_max.clamp(0.0, h),
        agent: cam.agent,
        camera: cam.index,
    };
    if out.u_min >= out.u_max || out.v_min >= out.v_max || out.area() < params.min_crop_area {
        return None;
    }
    Some(out)
}

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for CCW).
pub fn polygon_area(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Sutherland–Hodgman clip of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output: Vec<Pt> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
pub fn convex_hull(points: &[Pt]) -> Vec<Pt> {
    let mut pts: Vec<Pt> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Pt> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let inter = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&inter).max(0.0)
}

fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0)
}

struct Overlap {
    inter: f64,
    union: f64,
}

fn overlap(a: &Box3D, b: &Box3D) -> Overlap {
    let dz = vertical_overlap(a, b);
    let inter = if dz > 0.0 {
        bev_intersection_area(a, b) * dz
    } else {
        0.0
    };
    Overlap {
        inter,
        union: a.volume() + b.volume() - inter,
    }
}

/// 3D IoU of two rotated boxes (yaw-only rotation).
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let o = overlap(a, b);
    if o.union <= 0.0 {
        return 0.0;
    }
    (o.inter / o.union).clamp(0.0, 1.0)
}

/// Generalized 3D IoU with a convex-hull BEV enclosure; ranges over (−1, 1].
pub fn giou3d(a: &Box3D, b: &Box3D) -> f64 {
    let o = overlap(a, b);
    let iou = if o.union > 0.0 {
        o.inter / o.union
    } else {
        0.0
    };
    let mut pts = Vec::with_capacity(8);
    pts.extend_from_slice(&a.footprint());
    pts.extend_from_slice(&b.footprint());
    let hull_area = polygon_area(&convex_hull(&pts));
    let height = a.z_max().max(b.z_max()) - a.z_min().min(b.z_min());
    let enclosure = hull_area * height;
    if enclosure <= 0.0 {
        return iou;
    }
    iou - (enclosure - o.union).max(0.0) / enclosure
}

/// Greedy score-descending suppression. Returns kept indices, each with the
/// indices it suppressed (kept index first), in score order.
pub fn nms_groups(boxes: &[Box3D], scores: &[f64], iou_thresh: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups
            .iter_mut()
            .find(|g| iou3d(&boxes[g[0]], &boxes[i]) > iou_thresh)
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

/// Non-maximum suppression over same-class detections.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let boxes: Vec<Box3D> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_groups(&boxes, &scores, iou_thresh)
        .into_iter()
        .map(|g| dets[g[0]].clone())
        .collect()
}
