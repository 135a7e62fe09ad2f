//! Detection and tracking evaluation: CLEAR-MOT counts, MOTA/MOTP, the
//! recall-averaged AMOTA family and interpolated AP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::association::max_weight_assignment;
use crate::geometry::iou3d;
use crate::model::{Box3D, ClassName};
use crate::{Error, Result};

/// One box with an identity (track id or ground-truth id) and a score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub id: u64,
    pub bbox: Box3D,
    pub score: f64,
}

/// Single-class ground truth and predictions at one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameData {
    pub frame: u64,
    pub gt: Vec<Labeled>,
    pub pred: Vec<Labeled>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum IoU for a ground-truth/prediction pair to count as a match.
    pub overlap_floor: f64,
    /// Recall sample count for the AMOTA family.
    pub recall_points: usize,
    /// Interpolation points for AP.
    pub ap_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            overlap_floor: 0.25,
            recall_points: 40,
            ap_points: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap_floor) {
            return Err(Error::validation("overlap_floor", "must lie in [0, 1]"));
        }
        if self.recall_points < 2 {
            return Err(Error::validation("recall_points", "need at least 2"));
        }
        if self.ap_points < 1 {
            return Err(Error::validation("ap_points", "need at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FrameCounts {
    pub frame: u64,
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub overlaps: Vec<f64>,
}

/// Cumulative CLEAR-MOT counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub overlap_sum: f64,
    pub frames: Vec<FrameCounts>,
}

impl EvalCounts {
    pub fn push(&mut self, f: FrameCounts) {
        self.gt += f.gt;
        self.tp += f.tp;
        self.fp += f.fp;
        self.fn_ += f.fn_;
        self.idsw += f.idsw;
        self.overlap_sum += f.overlaps.iter().sum::<f64>();
        self.frames.push(f);
    }
}

/// Optimal IoU matching of one frame. Pairs under `overlap_floor` carry no
/// weight and are dropped. Returns (gt index, pred index, IoU).
pub fn match_frame(
    gt: &[Labeled],
    pred: &[Labeled],
    overlap_floor: f64,
) -> Vec<(usize, usize, f64)> {
    if gt.is_empty() || pred.is_empty() {
        return Vec::new();
    }
    let ious: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| pred.iter().map(|p| iou3d(&g.bbox, &p.bbox)).collect())
        .collect();
    let eligible = |i: usize, j: usize| ious[i][j] >= overlap_floor && ious[i][j] > 0.0;
    let weight = |i: usize, j: usize| if eligible(i, j) { ious[i][j] } else { 0.0 };
    max_weight_assignment(gt.len(), pred.len(), &weight)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|&j| eligible(i, j)).map(|j| (i, j, ious[i][j])))
        .collect()
}

/// CLEAR-MOT counts over a sequence, keeping only predictions scoring at
/// least `min_score`.
pub fn evaluate(frames: &[FrameData], overlap_floor: f64, min_score: f64) -> EvalCounts {
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut counts = EvalCounts::default();
    for fd in frames {
        let pred: Vec<Labeled> = fd
            .pred
            .iter()
            .filter(|p| p.score >= min_score)
            .copied()
            .collect();
        let pairs = match_frame(&fd.gt, &pred, overlap_floor);
        let mut f = FrameCounts {
            frame: fd.frame,
            gt: fd.gt.len(),
            tp: pairs.len(),
            fp: pred.len() - pairs.len(),
            fn_: fd.gt.len() - pairs.len(),
            ..Default::default()
        };
        for &(gi, pi, iou) in &pairs {
            let (gid, pid) = (fd.gt[gi].id, pred[pi].id);
            if last_match.insert(gid, pid).is_some_and(|prev| prev != pid) {
                f.idsw += 1;
            }
            f.overlaps.push(iou);
        }
        counts.push(f);
    }
    counts
}

/// 1 − (FP + FN + IDSW) / GT.
pub fn mota(c: &EvalCounts) -> Result<f64> {
    if c.gt == 0 {
        return Err(Error::UndefinedMetric {
            metric: "MOTA",
            reason: "no ground-truth objects".into(),
        });
    }
    Ok(1.0 - (c.fp + c.fn_ + c.idsw) as f64 / c.gt as f64)
}

/// Mean IoU over matched pairs.
pub fn motp(c: &EvalCounts) -> Result<f64> {
    if c.tp == 0 {
        return Err(Error::UndefinedMetric {
            metric: "MOTP",
            reason: "no matched pairs".into(),
        });
    }
    Ok(c.overlap_sum / c.tp as f64)
}

/// Recall-normalized MOTA at recall `r`, before clamping.
pub fn recall_normalized_mota(c: &EvalCounts, r: f64) -> f64 {
    let gt = c.gt as f64;
    1.0 - ((c.fp + c.fn_ + c.idsw) as f64 - (1.0 - r) * gt) / (r * gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmotaResult {
    pub amota: f64,
    pub samota: f64,
    pub amotp: f64,
    /// Recall points whose target recall the predictions reach.
    pub achievable: usize,
}

/// Sweeps `recall_points` target recalls r = k/L. At each, predictions are
/// thresholded at the score of the ⌈r·GT⌉-th best true positive of the
/// unthresholded run. Unreachable points contribute zero to all averages.
pub fn amota_family(frames: &[FrameData], cfg: &EvalConfig) -> Result<AmotaResult> {
    let l = cfg.recall_points;
    let full = evaluate(frames, cfg.overlap_floor, f64::NEG_INFINITY);
    if full.gt == 0 {
        return Err(Error::UndefinedMetric {
            metric: "AMOTA",
            reason: "no ground-truth objects".into(),
        });
    }
    let mut tp_scores = Vec::with_capacity(full.tp);
    for fd in frames {
        for (_, pi, _) in match_frame(&fd.gt, &fd.pred, cfg.overlap_floor) {
            tp_scores.push(fd.pred[pi].score);
        }
    }
    tp_scores.sort_by(|a, b| b.total_cmp(a));

    let mut sums = (0.0, 0.0, 0.0);
    let mut achievable = 0;
    for k in 1..=l {
        let r = k as f64 / l as f64;
        let needed = ((r * full.gt as f64) - 1e-9).ceil().max(1.0) as usize;
        let Some(&thresh) = tp_scores.get(needed - 1) else {
            continue;
        };
        let c = evaluate(frames, cfg.overlap_floor, thresh);
        let m = recall_normalized_mota(&c, r);
        sums.0 += m.min(1.0);
        sums.1 += m.clamp(0.0, 1.0);
        sums.2 += motp(&c)?;
        achievable += 1;
    }
    if achievable < 2 {
        return Err(Error::UndefinedMetric {
            metric: "AMOTA",
            reason: format!("only {achievable} recall point(s) reachable"),
        });
    }
    let n = l as f64;
    Ok(AmotaResult {
        amota: sums.0 / n,
        samota: sums.1 / n,
        amotp: sums.2 / n,
        achievable,
    })
}

/// Interpolated AP: detections sorted by score (ties by frame, then input
/// order) are greedily assigned to the best unmatched ground truth of their
/// frame at IoU ≥ `iou_thresh`; precision is averaged at recalls k/points.
pub fn average_precision(frames: &[FrameData], iou_thresh: f64, points: usize) -> Result<f64> {
    let total_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    if total_gt == 0 {
        return Err(Error::UndefinedMetric {
            metric: "AP",
            reason: "no ground-truth objects".into(),
        });
    }
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.pred.len()).map(move |pi| (fi, pi)))
        .collect();
    order.sort_by(|a, b| {
        let (sa, sb) = (frames[a.0].pred[a.1].score, frames[b.0].pred[b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });

    let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (n, &(fi, pi)) in order.iter().enumerate() {
        let f = &frames[fi];
        let p = &f.pred[pi];
        let best =
            f.gt.iter()
                .enumerate()
                .filter(|(gi, _)| !taken.contains(&(fi, *gi)))
                .map(|(gi, g)| (gi, iou3d(&g.bbox, &p.bbox)))
                .filter(|&(_, iou)| iou >= iou_thresh && iou > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((gi, _)) = best {
            taken.insert((fi, gi));
            tp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (n + 1) as f64,
            score: p.score,
        });
    }
    Ok(interpolated_ap(&curve, points))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Mean over r = k/points (k = 1..=points) of the best precision at recall ≥ r.
pub fn interpolated_ap(curve: &[PrPoint], points: usize) -> f64 {
    // Suffix maximum of precision.
    let mut best = vec![0.0; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best[i] = f64::max(best[i + 1], curve[i].precision);
    }
    let mut sum = 0.0;
    for k in 1..=points {
        let r = k as f64 / points as f64;
        let i = curve.partition_point(|p| p.recall < r - 1e-12);
        sum += best[i];
    }
    sum / points as f64
}

/// Mean over classes that have a defined AP.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One row of the metrics table. Undefined values are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ClassName,
    pub samota: Option<f64>,
    pub amota: Option<f64>,
    pub amotp: Option<f64>,
    pub mota: Option<f64>,
    pub motp: Option<f64>,
    pub idsw: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
    pub ap30: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    /// Unweighted mean over classes with a defined value.
    pub mean: ClassReport,
    pub map30: Option<f64>,
    pub map50: Option<f64>,
    /// Reasons for every undefined value above.
    pub notes: Vec<String>,
}

/// Builds the full report. `detections` holds per-class frame data whose
/// predictions are raw detections (for AP); pass an empty map to skip AP.
pub fn report(
    tracking: &BTreeMap<ClassName, Vec<FrameData>>,
    detections: &BTreeMap<ClassName, Vec<FrameData>>,
    cfg: &EvalConfig,
) -> MetricsReport {
    let mut notes = Vec::new();
    let mut ok = |class: &ClassName, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{class}: {e}"));
            None
        }
    };
    let mut rows = Vec::new();
    for (class, frames) in tracking {
        let c = evaluate(frames, cfg.overlap_floor, f64::NEG_INFINITY);
        let fam = amota_family(frames, cfg);
        let (amota, samota, amotp) = match fam {
            Ok(a) => (Some(a.amota), Some(a.samota), Some(a.amotp)),
            Err(e) => {
                ok(class, Err(e));
                (None, None, None)
            }
        };
        let (ap30, ap50) = match detections.get(class) {
            Some(d) => (
                ok(class, average_precision(d, 0.3, cfg.ap_points)),
                average_precision(d, 0.5, cfg.ap_points).ok(),
            ),
            None => (None, None),
        };
        rows.push(ClassReport {
            class: class.clone(),
            samota,
            amota,
            amotp,
            mota: ok(class, mota(&c)),
            motp: ok(class, motp(&c)),
            idsw: c.idsw,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            gt: c.gt,
            ap30,
            ap50,
        });
    }
    let avg = |f: fn(&ClassReport) -> Option<f64>| mean_ap(&rows.iter().map(f).collect::<Vec<_>>());
    let sum = |f: fn(&ClassReport) -> usize| rows.iter().map(f).sum::<usize>();
    let mean = ClassReport {
        class: ClassName::from("mean"),
        samota: avg(|r| r.samota),
        amota: avg(|r| r.amota),
        amotp: avg(|r| r.amotp),
        mota: avg(|r| r.mota),
        motp: avg(|r| r.motp),
        idsw: sum(|r| r.idsw),
        tp: sum(|r| r.tp),
        fp: sum(|r| r.fp),
        fn_: sum(|r| r.fn_),
        gt: sum(|r| r.gt),
        ap30: avg(|r| r.ap30),
        ap50: avg(|r| r.ap50),
    };
    MetricsReport {
        map30: mean.ap30,
        map50: mean.ap50,
        mean,
        classes: rows,
        notes,
    }
}
