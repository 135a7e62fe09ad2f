//! Glue between simulator, tracker and metrics for in-memory experiments.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::metrics::{report, EvalConfig, FrameData, Labeled, MetricsReport};
use crate::model::{ClassName, FrameBundle};
use crate::reid::EmbeddingProvider;
use crate::simulator::{generate, Scenario};
use crate::tracker::{merge_agents, FrameOutput, Tracker, TrackerConfig};
use crate::{Error, Result};

/// Per-class ground truth paired with tracker output, frame by frame.
pub fn tracking_frames(
    bundles: &[FrameBundle],
    outputs: &[FrameOutput],
) -> Result<BTreeMap<ClassName, Vec<FrameData>>> {
    if bundles.len() != outputs.len() {
        return Err(Error::validation(
            "frames",
            format!(
                "{} ground-truth frames vs {} track frames",
                bundles.len(),
                outputs.len()
            ),
        ));
    }
    let mut classes: Vec<ClassName> = Vec::new();
    for b in bundles {
        for g in b.ground_truth.iter().flatten() {
            classes.push(g.class.clone());
        }
    }
    for o in outputs {
        classes.extend(o.tracks.iter().map(|t| t.class.clone()));
    }
    classes.sort();
    classes.dedup();

    let mut out: BTreeMap<ClassName, Vec<FrameData>> = BTreeMap::new();
    for (b, o) in bundles.iter().zip(outputs) {
        if b.frame != o.frame {
            return Err(Error::validation(
                "frames",
                format!(
                    "ground-truth frame {} paired with track frame {}",
                    b.frame, o.frame
                ),
            ));
        }
        let gt = b.ground_truth.as_ref().ok_or_else(|| {
            Error::validation(
                "ground_truth",
                format!("frame {} has no ground truth", b.frame),
            )
        })?;
        for class in &classes {
            let frame = FrameData {
                frame: b.frame,
                gt: gt
                    .iter()
                    .filter(|g| &g.class == class)
                    .map(|g| Labeled {
                        id: g.id,
                        bbox: g.bbox,
                        score: 1.0,
                    })
                    .collect(),
                pred: o
                    .tracks
                    .iter()
                    .filter(|t| &t.class == class)
                    .map(|t| Labeled {
                        id: t.track_id.0,
                        bbox: t.bbox,
                        score: t.score,
                    })
                    .collect(),
            };
            out.entry(class.clone()).or_default().push(frame);
        }
    }
    Ok(out)
}

/// Per-class ground truth paired with merged world-frame detections, for AP.
pub fn detection_frames(
    bundles: &[FrameBundle],
    cfg: &TrackerConfig,
) -> Result<BTreeMap<ClassName, Vec<FrameData>>> {
    let mut out: BTreeMap<ClassName, Vec<FrameData>> = BTreeMap::new();
    let mut per_frame = Vec::with_capacity(bundles.len());
    for b in bundles {
        let merged = merge_agents(b, cfg)?;
        for m in &merged {
            out.entry(m.class.clone()).or_default();
        }
        for g in b.ground_truth.iter().flatten() {
            out.entry(g.class.clone()).or_default();
        }
        per_frame.push(merged);
    }
    for (class, frames) in out.iter_mut() {
        for (b, merged) in bundles.iter().zip(&per_frame) {
            frames.push(FrameData {
                frame: b.frame,
                gt: b
                    .ground_truth
                    .iter()
                    .flatten()
                    .filter(|g| &g.class == class)
                    .map(|g| Labeled {
                        id: g.id,
                        bbox: g.bbox,
                        score: 1.0,
                    })
                    .collect(),
                pred: merged
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| &m.class == class)
                    .map(|(i, m)| Labeled {
                        id: i as u64,
                        bbox: m.bbox,
                        score: m.score,
                    })
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Tracks `bundles` and scores the result against their ground truth.
pub fn track_and_evaluate(
    bundles: &[FrameBundle],
    cfg: &TrackerConfig,
    provider: Arc<dyn EmbeddingProvider>,
    eval: &EvalConfig,
) -> Result<(Vec<FrameOutput>, MetricsReport)> {
    let mut tracker = Tracker::new(cfg.clone(), provider)?;
    let outputs = tracker.run(bundles)?;
    let tracking = tracking_frames(bundles, &outputs)?;
    let detections = detection_frames(bundles, cfg)?;
    Ok((outputs, report(&tracking, &detections, eval)))
}

/// Simulates, tracks and evaluates one scenario.
pub fn run_scenario(
    scn: &Scenario,
    cfg: &TrackerConfig,
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    let sim = generate(scn)?;
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(sim.embeddings);
    track_and_evaluate(&sim.bundles, cfg, provider, eval).map(|(_, r)| r)
}

/// Tracker parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    IouThresh,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::IouThresh => "iou_thresh",
            SweepParam::Beta => "beta",
        }
    }

    pub fn apply(self, cfg: &mut TrackerConfig, value: f64) {
        match self {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::IouThresh => cfg.set_iou_thresh(value),
            SweepParam::Beta => cfg.reid.sim_thresh = value,
        }
    }
}

/// Inclusive grid `start, start + step, ...` up to `end` (with a half-step
/// tolerance against rounding). Values are rounded to 1e-9 so 0.1 steps
/// print cleanly.
pub fn grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && end.is_finite() && step.is_finite()) {
        return Err(Error::validation("range", "bounds and step must be finite"));
    }
    if step <= 0.0 || end < start {
        return Err(Error::validation(
            "range",
            format!("empty range {start}..{end} step {step}"),
        ));
    }
    let n = ((end - start) / step + 0.5).floor() as usize;
    Ok((0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub class: ClassName,
    pub mota: Option<f64>,
    pub idsw: usize,
}

/// Tracks `bundles` once per grid value, in parallel. Rows come out sorted
/// by (class, value).
pub fn sweep(
    bundles: &[FrameBundle],
    provider: Arc<dyn EmbeddingProvider>,
    base: &TrackerConfig,
    eval: &EvalConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    if values.is_empty() {
        return Err(Error::validation("range", "no sweep values"));
    }
    let runs: Vec<Result<Vec<SweepRow>>> = values
        .par_iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v);
            cfg.validate()?;
            let (_, rep) = track_and_evaluate(bundles, &cfg, provider.clone(), eval)?;
            Ok(rep
                .classes
                .into_iter()
                .map(|c| SweepRow {
                    param: param.name(),
                    value: v,
                    class: c.class,
                    mota: c.mota,
                    idsw: c.idsw,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in runs {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| a.class.cmp(&b.class).then(a.value.total_cmp(&b.value)));
    Ok(rows)
}

/// CSV with a header row; undefined MOTA is an empty cell.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,class,mota,idsw\n");
    for r in rows {
        let mota = r.mota.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.param, r.value, r.class, mota, r.idsw
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        let g = grid(0.0, 2.0, 0.25).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[8], 2.0);
        assert_eq!(
            grid(-0.3, 0.9, 0.3).unwrap(),
            vec![-0.3, 0.0, 0.3, 0.6, 0.9]
        );
        assert!(grid(1.0, 0.0, 0.1).is_err());
        assert!(grid(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let b = vec![FrameBundle::default()];
        assert!(tracking_frames(&b, &[]).is_err());
    }
}
