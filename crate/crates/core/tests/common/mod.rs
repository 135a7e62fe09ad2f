#![allow(dead_code)]
//! Oracles and fixtures shared by several test targets.

use cotrack::gsaf::{GsafConfig, GsafWeights};
use cotrack::metrics::{FrameData, Labeled};
use cotrack::model::Box3D;
use ndarray::{Array2, Array3};

/// Direct per-token attention: every query token loops over the tokens of its
/// own window, no matrix products.
pub fn naive_attention(f: &Array3<f64>, w: &GsafWeights) -> Array3<f64> {
    let (h, wd, c) = f.dim();
    let cfg = &w.config;
    let dk = cfg.head_dim;
    let mut out = Array3::zeros((h, wd, cfg.windows.len() * c));
    let proj = |m: &Array2<f64>, i: usize, j: usize, col: usize| -> f64 {
        (0..c).map(|ch| f[[i, j, ch]] * m[[ch, col]]).sum()
    };
    for (p, b) in w.branches.iter().enumerate() {
        let ws = b.window;
        for i in 0..h {
            for j in 0..wd {
                let (r0, c0) = (i / ws * ws, j / ws * ws);
                let mut concat = vec![0.0; cfg.heads * dk];
                for head in 0..cfg.heads {
                    let mut scores = Vec::new();
                    let mut keys = Vec::new();
                    for a in r0..r0 + ws {
                        for bb in c0..c0 + ws {
                            let mut dot = 0.0;
                            for d in 0..dk {
                                let col = head * dk + d;
                                dot += proj(&b.wq, i, j, col) * proj(&b.wk, a, bb, col);
                            }
                            let dr = (i as isize - a as isize + ws as isize - 1) as usize;
                            let dc = (j as isize - bb as isize + ws as isize - 1) as usize;
                            let bias = b.bias[[head, dr * (2 * ws - 1) + dc]];
                            scores.push(dot / (dk as f64).sqrt() + bias);
                            keys.push((a, bb));
                        }
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (s, &(a, bb)) in scores.iter().zip(&keys) {
                        let p_ij = (s - m).exp() / z;
                        for d in 0..dk {
                            concat[head * dk + d] += p_ij * proj(&b.wv, a, bb, head * dk + d);
                        }
                    }
                }
                for ch in 0..c {
                    let v: f64 = concat
                        .iter()
                        .enumerate()
                        .map(|(r, x)| x * b.wo[[r, ch]])
                        .sum();
                    out[[i, j, p * c + ch]] = v;
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Weights with a realistic dynamic range so the softmax is not near uniform.
pub fn scaled_weights(cfg: &GsafConfig, factor: f64) -> GsafWeights {
    let mut w = GsafWeights::seeded(cfg).unwrap();
    for b in &mut w.branches {
        b.wq.mapv_inplace(|x| x * factor);
        b.wk.mapv_inplace(|x| x * factor);
        b.bias.mapv_inplace(|x| x * factor);
    }
    w
}

pub fn cube(id: u64, x: f64, score: f64) -> Labeled {
    Labeled {
        id,
        bbox: Box3D::new(x, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
        score,
    }
}

/// Two objects over three frames. Frame 0 localizes B with IoU 1/3, frame 1
/// adds a clutter track, frame 2 swaps A's id and loses B.
pub fn tracking_fixture() -> Vec<FrameData> {
    let gt = vec![cube(1, 0.0, 1.0), cube(2, 5.0, 1.0)];
    vec![
        FrameData {
            frame: 0,
            gt: gt.clone(),
            pred: vec![cube(10, 0.0, 0.9), cube(20, 5.5, 0.6)],
        },
        FrameData {
            frame: 1,
            gt: gt.clone(),
            pred: vec![cube(10, 0.0, 0.9), cube(20, 5.0, 0.6), cube(30, 20.0, 0.3)],
        },
        FrameData {
            frame: 2,
            gt,
            pred: vec![cube(11, 0.0, 0.9)],
        },
    ]
}
