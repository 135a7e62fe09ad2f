use cotrack::gsaf::{
    gsaf_forward, interagent_fuse, multiscale_attention, FeatureMap, GsafConfig, GsafWeights,
};
use cotrack::model::AgentId;
mod common;

use common::{max_abs, naive_attention, scaled_weights};
use ndarray::{s, Array1, Array2, Axis};

#[test]
fn kernel_matches_naive_attention_8x8() {
    let cfg = GsafConfig {
        channels: 4,
        windows: vec![2, 4],
        heads: 2,
        head_dim: 3,
        ffn_hidden: 8,
        seed: 11,
    };
    let w = scaled_weights(&cfg, 40.0);
    let f = FeatureMap::random(AgentId(0), 8, 8, 4, 5);
    let fast = multiscale_attention(&f, &w, None).unwrap();
    let slow = naive_attention(&f.data, &w);
    assert!(max_abs(&fast.data, &slow) < 1e-12);
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = GsafConfig::default();
    let w = scaled_weights(&cfg, 30.0);
    let maps: Vec<_> = (0..3)
        .map(|a| FeatureMap::random(AgentId(a), 8, 8, cfg.channels, a as u64))
        .collect();
    let out = gsaf_forward(&maps, AgentId(0), &w).unwrap();
    assert!(out.trace.max_row_sum_error() < 1e-12);
    assert!(out.trace.min_weight() >= 0.0);
    assert!(out.map.data.iter().all(|v| v.is_finite()));
}

#[test]
fn fusion_stays_in_convex_hull() {
    let cfg = GsafConfig {
        windows: vec![2],
        ..GsafConfig::default()
    };
    let mut w = GsafWeights::seeded(&cfg).unwrap();
    w.fuse_w1.mapv_inplace(|x| x * 100.0);
    let maps: Vec<_> = (0..4)
        .map(|a| FeatureMap::random(AgentId(a), 4, 4, cfg.channels, 100 + a as u64))
        .collect();
    let fused = interagent_fuse(&maps, AgentId(1), &w, None).unwrap();
    for ((i, j, k), &v) in fused.data.indexed_iter() {
        let vals: Vec<f64> = maps.iter().map(|m| m.data[[i, j, k]]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }
}

#[test]
fn peer_order_does_not_matter() {
    let cfg = GsafConfig::default();
    let w = scaled_weights(&cfg, 10.0);
    let maps: Vec<_> = (0..4)
        .map(|a| FeatureMap::random(AgentId(a), 8, 8, cfg.channels, 50 + a as u64))
        .collect();
    let a = gsaf_forward(&maps, AgentId(0), &w).unwrap();
    let shuffled = vec![
        maps[0].clone(),
        maps[3].clone(),
        maps[1].clone(),
        maps[2].clone(),
    ];
    let b = gsaf_forward(&shuffled, AgentId(0), &w).unwrap();
    assert_eq!(a.map.data, b.map.data);
}

#[test]
fn forward_is_deterministic() {
    let cfg = GsafConfig::default();
    let w = GsafWeights::seeded(&cfg).unwrap();
    let maps: Vec<_> = (0..2)
        .map(|a| FeatureMap::random(AgentId(a), 8, 8, cfg.channels, a as u64))
        .collect();
    let a = gsaf_forward(&maps, AgentId(0), &w).unwrap();
    let b = gsaf_forward(&maps, AgentId(0), &w).unwrap();
    assert_eq!(a.map.data, b.map.data);
}

/// Builds a 2C model whose every layer sees duplicated inputs and emits
/// duplicated outputs; row blocks are halved so pre-activations are unchanged.
fn duplicated(w: &GsafWeights) -> GsafWeights {
    let dup_rows_half = |m: &Array2<f64>| {
        let half = m.mapv(|x| x / 2.0);
        ndarray::concatenate(Axis(0), &[half.view(), half.view()]).unwrap()
    };
    let dup_cols = |m: &Array2<f64>| ndarray::concatenate(Axis(1), &[m.view(), m.view()]).unwrap();
    let dup1 = |v: &Array1<f64>| ndarray::concatenate(Axis(0), &[v.view(), v.view()]).unwrap();

    let mut cfg = w.config.clone();
    cfg.channels *= 2;
    let mut out = GsafWeights::seeded(&cfg).unwrap();
    for (nb, b) in out.branches.iter_mut().zip(&w.branches) {
        nb.wq = dup_rows_half(&b.wq);
        nb.wk = dup_rows_half(&b.wk);
        nb.wv = dup_rows_half(&b.wv);
        nb.bias = b.bias.clone();
        nb.wo = dup_cols(&b.wo);
    }
    // Fusion input is [ego, other], each of which is now [x, x].
    let pc = w.config.fused_channels();
    let (ego, other) = (w.fuse_w1.slice(s![..pc, ..]), w.fuse_w1.slice(s![pc.., ..]));
    let e2 = dup_rows_half(&ego.to_owned());
    let o2 = dup_rows_half(&other.to_owned());
    out.fuse_w1 = ndarray::concatenate(Axis(0), &[e2.view(), o2.view()]).unwrap();
    // Hidden width doubles too; zero the extra units.
    let hidden = w.fuse_w1.ncols();
    let pad = Array2::zeros((out.fuse_w1.nrows(), hidden));
    out.fuse_w1 = ndarray::concatenate(Axis(1), &[out.fuse_w1.view(), pad.view()]).unwrap();
    out.fuse_b1 =
        ndarray::concatenate(Axis(0), &[w.fuse_b1.view(), Array1::zeros(hidden).view()]).unwrap();
    out.fuse_w2 =
        ndarray::concatenate(Axis(0), &[w.fuse_w2.view(), Array1::zeros(hidden).view()]).unwrap();
    out.fuse_b2 = w.fuse_b2;
    out.ffn_w1 = dup_rows_half(&w.ffn_w1);
    out.ffn_b1 = w.ffn_b1.clone();
    out.ffn_w2 = dup_cols(&w.ffn_w2);
    out.ffn_b2 = dup1(&w.ffn_b2);
    out.ln_gain = dup1(&w.ln_gain);
    out.ln_bias = dup1(&w.ln_bias);
    out
}

#[test]
fn duplicated_channels_duplicate_the_output() {
    let cfg = GsafConfig {
        channels: 4,
        windows: vec![2],
        heads: 2,
        head_dim: 3,
        ffn_hidden: 6,
        seed: 4,
    };
    let w = scaled_weights(&cfg, 20.0);
    let w2 = duplicated(&w);
    let maps: Vec<_> = (0..2)
        .map(|a| FeatureMap::random(AgentId(a), 4, 4, 4, 7 + a as u64))
        .collect();
    let maps2: Vec<_> = maps
        .iter()
        .map(|m| FeatureMap {
            agent: m.agent,
            data: ndarray::concatenate(Axis(2), &[m.data.view(), m.data.view()]).unwrap(),
        })
        .collect();
    let a = gsaf_forward(&maps, AgentId(0), &w).unwrap().map.data;
    let b = gsaf_forward(&maps2, AgentId(0), &w2).unwrap().map.data;
    assert!(max_abs(&b.slice(s![.., .., ..4]).to_owned(), &a) < 1e-9);
    assert!(max_abs(&b.slice(s![.., .., 4..]).to_owned(), &a) < 1e-9);
}

#[test]
fn golden_single_agent_output() {
    let cfg = GsafConfig {
        channels: 4,
        windows: vec![2],
        heads: 1,
        head_dim: 4,
        ffn_hidden: 8,
        seed: 2024,
    };
    let w = GsafWeights::seeded(&cfg).unwrap();
    let f = FeatureMap::random(AgentId(0), 2, 2, 4, 1);
    let out = gsaf_forward(&[f], AgentId(0), &w).unwrap();
    let text = include_str!("fixtures/gsaf_golden.json");
    let golden: Vec<f64> = serde_json::from_str(text).unwrap();
    let got: Vec<f64> = out.map.data.iter().copied().collect();
    assert_eq!(got.len(), golden.len());
    for (g, e) in got.iter().zip(&golden) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}
