//! Toy-scale global spatial attention fusion: windowed multi-scale
//! self-attention per agent, per-location adaptive fusion across agents and
//! a residual feed-forward output block.
//!
//! Weights are seeded and frozen; there is no training here.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::AgentId;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-12;
const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub agent: AgentId,
    /// Grid laid out as (height, width, channels).
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(agent: AgentId, data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(
                "data",
                "feature map holds a non-finite value",
            ));
        }
        Ok(FeatureMap { agent, data })
    }

    /// Standard-normal entries drawn from `seed`.
    pub fn random(agent: AgentId, h: usize, w: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let data = Array3::from_shape_simple_fn((h, w, c), || rng.sample::<f64, _>(normal));
        FeatureMap { agent, data }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsafConfig {
    /// Input channel count C.
    pub channels: usize,
    /// One window size per branch.
    pub windows: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    /// Hidden width of the residual feed-forward block.
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl Default for GsafConfig {
    fn default() -> Self {
        GsafConfig {
            channels: 8,
            windows: vec![2, 4],
            heads: 2,
            head_dim: 4,
            ffn_hidden: 32,
            seed: 0,
        }
    }
}

impl GsafConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("channels", self.channels),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::validation(
                "windows",
                "need at least one positive window size",
            ));
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.windows.len()
    }

    /// Channel width after branch concatenation (P·C).
    pub fn fused_channels(&self) -> usize {
        self.branches() * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights {
    pub window: usize,
    /// C × (heads·head_dim); head `h` owns columns `h*head_dim..(h+1)*head_dim`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// heads × (2w−1)², indexed by (Δrow + w − 1)(2w − 1) + (Δcol + w − 1).
    pub bias: Array2<f64>,
    /// (heads·head_dim) × C
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsafWeights {
    pub config: GsafConfig,
    pub branches: Vec<BranchWeights>,
    /// 2PC × 2PC, then a GELU, then a 2PC → 1 logit.
    pub fuse_w1: Array2<f64>,
    pub fuse_b1: Array1<f64>,
    pub fuse_w2: Array1<f64>,
    pub fuse_b2: f64,
    /// PC × ffn_hidden
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    /// ffn_hidden × PC
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

impl GsafWeights {
    /// Uniform(−0.02, 0.02) draws in a fixed order; layer norm starts at unit
    /// gain and zero bias.
    pub fn seeded(config: &GsafConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-INIT_SCALE..INIT_SCALE))
        };
        let c = config.channels;
        let hd = config.heads * config.head_dim;
        let mut branches = Vec::new();
        for &w in &config.windows {
            let side = 2 * w - 1;
            branches.push(BranchWeights {
                window: w,
                wq: mat(c, hd),
                wk: mat(c, hd),
                wv: mat(c, hd),
                bias: mat(config.heads, side * side),
                wo: mat(hd, c),
            });
        }
        let pc = config.fused_channels();
        let fuse_w1 = mat(2 * pc, 2 * pc);
        let fuse_b1 = mat(1, 2 * pc).row(0).to_owned();
        let fuse_w2 = mat(1, 2 * pc).row(0).to_owned();
        let fuse_b2 = mat(1, 1)[[0, 0]];
        let ffn_w1 = mat(pc, config.ffn_hidden);
        let ffn_b1 = mat(1, config.ffn_hidden).row(0).to_owned();
        let ffn_w2 = mat(config.ffn_hidden, pc);
        let ffn_b2 = mat(1, pc).row(0).to_owned();
        Ok(GsafWeights {
            config: config.clone(),
            branches,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln_gain: Array1::ones(pc),
            ln_bias: Array1::zeros(pc),
        })
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push2 = |name: String, a: &Array2<f64>| {
            out.push((name, a.shape().to_vec(), a.iter().copied().collect()));
        };
        for (p, b) in self.branches.iter().enumerate() {
            push2(format!("branch{p}.wq"), &b.wq);
            push2(format!("branch{p}.wk"), &b.wk);
            push2(format!("branch{p}.wv"), &b.wv);
            push2(format!("branch{p}.bias"), &b.bias);
            push2(format!("branch{p}.wo"), &b.wo);
        }
        push2("fuse.w1".into(), &self.fuse_w1);
        push2("ffn.w1".into(), &self.ffn_w1);
        push2("ffn.w2".into(), &self.ffn_w2);
        for (name, v) in [
            ("fuse.b1", &self.fuse_b1),
            ("fuse.w2", &self.fuse_w2),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.b2", &self.ffn_b2),
            ("ln.gain", &self.ln_gain),
            ("ln.bias", &self.ln_bias),
        ] {
            out.push((name.into(), vec![v.len()], v.to_vec()));
        }
        out.push(("fuse.b2".into(), vec![1], vec![self.fuse_b2]));
        out
    }

    /// Little-endian bundle: u64 header length, JSON header, f64 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = BundleHeader {
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorSpec {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::validation("weights", reason.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: BundleHeader =
            serde_json::from_slice(json).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut w = GsafWeights::seeded(&header.config)?;
        let mut data = bytes[8 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let expected = w.tensors();
        if expected.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape, _), spec) in expected.iter().zip(&header.tensors) {
            if *name != spec.name || *shape != spec.shape {
                return Err(bad(&format!("unexpected tensor {}", spec.name)));
            }
            let n: usize = shape.iter().product();
            let v: Vec<f64> = data.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad("truncated payload"));
            }
            values.push(v);
        }
        if data.next().is_some() || !(bytes.len() - 8 - hlen).is_multiple_of(8) {
            return Err(bad("trailing bytes after payload"));
        }
        let mut it = values.into_iter();
        let mut next2 = |a: &mut Array2<f64>| {
            let v = it.next().expect("tensor count checked");
            a.iter_mut().zip(v).for_each(|(x, y)| *x = y);
        };
        for b in &mut w.branches {
            next2(&mut b.wq);
            next2(&mut b.wk);
            next2(&mut b.wv);
            next2(&mut b.bias);
            next2(&mut b.wo);
        }
        next2(&mut w.fuse_w1);
        next2(&mut w.ffn_w1);
        next2(&mut w.ffn_w2);
        for v in [
            &mut w.fuse_b1,
            &mut w.fuse_w2,
            &mut w.ffn_b1,
            &mut w.ffn_b2,
            &mut w.ln_gain,
            &mut w.ln_bias,
        ] {
            let src = it.next().expect("tensor count checked");
            v.iter_mut().zip(src).for_each(|(x, y)| *x = y);
        }
        w.fuse_b2 = it.next().expect("tensor count checked")[0];
        Ok(w)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    config: GsafConfig,
    tensors: Vec<TensorSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub branch: usize,
    pub head: usize,
    /// Top-left corner of the window.
    pub origin: (usize, usize),
    /// Row-stochastic w² × w² matrix over tokens in row-major window order.
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub windows: Vec<WindowAttention>,
    /// (H, W, N) inter-agent weights toward the ego agent, agents ordered by id.
    pub beta: Option<Array3<f64>>,
    pub agents: Vec<AgentId>,
}

impl AttentionTrace {
    /// Largest |row sum − 1| over every softmax in the trace.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in &self.windows {
            for row in w.weights.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        if let Some(beta) = &self.beta {
            for lane in beta.lanes(Axis(2)) {
                worst = worst.max((lane.sum() - 1.0).abs());
            }
        }
        worst
    }

    pub fn min_weight(&self) -> f64 {
        let win = self.windows.iter().flat_map(|w| w.weights.iter());
        let beta = self.beta.iter().flat_map(|b| b.iter());
        win.chain(beta).copied().fold(f64::INFINITY, f64::min)
    }
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn check_map(f: &Array3<f64>, cfg: &GsafConfig) -> Result<()> {
    let (h, w, c) = f.dim();
    if c != cfg.channels {
        return Err(Error::Shape {
            dim: "channels",
            expected: cfg.channels,
            got: c,
        });
    }
    for &ws in &cfg.windows {
        if h % ws != 0 {
            return Err(Error::Shape {
                dim: "height",
                expected: h.next_multiple_of(ws),
                got: h,
            });
        }
        if w % ws != 0 {
            return Err(Error::Shape {
                dim: "width",
                expected: w.next_multiple_of(ws),
                got: w,
            });
        }
    }
    Ok(())
}

/// Windowed multi-head attention for every branch; branch outputs are
/// concatenated along channels (P·C wide).
pub fn multiscale_attention(
    f: &FeatureMap,
    weights: &GsafWeights,
    trace: Option<&mut AttentionTrace>,
) -> Result<FeatureMap> {
    let cfg = &weights.config;
    check_map(&f.data, cfg)?;
    let (h, w, c) = f.data.dim();
    let tokens = f
        .data
        .to_shape((h * w, c))
        .map_err(|e| Error::Invariant(e.to_string()))?
        .to_owned();
    let dk = cfg.head_dim;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array3::zeros((h, w, cfg.fused_channels()));
    let mut trace = trace;

    for (p, b) in weights.branches.iter().enumerate() {
        let q = tokens.dot(&b.wq);
        let k = tokens.dot(&b.wk);
        let v = tokens.dot(&b.wv);
        let ws = b.window;
        let side = 2 * ws - 1;
        let n = ws * ws;
        let mut heads_out = Array2::<f64>::zeros((h * w, cfg.heads * dk));
        for r0 in (0..h).step_by(ws) {
            for c0 in (0..w).step_by(ws) {
                let idx: Vec<usize> = (0..n).map(|t| (r0 + t / ws) * w + c0 + t % ws).collect();
                for head in 0..cfg.heads {
                    let cols = head * dk..(head + 1) * dk;
                    let mut attn = Array2::<f64>::zeros((n, n));
                    for t1 in 0..n {
                        let qi = q.slice(s![idx[t1], cols.clone()]);
                        let row = attn.row_mut(t1);
                        let row = row.into_slice().expect("standard layout");
                        for t2 in 0..n {
                            let kj = k.slice(s![idx[t2], cols.clone()]);
                            let dr = t1 / ws + ws - 1 - t2 / ws;
                            let dc = t1 % ws + ws - 1 - t2 % ws;
                            row[t2] = qi.dot(&kj) * scale + b.bias[[head, dr * side + dc]];
                        }
                        softmax_in_place(row);
                    }
                    for t1 in 0..n {
                        let mut acc = heads_out.slice_mut(s![idx[t1], cols.clone()]);
                        for t2 in 0..n {
                            acc.scaled_add(attn[[t1, t2]], &v.slice(s![idx[t2], cols.clone()]));
                        }
                    }
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.windows.push(WindowAttention {
                            branch: p,
                            head,
                            origin: (r0, c0),
                            weights: attn,
                        });
                    }
                }
            }
        }
        let z = heads_out.dot(&b.wo);
        for (t, row) in z.rows().into_iter().enumerate() {
            out.slice_mut(s![t / w, t % w, p * c..(p + 1) * c])
                .assign(&row);
        }
    }
    Ok(FeatureMap {
        agent: f.agent,
        data: out,
    })
}

fn fusion_logit(weights: &GsafWeights, ego: ArrayView1<f64>, other: ArrayView1<f64>) -> f64 {
    let pc = ego.len();
    let w1 = &weights.fuse_w1;
    let mut hidden = weights.fuse_b1.clone();
    hidden += &ego.dot(&w1.slice(s![..pc, ..]));
    hidden += &other.dot(&w1.slice(s![pc.., ..]));
    hidden.mapv_inplace(gelu);
    hidden.dot(&weights.fuse_w2) + weights.fuse_b2
}

/// Per-location softmax-weighted sum of agent features toward `ego`.
pub fn interagent_fuse(
    maps: &[FeatureMap],
    ego: AgentId,
    weights: &GsafWeights,
    trace: Option<&mut AttentionTrace>,
) -> Result<FeatureMap> {
    if maps.is_empty() {
        return Err(Error::validation("maps", "no agent feature maps"));
    }
    let dim = maps[0].data.dim();
    let pc = weights.config.fused_channels();
    if dim.2 != pc {
        return Err(Error::Shape {
            dim: "channels",
            expected: pc,
            got: dim.2,
        });
    }
    for m in maps {
        let d = m.data.dim();
        for (name, a, b) in [
            ("height", dim.0, d.0),
            ("width", dim.1, d.1),
            ("channels", dim.2, d.2),
        ] {
            if a != b {
                return Err(Error::Shape {
                    dim: name,
                    expected: a,
                    got: b,
                });
            }
        }
    }
    // Fixed agent order makes the result independent of input order.
    let mut order: Vec<&FeatureMap> = maps.iter().collect();
    order.sort_by_key(|m| m.agent);
    let ego_map = order
        .iter()
        .find(|m| m.agent == ego)
        .ok_or_else(|| Error::validation("ego", format!("agent {} has no feature map", ego.0)))?;

    let (h, w, _) = dim;
    let n = order.len();
    let mut out = Array3::zeros(dim);
    let mut beta = Array3::zeros((h, w, n));
    let mut logits = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let fe = ego_map.data.slice(s![i, j, ..]);
            for (m, fm) in order.iter().enumerate() {
                logits[m] = if n == 1 {
                    0.0
                } else {
                    fusion_logit(weights, fe, fm.data.slice(s![i, j, ..]))
                };
            }
            softmax_in_place(&mut logits);
            let mut acc = out.slice_mut(s![i, j, ..]);
            for (m, fm) in order.iter().enumerate() {
                acc.scaled_add(logits[m], &fm.data.slice(s![i, j, ..]));
                beta[[i, j, m]] = logits[m];
            }
        }
    }
    if let Some(tr) = trace {
        tr.beta = Some(beta);
        tr.agents = order.iter().map(|m| m.agent).collect();
    }
    Ok(FeatureMap {
        agent: ego,
        data: out,
    })
}

/// LayerNorm(x + MLP(x)) over the channel axis.
pub fn residual_ffn(f: &FeatureMap, weights: &GsafWeights) -> Result<FeatureMap> {
    let (h, w, c) = f.data.dim();
    let pc = weights.config.fused_channels();
    if c != pc {
        return Err(Error::Shape {
            dim: "channels",
            expected: pc,
            got: c,
        });
    }
    let x = f
        .data
        .to_shape((h * w, c))
        .map_err(|e| Error::Invariant(e.to_string()))?
        .to_owned();
    let mut hidden = x.dot(&weights.ffn_w1) + &weights.ffn_b1;
    hidden.mapv_inplace(gelu);
    let mut y = x + hidden.dot(&weights.ffn_w2) + &weights.ffn_b2;
    for mut row in y.rows_mut() {
        layer_norm(row.as_slice_mut().expect("standard layout"), weights);
    }
    let data = y
        .into_shape_with_order((h, w, c))
        .map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(FeatureMap {
        agent: f.agent,
        data,
    })
}

fn layer_norm(row: &mut [f64], weights: &GsafWeights) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (k, x) in row.iter_mut().enumerate() {
        *x = (*x - mean) * inv * weights.ln_gain[k] + weights.ln_bias[k];
    }
}

/// Token-by-token evaluation of [`multiscale_attention`] with no matrix
/// products. Slow; used as a runtime cross-check.
pub fn reference_attention(f: &FeatureMap, weights: &GsafWeights) -> Result<FeatureMap> {
    let cfg = &weights.config;
    check_map(&f.data, cfg)?;
    let (h, w, c) = f.data.dim();
    let dk = cfg.head_dim;
    let x = &f.data;
    let proj = |m: &Array2<f64>, i: usize, j: usize, col: usize| -> f64 {
        (0..c).map(|k| x[[i, j, k]] * m[[k, col]]).sum()
    };
    let mut out = Array3::zeros((h, w, cfg.fused_channels()));
    for (p, b) in weights.branches.iter().enumerate() {
        let ws = b.window;
        let side = 2 * ws - 1;
        for i in 0..h {
            for j in 0..w {
                let (r0, c0) = (i / ws * ws, j / ws * ws);
                let mut concat = vec![0.0; cfg.heads * dk];
                for head in 0..cfg.heads {
                    let cols = head * dk..(head + 1) * dk;
                    let q: Vec<f64> = cols.clone().map(|col| proj(&b.wq, i, j, col)).collect();
                    let mut scores = Vec::with_capacity(ws * ws);
                    for a in r0..r0 + ws {
                        for bb in c0..c0 + ws {
                            let dot: f64 = cols
                                .clone()
                                .zip(&q)
                                .map(|(col, qv)| qv * proj(&b.wk, a, bb, col))
                                .sum();
                            let dr = i + ws - 1 - a;
                            let dc = j + ws - 1 - bb;
                            scores.push(dot / (dk as f64).sqrt() + b.bias[[head, dr * side + dc]]);
                        }
                    }
                    softmax_in_place(&mut scores);
                    for (t, p_t) in scores.iter().enumerate() {
                        let (a, bb) = (r0 + t / ws, c0 + t % ws);
                        for col in cols.clone() {
                            concat[col] += p_t * proj(&b.wv, a, bb, col);
                        }
                    }
                }
                for k in 0..c {
                    out[[i, j, p * c + k]] = concat
                        .iter()
                        .enumerate()
                        .map(|(r, v)| v * b.wo[[r, k]])
                        .sum();
                }
            }
        }
    }
    FeatureMap::new(f.agent, out)
}

#[derive(Debug, Clone)]
pub struct GsafOutput {
    pub map: FeatureMap,
    pub trace: AttentionTrace,
}

/// Attention per agent, fusion toward `ego`, then the residual block.
pub fn gsaf_forward(
    maps: &[FeatureMap],
    ego: AgentId,
    weights: &GsafWeights,
) -> Result<GsafOutput> {
    let mut trace = AttentionTrace::default();
    let attended = maps
        .iter()
        .map(|m| multiscale_attention(m, weights, Some(&mut trace)))
        .collect::<Result<Vec<_>>>()?;
    let fused = interagent_fuse(&attended, ego, weights, Some(&mut trace))?;
    let map = residual_ffn(&fused, weights)?;
    Ok(GsafOutput { map, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg1(window: usize) -> GsafConfig {
        GsafConfig {
            channels: 4,
            windows: vec![window],
            heads: 1,
            head_dim: 3,
            ffn_hidden: 6,
            seed: 3,
        }
    }

    #[test]
    fn reference_agrees_with_fast_path() {
        let cfg = GsafConfig::default();
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(0), 4, 8, cfg.channels, 1);
        let a = multiscale_attention(&f, &w, None).unwrap();
        let b = reference_attention(&f, &w).unwrap();
        let diff = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_input_gives_uniform_attention() {
        let cfg = cfg1(2);
        let mut w = GsafWeights::seeded(&cfg).unwrap();
        w.branches[0].bias.fill(0.0);
        let f = FeatureMap::new(AgentId(0), Array3::zeros((4, 4, 4))).unwrap();
        let mut trace = AttentionTrace::default();
        multiscale_attention(&f, &w, Some(&mut trace)).unwrap();
        assert_eq!(trace.windows.len(), 4);
        for win in &trace.windows {
            for x in win.weights.iter() {
                assert!((x - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_window_is_value_projection() {
        let cfg = cfg1(1);
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(0), 3, 2, 4, 1);
        let out = multiscale_attention(&f, &w, None).unwrap();
        let b = &w.branches[0];
        for i in 0..3 {
            for j in 0..2 {
                let x = f.data.slice(s![i, j, ..]);
                let want = b.wo.t().dot(&b.wv.t().dot(&x));
                for k in 0..4 {
                    assert!((out.data[[i, j, k]] - want[k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let cfg = cfg1(4);
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(0), 6, 8, 4, 1);
        match multiscale_attention(&f, &w, None) {
            Err(Error::Shape { dim, .. }) => assert_eq!(dim, "height"),
            other => panic!("unexpected {other:?}"),
        }
        let f = FeatureMap::random(AgentId(0), 8, 8, 5, 1);
        assert!(matches!(
            multiscale_attention(&f, &w, None),
            Err(Error::Shape {
                dim: "channels",
                ..
            })
        ));
        assert!(interagent_fuse(&[], AgentId(0), &w, None).is_err());
    }

    #[test]
    fn single_agent_fusion_is_identity() {
        let cfg = cfg1(2);
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(2), 4, 4, 4, 9);
        let mut trace = AttentionTrace::default();
        let out =
            interagent_fuse(std::slice::from_ref(&f), AgentId(2), &w, Some(&mut trace)).unwrap();
        assert_eq!(out.data, f.data);
        assert!(trace.beta.unwrap().iter().all(|&b| b == 1.0));
    }

    #[test]
    fn identical_agents_fuse_to_the_same_map() {
        let cfg = cfg1(2);
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(0), 4, 4, 4, 9);
        let maps: Vec<_> = (0..3)
            .map(|a| FeatureMap {
                agent: AgentId(a),
                data: f.data.clone(),
            })
            .collect();
        let out = interagent_fuse(&maps, AgentId(0), &w, None).unwrap();
        let diff = (&out.data - &f.data)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
    }

    #[test]
    fn two_agent_fusion_matches_direct_softmax() {
        let cfg = cfg1(2);
        let mut w = GsafWeights::seeded(&cfg).unwrap();
        // Larger weights so the two logits actually differ.
        w.fuse_w1.mapv_inplace(|x| x * 50.0);
        w.fuse_w2.mapv_inplace(|x| x * 50.0);
        let a = FeatureMap::random(AgentId(0), 2, 2, 4, 1);
        let b = FeatureMap::random(AgentId(1), 2, 2, 4, 2);
        let out = interagent_fuse(&[b.clone(), a.clone()], AgentId(0), &w, None).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let fa: Vec<f64> = a.data.slice(s![i, j, ..]).to_vec();
                let fb: Vec<f64> = b.data.slice(s![i, j, ..]).to_vec();
                let logit = |other: &[f64]| {
                    let input: Vec<f64> = fa.iter().chain(other).copied().collect();
                    let mut z = w.fuse_b2;
                    for hcol in 0..input.len() {
                        let mut acc = w.fuse_b1[hcol];
                        for (r, x) in input.iter().enumerate() {
                            acc += x * w.fuse_w1[[r, hcol]];
                        }
                        z += gelu(acc) * w.fuse_w2[hcol];
                    }
                    z
                };
                let (la, lb) = (logit(&fa), logit(&fb));
                let ea = 1.0 / (1.0 + (lb - la).exp());
                for k in 0..4 {
                    let want = ea * fa[k] + (1.0 - ea) * fb[k];
                    assert!((out.data[[i, j, k]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let cfg = cfg1(2);
        let w = GsafWeights::seeded(&cfg).unwrap();
        let f = FeatureMap::random(AgentId(0), 4, 4, 4, 5);
        let out = residual_ffn(&f, &w).unwrap();
        assert_eq!(out.data.dim(), (4, 4, 4));
        for lane in out.data.lanes(Axis(2)) {
            let mean = lane.sum() / 4.0;
            let var = lane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mlp_reduces_to_layer_norm() {
        let cfg = cfg1(2);
        let mut w = GsafWeights::seeded(&cfg).unwrap();
        w.ffn_w1.fill(0.0);
        w.ffn_b1.fill(0.0);
        w.ffn_w2.fill(0.0);
        w.ffn_b2.fill(0.0);
        let f = FeatureMap::random(AgentId(0), 2, 2, 4, 5);
        let out = residual_ffn(&f, &w).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut row = f.data.slice(s![i, j, ..]).to_vec();
                layer_norm(&mut row, &w);
                for (k, v) in row.iter().enumerate() {
                    assert_eq!(out.data[[i, j, k]], *v);
                }
            }
        }
    }

    #[test]
    fn weight_bundle_round_trips() {
        let cfg = GsafConfig::default();
        let w = GsafWeights::seeded(&cfg).unwrap();
        let bytes = w.to_bytes();
        let back = GsafWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert!(GsafWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(GsafWeights::from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn seeded_weights_are_deterministic() {
        let cfg = GsafConfig::default();
        let a = GsafWeights::seeded(&cfg).unwrap();
        let b = GsafWeights::seeded(&cfg).unwrap();
        assert_eq!(a, b);
        let c = GsafWeights::seeded(&GsafConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
        assert!(a.branches[0].wq.iter().all(|x| x.abs() < INIT_SCALE));
    }
}
