//! Differentiable building blocks: gated residual networks, soft attention
//! over hyperedges and graph neighborhoods, Gumbel-Softmax gated temporal
//! attention, variable selection, and the encoder block.
//!
//! Every function records onto a [`Tape`] and returns node handles, so the
//! same code path serves the forward pass, training gradients, and the
//! finite-difference verification harness. Functions accept an optional
//! leading batch axis beyond the documented core shape.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mix_seed;
use crate::region::RegionStructure;
use crate::tape::{Tape, VarId};

/// Negative slope of every LeakyReLU in the spatial attention stages.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Epsilon inside all layer norms.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("shape mismatch in {ctx}: expected {expected}, got {got}")]
    Shape { ctx: &'static str, expected: String, got: String },
    #[error("soft attention over an empty member set")]
    EmptyNeighborhood,
    #[error("hyperedge {0} is empty")]
    EmptyHyperedge(usize),
    #[error("area {0} belongs to no hyperedge")]
    UncoveredArea(usize),
    #[error("gumbel-softmax temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("add_norm needs at least 2 inputs, got {0}")]
    TooFewInputs(usize),
}

fn shape_err(ctx: &'static str, expected: impl Into<String>, got: &[usize]) -> LayerError {
    LayerError::Shape { ctx, expected: expected.into(), got: format!("{got:?}") }
}

/// Gumbel noise policy for the tempered softmax.
#[derive(Debug, Clone, Copy)]
pub enum NoiseMode {
    /// Deterministic: the tempered softmax of the raw scores.
    Zero,
    /// Gumbel(0,1) noise added to every score, drawn from the given seed.
    Sampled { seed: u64 },
}

/// Dropout policy for GRN hidden states.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Off,
    On { rate: f64, seed: u64 },
}

impl DropoutMode {
    /// Derives an independent stream for a sub-layer.
    pub fn derive(self, tag: u64) -> DropoutMode {
        match self {
            DropoutMode::Off => DropoutMode::Off,
            DropoutMode::On { rate, seed } => {
                DropoutMode::On { rate, seed: mix_seed(&[seed, tag]) }
            }
        }
    }
}

impl NoiseMode {
    pub fn derive(self, tag: u64) -> NoiseMode {
        match self {
            NoiseMode::Zero => NoiseMode::Zero,
            NoiseMode::Sampled { seed } => NoiseMode::Sampled { seed: mix_seed(&[seed, tag]) },
        }
    }
}

/// Attention values plus the row-stochastic weights that produced them.
pub struct AttentionOutput {
    pub values: VarId,
    pub weights: VarId,
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct GluParams {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

#[derive(Clone, Copy)]
pub struct LayerNormParams {
    pub gain: VarId,
    pub offset: VarId,
}

#[derive(Clone, Copy)]
pub struct GrnParams {
    pub w_eta1: VarId,
    pub b_eta1: VarId,
    pub w_eta2: VarId,
    pub b_eta2: VarId,
    pub glu: GluParams,
    pub norm: LayerNormParams,
}

#[derive(Clone, Copy)]
pub struct EncoderParams {
    pub query: GrnParams,
    pub key: GrnParams,
    pub value: GrnParams,
    pub feed_forward: GrnParams,
    pub norm_attn: LayerNormParams,
    pub norm_ff: LayerNormParams,
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

/// Exponential linear unit, elementwise.
pub fn elu(t: &mut Tape, x: VarId) -> VarId {
    t.elu(x)
}

/// Affine map on the last axis: `x . w + b` with `w: [in, out]`, `b: [out]`.
fn linear(t: &mut Tape, x: VarId, w: VarId, b: VarId) -> VarId {
    let xshape = t.shape(x).to_vec();
    let (in_dim, out_dim) = (t.shape(w)[0], t.shape(w)[1]);
    debug_assert_eq!(*xshape.last().unwrap(), in_dim);
    let rows: usize = xshape[..xshape.len() - 1].iter().product();
    let flat = t.reshape(x, &[rows, in_dim]);
    let prod = t.matmul(flat, w);
    let with_bias = t.add(prod, b);
    let mut out_shape = xshape;
    *out_shape.last_mut().unwrap() = out_dim;
    t.reshape(with_bias, &out_shape)
}

fn check_square(ctx: &'static str, t: &Tape, w: VarId, d: usize) -> Result<(), LayerError> {
    if t.shape(w) != [d, d] {
        return Err(shape_err(ctx, format!("[{d}, {d}]"), t.shape(w)));
    }
    Ok(())
}

fn check_vec(ctx: &'static str, t: &Tape, v: VarId, d: usize) -> Result<(), LayerError> {
    if t.shape(v) != [d] {
        return Err(shape_err(ctx, format!("[{d}]"), t.shape(v)));
    }
    Ok(())
}

/// Gated linear unit: `(w1 x + b1) * sigmoid(w2 x + b2)` on the last axis.
pub fn glu(t: &mut Tape, p: &GluParams, x: VarId) -> Result<VarId, LayerError> {
    let d = *t.shape(x).last().ok_or_else(|| shape_err("glu", "non-scalar", &[]))?;
    check_square("glu.w1", t, p.w1, d)?;
    check_square("glu.w2", t, p.w2, d)?;
    check_vec("glu.b1", t, p.b1, d)?;
    check_vec("glu.b2", t, p.b2, d)?;
    let lin = linear(t, x, p.w1, p.b1);
    let gate_pre = linear(t, x, p.w2, p.b2);
    let gate = t.sigmoid(gate_pre);
    Ok(t.mul(lin, gate))
}

fn dropout(t: &mut Tape, x: VarId, mode: DropoutMode) -> VarId {
    match mode {
        DropoutMode::Off | DropoutMode::On { rate: 0.0, .. } => x,
        DropoutMode::On { rate, seed } => {
            let keep = 1.0 - rate;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = ArrayD::from_shape_fn(IxDyn(t.shape(x)), |_| {
                if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
            });
            let m = t.constant(mask);
            t.mul(x, m)
        }
    }
}

/// Gated residual network on the last axis:
/// `LayerNorm(x + GLU(W2 ELU(W1 x + b1) + b2))`, dropout on the hidden state
/// in training mode.
pub fn grn(
    t: &mut Tape,
    p: &GrnParams,
    x: VarId,
    drop: DropoutMode,
) -> Result<VarId, LayerError> {
    let d = *t.shape(x).last().ok_or_else(|| shape_err("grn", "non-scalar", &[]))?;
    check_square("grn.w_eta1", t, p.w_eta1, d)?;
    check_square("grn.w_eta2", t, p.w_eta2, d)?;
    check_vec("grn.b_eta1", t, p.b_eta1, d)?;
    check_vec("grn.b_eta2", t, p.b_eta2, d)?;
    check_vec("grn.norm.gain", t, p.norm.gain, d)?;
    let pre = linear(t, x, p.w_eta1, p.b_eta1);
    let eta1 = t.elu(pre);
    let eta2 = linear(t, eta1, p.w_eta2, p.b_eta2);
    let eta2 = dropout(t, eta2, drop);
    let gated = glu(t, &p.glu, eta2)?;
    let sum = t.add(x, gated);
    Ok(t.layer_norm_last(sum, p.norm.gain, p.norm.offset, LAYER_NORM_EPS))
}

/// Feature-aware soft attention of a center over a member set.
///
/// `w_att: [2d]` scores `LeakyReLU(w . (center || member))`; the output is
/// `LeakyReLU(sum_j A_j member_j)` with softmax weights `A`.
pub fn soft_attention(
    t: &mut Tape,
    w_att: VarId,
    center: VarId,
    members: VarId,
) -> Result<AttentionOutput, LayerError> {
    let ms = t.shape(members).to_vec();
    if ms.len() != 2 || ms[0] == 0 {
        if ms.first() == Some(&0) {
            return Err(LayerError::EmptyNeighborhood);
        }
        return Err(shape_err("soft_attention.members", "[m, d]", &ms));
    }
    let (m, d) = (ms[0], ms[1]);
    check_vec("soft_attention.center", t, center, d)?;
    if t.shape(w_att) != [2 * d] {
        return Err(shape_err("soft_attention.w_att", format!("[{}]", 2 * d), t.shape(w_att)));
    }
    let w_center = t.slice_axis0(w_att, 0, d);
    let w_member = t.slice_axis0(w_att, d, 2 * d);
    let w_center = t.reshape(w_center, &[d, 1]);
    let w_member = t.reshape(w_member, &[d, 1]);

    let c_row = t.reshape(center, &[1, d]);
    let c_score = t.matmul(c_row, w_center); // [1,1]
    let c_score = t.reshape(c_score, &[1]);
    let m_scores = t.matmul(members, w_member); // [m,1]
    let m_scores = t.reshape(m_scores, &[m]);
    let raw = t.add(m_scores, c_score);
    let scores = t.leaky_relu(raw, LEAKY_SLOPE);
    let weights = t.softmax_last(scores);
    let w_row = t.reshape(weights, &[1, m]);
    let mixed = t.matmul(w_row, members);
    let mixed = t.reshape(mixed, &[d]);
    let values = t.leaky_relu(mixed, LEAKY_SLOPE);
    Ok(AttentionOutput { values, weights })
}

/// Additive-mask matrices derived from a [`RegionStructure`]: 0 where
/// attention is allowed, −inf elsewhere.
pub struct StructureMasks {
    /// `[clusters, areas]` membership mask for hyperedge gathering.
    pub edge_mask: ArrayD<f64>,
    /// `[areas, clusters]` incidence used to scatter hyperedge embeddings back.
    pub incidence: ArrayD<f64>,
    /// `[areas, areas]` neighborhood mask; isolated areas keep only the diagonal.
    pub adjacency_mask: ArrayD<f64>,
}

impl StructureMasks {
    pub fn new(s: &RegionStructure) -> Result<Self, LayerError> {
        let (n, c) = s.incidence.dim();
        for (a, row) in s.incidence.rows().into_iter().enumerate() {
            if row.sum() != 1.0 {
                return Err(LayerError::UncoveredArea(a));
            }
        }
        for k in 0..c {
            if s.incidence.column(k).sum() == 0.0 {
                return Err(LayerError::EmptyHyperedge(k));
            }
        }
        let mut edge_mask = ArrayD::from_elem(IxDyn(&[c, n]), f64::NEG_INFINITY);
        for a in 0..n {
            for k in 0..c {
                if s.incidence[[a, k]] == 1.0 {
                    edge_mask[[k, a]] = 0.0;
                }
            }
        }
        let mut adjacency_mask = ArrayD::from_elem(IxDyn(&[n, n]), f64::NEG_INFINITY);
        for i in 0..n {
            if s.isolated[i] {
                adjacency_mask[[i, i]] = 0.0;
            } else {
                for j in 0..n {
                    if s.adjacency[[i, j]] > 0.0 {
                        adjacency_mask[[i, j]] = 0.0;
                    }
                }
            }
        }
        Ok(StructureMasks {
            edge_mask,
            incidence: s.incidence.clone().into_dyn(),
            adjacency_mask,
        })
    }
}

fn canonical3(t: &mut Tape, x: VarId, ctx: &'static str) -> Result<(VarId, bool), LayerError> {
    match t.shape(x).len() {
        2 => {
            let s = t.shape(x).to_vec();
            Ok((t.reshape(x, &[1, s[0], s[1]]), false))
        }
        3 => Ok((x, true)),
        _ => Err(shape_err(ctx, "[n, w] or [batch, n, w]", t.shape(x))),
    }
}

fn decanonical3(t: &mut Tape, x: VarId, batched: bool) -> VarId {
    if batched {
        x
    } else {
        let s = t.shape(x).to_vec();
        t.reshape(x, &[s[1], s[2]])
    }
}

/// Scores member features against one half of the attention vector:
/// `feats . w_att[half]` laid out `[b, 1, n]`.
fn member_scores(t: &mut Tape, feats3: VarId, w_att: VarId, half: usize) -> VarId {
    let s = t.shape(feats3).to_vec();
    let (b, n, width) = (s[0], s[1], s[2]);
    let w = t.slice_axis0(w_att, half * width, (half + 1) * width);
    let w = t.reshape(w, &[width, 1]);
    let flat = t.reshape(feats3, &[b * n, width]);
    let scored = t.matmul(flat, w);
    t.reshape(scored, &[b, 1, n])
}

fn tile_const(t: &mut Tape, arr: &ArrayD<f64>, b: usize) -> VarId {
    let mut shape = vec![b];
    shape.extend_from_slice(arr.shape());
    let tiled = arr.broadcast(IxDyn(&shape)).expect("tile").to_owned();
    t.constant(tiled)
}

/// Two-step attentive hypergraph pass over `[n, tau]` node features (optional
/// leading batch axis).
///
/// Step 1 gathers member nodes into each hyperedge around an entity-free
/// (zero-feature) center; step 2 scatters each node's single hyperedge
/// embedding back through a singleton soft attention, which reduces to
/// `LeakyReLU` of the gathered embedding.
pub fn hypergraph_attention(
    t: &mut Tape,
    w_att: VarId,
    node_feats: VarId,
    masks: &StructureMasks,
) -> Result<VarId, LayerError> {
    let (feats3, batched) = canonical3(t, node_feats, "hypergraph_attention")?;
    let s = t.shape(feats3).to_vec();
    let (b, n, tau) = (s[0], s[1], s[2]);
    if masks.edge_mask.shape()[1] != n {
        return Err(shape_err("hypergraph_attention.structure", format!("{n} areas"), masks.edge_mask.shape()));
    }
    if t.shape(w_att) != [2 * tau] {
        return Err(shape_err("hypergraph_attention.w_att", format!("[{}]", 2 * tau), t.shape(w_att)));
    }
    // scores against the member half; the zero center contributes nothing
    let raw = member_scores(t, feats3, w_att, 1);
    let act = t.leaky_relu(raw, LEAKY_SLOPE);
    let mask = t.constant(masks.edge_mask.clone());
    let masked = t.add(act, mask); // [b, c, n]
    let attn = t.softmax_last(masked);
    let gathered = t.batch_matmul(attn, feats3); // [b, c, tau]
    let edges = t.leaky_relu(gathered, LEAKY_SLOPE);
    // singleton second step: gather each node's hyperedge, then LeakyReLU
    let inc = tile_const(t, &masks.incidence, b);
    let scattered = t.batch_matmul(inc, edges); // [b, n, tau]
    let out = t.leaky_relu(scattered, LEAKY_SLOPE);
    Ok(decanonical3(t, out, batched))
}

/// Graph attention over `[n, tau]` node features (optional leading batch
/// axis). Scores concatenate raw center and neighbor features; isolated areas
/// attend to themselves.
pub fn graph_attention(
    t: &mut Tape,
    w_att: VarId,
    node_feats: VarId,
    masks: &StructureMasks,
) -> Result<VarId, LayerError> {
    let (feats3, batched) = canonical3(t, node_feats, "graph_attention")?;
    let s = t.shape(feats3).to_vec();
    let (_b, n, tau) = (s[0], s[1], s[2]);
    if masks.adjacency_mask.shape()[0] != n {
        return Err(shape_err("graph_attention.structure", format!("{n} areas"), masks.adjacency_mask.shape()));
    }
    if t.shape(w_att) != [2 * tau] {
        return Err(shape_err("graph_attention.w_att", format!("[{}]", 2 * tau), t.shape(w_att)));
    }
    let center = member_scores(t, feats3, w_att, 0); // [b, 1, n] of w_l . x_i
    let center = t.swap_last2(center); // [b, n, 1]
    let member = member_scores(t, feats3, w_att, 1); // [b, 1, n]
    let raw = t.add(center, member); // [b, n, n]: score(i, j)
    let act = t.leaky_relu(raw, LEAKY_SLOPE);
    let mask = t.constant(masks.adjacency_mask.clone());
    let masked = t.add(act, mask);
    let attn = t.softmax_last(masked);
    let mixed = t.batch_matmul(attn, feats3);
    let out = t.leaky_relu(mixed, LEAKY_SLOPE);
    Ok(decanonical3(t, out, batched))
}

/// Elementwise sum of same-shape tensors followed by layer norm on the last axis.
pub fn add_norm(
    t: &mut Tape,
    norm: &LayerNormParams,
    inputs: &[VarId],
) -> Result<VarId, LayerError> {
    if inputs.len() < 2 {
        return Err(LayerError::TooFewInputs(inputs.len()));
    }
    let shape = t.shape(inputs[0]).to_vec();
    for &v in &inputs[1..] {
        if t.shape(v) != shape.as_slice() {
            return Err(shape_err("add_norm", format!("{shape:?}"), t.shape(v)));
        }
    }
    let mut acc = inputs[0];
    for &v in &inputs[1..] {
        acc = t.add(acc, v);
    }
    Ok(t.layer_norm_last(acc, norm.gain, norm.offset, LAYER_NORM_EPS))
}

fn gumbel_noise(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-16);
        -(-u.ln()).ln()
    })
}

/// Tempered softmax over the last axis of the scores, optionally perturbed by
/// Gumbel(0,1) noise: `softmax((scores + eps) / temperature)`.
pub fn gumbel_softmax(
    t: &mut Tape,
    scores: VarId,
    temperature: f64,
    noise: NoiseMode,
) -> Result<VarId, LayerError> {
    if temperature <= 0.0 {
        return Err(LayerError::NonPositiveTemperature(temperature));
    }
    let noisy = match noise {
        NoiseMode::Zero => scores,
        NoiseMode::Sampled { seed } => {
            let eps = t.constant(gumbel_noise(t.shape(scores), seed));
            t.add(scores, eps)
        }
    };
    let scaled = t.scale(noisy, 1.0 / temperature);
    Ok(t.softmax_last(scaled))
}

/// Scaled dot-product attention with Gumbel-Softmax row activation.
/// `q`, `k`, `v`: `[tau, d]` (optional leading batch axis).
pub fn gated_temporal_attention(
    t: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    temperature: f64,
    noise: NoiseMode,
) -> Result<AttentionOutput, LayerError> {
    let qs = t.shape(q).to_vec();
    if t.shape(k) != qs.as_slice() || t.shape(v) != qs.as_slice() {
        return Err(shape_err("gated_temporal_attention", format!("{qs:?}"), t.shape(k)));
    }
    let (q3, batched) = canonical3(t, q, "gated_temporal_attention")?;
    let (k3, _) = canonical3(t, k, "gated_temporal_attention")?;
    let (v3, _) = canonical3(t, v, "gated_temporal_attention")?;
    let d_k = t.shape(q3)[2];
    let k_t = t.swap_last2(k3);
    let scores = t.batch_matmul(q3, k_t);
    let scaled = t.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = gumbel_softmax(t, scaled, temperature, noise)?;
    let values = t.batch_matmul(weights, v3);
    Ok(AttentionOutput {
        values: decanonical3(t, values, batched),
        weights: decanonical3(t, weights, batched),
    })
}

/// Variable selection over the trailing feature axis of `[n, tau, f]`
/// (optional leading batch axis): two GRNs on the feature axis produce an
/// embedding and softmax selection weights; the output contracts the feature
/// axis away.
///
/// Returns `(selected, weights)`.
pub fn variable_selection(
    t: &mut Tape,
    value_grn: &GrnParams,
    weight_grn: &GrnParams,
    xi: VarId,
    drop: DropoutMode,
) -> Result<(VarId, VarId), LayerError> {
    if t.shape(xi).len() < 2 {
        return Err(shape_err("variable_selection", "[.., tau, f]", t.shape(xi)));
    }
    let xi1 = grn(t, value_grn, xi, drop.derive(1))?;
    let logits = grn(t, weight_grn, xi, drop.derive(2))?;
    let weights = t.softmax_last(logits);
    let weighted = t.mul(weights, xi1);
    let selected = t.sum_last(weighted);
    Ok((selected, weights))
}

/// One encoder block over `[.., tau, d]`: GRN-projected Q/K/V, gated temporal
/// attention, residual add-norms, and a feed-forward GRN.
pub fn encoder_block(
    t: &mut Tape,
    p: &EncoderParams,
    psi: VarId,
    temperature: f64,
    noise: NoiseMode,
    drop: DropoutMode,
) -> Result<VarId, LayerError> {
    let shape = t.shape(psi).to_vec();
    if shape.len() < 2 {
        return Err(shape_err("encoder_block", "[.., tau, d]", &shape));
    }
    let (tau, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let rows: usize = shape[..shape.len() - 2].iter().product::<usize>().max(1);
    let flat = t.reshape(psi, &[rows, tau, d]);

    let q = grn(t, &p.query, flat, drop.derive(1))?;
    let k = grn(t, &p.key, flat, drop.derive(2))?;
    let v = grn(t, &p.value, flat, drop.derive(3))?;
    let attn = gated_temporal_attention(t, q, k, v, temperature, noise)?;
    let psi2 = add_norm(t, &p.norm_attn, &[attn.values, flat])?;
    let psi3 = grn(t, &p.feed_forward, psi2, drop.derive(4))?;
    let psi4 = add_norm(t, &p.norm_ff, &[psi2, psi3])?;
    Ok(t.reshape(psi4, &shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::build_structure;
    use crate::tape::relative_error;
    use ndarray::{arr1, arr2, Array2};

    fn leaf1(t: &mut Tape, v: &[f64]) -> VarId {
        t.leaf(arr1(v).into_dyn())
    }

    fn eye(t: &mut Tape, d: usize) -> VarId {
        t.leaf(Array2::eye(d).into_dyn())
    }

    fn zeros2(t: &mut Tape, d: usize) -> VarId {
        t.leaf(Array2::zeros((d, d)).into_dyn())
    }

    #[test]
    fn elu_closed_forms() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[0.0, 1.0, -1.0]);
        let y = elu(&mut t, x);
        let v = t.value(y);
        assert_eq!(v[[0]], 0.0);
        assert_eq!(v[[1]], 1.0);
        assert!((v[[2]] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v[[2]] + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn glu_identity_times_half() {
        // w1 = I, b1 = 0, w2 = 0, b2 = 0: gate sits at sigmoid(0) = 0.5
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[2.0, -4.0, 6.0]);
        let p = GluParams {
            w1: eye(&mut t, 3),
            b1: leaf1(&mut t, &[0.0; 3]),
            w2: zeros2(&mut t, 3),
            b2: leaf1(&mut t, &[0.0; 3]),
        };
        let y = glu(&mut t, &p, x).unwrap();
        assert_eq!(t.value(y), &arr1(&[1.0, -2.0, 3.0]).into_dyn());
    }

    #[test]
    fn glu_saturated_gate_passes_linear_part() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[0.5, -1.5]);
        let p = GluParams {
            w1: eye(&mut t, 2),
            b1: leaf1(&mut t, &[0.1, 0.2]),
            w2: zeros2(&mut t, 2),
            b2: leaf1(&mut t, &[20.0, 20.0]),
        };
        let y = glu(&mut t, &p, x).unwrap();
        let v = t.value(y);
        assert!((v[[0]] - 0.6).abs() < 1e-8);
        assert!((v[[1]] + 1.3).abs() < 1e-8);
    }

    #[test]
    fn glu_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w1 = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let w2 = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        let b1: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let xv = leaf1(&mut t, &x);
        let p = GluParams {
            w1: t.leaf(w1.clone().into_dyn()),
            b1: leaf1(&mut t, &b1),
            w2: t.leaf(w2.clone().into_dyn()),
            b2: leaf1(&mut t, &b2),
        };
        let y = glu(&mut t, &p, xv).unwrap();

        // direct composition of the two affine maps, sigmoid, Hadamard
        for i in 0..3 {
            let lin: f64 = (0..3).map(|j| x[j] * w1[[j, i]]).sum::<f64>() + b1[i];
            let gate_pre: f64 = (0..3).map(|j| x[j] * w2[[j, i]]).sum::<f64>() + b2[i];
            let want = lin * (1.0 / (1.0 + (-gate_pre).exp()));
            assert!((t.value(y)[[i]] - want).abs() < 1e-12);
        }
    }

    fn grn_params_zeroish(t: &mut Tape, d: usize) -> GrnParams {
        GrnParams {
            w_eta1: zeros2(t, d),
            b_eta1: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            w_eta2: zeros2(t, d),
            b_eta2: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            glu: GluParams {
                w1: zeros2(t, d),
                b1: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
                w2: zeros2(t, d),
                b2: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            },
            norm: LayerNormParams {
                gain: t.leaf(ArrayD::ones(IxDyn(&[d]))),
                offset: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            },
        }
    }

    #[test]
    fn grn_residual_only_path_is_layer_norm() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[1.0, 2.0, 3.0, 10.0]);
        let p = grn_params_zeroish(&mut t, 4);
        let y = grn(&mut t, &p, x, DropoutMode::Off).unwrap();
        // zero GLU parameters make the gated branch 0, leaving LayerNorm(x)
        let g = t.leaf(ArrayD::ones(IxDyn(&[4])));
        let b = t.leaf(ArrayD::zeros(IxDyn(&[4])));
        let want = t.layer_norm_last(x, g, b, LAYER_NORM_EPS);
        let (got, want) = (t.value(y).clone(), t.value(want).clone());
        assert_eq!(got, want);
    }

    #[test]
    fn grn_constant_vector_normalizes_to_zero() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[5.0, 5.0, 5.0]);
        let p = grn_params_zeroish(&mut t, 3);
        let y = grn(&mut t, &p, x, DropoutMode::Off).unwrap();
        assert!(t.value(y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn grn_shape_mismatch_errors() {
        let mut t = Tape::new();
        let x = leaf1(&mut t, &[1.0, 2.0, 3.0]);
        let p = grn_params_zeroish(&mut t, 4);
        assert!(matches!(grn(&mut t, &p, x, DropoutMode::Off), Err(LayerError::Shape { .. })));
    }

    #[test]
    fn soft_attention_singleton_and_symmetry() {
        let mut t = Tape::new();
        let w = leaf1(&mut t, &[0.3, -0.2, 0.5, 0.7]);
        let center = leaf1(&mut t, &[1.0, -1.0]);
        let single = t.leaf(arr2(&[[0.4, -0.8]]).into_dyn());
        let out = soft_attention(&mut t, w, center, single).unwrap();
        assert_eq!(t.value(out.weights)[[0]], 1.0);
        assert!((t.value(out.values)[[0]] - 0.4).abs() < 1e-15);
        assert!((t.value(out.values)[[1]] - (-0.8 * LEAKY_SLOPE)).abs() < 1e-15);

        // two identical members split the weight evenly
        let twin = t.leaf(arr2(&[[0.4, -0.8], [0.4, -0.8]]).into_dyn());
        let out = soft_attention(&mut t, w, center, twin).unwrap();
        assert_eq!(t.value(out.weights)[[0]], 0.5);
        assert_eq!(t.value(out.weights)[[1]], 0.5);
    }

    #[test]
    fn soft_attention_matches_enumeration_oracle() {
        let mut t = Tape::new();
        let wv = [0.3f64, -0.4, 0.8, 0.2];
        let cv = [0.5f64, -0.7];
        let mv = [[0.1f64, 0.9], [-0.3, 0.2], [0.7, -0.5]];
        let w = leaf1(&mut t, &wv);
        let c = leaf1(&mut t, &cv);
        let m = t.leaf(arr2(&mv).into_dyn());
        let out = soft_attention(&mut t, w, c, m).unwrap();

        let leaky = |x: f64| if x >= 0.0 { x } else { LEAKY_SLOPE * x };
        let scores: Vec<f64> = mv
            .iter()
            .map(|row| leaky(wv[0] * cv[0] + wv[1] * cv[1] + wv[2] * row[0] + wv[3] * row[1]))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut value = [0.0f64; 2];
        for (wgt, row) in weights.iter().zip(&mv) {
            value[0] += wgt * row[0];
            value[1] += wgt * row[1];
        }
        for d in 0..2 {
            assert!(
                (t.value(out.values)[[d]] - leaky(value[d])).abs() < 1e-12,
                "dim {d}"
            );
        }
        for (i, w_want) in weights.iter().enumerate() {
            assert!((t.value(out.weights)[[i]] - w_want).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_attention_rejects_empty_members() {
        let mut t = Tape::new();
        let w = leaf1(&mut t, &[0.1, 0.2]);
        let c = leaf1(&mut t, &[1.0]);
        let empty = t.leaf(ArrayD::zeros(IxDyn(&[0, 1])));
        assert!(matches!(
            soft_attention(&mut t, w, c, empty),
            Err(LayerError::EmptyNeighborhood)
        ));
    }

    use ndarray::ArrayD;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hypergraph_singleton_cluster_double_leaky() {
        let structure = build_structure(&[0], &[], 1).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut t = Tape::new();
        let w = leaf1(&mut t, &[0.4, -0.6, 0.1, 0.9]); // 2*tau with tau=2
        let feats = t.leaf(arr2(&[[0.5, -0.8]]).into_dyn());
        let out = hypergraph_attention(&mut t, w, feats, &masks).unwrap();
        let leaky = |x: f64| if x >= 0.0 { x } else { LEAKY_SLOPE * x };
        assert!((t.value(out)[[0, 0]] - leaky(leaky(0.5))).abs() < 1e-15);
        assert!((t.value(out)[[0, 1]] - leaky(leaky(-0.8))).abs() < 1e-15);
    }

    #[test]
    fn hypergraph_identical_clusters_give_identical_edges() {
        // two clusters whose members carry identical features
        let structure = build_structure(&[0, 0, 1, 1], &[], 4).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut t = Tape::new();
        let w = leaf1(&mut t, &[0.4, -0.6, 0.1, 0.9]);
        let feats = t.leaf(
            arr2(&[[0.5, -0.8], [0.2, 0.3], [0.5, -0.8], [0.2, 0.3]]).into_dyn(),
        );
        let out = hypergraph_attention(&mut t, w, feats, &masks).unwrap();
        let v = t.value(out);
        for c in 0..2 {
            assert_eq!(v[[0, c]], v[[2, c]]);
            assert_eq!(v[[1, c]], v[[3, c]]);
        }
    }

    #[test]
    fn hypergraph_matches_two_step_soft_attention_oracle() {
        let structure = build_structure(&[0, 0, 1, 0], &[], 4).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let feats = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let wv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let w = leaf1(&mut t, &wv);
        let f = t.leaf(feats.clone().into_dyn());
        let fast = hypergraph_attention(&mut t, w, f, &masks).unwrap();

        // oracle: soft_attention per hyperedge with a zero center, then a
        // singleton soft_attention per node over its hyperedge embedding
        let mut edge_vals = Vec::new();
        for members in [vec![0usize, 1, 3], vec![2usize]] {
            let mut t2 = Tape::new();
            let w2 = leaf1(&mut t2, &wv);
            let center = leaf1(&mut t2, &[0.0, 0.0, 0.0]);
            let rows: Vec<f64> = members
                .iter()
                .flat_map(|&i| feats.row(i).to_vec())
                .collect();
            let m = t2.leaf(ArrayD::from_shape_vec(IxDyn(&[members.len(), 3]), rows).unwrap());
            let out = soft_attention(&mut t2, w2, center, m).unwrap();
            edge_vals.push(t2.value(out.values).clone());
        }
        for (node, &label) in structure.labels.iter().enumerate() {
            let mut t2 = Tape::new();
            let w2 = leaf1(&mut t2, &wv);
            let center = t2.leaf(feats.row(node).to_owned().into_dyn());
            let edge = edge_vals[label].clone().into_shape_clone(IxDyn(&[1, 3])).unwrap();
            let m = t2.leaf(edge);
            let out = soft_attention(&mut t2, w2, center, m).unwrap();
            for d in 0..3 {
                assert!(
                    (t.value(fast)[[node, d]] - t2.value(out.values)[[d]]).abs() < 1e-12,
                    "node {node} dim {d}"
                );
            }
        }
    }

    #[test]
    fn graph_attention_singleton_neighbor_and_isolated() {
        // 0 -- 1, 2 isolated
        let structure = build_structure(&[0, 0, 0], &[(0, 1)], 3).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut t = Tape::new();
        let w = leaf1(&mut t, &[0.4, -0.6, 0.1, 0.9]);
        let feats = t.leaf(arr2(&[[0.5, -0.8], [0.2, 0.3], [-0.7, 0.6]]).into_dyn());
        let out = graph_attention(&mut t, w, feats, &masks).unwrap();
        let leaky = |x: f64| if x >= 0.0 { x } else { LEAKY_SLOPE * x };
        let v = t.value(out);
        // node 0's only neighbor is node 1
        assert!((v[[0, 0]] - leaky(0.2)).abs() < 1e-15);
        assert!((v[[0, 1]] - leaky(0.3)).abs() < 1e-15);
        // isolated node 2 attends to itself
        assert!((v[[2, 0]] - leaky(-0.7)).abs() < 1e-15);
        assert!((v[[2, 1]] - leaky(0.6)).abs() < 1e-15);
    }

    #[test]
    fn graph_attention_path_graph_matches_enumeration() {
        // path 0 - 1 - 2
        let structure = build_structure(&[0, 0, 0], &[(0, 1), (1, 2)], 3).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let feats = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let wv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let w = leaf1(&mut t, &wv);
        let f = t.leaf(feats.clone().into_dyn());
        let out = graph_attention(&mut t, w, f, &masks).unwrap();

        let leaky = |x: f64| if x >= 0.0 { x } else { LEAKY_SLOPE * x };
        let neighbors = [vec![1usize], vec![0usize, 2], vec![1usize]];
        for (i, nb) in neighbors.iter().enumerate() {
            let scores: Vec<f64> = nb
                .iter()
                .map(|&j| {
                    leaky(
                        wv[0] * feats[[i, 0]]
                            + wv[1] * feats[[i, 1]]
                            + wv[2] * feats[[j, 0]]
                            + wv[3] * feats[[j, 1]],
                    )
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for d in 0..2 {
                let mixed: f64 = nb
                    .iter()
                    .zip(&exps)
                    .map(|(&j, e)| e / total * feats[[j, d]])
                    .sum();
                assert!((t.value(out)[[i, d]] - leaky(mixed)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_attention_non_neighbor_perturbation_leaves_row_bit_identical() {
        let structure = build_structure(&[0, 0, 0, 0], &[(0, 1), (2, 3)], 4).unwrap();
        let masks = StructureMasks::new(&structure).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut feats = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let wv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |feats: &Array2<f64>| -> Vec<f64> {
            let mut t = Tape::new();
            let w = leaf1(&mut t, &wv);
            let f = t.leaf(feats.clone().into_dyn());
            let out = graph_attention(&mut t, w, f, &masks).unwrap();
            t.value(out).iter().cloned().collect()
        };
        let before = run(&feats);
        feats[[3, 1]] += 10.0; // outside node 0's neighborhood
        let after = run(&feats);
        for d in 0..3 {
            assert_eq!(before[d], after[d], "row 0 must be bit-identical");
            assert_eq!(before[3 + d], after[3 + d], "row 1 must be bit-identical");
        }
    }

    #[test]
    fn add_norm_cancellation_and_commutativity() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0, -2.0, 0.5]]).into_dyn());
        let nx = t.scale(x, -1.0);
        let z = t.leaf(arr2(&[[0.0, 0.0, 0.0]]).into_dyn());
        let norm = LayerNormParams {
            gain: t.leaf(ArrayD::ones(IxDyn(&[3]))),
            offset: t.leaf(ArrayD::zeros(IxDyn(&[3]))),
        };
        let y = add_norm(&mut t, &norm, &[x, nx, z]).unwrap();
        assert!(t.value(y).iter().all(|v| v.abs() < 1e-9));

        let a = t.leaf(arr2(&[[0.3, 0.9, -0.4]]).into_dyn());
        let b = t.leaf(arr2(&[[1.3, -0.2, 0.8]]).into_dyn());
        let ab = add_norm(&mut t, &norm, &[a, b]).unwrap();
        let ba = add_norm(&mut t, &norm, &[b, a]).unwrap();
        assert_eq!(t.value(ab), t.value(ba));
    }

    #[test]
    fn add_norm_arity_and_shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[0.3, 0.9]]).into_dyn());
        let b = t.leaf(arr2(&[[0.3, 0.9, 1.0]]).into_dyn());
        let norm = LayerNormParams {
            gain: t.leaf(ArrayD::ones(IxDyn(&[2]))),
            offset: t.leaf(ArrayD::zeros(IxDyn(&[2]))),
        };
        assert!(matches!(add_norm(&mut t, &norm, &[a]), Err(LayerError::TooFewInputs(1))));
        assert!(matches!(add_norm(&mut t, &norm, &[a, b]), Err(LayerError::Shape { .. })));
    }

    #[test]
    fn gumbel_softmax_closed_forms() {
        let mut t = Tape::new();
        let even = leaf1(&mut t, &[0.0, 0.0]);
        let w = gumbel_softmax(&mut t, even, 1.0, NoiseMode::Zero).unwrap();
        assert_eq!(t.value(w)[[0]], 0.5);

        let scores = leaf1(&mut t, &[1.0, 0.0]);
        let w = gumbel_softmax(&mut t, scores, 1.0, NoiseMode::Zero).unwrap();
        let e = std::f64::consts::E;
        assert!((t.value(w)[[0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((t.value(w)[[0]] - 0.7311).abs() < 1e-4);
        assert!((t.value(w)[[1]] - 0.2689).abs() < 1e-4);

        let w = gumbel_softmax(&mut t, scores, 0.05, NoiseMode::Zero).unwrap();
        assert!(t.value(w)[[0]] > 0.999);
    }

    #[test]
    fn gumbel_softmax_rejects_bad_temperature() {
        let mut t = Tape::new();
        let s = leaf1(&mut t, &[1.0, 0.0]);
        assert!(matches!(
            gumbel_softmax(&mut t, s, 0.0, NoiseMode::Zero),
            Err(LayerError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn gumbel_softmax_sampled_rows_sum_to_one_and_are_seeded() {
        let mut t = Tape::new();
        let s = t.leaf(Array2::from_shape_fn((8, 5), |(i, j)| (i * j) as f64 * 0.1).into_dyn());
        let w1 = gumbel_softmax(&mut t, s, 1.5, NoiseMode::Sampled { seed: 9 }).unwrap();
        let w2 = gumbel_softmax(&mut t, s, 1.5, NoiseMode::Sampled { seed: 9 }).unwrap();
        let w3 = gumbel_softmax(&mut t, s, 1.5, NoiseMode::Sampled { seed: 10 }).unwrap();
        assert_eq!(t.value(w1), t.value(w2));
        assert_ne!(t.value(w1), t.value(w3));
        for row in t.value(w1).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gta_single_timestep_passes_value_through() {
        let mut t = Tape::new();
        let q = t.leaf(arr2(&[[0.7, -0.3]]).into_dyn());
        let k = t.leaf(arr2(&[[0.7, -0.3]]).into_dyn());
        let v = t.leaf(arr2(&[[5.0, 6.0]]).into_dyn());
        let out = gated_temporal_attention(&mut t, q, k, v, 1.5, NoiseMode::Zero).unwrap();
        assert_eq!(t.value(out.weights)[[0, 0]], 1.0);
        assert_eq!(t.value(out.values), &arr2(&[[5.0, 6.0]]).into_dyn());
    }

    #[test]
    fn gta_zero_noise_matches_matrix_oracle() {
        // tau=3, d=2, temperature 1.5
        let qv = arr2(&[[0.2, -0.5], [0.8, 0.1], [-0.4, 0.6]]);
        let kv = arr2(&[[0.3, 0.9], [-0.2, 0.4], [0.5, -0.7]]);
        let vv = arr2(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]);
        let temp = 1.5;

        let mut t = Tape::new();
        let q = t.leaf(qv.clone().into_dyn());
        let k = t.leaf(kv.clone().into_dyn());
        let v = t.leaf(vv.clone().into_dyn());
        let out = gated_temporal_attention(&mut t, q, k, v, temp, NoiseMode::Zero).unwrap();

        let scores = qv.dot(&kv.t()) / (2.0f64).sqrt();
        let mut weights = Array2::zeros((3, 3));
        for i in 0..3 {
            let row: Vec<f64> = (0..3).map(|j| scores[[i, j]] / temp).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..3 {
                weights[[i, j]] = exps[j] / total;
            }
        }
        let want = weights.dot(&vv);
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.value(out.weights)[[i, j]] - weights[[i, j]]).abs() < 1e-10);
            }
            for d in 0..2 {
                assert!((t.value(out.values)[[i, d]] - want[[i, d]]).abs() < 1e-10);
            }
        }
    }

    fn rand_grn(t: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> GrnParams {
        let mut mat =
            |t: &mut Tape| t.leaf(Array2::from_shape_fn((d, d), |_| rng.random_range(-0.7..0.7)).into_dyn());
        let w_eta1 = mat(t);
        let w_eta2 = mat(t);
        let w1 = mat(t);
        let w2 = mat(t);
        let mut vecp =
            |t: &mut Tape| t.leaf(ArrayD::from_shape_fn(IxDyn(&[d]), |_| rng.random_range(-0.3..0.3)));
        let b_eta1 = vecp(t);
        let b_eta2 = vecp(t);
        let b1 = vecp(t);
        let b2 = vecp(t);
        GrnParams {
            w_eta1,
            b_eta1,
            w_eta2,
            b_eta2,
            glu: GluParams { w1, b1, w2, b2 },
            norm: LayerNormParams {
                gain: t.leaf(ArrayD::ones(IxDyn(&[d]))),
                offset: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            },
        }
    }

    #[test]
    fn variable_selection_single_feature_is_grn_squeezed() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut t = Tape::new();
        let value_grn = rand_grn(&mut t, 1, &mut rng);
        let weight_grn = rand_grn(&mut t, 1, &mut rng);
        let xi = t.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 1]), |_| rng.random_range(-1.0..1.0)));
        let (sel, w) = variable_selection(&mut t, &value_grn, &weight_grn, xi, DropoutMode::Off).unwrap();
        assert!(t.value(w).iter().all(|&v| v == 1.0));
        let xi1 = grn(&mut t, &value_grn, xi, DropoutMode::Off).unwrap();
        assert_eq!(t.shape(sel), &[2, 3]);
        for ((n, tau, _), &v) in t.value(xi1).indexed_iter().map(|(ix, v)| ((ix[0], ix[1], ix[2]), v)) {
            assert_eq!(t.value(sel)[[n, tau]], v);
        }
    }

    #[test]
    fn variable_selection_symmetric_parameters_split_evenly() {
        // parameters invariant under feature exchange: p on the diagonal,
        // q off-diagonal, constant biases
        let mut t = Tape::new();
        let sym = |t: &mut Tape, p: f64, q: f64| {
            t.leaf(arr2(&[[p, q], [q, p]]).into_dyn())
        };
        let cvec = |t: &mut Tape, v: f64| t.leaf(arr1(&[v, v]).into_dyn());
        let mk = |t: &mut Tape| GrnParams {
            w_eta1: sym(t, 0.7, -0.2),
            b_eta1: cvec(t, 0.1),
            w_eta2: sym(t, 0.4, 0.3),
            b_eta2: cvec(t, -0.2),
            glu: GluParams {
                w1: sym(t, 0.5, 0.1),
                b1: cvec(t, 0.05),
                w2: sym(t, -0.6, 0.2),
                b2: cvec(t, 0.3),
            },
            norm: LayerNormParams { gain: cvec(t, 1.0), offset: cvec(t, 0.0) },
        };
        let value_grn = mk(&mut t);
        let weight_grn = mk(&mut t);
        // both feature slices identical
        let xi = t.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 2]), |ix| {
            (ix[0] * 3 + ix[1]) as f64 * 0.2 - 0.5
        }));
        let (_, w) = variable_selection(&mut t, &value_grn, &weight_grn, xi, DropoutMode::Off).unwrap();
        for v in t.value(w).iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn variable_selection_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t = Tape::new();
        let value_grn = rand_grn(&mut t, 3, &mut rng);
        let weight_grn = rand_grn(&mut t, 3, &mut rng);
        let xi = t.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.random_range(-1.0..1.0)));
        let (sel, w) = variable_selection(&mut t, &value_grn, &weight_grn, xi, DropoutMode::Off).unwrap();

        let xi1 = grn(&mut t, &value_grn, xi, DropoutMode::Off).unwrap();
        let logits = grn(&mut t, &weight_grn, xi, DropoutMode::Off).unwrap();
        let weights = t.softmax_last(logits);
        for n in 0..2 {
            for tau in 0..3 {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for f in 0..3 {
                    acc += t.value(weights)[[n, tau, f]] * t.value(xi1)[[n, tau, f]];
                    wsum += t.value(w)[[n, tau, f]];
                }
                assert!((t.value(sel)[[n, tau]] - acc).abs() < 1e-12);
                assert!((wsum - 1.0).abs() < 1e-9);
            }
        }
    }

    fn rand_encoder(t: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> EncoderParams {
        EncoderParams {
            query: rand_grn(t, d, rng),
            key: rand_grn(t, d, rng),
            value: rand_grn(t, d, rng),
            feed_forward: rand_grn(t, d, rng),
            norm_attn: LayerNormParams {
                gain: t.leaf(ArrayD::ones(IxDyn(&[d]))),
                offset: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            },
            norm_ff: LayerNormParams {
                gain: t.leaf(ArrayD::ones(IxDyn(&[d]))),
                offset: t.leaf(ArrayD::zeros(IxDyn(&[d]))),
            },
        }
    }

    #[test]
    fn encoder_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let p = rand_encoder(&mut t, 8, &mut rng);
        let psi = t.leaf(ArrayD::from_shape_fn(IxDyn(&[5, 12, 8]), |_| rng.random_range(-1.0..1.0)));
        let out = encoder_block(&mut t, &p, psi, 1.5, NoiseMode::Zero, DropoutMode::Off).unwrap();
        assert_eq!(t.shape(out), &[5, 12, 8]);
        assert!(t.value(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_block_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut t = Tape::new();
        let p = rand_encoder(&mut t, 2, &mut rng);
        let psi = t.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |_| rng.random_range(-1.0..1.0)));
        let fast = encoder_block(&mut t, &p, psi, 1.5, NoiseMode::Zero, DropoutMode::Off).unwrap();

        let flat = t.reshape(psi, &[1, 2, 2]);
        let q = grn(&mut t, &p.query, flat, DropoutMode::Off).unwrap();
        let k = grn(&mut t, &p.key, flat, DropoutMode::Off).unwrap();
        let v = grn(&mut t, &p.value, flat, DropoutMode::Off).unwrap();
        let attn = gated_temporal_attention(&mut t, q, k, v, 1.5, NoiseMode::Zero).unwrap();
        let psi2 = add_norm(&mut t, &p.norm_attn, &[attn.values, flat]).unwrap();
        let psi3 = grn(&mut t, &p.feed_forward, psi2, DropoutMode::Off).unwrap();
        let want = add_norm(&mut t, &p.norm_ff, &[psi2, psi3]).unwrap();

        for (a, b) in t.value(fast).iter().zip(t.value(want).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_softmax_shift_invariance_and_uniform_limit() {
        let mut t = Tape::new();
        let s = leaf1(&mut t, &[-3.0, 1.0, 4.0, 0.2]);
        let shifted = {
            let c = t.constant(arr1(&[10.0, 10.0, 10.0, 10.0]).into_dyn());
            t.add(s, c)
        };
        let w1 = gumbel_softmax(&mut t, s, 1.5, NoiseMode::Zero).unwrap();
        let w2 = gumbel_softmax(&mut t, shifted, 1.5, NoiseMode::Zero).unwrap();
        for (a, b) in t.value(w1).iter().zip(t.value(w2).iter()) {
            assert!(relative_error(*a, *b, 1e-12) < 1e-12);
        }

        let spread = leaf1(&mut t, &[-5.0, 5.0, 1.0, -2.0]);
        let w = gumbel_softmax(&mut t, spread, 1e6, NoiseMode::Zero).unwrap();
        for v in t.value(w).iter() {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_scales_and_zeroes() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::ones(IxDyn(&[1000])));
        let y = dropout(&mut t, x, DropoutMode::On { rate: 0.25, seed: 4 });
        let v = t.value(y);
        let kept = v.iter().filter(|&&x| x > 0.0).count();
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.75).abs() < 1e-12));
        assert!((700..800).contains(&kept), "kept {kept} of 1000 at rate 0.25");
    }
}
