//! The full forecasting network: spatial fusion of hypergraph and graph
//! attention over the demand window, variable selection across the dynamic
//! covariates, a gated Transformer-style encoder stack, and a dense decoder
//! emitting every horizon jointly.
//!
//! Ablation variants prune parts of this assembly; the parameter inventory is
//! derived from the configuration so checkpoints can be shape-audited on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::WindowBatch;
use crate::layers::{
    self, DropoutMode, EncoderParams, GluParams, GrnParams, LayerError, LayerNormParams,
    NoiseMode, StructureMasks,
};
use crate::mix_seed;
use crate::region::RegionStructure;
use crate::tape::{Gradients, Tape, VarId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("batch mismatch: {0}")]
    Batch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io ({path}): {source}")]
    CheckpointIo { path: String, source: std::io::Error },
    #[error("shape audit: {0}")]
    ShapeAudit(String),
}

/// Architectural toggle of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// Drop the hypergraph (area-attributes) fusion.
    NoModuleA,
    /// Drop the adjacency graph attention.
    NoModuleB,
    /// Replace the temporal encoder with the dense decoder on the selected series.
    NoModuleC,
    NoPrice,
    NoTemperature,
    /// Replace variable selection with an unweighted mean over features.
    NoVarSel,
    /// Plain softmax in temporal attention (no Gumbel noise, ever).
    SoftmaxInsteadOfGumbel,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Full,
        AblationVariant::NoModuleA,
        AblationVariant::NoModuleB,
        AblationVariant::NoModuleC,
        AblationVariant::NoPrice,
        AblationVariant::NoTemperature,
        AblationVariant::NoVarSel,
        AblationVariant::SoftmaxInsteadOfGumbel,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoModuleA => "no_module_a",
            AblationVariant::NoModuleB => "no_module_b",
            AblationVariant::NoModuleC => "no_module_c",
            AblationVariant::NoPrice => "no_price",
            AblationVariant::NoTemperature => "no_temperature",
            AblationVariant::NoVarSel => "no_var_sel",
            AblationVariant::SoftmaxInsteadOfGumbel => "softmax_instead_of_gumbel",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.id() == s)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Orientation of the layer norm in the spatial fusion add&norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseNorm {
    /// Normalize each timestep across areas: relative area levels and the
    /// temporal profile survive; statistics are shared between areas.
    AcrossAreas,
    /// Normalize each area's window over time (strict per-area locality;
    /// used by the locality test harness).
    PerArea,
}

fn default_fuse_norm() -> FuseNorm {
    FuseNorm::AcrossAreas
}

fn default_lookback() -> usize {
    12
}
fn default_clusters() -> usize {
    10
}
fn default_blocks() -> usize {
    2
}
fn default_temperature() -> f64 {
    1.5
}
fn default_d_model() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.1
}
fn default_variant() -> AblationVariant {
    AblationVariant::Full
}
fn default_horizons() -> Vec<usize> {
    vec![3, 6, 9, 12]
}

/// Architecture configuration. Defaults follow the reference setup:
/// lookback 12, 10 clusters, 2 encoder blocks, temperature 1.5, dropout 0.1,
/// horizons (3, 6, 9, 12) steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_blocks")]
    pub encoder_blocks: usize,
    /// Gumbel-Softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_variant")]
    pub variant: AblationVariant,
    #[serde(default = "default_fuse_norm")]
    pub fuse_norm: FuseNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: default_lookback(),
            clusters: default_clusters(),
            encoder_blocks: default_blocks(),
            temperature: default_temperature(),
            d_model: default_d_model(),
            horizons: default_horizons(),
            dropout: default_dropout(),
            variant: default_variant(),
            fuse_norm: default_fuse_norm(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lookback == 0 || self.clusters == 0 || self.encoder_blocks == 0 || self.d_model == 0
        {
            return Err(ModelError::Config("all counts must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(ModelError::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0) {
            return Err(ModelError::Config("horizons must be positive".into()));
        }
        Ok(())
    }

    /// Names of the stacked input features, in stack order.
    pub fn feature_order(&self) -> Vec<&'static str> {
        let mut order = vec!["demand"];
        if self.variant != AblationVariant::NoPrice {
            order.push("price");
        }
        if self.variant != AblationVariant::NoTemperature {
            order.push("temperature");
        }
        order
    }

    fn n_features(&self) -> usize {
        self.feature_order().len()
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn grn_specs(prefix: &str, d: usize, specs: &mut Vec<ParamSpec>) {
    let xav = Init::Xavier { fan_in: d, fan_out: d };
    for w in ["w_eta1", "w_eta2", "glu.w1", "glu.w2"] {
        specs.push(ParamSpec { name: format!("{prefix}.{w}"), shape: vec![d, d], init: xav });
    }
    for b in ["b_eta1", "b_eta2", "glu.b1", "glu.b2", "norm.offset"] {
        specs.push(ParamSpec { name: format!("{prefix}.{b}"), shape: vec![d], init: Init::Zeros });
    }
    specs.push(ParamSpec { name: format!("{prefix}.norm.gain"), shape: vec![d], init: Init::Ones });
}

fn norm_specs(prefix: &str, d: usize, specs: &mut Vec<ParamSpec>) {
    specs.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![d], init: Init::Ones });
    specs.push(ParamSpec { name: format!("{prefix}.offset"), shape: vec![d], init: Init::Zeros });
}

/// Full parameter inventory implied by a configuration, in canonical order.
fn inventory(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let tau = cfg.lookback;
    let d = cfg.d_model;
    let h = cfg.horizons.len();
    let f = cfg.n_features();
    let mut specs = Vec::new();

    if cfg.variant != AblationVariant::NoModuleA {
        specs.push(ParamSpec {
            name: "hyper.w_att".into(),
            shape: vec![2 * tau],
            init: Init::Xavier { fan_in: 2 * tau, fan_out: 1 },
        });
    }
    if cfg.variant != AblationVariant::NoModuleB {
        specs.push(ParamSpec {
            name: "graph.w_att".into(),
            shape: vec![2 * tau],
            init: Init::Xavier { fan_in: 2 * tau, fan_out: 1 },
        });
    }
    if cfg.fuse_norm == FuseNorm::PerArea {
        norm_specs("fuse.norm", tau, &mut specs);
    }
    if cfg.variant != AblationVariant::NoVarSel {
        grn_specs("vsn.value", f, &mut specs);
        grn_specs("vsn.weight", f, &mut specs);
    }
    if cfg.variant != AblationVariant::NoModuleC {
        specs.push(ParamSpec {
            name: "lift.w".into(),
            shape: vec![d],
            init: Init::Xavier { fan_in: 1, fan_out: d },
        });
        specs.push(ParamSpec { name: "lift.b".into(), shape: vec![d], init: Init::Zeros });
        for b in 0..cfg.encoder_blocks {
            grn_specs(&format!("enc{b}.query"), d, &mut specs);
            grn_specs(&format!("enc{b}.key"), d, &mut specs);
            grn_specs(&format!("enc{b}.value"), d, &mut specs);
            grn_specs(&format!("enc{b}.ff"), d, &mut specs);
            norm_specs(&format!("enc{b}.norm_attn"), d, &mut specs);
            norm_specs(&format!("enc{b}.norm_ff"), d, &mut specs);
        }
        specs.push(ParamSpec {
            name: "dec.w".into(),
            shape: vec![tau * d, h],
            init: Init::Xavier { fan_in: tau * d, fan_out: h },
        });
    } else {
        specs.push(ParamSpec {
            name: "dec.w".into(),
            shape: vec![tau, h],
            init: Init::Xavier { fan_in: tau, fan_out: h },
        });
    }
    specs.push(ParamSpec { name: "dec.b".into(), shape: vec![h], init: Init::Zeros });
    specs
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// All learnable tensors plus the architecture configuration.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub mode: Mode,
    /// Seed the parameters were initialized from (recorded in checkpoints).
    pub init_seed: u64,
}

/// Initializes all parameters: weights uniform in ±sqrt(6/(fan_in+fan_out)),
/// biases zero, layer-norm gains one. Deterministic for a given seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = inventory(config);
    let mut names = Vec::with_capacity(specs.len());
    let mut values = Vec::with_capacity(specs.len());
    for spec in specs {
        let arr = match spec.init {
            Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
            Init::Ones => ArrayD::ones(IxDyn(&spec.shape)),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| rng.random_range(-bound..bound))
            }
        };
        names.push(spec.name);
        values.push(arr);
    }
    Ok(ModelState {
        config: config.clone(),
        params: ParamSet { names, values },
        mode: Mode::Eval,
        init_seed: seed,
    })
}

/// Checks that a parameter set matches the inventory implied by the config.
pub fn shape_audit(params: &ParamSet, config: &ModelConfig) -> Result<(), ModelError> {
    let specs = inventory(config);
    if specs.len() != params.len() {
        return Err(ModelError::ShapeAudit(format!(
            "inventory has {} tensors, parameter set has {}",
            specs.len(),
            params.len()
        )));
    }
    for (spec, (name, value)) in specs.iter().zip(params.iter()) {
        if spec.name != name {
            return Err(ModelError::ShapeAudit(format!(
                "expected tensor `{}`, found `{}`",
                spec.name, name
            )));
        }
        if spec.shape != value.shape() {
            return Err(ModelError::ShapeAudit(format!(
                "tensor `{}`: expected shape {:?}, found {:?}",
                name,
                spec.shape,
                value.shape()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct Binder<'a> {
    names: &'a [String],
    vars: &'a [VarId],
}

impl Binder<'_> {
    fn get(&self, name: &str) -> VarId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from inventory"));
        self.vars[i]
    }

    fn grn(&self, prefix: &str) -> GrnParams {
        GrnParams {
            w_eta1: self.get(&format!("{prefix}.w_eta1")),
            b_eta1: self.get(&format!("{prefix}.b_eta1")),
            w_eta2: self.get(&format!("{prefix}.w_eta2")),
            b_eta2: self.get(&format!("{prefix}.b_eta2")),
            glu: GluParams {
                w1: self.get(&format!("{prefix}.glu.w1")),
                b1: self.get(&format!("{prefix}.glu.b1")),
                w2: self.get(&format!("{prefix}.glu.w2")),
                b2: self.get(&format!("{prefix}.glu.b2")),
            },
            norm: self.norm(&format!("{prefix}.norm")),
        }
    }

    fn norm(&self, prefix: &str) -> LayerNormParams {
        LayerNormParams {
            gain: self.get(&format!("{prefix}.gain")),
            offset: self.get(&format!("{prefix}.offset")),
        }
    }
}

/// Handles into a forward graph built on a caller-owned tape.
pub struct ForwardGraph {
    pub demand: VarId,
    pub price: VarId,
    pub temperature: VarId,
    pub param_vars: Vec<VarId>,
    pub predictions: VarId,
}

/// Records the full forward pass onto `tape`.
///
/// Per sample: the raw demand window feeds the hypergraph and graph attention
/// stages in parallel, fuses with the demand via add&norm, stacks with the
/// covariates for variable selection, lifts to `d_model`, runs the encoder
/// blocks, and decodes all horizons per area from the flattened encoding.
pub fn build_forward(
    tape: &mut Tape,
    state: &ModelState,
    batch: &WindowBatch,
    structure: &RegionStructure,
    noise_seed: u64,
) -> Result<ForwardGraph, ModelError> {
    let cfg = &state.config;
    cfg.validate()?;
    let (b, n, tau, feats) = batch.inputs.dim();
    if feats != 3 {
        return Err(ModelError::Batch(format!(
            "window batch must carry (demand, price, temperature), got {feats} features"
        )));
    }
    if tau != cfg.lookback {
        return Err(ModelError::Batch(format!(
            "batch lookback {tau} does not match configured {}",
            cfg.lookback
        )));
    }
    if structure.n_areas() != n {
        return Err(ModelError::Structure(format!(
            "structure covers {} areas, batch has {n}",
            structure.n_areas()
        )));
    }
    if batch.targets.shape()[2] != cfg.horizons.len() {
        return Err(ModelError::Batch(format!(
            "batch has {} horizons, config {}",
            batch.targets.shape()[2],
            cfg.horizons.len()
        )));
    }

    let masks = StructureMasks::new(structure)?;
    let variant = cfg.variant;

    // split the raw window into per-feature tensors [b, n, tau]
    let slice_feat = |f: usize| -> ArrayD<f64> {
        batch.inputs.index_axis(Axis(3), f).to_owned().into_dyn()
    };
    let demand = tape.leaf(slice_feat(0));
    let price = tape.leaf(slice_feat(1));
    let temperature = tape.leaf(slice_feat(2));

    let param_vars: Vec<VarId> =
        state.params.values().iter().map(|v| tape.leaf(v.clone())).collect();
    let binder = Binder { names: state.params.names(), vars: &param_vars };

    let train = state.mode == Mode::Train;
    let dropout = if train && cfg.dropout > 0.0 {
        DropoutMode::On { rate: cfg.dropout, seed: mix_seed(&[noise_seed, 0xd70]) }
    } else {
        DropoutMode::Off
    };
    let gumbel = if train && variant != AblationVariant::SoftmaxInsteadOfGumbel {
        NoiseMode::Sampled { seed: mix_seed(&[noise_seed, 0x9b1]) }
    } else {
        NoiseMode::Zero
    };

    // spatial fusion over the raw demand slice
    let mut fused_inputs = Vec::new();
    if variant != AblationVariant::NoModuleA {
        let h_a = layers::hypergraph_attention(tape, binder.get("hyper.w_att"), demand, &masks)?;
        fused_inputs.push(h_a);
    }
    if variant != AblationVariant::NoModuleB {
        let h_b = layers::graph_attention(tape, binder.get("graph.w_att"), demand, &masks)?;
        fused_inputs.push(h_b);
    }
    fused_inputs.push(demand);
    let fused = match cfg.fuse_norm {
        FuseNorm::PerArea => layers::add_norm(tape, &binder.norm("fuse.norm"), &fused_inputs)?,
        FuseNorm::AcrossAreas => {
            // normalize each timestep across areas: swap to [b, tau, n], run
            // the add&norm there with unit affine, swap back
            let swapped: Vec<VarId> =
                fused_inputs.iter().map(|&v| tape.swap_last2(v)).collect();
            let unit = layers::LayerNormParams {
                gain: tape.constant(ArrayD::ones(IxDyn(&[n]))),
                offset: tape.constant(ArrayD::zeros(IxDyn(&[n]))),
            };
            let normed = layers::add_norm(tape, &unit, &swapped)?;
            tape.swap_last2(normed)
        }
    };

    // stack selected features on a trailing axis: [b, n, tau, f]
    let mut stack = vec![tape.reshape(fused, &[b, n, tau, 1])];
    if variant != AblationVariant::NoPrice {
        stack.push(tape.reshape(price, &[b, n, tau, 1]));
    }
    if variant != AblationVariant::NoTemperature {
        stack.push(tape.reshape(temperature, &[b, n, tau, 1]));
    }
    let xi = tape.concat_last(&stack);
    let f = stack.len();

    let selected = if variant == AblationVariant::NoVarSel {
        let sum = tape.sum_last(xi);
        tape.scale(sum, 1.0 / f as f64)
    } else {
        let (sel, _weights) = layers::variable_selection(
            tape,
            &binder.grn("vsn.value"),
            &binder.grn("vsn.weight"),
            xi,
            dropout.derive(0x5e1),
        )?;
        sel
    };

    // decode
    let h_count = cfg.horizons.len();
    let predictions = if variant == AblationVariant::NoModuleC {
        let flat = tape.reshape(selected, &[b * n, tau]);
        let dec = tape.matmul(flat, binder.get("dec.w"));
        let dec = tape.add(dec, binder.get("dec.b"));
        tape.reshape(dec, &[b, n, h_count])
    } else {
        let d = cfg.d_model;
        let col = tape.reshape(selected, &[b, n, tau, 1]);
        let lifted = tape.mul(col, binder.get("lift.w"));
        let mut psi = tape.add(lifted, binder.get("lift.b"));
        for blk in 0..cfg.encoder_blocks {
            let p = EncoderParams {
                query: binder.grn(&format!("enc{blk}.query")),
                key: binder.grn(&format!("enc{blk}.key")),
                value: binder.grn(&format!("enc{blk}.value")),
                feed_forward: binder.grn(&format!("enc{blk}.ff")),
                norm_attn: binder.norm(&format!("enc{blk}.norm_attn")),
                norm_ff: binder.norm(&format!("enc{blk}.norm_ff")),
            };
            psi = layers::encoder_block(
                tape,
                &p,
                psi,
                cfg.temperature,
                gumbel.derive(blk as u64 + 1),
                dropout.derive(0xe0c + blk as u64),
            )?;
        }
        let flat = tape.reshape(psi, &[b * n, tau * d]);
        let dec = tape.matmul(flat, binder.get("dec.w"));
        let dec = tape.add(dec, binder.get("dec.b"));
        tape.reshape(dec, &[b, n, h_count])
    };

    Ok(ForwardGraph { demand, price, temperature, param_vars, predictions })
}

/// Runs the forward pass and returns predictions `[b, n, h]`.
pub fn forward(
    state: &ModelState,
    batch: &WindowBatch,
    structure: &RegionStructure,
    noise_seed: u64,
) -> Result<Array3<f64>, ModelError> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, state, batch, structure, noise_seed)?;
    let value = tape.value(graph.predictions);
    let (b, n, _) = batch.targets.dim();
    Ok(value
        .clone()
        .into_shape_clone((b, n, state.config.horizons.len()))
        .expect("prediction shape"))
}

/// Forward pass plus the gradient of the mean-squared error against the batch
/// targets. Returns `(mse, gradients aligned with the parameter set)`.
pub fn forward_loss(
    state: &ModelState,
    batch: &WindowBatch,
    structure: &RegionStructure,
    noise_seed: u64,
) -> Result<(f64, Vec<ArrayD<f64>>), ModelError> {
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, state, batch, structure, noise_seed)?;
    let target = tape.constant(batch.targets.clone().into_dyn());
    let neg = tape.scale(target, -1.0);
    let diff = tape.add(graph.predictions, neg);
    let sq = tape.mul(diff, diff);
    let sum = tape.sum_all(sq);
    let count = batch.targets.len() as f64;
    let loss_var = tape.scale(sum, 1.0 / count);
    let loss = tape.value(loss_var)[[0]];
    let grads: Gradients = tape.backward(loss_var);
    let out = graph.param_vars.iter().map(|&v| grads.get(v, &tape)).collect();
    Ok((loss, out))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"EVCPCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    feature_order: Vec<String>,
    init_seed: u64,
    mode: Mode,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// Writes named tensors with a JSON header; 64-bit little-endian payload.
/// The write goes through a temp file and rename, so readers never observe a
/// partial checkpoint.
pub(crate) fn write_blob(
    path: &Path,
    header_json: &str,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<(), ModelError> {
    let io = |source: std::io::Error| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        let hb = header_json.as_bytes();
        w.write_u64::<LittleEndian>(hb.len() as u64).map_err(io)?;
        w.write_all(hb).map_err(io)?;
        w.write_u64::<LittleEndian>(tensors.len() as u64).map_err(io)?;
        for (name, tensor) in tensors {
            let nb = name.as_bytes();
            w.write_u16::<LittleEndian>(nb.len() as u16).map_err(io)?;
            w.write_all(nb).map_err(io)?;
            w.write_u8(tensor.ndim() as u8).map_err(io)?;
            for &d in tensor.shape() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            for &v in tensor.iter() {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub(crate) fn read_blob(
    path: &Path,
) -> Result<(String, Vec<(String, ArrayD<f64>)>), ModelError> {
    let io = |source: std::io::Error| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let corrupt = |detail: &str| ModelError::Checkpoint(format!("{}: {detail}", path.display()));
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic; not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated version"))?;
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header length"))?;
    let mut hb = vec![0u8; hlen as usize];
    r.read_exact(&mut hb).map_err(|_| corrupt("truncated header"))?;
    let header = String::from_utf8(hb).map_err(|_| corrupt("header is not utf-8"))?;
    let count = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated tensor count"))?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = r.read_u16::<LittleEndian>().map_err(|_| corrupt("truncated name length"))?;
        let mut nb = vec![0u8; nlen as usize];
        r.read_exact(&mut nb).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(nb).map_err(|_| corrupt("name is not utf-8"))?;
        let ndim = r.read_u8().map_err(|_| corrupt("truncated rank"))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated shape"))? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>().map_err(|_| corrupt("truncated tensor data"))?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| corrupt(&format!("tensor `{name}`: {e}")))?;
        tensors.push((name, arr));
    }
    Ok((header, tensors))
}

/// Serializes the model (config, feature order, seed lineage, parameters).
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    save_checkpoint_with_extra(state, path, &[], BTreeMap::new())
}

/// Like [`save_checkpoint`] but with additional named tensor sections (for
/// optimizer state) and header extras. Extra tensor names must not start with
/// `param.`.
pub fn save_checkpoint_with_extra(
    state: &ModelState,
    path: &Path,
    extra_tensors: &[(String, ArrayD<f64>)],
    extra_header: BTreeMap<String, serde_json::Value>,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: state.config.clone(),
        feature_order: state.config.feature_order().iter().map(|s| s.to_string()).collect(),
        init_seed: state.init_seed,
        mode: state.mode,
        extra: extra_header,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| ModelError::Checkpoint(format!("header serialize: {e}")))?;
    let mut tensors: Vec<(String, ArrayD<f64>)> = state
        .params
        .iter()
        .map(|(n, v)| (format!("param.{n}"), v.clone()))
        .collect();
    tensors.extend(extra_tensors.iter().cloned());
    write_blob(path, &header_json, &tensors)
}

/// Loads a checkpoint, shape-audits the parameters against its config, and
/// ignores any non-parameter sections.
pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let (state, _, _) = load_checkpoint_full(path)?;
    Ok(state)
}

/// Loads a checkpoint along with the extra tensors and header extras.
pub fn load_checkpoint_full(
    path: &Path,
) -> Result<
    (ModelState, Vec<(String, ArrayD<f64>)>, BTreeMap<String, serde_json::Value>),
    ModelError,
> {
    let (header_json, tensors) = read_blob(path)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)
        .map_err(|e| ModelError::Checkpoint(format!("header parse: {e}")))?;
    let mut by_name: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut extra = Vec::new();
    for (name, arr) in tensors {
        if let Some(stripped) = name.strip_prefix("param.") {
            by_name.insert(stripped.to_string(), arr);
        } else {
            extra.push((name, arr));
        }
    }
    let specs = inventory(&header.config);
    let mut names = Vec::with_capacity(specs.len());
    let mut values = Vec::with_capacity(specs.len());
    for spec in &specs {
        let arr = by_name.remove(&spec.name).ok_or_else(|| {
            ModelError::ShapeAudit(format!("checkpoint is missing tensor `{}`", spec.name))
        })?;
        names.push(spec.name.clone());
        values.push(arr);
    }
    if let Some(stray) = by_name.keys().next() {
        return Err(ModelError::ShapeAudit(format!(
            "checkpoint has tensor `{stray}` not in the inventory"
        )));
    }
    let params = ParamSet { names, values };
    shape_audit(&params, &header.config)?;
    Ok((
        ModelState {
            config: header.config,
            params,
            mode: header.mode,
            init_seed: header.init_seed,
        },
        extra,
        header.extra,
    ))
}
