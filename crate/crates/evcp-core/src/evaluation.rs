//! Metric suite (RMSE, R², RAE, MAE per horizon), persistence baseline,
//! the ablation matrix runner, and the finite-difference gradient
//! verification harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SplitIndex, WindowBatch};
use crate::layers::{self, DropoutMode, NoiseMode};
use crate::model::{build_forward, init_model, AblationVariant, ModelConfig, ModelError};
use crate::region::{build_structure, RegionStructure};
use crate::tape::{finite_difference, relative_error, Tape, VarId};
use crate::training::{predict, train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("metrics need at least 2 (sample, area) pairs per horizon")]
    TooFewSamples,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Metrics of one horizon, pooled over all (sample, area) pairs. `rae` and
/// `r2` are `None` when the targets have zero variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub offset_steps: usize,
    pub minutes: u64,
    pub rmse: f64,
    pub mae: f64,
    pub rae: Option<f64>,
    pub r2: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAverages {
    pub rmse: f64,
    pub mae: f64,
    pub rae: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
    pub average: MetricAverages,
}

/// Standard definitions per horizon slice: `RMSE = sqrt(mean(e^2))`,
/// `MAE = mean|e|`, `RAE = sum|e| / sum|y - mean(y)|`,
/// `R2 = 1 - sum(e^2) / sum((y - mean(y))^2)`.
pub fn metrics(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    horizon_offsets: &[usize],
    step_minutes: u32,
) -> Result<MetricReport, EvalError> {
    if pred.dim() != target.dim() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", pred.dim(), target.dim())));
    }
    let (s, n, h) = pred.dim();
    if h != horizon_offsets.len() {
        return Err(EvalError::Shape(format!(
            "{h} horizon slices vs {} offsets",
            horizon_offsets.len()
        )));
    }
    if s * n < 2 {
        return Err(EvalError::TooFewSamples);
    }
    let mut horizons = Vec::with_capacity(h);
    for (hi, &offset) in horizon_offsets.iter().enumerate() {
        let count = (s * n) as f64;
        let mut sse = 0.0;
        let mut sae = 0.0;
        let mut mean_y = 0.0;
        for si in 0..s {
            for ni in 0..n {
                let (p, y) = (pred[[si, ni, hi]], target[[si, ni, hi]]);
                sse += (p - y) * (p - y);
                sae += (p - y).abs();
                mean_y += y;
            }
        }
        mean_y /= count;
        let mut dev_abs = 0.0;
        let mut dev_sq = 0.0;
        for si in 0..s {
            for ni in 0..n {
                let y = target[[si, ni, hi]];
                dev_abs += (y - mean_y).abs();
                dev_sq += (y - mean_y) * (y - mean_y);
            }
        }
        horizons.push(HorizonMetrics {
            offset_steps: offset,
            minutes: offset as u64 * step_minutes as u64,
            rmse: (sse / count).sqrt(),
            mae: sae / count,
            rae: (dev_abs > 0.0).then(|| sae / dev_abs),
            r2: (dev_sq > 0.0).then(|| 1.0 - sse / dev_sq),
            samples: s * n,
        });
    }
    let hf = horizons.len() as f64;
    let average = MetricAverages {
        rmse: horizons.iter().map(|m| m.rmse).sum::<f64>() / hf,
        mae: horizons.iter().map(|m| m.mae).sum::<f64>() / hf,
        rae: horizons
            .iter()
            .map(|m| m.rae)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / hf),
        r2: horizons
            .iter()
            .map(|m| m.r2)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / hf),
    };
    Ok(MetricReport { horizons, average })
}

/// Repeats the last observed demand value of each window at every horizon.
pub fn persistence_baseline(batch: &WindowBatch) -> Array3<f64> {
    let (s, n, tau, _) = batch.inputs.dim();
    let h = batch.targets.shape()[2];
    let mut out = Array3::zeros((s, n, h));
    for si in 0..s {
        for ni in 0..n {
            let last = batch.inputs[[si, ni, tau - 1, 0]];
            for hi in 0..h {
                out[[si, ni, hi]] = last;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

/// Everything a training run needs, already split and normalized.
pub struct AblationInputs<'a> {
    pub demand: &'a crate::dataset::DemandSeries,
    pub covariates: &'a crate::dataset::CovariateSeries,
    pub split: &'a SplitIndex,
    pub structure: &'a RegionStructure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub report: MetricReport,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains each variant from a fresh initialization with the same base seed
/// and reports test metrics. The `full` row is bit-identical to a plain
/// train-then-evaluate run with the same seeds.
pub fn run_ablation(
    variants: &[AblationVariant],
    inputs: &AblationInputs<'_>,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Vec<AblationRun>, EvalError> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = ModelConfig { variant, ..base_cfg.clone() };
        let (report, history) = train_and_score(&cfg, inputs, train_cfg, init_seed)?;
        rows.push(AblationRun {
            variant: variant.id().to_string(),
            report,
            best_epoch: history.best_epoch,
            best_val_loss: history.best_val_loss,
        });
    }
    Ok(rows)
}

/// Train one configuration and score it on the test split.
pub fn train_and_score(
    cfg: &ModelConfig,
    inputs: &AblationInputs<'_>,
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(MetricReport, TrainHistory), EvalError> {
    let (train_w, val_w, test_w) = crate::training::split_windows(
        inputs.demand,
        inputs.covariates,
        inputs.split,
        cfg.lookback,
        &cfg.horizons,
    )
    .map_err(|e| EvalError::Shape(e.to_string()))?;
    let state = init_model(cfg, init_seed)?;
    let (best, history) = train(state, &train_w, &val_w, inputs.structure, train_cfg)?;
    let preds = predict(&best, &test_w, inputs.structure, train_cfg.batch_size)?;
    let report = metrics(&preds, &test_w.targets, &cfg.horizons, inputs.demand.step_minutes)?;
    Ok((report, history))
}

/// Writes `metrics.json`: `{variant: MetricReport}`.
pub fn write_metrics_json(
    path: &Path,
    rows: &BTreeMap<String, MetricReport>,
) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(rows).expect("serializable");
    std::fs::write(path, json)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Writes the flat `metrics.csv` keyed by variant x horizon x metric.
pub fn write_metrics_csv(
    path: &Path,
    rows: &BTreeMap<String, MetricReport>,
) -> Result<(), EvalError> {
    let mut out = String::from("variant,horizon_steps,horizon_minutes,rmse,r2,rae,mae,samples\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (variant, report) in rows {
        for m in &report.horizons {
            let _ = writeln!(
                out,
                "{variant},{},{},{},{},{},{},{}",
                m.offset_steps,
                m.minutes,
                m.rmse,
                opt(m.r2),
                opt(m.rae),
                m.mae,
                m.samples
            );
        }
        let a = &report.average;
        let _ = writeln!(
            out,
            "{variant},average,,{},{},{},{},",
            a.rmse,
            opt(a.r2),
            opt(a.rae),
            a.mae
        );
    }
    std::fs::write(path, out)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Gradient verification harness
// ---------------------------------------------------------------------------

/// Finite-difference comparison for one tensor of a layer scenario.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub layer: String,
    pub trials: usize,
    pub tolerance: f64,
    pub per_tensor: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Tensors whose worst relative error exceeds the tolerance.
    pub fn offenders(&self) -> Vec<&str> {
        self.per_tensor
            .iter()
            .filter(|t| !(t.max_rel_err < self.tolerance))
            .map(|t| t.tensor.as_str())
            .collect()
    }
}

/// Layer ids accepted by [`check_gradients`].
pub const GRADCHECK_LAYERS: [&str; 12] = [
    "elu",
    "glu",
    "grn",
    "soft_attention",
    "hypergraph_attention",
    "graph_attention",
    "add_norm",
    "gumbel_softmax",
    "gated_temporal_attention",
    "variable_selection",
    "encoder_block",
    "full_forward",
];

struct Scenario {
    /// Named tensors; every entry is differentiated.
    tensors: Vec<(String, Vec<usize>)>,
    /// Builds the graph and returns the scalar loss node.
    build: Box<dyn Fn(&mut Tape, &[VarId]) -> VarId>,
}

fn grn_tensor_specs(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for w in ["w_eta1", "w_eta2", "glu.w1", "glu.w2"] {
        out.push((format!("{prefix}.{w}"), vec![d, d]));
    }
    for b in ["b_eta1", "b_eta2", "glu.b1", "glu.b2", "norm.gain", "norm.offset"] {
        out.push((format!("{prefix}.{b}"), vec![d]));
    }
}

fn bind_grn(vars: &[VarId], offset: usize) -> layers::GrnParams {
    layers::GrnParams {
        w_eta1: vars[offset],
        w_eta2: vars[offset + 1],
        glu: layers::GluParams {
            w1: vars[offset + 2],
            w2: vars[offset + 3],
            b1: vars[offset + 6],
            b2: vars[offset + 7],
        },
        b_eta1: vars[offset + 4],
        b_eta2: vars[offset + 5],
        norm: layers::LayerNormParams { gain: vars[offset + 8], offset: vars[offset + 9] },
    }
}

const GRN_TENSORS: usize = 10;

fn scenario_for(layer: &str) -> Result<Scenario, EvalError> {
    let sum = |t: &mut Tape, v: VarId| t.sum_all(v);
    match layer {
        "elu" => Ok(Scenario {
            tensors: vec![("x".into(), vec![7])],
            build: Box::new(move |t, v| {
                let y = layers::elu(t, v[0]);
                sum(t, y)
            }),
        }),
        "glu" => Ok(Scenario {
            tensors: vec![
                ("x".into(), vec![3, 4]),
                ("w1".into(), vec![4, 4]),
                ("b1".into(), vec![4]),
                ("w2".into(), vec![4, 4]),
                ("b2".into(), vec![4]),
            ],
            build: Box::new(move |t, v| {
                let p = layers::GluParams { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                let y = layers::glu(t, &p, v[0]).unwrap();
                sum(t, y)
            }),
        }),
        "grn" => {
            let mut tensors = vec![("x".into(), vec![3, 4])];
            grn_tensor_specs("grn", 4, &mut tensors);
            Ok(Scenario {
                tensors,
                build: Box::new(move |t, v| {
                    let p = bind_grn(v, 1);
                    let y = layers::grn(t, &p, v[0], DropoutMode::Off).unwrap();
                    sum(t, y)
                }),
            })
        }
        "soft_attention" => Ok(Scenario {
            tensors: vec![
                ("w_att".into(), vec![6]),
                ("center".into(), vec![3]),
                ("members".into(), vec![4, 3]),
            ],
            build: Box::new(move |t, v| {
                let out = layers::soft_attention(t, v[0], v[1], v[2]).unwrap();
                sum(t, out.values)
            }),
        }),
        "hypergraph_attention" => {
            let structure = build_structure(&[0, 1, 0, 2, 1], &[], 5).unwrap();
            Ok(Scenario {
                tensors: vec![("w_att".into(), vec![8]), ("feats".into(), vec![5, 4])],
                build: Box::new(move |t, v| {
                    let masks = layers::StructureMasks::new(&structure).unwrap();
                    let y = layers::hypergraph_attention(t, v[0], v[1], &masks).unwrap();
                    sum(t, y)
                }),
            })
        }
        "graph_attention" => {
            let structure =
                build_structure(&[0, 0, 0, 0, 0], &[(0, 1), (1, 2), (2, 3)], 5).unwrap();
            Ok(Scenario {
                tensors: vec![("w_att".into(), vec![8]), ("feats".into(), vec![5, 4])],
                build: Box::new(move |t, v| {
                    let masks = layers::StructureMasks::new(&structure).unwrap();
                    let y = layers::graph_attention(t, v[0], v[1], &masks).unwrap();
                    sum(t, y)
                }),
            })
        }
        "add_norm" => Ok(Scenario {
            tensors: vec![
                ("a".into(), vec![3, 5]),
                ("b".into(), vec![3, 5]),
                ("c".into(), vec![3, 5]),
                ("gain".into(), vec![5]),
                ("offset".into(), vec![5]),
            ],
            build: Box::new(move |t, v| {
                let norm = layers::LayerNormParams { gain: v[3], offset: v[4] };
                let y = layers::add_norm(t, &norm, &[v[0], v[1], v[2]]).unwrap();
                sum(t, y)
            }),
        }),
        "gumbel_softmax" => Ok(Scenario {
            tensors: vec![("scores".into(), vec![4, 6]), ("probe".into(), vec![4, 6])],
            build: Box::new(move |t, v| {
                let w = layers::gumbel_softmax(t, v[0], 1.5, NoiseMode::Zero).unwrap();
                // weight by a probe so the row-stochastic output has nonzero grads
                let weighted = t.mul(w, v[1]);
                sum(t, weighted)
            }),
        }),
        "gated_temporal_attention" => Ok(Scenario {
            tensors: vec![
                ("q".into(), vec![4, 3]),
                ("k".into(), vec![4, 3]),
                ("v".into(), vec![4, 3]),
            ],
            build: Box::new(move |t, v| {
                let out =
                    layers::gated_temporal_attention(t, v[0], v[1], v[2], 1.5, NoiseMode::Zero)
                        .unwrap();
                sum(t, out.values)
            }),
        }),
        "variable_selection" => {
            let mut tensors = vec![("xi".into(), vec![2, 3, 3])];
            grn_tensor_specs("value", 3, &mut tensors);
            grn_tensor_specs("weight", 3, &mut tensors);
            Ok(Scenario {
                tensors,
                build: Box::new(move |t, v| {
                    let value = bind_grn(v, 1);
                    let weight = bind_grn(v, 1 + GRN_TENSORS);
                    let (sel, _) =
                        layers::variable_selection(t, &value, &weight, v[0], DropoutMode::Off)
                            .unwrap();
                    sum(t, sel)
                }),
            })
        }
        "encoder_block" => {
            let mut tensors = vec![("psi".into(), vec![2, 4, 3])];
            for p in ["query", "key", "value", "ff"] {
                grn_tensor_specs(p, 3, &mut tensors);
            }
            tensors.push(("norm_attn.gain".into(), vec![3]));
            tensors.push(("norm_attn.offset".into(), vec![3]));
            tensors.push(("norm_ff.gain".into(), vec![3]));
            tensors.push(("norm_ff.offset".into(), vec![3]));
            Ok(Scenario {
                tensors,
                build: Box::new(move |t, v| {
                    let p = layers::EncoderParams {
                        query: bind_grn(v, 1),
                        key: bind_grn(v, 1 + GRN_TENSORS),
                        value: bind_grn(v, 1 + 2 * GRN_TENSORS),
                        feed_forward: bind_grn(v, 1 + 3 * GRN_TENSORS),
                        norm_attn: layers::LayerNormParams {
                            gain: v[1 + 4 * GRN_TENSORS],
                            offset: v[2 + 4 * GRN_TENSORS],
                        },
                        norm_ff: layers::LayerNormParams {
                            gain: v[3 + 4 * GRN_TENSORS],
                            offset: v[4 + 4 * GRN_TENSORS],
                        },
                    };
                    let y =
                        layers::encoder_block(t, &p, v[0], 1.5, NoiseMode::Zero, DropoutMode::Off)
                            .unwrap();
                    sum(t, y)
                }),
            })
        }
        "full_forward" => Err(EvalError::UnknownLayer(
            "use check_full_forward_gradients for the end-to-end case".into(),
        )),
        other => Err(EvalError::UnknownLayer(other.to_string())),
    }
}

fn run_scenario_check(
    layer: &str,
    scenario: &Scenario,
    trials: usize,
    tolerance: f64,
    fault: Option<&str>,
) -> GradCheckReport {
    let mut per_tensor: Vec<TensorCheck> = scenario
        .tensors
        .iter()
        .map(|(name, _)| TensorCheck { tensor: name.clone(), max_rel_err: 0.0 })
        .collect();
    let sizes: Vec<usize> = scenario.tensors.iter().map(|(_, s)| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();

    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(&[
            0x6c4d,
            layer.len() as u64,
            layer.as_bytes().iter().map(|&b| b as u64).sum(),
            trial as u64,
        ]));
        let x0: Vec<f64> = (0..total).map(|_| rng.random_range(-1.2..1.2)).collect();

        let unflatten = |x: &[f64], tape: &mut Tape| -> Vec<VarId> {
            let mut vars = Vec::with_capacity(scenario.tensors.len());
            let mut off = 0;
            for ((_, shape), &len) in scenario.tensors.iter().zip(&sizes) {
                let arr = ArrayD::from_shape_vec(IxDyn(shape), x[off..off + len].to_vec()).unwrap();
                vars.push(tape.leaf(arr));
                off += len;
            }
            vars
        };

        let mut eval = |x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let vars = unflatten(x, &mut tape);
            let loss = (scenario.build)(&mut tape, &vars);
            tape.value(loss)[[0]]
        };
        let fd = finite_difference(&mut eval, &x0, 1e-5);

        let mut tape = Tape::new();
        let vars = unflatten(&x0, &mut tape);
        let loss = (scenario.build)(&mut tape, &vars);
        let grads = tape.backward(loss);

        let mut off = 0;
        for (i, ((name, _), &len)) in scenario.tensors.iter().zip(&sizes).enumerate() {
            let mut analytic: Vec<f64> = grads.get(vars[i], &tape).iter().cloned().collect();
            if fault == Some(name.as_str()) {
                for a in analytic.iter_mut() {
                    *a += 1.0; // injected corruption for the harness self-test
                }
            }
            for (a, f) in analytic.iter().zip(&fd[off..off + len]) {
                let rel = relative_error(*a, *f, 1e-6);
                if rel > per_tensor[i].max_rel_err {
                    per_tensor[i].max_rel_err = rel;
                }
            }
            off += len;
        }
    }
    let passed = per_tensor.iter().all(|t| t.max_rel_err < tolerance);
    GradCheckReport { layer: layer.to_string(), trials, tolerance, per_tensor, passed }
}

/// Compares analytic gradients against central finite differences for a
/// registered layer over randomized trials.
pub fn check_gradients(layer: &str, trials: usize, tolerance: f64) -> Result<GradCheckReport, EvalError> {
    check_gradients_with_fault(layer, trials, tolerance, None)
}

/// Like [`check_gradients`] but with an optional corruption of one tensor's
/// analytic gradient; the report then fails naming that tensor.
pub fn check_gradients_with_fault(
    layer: &str,
    trials: usize,
    tolerance: f64,
    fault: Option<&str>,
) -> Result<GradCheckReport, EvalError> {
    let scenario = scenario_for(layer)?;
    Ok(run_scenario_check(layer, &scenario, trials, tolerance, fault))
}

/// End-to-end gradient check: d(MSE)/d(parameters and inputs) on a toy
/// one-sample batch, against central finite differences.
pub fn check_full_forward_gradients(tolerance: f64) -> Result<GradCheckReport, EvalError> {
    check_full_forward_gradients_batched(1, tolerance)
}

/// Like [`check_full_forward_gradients`] with a configurable sample count,
/// exercising the batched code paths.
pub fn check_full_forward_gradients_batched(
    b: usize,
    tolerance: f64,
) -> Result<GradCheckReport, EvalError> {
    let cfg = ModelConfig {
        lookback: 12,
        clusters: 2,
        encoder_blocks: 1,
        d_model: 4,
        horizons: vec![3, 6, 9, 12],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let n = 3usize;
    let structure = build_structure(&[0, 1, 0], &[(0, 1), (1, 2)], n).unwrap();
    let state = init_model(&cfg, 0xfeed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xf00d);
    let tau = cfg.lookback;
    let inputs = ndarray::Array4::from_shape_fn((b, n, tau, 3), |_| rng.random_range(0.05..0.95));
    let targets = Array3::from_shape_fn((b, n, 4), |_| rng.random_range(0.05..0.95));
    let batch = WindowBatch {
        inputs,
        targets: targets.clone(),
        horizon_offsets: cfg.horizons.clone(),
        anchors: vec![tau - 1; b],
    };

    // flatten parameters then the three input tensors
    let mut names: Vec<String> = state.params.names().to_vec();
    names.extend(["input.demand".into(), "input.price".into(), "input.temperature".into()]);
    let param_vals: Vec<ArrayD<f64>> = state.params.values().to_vec();
    let sizes: Vec<usize> = param_vals
        .iter()
        .map(|v| v.len())
        .chain(std::iter::repeat_n(b * n * tau, 3))
        .collect();
    let mut x0: Vec<f64> = param_vals.iter().flat_map(|v| v.iter().cloned()).collect();
    for f in 0..3 {
        x0.extend(batch.inputs.index_axis(ndarray::Axis(3), f).iter().cloned());
    }

    let eval_with = |x: &[f64]| -> f64 {
        let mut st = state.clone();
        let mut off = 0;
        for v in st.params.values_mut() {
            let len = v.len();
            for (slot, &val) in v.iter_mut().zip(&x[off..off + len]) {
                *slot = val;
            }
            off += len;
        }
        let mut b2 = batch.clone();
        for f in 0..3 {
            let len = sizes[sizes.len() - 3 + f];
            for (slot, &val) in
                b2.inputs.index_axis_mut(ndarray::Axis(3), f).iter_mut().zip(&x[off..off + len])
            {
                *slot = val;
            }
            off += len;
        }
        let mut tape = Tape::new();
        let graph = build_forward(&mut tape, &st, &b2, &structure, 0).unwrap();
        let tgt = tape.constant(b2.targets.clone().into_dyn());
        let neg = tape.scale(tgt, -1.0);
        let diff = tape.add(graph.predictions, neg);
        let sq = tape.mul(diff, diff);
        let total = tape.sum_all(sq);
        let loss = tape.scale(total, 1.0 / b2.targets.len() as f64);
        tape.value(loss)[[0]]
    };
    let mut eval = eval_with;
    let fd = finite_difference(&mut eval, &x0, 1e-5);

    // analytic gradients from one tape
    let mut tape = Tape::new();
    let graph = build_forward(&mut tape, &state, &batch, &structure, 0)?;
    let tgt = tape.constant(batch.targets.clone().into_dyn());
    let neg = tape.scale(tgt, -1.0);
    let diff = tape.add(graph.predictions, neg);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    let loss = tape.scale(total, 1.0 / batch.targets.len() as f64);
    let grads = tape.backward(loss);

    let mut analytic: Vec<f64> = Vec::with_capacity(x0.len());
    for &v in &graph.param_vars {
        analytic.extend(grads.get(v, &tape).iter().cloned());
    }
    for v in [graph.demand, graph.price, graph.temperature] {
        analytic.extend(grads.get(v, &tape).iter().cloned());
    }

    let mut per_tensor = Vec::with_capacity(names.len());
    let mut off = 0;
    for (name, &len) in names.iter().zip(&sizes) {
        let mut max_rel: f64 = 0.0;
        for (a, f) in analytic[off..off + len].iter().zip(&fd[off..off + len]) {
            max_rel = max_rel.max(relative_error(*a, *f, 1e-6));
        }
        per_tensor.push(TensorCheck { tensor: name.clone(), max_rel_err: max_rel });
        off += len;
    }
    let passed = per_tensor.iter().all(|t| t.max_rel_err < tolerance);
    Ok(GradCheckReport {
        layer: "full_forward".into(),
        trials: 1,
        tolerance,
        per_tensor,
        passed,
    })
}
