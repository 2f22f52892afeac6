//! Full-composition oracle: the complete forward pass rebuilt with plain
//! loops over `ndarray` values (no tape), compared against the production
//! path on fixed small instances. Every stage follows its own closed-form
//! definition, so agreement here checks the model's plumbing end to end.

use ndarray::{Array1, Array2, Array3, Array4};

use evcp_core::dataset::WindowBatch;
use evcp_core::model::{forward, init_model, FuseNorm, ModelConfig, ModelState};
use evcp_core::region::{build_structure, RegionStructure};

const LEAKY: f64 = 0.2;
const LN_EPS: f64 = 1e-5;

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY * x
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn layer_norm(row: &[f64], gain: &[f64], offset: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain[i] + offset[i])
        .collect()
}

/// Named-parameter view into the model state, so the oracle shares values
/// (but no code) with the production path.
struct Params<'a>(&'a ModelState);

impl Params<'_> {
    fn vec(&self, name: &str) -> Vec<f64> {
        self.0
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .iter()
            .cloned()
            .collect()
    }

    fn mat(&self, name: &str) -> Array2<f64> {
        let arr = self.0.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
        arr.clone().into_dimensionality::<ndarray::Ix2>().unwrap()
    }
}

/// `GRN(x) = LayerNorm(x + GLU(W2 ELU(W1 x + b1) + b2))` on a plain vector.
fn oracle_grn(p: &Params, prefix: &str, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let w_eta1 = p.mat(&format!("{prefix}.w_eta1"));
    let b_eta1 = p.vec(&format!("{prefix}.b_eta1"));
    let w_eta2 = p.mat(&format!("{prefix}.w_eta2"));
    let b_eta2 = p.vec(&format!("{prefix}.b_eta2"));
    let w1 = p.mat(&format!("{prefix}.glu.w1"));
    let b1 = p.vec(&format!("{prefix}.glu.b1"));
    let w2 = p.mat(&format!("{prefix}.glu.w2"));
    let b2 = p.vec(&format!("{prefix}.glu.b2"));
    let gain = p.vec(&format!("{prefix}.norm.gain"));
    let offset = p.vec(&format!("{prefix}.norm.offset"));

    let affine = |w: &Array2<f64>, b: &[f64], v: &[f64]| -> Vec<f64> {
        (0..w.ncols())
            .map(|o| (0..w.nrows()).map(|i| v[i] * w[[i, o]]).sum::<f64>() + b[o])
            .collect()
    };
    let eta1: Vec<f64> =
        affine(&w_eta1, &b_eta1, x).iter().map(|&v| if v >= 0.0 { v } else { v.exp() - 1.0 }).collect();
    let eta2 = affine(&w_eta2, &b_eta2, &eta1);
    let lin = affine(&w1, &b1, &eta2);
    let gate = affine(&w2, &b2, &eta2);
    let glu: Vec<f64> =
        lin.iter().zip(&gate).map(|(l, g)| l * (1.0 / (1.0 + (-g).exp()))).collect();
    let sum: Vec<f64> = x.iter().zip(&glu).map(|(a, b)| a + b).collect();
    let _ = d;
    layer_norm(&sum, &gain, &offset)
}

/// Two-step hyperedge attention with an entity-free (zero) edge center.
fn oracle_hypergraph(w_att: &[f64], feats: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let (n, tau) = feats.dim();
    let clusters = labels.iter().max().unwrap() + 1;
    let mut edges = Array2::zeros((clusters, tau));
    for c in 0..clusters {
        let members: Vec<usize> = (0..n).filter(|&a| labels[a] == c).collect();
        let scores: Vec<f64> = members
            .iter()
            .map(|&a| leaky((0..tau).map(|t| w_att[tau + t] * feats[[a, t]]).sum::<f64>()))
            .collect();
        let weights = softmax(&scores);
        for t in 0..tau {
            let mix: f64 = members.iter().zip(&weights).map(|(&a, w)| w * feats[[a, t]]).sum();
            edges[[c, t]] = leaky(mix);
        }
    }
    let mut out = Array2::zeros((n, tau));
    for a in 0..n {
        for t in 0..tau {
            // singleton soft attention over the node's one hyperedge
            out[[a, t]] = leaky(edges[[labels[a], t]]);
        }
    }
    out
}

fn oracle_graph(w_att: &[f64], feats: &Array2<f64>, structure: &RegionStructure) -> Array2<f64> {
    let (n, tau) = feats.dim();
    let mut out = Array2::zeros((n, tau));
    for i in 0..n {
        let neighbors: Vec<usize> = if structure.isolated[i] {
            vec![i]
        } else {
            (0..n).filter(|&j| structure.adjacency[[i, j]] > 0.0).collect()
        };
        let scores: Vec<f64> = neighbors
            .iter()
            .map(|&j| {
                let mut s = 0.0;
                for t in 0..tau {
                    s += w_att[t] * feats[[i, t]] + w_att[tau + t] * feats[[j, t]];
                }
                leaky(s)
            })
            .collect();
        let weights = softmax(&scores);
        for t in 0..tau {
            let mix: f64 = neighbors.iter().zip(&weights).map(|(&j, w)| w * feats[[j, t]]).sum();
            out[[i, t]] = leaky(mix);
        }
    }
    out
}

/// Whole forward pass for one sample in eval mode (zero noise, no dropout).
fn oracle_forward_sample(
    state: &ModelState,
    structure: &RegionStructure,
    demand: &Array2<f64>,
    price: &Array2<f64>,
    temperature: &Array2<f64>,
) -> Array2<f64> {
    let p = Params(state);
    let cfg = &state.config;
    let (n, tau) = demand.dim();
    let d = cfg.d_model;

    let h_a = oracle_hypergraph(&p.vec("hyper.w_att"), demand, &structure.labels);
    let h_b = oracle_graph(&p.vec("graph.w_att"), demand, structure);

    // fusion: sum, then normalize each timestep across areas (unit affine)
    let mut fused = Array2::zeros((n, tau));
    assert_eq!(cfg.fuse_norm, FuseNorm::AcrossAreas);
    for t in 0..tau {
        let col: Vec<f64> =
            (0..n).map(|a| h_a[[a, t]] + h_b[[a, t]] + demand[[a, t]]).collect();
        let normed = layer_norm(&col, &vec![1.0; n], &vec![0.0; n]);
        for a in 0..n {
            fused[[a, t]] = normed[a];
        }
    }

    // variable selection over (H, price, temperature) per (area, timestep)
    let mut selected = Array2::zeros((n, tau));
    for a in 0..n {
        for t in 0..tau {
            let xi = [fused[[a, t]], price[[a, t]], temperature[[a, t]]];
            let xi1 = oracle_grn(&p, "vsn.value", &xi);
            let logits = oracle_grn(&p, "vsn.weight", &xi);
            let weights = softmax(&logits);
            selected[[a, t]] = weights.iter().zip(&xi1).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    // lift each scalar to d_model, run the encoder blocks per area
    let lift_w = p.vec("lift.w");
    let lift_b = p.vec("lift.b");
    let mut psi = vec![Array2::zeros((tau, d)); n];
    for a in 0..n {
        for t in 0..tau {
            for k in 0..d {
                psi[a][[t, k]] = selected[[a, t]] * lift_w[k] + lift_b[k];
            }
        }
    }
    for blk in 0..cfg.encoder_blocks {
        let na_gain = p.vec(&format!("enc{blk}.norm_attn.gain"));
        let na_off = p.vec(&format!("enc{blk}.norm_attn.offset"));
        let nf_gain = p.vec(&format!("enc{blk}.norm_ff.gain"));
        let nf_off = p.vec(&format!("enc{blk}.norm_ff.offset"));
        for block_in in psi.iter_mut() {
            let mut q = Array2::zeros((tau, d));
            let mut k = Array2::zeros((tau, d));
            let mut v = Array2::zeros((tau, d));
            for t in 0..tau {
                let row: Vec<f64> = block_in.row(t).to_vec();
                q.row_mut(t).assign(&Array1::from(oracle_grn(&p, &format!("enc{blk}.query"), &row)));
                k.row_mut(t).assign(&Array1::from(oracle_grn(&p, &format!("enc{blk}.key"), &row)));
                v.row_mut(t).assign(&Array1::from(oracle_grn(&p, &format!("enc{blk}.value"), &row)));
            }
            // gated temporal attention with zero noise = tempered softmax rows
            let mut attn = Array2::zeros((tau, d));
            for i in 0..tau {
                let scores: Vec<f64> = (0..tau)
                    .map(|j| {
                        (0..d).map(|x| q[[i, x]] * k[[j, x]]).sum::<f64>()
                            / (d as f64).sqrt()
                            / cfg.temperature
                    })
                    .collect();
                let weights = softmax(&scores);
                for x in 0..d {
                    attn[[i, x]] = (0..tau).map(|j| weights[j] * v[[j, x]]).sum::<f64>();
                }
            }
            let mut psi2 = Array2::zeros((tau, d));
            for t in 0..tau {
                let sum: Vec<f64> =
                    (0..d).map(|x| attn[[t, x]] + block_in[[t, x]]).collect();
                psi2.row_mut(t).assign(&Array1::from(layer_norm(&sum, &na_gain, &na_off)));
            }
            let mut psi4 = Array2::zeros((tau, d));
            for t in 0..tau {
                let row: Vec<f64> = psi2.row(t).to_vec();
                let ff = oracle_grn(&p, &format!("enc{blk}.ff"), &row);
                let sum: Vec<f64> = (0..d).map(|x| psi2[[t, x]] + ff[x]).collect();
                psi4.row_mut(t).assign(&Array1::from(layer_norm(&sum, &nf_gain, &nf_off)));
            }
            *block_in = psi4;
        }
    }

    // dense decode per area from the flattened [tau x d] encoding
    let dec_w = p.mat("dec.w");
    let dec_b = p.vec("dec.b");
    let h_count = cfg.horizons.len();
    let mut preds = Array2::zeros((n, h_count));
    for a in 0..n {
        for h in 0..h_count {
            let mut acc = dec_b[h];
            for t in 0..tau {
                for x in 0..d {
                    acc += psi[a][[t, x]] * dec_w[[t * d + x, h]];
                }
            }
            preds[[a, h]] = acc;
        }
    }
    preds
}

fn toy_batch(b: usize, n: usize, tau: usize, h: usize, seed: u64) -> WindowBatch {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array4::from_shape_fn((b, n, tau, 3), |_| rng.random_range(0.05..0.95));
    let targets = Array3::from_shape_fn((b, n, h), |_| rng.random_range(0.05..0.95));
    WindowBatch {
        inputs,
        targets,
        horizon_offsets: (1..=h).collect(),
        anchors: vec![tau - 1; b],
    }
}

#[test]
fn full_forward_matches_composition_oracle_small() {
    // n=3, tau=2, d_model=2, one encoder block, fixed small parameters
    let cfg = ModelConfig {
        lookback: 2,
        clusters: 2,
        encoder_blocks: 1,
        d_model: 2,
        horizons: vec![1, 2],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let structure = build_structure(&[0, 1, 0], &[(0, 1)], 3).unwrap();
    let state = init_model(&cfg, 0xabc).unwrap();
    let batch = toy_batch(2, 3, 2, 2, 11);

    let got = forward(&state, &batch, &structure, 0).unwrap();
    for s in 0..2 {
        let demand = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 0).to_owned();
        let price = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 1).to_owned();
        let temp = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 2).to_owned();
        let want = oracle_forward_sample(&state, &structure, &demand, &price, &temp);
        for a in 0..3 {
            for h in 0..2 {
                assert!(
                    (got[[s, a, h]] - want[[a, h]]).abs() < 1e-10,
                    "sample {s} area {a} horizon {h}: {} vs {}",
                    got[[s, a, h]],
                    want[[a, h]]
                );
            }
        }
    }
}

#[test]
fn full_forward_matches_oracle_wider_config() {
    // two encoder blocks, wider lookback, isolated area present
    let cfg = ModelConfig {
        lookback: 6,
        clusters: 3,
        encoder_blocks: 2,
        d_model: 4,
        horizons: vec![2, 4, 6],
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let structure = build_structure(&[0, 1, 0, 2, 1], &[(0, 1), (1, 2), (3, 0)], 5).unwrap();
    assert!(structure.isolated[4]);
    let state = init_model(&cfg, 0x77).unwrap();
    let batch = toy_batch(3, 5, 6, 3, 23);

    let got = forward(&state, &batch, &structure, 0).unwrap();
    for s in 0..3 {
        let demand = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 0).to_owned();
        let price = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 1).to_owned();
        let temp = batch.inputs.index_axis(ndarray::Axis(0), s).index_axis(ndarray::Axis(2), 2).to_owned();
        let want = oracle_forward_sample(&state, &structure, &demand, &price, &temp);
        for a in 0..5 {
            for h in 0..3 {
                assert!(
                    (got[[s, a, h]] - want[[a, h]]).abs() < 1e-10,
                    "sample {s} area {a} horizon {h}"
                );
            }
        }
    }
}
