use evcp_core::dataset::*;
use evcp_core::model::*;
use evcp_core::region::*;
use evcp_core::training::*;
use evcp_core::evaluation::*;
use std::time::Instant;

fn main() {
    let synth = SynthConfig { n_areas: 20, n_groups: 3, t_steps: 4032, demand_noise: 0.02, ..SynthConfig::default() };
    let data = generate_synthetic(&synth, 7).unwrap();
    let split = chronological_split(4032, (6, 1, 3)).unwrap();
    let (cov, _) = normalize_covariates(&data.covariates, &split.train).unwrap();
    let labels = kmeans(&tfidf(&data.poi).unwrap().scores, 3, 0).unwrap().labels;
    let structure = build_structure(&labels, &data.adjacency_pairs, 20).unwrap();
    let cfg = ModelConfig { lookback: 12, clusters: 3, encoder_blocks: 1, d_model: 8, horizons: vec![3,6,9,12], dropout: 0.0, ..ModelConfig::default() };
    let train_w = make_windows(&data.demand, &cov, &split.train, 12, &cfg.horizons).unwrap();
    let val_w = make_windows(&data.demand, &cov, &split.val, 12, &cfg.horizons).unwrap();
    let test_w = make_windows(&data.demand, &cov, &split.test, 12, &cfg.horizons).unwrap();

    // A: overfit 8 spread samples, lr 1e-2
    let idx: Vec<usize> = (0..8).map(|i| i * 280).collect();
    let batch = train_w.gather(&idx);
    let mut state = init_model(&cfg, 1).unwrap();
    state.mode = Mode::Train;
    let tcfg = TrainConfig { learning_rate: 1e-2, ..Default::default() };
    let mut adam = AdamState::new(&state.params);
    for step in 0..500u64 {
        let (loss, mut grads) = forward_loss(&state, &batch, &structure, step).unwrap();
        clip_global_norm(&mut grads, 5.0);
        adam_step(&mut state.params, &grads, &mut adam, &tcfg).unwrap();
        if step % 125 == 0 { println!("A overfit step {step}: {loss:.6}"); }
    }
    let mut ev = state.clone(); ev.mode = Mode::Eval;
    let preds = forward(&ev, &batch, &structure, 0).unwrap();
    println!("A overfit final eval mse: {:.8}", mse_loss(&preds, &batch.targets).unwrap());

    // B: bs 64, lr 3e-3, 60 epochs
    for (bs, lr, ep) in [(64usize, 3e-3, 60usize), (128, 1e-2, 40)] {
        let st = init_model(&cfg, 1).unwrap();
        let t0 = Instant::now();
        let tc = TrainConfig { max_epochs: ep, patience: ep - 1, batch_size: bs, learning_rate: lr, seed: 7, ..Default::default() };
        let (best, hist) = train(st, &train_w, &val_w, &structure, &tc).unwrap();
        let preds = predict(&best, &test_w, &structure, 256).unwrap();
        let m = metrics(&preds, &test_w.targets, &cfg.horizons, 5).unwrap();
        let mp = metrics(&persistence_baseline(&test_w), &test_w.targets, &cfg.horizons, 5).unwrap();
        println!("bs={bs} lr={lr} ep={ep}: {:?} best val {:.6} @ {} | h12 {:.5} vs pers {:.5} ratio {:.3} | avg ratio {:.3}",
            t0.elapsed(), hist.best_val_loss, hist.best_epoch,
            m.horizons[3].rmse, mp.horizons[3].rmse, m.horizons[3].rmse/mp.horizons[3].rmse,
            m.average.rmse/mp.average.rmse);
        let tail: Vec<f64> = hist.epochs.iter().rev().take(6).map(|e| (e.val_loss*1e5).round()/1e5).collect();
        println!("   last val losses: {:?}", tail);
    }
}
