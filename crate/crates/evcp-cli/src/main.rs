//! Pipeline driver. Each subcommand is staged through on-disk bundles so
//! later stages (and ablations) reuse prepared data and structures:
//!
//! ```text
//! evcp synth    --config run.toml --out data/        # synthetic bundle
//! evcp prepare  --config run.toml                    # validate + normalize + split
//! evcp cluster  --config run.toml --clusters 10      # TF-IDF + k-means + structures
//! evcp train    --config run.toml [--resume]         # best checkpoint + history
//! evcp evaluate --config run.toml                    # metrics + baseline + correlation
//! evcp ablate   --config run.toml                    # eight-variant matrix
//! ```
//!
//! Exit codes: 0 success, 2 input/validation failure, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use evcp_core::dataset::{
    chronological_split, generate_synthetic, load_dataset_with, normalize_covariates,
    write_series_csv, CovariateSeries, DatasetDescriptor, DemandSeries, LoadOptions, NormStats,
    SplitIndex, SynthConfig,
};
use evcp_core::evaluation::{
    metrics, persistence_baseline, run_ablation, write_metrics_csv, write_metrics_json,
    AblationInputs, MetricReport,
};
use evcp_core::model::{init_model, load_checkpoint, AblationVariant, ModelConfig};
use evcp_core::region::{
    build_structure, kmeans, pearson_matrix, read_adjacency_pairs, read_poi_csv, tfidf,
    write_adjacency, write_clusters_json, write_correlation_csv, write_poi_csv, RegionStructure,
};
use evcp_core::training::{
    predict, split_windows, write_history_csv, TrainConfig, TrainError, TrainHistory, Trainer,
};

#[derive(Parser)]
#[command(name = "evcp", version, about = "Citywide EV charging occupancy forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (.toml or .json); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for initialization, shuffling, noise, and generators.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for all artifacts of this run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset descriptor path (overrides the config file).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, interpolate, normalize, and split the dataset.
    Prepare(Common),
    /// Compute TF-IDF, cluster areas, and build hypergraph/adjacency structures.
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Cluster count (overrides model.clusters).
        #[arg(long)]
        clusters: Option<usize>,
        /// Additionally write labels for every count in `lo..hi` (inclusive).
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Train the model on the prepared bundle.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the saved optimizer state in model.ckpt.
        #[arg(long)]
        resume: bool,
        /// Architectural variant to train (default: full).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate the checkpoint on the test split (plus persistence baseline).
    Evaluate(Common),
    /// Train and evaluate the ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant ids (default: all eight).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Generate a synthetic dataset bundle with ground-truth groups.
    Synth(Common),
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_corr_threshold() -> f64 {
    0.4
}

/// One declarative run configuration; echoed to `run.json` before any work.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Informational: the subcommand that produced this echo.
    #[serde(default)]
    command: Option<String>,
    #[serde(default)]
    dataset: Option<PathBuf>,
    #[serde(default = "default_out")]
    out: PathBuf,
    #[serde(default)]
    seed: u64,
    /// Threshold for the Pearson correlation mask in `correlation.csv`.
    #[serde(default = "default_corr_threshold")]
    correlation_threshold: f64,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            dataset: None,
            out: default_out(),
            seed: 0,
            correlation_threshold: default_corr_threshold(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn load_config(common: &Common, command: &str) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(dataset) = &common.dataset {
        cfg.dataset = Some(dataset.clone());
    }
    // one master seed drives every stage
    cfg.train.seed = cfg.seed;
    cfg.command = Some(command.to_string());
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Echo the effective configuration before doing any work.
fn echo_run_json(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))?;
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(cfg.out.join("run.json"), json).context("writing run.json")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Prepared bundle
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PreparedMeta {
    area_ids: Vec<String>,
    step_minutes: u32,
    start_time: String,
    horizons: Vec<usize>,
    split: SplitIndex,
    norm: NormStats,
}

fn prepared_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("prepared")
}

fn cmd_prepare(cfg: &RunConfig) -> anyhow::Result<()> {
    let desc_path =
        cfg.dataset.as_ref().ok_or_else(|| anyhow!("no dataset descriptor configured"))?;
    let desc = DatasetDescriptor::load(desc_path)?;
    let opts: LoadOptions = (&desc).into();
    let (demand, cov) = load_dataset_with(&desc.demand, &desc.price, &desc.temperature, &opts)?;
    let split = chronological_split(demand.t_steps(), (6, 1, 3))?;
    let (cov_norm, norm) = normalize_covariates(&cov, &split.train)?;

    let dir = prepared_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("demand.csv"), &demand.area_ids, &demand.values, demand.step_minutes)?;
    write_series_csv(&dir.join("price.csv"), &demand.area_ids, &cov_norm.price, demand.step_minutes)?;
    write_series_csv(
        &dir.join("temperature.csv"),
        &demand.area_ids,
        &cov_norm.temperature,
        demand.step_minutes,
    )?;
    let meta = PreparedMeta {
        area_ids: demand.area_ids.clone(),
        step_minutes: demand.step_minutes,
        start_time: demand.start_time.clone(),
        horizons: desc.horizons.clone(),
        split: split.clone(),
        norm,
    };
    std::fs::write(dir.join("prepared.json"), serde_json::to_string_pretty(&meta)?)?;
    let summary = serde_json::json!({
        "areas": demand.n_areas(),
        "steps": demand.t_steps(),
        "split_sizes": {
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
        },
        "price_degenerate": norm.price.degenerate,
        "temperature_degenerate": norm.temperature.degenerate,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "prepared {} areas x {} steps (train {} / val {} / test {})",
        demand.n_areas(),
        demand.t_steps(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn load_prepared(cfg: &RunConfig) -> anyhow::Result<(DemandSeries, CovariateSeries, PreparedMeta)> {
    let dir = prepared_dir(cfg);
    let meta: PreparedMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("prepared.json"))
            .with_context(|| format!("no prepared bundle in {} (run `evcp prepare`)", dir.display()))?,
    )?;
    let opts = LoadOptions {
        step_minutes: meta.step_minutes,
        start_time: meta.start_time.clone(),
        ..LoadOptions::default()
    };
    let (demand, cov) = load_dataset_with(
        &dir.join("demand.csv"),
        &dir.join("price.csv"),
        &dir.join("temperature.csv"),
        &opts,
    )?;
    if demand.area_ids != meta.area_ids {
        bail!("prepared bundle is inconsistent: area ids changed");
    }
    Ok((demand, cov, meta))
}

// ---------------------------------------------------------------------------
// Structures
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StructureFile {
    n_areas: usize,
    clusters: usize,
    labels: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    kmeans_inertia: f64,
}

fn cmd_cluster(cfg: &RunConfig, clusters: Option<usize>, sweep: Option<&str>) -> anyhow::Result<()> {
    let desc_path =
        cfg.dataset.as_ref().ok_or_else(|| anyhow!("no dataset descriptor configured"))?;
    let desc = DatasetDescriptor::load(desc_path)?;
    let poi_path = desc.poi.as_ref().ok_or_else(|| anyhow!("descriptor names no poi file"))?;
    let adj_path =
        desc.adjacency.as_ref().ok_or_else(|| anyhow!("descriptor names no adjacency file"))?;
    let (_, _, meta) = load_prepared(cfg)?;

    let corpus = read_poi_csv(poi_path)?;
    if corpus.area_ids != meta.area_ids {
        bail!("poi area ids do not match the prepared bundle");
    }
    let scores = tfidf(&corpus)?;
    let c = clusters.unwrap_or(cfg.model.clusters);
    let result = kmeans(&scores.scores, c, cfg.seed)?;
    let pairs = read_adjacency_pairs(adj_path, &corpus.area_ids)?;
    let structure = build_structure(&result.labels, &pairs, corpus.area_ids.len())?;

    let dir = cfg.out.join("structure");
    std::fs::create_dir_all(&dir)?;
    write_clusters_json(&dir.join("clusters.json"), &corpus, &scores, &result.labels)?;
    let sf = StructureFile {
        n_areas: corpus.area_ids.len(),
        clusters: structure.n_clusters(),
        labels: result.labels.clone(),
        pairs,
        kmeans_inertia: result.inertia,
    };
    std::fs::write(dir.join("structure.json"), serde_json::to_string_pretty(&sf)?)?;

    if let Some(sweep) = sweep {
        let (lo, hi) = parse_sweep(sweep)?;
        for c in lo..=hi {
            let r = kmeans(&scores.scores, c, cfg.seed)?;
            let doc = serde_json::json!({
                "clusters": c,
                "inertia": r.inertia,
                "labels": meta.area_ids.iter().zip(&r.labels).collect::<BTreeMap<_, _>>(),
            });
            std::fs::write(
                dir.join(format!("clusters_C{c}.json")),
                serde_json::to_string_pretty(&doc)?,
            )?;
        }
    }
    println!("clustered {} areas into {} groups (inertia {:.6})", sf.n_areas, c, result.inertia);
    Ok(())
}

fn parse_sweep(s: &str) -> anyhow::Result<(usize, usize)> {
    let (lo, hi) = s.split_once("..").ok_or_else(|| anyhow!("sweep must look like `6..14`"))?;
    let lo: usize = lo.trim().parse().context("sweep lower bound")?;
    let hi: usize = hi.trim().parse().context("sweep upper bound")?;
    if lo == 0 || hi < lo {
        bail!("sweep bounds must satisfy 1 <= lo <= hi");
    }
    Ok((lo, hi))
}

fn load_structure(cfg: &RunConfig) -> anyhow::Result<RegionStructure> {
    let path = cfg.out.join("structure").join("structure.json");
    let sf: StructureFile = serde_json::from_str(
        &std::fs::read_to_string(&path)
            .with_context(|| format!("no structure at {} (run `evcp cluster`)", path.display()))?,
    )?;
    Ok(build_structure(&sf.labels, &sf.pairs, sf.n_areas)?)
}

// ---------------------------------------------------------------------------
// Train / evaluate / ablate
// ---------------------------------------------------------------------------

fn model_config_for(cfg: &RunConfig, meta: &PreparedMeta) -> ModelConfig {
    let mut mcfg = cfg.model.clone();
    if mcfg.horizons == ModelConfig::default().horizons && !meta.horizons.is_empty() {
        // descriptor horizons apply unless the run config overrode them
        mcfg.horizons = meta.horizons.clone();
    }
    mcfg
}

fn cmd_train(cfg: &RunConfig, resume: bool, variant: Option<&str>) -> anyhow::Result<()> {
    let (demand, cov, meta) = load_prepared(cfg)?;
    let structure = load_structure(cfg)?;
    let mut mcfg = model_config_for(cfg, &meta);
    if let Some(v) = variant {
        mcfg.variant = v.parse::<AblationVariant>()?;
    }
    let (train_w, val_w, _) =
        split_windows(&demand, &cov, &meta.split, mcfg.lookback, &mcfg.horizons)?;

    let ckpt_path = cfg.out.join("model.ckpt");
    let mut trainer = if resume && ckpt_path.exists() {
        let t = Trainer::load(&ckpt_path)?;
        println!("resuming from epoch {}", t.next_epoch);
        t
    } else {
        Trainer::new(init_model(&mcfg, cfg.seed)?)
    };
    let stop_reason = trainer.run(&train_w, &val_w, &structure, &cfg.train)?;
    trainer.save(&ckpt_path)?;
    let history = TrainHistory {
        epochs: trainer.epochs.clone(),
        best_epoch: trainer.best_epoch,
        best_val_loss: trainer.best_val_loss,
        stop_reason,
    };
    write_history_csv(&cfg.out.join("history.csv"), &history)?;
    let summary = serde_json::json!({
        "stop_reason": stop_reason,
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss,
        "variant": mcfg.variant.id(),
    });
    std::fs::write(cfg.out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} epochs; best val mse {:.6} at epoch {}",
        history.epochs.len(),
        history.best_val_loss,
        history.best_epoch
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> anyhow::Result<()> {
    let (demand, cov, meta) = load_prepared(cfg)?;
    let structure = load_structure(cfg)?;
    let ckpt_path = cfg.out.join("model.ckpt");
    if !ckpt_path.exists() {
        bail!("no checkpoint at {} (run `evcp train`)", ckpt_path.display());
    }
    let state = load_checkpoint(&ckpt_path)?;
    let mcfg = &state.config;
    let (_, _, test_w) = split_windows(&demand, &cov, &meta.split, mcfg.lookback, &mcfg.horizons)?;

    let preds = predict(&state, &test_w, &structure, cfg.train.batch_size)?;
    let model_report = metrics(&preds, &test_w.targets, &mcfg.horizons, meta.step_minutes)?;
    let base = persistence_baseline(&test_w);
    let base_report = metrics(&base, &test_w.targets, &mcfg.horizons, meta.step_minutes)?;

    let mut rows: BTreeMap<String, MetricReport> = BTreeMap::new();
    rows.insert(mcfg.variant.id().to_string(), model_report);
    rows.insert("persistence".to_string(), base_report);
    write_metrics_json(&cfg.out.join("metrics.json"), &rows)?;
    write_metrics_csv(&cfg.out.join("metrics.csv"), &rows)?;

    let (corr, _, _) = pearson_matrix(&demand.values, cfg.correlation_threshold);
    write_correlation_csv(&cfg.out.join("correlation.csv"), &demand.area_ids, &corr)?;

    let model_row = &rows[mcfg.variant.id()];
    println!(
        "test rmse avg {:.6} (persistence {:.6}); wrote metrics.json, metrics.csv, correlation.csv",
        model_row.average.rmse,
        rows["persistence"].average.rmse
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, variants: Option<&str>) -> anyhow::Result<()> {
    let (demand, cov, meta) = load_prepared(cfg)?;
    let structure = load_structure(cfg)?;
    let mcfg = model_config_for(cfg, &meta);
    let variants: Vec<AblationVariant> = match variants {
        None => AblationVariant::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<AblationVariant>())
            .collect::<Result<_, _>>()?,
    };
    let inputs = AblationInputs {
        demand: &demand,
        covariates: &cov,
        split: &meta.split,
        structure: &structure,
    };
    let runs = run_ablation(&variants, &inputs, &mcfg, &cfg.train, cfg.seed)?;

    let dir = cfg.out.join("ablation");
    std::fs::create_dir_all(&dir)?;
    let rows: BTreeMap<String, MetricReport> =
        runs.iter().map(|r| (r.variant.clone(), r.report.clone())).collect();
    write_metrics_json(&dir.join("metrics.json"), &rows)?;
    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    std::fs::write(dir.join("runs.json"), serde_json::to_string_pretty(&runs)?)?;
    for r in &runs {
        println!(
            "{:<28} avg rmse {:.6} (best epoch {})",
            r.variant, r.report.average.rmse, r.best_epoch
        );
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = generate_synthetic(&cfg.synth, cfg.seed)?;
    let dir = &cfg.out;
    std::fs::create_dir_all(dir)?;
    let ids = &data.demand.area_ids;
    write_series_csv(&dir.join("demand.csv"), ids, &data.demand.values, cfg.synth.step_minutes)?;
    write_series_csv(&dir.join("price.csv"), ids, &data.covariates.price, cfg.synth.step_minutes)?;
    write_series_csv(
        &dir.join("temperature.csv"),
        ids,
        &data.covariates.temperature,
        cfg.synth.step_minutes,
    )?;
    write_poi_csv(&dir.join("poi.csv"), &data.poi)?;
    write_adjacency(&dir.join("adjacency.txt"), ids, &data.adjacency_pairs)?;
    let groups: BTreeMap<&String, usize> =
        ids.iter().zip(data.group_labels.iter().copied()).collect();
    std::fs::write(dir.join("groups.json"), serde_json::to_string_pretty(&groups)?)?;
    let desc = DatasetDescriptor {
        demand: "demand.csv".into(),
        price: "price.csv".into(),
        temperature: "temperature.csv".into(),
        poi: Some("poi.csv".into()),
        adjacency: Some("adjacency.txt".into()),
        step_minutes: cfg.synth.step_minutes,
        price_step_minutes: cfg.synth.step_minutes,
        temperature_step_minutes: cfg.synth.step_minutes,
        orientation: evcp_core::dataset::Orientation::TimeRows,
        horizons: cfg.model.horizons.clone(),
        start_time: data.demand.start_time.clone(),
    };
    std::fs::write(dir.join("dataset.toml"), toml::to_string_pretty(&desc)?)?;
    println!(
        "wrote synthetic bundle: {} areas x {} steps, {} groups",
        cfg.synth.n_areas, cfg.synth.t_steps, cfg.synth.n_groups
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Prepare(common) => {
            let cfg = load_config(common, "prepare")?;
            echo_run_json(&cfg)?;
            cmd_prepare(&cfg)
        }
        Command::Cluster { common, clusters, sweep } => {
            let cfg = load_config(common, "cluster")?;
            echo_run_json(&cfg)?;
            cmd_cluster(&cfg, *clusters, sweep.as_deref())
        }
        Command::Train { common, resume, variant } => {
            let cfg = load_config(common, "train")?;
            echo_run_json(&cfg)?;
            cmd_train(&cfg, *resume, variant.as_deref())
        }
        Command::Evaluate(common) => {
            let cfg = load_config(common, "evaluate")?;
            echo_run_json(&cfg)?;
            cmd_evaluate(&cfg)
        }
        Command::Ablate { common, variant } => {
            let cfg = load_config(common, "ablate")?;
            echo_run_json(&cfg)?;
            cmd_ablate(&cfg, variant.as_deref())
        }
        Command::Synth(common) => {
            let cfg = load_config(common, "synth")?;
            echo_run_json(&cfg)?;
            cmd_synth(&cfg)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(te) = err.downcast_ref::<TrainError>() {
        match te {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient(_) => return 3,
            _ => return 2,
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
