//! Region featurization: POI TF-IDF scores, k-means area clustering, and the
//! hypergraph/adjacency structures consumed by the model.
//!
//! Each area's POI category counts are treated as a document; TF-IDF rows are
//! clustered to form one hyperedge per cluster, while the pairwise adjacency
//! list gives the plain spatial graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("area {0} has no POIs at all; inject a pseudo-count per category or drop the area")]
    DegenerateArea(String),
    #[error("cluster count {c} out of range for {n} areas")]
    BadClusterCount { c: usize, n: usize },
    #[error("unknown area id `{0}` in adjacency input")]
    UnknownArea(String),
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("label list covers {got} areas, expected {expected}")]
    LabelCount { got: usize, expected: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("poi file: {0}")]
    PoiFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-area counts over a fixed set of POI categories.
#[derive(Debug, Clone)]
pub struct PoiCorpus {
    /// `[n_areas, n_categories]`, nonnegative counts.
    pub counts: Array2<u64>,
    pub categories: Vec<String>,
    pub area_ids: Vec<String>,
}

/// TF-IDF importance scores, `[n_areas, n_categories]`.
#[derive(Debug, Clone)]
pub struct TfidfMatrix {
    pub scores: Array2<f64>,
}

/// Hypergraph incidence plus pairwise adjacency of areas.
#[derive(Debug, Clone)]
pub struct RegionStructure {
    /// Binary `[n_areas, n_clusters]`; each row has exactly one 1.
    pub incidence: Array2<f64>,
    /// Binary symmetric `[n_areas, n_areas]` with zero diagonal.
    pub adjacency: Array2<f64>,
    /// Per-area cluster id.
    pub labels: Vec<usize>,
    /// Areas with no adjacency pairs; they attend to themselves in the graph layer.
    pub isolated: Vec<bool>,
}

impl RegionStructure {
    pub fn n_areas(&self) -> usize {
        self.incidence.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.incidence.ncols()
    }
}

/// TF-IDF of POI categories per area, natural logarithm, document frequency
/// smoothed by +1: `tf * ln(n_areas / (1 + df))`.
pub fn tfidf(corpus: &PoiCorpus) -> Result<TfidfMatrix, RegionError> {
    let (n_areas, n_cats) = corpus.counts.dim();
    if n_areas == 0 || n_cats == 0 {
        return Err(RegionError::EmptyCorpus);
    }
    let mut df = vec![0usize; n_cats];
    for row in corpus.counts.rows() {
        for (c, &v) in row.iter().enumerate() {
            if v > 0 {
                df[c] += 1;
            }
        }
    }
    let mut scores = Array2::zeros((n_areas, n_cats));
    for (a, row) in corpus.counts.rows().into_iter().enumerate() {
        let total: u64 = row.sum();
        if total == 0 {
            return Err(RegionError::DegenerateArea(corpus.area_ids[a].clone()));
        }
        for (c, &v) in row.iter().enumerate() {
            if v == 0 {
                continue; // tf = 0 forces the score to 0 exactly
            }
            let tf = v as f64 / total as f64;
            let idf = (n_areas as f64 / (1.0 + df[c] as f64)).ln();
            scores[[a, c]] = tf * idf;
        }
    }
    Ok(TfidfMatrix { scores })
}

/// Outcome of a k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

/// Lloyd's algorithm with k-means++ seeding, 10 restarts, and empty-cluster
/// repair by reseeding the farthest point. Deterministic for a given seed.
pub fn kmeans(data: &Array2<f64>, c: usize, seed: u64) -> Result<KmeansResult, RegionError> {
    const RESTARTS: usize = 10;
    const MAX_ITERS: usize = 300;
    const TOL: f64 = 1e-6;

    let n = data.nrows();
    if c == 0 || c > n {
        return Err(RegionError::BadClusterCount { c, n });
    }

    let mut best: Option<KmeansResult> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(&[seed, restart as u64]));
        let mut centroids = kmeans_pp_init(data, c, &mut rng);
        let mut labels = vec![0usize; n];

        for _ in 0..MAX_ITERS {
            assign_labels(data, &centroids, &mut labels);
            repair_empty_clusters(data, &centroids, &mut labels);
            let next = recompute_centroids(data, &labels, c);
            let movement = centroids
                .rows()
                .into_iter()
                .zip(next.rows())
                .map(|(a, b)| sq_dist(&a, &b).sqrt())
                .fold(0.0f64, f64::max);
            centroids = next;
            if movement < TOL {
                break;
            }
        }
        assign_labels(data, &centroids, &mut labels);
        repair_empty_clusters(data, &centroids, &mut labels);
        let inertia = inertia_of(data, &labels, &centroids);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KmeansResult { labels, centroids, inertia });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(data: &Array2<f64>, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data.row(i), &data.row(centers[0])))
        .collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let dist = WeightedIndex::new(&d2).expect("positive total weight");
            dist.sample(rng)
        } else {
            // all remaining points coincide with a chosen center
            rng.random_range(0..n)
        };
        centers.push(pick);
        for i in 0..n {
            let d = sq_dist(&data.row(i), &data.row(pick));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    let mut out = Array2::zeros((c, data.ncols()));
    for (k, &i) in centers.iter().enumerate() {
        out.row_mut(k).assign(&data.row(i));
    }
    out
}

fn assign_labels(data: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) {
    for (i, row) in data.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, cent) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(&row, &cent);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        labels[i] = best;
    }
}

fn repair_empty_clusters(data: &Array2<f64>, centroids: &Array2<f64>, labels: &mut [usize]) {
    let c = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; c];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        // move the point farthest from its own centroid into the empty cluster
        let mut far_i = 0usize;
        let mut far_d = -1.0;
        for (i, row) in data.rows().into_iter().enumerate() {
            if sizes[labels[i]] <= 1 {
                continue; // don't empty another cluster
            }
            let d = sq_dist(&row, &centroids.row(labels[i]));
            if d > far_d {
                far_d = d;
                far_i = i;
            }
        }
        labels[far_i] = empty;
    }
}

fn recompute_centroids(data: &Array2<f64>, labels: &[usize], c: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((c, data.ncols()));
    let mut counts = vec![0usize; c];
    for (i, row) in data.rows().into_iter().enumerate() {
        counts[labels[i]] += 1;
        let mut target = sums.row_mut(labels[i]);
        target += &row;
    }
    for k in 0..c {
        if counts[k] > 0 {
            let mut row = sums.row_mut(k);
            row /= counts[k] as f64;
        }
    }
    sums
}

/// Within-cluster sum of squared distances for an arbitrary labeling, with
/// centroids recomputed from the labels. Serves as the brute-force scorer for
/// comparing against random partitions.
pub fn partition_inertia(data: &Array2<f64>, labels: &[usize], c: usize) -> f64 {
    let centroids = recompute_centroids(data, labels, c);
    inertia_of(data, labels, &centroids)
}

fn inertia_of(data: &Array2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    data.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| sq_dist(&row, &centroids.row(labels[i])))
        .sum()
}

/// Incidence + adjacency from cluster labels and neighbor pairs.
///
/// Pairs are given as index pairs; duplicates and reversed duplicates collapse
/// into one symmetric edge. Areas with no pairs are flagged isolated.
pub fn build_structure(
    labels: &[usize],
    pairs: &[(usize, usize)],
    n_areas: usize,
) -> Result<RegionStructure, RegionError> {
    if labels.len() != n_areas {
        return Err(RegionError::LabelCount { got: labels.len(), expected: n_areas });
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut incidence = Array2::zeros((n_areas, n_clusters));
    for (a, &l) in labels.iter().enumerate() {
        incidence[[a, l]] = 1.0;
    }
    for k in 0..n_clusters {
        if incidence.column(k).sum() == 0.0 {
            return Err(RegionError::EmptyCluster(k));
        }
    }
    let mut adjacency = Array2::zeros((n_areas, n_areas));
    for &(a, b) in pairs {
        if a >= n_areas {
            return Err(RegionError::UnknownArea(a.to_string()));
        }
        if b >= n_areas {
            return Err(RegionError::UnknownArea(b.to_string()));
        }
        if a == b {
            continue; // self-pairs carry no adjacency information
        }
        adjacency[[a, b]] = 1.0;
        adjacency[[b, a]] = 1.0;
    }
    let isolated = (0..n_areas).map(|i| adjacency.row(i).sum() == 0.0).collect();
    Ok(RegionStructure { incidence, adjacency, labels: labels.to_vec(), isolated })
}

/// Pearson correlation matrix of per-area series plus the `>= threshold` mask.
///
/// Zero-variance areas get correlation 0 against everything (flagged), with
/// the diagonal kept at 1.
pub fn pearson_matrix(values: &Array2<f64>, threshold: f64) -> (Array2<f64>, Array2<u8>, Vec<bool>) {
    let (n, t) = values.dim();
    let tf = t as f64;
    let means: Vec<f64> = values.rows().into_iter().map(|r| r.sum() / tf).collect();
    let mut centered = values.clone();
    for (i, mut row) in centered.rows_mut().into_iter().enumerate() {
        row -= means[i];
    }
    let norms: Vec<f64> = centered
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_var: Vec<bool> = norms.iter().map(|&v| v == 0.0).collect();

    let mut corr = Array2::zeros((n, n));
    for i in 0..n {
        corr[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let c = if zero_var[i] || zero_var[j] {
                0.0
            } else {
                centered.row(i).dot(&centered.row(j)) / (norms[i] * norms[j])
            };
            corr[[i, j]] = c;
            corr[[j, i]] = c;
        }
    }
    let mask = corr.mapv(|v| u8::from(v >= threshold));
    (corr, mask, zero_var)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let sum_ij: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return 1.0; // both partitions trivial
    }
    (sum_ij - expected) / (max_index - expected)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Reads `poi.csv`: header `area_id,<category_1>,...`, one integer-count row
/// per area.
pub fn read_poi_csv(path: &Path) -> Result<PoiCorpus, RegionError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| RegionError::PoiFormat("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(RegionError::PoiFormat("header needs area_id plus categories".into()));
    }
    let categories: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut area_ids = Vec::new();
    let mut rows: Vec<u64> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(RegionError::PoiFormat(format!(
                "row {}: {} fields, expected {}",
                lineno + 1,
                fields.len(),
                cols.len()
            )));
        }
        area_ids.push(fields[0].to_string());
        for (c, f) in fields[1..].iter().enumerate() {
            let v: u64 = f.parse().map_err(|_| {
                RegionError::PoiFormat(format!(
                    "row {} column `{}`: `{}` is not a nonnegative integer",
                    lineno + 1,
                    categories[c],
                    f
                ))
            })?;
            rows.push(v);
        }
    }
    let n = area_ids.len();
    let counts = Array2::from_shape_vec((n, categories.len()), rows)
        .map_err(|e| RegionError::PoiFormat(e.to_string()))?;
    Ok(PoiCorpus { counts, categories, area_ids })
}

/// Reads `adjacency.txt`: one `area_id_a area_id_b` pair per line, resolved
/// against the given area-id order.
pub fn read_adjacency_pairs(
    path: &Path,
    area_ids: &[String],
) -> Result<Vec<(usize, usize)>, RegionError> {
    let index: BTreeMap<&str, usize> =
        area_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (a, b) = (it.next(), it.next());
        let (Some(a), Some(b)) = (a, b) else {
            return Err(RegionError::PoiFormat(format!("bad adjacency line `{line}`")));
        };
        let ia = *index.get(a).ok_or_else(|| RegionError::UnknownArea(a.to_string()))?;
        let ib = *index.get(b).ok_or_else(|| RegionError::UnknownArea(b.to_string()))?;
        pairs.push((ia, ib));
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct ClustersJson<'a> {
    labels: BTreeMap<&'a str, usize>,
    categories: &'a [String],
    areas: &'a [String],
    tfidf: Vec<Vec<f64>>,
}

/// Writes `clusters.json`: area->label map plus the TF-IDF matrix.
pub fn write_clusters_json(
    path: &Path,
    corpus: &PoiCorpus,
    tfidf: &TfidfMatrix,
    labels: &[usize],
) -> Result<(), RegionError> {
    let doc = ClustersJson {
        labels: corpus
            .area_ids
            .iter()
            .map(String::as_str)
            .zip(labels.iter().copied())
            .collect(),
        categories: &corpus.categories,
        areas: &corpus.area_ids,
        tfidf: tfidf.scores.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let json = serde_json::to_string_pretty(&doc).expect("serializable");
    std::fs::write(path, json)?;
    Ok(())
}

/// Writes the `[n, n]` correlation matrix as CSV with an area-id header.
pub fn write_correlation_csv(
    path: &Path,
    area_ids: &[String],
    corr: &Array2<f64>,
) -> Result<(), RegionError> {
    let mut out = String::new();
    out.push_str("area_id");
    for id in area_ids {
        let _ = write!(out, ",{id}");
    }
    out.push('\n');
    for (i, row) in corr.rows().into_iter().enumerate() {
        out.push_str(&area_ids[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the POI corpus in the `poi.csv` layout.
pub fn write_poi_csv(path: &Path, corpus: &PoiCorpus) -> Result<(), RegionError> {
    let mut out = String::from("area_id");
    for c in &corpus.categories {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (i, row) in corpus.counts.rows().into_iter().enumerate() {
        out.push_str(&corpus.area_ids[i]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes adjacency pairs (`a b` per line) using area ids.
pub fn write_adjacency(
    path: &Path,
    area_ids: &[String],
    pairs: &[(usize, usize)],
) -> Result<(), RegionError> {
    let mut out = String::new();
    for &(a, b) in pairs {
        let _ = writeln!(out, "{} {}", area_ids[a], area_ids[b]);
    }
    std::fs::write(path, out)?;
    Ok(())
}
