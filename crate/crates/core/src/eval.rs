//! AUC, correlation and subspace statistics, the node-importance analysis
//! and cross-validation reports.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::graph::{nodal_properties, NodalProperties};
use crate::model::{node_importance, ModelParameters};
use crate::training::{eval_offsets, extract_features, Strategy, TrainingHistory};

/// Ridge used by [`cca`] when a within-set covariance is singular, relative
/// to the mean eigenvalue of that covariance.
pub const CCA_RIDGE: f64 = 1e-8;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("auc label {bad} not in {{0,1}}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("auc scores contain NaN"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("auc needs both classes"));
    }
    // Rank-sum form with midranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok(((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)).clamp(0.0, 1.0))
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson_r", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("pearson_r needs at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance { index: 0 });
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance { index: 1 });
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if !r.is_finite() {
        return Err(Error::NonFinite { op: "pearson_r" });
    }
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// `N × n_components` projections of the centered data.
    pub scores: DMatrix<f64>,
    /// `D × n_components` unit principal axes.
    pub components: DMatrix<f64>,
    /// All `D` sample-covariance eigenvalues, non-increasing.
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Principal components of the rows of `x`.
pub fn pca_reduce(x: &DMatrix<f64>, n_components: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 rows, got {n}")));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::invalid(format!(
            "pca n_components must lie in 1..={}, got {n_components}",
            n.min(d)
        )));
    }
    let (centered, mean) = center(x);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let (values, vectors) = sorted_eigen(cov);
    let components = vectors.columns(0, n_components).into_owned();
    let scores = &centered * &components;
    Ok(Pca {
        scores,
        components,
        explained_variance: values.into_iter().map(|v| v.max(0.0)).collect(),
        mean,
    })
}

/// Canonical correlations of the column sets of `x` and `y`, non-increasing.
/// A singular within-set covariance is regularized with [`CCA_RIDGE`].
pub fn cca(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Vec<f64>> {
    cca_with_ridge(x, y, CCA_RIDGE)
}

/// [`cca`] with an explicit relative ridge; `0` turns a singular
/// covariance into an error.
pub fn cca_with_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<Vec<f64>> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::shape("cca", format!("{} rows vs {} rows", n, y.nrows())));
    }
    if n < 2 || x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::invalid("cca needs at least 2 rows and a column in each set"));
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("cca ridge must be nonnegative, got {ridge}")));
    }
    let (xc, _) = center(x);
    let (yc, _) = center(y);
    let scale = 1.0 / (n as f64 - 1.0);
    let sxx = xc.transpose() * &xc * scale;
    let syy = yc.transpose() * &yc * scale;
    let sxy = xc.transpose() * &yc * scale;
    let wx = inverse_sqrt(sxx, ridge, "x")?;
    let wy = inverse_sqrt(syy, ridge, "y")?;
    let k = wx * sxy * wy;
    let mut sv: Vec<f64> = k.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(x.ncols().min(y.ncols()));
    Ok(sv)
}

fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn inverse_sqrt(cov: DMatrix<f64>, ridge: f64, which: &str) -> Result<DMatrix<f64>> {
    let p = cov.nrows();
    let (mut values, vectors) = sorted_eigen(cov);
    let top = values[0].max(0.0);
    if top == 0.0 {
        return Err(Error::invalid(format!("cca: {which} has zero variance")));
    }
    if values[p - 1] <= RANK_TOLERANCE * top {
        if ridge == 0.0 {
            return Err(Error::invalid(format!(
                "cca: within-set covariance of {which} is singular"
            )));
        }
        let shift = ridge * values.iter().map(|v| v.max(0.0)).sum::<f64>() / p as f64;
        for v in values.iter_mut() {
            *v = v.max(0.0) + shift;
        }
    }
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        p,
        values.iter().map(|v| 1.0 / v.sqrt()),
    ));
    Ok(&vectors * d * vectors.transpose())
}

/// Mean and sample (n−1) standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Settings of [`importance_property_analysis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Window length fed to the extractor.
    pub subsequence_length: usize,
    /// Windows averaged per subject.
    pub windows: usize,
    /// PCA dimension of the extracted features before CCA.
    pub pca_components: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            subsequence_length: 64,
            windows: 4,
            pca_components: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCorrelation {
    pub property: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub node_importance: Vec<f64>,
    pub correlations: Vec<PropertyCorrelation>,
    pub canonical_correlations: Vec<f64>,
    pub pca_components: usize,
    pub explained_variance: Vec<f64>,
}

/// Relates the model's node importance and extracted features to the
/// nodal graph properties of every subject.
///
/// Importance is computed once per model and repeated across subjects;
/// each correlation pools `subjects × nodes` points.
pub fn importance_property_analysis(
    params: &ModelParameters,
    dataset: &TimeSeriesDataset,
    config: &AnalysisConfig,
) -> Result<AnalysisReport> {
    let p = dataset.num_nodes;
    if params.num_nodes != p {
        return Err(Error::invalid(format!(
            "model has {} nodes, dataset has {p}",
            params.num_nodes
        )));
    }
    if config.subsequence_length == 0 || config.subsequence_length > dataset.num_timepoints {
        return Err(Error::invalid(format!(
            "analysis.subsequence_length must lie in 1..={}",
            dataset.num_timepoints
        )));
    }
    let importance = node_importance(&params.extractor)?;
    let props: Vec<NodalProperties> = dataset
        .subjects
        .iter()
        .map(|s| nodal_properties(s.graph.adjacency(), p))
        .collect::<Result<_>>()?;

    let pooled_importance: Vec<f64> = (0..dataset.len()).flat_map(|_| importance.iter().copied()).collect();
    let mut property_matrix = DMatrix::zeros(dataset.len() * p, 4);
    let mut correlations = Vec::with_capacity(4);
    for (c, name) in NodalProperties::NAMES.iter().enumerate() {
        let column: Vec<f64> = props.iter().flat_map(|pr| pr.columns()[c].iter().copied()).collect();
        for (row, v) in column.iter().enumerate() {
            property_matrix[(row, c)] = *v;
        }
        correlations.push(PropertyCorrelation {
            property: (*name).to_string(),
            r: pearson_r(&pooled_importance, &column)?,
        });
    }

    let features = node_features(params, dataset, config)?;
    let k = config.pca_components.min(features.ncols()).min(features.nrows());
    let pca = pca_reduce(&features, k)?;
    let canonical_correlations = cca(&pca.scores, &property_matrix)?;
    Ok(AnalysisReport {
        node_importance: importance,
        correlations,
        canonical_correlations,
        pca_components: k,
        explained_variance: pca.explained_variance,
    })
}

/// `(subjects × nodes) × C` extractor features, averaged over time and windows.
pub fn node_features(
    params: &ModelParameters,
    dataset: &TimeSeriesDataset,
    config: &AnalysisConfig,
) -> Result<DMatrix<f64>> {
    let p = dataset.num_nodes;
    let len = config.subsequence_length;
    let c = params.config.feature_channels();
    let offsets = eval_offsets(dataset.num_timepoints, len, config.windows.max(1));
    let mut out = DMatrix::zeros(dataset.len() * p, c);
    let weight = 1.0 / (offsets.len() * len) as f64;
    for s in 0..dataset.len() {
        for &o in &offsets {
            let h = extract_features(params, dataset, s, o, len)?;
            let d = h.data();
            for node in 0..p {
                for t in 0..len {
                    let base = (node * len + t) * c;
                    for ch in 0..c {
                        out[(s * p + node, ch)] += d[base + ch] * weight;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// AUCs of one strategy under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub fold_aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate over seeds and folds of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    /// Mean and sample std over every (seed, fold) run.
    pub mean: f64,
    pub std: f64,
    /// Per-fold AUC averaged over seeds.
    pub fold_means: Vec<f64>,
    pub per_seed: Vec<SeedResult>,
}

/// One trained fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub fold: usize,
    pub auc: f64,
    pub history: TrainingHistory,
}

const REPORT_FORMAT: &str = "metsk-results";
const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    /// Fully resolved configuration the runs used.
    pub config: serde_json::Value,
    pub folds: usize,
    pub strategies: Vec<StrategyResult>,
    pub runs: Vec<RunRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisReport>,
}

impl ExperimentReport {
    /// Aggregates runs into per-strategy summaries, in first-seen strategy order.
    pub fn from_runs(config: serde_json::Value, folds: usize, mut runs: Vec<RunRecord>) -> Result<Self> {
        if folds == 0 {
            return Err(Error::invalid("report needs at least one fold"));
        }
        let mut order: Vec<Strategy> = Vec::new();
        for r in &runs {
            if !order.contains(&r.strategy) {
                order.push(r.strategy);
            }
            if !(0.0..=1.0).contains(&r.auc) {
                return Err(Error::invalid(format!("auc {} outside [0, 1]", r.auc)));
            }
        }
        runs.sort_by_key(|r| (order.iter().position(|s| *s == r.strategy), r.seed, r.fold));
        let mut strategies = Vec::with_capacity(order.len());
        for &strategy in &order {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.strategy == strategy).collect();
            let mut seeds: Vec<u64> = mine.iter().map(|r| r.seed).collect();
            seeds.dedup();
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in &seeds {
                let fold_aucs: Vec<f64> = mine.iter().filter(|r| r.seed == seed).map(|r| r.auc).collect();
                if fold_aucs.len() != folds {
                    return Err(Error::invalid(format!(
                        "{strategy} seed {seed} has {} folds, expected {folds}",
                        fold_aucs.len()
                    )));
                }
                let (mean, std) = mean_std(&fold_aucs);
                per_seed.push(SeedResult {
                    seed,
                    fold_aucs,
                    mean,
                    std,
                });
            }
            let all: Vec<f64> = mine.iter().map(|r| r.auc).collect();
            let (mean, std) = mean_std(&all);
            let fold_means = (0..folds)
                .map(|f| per_seed.iter().map(|s| s.fold_aucs[f]).sum::<f64>() / per_seed.len() as f64)
                .collect();
            strategies.push(StrategyResult {
                strategy,
                mean,
                std,
                fold_means,
                per_seed,
            });
        }
        Ok(Self {
            format: REPORT_FORMAT.to_string(),
            version: REPORT_VERSION,
            config,
            folds,
            strategies,
            runs,
            analysis: None,
        })
    }

    pub fn strategy(&self, s: Strategy) -> Option<&StrategyResult> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported results format {} v{}",
                report.format, report.version
            )));
        }
        Ok(report)
    }

    /// One summary row per strategy (`seed = all`) followed by its per-seed rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,seed,mean,std");
        for f in 1..=self.folds {
            out.push_str(&format!(",fold_{f}"));
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, seed: &str, mean: f64, std: f64, folds: &[f64]| {
            out.push_str(&format!("{name},{seed},{mean:.4},{std:.4}"));
            for v in folds {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        };
        for s in &self.strategies {
            row(&mut out, s.strategy.name(), "all", s.mean, s.std, &s.fold_means);
            for ps in &s.per_seed {
                row(&mut out, s.strategy.name(), &ps.seed.to_string(), ps.mean, ps.std, &ps.fold_aucs);
            }
        }
        out
    }

    /// The report without per-iteration histories.
    pub fn summary_json(&self) -> Result<String> {
        let mut slim = self.clone();
        for r in &mut slim.runs {
            r.history.records.clear();
        }
        slim.to_json()
    }
}
