//! Subject time series, on-disk datasets, the synthetic generator and the
//! cross-validation splits.
//!
//! On-disk layout:
//!
//! ```text
//! dataset_dir/manifest.json       num_nodes, num_timepoints, num_subjects, label_map, seed
//! dataset_dir/subjects/<id>.csv   P rows × T columns, headerless decimal floats
//! dataset_dir/labels.csv          id,label (only for labeled datasets)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{pearson_connectivity, ConnectivityGraph};

/// One subject: a `P×T` node-by-time signal and its connectivity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Row-major `P×T`.
    pub series: Vec<f64>,
    pub label: Option<usize>,
    pub graph: ConnectivityGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_nodes: usize,
    pub num_timepoints: usize,
    pub num_subjects: usize,
    /// Class index → human-readable name; absent for unlabeled datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A homogeneous collection of subjects (uniform `P` and `T`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub num_nodes: usize,
    pub num_timepoints: usize,
    pub subjects: Vec<Subject>,
    pub label_map: Option<BTreeMap<String, String>>,
    pub seed: Option<u64>,
}

impl TimeSeriesDataset {
    pub fn new(
        num_nodes: usize,
        num_timepoints: usize,
        subjects: Vec<Subject>,
        label_map: Option<BTreeMap<String, String>>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let ds = Self {
            num_nodes,
            num_timepoints,
            subjects,
            label_map,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::invalid("dataset has no subjects"));
        }
        for s in &self.subjects {
            if s.series.len() != self.num_nodes * self.num_timepoints {
                return Err(Error::invalid(format!(
                    "subject {} has {} values, expected {}x{}",
                    s.id,
                    s.series.len(),
                    self.num_nodes,
                    self.num_timepoints
                )));
            }
        }
        let labeled = self.subjects.iter().filter(|s| s.label.is_some()).count();
        if labeled != 0 && labeled != self.subjects.len() {
            return Err(Error::invalid("dataset mixes labeled and unlabeled subjects"));
        }
        if labeled != 0 {
            let counts = self.class_counts();
            if counts[0] == 0 || counts[1] == 0 {
                return Err(Error::invalid(format!(
                    "labeled dataset needs both classes, got counts {counts:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.subjects.first().is_some_and(|s| s.label.is_some())
    }

    /// Labels of every subject; errors on an unlabeled dataset.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.subjects
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| Error::invalid(format!("subject {} has no label", s.id)))
            })
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for s in &self.subjects {
            if let Some(l) = s.label {
                c[l] += 1;
            }
        }
        c
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            num_nodes: self.num_nodes,
            num_timepoints: self.num_timepoints,
            num_subjects: self.subjects.len(),
            label_map: self.label_map.clone(),
            seed: self.seed,
        }
    }

    /// Writes the dataset in the documented directory layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let subjects_dir = dir.join("subjects");
        fs::create_dir_all(&subjects_dir).map_err(|e| Error::io(&subjects_dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&manifest_path, manifest + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        for s in &self.subjects {
            let path = subjects_dir.join(format!("{}.csv", s.id));
            let mut text = String::with_capacity(s.series.len() * 20);
            for row in s.series.chunks(self.num_timepoints) {
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        if self.is_labeled() {
            let path = dir.join("labels.csv");
            let mut text = String::from("id,label\n");
            for s in &self.subjects {
                text.push_str(&format!("{},{}\n", s.id, s.label.expect("labeled")));
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Reads and validates a dataset directory, computing every subject's graph.
pub fn load_dataset(dir: &Path) -> Result<TimeSeriesDataset> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "dataset directory does not exist"));
    }
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::data(&manifest_path, "missing manifest.json"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(&manifest_path, format!("invalid manifest: {e}")))?;
    let (p, t) = (manifest.num_nodes, manifest.num_timepoints);

    let subjects_dir = dir.join("subjects");
    let mut files: Vec<_> = fs::read_dir(&subjects_dir)
        .map_err(|e| Error::io(&subjects_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| path.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(&subjects_dir, "no subject files"));
    }
    if files.len() != manifest.num_subjects {
        return Err(Error::data(
            &subjects_dir,
            format!(
                "manifest lists {} subjects, found {} files",
                manifest.num_subjects,
                files.len()
            ),
        ));
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.is_file() {
        Some(read_labels(&labels_path)?)
    } else if manifest.label_map.is_some() {
        return Err(Error::data(&labels_path, "manifest has a label map but labels.csv is missing"));
    } else {
        None
    };

    let mut subjects = Vec::with_capacity(files.len());
    for path in &files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(path, "subject file name is not valid UTF-8"))?
            .to_string();
        let series = read_series(path, p, t)?;
        let graph = pearson_connectivity(&series, p, t).map_err(|e| Error::data(path, e.to_string()))?;
        let label = match &labels {
            Some(map) => Some(
                *map.get(&id)
                    .ok_or_else(|| Error::data(&labels_path, format!("no label for subject {id}")))?,
            ),
            None => None,
        };
        subjects.push(Subject {
            id,
            series,
            label,
            graph,
        });
    }
    TimeSeriesDataset::new(p, t, subjects, manifest.label_map, manifest.seed)
        .map_err(|e| Error::data(dir, e.to_string()))
}

fn read_series(path: &Path, p: usize, t: usize) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let mut series = Vec::with_capacity(p * t);
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        if record.len() != t {
            return Err(Error::data(
                path,
                format!("row {} has {} columns, expected {t}", rows + 1, record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::data(path, format!("row {}: cannot parse {field:?}", rows + 1)))?;
            if !v.is_finite() {
                return Err(Error::data(path, format!("row {}: non-finite value", rows + 1)));
            }
            series.push(v);
        }
        rows += 1;
    }
    if rows != p {
        return Err(Error::data(path, format!("has {rows} rows, manifest says {p}")));
    }
    Ok(series)
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(path, e.to_string()))?;
    let mut labels = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(path, e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::data(path, format!("line {}: expected id,label", i + 1)));
        }
        if i == 0 && &record[0] == "id" && &record[1] == "label" {
            continue;
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| Error::data(path, format!("line {}: bad label {:?}", i + 1, &record[1])))?;
        if label > 1 {
            return Err(Error::data(path, format!("line {}: label {label} not in {{0,1}}", i + 1)));
        }
        labels.insert(record[0].to_string(), label);
    }
    Ok(labels)
}

/// Contiguous window `[offset, offset+len)` of every node as a `[P, len, 1]` tensor.
pub fn window(subject: &Subject, num_nodes: usize, num_timepoints: usize, offset: usize, len: usize) -> Result<Tensor> {
    if len == 0 || offset + len > num_timepoints {
        return Err(Error::invalid(format!(
            "window [{offset}, {}) exceeds series length {num_timepoints}",
            offset + len
        )));
    }
    let mut data = Vec::with_capacity(num_nodes * len);
    for row in subject.series.chunks(num_timepoints) {
        data.extend_from_slice(&row[offset..offset + len]);
    }
    Tensor::new(vec![num_nodes, len, 1], data)
}

/// Random contiguous sub-sequence with a uniform start in `[0, T-L]`.
/// Returns the `[P, L, 1]` window and its offset.
pub fn sample_subsequence<R: Rng + ?Sized>(
    dataset: &TimeSeriesDataset,
    subject: usize,
    len: usize,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    let t = dataset.num_timepoints;
    if len > t {
        return Err(Error::invalid(format!(
            "sub-sequence length {len} exceeds series length {t}"
        )));
    }
    let offset = rng.random_range(0..=t - len);
    let w = window(&dataset.subjects[subject], dataset.num_nodes, t, offset, len)?;
    Ok((w, offset))
}

/// Batched network input: windows, per-sample normalized graphs and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, P, L, 1]`
    pub inputs: Tensor,
    /// `[B, P, P]`
    pub graphs: Tensor,
    /// Class per sample (empty for unlabeled batches).
    pub labels: Vec<usize>,
    /// Dataset index per sample.
    pub subjects: Vec<usize>,
    /// Window start per sample.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Assembles windows `(subject, offset)` of length `len`.
    pub fn assemble(dataset: &TimeSeriesDataset, picks: &[(usize, usize)], len: usize) -> Result<Self> {
        if picks.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let p = dataset.num_nodes;
        let mut inputs = Vec::with_capacity(picks.len() * p * len);
        let mut graphs = Vec::with_capacity(picks.len() * p * p);
        let mut labels = Vec::with_capacity(picks.len());
        for &(s, offset) in picks {
            let subject = &dataset.subjects[s];
            let w = window(subject, p, dataset.num_timepoints, offset, len)?;
            inputs.extend_from_slice(w.data());
            graphs.extend_from_slice(subject.graph.normalized());
            if let Some(l) = subject.label {
                labels.push(l);
            }
        }
        Ok(Self {
            inputs: Tensor::new(vec![picks.len(), p, len, 1], inputs)?,
            graphs: Tensor::new(vec![picks.len(), p, p], graphs)?,
            labels,
            subjects: picks.iter().map(|&(s, _)| s).collect(),
            offsets: picks.iter().map(|&(_, o)| o).collect(),
        })
    }
}

/// `batch_size/2` subjects per class drawn from `pool`, each with a fresh
/// random window. Draws without replacement while a class has enough
/// subjects and with replacement otherwise.
pub fn sample_class_balanced_batch<R: Rng + ?Sized>(
    dataset: &TimeSeriesDataset,
    pool: &[usize],
    batch_size: usize,
    len: usize,
    rng: &mut R,
) -> Result<Batch> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "class-balanced batch size must be even and positive, got {batch_size}"
        )));
    }
    if len > dataset.num_timepoints {
        return Err(Error::invalid(format!(
            "sub-sequence length {len} exceeds series length {}",
            dataset.num_timepoints
        )));
    }
    let per_class = batch_size / 2;
    let mut picks = Vec::with_capacity(batch_size);
    for class in 0..2 {
        let members: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| dataset.subjects[i].label == Some(class))
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("class {class} has no subjects to sample")));
        }
        let chosen: Vec<usize> = if members.len() >= per_class {
            members.choose_multiple(rng, per_class).copied().collect()
        } else {
            (0..per_class)
                .map(|_| members[rng.random_range(0..members.len())])
                .collect()
        };
        for s in chosen {
            let offset = rng.random_range(0..=dataset.num_timepoints - len);
            picks.push((s, offset));
        }
    }
    Batch::assemble(dataset, &picks, len)
}

/// Two windows per subject for the contrastive task. The second window is
/// redrawn until its offset differs from the first whenever `T > L`.
pub fn sample_view_pair<R: Rng + ?Sized>(
    dataset: &TimeSeriesDataset,
    pool: &[usize],
    batch_size: usize,
    len: usize,
    rng: &mut R,
) -> Result<(Batch, Batch)> {
    if pool.len() < 2 || batch_size < 2 {
        return Err(Error::invalid("contrastive batches need at least 2 subjects"));
    }
    if len > dataset.num_timepoints {
        return Err(Error::invalid(format!(
            "sub-sequence length {len} exceeds series length {}",
            dataset.num_timepoints
        )));
    }
    let n = batch_size.min(pool.len());
    let chosen: Vec<usize> = pool.choose_multiple(rng, n).copied().collect();
    let span = dataset.num_timepoints - len;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for s in chosen {
        let a = rng.random_range(0..=span);
        let b = if span == 0 {
            0
        } else {
            // uniform over the span excluding `a`
            let b = rng.random_range(0..span);
            if b >= a { b + 1 } else { b }
        };
        first.push((s, a));
        second.push((s, b));
    }
    Ok((
        Batch::assemble(dataset, &first, len)?,
        Batch::assemble(dataset, &second, len)?,
    ))
}

/// One cross-validation fold as dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split: each class is shuffled and dealt round-robin
/// across folds, continuing where the previous class stopped.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for class in 0..2 {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::invalid(format!(
                "class {class} has {} subjects, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for m in members {
            tests[cursor % k].push(m);
            cursor += 1;
        }
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {bad} not in {{0,1}}")));
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Stratified split of a training fold into meta-train (`⌊ratio·N⌋`
/// subjects) and meta-validation (the rest). Both parts keep at least one
/// subject of each class.
pub fn meta_split<R: Rng + ?Sized>(
    fold: &[usize],
    labels: &[usize],
    ratio: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "meta split ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in fold {
        by_class[labels[i]].push(i);
    }
    if by_class.iter().any(|c| c.len() < 2) {
        return Err(Error::invalid(format!(
            "meta split needs at least 2 subjects per class, got {} and {}",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let total = (ratio * fold.len() as f64).floor() as usize;
    // Largest-remainder allocation of the meta-train quota across classes.
    let exact: Vec<f64> = by_class.iter().map(|c| ratio * c.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut assigned: usize = quota.iter().sum();
    for &c in order.iter().cycle().take(4) {
        if assigned >= total {
            break;
        }
        if quota[c] < by_class[c].len() - 1 {
            quota[c] += 1;
            assigned += 1;
        }
    }
    for c in 0..2 {
        quota[c] = quota[c].clamp(1, by_class[c].len() - 1);
    }
    let mut train = Vec::with_capacity(total);
    let mut val = Vec::with_capacity(fold.len() - total);
    for c in 0..2 {
        let mut members = by_class[c].clone();
        members.shuffle(rng);
        train.extend_from_slice(&members[..quota[c]]);
        val.extend_from_slice(&members[quota[c]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Settings of the synthetic source/target generator.
///
/// Every subject follows a first-order autoregressive process whose
/// stationary covariance comes from a community factor model: node `i` in
/// community `c` loads on a global factor with weight `global_loading` and on
/// its community factor with weight `a_c + jitter`. Class 1 raises the
/// community loading of one planted community by `separability ·
/// planted_shift`. The target task plants its signal in community 0, the
/// source auxiliary label in the last community.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_source: usize,
    pub num_target: usize,
    pub num_nodes: usize,
    pub num_timepoints: usize,
    /// Class-signal dial; 0 makes the two class distributions identical.
    pub separability: f64,
    /// Fraction of target subjects in class 1.
    pub target_positive_fraction: f64,
    pub ar_coefficient: f64,
    pub communities: usize,
    pub global_loading: f64,
    pub community_loading: f64,
    /// Loading increase of the planted community at `separability = 1`.
    pub planted_shift: f64,
    /// Standard deviation of per-subject community-loading offsets.
    pub subject_jitter: f64,
    /// Standard deviation of per-node loading offsets.
    pub node_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_source: 300,
            num_target: 200,
            num_nodes: 22,
            num_timepoints: 256,
            separability: 0.6,
            target_positive_fraction: 102.0 / 245.0,
            ar_coefficient: 0.5,
            communities: 4,
            global_loading: 0.3,
            community_loading: 0.45,
            planted_shift: 0.35,
            subject_jitter: 0.12,
            node_jitter: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.num_source < 2 || self.num_target < 4 {
            return fail("generator needs at least 2 source and 4 target subjects".into());
        }
        if self.num_nodes < 2 || self.num_timepoints < 3 {
            return fail("generator needs at least 2 nodes and 3 timepoints".into());
        }
        if self.communities == 0 || self.communities > self.num_nodes {
            return fail(format!(
                "communities must lie in 1..={}, got {}",
                self.num_nodes, self.communities
            ));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return fail(format!("separability must lie in [0, 1], got {}", self.separability));
        }
        if !(self.target_positive_fraction > 0.0 && self.target_positive_fraction < 1.0) {
            return fail("target_positive_fraction must lie in (0, 1)".into());
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return fail("ar_coefficient must satisfy |phi| < 1".into());
        }
        if !(0.0..1.0).contains(&self.global_loading) || self.community_loading < 0.0 {
            return fail("loadings must be nonnegative with global_loading < 1".into());
        }
        if self.subject_jitter < 0.0 || self.node_jitter < 0.0 || self.planted_shift < 0.0 {
            return fail("jitters and planted_shift must be nonnegative".into());
        }
        Ok(())
    }

    fn community_of(&self, node: usize) -> usize {
        node * self.communities / self.num_nodes
    }
}

/// Derives an independent stream seed from a base seed and tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 finalizer over the running state
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        state = state.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Generates the (source, target) pair of synthetic datasets.
pub fn generate_synthetic(config: &GeneratorConfig, seed: u64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    config.validate()?;
    let source_labels = balanced_labels(config.num_source, 0.5, derive_seed(seed, &[1]));
    let target_labels = balanced_labels(
        config.num_target,
        config.target_positive_fraction,
        derive_seed(seed, &[2]),
    );
    let planted_source = config.communities - 1;
    let source = synth_domain(config, seed, 1, "src", &source_labels, planted_source)?;
    let target = synth_domain(config, seed, 2, "tgt", &target_labels, 0)?;
    Ok((source, target))
}

fn balanced_labels(n: usize, positive_fraction: f64, seed: u64) -> Vec<usize> {
    let positives = ((n as f64) * positive_fraction).round() as usize;
    let positives = positives.clamp(1, n - 1);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

fn synth_domain(
    config: &GeneratorConfig,
    seed: u64,
    domain: u64,
    prefix: &str,
    labels: &[usize],
    planted: usize,
) -> Result<TimeSeriesDataset> {
    let (p, t) = (config.num_nodes, config.num_timepoints);
    let mut subjects = Vec::with_capacity(labels.len());
    for (n, &label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[domain, n as u64 + 1]));
        let chol = subject_cholesky(config, label, planted, &mut rng)?;
        let series = ar1_series(&chol, p, t, config.ar_coefficient, &mut rng);
        let graph = pearson_connectivity(&series, p, t)?;
        subjects.push(Subject {
            id: format!("{prefix}_{n:04}"),
            series,
            label: Some(label),
            graph,
        });
    }
    let label_map = BTreeMap::from([
        ("0".to_string(), "class_0".to_string()),
        ("1".to_string(), "class_1".to_string()),
    ]);
    TimeSeriesDataset::new(p, t, subjects, Some(label_map), Some(seed))
}

/// Cholesky factor of one subject's latent correlation matrix.
fn subject_cholesky<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    label: usize,
    planted: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = config.num_nodes;
    let g = config.global_loading;
    let cap = (0.95 - g * g).max(0.0).sqrt();
    let community_offsets: Vec<f64> = (0..config.communities)
        .map(|_| config.subject_jitter * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let loadings: Vec<f64> = (0..p)
        .map(|i| {
            let c = config.community_of(i);
            let mut a = config.community_loading + community_offsets[c];
            if label == 1 && c == planted {
                a += config.separability * config.planted_shift;
            }
            a += config.node_jitter * rng.sample::<f64, _>(StandardNormal);
            a.clamp(0.0, cap)
        })
        .collect();
    let cov = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            let same = config.community_of(i) == config.community_of(j);
            g * g + if same { loadings[i] * loadings[j] } else { 0.0 }
        }
    });
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::invalid("latent covariance is not positive definite"))?;
    Ok(chol.l())
}

/// `x_t = φ x_{t-1} + sqrt(1-φ²) L ε_t`, started from the stationary law.
fn ar1_series<R: Rng + ?Sized>(chol: &DMatrix<f64>, p: usize, t: usize, phi: f64, rng: &mut R) -> Vec<f64> {
    let innovation_scale = (1.0 - phi * phi).sqrt();
    let mut series = vec![0.0; p * t];
    let mut state = vec![0.0; p];
    let mut eps = vec![0.0; p];
    for step in 0..t {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let mut shock = 0.0;
            for j in 0..=i {
                shock += chol[(i, j)] * eps[j];
            }
            state[i] = if step == 0 {
                shock
            } else {
                phi * state[i] + innovation_scale * shock
            };
            series[i * t + step] = state[i];
        }
    }
    series
}
