//! Optimizers and the five training strategies.
//!
//! Parameters are partitioned into the extractor `φ`, the target head `θ_t`
//! and the source head `θ_s`. Every update names the partitions it touches;
//! the others are bound to the tape as constants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::{
    derive_seed, meta_split, sample_class_balanced_batch, sample_view_pair, window, Batch, Fold,
    TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::losses::{contrastive_loss, cross_entropy_loss};
use crate::model::{
    extractor_forward, head_forward, BlockVars, HeadVars, ModelConfig, ModelParameters, Partition,
    SourceTask,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    Ft,
    Mtl,
    Mel,
    Metsk,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::Ft,
        Strategy::Mtl,
        Strategy::Mel,
        Strategy::Metsk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Ft => "ft",
            Strategy::Mtl => "mtl",
            Strategy::Mel => "mel",
            Strategy::Metsk => "metsk",
        }
    }

    pub fn needs_source(self) -> bool {
        matches!(self, Strategy::Ft | Strategy::Mtl | Strategy::Metsk)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy {s:?}; expected one of baseline, ft, mtl, mel, metsk"
                ))
            })
    }
}

/// Optimization hyperparameters shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// SGD steps of the inner loop (`k`).
    pub inner_steps: usize,
    /// Outer iterations, or plain iterations for the single-loop strategies (`M`).
    pub outer_iterations: usize,
    /// Source-only iterations before the main loop (MeTSK warm-up, FT pre-training).
    pub warmup_iterations: usize,
    pub batch_size: usize,
    /// Inner-loop SGD rate (`α`).
    pub inner_lr: f64,
    /// Adam rate (`β`).
    pub outer_lr: f64,
    /// Weight of the target loss next to the source loss (`λ`).
    pub lambda: f64,
    /// Contrastive temperature (`τ`).
    pub temperature: f64,
    /// Sub-sequence window length (`L`).
    pub subsequence_length: usize,
    pub source_task: SourceTask,
    /// Re-draw the target head at the start of every outer iteration.
    pub reinit_target_head: bool,
    pub meta_train_ratio: f64,
    /// Evenly spaced windows averaged per test subject.
    pub eval_windows: usize,
    /// Record the test AUC every this many iterations (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_steps: 30,
            outer_iterations: 3600,
            warmup_iterations: 1800,
            batch_size: 32,
            inner_lr: 0.01,
            outer_lr: 0.001,
            lambda: 15.0,
            temperature: 30.0,
            subsequence_length: 64,
            source_task: SourceTask::Contrastive,
            reinit_target_head: true,
            meta_train_ratio: 0.8,
            eval_windows: 4,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.inner_lr", self.inner_lr),
            ("train.outer_lr", self.outer_lr),
            ("train.temperature", self.temperature),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "train.lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "train.batch_size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.subsequence_length == 0 {
            return Err(Error::invalid("train.subsequence_length must be positive"));
        }
        if !(self.meta_train_ratio > 0.0 && self.meta_train_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "train.meta_train_ratio must lie in (0, 1), got {}",
                self.meta_train_ratio
            )));
        }
        if self.eval_windows == 0 {
            return Err(Error::invalid("train.eval_windows must be positive"));
        }
        Ok(())
    }
}

/// `θ ← θ − α·g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("parameter {:?} vs gradient {:?}", param.shape(), grad.shape()),
        ));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != state.first_moment.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter {:?}, gradient {:?}, accumulator {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Adam bound to a fixed set of partitions of a model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    parts: Vec<Partition>,
    state: AdamState,
    lr: f64,
}

impl Optimizer {
    pub fn new(params: &ModelParameters, parts: &[Partition], lr: f64) -> Self {
        let tensors: Vec<&Tensor> = parts.iter().flat_map(|&p| params.partition_tensors(p)).collect();
        Self {
            parts: parts.to_vec(),
            state: AdamState::new(&tensors),
            lr,
        }
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.parts
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update from gradients ordered as [`Self::partitions`].
    pub fn step(&mut self, params: &mut ModelParameters, grads: &[Tensor]) -> Result<()> {
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        let ModelParameters {
            extractor,
            target_head,
            source_head,
            ..
        } = params;
        let mut extractor = Some(extractor);
        let mut target_head = Some(target_head);
        let mut source_head = Some(source_head);
        for &part in &self.parts {
            match part {
                Partition::Extractor => {
                    if let Some(e) = extractor.take() {
                        tensors.extend(e.iter_mut().flat_map(|b| b.tensors_mut()));
                    }
                }
                Partition::TargetHead => {
                    if let Some(h) = target_head.take() {
                        tensors.extend(h.tensors_mut());
                    }
                }
                Partition::SourceHead => {
                    if let Some(h) = source_head.take() {
                        tensors.extend(h.tensors_mut());
                    }
                }
            }
        }
        adam_step(&mut self.state, tensors, grads, self.lr)?;
        for &part in &self.parts {
            params.clamp_edge_importance(part);
        }
        Ok(())
    }
}

/// A batch for the source objective.
#[derive(Debug, Clone)]
pub enum SourceBatch {
    /// Two windows of the same subjects for the contrastive task.
    Views(Batch, Batch),
    /// Class-balanced windows for the supervised auxiliary task.
    Labeled(Batch),
}

pub fn sample_source_batch(
    source: &TimeSeriesDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SourceBatch> {
    let all: Vec<usize> = (0..source.len()).collect();
    let len = config.subsequence_length;
    match config.source_task {
        SourceTask::Contrastive => {
            let (a, b) = sample_view_pair(source, &all, config.batch_size, len, rng)?;
            Ok(SourceBatch::Views(a, b))
        }
        SourceTask::Supervised => Ok(SourceBatch::Labeled(sample_class_balanced_batch(
            source,
            &all,
            config.batch_size,
            len,
            rng,
        )?)),
    }
}

/// Loss values of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub source: Option<f64>,
    pub target: Option<f64>,
}

struct Bound {
    extractor: Vec<BlockVars>,
    target: HeadVars,
    source: HeadVars,
}

impl Bound {
    fn new(tape: &Tape, params: &ModelParameters, trainable: &[Partition]) -> Self {
        let on = |p| trainable.contains(&p);
        Self {
            extractor: params.bind_extractor(tape, on(Partition::Extractor)),
            target: params.target_head.bind(tape, on(Partition::TargetHead)),
            source: params.source_head.bind(tape, on(Partition::SourceHead)),
        }
    }

    fn vars(&self, part: Partition) -> Vec<Var> {
        match part {
            Partition::Extractor => self.extractor.iter().flat_map(|b| b.vars()).collect(),
            Partition::TargetHead => self.target.vars(),
            Partition::SourceHead => self.source.vars(),
        }
    }

    fn gradients(&self, grads: &Gradients, parts: &[Partition]) -> Vec<Tensor> {
        parts
            .iter()
            .flat_map(|&p| self.vars(p))
            .map(|v| grads.wrt(v))
            .collect()
    }
}

fn features(tape: &Tape, bound: &Bound, batch: &Batch) -> Result<(Var, Var)> {
    let x = tape.constant(batch.inputs.clone());
    let graphs = tape.constant(batch.graphs.clone());
    Ok((extractor_forward(tape, x, graphs, &bound.extractor)?, graphs))
}

fn target_loss(tape: &Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
    if batch.is_empty() || batch.labels.len() != batch.len() {
        return Err(Error::invalid("target batch is empty or unlabeled"));
    }
    let (h, graphs) = features(tape, bound, batch)?;
    let logits = head_forward(tape, h, graphs, &bound.target)?;
    cross_entropy_loss(tape, logits, &batch.labels)
}

fn source_loss(tape: &Tape, bound: &Bound, batch: &SourceBatch, temperature: f64) -> Result<Var> {
    match batch {
        SourceBatch::Views(a, b) => {
            let (ha, ga) = features(tape, bound, a)?;
            let za = head_forward(tape, ha, ga, &bound.source)?;
            let (hb, gb) = features(tape, bound, b)?;
            let zb = head_forward(tape, hb, gb, &bound.source)?;
            contrastive_loss(tape, za, zb, temperature)
        }
        SourceBatch::Labeled(b) => {
            if b.labels.len() != b.len() {
                return Err(Error::invalid("supervised source batch is unlabeled"));
            }
            let (h, graphs) = features(tape, bound, b)?;
            let logits = head_forward(tape, h, graphs, &bound.source)?;
            cross_entropy_loss(tape, logits, &b.labels)
        }
    }
}

/// Gradient of `L_S + λ·L_T` (or whichever of the two is present) with
/// respect to `parts`, in [`Optimizer::step`] order. With only a target
/// batch the objective is `L_T` alone.
pub fn objective_gradients(
    params: &ModelParameters,
    parts: &[Partition],
    source: Option<&SourceBatch>,
    target: Option<&Batch>,
    lambda: f64,
    temperature: f64,
) -> Result<(Vec<Tensor>, StepLosses)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, parts);
    let ls = source
        .map(|b| source_loss(&tape, &bound, b, temperature))
        .transpose()?;
    let lt = target.map(|b| target_loss(&tape, &bound, b)).transpose()?;
    let total = match (ls, lt) {
        (Some(s), Some(t)) => {
            let weighted = tape.scale(t, lambda)?;
            tape.add(s, weighted)?
        }
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => return Err(Error::invalid("update needs a source or a target batch")),
    };
    let grads = tape.backward(total)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item()).transpose();
    let losses = StepLosses {
        source: value(ls)?,
        target: value(lt)?,
    };
    Ok((bound.gradients(&grads, parts), losses))
}

/// One Adam step on the optimizer's partitions.
pub fn train_step(
    params: &mut ModelParameters,
    optimizer: &mut Optimizer,
    source: Option<&SourceBatch>,
    target: Option<&Batch>,
    lambda: f64,
    temperature: f64,
) -> Result<StepLosses> {
    let (grads, losses) = objective_gradients(params, optimizer.partitions(), source, target, lambda, temperature)?;
    optimizer.step(params, &grads)?;
    Ok(losses)
}

/// `k` SGD steps on the target head with the extractor frozen. Step `j`
/// uses `batches[j % batches.len()]`. Returns the loss before each step.
pub fn inner_loop_adapt(
    params: &mut ModelParameters,
    batches: &[Batch],
    k: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty() || b.labels.len() != b.len()) {
        return Err(Error::invalid("inner loop needs non-empty labeled batches"));
    }
    let mut cache: Vec<Option<Tensor>> = vec![None; batches.len()];
    let mut losses = Vec::with_capacity(k);
    for j in 0..k {
        let idx = j % batches.len();
        let batch = &batches[idx];
        if cache[idx].is_none() {
            let tape = Tape::new();
            let ext = params.bind_extractor(&tape, false);
            let x = tape.constant(batch.inputs.clone());
            let g = tape.constant(batch.graphs.clone());
            let h = extractor_forward(&tape, x, g, &ext)?;
            cache[idx] = Some((*tape.value(h)).clone());
        }
        let tape = Tape::new();
        let h = tape.constant(cache[idx].clone().expect("cached"));
        let graphs = tape.constant(batch.graphs.clone());
        let head = params.target_head.bind(&tape, true);
        let logits = head_forward(&tape, h, graphs, &head)?;
        let loss = cross_entropy_loss(&tape, logits, &batch.labels)?;
        losses.push(tape.value(loss).item()?);
        let grads = tape.backward(loss)?;
        let g = head.gradient(&grads);
        for (p, d) in params.target_head.tensors_mut().into_iter().zip(g.tensors()) {
            sgd_step(p, d, lr)?;
        }
        params.clamp_edge_importance(Partition::TargetHead);
    }
    Ok(losses)
}

/// Outer update of `φ` (and `θ_s` when a source batch is given) from
/// `L_S + λ·L_T`, with `L_T` on the meta-validation batch at the current,
/// frozen target head.
pub fn outer_loop_step(
    params: &mut ModelParameters,
    source: Option<&SourceBatch>,
    meta_val: &Batch,
    optimizer: &mut Optimizer,
    lambda: f64,
    temperature: f64,
) -> Result<StepLosses> {
    if meta_val.is_empty() {
        return Err(Error::invalid("meta-validation batch is empty"));
    }
    if optimizer.partitions().contains(&Partition::TargetHead) {
        return Err(Error::invalid("the outer loop must not update the target head"));
    }
    train_step(params, optimizer, source, Some(meta_val), lambda, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Source-only training (MeTSK warm-up, FT pre-training).
    Warmup,
    /// Single-loop training on the target (and source for MTL).
    Train,
    /// One outer iteration of the bi-level loop.
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub source_loss: Option<f64>,
    pub target_loss: Option<f64>,
    /// Last inner-loop loss of a meta iteration.
    pub inner_loss: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<HistoryRecord>,
}

/// Parameter digests around one outer iteration of a bi-level run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Digests {
    pub extractor: u64,
    pub target_head: u64,
    pub source_head: u64,
}

impl Digests {
    pub fn of(params: &ModelParameters) -> Self {
        Self {
            extractor: params.digest(Partition::Extractor),
            target_head: params.digest(Partition::TargetHead),
            source_head: params.digest(Partition::SourceHead),
        }
    }
}

/// What a bi-level run reports to an observer once per outer iteration.
#[derive(Debug)]
pub struct MetaEvent<'a> {
    pub iteration: usize,
    pub fold_train: &'a [usize],
    pub meta_train: &'a [usize],
    pub meta_val: &'a [usize],
    /// After the optional head re-initialization.
    pub before_inner: Digests,
    pub after_inner: Digests,
    pub after_outer: Digests,
}

/// Trained parameters, history and held-out predictions of one fold.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    /// Final parameters; the target head is the one used for evaluation.
    pub params: ModelParameters,
    pub history: TrainingHistory,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<usize>,
    pub auc: f64,
}

/// Trains `strategy` on `fold.train` of `target` and scores `fold.test`.
#[allow(clippy::too_many_arguments)]
pub fn run_strategy(
    strategy: Strategy,
    config: &TrainConfig,
    model_config: &ModelConfig,
    source: Option<&TimeSeriesDataset>,
    target: &TimeSeriesDataset,
    fold: &Fold,
    seed: u64,
    fold_index: usize,
) -> Result<RunOutput> {
    run_strategy_observed(
        strategy,
        config,
        model_config,
        source,
        target,
        fold,
        seed,
        fold_index,
        None,
    )
}

/// [`run_strategy`] with an observer called after every outer iteration of
/// the bi-level strategies.
#[allow(clippy::too_many_arguments)]
pub fn run_strategy_observed(
    strategy: Strategy,
    config: &TrainConfig,
    model_config: &ModelConfig,
    source: Option<&TimeSeriesDataset>,
    target: &TimeSeriesDataset,
    fold: &Fold,
    seed: u64,
    fold_index: usize,
    mut observer: Option<&mut dyn FnMut(&MetaEvent<'_>)>,
) -> Result<RunOutput> {
    config.validate()?;
    model_config.validate()?;
    let source = if strategy.needs_source() {
        Some(source.ok_or_else(|| {
            Error::invalid(format!("strategy {strategy} needs a source dataset"))
        })?)
    } else {
        None
    };
    check_inputs(config, source, target, fold)?;
    let labels = target.labels()?;

    let tag = fold_index as u64;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, 2]));
    let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, 3]));
    let mut params = ModelParameters::init(model_config, target.num_nodes, config.source_task, &mut init_rng)?;
    let mut history = TrainingHistory::default();
    let len = config.subsequence_length;
    let (lambda, tau) = (config.lambda, config.temperature);
    let snapshot = |params: &ModelParameters, it: usize| -> Result<Option<f64>> {
        if config.eval_every > 0 && (it + 1).is_multiple_of(config.eval_every) {
            let scores = predict_scores(params, target, &fold.test, len, config.eval_windows)?;
            let y: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
            Ok(Some(auc(&scores, &y)?))
        } else {
            Ok(None)
        }
    };

    let warm = |params: &mut ModelParameters,
                optimizer: &mut Optimizer,
                rng: &mut ChaCha8Rng,
                history: &mut TrainingHistory|
     -> Result<()> {
        let source = source.expect("checked");
        for it in 0..config.warmup_iterations {
            let batch = sample_source_batch(source, config, rng)?;
            let l = train_step(params, optimizer, Some(&batch), None, lambda, tau)?;
            history.records.push(HistoryRecord {
                phase: Phase::Warmup,
                iteration: it,
                source_loss: l.source,
                target_loss: None,
                inner_loss: None,
                test_auc: None,
            });
        }
        Ok(())
    };

    match strategy {
        Strategy::Baseline | Strategy::Ft => {
            if strategy == Strategy::Ft {
                let mut pre = Optimizer::new(&params, &[Partition::Extractor, Partition::SourceHead], config.outer_lr);
                warm(&mut params, &mut pre, &mut rng, &mut history)?;
                params.target_head = ModelParameters::fresh_target_head(model_config, target.num_nodes, &mut head_rng);
            }
            let mut opt = Optimizer::new(&params, &[Partition::Extractor, Partition::TargetHead], config.outer_lr);
            for it in 0..config.outer_iterations {
                let batch = sample_class_balanced_batch(target, &fold.train, config.batch_size, len, &mut rng)?;
                let l = train_step(&mut params, &mut opt, None, Some(&batch), lambda, tau)?;
                history.records.push(HistoryRecord {
                    phase: Phase::Train,
                    iteration: it,
                    source_loss: None,
                    target_loss: l.target,
                    inner_loss: None,
                    test_auc: snapshot(&params, it)?,
                });
            }
        }
        Strategy::Mtl => {
            let source = source.expect("checked");
            let mut opt = Optimizer::new(
                &params,
                &[Partition::Extractor, Partition::TargetHead, Partition::SourceHead],
                config.outer_lr,
            );
            for it in 0..config.outer_iterations {
                let sb = sample_source_batch(source, config, &mut rng)?;
                let tb = sample_class_balanced_batch(target, &fold.train, config.batch_size, len, &mut rng)?;
                let l = train_step(&mut params, &mut opt, Some(&sb), Some(&tb), lambda, tau)?;
                history.records.push(HistoryRecord {
                    phase: Phase::Train,
                    iteration: it,
                    source_loss: l.source,
                    target_loss: l.target,
                    inner_loss: None,
                    test_auc: snapshot(&params, it)?,
                });
            }
        }
        Strategy::Mel | Strategy::Metsk => {
            let parts: &[Partition] = if strategy == Strategy::Metsk {
                &[Partition::Extractor, Partition::SourceHead]
            } else {
                &[Partition::Extractor]
            };
            let mut opt = Optimizer::new(&params, parts, config.outer_lr);
            if strategy == Strategy::Metsk {
                warm(&mut params, &mut opt, &mut rng, &mut history)?;
            }
            for it in 0..config.outer_iterations {
                if config.reinit_target_head {
                    params.target_head =
                        ModelParameters::fresh_target_head(model_config, target.num_nodes, &mut head_rng);
                }
                let (meta_train, meta_val) = meta_split(&fold.train, &labels, config.meta_train_ratio, &mut rng)?;
                let before_inner = observer.as_ref().map(|_| Digests::of(&params));
                let tr_batch = sample_class_balanced_batch(target, &meta_train, config.batch_size, len, &mut rng)?;
                let inner = inner_loop_adapt(&mut params, &[tr_batch], config.inner_steps, config.inner_lr)?;
                let after_inner = observer.as_ref().map(|_| Digests::of(&params));
                let sb = match source {
                    Some(s) if strategy == Strategy::Metsk => Some(sample_source_batch(s, config, &mut rng)?),
                    _ => None,
                };
                let val_batch = sample_class_balanced_batch(target, &meta_val, config.batch_size, len, &mut rng)?;
                let l = outer_loop_step(&mut params, sb.as_ref(), &val_batch, &mut opt, lambda, tau)?;
                if let Some(obs) = observer.as_mut() {
                    obs(&MetaEvent {
                        iteration: it,
                        fold_train: &fold.train,
                        meta_train: &meta_train,
                        meta_val: &meta_val,
                        before_inner: before_inner.expect("observed"),
                        after_inner: after_inner.expect("observed"),
                        after_outer: Digests::of(&params),
                    });
                }
                let test_auc = if config.eval_every > 0 && (it + 1).is_multiple_of(config.eval_every) {
                    let mut probe = params.clone();
                    adapt_evaluation_head(&mut probe, model_config, config, target, &fold.train, &mut head_rng.clone(), &mut rng.clone())?;
                    snapshot(&probe, it)?
                } else {
                    None
                };
                history.records.push(HistoryRecord {
                    phase: Phase::Meta,
                    iteration: it,
                    source_loss: l.source,
                    target_loss: l.target,
                    inner_loss: inner.last().copied(),
                    test_auc,
                });
            }
            adapt_evaluation_head(&mut params, model_config, config, target, &fold.train, &mut head_rng, &mut rng)?;
        }
    }

    let test_scores = predict_scores(&params, target, &fold.test, len, config.eval_windows)?;
    let test_labels: Vec<usize> = fold.test.iter().map(|&i| labels[i]).collect();
    let auc = auc(&test_scores, &test_labels)?;
    Ok(RunOutput {
        strategy,
        params,
        history,
        test_scores,
        test_labels,
        auc,
    })
}

/// Target head used for testing a bi-level run: `k` inner steps on the full
/// training fold, one class-balanced batch per step, starting from a fresh
/// head when heads are re-initialized per outer iteration and from the
/// trained head otherwise.
fn adapt_evaluation_head(
    params: &mut ModelParameters,
    model_config: &ModelConfig,
    config: &TrainConfig,
    target: &TimeSeriesDataset,
    train: &[usize],
    head_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if config.reinit_target_head {
        params.target_head = ModelParameters::fresh_target_head(model_config, target.num_nodes, head_rng);
    }
    let batches = (0..config.inner_steps.max(1))
        .map(|_| sample_class_balanced_batch(target, train, config.batch_size, config.subsequence_length, rng))
        .collect::<Result<Vec<_>>>()?;
    inner_loop_adapt(params, &batches, config.inner_steps, config.inner_lr)?;
    Ok(())
}

fn check_inputs(
    config: &TrainConfig,
    source: Option<&TimeSeriesDataset>,
    target: &TimeSeriesDataset,
    fold: &Fold,
) -> Result<()> {
    let len = config.subsequence_length;
    if len > target.num_timepoints {
        return Err(Error::invalid(format!(
            "train.subsequence_length {len} exceeds target series length {}",
            target.num_timepoints
        )));
    }
    if !target.is_labeled() {
        return Err(Error::invalid("target dataset must be labeled"));
    }
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(Error::invalid("fold has an empty train or test set"));
    }
    if let Some(bad) = fold.train.iter().chain(&fold.test).find(|&&i| i >= target.len()) {
        return Err(Error::invalid(format!("fold index {bad} out of range")));
    }
    if let Some(s) = source {
        if s.num_nodes != target.num_nodes {
            return Err(Error::invalid(format!(
                "source has {} nodes, target has {}",
                s.num_nodes, target.num_nodes
            )));
        }
        if len > s.num_timepoints {
            return Err(Error::invalid(format!(
                "train.subsequence_length {len} exceeds source series length {}",
                s.num_timepoints
            )));
        }
        if config.source_task == SourceTask::Supervised && !s.is_labeled() {
            return Err(Error::invalid("supervised source task needs a labeled source dataset"));
        }
    }
    Ok(())
}

/// Start offsets of `count` evenly spaced windows of length `len`.
pub fn eval_offsets(num_timepoints: usize, len: usize, count: usize) -> Vec<usize> {
    let span = num_timepoints - len;
    if count <= 1 || span == 0 {
        return vec![span / 2];
    }
    (0..count)
        .map(|i| ((i * span) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

/// Class-1 probability of each subject under the current target head,
/// averaged over evenly spaced windows.
pub fn predict_scores(
    params: &ModelParameters,
    dataset: &TimeSeriesDataset,
    subjects: &[usize],
    len: usize,
    windows: usize,
) -> Result<Vec<f64>> {
    let offsets = eval_offsets(dataset.num_timepoints, len, windows);
    let picks: Vec<(usize, usize)> = subjects
        .iter()
        .flat_map(|&s| offsets.iter().map(move |&o| (s, o)))
        .collect();
    let mut probs = Vec::with_capacity(picks.len());
    for chunk in picks.chunks(EVAL_CHUNK) {
        let batch = Batch::assemble(dataset, chunk, len)?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, params, &[]);
        let (h, graphs) = features(&tape, &bound, &batch)?;
        let logits = head_forward(&tape, h, graphs, &bound.target)?;
        let v = tape.value(logits);
        for row in v.data().chunks(2) {
            probs.push(1.0 / (1.0 + (row[0] - row[1]).exp()));
        }
    }
    Ok(probs
        .chunks(offsets.len())
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// Extractor output `[1, P, len, C]` for one window of one subject.
pub fn extract_features(params: &ModelParameters, dataset: &TimeSeriesDataset, subject: usize, offset: usize, len: usize) -> Result<Tensor> {
    let w = window(&dataset.subjects[subject], dataset.num_nodes, dataset.num_timepoints, offset, len)?;
    let batch = Batch {
        inputs: w.reshape(&[1, dataset.num_nodes, len, 1])?,
        graphs: dataset.subjects[subject].graph.normalized_tensor().reshape(&[1, dataset.num_nodes, dataset.num_nodes])?,
        labels: Vec::new(),
        subjects: vec![subject],
        offsets: vec![offset],
    };
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, &[]);
    let (h, _) = features(&tape, &bound, &batch)?;
    let out = (*tape.value(h)).clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut t = Tensor::scalar(1.0);
        sgd_step(&mut t, &Tensor::scalar(0.5), 0.01).unwrap();
        assert!((t.item().unwrap() - 0.995).abs() < 1e-15);
        let before = t.clone();
        sgd_step(&mut t, &Tensor::scalar(0.0), 0.01).unwrap();
        assert_eq!(t, before);
        sgd_step(&mut t, &Tensor::scalar(3.0), 0.0).unwrap();
        assert_eq!(t, before);
        assert!(sgd_step(&mut t, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut state, vec![&mut p], &[Tensor::scalar(1.0)], 0.001).unwrap();
        let want = -0.001 / (1.0 + ADAM_EPSILON);
        assert!((p.item().unwrap() - want).abs() < 1e-18);
        assert!((p.item().unwrap() + 0.000999999).abs() < 1e-9);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let mut p = Tensor::vector(vec![0.5, 0.5, 0.5]);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut state, vec![&mut p], &[Tensor::vector(vec![-3.0, 0.0, 1e-3])], 0.01).unwrap();
        let d = p.data();
        assert!((d[0] - 0.51).abs() < 1e-8);
        assert_eq!(d[1], 0.5);
        assert!((d[2] - 0.49).abs() < 1e-7);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p]);
        assert!(adam_step(&mut state, vec![&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("maml".parse::<Strategy>().is_err());
    }

    #[test]
    fn eval_offsets_span_the_series() {
        assert_eq!(eval_offsets(10, 4, 4), vec![0, 2, 4, 6]);
        assert_eq!(eval_offsets(10, 10, 4), vec![0]);
        assert_eq!(eval_offsets(10, 4, 1), vec![3]);
    }

    #[test]
    fn config_validation_names_keys() {
        let c = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("train.batch_size"));
        let c = TrainConfig {
            inner_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("train.inner_lr"));
    }
}
