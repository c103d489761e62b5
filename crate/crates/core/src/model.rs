//! ST-GCN blocks, the three-block feature extractor and the two task heads.
//!
//! Tensors flowing through the network are batched as `[batch, nodes, time,
//! channels]`; graphs are the per-sample renormalized adjacencies
//! `[batch, nodes, nodes]`.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Channel plan of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Node feature length of the input graph (`C_0`).
    pub input_channels: usize,
    /// Output widths of the three extractor blocks.
    pub extractor_channels: [usize; 3],
    /// Output width of the ST-GCN block inside each head.
    pub head_channels: usize,
    /// Source-head embedding size for the contrastive task.
    pub embedding_dim: usize,
    /// Temporal convolution length; odd so that same-padding is symmetric.
    pub temporal_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            extractor_channels: [16, 32, 64],
            head_channels: 64,
            embedding_dim: 64,
            temporal_kernel: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.head_channels == 0
            || self.embedding_dim == 0
            || self.extractor_channels.contains(&0)
        {
            return Err(Error::invalid("model: channel widths must be positive"));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "model.temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.extractor_channels[2]
    }
}

/// What the source head emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTask {
    /// Embedding for the graph contrastive objective.
    Contrastive,
    /// Two-class logits for a supervised auxiliary label.
    Supervised,
}

/// One spatial graph convolution followed by a per-node temporal convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StGcnBlock {
    /// `[c_in, c_out]` channel map applied after graph mixing.
    pub weight: Tensor,
    /// `[c_out, c_out, k]` temporal kernel.
    pub temporal_kernel: Tensor,
    /// `[P, P]` elementwise mask on the normalized adjacency.
    pub edge_importance: Tensor,
}

impl StGcnBlock {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, num_nodes: usize, rng: &mut R) -> Self {
        Self {
            weight: gaussian(&[c_in, c_out], (1.0 / c_in as f64).sqrt(), rng),
            temporal_kernel: gaussian(&[c_out, c_out, k], (2.0 / (c_out * k) as f64).sqrt(), rng),
            edge_importance: Tensor::ones(&[num_nodes, num_nodes]),
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BlockVars {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BlockVars {
            weight: put(&self.weight),
            kernel: put(&self.temporal_kernel),
            edge: put(&self.edge_importance),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.weight, &self.temporal_kernel, &self.edge_importance]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [
            &mut self.weight,
            &mut self.temporal_kernel,
            &mut self.edge_importance,
        ]
    }
}

/// Head: one ST-GCN block, global mean pooling, one fully-connected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub block: StGcnBlock,
    /// `[c, out]`
    pub fc_weight: Tensor,
    /// `[out]`
    pub fc_bias: Tensor,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_block: usize,
        out: usize,
        k: usize,
        num_nodes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            block: StGcnBlock::init(c_in, c_block, k, num_nodes, rng),
            fc_weight: gaussian(&[c_block, out], (1.0 / c_block as f64).sqrt(), rng),
            fc_bias: Tensor::zeros(&[out]),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc_bias.len()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> HeadVars {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadVars {
            block: self.block.bind(tape, trainable),
            fc_weight: put(&self.fc_weight),
            fc_bias: put(&self.fc_bias),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.block.tensors().into();
        v.extend([&self.fc_weight, &self.fc_bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.block.tensors_mut().into();
        v.extend([&mut self.fc_weight, &mut self.fc_bias]);
        v
    }
}

/// Tape handles for a bound [`StGcnBlock`].
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub weight: Var,
    pub kernel: Var,
    pub edge: Var,
}

impl BlockVars {
    /// Handles in [`StGcnBlock::tensors`] order.
    pub fn vars(&self) -> [Var; 3] {
        [self.weight, self.kernel, self.edge]
    }

    pub fn gradient(&self, grads: &Gradients) -> StGcnBlock {
        StGcnBlock {
            weight: grads.wrt(self.weight),
            temporal_kernel: grads.wrt(self.kernel),
            edge_importance: grads.wrt(self.edge),
        }
    }
}

/// Tape handles for a bound [`Head`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub block: BlockVars,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

impl HeadVars {
    /// Handles in [`Head::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.block.vars().into();
        v.extend([self.fc_weight, self.fc_bias]);
        v
    }

    pub fn gradient(&self, grads: &Gradients) -> Head {
        Head {
            block: self.block.gradient(grads),
            fc_weight: grads.wrt(self.fc_weight),
            fc_bias: grads.wrt(self.fc_bias),
        }
    }
}

/// Which disjoint parameter group an operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// φ, the three extractor blocks.
    Extractor,
    /// θ_t, the target head.
    TargetHead,
    /// θ_s, the source head.
    SourceHead,
}

/// All trainable parameters, partitioned into φ, θ_t and θ_s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub num_nodes: usize,
    pub source_task: SourceTask,
    pub extractor: Vec<StGcnBlock>,
    pub target_head: Head,
    pub source_head: Head,
}

impl ModelParameters {
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        num_nodes: usize,
        source_task: SourceTask,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if num_nodes == 0 {
            return Err(Error::invalid("model needs at least one node"));
        }
        let k = config.temporal_kernel;
        let mut c_in = config.input_channels;
        let mut extractor = Vec::with_capacity(3);
        for &c_out in &config.extractor_channels {
            extractor.push(StGcnBlock::init(c_in, c_out, k, num_nodes, rng));
            c_in = c_out;
        }
        let target_head = Self::fresh_target_head(config, num_nodes, rng);
        let source_out = match source_task {
            SourceTask::Contrastive => config.embedding_dim,
            SourceTask::Supervised => 2,
        };
        let source_head = Head::init(c_in, config.head_channels, source_out, k, num_nodes, rng);
        Ok(Self {
            config: config.clone(),
            num_nodes,
            source_task,
            extractor,
            target_head,
            source_head,
        })
    }

    /// A newly initialized two-class target head for this channel plan.
    pub fn fresh_target_head<R: Rng + ?Sized>(config: &ModelConfig, num_nodes: usize, rng: &mut R) -> Head {
        Head::init(
            config.feature_channels(),
            config.head_channels,
            2,
            config.temporal_kernel,
            num_nodes,
            rng,
        )
    }

    pub fn bind_extractor(&self, tape: &Tape, trainable: bool) -> Vec<BlockVars> {
        self.extractor.iter().map(|b| b.bind(tape, trainable)).collect()
    }

    pub fn partition_tensors(&self, part: Partition) -> Vec<&Tensor> {
        match part {
            Partition::Extractor => self.extractor.iter().flat_map(|b| b.tensors()).collect(),
            Partition::TargetHead => self.target_head.tensors(),
            Partition::SourceHead => self.source_head.tensors(),
        }
    }

    pub fn partition_tensors_mut(&mut self, part: Partition) -> Vec<&mut Tensor> {
        match part {
            Partition::Extractor => self.extractor.iter_mut().flat_map(|b| b.tensors_mut()).collect(),
            Partition::TargetHead => self.target_head.tensors_mut(),
            Partition::SourceHead => self.source_head.tensors_mut(),
        }
    }

    /// Order-sensitive hash over the bit patterns of one partition.
    pub fn digest(&self, part: Partition) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.partition_tensors(part) {
            for d in t.shape() {
                h.write_usize(*d);
            }
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn parameter_count(&self) -> usize {
        [Partition::Extractor, Partition::TargetHead, Partition::SourceHead]
            .iter()
            .flat_map(|&p| self.partition_tensors(p))
            .map(Tensor::len)
            .sum()
    }

    /// Keeps the edge-importance masks of one partition nonnegative.
    pub fn clamp_edge_importance(&mut self, part: Partition) {
        let blocks: Vec<&mut StGcnBlock> = match part {
            Partition::Extractor => self.extractor.iter_mut().collect(),
            Partition::TargetHead => vec![&mut self.target_head.block],
            Partition::SourceHead => vec![&mut self.source_head.block],
        };
        for block in blocks {
            for v in block.edge_importance.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Spatial graph convolution, channel map, temporal convolution and ReLU.
pub fn block_forward(tape: &Tape, x: Var, graphs: Var, block: &BlockVars) -> Result<Var> {
    let xs = tape.shape(x);
    let gs = tape.shape(graphs);
    if xs.len() != 4 {
        return Err(Error::shape(
            "st-gcn block",
            format!("input must be [batch, nodes, time, channels], got {xs:?}"),
        ));
    }
    let (b, p, l, c_in) = (xs[0], xs[1], xs[2], xs[3]);
    if gs != [b, p, p] {
        return Err(Error::shape(
            "st-gcn block",
            format!("graphs {gs:?} do not match input {xs:?}"),
        ));
    }
    let ws = tape.shape(block.weight);
    let ks = tape.shape(block.kernel);
    if ws.len() != 2 || ws[0] != c_in {
        return Err(Error::shape(
            "st-gcn block",
            format!("weight {ws:?} does not accept {c_in} input channels"),
        ));
    }
    let c_out = ws[1];
    let k = ks[2];
    let masked = tape.mul(graphs, block.edge)?;
    let flat = tape.reshape(x, &[b, p, l * c_in])?;
    let mixed = tape.matmul(masked, flat)?;
    let rows = tape.reshape(mixed, &[b * p * l, c_in])?;
    let projected = tape.matmul(rows, block.weight)?;
    let sequences = tape.reshape(projected, &[b * p, l, c_out])?;
    let conv = tape.conv1d(sequences, block.kernel, (k - 1) / 2)?;
    let act = tape.relu(conv)?;
    tape.reshape(act, &[b, p, l, c_out])
}

/// The three extractor blocks in sequence.
pub fn extractor_forward(tape: &Tape, x: Var, graphs: Var, extractor: &[BlockVars]) -> Result<Var> {
    extractor
        .iter()
        .try_fold(x, |h, block| block_forward(tape, h, graphs, block))
}

/// Head block, mean pooling over nodes and time, then the dense layer.
/// Returns `[batch, out]`.
pub fn head_forward(tape: &Tape, features: Var, graphs: Var, head: &HeadVars) -> Result<Var> {
    let h = block_forward(tape, features, graphs, &head.block)?;
    let pooled = global_mean_pool(tape, h)?;
    let logits = tape.matmul(pooled, head.fc_weight)?;
    tape.add(logits, head.fc_bias)
}

/// `[batch, nodes, time, c]` → `[batch, c]`.
pub fn global_mean_pool(tape: &Tape, h: Var) -> Result<Var> {
    let s = tape.shape(h);
    if s.len() != 4 {
        return Err(Error::shape("pool", format!("expected rank 4, got {s:?}")));
    }
    let flat = tape.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
    tape.mean_axis(flat, 1)
}

/// Symmetrized row sums of the last extractor block's edge importance:
/// `v_i = Σ_j (|E_ij| + |E_ji|) / 2`.
pub fn node_importance(extractor: &[StGcnBlock]) -> Result<Vec<f64>> {
    let last = extractor
        .last()
        .ok_or_else(|| Error::invalid("extractor has no blocks"))?;
    Ok(edge_node_sums(&last.edge_importance))
}

pub(crate) fn edge_node_sums(e: &Tensor) -> Vec<f64> {
    let p = e.shape()[0];
    let d = e.data();
    (0..p)
        .map(|i| {
            (0..p)
                .map(|j| (d[i * p + j].abs() + d[j * p + i].abs()) / 2.0)
                .sum()
        })
        .collect()
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

const CHECKPOINT_FORMAT: &str = "metsk-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model snapshot (JSON, versioned).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub parameters: ModelParameters,
}

impl Checkpoint {
    pub fn new(parameters: ModelParameters, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            parameters,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, format!("invalid checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(
                path,
                format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    ckpt.format, ckpt.version
                ),
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_block(c: usize, p: usize, k: usize) -> StGcnBlock {
        let mut kernel = Tensor::zeros(&[c, c, k]);
        for ch in 0..c {
            kernel.data_mut()[(ch * c + ch) * k + (k - 1) / 2] = 1.0;
        }
        StGcnBlock {
            weight: Tensor::eye(c),
            temporal_kernel: kernel,
            edge_importance: Tensor::ones(&[p, p]),
        }
    }

    #[test]
    fn identity_block_is_relu() {
        let (p, l, c) = (3, 5, 2);
        let data: Vec<f64> = (0..p * l * c).map(|v| (v as f64 * 0.7).sin()).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, p, l, c], data.clone()).unwrap());
        let g = tape.constant(Tensor::eye(p).reshape(&[1, p, p]).unwrap());
        let vars = identity_block(c, p, 3).bind(&tape, false);
        let y = block_forward(&tape, x, g, &vars).unwrap();
        let want: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), &want[..]);
    }

    #[test]
    fn spatial_step_mixes_nodes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap());
        let vars = identity_block(1, 2, 1).bind(&tape, false);
        let y = block_forward(&tape, x, g, &vars).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = StGcnBlock::init(2, 4, 3, 3, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 6, 2]));
        let g = tape.constant(Tensor::ones(&[2, 3, 3]));
        let y = block_forward(&tape, x, g, &block.bind(&tape, false)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[2, 3, 6, 4]);
    }

    #[test]
    fn block_rejects_mismatched_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = StGcnBlock::init(1, 2, 3, 3, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 1]));
        let g = tape.constant(Tensor::ones(&[1, 4, 4]));
        assert!(block_forward(&tape, x, g, &block.bind(&tape, false)).is_err());
    }

    #[test]
    fn zero_features_give_bias_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = Head::init(4, 4, 2, 3, 3, &mut rng);
        head.fc_bias = Tensor::vector(vec![0.25, -1.5]);
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[2, 3, 5, 4]));
        let g = tape.constant(Tensor::ones(&[2, 3, 3]));
        let out = head_forward(&tape, f, g, &head.bind(&tape, false)).unwrap();
        assert_eq!(tape.value(out).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn pooling_constant_features() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 3, 4, 2], 1.75));
        let pooled = global_mean_pool(&tape, f).unwrap();
        assert_eq!(tape.value(pooled).data(), &[1.75, 1.75]);
    }

    #[test]
    fn node_importance_examples() {
        let block = |e: Tensor| StGcnBlock {
            weight: Tensor::eye(1),
            temporal_kernel: Tensor::ones(&[1, 1, 1]),
            edge_importance: e,
        };
        let v = node_importance(&[block(Tensor::ones(&[22, 22]))]).unwrap();
        assert!(v.iter().all(|&x| x == 22.0));
        let v = node_importance(&[block(Tensor::eye(4))]).unwrap();
        assert_eq!(v, vec![1.0; 4]);
        let e = Tensor::new(vec![2, 2], vec![0., 2., 4., 0.]).unwrap();
        assert_eq!(node_importance(&[block(e)]).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn default_extractor_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params =
            ModelParameters::init(&ModelConfig::default(), 22, SourceTask::Contrastive, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 22, 64, 1], 0.1));
        let g = tape.constant(Tensor::eye(22).reshape(&[1, 22, 22]).unwrap());
        let f = extractor_forward(&tape, x, g, &params.bind_extractor(&tape, false)).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 22, 64, 64]);
    }

    #[test]
    fn parameter_count_is_function_of_plan() {
        let cfg = ModelConfig {
            extractor_channels: [2, 3, 4],
            head_channels: 5,
            embedding_dim: 6,
            temporal_kernel: 3,
            input_channels: 1,
        };
        let p = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParameters::init(&cfg, p, SourceTask::Contrastive, &mut rng).unwrap();
        let block = |ci: usize, co: usize| ci * co + co * co * 3 + p * p;
        let expected = block(1, 2)
            + block(2, 3)
            + block(3, 4)
            + (block(4, 5) + 5 * 2 + 2)
            + (block(4, 5) + 5 * 6 + 6);
        assert_eq!(params.parameter_count(), expected);
    }

    #[test]
    fn even_temporal_kernel_rejected() {
        let cfg = ModelConfig {
            temporal_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig {
            extractor_channels: [2, 2, 3],
            head_channels: 3,
            embedding_dim: 4,
            temporal_kernel: 3,
            input_channels: 1,
        };
        let params = ModelParameters::init(&cfg, 5, SourceTask::Supervised, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(params.clone(), 9).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.parameters, params);
        assert_eq!(loaded.seed, 9);
        for part in [Partition::Extractor, Partition::TargetHead, Partition::SourceHead] {
            assert_eq!(loaded.parameters.digest(part), params.digest(part));
        }
    }
}
