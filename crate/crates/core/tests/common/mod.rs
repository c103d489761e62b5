//! Oracles and check suites shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use metsk::autodiff::{grad_check, Tape, Tensor, Var};
use metsk::data::TimeSeriesDataset;
use metsk::graph::NodalProperties;
use metsk::model::{
    block_forward, extractor_forward, head_forward, BlockVars, HeadVars, ModelConfig, ModelParameters, SourceTask,
};
use metsk::losses::{contrastive_loss, cross_entropy_loss};
use metsk::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ y ⊙ r`: turns a tensor-valued output into a scalar whose gradient
/// exercises every output coordinate with a different weight.
fn probe(tape: &Tape, y: Var, r: &Tensor) -> Result<Var> {
    let w = tape.constant(r.clone());
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

type Primitive = Box<dyn Fn(&Tape, Var) -> Result<Var>>;

/// Named single-leaf functions covering every primitive and, for binary
/// primitives, both operand positions. Point shapes come with each case.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<usize>, f64, Primitive)> {
    let mut cases: Vec<(String, Vec<usize>, f64, Primitive)> = Vec::new();
    let mut push = |name: &str, shape: &[usize], offset: f64, f: Primitive| {
        cases.push((name.to_string(), shape.to_vec(), offset, f));
    };
    let other = uniform(&[3, 4], -1.0, 1.0, rng);
    let r34 = uniform(&[3, 4], -1.0, 1.0, rng);
    for (name, first) in [("add/lhs", true), ("add/rhs", false)] {
        let (o, r) = (other.clone(), r34.clone());
        push(name, &[3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(o.clone());
            let y = if first { t.add(x, c)? } else { t.add(c, x)? };
            probe(t, y, &r)
        }));
    }
    let bias_r = r34.clone();
    let bias_m = other.clone();
    push("add/broadcast-bias", &[4], 0.0, Box::new(move |t, x| {
        let m = t.constant(bias_m.clone());
        let y = t.add(m, x)?;
        probe(t, y, &bias_r)
    }));
    for (name, first) in [("mul/lhs", true), ("mul/rhs", false)] {
        let (o, r) = (other.clone(), r34.clone());
        push(name, &[3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(o.clone());
            let y = if first { t.mul(x, c)? } else { t.mul(c, x)? };
            probe(t, y, &r)
        }));
    }
    for (name, first) in [("sub/lhs", true), ("sub/rhs", false)] {
        let (o, r) = (other.clone(), r34.clone());
        push(name, &[3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(o.clone());
            let y = if first { t.sub(x, c)? } else { t.sub(c, x)? };
            probe(t, y, &r)
        }));
    }
    let r = r34.clone();
    push("scale", &[3, 4], 0.0, Box::new(move |t, x| {
        let y = t.scale(x, -2.5)?;
        probe(t, y, &r)
    }));
    let r = r34.clone();
    push("relu", &[3, 4], 0.0, Box::new(move |t, x| {
        let y = t.relu(x)?;
        probe(t, y, &r)
    }));
    let r = r34.clone();
    push("exp", &[3, 4], 0.0, Box::new(move |t, x| {
        let y = t.exp(x)?;
        probe(t, y, &r)
    }));
    // Points for log are shifted to [0.5, 2.5) so the logarithm is defined.
    let r = r34.clone();
    push("log", &[3, 4], 1.5, Box::new(move |t, x| {
        let y = t.log(x)?;
        probe(t, y, &r)
    }));
    push("sum", &[3, 4], 0.0, Box::new(|t, x| t.sum(x)));
    push("mean", &[3, 4], 0.0, Box::new(|t, x| t.mean(x)));
    for axis in 0..3 {
        let mut out = vec![2, 3, 4];
        out.remove(axis);
        let rs = uniform(&out, -1.0, 1.0, rng);
        let rm = rs.clone();
        push(&format!("sum_axis/{axis}"), &[2, 3, 4], 0.0, Box::new(move |t, x| {
            let y = t.sum_axis(x, axis)?;
            probe(t, y, &rs)
        }));
        push(&format!("mean_axis/{axis}"), &[2, 3, 4], 0.0, Box::new(move |t, x| {
            let y = t.mean_axis(x, axis)?;
            probe(t, y, &rm)
        }));
    }
    let r = r34.clone();
    push("softmax", &[3, 4], 0.0, Box::new(move |t, x| {
        let y = t.softmax(x)?;
        probe(t, y, &r)
    }));
    let r = uniform(&[2, 6], -1.0, 1.0, rng);
    push("reshape", &[3, 4], 0.0, Box::new(move |t, x| {
        let y = t.reshape(x, &[2, 6])?;
        probe(t, y, &r)
    }));
    let b = uniform(&[4, 2], -1.0, 1.0, rng);
    let a = uniform(&[3, 4], -1.0, 1.0, rng);
    let r32 = uniform(&[3, 2], -1.0, 1.0, rng);
    {
        let (b, r) = (b.clone(), r32.clone());
        push("matmul/lhs", &[3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(b.clone());
            let y = t.matmul(x, c)?;
            probe(t, y, &r)
        }));
        let (a, r) = (a.clone(), r32.clone());
        push("matmul/rhs", &[4, 2], 0.0, Box::new(move |t, x| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, x)?;
            probe(t, y, &r)
        }));
    }
    let bb = uniform(&[2, 4, 3], -1.0, 1.0, rng);
    let ba = uniform(&[2, 3, 4], -1.0, 1.0, rng);
    let rb = uniform(&[2, 3, 3], -1.0, 1.0, rng);
    {
        let (b, r) = (bb.clone(), rb.clone());
        push("matmul/batched-lhs", &[2, 3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(b.clone());
            let y = t.matmul(x, c)?;
            probe(t, y, &r)
        }));
        let (a, r) = (ba.clone(), rb.clone());
        push("matmul/batched-rhs", &[2, 4, 3], 0.0, Box::new(move |t, x| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, x)?;
            probe(t, y, &r)
        }));
    }
    for pad in [0usize, 1] {
        let kernel = uniform(&[3, 2, 3], -1.0, 1.0, rng);
        let input = uniform(&[2, 5, 2], -1.0, 1.0, rng);
        let out_len = 5 + 2 * pad - 3 + 1;
        let r = uniform(&[2, out_len, 3], -1.0, 1.0, rng);
        let rk = r.clone();
        push(&format!("conv1d/input-pad{pad}"), &[2, 5, 2], 0.0, Box::new(move |t, x| {
            let k = t.constant(kernel.clone());
            let y = t.conv1d(x, k, pad)?;
            probe(t, y, &r)
        }));
        push(&format!("conv1d/kernel-pad{pad}"), &[3, 2, 3], 0.0, Box::new(move |t, x| {
            let i = t.constant(input.clone());
            let y = t.conv1d(i, x, pad)?;
            probe(t, y, &rk)
        }));
    }
    let v = uniform(&[3, 4], -1.0, 1.0, rng);
    let r33 = uniform(&[3, 3], -1.0, 1.0, rng);
    for (name, first) in [("cosine/lhs", true), ("cosine/rhs", false)] {
        let (o, r) = (v.clone(), r33.clone());
        push(name, &[3, 4], 0.0, Box::new(move |t, x| {
            let c = t.constant(o.clone());
            let y = if first { t.cosine_similarity(x, c)? } else { t.cosine_similarity(c, x)? };
            probe(t, y, &r)
        }));
    }
    cases
}

/// Worst relative gradient error per primitive case over `points` random
/// points in `[-1, 1]` (shifted where a case needs a positive domain).
pub fn primitive_gradient_errors(seed: u64, points: usize) -> Vec<(String, f64)> {
    let mut setup = rng(seed);
    let cases = primitive_cases(&mut setup);
    cases
        .into_iter()
        .map(|(name, shape, offset, f)| {
            let mut worst: f64 = 0.0;
            for p in 0..points {
                let mut r = rng(seed ^ ((p as u64 + 1) * 0x9e37_79b9));
                let point = uniform(&shape, -1.0 + offset, 1.0 + offset, &mut r);
                let err = grad_check(&f, &point, GRAD_STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
                worst = worst.max(err);
            }
            (name, worst)
        })
        .collect()
}

/// Tiny channel plan used for the composed-model gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        extractor_channels: [2, 3, 2],
        head_channels: 2,
        embedding_dim: 3,
        temporal_kernel: 3,
    }
}

/// Every parameter tensor in the order extractor blocks, target head,
/// source head.
fn flatten(params: &ModelParameters) -> Vec<Tensor> {
    let mut out = Vec::new();
    for b in &params.extractor {
        out.extend(b.tensors().into_iter().cloned());
    }
    out.extend(params.target_head.tensors().into_iter().cloned());
    out.extend(params.source_head.tensors().into_iter().cloned());
    out
}

fn param_names(params: &ModelParameters) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..params.extractor.len() {
        for t in ["weight", "temporal_kernel", "edge_importance"] {
            names.push(format!("extractor[{i}].{t}"));
        }
    }
    for head in ["target_head", "source_head"] {
        for t in ["block.weight", "block.temporal_kernel", "block.edge_importance", "fc_weight", "fc_bias"] {
            names.push(format!("{head}.{t}"));
        }
    }
    names
}

/// Binds every parameter as a constant except slot `index`, which is `x`.
fn bind_with(tape: &Tape, tensors: &[Tensor], index: usize, x: Var) -> (Vec<BlockVars>, HeadVars, HeadVars) {
    let mut vars: Vec<Var> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| if i == index { x } else { tape.constant(t.clone()) })
        .collect();
    let mut take = || vars.remove(0);
    let mut blocks = Vec::new();
    for _ in 0..3 {
        blocks.push(BlockVars { weight: take(), kernel: take(), edge: take() });
    }
    let mut head = || HeadVars {
        block: BlockVars { weight: take(), kernel: take(), edge: take() },
        fc_weight: take(),
        fc_bias: take(),
    };
    let target = head();
    let source = head();
    (blocks, target, source)
}

/// Composed-model inputs at `P = 3, L = 4` for one seed.
pub struct ComposedPoint {
    pub params: ModelParameters,
    pub x1: Tensor,
    pub x2: Tensor,
    pub graphs: Tensor,
    pub labels: Vec<usize>,
}

pub fn composed_point(seed: u64) -> ComposedPoint {
    let mut r = rng(seed);
    let (b, p, l) = (3, 3, 4);
    let mut params = ModelParameters::init(&tiny_model_config(), p, SourceTask::Contrastive, &mut r).unwrap();
    for t in params.target_head.tensors_mut().into_iter().chain(params.source_head.tensors_mut()) {
        *t = uniform(t.shape(), -1.0, 1.0, &mut r);
    }
    for block in &mut params.extractor {
        for t in block.tensors_mut() {
            *t = uniform(t.shape(), -1.0, 1.0, &mut r);
        }
    }
    let mut graphs = Vec::with_capacity(b * p * p);
    for _ in 0..b {
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in i + 1..p {
                let w = r.random_range(0.0..1.0);
                a[i * p + j] = w;
                a[j * p + i] = w;
            }
        }
        graphs.extend(metsk::graph::normalize_adjacency(&a, p).unwrap());
    }
    ComposedPoint {
        params,
        x1: uniform(&[b, p, l, 1], -1.0, 1.0, &mut r),
        x2: uniform(&[b, p, l, 1], -1.0, 1.0, &mut r),
        graphs: Tensor::new(vec![b, p, p], graphs).unwrap(),
        labels: vec![0, 1, 1],
    }
}

/// `L_S + λ·L_T` of the composed model with parameter slot `index` bound to
/// `x`: contrastive source loss on two views plus target cross-entropy.
fn composed_loss(tape: &Tape, point: &ComposedPoint, tensors: &[Tensor], index: usize, x: Var) -> Result<Var> {
    let (blocks, target, source) = bind_with(tape, tensors, index, x);
    let graphs = tape.constant(point.graphs.clone());
    let x1 = tape.constant(point.x1.clone());
    let x2 = tape.constant(point.x2.clone());
    let h1 = extractor_forward(tape, x1, graphs, &blocks)?;
    let h2 = extractor_forward(tape, x2, graphs, &blocks)?;
    let logits = head_forward(tape, h1, graphs, &target)?;
    let lt = cross_entropy_loss(tape, logits, &point.labels)?;
    let z1 = head_forward(tape, h1, graphs, &source)?;
    let z2 = head_forward(tape, h2, graphs, &source)?;
    let ls = contrastive_loss(tape, z1, z2, 0.5)?;
    let weighted = tape.scale(lt, 1.5)?;
    tape.add(ls, weighted)
}

/// Worst relative gradient error per parameter tensor of the composed
/// extractor + heads + losses at one random point.
pub fn composed_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let point = composed_point(seed);
    let tensors = flatten(&point.params);
    let names = param_names(&point.params);
    (0..tensors.len())
        .map(|i| {
            let f = |tape: &Tape, x: Var| composed_loss(tape, &point, &tensors, i, x);
            let err = grad_check(f, &tensors[i], GRAD_STEP).unwrap_or_else(|e| panic!("{}: {e}", names[i]));
            (names[i].clone(), err)
        })
        .collect()
}

/// Worst relative error of the gradient with respect to a single block's
/// input, for coverage of the activation path between blocks.
pub fn block_input_gradient_error(seed: u64) -> f64 {
    let point = composed_point(seed);
    let block = point.params.extractor[1].clone();
    let mut r = rng(seed + 99);
    let input = uniform(&[3, 3, 4, 2], -1.0, 1.0, &mut r);
    let weights = uniform(&[3, 3, 4, 3], -1.0, 1.0, &mut r);
    let f = |tape: &Tape, x: Var| {
        let bv = block.bind(tape, false);
        let g = tape.constant(point.graphs.clone());
        let y = block_forward(tape, x, g, &bv)?;
        probe(tape, y, &weights)
    };
    grad_check(f, &input, GRAD_STEP).unwrap()
}

/// Exhaustive nodal-property oracle for small graphs: shortest paths by
/// enumerating every simple path, clustering by a triple loop.
pub fn nodal_oracle(a: &[f64], p: usize) -> NodalProperties {
    let strength: Vec<f64> = (0..p).map(|i| (0..p).map(|j| a[i * p + j]).sum()).collect();

    let max = a.iter().cloned().fold(0.0, f64::max);
    let clustering = (0..p)
        .map(|i| {
            let k = (0..p).filter(|&j| a[i * p + j] > 0.0).count();
            if k < 2 || max == 0.0 {
                return 0.0;
            }
            let mut total = 0.0;
            for j in 0..p {
                for h in 0..p {
                    if j == i || h == i || j == h {
                        continue;
                    }
                    let prod = (a[i * p + j] / max) * (a[i * p + h] / max) * (a[j * p + h] / max);
                    total += prod.cbrt();
                }
            }
            total / (k * (k - 1)) as f64
        })
        .collect();

    // All simple paths from s, with their lengths accumulated from s outward.
    fn walk(a: &[f64], p: usize, path: &mut Vec<usize>, len: f64, out: &mut Vec<(Vec<usize>, f64)>) {
        let last = *path.last().unwrap();
        out.push((path.clone(), len));
        for next in 0..p {
            if a[last * p + next] > 0.0 && !path.contains(&next) {
                path.push(next);
                walk(a, p, path, len + 1.0 / a[last * p + next], out);
                path.pop();
            }
        }
    }
    let mut dist = vec![f64::INFINITY; p * p];
    let mut betweenness = vec![0.0; p];
    for s in 0..p {
        let mut paths = Vec::new();
        walk(a, p, &mut vec![s], 0.0, &mut paths);
        for t in 0..p {
            if t == s {
                dist[s * p + t] = 0.0;
                continue;
            }
            let ending: Vec<&(Vec<usize>, f64)> = paths.iter().filter(|(path, _)| *path.last().unwrap() == t).collect();
            let best = ending.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
            dist[s * p + t] = best;
            if s < t && best.is_finite() {
                let shortest: Vec<&Vec<usize>> = ending
                    .iter()
                    .filter(|(_, l)| (*l - best).abs() <= 1e-12 * best)
                    .map(|(path, _)| path)
                    .collect();
                let n = shortest.len() as f64;
                for path in &shortest {
                    for &v in &path[1..path.len() - 1] {
                        betweenness[v] += 1.0 / n;
                    }
                }
            }
        }
    }
    let efficiency = (0..p)
        .map(|i| {
            if p < 2 {
                return 0.0;
            }
            let total: f64 = (0..p)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = dist[i * p + j];
                    if d.is_finite() {
                        1.0 / d
                    } else {
                        0.0
                    }
                })
                .sum();
            total / (p - 1) as f64
        })
        .collect();
    NodalProperties {
        strength,
        clustering,
        betweenness,
        efficiency,
    }
}

/// Random connected weighted graph on `p` nodes. Even seeds draw weights
/// from `{1/4, 1/2, 1}` (exact reciprocals, so shortest-path ties occur);
/// odd seeds draw continuous weights.
pub fn random_connected_graph(p: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let discrete = seed.is_multiple_of(2);
    let weight = |r: &mut ChaCha8Rng| {
        if discrete {
            [0.25, 0.5, 1.0][r.random_range(0..3)]
        } else {
            r.random_range(0.05..1.0)
        }
    };
    let mut a = vec![0.0; p * p];
    // Random spanning tree, then extra edges.
    for v in 1..p {
        let u = r.random_range(0..v);
        let w = weight(&mut r);
        a[u * p + v] = w;
        a[v * p + u] = w;
    }
    let density = r.random_range(0.0..0.8);
    for i in 0..p {
        for j in i + 1..p {
            if a[i * p + j] == 0.0 && r.random_bool(density) {
                let w = weight(&mut r);
                a[i * p + j] = w;
                a[j * p + i] = w;
            }
        }
    }
    a
}

/// Largest absolute difference between two sets of nodal properties.
pub fn nodal_difference(x: &NodalProperties, y: &NodalProperties) -> f64 {
    x.columns()
        .iter()
        .zip(y.columns())
        .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Upper-triangle connectivity features of every subject.
pub fn upper_triangle_features(ds: &TimeSeriesDataset) -> Vec<Vec<f64>> {
    let p = ds.num_nodes;
    ds.subjects
        .iter()
        .map(|s| {
            let a = s.graph.adjacency();
            (0..p).flat_map(|i| (i + 1..p).map(move |j| a[i * p + j])).collect()
        })
        .collect()
}

/// L2-regularized logistic regression by full-batch gradient descent.
/// Returns weights with the intercept last.
pub fn logistic_regression(x: &[Vec<f64>], y: &[usize], l2: f64, iterations: usize) -> Vec<f64> {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; d + 1];
    for _ in 0..iterations {
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            for k in 0..d {
                g[k] += e * xi[k];
            }
            g[d] += e;
        }
        for k in 0..d {
            w[k] -= 0.5 * (g[k] / n + l2 * w[k]);
        }
        w[d] -= 0.5 * g[d] / n;
    }
    w
}

/// Columns standardized to zero mean and unit variance.
pub fn standardize(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut out = x.to_vec();
    for k in 0..d {
        let m = x.iter().map(|r| r[k]).sum::<f64>() / n;
        let s = (x.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for r in out.iter_mut() {
            r[k] = (r[k] - m) / s;
        }
    }
    out
}

/// Outcome of the contrastive closed-form and bound checks.
pub struct ContrastiveChecks {
    pub orthonormal: f64,
    /// `(N, loss, log(N-1))`
    pub identical: Vec<(usize, f64, f64)>,
    pub bound_violations: usize,
    pub batches: usize,
}

pub fn contrastive_checks(batches: usize, seed: u64) -> ContrastiveChecks {
    use metsk::losses::{graph_contrastive_loss, ContrastiveBatch};
    let orthonormal = graph_contrastive_loss(&ContrastiveBatch {
        view1: Tensor::eye(2),
        view2: Tensor::eye(2),
        temperature: 1.0,
    })
    .unwrap();
    let identical = [2usize, 4, 8]
        .iter()
        .map(|&n| {
            let same = Tensor::new(vec![n, 3], [0.3, -1.2, 0.7].repeat(n)).unwrap();
            let loss = graph_contrastive_loss(&ContrastiveBatch {
                view1: same.clone(),
                view2: same,
                temperature: 1.0,
            })
            .unwrap();
            (n, loss, ((n - 1) as f64).ln())
        })
        .collect();
    let mut r = rng(seed);
    let mut bound_violations = 0;
    for _ in 0..batches {
        let n = r.random_range(2..17);
        let d = r.random_range(1..9);
        let tau = [0.05, 0.5, 1.0, 30.0][r.random_range(0..4)];
        let batch = ContrastiveBatch {
            view1: uniform(&[n, d], -1.0, 1.0, &mut r),
            view2: uniform(&[n, d], -1.0, 1.0, &mut r),
            temperature: tau,
        };
        let loss = graph_contrastive_loss(&batch).unwrap();
        let spread = ((n - 1) as f64).ln();
        if !(loss >= -2.0 / tau + spread - 1e-12 && loss <= 2.0 / tau + spread + 1e-12) {
            bound_violations += 1;
        }
    }
    ContrastiveChecks {
        orthonormal,
        identical,
        bound_violations,
        batches,
    }
}

/// Small synthetic source/target pair for fast training tests.
pub fn tiny_data(seed: u64) -> (TimeSeriesDataset, TimeSeriesDataset) {
    let cfg = metsk::data::GeneratorConfig {
        num_source: 24,
        num_target: 24,
        num_nodes: 6,
        num_timepoints: 40,
        communities: 2,
        target_positive_fraction: 0.5,
        ..Default::default()
    };
    metsk::data::generate_synthetic(&cfg, seed).unwrap()
}

pub fn tiny_train_config() -> metsk::training::TrainConfig {
    metsk::training::TrainConfig {
        inner_steps: 3,
        outer_iterations: 4,
        warmup_iterations: 3,
        batch_size: 4,
        subsequence_length: 8,
        eval_windows: 2,
        ..Default::default()
    }
}

/// Violations of the bi-level structural invariants seen by the observer of
/// one MeTSK run.
#[derive(Debug, Default)]
pub struct BilevelReport {
    pub iterations: usize,
    /// φ or θ_s changed during an inner loop.
    pub inner_freeze_violations: usize,
    /// θ_t changed during an outer step.
    pub outer_freeze_violations: usize,
    /// φ or θ_s did not change during an outer step.
    pub stalled_outer_steps: usize,
    /// Meta splits that overlap or do not cover the fold.
    pub split_violations: usize,
}

pub fn bilevel_invariants(
    strategy: metsk::training::Strategy,
    config: &metsk::training::TrainConfig,
    model: &ModelConfig,
    source: &TimeSeriesDataset,
    target: &TimeSeriesDataset,
    fold: &metsk::data::Fold,
    seed: u64,
) -> BilevelReport {
    use std::collections::BTreeSet;
    let mut report = BilevelReport::default();
    let mut observer = |e: &metsk::training::MetaEvent<'_>| {
        report.iterations += 1;
        if e.after_inner.extractor != e.before_inner.extractor || e.after_inner.source_head != e.before_inner.source_head {
            report.inner_freeze_violations += 1;
        }
        if e.after_outer.target_head != e.after_inner.target_head {
            report.outer_freeze_violations += 1;
        }
        if e.after_outer.extractor == e.after_inner.extractor {
            report.stalled_outer_steps += 1;
        }
        let tr: BTreeSet<usize> = e.meta_train.iter().copied().collect();
        let val: BTreeSet<usize> = e.meta_val.iter().copied().collect();
        let fold: BTreeSet<usize> = e.fold_train.iter().copied().collect();
        let union: BTreeSet<usize> = tr.union(&val).copied().collect();
        if !tr.is_disjoint(&val) || union != fold || tr.len() + val.len() != e.fold_train.len() {
            report.split_violations += 1;
        }
    };
    metsk::training::run_strategy_observed(strategy, config, model, Some(source), target, fold, seed, 0, Some(&mut observer))
        .unwrap();
    report
}

/// Two-sided permutation test of "cross-class connectivity distance equals
/// within-class distance". Returns `(statistic, p-value)`.
pub fn class_distance_permutation_test(ds: &TimeSeriesDataset, permutations: usize, seed: u64) -> (f64, f64) {
    use rand::seq::SliceRandom;
    let x = upper_triangle_features(ds);
    let n = x.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let statistic = |labels: &[usize]| {
        let (mut cross, mut nc, mut within, mut nw) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    within += dist[i * n + j];
                    nw += 1;
                } else {
                    cross += dist[i * n + j];
                    nc += 1;
                }
            }
        }
        cross / nc as f64 - within / nw as f64
    };
    let mut labels = ds.labels().unwrap();
    let observed = statistic(&labels);
    let mut r = rng(seed);
    let mut extreme = 0;
    for _ in 0..permutations {
        labels.shuffle(&mut r);
        if statistic(&labels).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    (observed, (1 + extreme) as f64 / (1 + permutations) as f64)
}

/// Mean held-out AUC over 5 stratified folds of a logistic regression on
/// standardized upper-triangle connectivity.
pub fn logistic_connectivity_auc(ds: &TimeSeriesDataset, seed: u64) -> f64 {
    let x = standardize(&upper_triangle_features(ds));
    let y = ds.labels().unwrap();
    let folds = metsk::data::kfold_split(&y, 5, seed).unwrap();
    let d = x[0].len();
    let aucs: Vec<f64> = folds
        .iter()
        .map(|f| {
            let xt: Vec<Vec<f64>> = f.train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<usize> = f.train.iter().map(|&i| y[i]).collect();
            let w = logistic_regression(&xt, &yt, 0.05, 2000);
            let scores: Vec<f64> = f
                .test
                .iter()
                .map(|&i| w[d] + x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let yy: Vec<usize> = f.test.iter().map(|&i| y[i]).collect();
            metsk::eval::auc(&scores, &yy).unwrap()
        })
        .collect();
    aucs.iter().sum::<f64>() / aucs.len() as f64
}
