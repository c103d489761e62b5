//! Functional-connectivity graphs and weighted nodal statistics.
//!
//! Edge weights are absolute Pearson correlations between node time series.
//! Nodal statistics follow the Brain Connectivity Toolbox conventions for
//! undirected weighted graphs: Onnela clustering on max-normalized weights,
//! Brandes betweenness on lengths `1/w` with fractional credit for tied
//! shortest paths (each unordered pair counted once), and nodal efficiency as
//! the mean inverse shortest-path length to every other node.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Relative tolerance when comparing path lengths for ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Weighted undirected graph over `num_nodes` parcels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    num_nodes: usize,
    /// Row-major `P×P` symmetric weights in `[0, 1]`, zero diagonal.
    adjacency: Vec<f64>,
    /// Row-major `D^{-1/2}(A+I)D^{-1/2}`.
    normalized: Vec<f64>,
}

impl ConnectivityGraph {
    pub fn from_adjacency(num_nodes: usize, adjacency: Vec<f64>) -> Result<Self> {
        if adjacency.len() != num_nodes * num_nodes {
            return Err(Error::shape(
                "adjacency",
                format!("{} values for {num_nodes} nodes", adjacency.len()),
            ));
        }
        if (0..num_nodes).any(|i| adjacency[i * num_nodes + i] != 0.0) {
            return Err(Error::invalid("adjacency must have a zero diagonal"));
        }
        let normalized = normalize_adjacency(&adjacency, num_nodes)?;
        Ok(Self {
            num_nodes,
            adjacency,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn normalized_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_nodes, self.num_nodes], self.normalized.clone())
            .expect("square normalized adjacency")
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.num_nodes + j]
    }
}

/// Absolute Pearson correlation between every pair of rows of a `P×T` series.
pub fn pearson_connectivity(series: &[f64], num_nodes: usize, num_timepoints: usize) -> Result<ConnectivityGraph> {
    if series.len() != num_nodes * num_timepoints {
        return Err(Error::shape(
            "pearson_connectivity",
            format!("{} values for {num_nodes}x{num_timepoints}", series.len()),
        ));
    }
    if num_timepoints < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 timepoints, got {num_timepoints}"
        )));
    }
    let t = num_timepoints as f64;
    let mut centered = vec![0.0; series.len()];
    let mut norms = vec![0.0; num_nodes];
    for i in 0..num_nodes {
        let row = &series[i * num_timepoints..(i + 1) * num_timepoints];
        let mean = row.iter().sum::<f64>() / t;
        let dst = &mut centered[i * num_timepoints..(i + 1) * num_timepoints];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - mean;
        }
        let ss: f64 = dst.iter().map(|v| v * v).sum();
        // Relative threshold: a constant row leaves only rounding residue.
        let scale: f64 = row.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if ss <= scale * 1e-24 {
            return Err(Error::ZeroVariance { index: i });
        }
        norms[i] = ss.sqrt();
    }
    let mut adjacency = vec![0.0; num_nodes * num_nodes];
    for i in 0..num_nodes {
        let ri = &centered[i * num_timepoints..(i + 1) * num_timepoints];
        for j in i + 1..num_nodes {
            let rj = &centered[j * num_timepoints..(j + 1) * num_timepoints];
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).abs().min(1.0);
            adjacency[i * num_nodes + j] = r;
            adjacency[j * num_nodes + i] = r;
        }
    }
    ConnectivityGraph::from_adjacency(num_nodes, adjacency)
}

/// Renormalized adjacency `Â_ij = (A+I)_ij / sqrt(D_ii D_jj)` with
/// `D_ii = Σ_j A_ij + 1`.
pub fn normalize_adjacency(adjacency: &[f64], num_nodes: usize) -> Result<Vec<f64>> {
    check_symmetric_nonnegative(adjacency, num_nodes)?;
    let p = num_nodes;
    let inv_sqrt_degree: Vec<f64> = (0..p)
        .map(|i| {
            let d: f64 = adjacency[i * p..(i + 1) * p].iter().sum::<f64>() + 1.0;
            1.0 / d.sqrt()
        })
        .collect();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let a = adjacency[i * p + j] + if i == j { 1.0 } else { 0.0 };
            out[i * p + j] = a * inv_sqrt_degree[i] * inv_sqrt_degree[j];
        }
    }
    Ok(out)
}

fn check_symmetric_nonnegative(adjacency: &[f64], p: usize) -> Result<()> {
    if adjacency.len() != p * p {
        return Err(Error::shape(
            "adjacency",
            format!("{} values for {p} nodes", adjacency.len()),
        ));
    }
    for i in 0..p {
        for j in 0..p {
            let a = adjacency[i * p + j];
            if !a.is_finite() || a < 0.0 {
                return Err(Error::invalid(format!(
                    "adjacency entry ({i}, {j}) = {a} is not a nonnegative weight"
                )));
            }
            let b = adjacency[j * p + i];
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::invalid(format!(
                    "adjacency is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

/// The four per-node statistics correlated against learned node importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalProperties {
    pub strength: Vec<f64>,
    pub clustering: Vec<f64>,
    pub betweenness: Vec<f64>,
    pub efficiency: Vec<f64>,
}

impl NodalProperties {
    pub const NAMES: [&'static str; 4] = ["betweenness", "clustering", "strength", "efficiency"];

    /// Properties in the order of [`NodalProperties::NAMES`].
    pub fn columns(&self) -> [&[f64]; 4] {
        [
            &self.betweenness,
            &self.clustering,
            &self.strength,
            &self.efficiency,
        ]
    }
}

pub fn nodal_properties(adjacency: &[f64], num_nodes: usize) -> Result<NodalProperties> {
    check_symmetric_nonnegative(adjacency, num_nodes)?;
    if (0..num_nodes).any(|i| adjacency[i * num_nodes + i] != 0.0) {
        return Err(Error::invalid("adjacency must have a zero diagonal"));
    }
    let p = num_nodes;
    let strength = (0..p)
        .map(|i| adjacency[i * p..(i + 1) * p].iter().sum())
        .collect();
    let clustering = weighted_clustering(adjacency, p);
    let (betweenness, distances) = brandes(adjacency, p);
    let efficiency = (0..p)
        .map(|i| {
            if p < 2 {
                return 0.0;
            }
            let total: f64 = (0..p)
                .filter(|&j| j != i && distances[i * p + j].is_finite())
                .map(|j| 1.0 / distances[i * p + j])
                .sum();
            total / (p - 1) as f64
        })
        .collect();
    Ok(NodalProperties {
        strength,
        clustering,
        betweenness,
        efficiency,
    })
}

/// Onnela et al. clustering: geometric mean of triangle weights after scaling
/// by the maximum weight, over `k(k-1)` ordered neighbor pairs.
fn weighted_clustering(adjacency: &[f64], p: usize) -> Vec<f64> {
    let max = adjacency.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![0.0; p];
    }
    let cube: Vec<f64> = adjacency.iter().map(|w| (w / max).cbrt()).collect();
    (0..p)
        .map(|i| {
            let degree = (0..p).filter(|&j| adjacency[i * p + j] > 0.0).count();
            if degree < 2 {
                return 0.0;
            }
            let mut cycles = 0.0;
            for j in 0..p {
                let wij = cube[i * p + j];
                if wij == 0.0 {
                    continue;
                }
                for h in 0..p {
                    cycles += wij * cube[j * p + h] * cube[h * p + i];
                }
            }
            cycles / (degree * (degree - 1)) as f64
        })
        .collect()
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn same_length(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Brandes betweenness with Dijkstra on lengths `1/w`; also returns the
/// all-pairs distance matrix (`inf` for unreachable pairs).
fn brandes(adjacency: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let neighbors: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|i| {
            (0..p)
                .filter(|&j| adjacency[i * p + j] > 0.0)
                .map(|j| (j, 1.0 / adjacency[i * p + j]))
                .collect()
        })
        .collect();
    let mut betweenness = vec![0.0; p];
    let mut all_dist = vec![f64::INFINITY; p * p];

    for s in 0..p {
        let mut dist = vec![f64::INFINITY; p];
        let mut sigma = vec![0.0; p];
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); p];
        let mut settled = vec![false; p];
        let mut order = Vec::with_capacity(p);
        let mut heap = BinaryHeap::new();
        dist[s] = 0.0;
        sigma[s] = 1.0;
        heap.push(Frontier { dist: 0.0, node: s });
        while let Some(Frontier { dist: d, node: v }) = heap.pop() {
            if settled[v] || d > dist[v] {
                continue;
            }
            settled[v] = true;
            order.push(v);
            for &(w, len) in &neighbors[v] {
                if settled[w] {
                    continue;
                }
                let candidate = dist[v] + len;
                if dist[w].is_finite() && same_length(candidate, dist[w]) {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                } else if candidate < dist[w] {
                    dist[w] = candidate;
                    sigma[w] = sigma[v];
                    preds[w].clear();
                    preds[w].push(v);
                    heap.push(Frontier {
                        dist: candidate,
                        node: w,
                    });
                }
            }
        }
        let mut delta = vec![0.0; p];
        while let Some(w) = order.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                betweenness[w] += delta[w];
            }
        }
        all_dist[s * p..(s + 1) * p].copy_from_slice(&dist);
    }
    // Each unordered pair was visited from both endpoints.
    betweenness.iter_mut().for_each(|b| *b /= 2.0);
    (betweenness, all_dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn zero_adjacency_normalizes_to_identity() {
        let a = vec![0.0; 9];
        let n = normalize_adjacency(&a, 3).unwrap();
        assert_eq!(n, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn unit_pair_normalizes_to_halves() {
        let n = normalize_adjacency(&[0., 1., 1., 0.], 2).unwrap();
        assert!(approx(&n, &[0.5, 0.5, 0.5, 0.5]));
    }

    #[test]
    fn half_weight_pair_normalizes_to_thirds() {
        let n = normalize_adjacency(&[0., 0.5, 0.5, 0.], 2).unwrap();
        assert!(approx(&n, &[2. / 3., 1. / 3., 1. / 3., 2. / 3.]));
    }

    #[test]
    fn normalization_rejects_bad_input() {
        assert!(normalize_adjacency(&[0., 1., 0.5, 0.], 2).is_err());
        assert!(normalize_adjacency(&[0., -1., -1., 0.], 2).is_err());
    }

    #[test]
    fn affine_rows_are_fully_connected() {
        let x: Vec<f64> = (0..10).map(|v| (v as f64).sin()).collect();
        let mut series = x.clone();
        series.extend(x.iter().map(|v| 2.0 * v));
        let g = pearson_connectivity(&series, 2, 10).unwrap();
        assert!(approx(g.adjacency(), &[0., 1., 1., 0.]));

        let mut neg = x.clone();
        neg.extend(x.iter().map(|v| -v));
        let g = pearson_connectivity(&neg, 2, 10).unwrap();
        assert!(approx(g.adjacency(), &[0., 1., 1., 0.]));
    }

    #[test]
    fn zero_variance_row_is_named() {
        let series = vec![1., 2., 3., 5., 5., 5., 0., 1., 0.];
        match pearson_connectivity(&series, 3, 3) {
            Err(Error::ZeroVariance { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_timepoints() {
        assert!(pearson_connectivity(&[1., 2., 3., 4.], 2, 2).is_err());
    }

    #[test]
    fn unit_triangle_properties() {
        let a = vec![0., 1., 1., 1., 0., 1., 1., 1., 0.];
        let props = nodal_properties(&a, 3).unwrap();
        assert_eq!(props.strength, vec![2.; 3]);
        assert!(approx(&props.clustering, &[1.; 3]));
        assert_eq!(props.betweenness, vec![0.; 3]);
        assert_eq!(props.efficiency, vec![1.; 3]);
    }

    #[test]
    fn unit_path_properties() {
        let a = vec![0., 1., 0., 1., 0., 1., 0., 1., 0.];
        let props = nodal_properties(&a, 3).unwrap();
        assert_eq!(props.betweenness, vec![0., 1., 0.]);
        assert_eq!(props.strength, vec![1., 2., 1.]);
        assert_eq!(props.clustering, vec![0.; 3]);
    }

    #[test]
    fn empty_graph_properties_are_zero() {
        let props = nodal_properties(&[0.0; 16], 4).unwrap();
        for column in props.columns() {
            assert_eq!(column, &[0.0; 4]);
        }
    }

    #[test]
    fn tied_paths_share_credit() {
        // 4-cycle 0-1-2-3-0: pairs (0,2) and (1,3) each have two shortest paths.
        let mut a = vec![0.0; 16];
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            a[i * 4 + j] = 1.0;
            a[j * 4 + i] = 1.0;
        }
        let props = nodal_properties(&a, 4).unwrap();
        assert_eq!(props.betweenness, vec![0.5; 4]);
    }
}
