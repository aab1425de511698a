//! Exhaustive-enumeration references for the structured algorithms. These
//! are exponential and only meant for tiny instances in tests and the
//! `selftest` command.

use crate::mst::{Arborescence, WeightedDigraph};

/// Every parent map over nodes `1..n` (node 0 is the root) that forms an
/// arborescence.
pub fn all_arborescences(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut parent = vec![0usize; n];
    loop {
        let candidate = Arborescence {
            parent: (0..n).map(|v| (v > 0).then_some(parent[v])).collect(),
        };
        if (1..n).all(|v| parent[v] != v) && candidate.is_valid() {
            out.push(parent.clone());
        }
        // Odometer over parent[1..n] in 0..n.
        let mut k = 1;
        while k < n {
            parent[k] += 1;
            if parent[k] < n {
                break;
            }
            parent[k] = 0;
            k += 1;
        }
        if k >= n {
            break;
        }
    }
    out
}

/// Best arborescence by enumeration, or `None` when none has finite
/// weight.
pub fn max_arborescence(g: &WeightedDigraph) -> Option<(f64, Vec<usize>)> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for parent in all_arborescences(g.len()) {
        let w: f64 = (1..g.len()).map(|v| g.weight(parent[v], v)).sum();
        if w.is_finite() && best.as_ref().is_none_or(|(b, _)| w > *b) {
            best = Some((w, parent));
        }
    }
    best
}

/// `log Σ_y exp(Σ_{(h,m) ∈ y} θ[h][m])` over arborescences of the root and
/// `t = theta.len() - 1` entities.
pub fn mtt_log_partition(theta: &[Vec<f64>]) -> f64 {
    let scores: Vec<f64> = all_arborescences(theta.len())
        .iter()
        .map(|p| (1..theta.len()).map(|m| theta[p[m]][m]).sum())
        .collect();
    log_sum_exp(&scores)
}

/// Edge marginals `μ[h][m]` by enumeration.
pub fn mtt_marginals(theta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = theta.len();
    let log_z = mtt_log_partition(theta);
    let mut mu = vec![vec![0.0; n]; n];
    for p in all_arborescences(n) {
        let s: f64 = (1..n).map(|m| theta[p[m]][m]).sum();
        let prob = (s - log_z).exp();
        for m in 1..n {
            mu[p[m]][m] += prob;
        }
    }
    mu
}

/// Log-partition and best tag path of a linear-chain model by enumerating
/// all `K^N` sequences. `emissions[i][y]` and `transitions[a][b]`.
pub fn crf_enumerate(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = emissions.len();
    let k = transitions.len();
    let mut tags = vec![0usize; n];
    let mut scores = Vec::new();
    let mut best = (f64::NEG_INFINITY, tags.clone());
    loop {
        let mut s = 0.0;
        for i in 0..n {
            s += emissions[i][tags[i]];
            if i > 0 {
                s += transitions[tags[i - 1]][tags[i]];
            }
        }
        scores.push(s);
        if s > best.0 {
            best = (s, tags.clone());
        }
        let mut pos = 0;
        while pos < n {
            tags[pos] += 1;
            if tags[pos] < k {
                break;
            }
            tags[pos] = 0;
            pos += 1;
        }
        if pos == n {
            break;
        }
    }
    (log_sum_exp(&scores), best.1)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
