use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use proptree_tensor::{AdamConfig, AdamState, Tensor};

use super::features::{token_features, FeatureIndex};
use crate::data::{AdDocument, BioSequence, BioTag};
use crate::error::{Error, Result};
use crate::oracle::log_sum_exp;

/// Log-partition of a linear chain with `emissions[i][y]` and
/// `transitions[a][b]`, by the forward recursion.
pub fn log_partition(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<f64> {
    Ok(forward(emissions, transitions)?
        .last()
        .map(|a| log_sum_exp(a))
        .expect("non-empty"))
}

fn forward(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if emissions.is_empty() {
        return Err(Error::Empty("tag sequence".into()));
    }
    let k = transitions.len();
    let mut alpha = vec![emissions[0].clone()];
    let mut buf = vec![0.0; k];
    for em in &emissions[1..] {
        let prev = alpha.last().expect("non-empty");
        let next = (0..k)
            .map(|b| {
                for a in 0..k {
                    buf[a] = prev[a] + transitions[a][b];
                }
                em[b] + log_sum_exp(&buf)
            })
            .collect();
        alpha.push(next);
    }
    Ok(alpha)
}

fn backward(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = emissions.len();
    let k = transitions.len();
    let mut beta = vec![vec![0.0; k]; n];
    let mut buf = vec![0.0; k];
    for i in (0..n.saturating_sub(1)).rev() {
        for a in 0..k {
            for b in 0..k {
                buf[b] = transitions[a][b] + emissions[i + 1][b] + beta[i + 1][b];
            }
            beta[i][a] = log_sum_exp(&buf);
        }
    }
    beta
}

/// Highest-scoring tag sequence. Ties resolve to the smaller tag index.
pub fn viterbi(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<Vec<usize>> {
    if emissions.is_empty() {
        return Err(Error::Empty("tag sequence".into()));
    }
    let n = emissions.len();
    let k = transitions.len();
    let mut delta = emissions[0].clone();
    let mut back = vec![vec![0usize; k]; n];
    for i in 1..n {
        let mut next = vec![0.0; k];
        for b in 0..k {
            let (arg, best) = (0..k)
                .map(|a| (a, delta[a] + transitions[a][b]))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            back[i][b] = arg;
            next[b] = best + emissions[i][b];
        }
        delta = next;
    }
    let mut last = 0;
    for y in 1..k {
        if delta[y] > delta[last] {
            last = y;
        }
    }
    let mut path = vec![last; n];
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok(path)
}

/// Node and pairwise posteriors of a chain.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub log_z: f64,
    /// `node[i][y]`
    pub node: Vec<Vec<f64>>,
    /// `edge[i][a][b]` for the transition into position `i`; `edge[0]` is
    /// all zeros.
    pub edge: Vec<Vec<Vec<f64>>>,
}

pub fn forward_backward(emissions: &[Vec<f64>], transitions: &[Vec<f64>]) -> Result<Marginals> {
    let alpha = forward(emissions, transitions)?;
    let beta = backward(emissions, transitions);
    let n = emissions.len();
    let k = transitions.len();
    let log_z = log_sum_exp(&alpha[n - 1]);
    let node = (0..n)
        .map(|i| (0..k).map(|y| (alpha[i][y] + beta[i][y] - log_z).exp()).collect())
        .collect();
    let mut edge = vec![vec![vec![0.0; k]; k]; n];
    for i in 1..n {
        for a in 0..k {
            for b in 0..k {
                edge[i][a][b] = (alpha[i - 1][a] + transitions[a][b] + emissions[i][b] + beta[i][b]
                    - log_z)
                    .exp();
            }
        }
    }
    Ok(Marginals { log_z, node, edge })
}

/// A document reduced to per-token feature indices and gold tag indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfInstance {
    pub features: Vec<Vec<usize>>,
    pub tags: Vec<usize>,
}

/// Weight layout: emission block `[F, K]` row-major, then transitions
/// `[K, K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    pub features: FeatureIndex,
    pub num_tags: usize,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        CrfTrainConfig {
            lambda: 10.0,
            epochs: 30,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl CrfModel {
    pub fn new(features: FeatureIndex, num_tags: usize, lambda: f64) -> Self {
        let weights = vec![0.0; features.len() * num_tags + num_tags * num_tags];
        CrfModel {
            features,
            num_tags,
            weights,
            lambda,
        }
    }

    fn transition_offset(&self) -> usize {
        self.features.len() * self.num_tags
    }

    pub fn transitions(&self) -> Vec<Vec<f64>> {
        let k = self.num_tags;
        let off = self.transition_offset();
        (0..k)
            .map(|a| self.weights[off + a * k..off + (a + 1) * k].to_vec())
            .collect()
    }

    pub fn emissions(&self, features: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let k = self.num_tags;
        features
            .iter()
            .map(|fs| {
                let mut row = vec![0.0; k];
                for &f in fs {
                    for (y, r) in row.iter_mut().enumerate() {
                        *r += self.weights[f * k + y];
                    }
                }
                row
            })
            .collect()
    }

    /// Feature indices of every token; unseen features are dropped.
    pub fn featurize(&self, doc: &AdDocument) -> Vec<Vec<usize>> {
        (0..doc.len())
            .map(|i| {
                token_features(doc, i)
                    .iter()
                    .filter_map(|f| self.features.get(f))
                    .collect()
            })
            .collect()
    }

    pub fn log_partition(&self, doc: &AdDocument) -> Result<f64> {
        log_partition(&self.emissions(&self.featurize(doc)), &self.transitions())
    }

    pub fn viterbi(&self, doc: &AdDocument) -> Result<BioSequence> {
        let path = viterbi(&self.emissions(&self.featurize(doc)), &self.transitions())?;
        Ok(BioSequence(
            path.into_iter()
                .map(|y| BioTag::from_index(y).expect("tag index"))
                .collect(),
        ))
    }

    /// `log P(y | x) - reg_share · λ/2 ||w||²` for one instance, with its
    /// gradient added into `grad`.
    fn accumulate(&self, inst: &CrfInstance, reg_share: f64, grad: &mut [f64]) -> Result<f64> {
        let k = self.num_tags;
        let em = self.emissions(&inst.features);
        let tr = self.transitions();
        let m = forward_backward(&em, &tr)?;
        let off = self.transition_offset();
        let mut gold = 0.0;
        for (i, fs) in inst.features.iter().enumerate() {
            let y = inst.tags[i];
            gold += em[i][y];
            for &f in fs {
                grad[f * k + y] += 1.0;
                for (t, p) in m.node[i].iter().enumerate() {
                    grad[f * k + t] -= p;
                }
            }
            if i > 0 {
                let a = inst.tags[i - 1];
                gold += tr[a][y];
                grad[off + a * k + y] += 1.0;
                for a2 in 0..k {
                    for b2 in 0..k {
                        grad[off + a2 * k + b2] -= m.edge[i][a2][b2];
                    }
                }
            }
        }
        let mut value = gold - m.log_z;
        if reg_share > 0.0 {
            let c = self.lambda * reg_share;
            for (g, w) in grad.iter_mut().zip(&self.weights) {
                *g -= c * w;
                value -= 0.5 * c * w * w;
            }
        }
        Ok(value)
    }

    /// Regularized conditional log-likelihood of `data` and its gradient.
    pub fn objective(&self, data: &[CrfInstance]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.weights.len()];
        let mut value = 0.0;
        for inst in data {
            value += self.accumulate(inst, 0.0, &mut grad)?;
        }
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            *g -= self.lambda * w;
            value -= 0.5 * self.lambda * w * w;
        }
        Ok((value, grad))
    }
}

/// Builds the feature index over `docs` and converts them to instances.
pub fn prepare(docs: &[(AdDocument, BioSequence)]) -> (FeatureIndex, Vec<CrfInstance>) {
    let mut index = FeatureIndex::new();
    let data = docs
        .iter()
        .map(|(doc, tags)| CrfInstance {
            features: (0..doc.len())
                .map(|i| token_features(doc, i).iter().map(|f| index.insert(f)).collect())
                .collect(),
            tags: tags.0.iter().map(|t| t.index()).collect(),
        })
        .collect();
    (index, data)
}

/// Gradient ascent on the L2-regularized conditional log-likelihood, one
/// Adam step per document in seeded shuffled order.
pub fn train(docs: &[(AdDocument, BioSequence)], config: &CrfTrainConfig) -> Result<CrfModel> {
    if docs.is_empty() {
        return Err(Error::Empty("CRF training set".into()));
    }
    let (index, data) = prepare(docs);
    let mut model = CrfModel::new(index, BioTag::COUNT, config.lambda);
    let n = model.weights.len();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), [&[n][..]]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let share = 1.0 / data.len() as f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &d in &order {
            let mut grad = vec![0.0; n];
            model.accumulate(&data[d], share, &mut grad)?;
            // Adam minimizes, so descend on the negated objective.
            let g = Tensor::new(vec![n], grad.iter().map(|g| -g).collect())?;
            let mut w = Tensor::new(vec![n], std::mem::take(&mut model.weights))?;
            adam.apply(&mut [&mut w], &[&g])?;
            model.weights = w.into_data();
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::crf_enumerate;
    use rand::Rng;

    #[test]
    fn single_token_uniform() {
        let em = vec![vec![0.0; 3]];
        let tr = vec![vec![0.0; 3]; 3];
        assert!((log_partition(&em, &tr).unwrap() - 3f64.ln()).abs() < 1e-15);
        let m = forward_backward(&em, &tr).unwrap();
        for p in &m.node[0] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let tr = vec![vec![0.0; 2]; 2];
        assert!(log_partition(&[], &tr).is_err());
        assert!(viterbi(&[], &tr).is_err());
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=4);
            let em: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let tr: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let (z, best) = crf_enumerate(&em, &tr);
            let fz = log_partition(&em, &tr).unwrap();
            assert!((fz - z).abs() / z.abs().max(1.0) < 1e-10);
            assert_eq!(viterbi(&em, &tr).unwrap(), best);
            let m = forward_backward(&em, &tr).unwrap();
            for row in &m.node {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }
}
