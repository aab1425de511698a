use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use proptree_tensor::{AdamConfig, AdamState, Tensor};

use super::features::FeatureVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrainConfig {
    /// Inverse regularization strength; the L2 penalty is `1/(2C) ||w||²`.
    pub c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EdgeTrainConfig {
    fn default() -> Self {
        EdgeTrainConfig {
            c: 1.0,
            epochs: 30,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Local binary classifier over candidate part-of edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtmModel {
    pub weights: Vec<f64>,
    pub c: f64,
    /// Set when training saw a single class; every score is then this
    /// prior.
    pub prior: Option<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LtmModel {
    pub fn zeros(num_features: usize, c: f64) -> Self {
        LtmModel {
            weights: vec![0.0; num_features],
            c,
            prior: None,
        }
    }

    pub fn score(&self, f: &FeatureVector) -> f64 {
        match self.prior {
            Some(p) => p,
            None => sigmoid(f.dot(&self.weights)),
        }
    }

    /// Log-probability used as the edge weight of the entity graph.
    pub fn log_score(&self, f: &FeatureVector) -> f64 {
        match self.prior {
            // Floored so that the entity graph keeps finite edges.
            Some(p) => p.max(1e-12).ln(),
            None => {
                let z = f.dot(&self.weights);
                if z >= 0.0 {
                    -(-z).exp().ln_1p()
                } else {
                    z - z.exp().ln_1p()
                }
            }
        }
    }

    /// Regularized negative log-likelihood of `data` and its gradient.
    pub fn objective(&self, data: &[(FeatureVector, bool)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.weights.len()];
        let mut value = 0.0;
        for (f, y) in data {
            let p = sigmoid(f.dot(&self.weights));
            let t = if *y { 1.0 } else { 0.0 };
            value -= if *y { p.max(1e-300).ln() } else { (1.0 - p).max(1e-300).ln() };
            f.add_to(&mut grad, p - t);
        }
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            *g += w / self.c;
            value += 0.5 * w * w / self.c;
        }
        (value, grad)
    }
}

/// Minimizes the L2-regularized logistic loss with Adam, one step per
/// document group. `groups` holds the labeled pairs of each document.
pub fn train(
    groups: &[Vec<(FeatureVector, bool)>],
    num_features: usize,
    config: &EdgeTrainConfig,
) -> Result<LtmModel> {
    let total: usize = groups.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("edge training pairs".into()));
    }
    let mut model = LtmModel::zeros(num_features, config.c);
    let positives = groups.iter().flatten().filter(|(_, y)| *y).count();
    if positives == 0 || positives == total {
        model.prior = Some(positives as f64 / total as f64);
        return Ok(model);
    }
    let n = num_features;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), [&[n][..]]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
    let share = 1.0 / order.len() as f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &g in &order {
            let mut grad = vec![0.0; n];
            for (f, y) in &groups[g] {
                let p = sigmoid(f.dot(&model.weights));
                f.add_to(&mut grad, p - if *y { 1.0 } else { 0.0 });
            }
            for (gr, w) in grad.iter_mut().zip(&model.weights) {
                *gr += share * w / config.c;
            }
            let g = Tensor::new(vec![n], grad)?;
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

    #[test]
    fn zero_weights_give_one_half() {
        let m = LtmModel::zeros(3, 1.0);
        let f = FeatureVector(vec![(0, 1.0), (2, 4.0)]);
        assert_eq!(m.score(&f), 0.5);
        assert!((m.log_score(&f) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_score_is_stable() {
        let mut m = LtmModel::zeros(1, 1.0);
        for z in [-800.0, -30.0, -1.0, 0.0, 2.0, 40.0, 800.0] {
            m.weights[0] = z;
            let f = FeatureVector(vec![(0, 1.0)]);
            let expected = if z < -30.0 { z } else { sigmoid(z).ln() };
            assert!((m.log_score(&f) - expected).abs() < 1e-9, "z={z}");
        }
    }

    #[test]
    fn separable_toy_set() {
        // Feature 0 marks positives, feature 1 negatives, feature 2 is a bias.
        let pair = |pos: bool| {
            let f = if pos { 0 } else { 1 };
            (FeatureVector(vec![(f, 1.0), (2, 1.0)]), pos)
        };
        let groups: Vec<Vec<_>> = (0..10).map(|i| vec![pair(i % 3 == 0)]).collect();
        let cfg = EdgeTrainConfig {
            epochs: 100,
            ..EdgeTrainConfig::default()
        };
        let m = train(&groups, 3, &cfg).unwrap();
        for (f, y) in groups.iter().flatten() {
            assert_eq!(m.score(f) > 0.5, *y);
        }
    }

    #[test]
    fn single_class_falls_back_to_prior() {
        let groups = vec![vec![(FeatureVector(vec![(0, 1.0)]), false); 4]];
        let m = train(&groups, 1, &EdgeTrainConfig::default()).unwrap();
        assert_eq!(m.prior, Some(0.0));
        assert_eq!(m.score(&FeatureVector(vec![(0, 1.0)])), 0.0);
    }
}
