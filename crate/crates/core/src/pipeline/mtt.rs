use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use proptree_tensor::{AdamConfig, AdamState, Tensor};

use super::features::FeatureVector;
use super::ltm::EdgeTrainConfig;
use crate::error::{Error, Result};

struct Factorized {
    log_z: f64,
    /// Scaled edge weights `A[h][m] = exp(θ[h][m] - shift)`.
    a: Vec<Vec<f64>>,
    inverse: DMatrix<f64>,
}

/// Laplacian of the root plus `t` entities. Row/column `m - 1` stands for
/// entity `m`; the root row is removed.
fn factorize(theta: &[Vec<f64>]) -> Result<Factorized> {
    let n = theta.len();
    if n < 2 {
        return Err(Error::Empty("entity set".into()));
    }
    let t = n - 1;
    let shift = (0..n)
        .flat_map(|h| (1..n).filter(move |&m| m != h).map(move |m| (h, m)))
        .map(|(h, m)| theta[h][m])
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::SingularLaplacian(1));
    }
    let mut a = vec![vec![0.0; n]; n];
    for h in 0..n {
        for m in 1..n {
            if h != m {
                a[h][m] = (theta[h][m] - shift).exp();
            }
        }
    }
    let mut l = DMatrix::<f64>::zeros(t, t);
    for m in 1..n {
        let incoming: f64 = (0..n).map(|h| a[h][m]).sum();
        if incoming == 0.0 {
            return Err(Error::SingularLaplacian(m));
        }
        l[(m - 1, m - 1)] = incoming;
        for h in 1..n {
            if h != m {
                l[(h - 1, m - 1)] = -a[h][m];
            }
        }
    }
    let lu = l.lu();
    let u = lu.u();
    let mut log_det = 0.0;
    let mut sign = lu.p().determinant::<f64>();
    for i in 0..t {
        let d = u[(i, i)];
        if d == 0.0 || !d.is_finite() {
            return Err(Error::SingularLaplacian(i + 1));
        }
        sign *= d.signum();
        log_det += d.abs().ln();
    }
    if sign <= 0.0 {
        return Err(Error::SingularLaplacian(t));
    }
    let inverse = lu.try_inverse().ok_or(Error::SingularLaplacian(t))?;
    Ok(Factorized {
        log_z: t as f64 * shift + log_det,
        a,
        inverse,
    })
}

/// `log Σ_y exp(Σ_{(h,m)∈y} θ[h][m])` over arborescences rooted at node 0,
/// via the determinant of the Laplacian minor. `theta` is `(t+1)²`.
pub fn log_partition(theta: &[Vec<f64>]) -> Result<f64> {
    Ok(factorize(theta)?.log_z)
}

/// Log-partition and edge marginals `μ[h][m]`.
pub fn marginals(theta: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let f = factorize(theta)?;
    let n = theta.len();
    let inv = &f.inverse;
    let mut mu = vec![vec![0.0; n]; n];
    for m in 1..n {
        mu[0][m] = f.a[0][m] * inv[(m - 1, m - 1)];
        for h in 1..n {
            if h != m {
                mu[h][m] = f.a[h][m] * (inv[(m - 1, m - 1)] - inv[(m - 1, h - 1)]);
            }
        }
    }
    Ok((f.log_z, mu))
}

/// One document for MTT training: `features[h][m]` for every candidate
/// edge (`None` on the diagonal and into the root) and the gold parent of
/// each entity `1..=t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MttInstance {
    pub features: Vec<Vec<Option<FeatureVector>>>,
    pub gold: Vec<usize>,
}

/// Globally normalized edge model with `θ[h][m] = w · f(h, m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MttModel {
    pub weights: Vec<f64>,
    pub c: f64,
}

impl MttModel {
    pub fn zeros(num_features: usize, c: f64) -> Self {
        MttModel {
            weights: vec![0.0; num_features],
            c,
        }
    }

    pub fn theta(&self, f: &FeatureVector) -> f64 {
        f.dot(&self.weights)
    }

    pub fn theta_matrix(&self, features: &[Vec<Option<FeatureVector>>]) -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|row| {
                row.iter()
                    .map(|f| f.as_ref().map_or(f64::NEG_INFINITY, |f| self.theta(f)))
                    .collect()
            })
            .collect()
    }

    /// `log P(gold) - reg_share/(2C) ||w||²`, gradient added into `grad`.
    fn accumulate(&self, inst: &MttInstance, reg_share: f64, grad: &mut [f64]) -> Result<f64> {
        let theta = self.theta_matrix(&inst.features);
        let (log_z, mu) = marginals(&theta)?;
        let mut value = -log_z;
        for (m, &h) in inst.gold.iter().enumerate().skip(1) {
            let f = inst.features[h][m].as_ref().expect("gold edge features");
            value += theta[h][m];
            f.add_to(grad, 1.0);
        }
        for (h, row) in inst.features.iter().enumerate() {
            for (m, f) in row.iter().enumerate() {
                if let Some(f) = f {
                    f.add_to(grad, -mu[h][m]);
                }
            }
        }
        let c = reg_share / self.c;
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            *g -= c * w;
            value -= 0.5 * c * w * w;
        }
        Ok(value)
    }

    /// Regularized log-likelihood of `data` and its gradient.
    pub fn objective(&self, data: &[MttInstance]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.weights.len()];
        let mut value = 0.0;
        for inst in data {
            value += self.accumulate(inst, 0.0, &mut grad)?;
        }
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            *g -= w / self.c;
            value -= 0.5 * w * w / self.c;
        }
        Ok((value, grad))
    }
}

/// Maximizes `Σ log P(y | I; θ) - 1/(2C) ||w||²` with one Adam step per
/// document.
pub fn train(data: &[MttInstance], num_features: usize, config: &EdgeTrainConfig) -> Result<MttModel> {
    let mut order: Vec<usize> = (0..data.len()).filter(|&d| data[d].gold.len() > 1).collect();
    if order.is_empty() {
        return Err(Error::Empty("edge training documents".into()));
    }
    let mut model = MttModel::zeros(num_features, config.c);
    let n = num_features;
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), [&[n][..]]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let share = 1.0 / order.len() as f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &d in &order {
            let mut grad = vec![0.0; n];
            model.accumulate(&data[d], share, &mut grad)?;
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
    use crate::oracle;
    use rand::Rng;

    #[test]
    fn single_entity() {
        let theta = vec![vec![0.0, 1.7], vec![0.0, 0.0]];
        assert!((log_partition(&theta).unwrap() - 1.7).abs() < 1e-14);
    }

    #[test]
    fn two_entities_zero_theta() {
        let z = log_partition(&vec![vec![0.0; 3]; 3]).unwrap().exp();
        assert!((z - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_entity_rejected() {
        let mut theta = vec![vec![0.0; 3]; 3];
        theta[0][2] = f64::NEG_INFINITY;
        theta[1][2] = f64::NEG_INFINITY;
        assert!(matches!(log_partition(&theta), Err(Error::SingularLaplacian(2))));
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 1..=4 {
            let theta: Vec<Vec<f64>> = (0..=t)
                .map(|_| (0..=t).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let (z, mu) = marginals(&theta).unwrap();
            let brute = oracle::mtt_log_partition(&theta);
            assert!((z - brute).abs() / brute.abs().max(1e-12) < 1e-10);
            let brute_mu = oracle::mtt_marginals(&theta);
            for m in 1..=t {
                let col: f64 = (0..=t).map(|h| mu[h][m]).sum();
                assert!((col - 1.0).abs() < 1e-10);
                for h in 0..=t {
                    assert!((mu[h][m] - brute_mu[h][m]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let theta = vec![vec![900.0; 4]; 4];
        let z = log_partition(&theta).unwrap();
        // 16 arborescences over 3 entities.
        assert!((z - (2700.0 + 16f64.ln())).abs() < 1e-9);
    }
}
