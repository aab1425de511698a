//! Joint head and label selection over all `(head, label)` pairs.

use proptree_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::data::{RelationLabel, TokenHeadAssignment};
use crate::error::{Error, Result};

const LABELS: usize = RelationLabel::COUNT;

/// Per-label `V_k`, `U_k`, `W_k`, `b_k`, stacked along a leading label axis.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub input_width: usize,
    pub width: usize,
}

impl Scorer {
    /// Registers parameters `U, W: [4, l, m]`, `b, V: [4, l]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_width: usize,
        width: usize,
        init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Scorer {
            u: store.add("scorer.u", Tensor::uniform(&[LABELS, width, input_width], init, rng))?,
            w: store.add("scorer.w", Tensor::uniform(&[LABELS, width, input_width], init, rng))?,
            b: store.add("scorer.b", Tensor::zeros(&[LABELS, width]))?,
            v: store.add("scorer.v", Tensor::uniform(&[LABELS, width], init, rng))?,
            input_width,
            width,
        })
    }

    /// Log-probabilities `[N+1, (N+1) * 4]`: row `i` is the joint
    /// distribution of dependent `i` over `(head j, label k)` flattened as
    /// `j * 4 + k`. Row 0 (the root) is computed but never used.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.input_width {
            return Err(Error::Config(format!(
                "scorer expects width {}, got shape {shape:?}",
                self.input_width
            )));
        }
        let n1 = shape[0];
        let (l, m) = (self.width, self.input_width);
        let u = tape.param(store, self.u);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let v = tape.param(store, self.v);
        let u = tape.reshape(u, &[LABELS * l, m])?;
        let ut = tape.transpose(u)?;
        let w = tape.reshape(w, &[LABELS * l, m])?;
        let wt = tape.transpose(w)?;
        let b = tape.reshape(b, &[LABELS * l])?;
        let heads = tape.matmul(h, ut)?;
        let deps = tape.matmul(h, wt)?;
        let deps = tape.add(deps, b)?;
        // [i, j, 4l]
        let pre = tape.pairwise_add(deps, heads)?;
        let act = tape.tanh(pre)?;
        let act = tape.reshape(act, &[n1 * n1, LABELS, l])?;
        let weighted = tape.mul(act, v)?;
        let scores = tape.sum_axis(weighted, 2)?;
        let scores = tape.reshape(scores, &[n1, n1 * LABELS])?;
        Ok(tape.log_softmax(scores, 1)?)
    }

    /// `V_kᵀ tanh(U_k h_j + W_k h_i + b_k)` computed with plain loops.
    pub fn score_triple(&self, store: &ParamStore, h_j: &[f64], h_i: &[f64], k: usize) -> Result<f64> {
        if h_j.len() != self.input_width || h_i.len() != self.input_width {
            return Err(Error::Config(format!(
                "score_triple expects width {}, got {} and {}",
                self.input_width,
                h_j.len(),
                h_i.len()
            )));
        }
        let (u, w, b, v) = (
            store.value(self.u),
            store.value(self.w),
            store.value(self.b),
            store.value(self.v),
        );
        let mut total = 0.0;
        for r in 0..self.width {
            let mut pre = b.get(&[k, r]);
            for c in 0..self.input_width {
                pre += u.get(&[k, r, c]) * h_j[c] + w.get(&[k, r, c]) * h_i[c];
            }
            total += v.get(&[k, r]) * pre.tanh();
        }
        Ok(total)
    }
}

/// `P[i][j][k]` for dependents `1..=N`, heads `0..=N` and the four labels,
/// stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    n: usize,
    log_probs: Vec<f64>,
}

impl JointDistribution {
    /// From a `[N+1, (N+1) * 4]` log-probability tensor.
    pub fn from_log_probs(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 2 || shape[0] < 2 || shape[1] != shape[0] * LABELS {
            return Err(Error::Config(format!("bad distribution shape {shape:?}")));
        }
        Ok(JointDistribution {
            n: shape[0] - 1,
            log_probs: t.data().to_vec(),
        })
    }

    /// From unnormalized scores `s[i][j][k]`, normalized per dependent.
    pub fn from_scores(n: usize, score: impl Fn(usize, usize, usize) -> f64) -> Self {
        let row = (n + 1) * LABELS;
        let mut log_probs = vec![0.0; (n + 1) * row];
        for i in 1..=n {
            let s: Vec<f64> = (0..row).map(|x| score(i, x / LABELS, x % LABELS)).collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (x, v) in s.iter().enumerate() {
                log_probs[i * row + x] = v - lse;
            }
        }
        JointDistribution { n, log_probs }
    }

    /// Number of tokens `N`.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn log_prob(&self, i: usize, j: usize, k: usize) -> f64 {
        self.log_probs[(i * (self.n + 1) + j) * LABELS + k]
    }

    pub fn prob(&self, i: usize, j: usize, k: usize) -> f64 {
        self.log_prob(i, j, k).exp()
    }

    /// Total mass of dependent `i`.
    pub fn mass(&self, i: usize) -> f64 {
        (0..=self.n)
            .flat_map(|j| (0..LABELS).map(move |k| (j, k)))
            .map(|(j, k)| self.prob(i, j, k))
            .sum()
    }
}

/// Cross-entropy of the gold assignment, summed over dependents `1..=N`.
pub fn loss(tape: &mut Tape, log_probs: Var, gold: &TokenHeadAssignment) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let n = shape[0] - 1;
    if gold.len() != n {
        return Err(Error::InvalidAssignment(format!(
            "gold has {} tokens, distribution {n}",
            gold.len()
        )));
    }
    let indices: Vec<usize> = gold
        .edges()
        .map(|(i, h, l)| i * shape[1] + h * LABELS + l.index())
        .collect();
    let picked = tape.gather(log_probs, &indices)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0)?)
}

/// Same value as [`loss`], computed from a finished distribution.
pub fn loss_value(dist: &JointDistribution, gold: &TokenHeadAssignment) -> Result<f64> {
    if gold.len() != dist.len() {
        return Err(Error::InvalidAssignment(format!(
            "gold has {} tokens, distribution {}",
            gold.len(),
            dist.len()
        )));
    }
    Ok(-gold
        .edges()
        .map(|(i, h, l)| dist.log_prob(i, h, l.index()))
        .sum::<f64>())
}

/// Per token the most probable `(head, label)`; ties go to the smallest
/// head, then the smallest label index.
pub fn greedy_decode(dist: &JointDistribution) -> TokenHeadAssignment {
    let n = dist.len();
    let mut heads = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 1..=n {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for j in 0..=n {
            for k in 0..LABELS {
                let lp = dist.log_prob(i, j, k);
                if lp > best.2 {
                    best = (j, k, lp);
                }
            }
        }
        heads.push(best.0);
        labels.push(RelationLabel::from_index(best.1).expect("label index"));
    }
    TokenHeadAssignment::new(heads, labels).expect("heads within range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scorer(m: usize, l: usize, seed: u64) -> (ParamStore, Scorer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Scorer::new(&mut store, m, l, 0.8, &mut rng).unwrap();
        (store, s)
    }

    fn randomize_bias(store: &mut ParamStore, s: &Scorer, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *store.value_mut(s.b) = Tensor::uniform(&[LABELS, s.width], 0.5, &mut rng);
    }

    fn distribution(store: &ParamStore, s: &Scorer, h: &Tensor) -> JointDistribution {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let lp = s.log_probs(&mut tape, store, hv).unwrap();
        JointDistribution::from_log_probs(tape.value(lp)).unwrap()
    }

    #[test]
    fn zero_v_scores_zero() {
        let (mut store, s) = scorer(4, 2, 1);
        *store.value_mut(s.v) = Tensor::zeros(&[LABELS, 2]);
        assert_eq!(s.score_triple(&store, &[1., 2., 3., 4.], &[0.5; 4], 2).unwrap(), 0.0);
    }

    #[test]
    fn zero_inputs_without_bias_score_zero() {
        let (store, s) = scorer(4, 2, 2);
        assert_eq!(s.score_triple(&store, &[0.0; 4], &[0.0; 4], 1).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_scorer_is_uniform() {
        let (mut store, s) = scorer(3, 2, 3);
        *store.value_mut(s.v) = Tensor::zeros(&[LABELS, 2]);
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = distribution(&store, &s, &Tensor::uniform(&[n + 1, 3], 1.0, &mut rng));
        for i in 1..=n {
            for j in 0..=n {
                for k in 0..LABELS {
                    assert!((d.prob(i, j, k) - 1.0 / (4.0 * (n as f64 + 1.0))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_matches_loop_scores() {
        let (mut store, s) = scorer(4, 2, 4);
        randomize_bias(&mut store, &s, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let d = distribution(&store, &s, &h);
        let brute = JointDistribution::from_scores(2, |i, j, k| {
            s.score_triple(&store, h.row(j), h.row(i), k).unwrap()
        });
        for i in 1..=2 {
            for j in 0..=2 {
                for k in 0..LABELS {
                    assert!((d.log_prob(i, j, k) - brute.log_prob(i, j, k)).abs() < 1e-12);
                }
            }
            assert!((d.mass(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_loss_value() {
        let n = 5;
        let d = JointDistribution::from_scores(n, |_, _, _| 0.0);
        let gold = TokenHeadAssignment::all_skip(n);
        let l = loss_value(&d, &gold).unwrap();
        assert!((l - n as f64 * (4.0 * (n as f64 + 1.0)).ln()).abs() < 1e-9);
    }

    #[test]
    fn greedy_tie_prefers_smaller_head() {
        let d = JointDistribution::from_scores(2, |i, j, k| {
            if i == 1 && (j == 1 || j == 2) && k == 0 {
                5.0
            } else {
                0.0
            }
        });
        let g = greedy_decode(&d);
        assert_eq!((g.head(1), g.label(1)), (1, RelationLabel::PartOf));
    }

    #[test]
    fn loss_rejects_wrong_length() {
        let d = JointDistribution::from_scores(2, |_, _, _| 0.0);
        assert!(loss_value(&d, &TokenHeadAssignment::all_skip(3)).is_err());
    }
}
