//! Attention layers placed between the encoder and the scorer.
//!
//! Score-based variants produce a matrix `att[j][i]`, normalize every row
//! with a softmax and append the context vector `h*_j` to `h_j`. The edge
//! variant instead rewrites every vector by `T` rounds of message passing.

use std::fmt;
use std::str::FromStr;

use proptree_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Additive,
    Bilinear,
    Multiplicative,
    Biaffine,
    Tensor,
    Edge,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 6] = [
        AttentionKind::Additive,
        AttentionKind::Bilinear,
        AttentionKind::Multiplicative,
        AttentionKind::Biaffine,
        AttentionKind::Tensor,
        AttentionKind::Edge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Additive => "additive",
            AttentionKind::Bilinear => "bilinear",
            AttentionKind::Multiplicative => "multiplicative",
            AttentionKind::Biaffine => "biaffine",
            AttentionKind::Tensor => "tensor",
            AttentionKind::Edge => "edge",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum Params {
    Additive { v: ParamId, u: ParamId, w: ParamId, b: ParamId },
    Bilinear { w: ParamId },
    Multiplicative,
    Biaffine {
        u_dep: ParamId,
        u_head: ParamId,
        v_dep: ParamId,
        v_head: ParamId,
        w: ParamId,
        bias: ParamId,
        b_dep: ParamId,
        b_head: ParamId,
    },
    Tensor { w: ParamId, v: ParamId, u: ParamId, b: ParamId },
    Edge { u: ParamId, w: ParamId, b: ParamId, a_src: ParamId, a_dst: ParamId },
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttentionKind,
    /// Message-passing rounds of the edge variant.
    pub steps: usize,
    /// Encoder output width `2d`.
    pub width: usize,
    params: Params,
}

impl Attention {
    /// `width` is the encoder output width `2d`, `l` the inner width and
    /// `p` the biaffine projection width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kind: AttentionKind,
        width: usize,
        l: usize,
        p: usize,
        steps: usize,
        init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if kind == AttentionKind::Edge && steps == 0 {
            return Err(Error::Config("edge attention needs at least one step".into()));
        }
        let mut add = |name: &str, t: Tensor| store.add(format!("attention.{name}"), t);
        let params = match kind {
            AttentionKind::Additive => Params::Additive {
                v: add("v_a", Tensor::uniform(&[l], init, rng))?,
                u: add("u_a", Tensor::uniform(&[l, width], init, rng))?,
                w: add("w_a", Tensor::uniform(&[l, width], init, rng))?,
                b: add("b_a", Tensor::zeros(&[l]))?,
            },
            AttentionKind::Bilinear => Params::Bilinear {
                w: add("w_bil", Tensor::uniform(&[width, width], init, rng))?,
            },
            AttentionKind::Multiplicative => Params::Multiplicative,
            AttentionKind::Biaffine => Params::Biaffine {
                u_dep: add("u_dep", Tensor::uniform(&[l, width], init, rng))?,
                u_head: add("u_head", Tensor::uniform(&[l, width], init, rng))?,
                v_dep: add("v_dep", Tensor::uniform(&[p, l], init, rng))?,
                v_head: add("v_head", Tensor::uniform(&[p, l], init, rng))?,
                w: add("w_bil", Tensor::uniform(&[p, p], init, rng))?,
                bias: add("b", Tensor::uniform(&[p], init, rng))?,
                b_dep: add("b_dep", Tensor::zeros(&[l]))?,
                b_head: add("b_head", Tensor::zeros(&[l]))?,
            },
            AttentionKind::Tensor => Params::Tensor {
                w: add("w_t", Tensor::uniform(&[width, l, width], init, rng))?,
                v: add("v_t", Tensor::uniform(&[l, width], init, rng))?,
                u: add("u_t", Tensor::uniform(&[l], init, rng))?,
                b: add("b_t", Tensor::zeros(&[l]))?,
            },
            AttentionKind::Edge => Params::Edge {
                u: add("u_e", Tensor::uniform(&[l, width], init, rng))?,
                w: add("w_e", Tensor::uniform(&[l, width], init, rng))?,
                b: add("b_e", Tensor::zeros(&[l]))?,
                a_src: add("a_src", Tensor::uniform(&[width, l], init, rng))?,
                a_dst: add("a_dst", Tensor::uniform(&[width, l], init, rng))?,
            },
        };
        Ok(Attention {
            kind,
            steps,
            width,
            params,
        })
    }

    /// Width of the vectors handed to the scorer.
    pub fn output_width(&self) -> usize {
        match self.kind {
            AttentionKind::Edge => self.width,
            _ => 2 * self.width,
        }
    }

    fn check(&self, tape: &Tape, h: Var) -> Result<()> {
        let shape = tape.shape(h);
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Config(format!(
                "attention expects width {}, got shape {shape:?}",
                self.width
            )));
        }
        Ok(())
    }

    /// `att[j][i]` for the score-based variants, `[N+1, N+1]`.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        self.check(tape, h)?;
        let n1 = tape.shape(h)[0];
        match &self.params {
            Params::Additive { v, u, w, b } => {
                let (v, b) = (tape.param(store, *v), tape.param(store, *b));
                let a = project(tape, store, h, *u)?;
                let c = project(tape, store, h, *w)?;
                let c = tape.add(c, b)?;
                let pre = tape.pairwise_add(a, c)?;
                let act = tape.tanh(pre)?;
                let weighted = tape.mul(act, v)?;
                Ok(tape.sum_axis(weighted, 2)?)
            }
            Params::Bilinear { w } => {
                let w = tape.param(store, *w);
                let hw = tape.matmul(h, w)?;
                let ht = tape.transpose(h)?;
                Ok(tape.matmul(hw, ht)?)
            }
            Params::Multiplicative => {
                let ht = tape.transpose(h)?;
                Ok(tape.matmul(h, ht)?)
            }
            Params::Biaffine {
                u_dep,
                u_head,
                v_dep,
                v_head,
                w,
                bias,
                b_dep,
                b_head,
            } => {
                let dep = reduce(tape, store, h, *u_dep, *b_dep, *v_dep)?;
                let head = reduce(tape, store, h, *u_head, *b_head, *v_head)?;
                let w = tape.param(store, *w);
                let bias = tape.param(store, *bias);
                // Built as [i, j] so the head-only term broadcasts over rows.
                let wt = tape.transpose(w)?;
                let dw = tape.matmul(dep, wt)?;
                let head_t = tape.transpose(head)?;
                let pair = tape.matmul(dw, head_t)?;
                let p = tape.shape(head)[1];
                let bias_col = tape.reshape(bias, &[p, 1])?;
                let head_bias = tape.matmul(head, bias_col)?;
                let head_bias = tape.reshape(head_bias, &[n1])?;
                let by_dep = tape.add(pair, head_bias)?;
                Ok(tape.transpose(by_dep)?)
            }
            Params::Tensor { w, v, u, b } => {
                let width = self.width;
                let w = tape.param(store, *w);
                let l = tape.shape(w)[1];
                let w = tape.reshape(w, &[width, l * width])?;
                // hw[j][s][c] = sum_a h_j[a] W[a][s][c]
                let hw = tape.matmul(h, w)?;
                let hw = tape.reshape(hw, &[n1 * l, width])?;
                let ht = tape.transpose(h)?;
                let bil = tape.matmul(hw, ht)?;
                let bil = tape.reshape(bil, &[n1, l, n1])?;
                let bil = tape.permute(bil, &[0, 2, 1])?;
                let hv = project(tape, store, h, *v)?;
                let lin = tape.pairwise_add(hv, hv)?;
                let pre = tape.add(bil, lin)?;
                let b = tape.param(store, *b);
                let pre = tape.add(pre, b)?;
                let act = tape.tanh(pre)?;
                let u = tape.param(store, *u);
                let weighted = tape.mul(act, u)?;
                Ok(tape.sum_axis(weighted, 2)?)
            }
            Params::Edge { .. } => Err(Error::Config(
                "edge attention produces vectors, not scores".into(),
            )),
        }
    }

    /// One message-passing round: `(1/N)(A_src Σ_i edge(h_j, h_i) +
    /// A_dst Σ_i edge(h_i, h_j))` for every position `j`.
    pub fn message_pass(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        self.check(tape, h)?;
        let Params::Edge { u, w, b, a_src, a_dst } = &self.params else {
            return Err(Error::Config(format!("{} attention has no message passing", self.kind)));
        };
        let n = tape.shape(h)[0] - 1;
        let src = project(tape, store, h, *u)?;
        let dst = project(tape, store, h, *w)?;
        let b = tape.param(store, *b);
        let dst = tape.add(dst, b)?;
        // edges[j][i] = tanh(U h_j + W h_i + b)
        let pre = tape.pairwise_add(src, dst)?;
        let edges = tape.tanh(pre)?;
        let out_sum = tape.sum_axis(edges, 1)?;
        let in_sum = tape.sum_axis(edges, 0)?;
        let a_src = tape.param(store, *a_src);
        let a_dst = tape.param(store, *a_dst);
        let a_src = tape.transpose(a_src)?;
        let a_dst = tape.transpose(a_dst)?;
        let x = tape.matmul(out_sum, a_src)?;
        let y = tape.matmul(in_sum, a_dst)?;
        let total = tape.add(x, y)?;
        Ok(tape.scale(total, 1.0 / n.max(1) as f64)?)
    }

    /// Row-normalized attention weights `a(h_j, h_i)`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let s = self.scores(tape, store, h)?;
        Ok(tape.softmax(s, 1)?)
    }

    /// Scorer input: `[h_j ; h*_j]` for score-based variants, the
    /// message-passed vectors for the edge variant.
    pub fn augment(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        if self.kind == AttentionKind::Edge {
            let mut cur = h;
            for _ in 0..self.steps {
                cur = self.message_pass(tape, store, cur)?;
            }
            return Ok(cur);
        }
        let a = self.weights(tape, store, h)?;
        let ctx = context_vectors(tape, a, h)?;
        Ok(tape.concat(&[h, ctx], 1)?)
    }
}

/// `h*_j = Σ_i a[j][i] h_i`.
pub fn context_vectors(tape: &mut Tape, weights: Var, h: Var) -> Result<Var> {
    Ok(tape.matmul(weights, h)?)
}

/// `h Mᵀ` for a parameter `M: [out, width]`.
fn project(tape: &mut Tape, store: &ParamStore, h: Var, m: ParamId) -> Result<Var> {
    let m = tape.param(store, m);
    let mt = tape.transpose(m)?;
    Ok(tape.matmul(h, mt)?)
}

/// `V tanh(U h + b)` row-wise.
fn reduce(tape: &mut Tape, store: &ParamStore, h: Var, u: ParamId, b: ParamId, v: ParamId) -> Result<Var> {
    let x = project(tape, store, h, u)?;
    let b = tape.param(store, b);
    let x = tape.add(x, b)?;
    let x = tape.tanh(x)?;
    let v = tape.param(store, v);
    let vt = tape.transpose(v)?;
    Ok(tape.matmul(x, vt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: AttentionKind, width: usize, seed: u64) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = Attention::new(&mut store, kind, width, 3, 2, 2, 0.5, &mut rng).unwrap();
        (store, att)
    }

    fn value(kind: AttentionKind, store: &ParamStore, att: &Attention, h: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = if kind == AttentionKind::Edge {
            att.augment(&mut tape, store, hv).unwrap()
        } else {
            att.scores(&mut tape, store, hv).unwrap()
        };
        tape.value(out).clone()
    }

    #[test]
    fn multiplicative_constant_for_equal_vectors() {
        let (store, att) = build(AttentionKind::Multiplicative, 3, 1);
        let h = Tensor::from_fn(&[4, 3], |i| [0.2, -0.4, 0.7][i % 3]);
        let s = value(AttentionKind::Multiplicative, &store, &att, &h);
        let first = s.data()[0];
        assert!(s.data().iter().all(|&x| (x - first).abs() < 1e-15));
    }

    #[test]
    fn bilinear_identity_is_multiplicative() {
        let (mut store, att) = build(AttentionKind::Bilinear, 4, 2);
        let id = store.id("attention.w_bil").unwrap();
        *store.value_mut(id) = Tensor::eye(4);
        let (mstore, matt) = build(AttentionKind::Multiplicative, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let a = value(AttentionKind::Bilinear, &store, &att, &h);
        let b = value(AttentionKind::Multiplicative, &mstore, &matt, &h);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_average_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let s = tape.constant(Tensor::zeros(&[3, 3]));
        let a = tape.softmax(s, 1).unwrap();
        let ctx = context_vectors(&mut tape, a, hv).unwrap();
        for j in 0..3 {
            for c in 0..2 {
                let mean = (0..3).map(|i| h.get(&[i, c])).sum::<f64>() / 3.0;
                assert!((tape.value(ctx).get(&[j, c]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_score_selects_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let mut s = Tensor::zeros(&[3, 3]);
        for j in 0..3 {
            s.set(&[j, 2], 1e3);
        }
        let s = tape.constant(s);
        let a = tape.softmax(s, 1).unwrap();
        let ctx = context_vectors(&mut tape, a, hv).unwrap();
        for j in 0..3 {
            for c in 0..2 {
                assert!((tape.value(ctx).get(&[j, c]) - h.get(&[2, c])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn edge_with_zero_parameters_is_zero() {
        let (mut store, att) = build(AttentionKind::Edge, 4, 6);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let out = value(AttentionKind::Edge, &store, &att, &h);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn augment_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        for kind in AttentionKind::ALL {
            let (store, att) = build(kind, 4, 9);
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let out = att.augment(&mut tape, &store, hv).unwrap();
            assert_eq!(tape.shape(out)[1], att.output_width());
            let expected = if kind == AttentionKind::Edge { 4 } else { 8 };
            assert_eq!(att.output_width(), expected);
        }
    }

    #[test]
    fn parses_names() {
        for kind in AttentionKind::ALL {
            assert_eq!(kind.to_string().parse::<AttentionKind>().unwrap(), kind);
        }
        assert!("cosine".parse::<AttentionKind>().is_err());
    }
}
