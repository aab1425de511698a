//! Oracle suites: every structured algorithm against exhaustive
//! enumeration, and analytic gradients against central differences.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use proptree_tensor::gradcheck::{relative_error, GradCheckEntry, GradCheckReport};
use proptree_tensor::{ParamStore, Tape, Tensor, Var};

use crate::attention::{Attention, AttentionKind};
use crate::data::synthetic::{generate_corpus, SynthConfig};
use crate::data::{decode_heads_to_tree, encode_tree_to_heads, has_nonprojective_part_of, AdDocument, RelationLabel, TokenHeadAssignment};
use crate::encoder::{BiLstm, EmbeddingTable, Vocabulary};
use crate::error::Result;
use crate::joint::{self, JointDistribution, Scorer};
use crate::mst::{chu_liu_edmonds, WeightedDigraph};
use crate::oracle;
use crate::pipeline::crf::{self, CrfInstance, CrfModel};
use crate::pipeline::features::FeatureIndex;
use crate::pipeline::mtt;

/// Finite-difference step used by the gradient suites.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let started = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Gradient of the scalar built by `f` with respect to every parameter of
/// `store`, checked against central differences.
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_into(&mut grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, s)?;
        Ok(tape.value(v).item())
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (input, &id) in ids.iter().enumerate() {
        for entry in 0..store.value(id).len() {
            let original = probe.value(id).data()[entry];
            probe.value_mut(id).data_mut()[entry] = original + step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[entry] = original - step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[entry] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.grad(id).data()[entry];
            record(&mut report, input, entry, analytic, numeric);
        }
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, input: usize, entry: usize, analytic: f64, numeric: f64) {
    let err = relative_error(analytic, numeric);
    report.checked += 1;
    if report.worst.is_none() || err > report.max_relative_error {
        report.max_relative_error = report.max_relative_error.max(err);
        report.worst = Some(GradCheckEntry {
            input,
            entry,
            analytic,
            numeric,
        });
    }
}

fn merge(total: &mut GradCheckReport, r: GradCheckReport) {
    total.checked += r.checked;
    if r.max_relative_error >= total.max_relative_error {
        total.max_relative_error = r.max_relative_error;
        total.worst = r.worst;
    }
}

fn random_doc(n: usize, rng: &mut impl Rng) -> AdDocument {
    let tokens = (0..n).map(|_| format!("w{}", rng.gen_range(0..5))).collect();
    AdDocument::new("g", tokens).expect("non-empty")
}

/// Random `[rows, cols]` readout weights turning a matrix into a scalar.
fn readout(tape: &mut Tape, h: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let r = tape.constant(Tensor::uniform(&shape, 1.0, rng));
    let p = tape.mul(h, r)?;
    Ok(tape.sum(p)?)
}

/// Random well-formed assignment over `n` tokens.
fn random_assignment(n: usize, rng: &mut impl Rng) -> TokenHeadAssignment {
    let mut heads = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 1..=n {
        let k = rng.gen_range(0..RelationLabel::COUNT);
        let label = RelationLabel::from_index(k).expect("label");
        let head = if label == RelationLabel::Skip {
            i
        } else {
            let mut h = rng.gen_range(0..n);
            if h >= i {
                h += 1;
            }
            h
        };
        heads.push(head);
        labels.push(label);
    }
    TokenHeadAssignment::new(heads, labels).expect("valid heads")
}

pub fn encoder_gradients(seeds: u64, tolerance: f64) -> SuiteResult {
    timed("gradient: BiLSTM encoder", || {
        let mut total = GradCheckReport::default();
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=4);
            let d = rng.gen_range(2..=4);
            let layers = 1 + (seed % 2) as usize;
            let doc = random_doc(n, &mut rng);
            let table = EmbeddingTable::random(Vocabulary::from_documents([&doc]), d, &mut rng);
            let table = EmbeddingTable {
                matrix: table.matrix.map(|x| x * 10.0),
                ..table
            };
            let mut store = ParamStore::new();
            let lstm = BiLstm::new(&mut store, d, d, layers, 0.5, &mut rng)?;
            let readout_seed = rng.gen();
            let r = check_param_gradients(&store, FD_STEP, |tape, s| {
                let x = table.embed::<ChaCha8Rng>(tape, &doc, None)?;
                let h = lstm.forward::<ChaCha8Rng>(tape, s, x, None)?;
                readout(tape, h, &mut ChaCha8Rng::seed_from_u64(readout_seed))
            })?;
            merge(&mut total, r);
        }
        Ok(grad_outcome(total, tolerance))
    })
}

pub fn scorer_gradients(seeds: u64, tolerance: f64) -> SuiteResult {
    timed("gradient: joint scorer loss", || {
        let mut total = GradCheckReport::default();
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = rng.gen_range(1..=4);
            let m = 2 * rng.gen_range(1..=4);
            let l = rng.gen_range(1..m);
            let mut store = ParamStore::new();
            let scorer = Scorer::new(&mut store, m, l, 0.8, &mut rng)?;
            let h = store.add("h", Tensor::uniform(&[n + 1, m], 1.0, &mut rng))?;
            *store.value_mut(scorer.b) = Tensor::uniform(&[4, l], 0.5, &mut rng);
            let gold = random_assignment(n, &mut rng);
            let r = check_param_gradients(&store, FD_STEP, |tape, s| {
                let hv = tape.param(s, h);
                let lp = scorer.log_probs(tape, s, hv)?;
                joint::loss(tape, lp, &gold)
            })?;
            merge(&mut total, r);
        }
        Ok(grad_outcome(total, tolerance))
    })
}

pub fn attention_gradients(kind: AttentionKind, seeds: u64, tolerance: f64) -> SuiteResult {
    timed(&format!("gradient: {kind} attention"), || {
        let mut total = GradCheckReport::default();
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let n = rng.gen_range(1..=4);
            let width = 2 * rng.gen_range(1..=2);
            let l = rng.gen_range(1..=3);
            let p = rng.gen_range(1..=3);
            let mut store = ParamStore::new();
            let att = Attention::new(&mut store, kind, width, l, p, 2, 0.8, &mut rng)?;
            let h = store.add("h", Tensor::uniform(&[n + 1, width], 1.0, &mut rng))?;
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).starts_with("attention.b") {
                    let shape = store.value(id).shape().to_vec();
                    *store.value_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng);
                }
            }
            let readout_seed = rng.gen();
            let r = check_param_gradients(&store, FD_STEP, |tape, s| {
                let hv = tape.param(s, h);
                let out = att.augment(tape, s, hv)?;
                readout(tape, out, &mut ChaCha8Rng::seed_from_u64(readout_seed))
            })?;
            merge(&mut total, r);
        }
        Ok(grad_outcome(total, tolerance))
    })
}

/// Random two-document CRF problem with random weights.
fn crf_toy(rng: &mut impl Rng) -> (CrfModel, Vec<CrfInstance>) {
    let k = rng.gen_range(2..=4);
    let f = rng.gen_range(2..=5);
    let data = (0..2)
        .map(|_| {
            let n = rng.gen_range(1..=4);
            CrfInstance {
                features: (0..n)
                    .map(|_| {
                        let mut fs: Vec<usize> = (0..f).filter(|_| rng.gen_bool(0.5)).collect();
                        if fs.is_empty() {
                            fs.push(0);
                        }
                        fs
                    })
                    .collect(),
                tags: (0..n).map(|_| rng.gen_range(0..k)).collect(),
            }
        })
        .collect();
    let names = (0..f).map(|i| format!("f{i}")).collect();
    let mut model = CrfModel::new(FeatureIndex::from_names(names), k, rng.gen_range(0.1..2.0));
    for w in &mut model.weights {
        *w = rng.gen_range(-1.0..1.0);
    }
    (model, data)
}

pub fn crf_gradients(seeds: u64, tolerance: f64) -> SuiteResult {
    timed("gradient: CRF training objective", || {
        let mut total = GradCheckReport::default();
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (mut model, data) = crf_toy(&mut rng);
            let (_, grad) = model.objective(&data)?;
            let mut report = GradCheckReport::default();
            for e in 0..model.weights.len() {
                let w = model.weights[e];
                model.weights[e] = w + FD_STEP;
                let plus = model.objective(&data)?.0;
                model.weights[e] = w - FD_STEP;
                let minus = model.objective(&data)?.0;
                model.weights[e] = w;
                record(&mut report, 0, e, grad[e], (plus - minus) / (2.0 * FD_STEP));
            }
            merge(&mut total, report);
        }
        Ok(grad_outcome(total, tolerance))
    })
}

fn grad_outcome(r: GradCheckReport, tolerance: f64) -> (bool, String) {
    let worst = r
        .worst
        .as_ref()
        .map(|w| format!(" (analytic {:.3e}, numeric {:.3e})", w.analytic, w.numeric))
        .unwrap_or_default();
    (
        r.passes(tolerance) && r.checked > 0,
        format!(
            "{} entries, max relative error {:.2e} < {tolerance:.0e}{worst}",
            r.checked, r.max_relative_error
        ),
    )
}

/// Random dense digraphs per size against the enumerated maximum.
pub fn edmonds_oracle(graphs_per_size: usize, sizes: &[usize], tolerance: f64) -> SuiteResult {
    timed("oracle: Chu-Liu-Edmonds", || {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut invalid = 0;
        for &n in sizes {
            for _ in 0..graphs_per_size {
                let w: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect())
                    .collect();
                let g = WeightedDigraph::from_dense(&w);
                let tree = chu_liu_edmonds(&g)?;
                let (best, _) = oracle::max_arborescence(&g).expect("complete graph");
                if !tree.is_valid() {
                    invalid += 1;
                }
                worst = worst.max((tree.weight(&g) - best).abs());
                checked += 1;
            }
        }
        Ok((
            invalid == 0 && worst < tolerance,
            format!("{checked} graphs, max |CLE - brute force| = {worst:.1e}, {invalid} invalid"),
        ))
    })
}

pub fn mtt_oracle(draws: usize, max_t: usize, tolerance: f64) -> SuiteResult {
    timed("oracle: Matrix-Tree partition", || {
        let z3 = mtt::log_partition(&vec![vec![0.0; 3]; 3])?.exp();
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let mut worst = 0.0f64;
        let mut worst_marginal = 0.0f64;
        for t in 1..=max_t {
            for _ in 0..draws {
                let theta: Vec<Vec<f64>> = (0..=t)
                    .map(|_| (0..=t).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .collect();
                let (z, mu) = mtt::marginals(&theta)?;
                let brute = oracle::mtt_log_partition(&theta);
                worst = worst.max(relative_error(z, brute));
                for m in 1..=t {
                    let col: f64 = (0..=t).map(|h| mu[h][m]).sum();
                    worst_marginal = worst_marginal.max((col - 1.0).abs());
                }
            }
        }
        let z3_ok = (z3 - 3.0).abs() < 1e-12;
        Ok((
            z3_ok && worst < tolerance && worst_marginal < 1e-8,
            format!(
                "t=1..{max_t}, {draws} draws each: max rel. error {worst:.1e}, max |Σμ - 1| {worst_marginal:.1e}, Z(t=2, θ=0) = {z3:.12}"
            ),
        ))
    })
}

pub fn crf_oracle(seeds: u64, tolerance: f64) -> SuiteResult {
    timed("oracle: CRF forward and Viterbi", || {
        let mut worst = 0.0f64;
        let mut mismatches = 0;
        let mut checked = 0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            for n in 1..=6 {
                let k = rng.gen_range(1..=5);
                let em: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .collect();
                let tr: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .collect();
                let (z, best) = oracle::crf_enumerate(&em, &tr);
                worst = worst.max(relative_error(crf::log_partition(&em, &tr)?, z));
                if crf::viterbi(&em, &tr)? != best {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
        Ok((
            worst < tolerance && mismatches == 0,
            format!("{checked} chains: max rel. error {worst:.1e}, {mismatches} Viterbi mismatches"),
        ))
    })
}

pub fn normalization(parameterizations: u64, tolerance: f64) -> SuiteResult {
    timed("normalization: joint distribution and attention", || {
        let mut worst_joint = 0.0f64;
        let mut worst_attention = 0.0f64;
        for seed in 0..parameterizations {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let n = rng.gen_range(1..=8);
            let m = 2 * rng.gen_range(1..=4);
            let mut store = ParamStore::new();
            let scorer = Scorer::new(&mut store, m, rng.gen_range(1..m), 3.0, &mut rng)?;
            let kind = AttentionKind::ALL[seed as usize % AttentionKind::ALL.len()];
            let att = Attention::new(&mut store, kind, m, 3, 3, 1, 3.0, &mut rng)?;
            let h = Tensor::uniform(&[n + 1, m], 3.0, &mut rng);
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let lp = scorer.log_probs(&mut tape, &store, hv)?;
            let dist = JointDistribution::from_log_probs(tape.value(lp))?;
            for i in 1..=n {
                worst_joint = worst_joint.max((dist.mass(i) - 1.0).abs());
            }
            if kind != AttentionKind::Edge {
                let w = att.weights(&mut tape, &store, hv)?;
                let w = tape.value(w);
                for j in 0..=n {
                    worst_attention = worst_attention.max((w.row(j).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        Ok((
            worst_joint < tolerance && worst_attention < tolerance,
            format!(
                "{parameterizations} parameterizations: max |mass - 1| {worst_joint:.1e}, max |attention row - 1| {worst_attention:.1e}"
            ),
        ))
    })
}

pub fn roundtrip(documents: usize, min_nonprojective: f64) -> SuiteResult {
    timed("roundtrip: encode then decode", || {
        let corpus = generate_corpus(documents, &SynthConfig::default(), 800);
        let mut failures = 0;
        let mut nonprojective = 0;
        for d in &corpus {
            let heads = encode_tree_to_heads(&d.doc, &d.tree)?;
            if has_nonprojective_part_of(&heads) {
                nonprojective += 1;
            }
            match decode_heads_to_tree(&d.doc, &heads) {
                Ok(t) if t.skeleton() == d.tree.skeleton() => {}
                _ => failures += 1,
            }
        }
        let share = 100.0 * nonprojective as f64 / documents as f64;
        Ok((
            failures == 0 && share >= min_nonprojective,
            format!("{documents} documents, {failures} mismatches, {share:.1}% with non-projective part-of arcs"),
        ))
    })
}

/// Every suite with the default sizes.
pub fn run_all() -> Vec<SuiteResult> {
    let mut out = vec![
        encoder_gradients(20, 1e-4),
        scorer_gradients(20, 1e-4),
    ];
    for kind in AttentionKind::ALL {
        out.push(attention_gradients(kind, 20, 1e-4));
    }
    out.extend([
        crf_gradients(20, 1e-4),
        edmonds_oracle(100, &[2, 3, 4, 5], 1e-9),
        mtt_oracle(50, 5, 1e-8),
        crf_oracle(50, 1e-8),
        normalization(100, 1e-6),
        roundtrip(1000, 25.0),
    ]);
    out
}
