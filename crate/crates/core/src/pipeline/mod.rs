//! Two-step baseline: a linear-chain CRF finds typed mentions, then a local
//! (LTM) or globally normalized (MTT) edge model scores candidate part-of
//! edges between them and Chu-Liu-Edmonds picks the tree.

pub mod crf;
pub mod features;
pub mod ltm;
pub mod mtt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use proptree_tensor::{Checkpoint, Manifest, Tensor};

use crate::data::{
    bio_encode, encode_tree_to_heads, mentions_from_bio, AdDocument, BioSequence, Entity, LabeledDocument,
    PropertyTree, TokenHeadAssignment,
};
use crate::error::{Error, Result};
use crate::mst::{chu_liu_edmonds, Arborescence, WeightedDigraph};
pub use crf::{CrfModel, CrfTrainConfig};
pub use features::{extract_edge_features, Candidate, FeatureIndex, FeatureVector};
pub use ltm::{EdgeTrainConfig, LtmModel};
pub use mtt::MttModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeModelKind {
    Ltm,
    Mtt,
}

impl EdgeModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeModelKind::Ltm => "ltm",
            EdgeModelKind::Mtt => "mtt",
        }
    }

    /// Model kind recorded in checkpoints.
    pub fn model_kind(self) -> &'static str {
        match self {
            EdgeModelKind::Ltm => "pipeline-crf+ltm",
            EdgeModelKind::Mtt => "pipeline-crf+mtt",
        }
    }
}

impl fmt::Display for EdgeModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ltm" | "pipeline-crf+ltm" => Ok(EdgeModelKind::Ltm),
            "mtt" | "pipeline-crf+mtt" => Ok(EdgeModelKind::Mtt),
            _ => Err(Error::Config(format!("unknown edge model {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EdgeModel {
    Ltm(LtmModel),
    Mtt(MttModel),
}

impl EdgeModel {
    pub fn kind(&self) -> EdgeModelKind {
        match self {
            EdgeModel::Ltm(_) => EdgeModelKind::Ltm,
            EdgeModel::Mtt(_) => EdgeModelKind::Mtt,
        }
    }

    /// Weight of a candidate edge in the entity graph.
    pub fn edge_weight(&self, f: &FeatureVector) -> f64 {
        match self {
            EdgeModel::Ltm(m) => m.log_score(f),
            EdgeModel::Mtt(m) => m.theta(f),
        }
    }

    fn weights(&self) -> &[f64] {
        match self {
            EdgeModel::Ltm(m) => &m.weights,
            EdgeModel::Mtt(m) => &m.weights,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub crf: CrfTrainConfig,
    pub edges: EdgeTrainConfig,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self::default();
        c.crf.seed = seed;
        c.edges.seed = seed;
        c
    }
}

/// Every mention of `tree` as its own candidate, in text order, with the
/// index of its gold parent candidate (`None` for the root). A mention's
/// parent is the first mention of its entity's parent.
pub fn gold_candidates(tree: &PropertyTree) -> (Vec<Candidate>, Vec<Option<usize>>) {
    let mut items: Vec<(Candidate, Option<&str>)> = tree
        .entities
        .iter()
        .flat_map(|e| {
            e.mentions.iter().map(move |&m| {
                (
                    Candidate {
                        mention: m,
                        entity_type: e.entity_type,
                    },
                    e.parent.as_deref(),
                )
            })
        })
        .collect();
    items.sort_by_key(|(c, _)| c.mention);
    let first_of = |id: &str| -> Option<usize> {
        let e = tree.entity(id)?;
        let first = e.mentions.iter().min()?;
        items.iter().position(|(c, _)| c.mention == *first)
    };
    let parents = items.iter().map(|(_, p)| p.and_then(first_of)).collect();
    (items.into_iter().map(|(c, _)| c).collect(), parents)
}

/// Candidates read off a tag sequence.
pub fn candidates_from_tags(tags: &BioSequence) -> Vec<Candidate> {
    mentions_from_bio(tags)
        .into_iter()
        .map(|(mention, entity_type)| Candidate { mention, entity_type })
        .collect()
}

/// Feature vectors of every candidate edge, indexed `[h][m]` over the root
/// (0) and candidates `1..=t`. Absent edges are `None`.
pub fn edge_feature_matrix(
    doc: &AdDocument,
    candidates: &[Candidate],
    mut vectorize: impl FnMut(&[(String, f64)]) -> FeatureVector,
) -> Vec<Vec<Option<FeatureVector>>> {
    let n = candidates.len() + 1;
    (0..n)
        .map(|h| {
            (0..n)
                .map(|m| {
                    if m == 0 || h == m {
                        return None;
                    }
                    let parent = h.checked_sub(1);
                    let f = extract_edge_features(doc, candidates, parent, m - 1);
                    Some(vectorize(&f))
                })
                .collect()
        })
        .collect()
}

/// Tree over `candidates` maximizing the summed `weight(h, m)` of its
/// edges, with node 0 as the root and candidate `k` as node `k + 1`.
pub fn decode_entities(
    candidates: &[Candidate],
    weight: impl Fn(usize, usize) -> f64,
) -> Result<PropertyTree> {
    if candidates.is_empty() {
        return Ok(PropertyTree::default());
    }
    let n = candidates.len() + 1;
    let mut g = WeightedDigraph::new((0..n).collect());
    for h in 0..n {
        for m in 1..n {
            g.set_edge(h, m, weight(h, m), None);
        }
    }
    let tree = chu_liu_edmonds(&g)?;
    let id = |k: usize| format!("e{k}");
    let entities = candidates
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let parent = tree.parent[k + 1].expect("non-root");
            Entity {
                id: id(k + 1),
                entity_type: c.entity_type,
                mentions: vec![c.mention],
                parent: (parent != 0).then(|| id(parent)),
            }
        })
        .collect();
    Ok(PropertyTree::new(entities))
}

/// True when every candidate's highest-weight parent (ties to the smaller
/// index) yields an arborescence.
pub fn local_parents_form_tree(t: usize, weight: impl Fn(usize, usize) -> f64) -> bool {
    let mut parent = vec![None];
    for m in 1..=t {
        let mut best = (0, f64::NEG_INFINITY);
        for h in (0..=t).filter(|&h| h != m) {
            let w = weight(h, m);
            if w > best.1 {
                best = (h, w);
            }
        }
        parent.push(Some(best.0));
    }
    Arborescence { parent }.is_valid()
}

/// A trained CRF plus edge model.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub crf: CrfModel,
    pub edge_features: FeatureIndex,
    pub edges: EdgeModel,
}

impl Pipeline {
    pub fn train(corpus: &[LabeledDocument], kind: EdgeModelKind, config: &PipelineConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("training split".into()));
        }
        let tagged = corpus
            .iter()
            .map(|d| Ok((d.doc.clone(), bio_encode(&d.doc, &d.tree)?)))
            .collect::<Result<Vec<_>>>()?;
        let crf = crf::train(&tagged, &config.crf)?;

        let mut index = FeatureIndex::new();
        let mut instances = Vec::with_capacity(corpus.len());
        for d in corpus {
            let (cands, parents) = gold_candidates(&d.tree);
            let features = edge_feature_matrix(&d.doc, &cands, |f| index.vectorize(f, true));
            let mut gold = vec![0];
            gold.extend(parents.iter().map(|p| p.map_or(0, |k| k + 1)));
            instances.push(mtt::MttInstance { features, gold });
        }
        let edges = match kind {
            EdgeModelKind::Ltm => {
                let groups: Vec<Vec<(FeatureVector, bool)>> = instances
                    .iter()
                    .map(|inst| {
                        let mut pairs = Vec::new();
                        for (h, row) in inst.features.iter().enumerate() {
                            for (m, f) in row.iter().enumerate() {
                                if let Some(f) = f {
                                    pairs.push((f.clone(), inst.gold[m] == h));
                                }
                            }
                        }
                        pairs
                    })
                    .collect();
                EdgeModel::Ltm(ltm::train(&groups, index.len(), &config.edges)?)
            }
            EdgeModelKind::Mtt => EdgeModel::Mtt(mtt::train(&instances, index.len(), &config.edges)?),
        };
        Ok(Pipeline {
            crf,
            edge_features: index,
            edges,
        })
    }

    /// Tree for `doc` from predicted tags.
    pub fn predict(&self, doc: &AdDocument) -> Result<PropertyTree> {
        Ok(self.predict_full(doc)?.0)
    }

    /// Tree for `doc` over the given candidates.
    pub fn predict_with_candidates(&self, doc: &AdDocument, candidates: &[Candidate]) -> Result<PropertyTree> {
        let features = edge_feature_matrix(doc, candidates, |f| self.edge_features.lookup(f));
        decode_entities(candidates, |h, m| {
            features[h][m]
                .as_ref()
                .map_or(f64::NEG_INFINITY, |f| self.edges.edge_weight(f))
        })
    }

    /// Predicted tree, plus whether picking each candidate's best parent
    /// independently would already have formed a tree.
    pub fn predict_full(&self, doc: &AdDocument) -> Result<(PropertyTree, bool)> {
        let tags = self.crf.viterbi(doc)?;
        let candidates = candidates_from_tags(&tags);
        let features = edge_feature_matrix(doc, &candidates, |f| self.edge_features.lookup(f));
        let weight = |h: usize, m: usize| {
            features[h][m]
                .as_ref()
                .map_or(f64::NEG_INFINITY, |f| self.edges.edge_weight(f))
        };
        let local = local_parents_form_tree(candidates.len(), weight);
        Ok((decode_entities(&candidates, weight)?, local))
    }

    /// Token-level view of [`Pipeline::predict`], used for scoring.
    pub fn predict_assignment(&self, doc: &AdDocument) -> Result<TokenHeadAssignment> {
        encode_tree_to_heads(doc, &self.predict(doc)?)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let kind = self.edges.kind();
        let mut manifest = Manifest::new(kind.model_kind(), seed);
        manifest.hyperparameters.insert("lambda_crf".into(), json!(self.crf.lambda));
        let (c, prior) = match &self.edges {
            EdgeModel::Ltm(m) => (m.c, m.prior),
            EdgeModel::Mtt(m) => (m.c, None),
        };
        manifest.hyperparameters.insert("c".into(), json!(c));
        manifest.extra = json!({
            "crf_features": self.crf.features.names(),
            "num_tags": self.crf.num_tags,
            "edge_features": self.edge_features.names(),
            "prior": prior,
        });
        let mut ckpt = Checkpoint::new(manifest);
        ckpt.push("crf.weights", Tensor::new(vec![self.crf.weights.len()], self.crf.weights.clone())?);
        let w = self.edges.weights();
        ckpt.push("edge.weights", Tensor::new(vec![w.len()], w.to_vec())?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        let kind: EdgeModelKind = m.model_kind.parse()?;
        let bad = |what: &str| Error::Checkpoint(format!("pipeline checkpoint: {what}"));
        let names = |key: &str| -> Result<Vec<String>> {
            serde_json::from_value(m.extra.get(key).cloned().ok_or_else(|| bad(key))?).map_err(Error::from)
        };
        let number = |key: &str| m.hyperparameters.get(key).and_then(|v| v.as_f64()).ok_or_else(|| bad(key));
        let num_tags = m.extra.get("num_tags").and_then(|v| v.as_u64()).ok_or_else(|| bad("num_tags"))? as usize;
        let weights = |key: &str| -> Result<Vec<f64>> {
            Ok(ckpt.tensor(key).ok_or_else(|| bad(key))?.data().to_vec())
        };
        let crf = CrfModel {
            features: FeatureIndex::from_names(names("crf_features")?),
            num_tags,
            weights: weights("crf.weights")?,
            lambda: number("lambda_crf")?,
        };
        if crf.weights.len() != crf.features.len() * num_tags + num_tags * num_tags {
            return Err(bad("CRF weight count"));
        }
        let edge_features = FeatureIndex::from_names(names("edge_features")?);
        let w = weights("edge.weights")?;
        if w.len() != edge_features.len() {
            return Err(bad("edge weight count"));
        }
        let c = number("c")?;
        let edges = match kind {
            EdgeModelKind::Ltm => EdgeModel::Ltm(LtmModel {
                weights: w,
                c,
                prior: m.extra.get("prior").and_then(|v| v.as_f64()),
            }),
            EdgeModelKind::Mtt => EdgeModel::Mtt(MttModel { weights: w, c }),
        };
        Ok(Pipeline {
            crf,
            edge_features,
            edges,
        })
    }
}
