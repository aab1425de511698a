use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{AdDocument, EntityMention, EntityType};

/// String feature names mapped to dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndex {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl FeatureIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        FeatureIndex { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn insert(&mut self, name: &str) -> usize {
        if let Some(i) = self.get(name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.to_string(), i);
        self.names.push(name.to_string());
        i
    }

    /// Indexed vector; unknown names are added when `grow` is set and
    /// dropped otherwise.
    pub fn vectorize(&mut self, features: &[(String, f64)], grow: bool) -> FeatureVector {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for (name, value) in features {
            let idx = if grow { Some(self.insert(name)) } else { self.get(name) };
            if let Some(i) = idx {
                *out.entry(i).or_default() += value;
            }
        }
        FeatureVector(out.into_iter().collect())
    }

    /// Read-only variant of [`FeatureIndex::vectorize`].
    pub fn lookup(&self, features: &[(String, f64)]) -> FeatureVector {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for (name, value) in features {
            if let Some(i) = self.get(name) {
                *out.entry(i).or_default() += value;
            }
        }
        FeatureVector(out.into_iter().collect())
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        *self = Self::from_names(std::mem::take(&mut self.names));
    }
}

/// Sparse `(index, value)` pairs sorted by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector(pub Vec<(usize, f64)>);

impl FeatureVector {
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| w[i] * v).sum()
    }

    /// `acc += scale * self`.
    pub fn add_to(&self, acc: &mut [f64], scale: f64) {
        for &(i, v) in &self.0 {
            acc[i] += scale * v;
        }
    }
}

/// Observation features of token `i` (0-based) for the sequence labeler.
pub fn token_features(doc: &AdDocument, i: usize) -> Vec<String> {
    let tok = &doc.tokens[i];
    let lower = tok.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let prefix = |k: usize| chars.iter().take(k).collect::<String>();
    let suffix = |k: usize| chars[chars.len().saturating_sub(k)..].iter().collect::<String>();
    let mut out = vec![
        "bias".to_string(),
        format!("w={tok}"),
        format!("lw={lower}"),
        format!("p2={}", prefix(2)),
        format!("p3={}", prefix(3)),
        format!("s2={}", suffix(2)),
        format!("s3={}", suffix(3)),
    ];
    if tok.chars().all(|c| c.is_ascii_digit()) {
        out.push("digit".into());
    }
    let prev = if i == 0 { "<s>" } else { doc.tokens[i - 1].as_str() };
    let next = doc.tokens.get(i + 1).map_or("</s>", String::as_str);
    out.push(format!("pw={prev}"));
    out.push(format!("nw={next}"));
    out
}

/// An entity candidate of the pipeline: one typed mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub mention: EntityMention,
    pub entity_type: EntityType,
}

/// Token-distance bucket name.
pub fn distance_bucket(d: usize) -> &'static str {
    match d {
        0 => "0",
        1 => "1",
        2 => "2",
        3 => "3",
        4..=6 => "4-6",
        7..=10 => "7-10",
        11..=20 => "11-20",
        _ => "21+",
    }
}

/// Features of the candidate edge `parent -> child`; `None` is the root.
/// `candidates` supplies the types of entities found between the two.
pub fn extract_edge_features(
    doc: &AdDocument,
    candidates: &[Candidate],
    parent: Option<usize>,
    child: usize,
) -> Vec<(String, f64)> {
    let c = &candidates[child];
    let ctok = doc.token(c.mention.main_token).to_lowercase();
    let ctype = c.entity_type.as_str();
    let mut out: Vec<(String, f64)> = vec![
        ("bias".into(), 1.0),
        (format!("ctok={ctok}"), 1.0),
        (format!("ctype={ctype}"), 1.0),
    ];
    let Some(p) = parent else {
        out.push(("ptype=ROOT".into(), 1.0));
        out.push((format!("pair=ROOT>{ctype}"), 1.0));
        out.push((format!("root_ctok={ctok}"), 1.0));
        let before = candidates
            .iter()
            .filter(|o| o.mention.start < c.mention.start)
            .count();
        out.push((format!("root_first={}", before == 0), 1.0));
        return out;
    };
    let pc = &candidates[p];
    let ptok = doc.token(pc.mention.main_token).to_lowercase();
    let ptype = pc.entity_type.as_str();
    let parent_first = pc.mention.start < c.mention.start;
    let (lo, hi) = if parent_first {
        (pc.mention.end, c.mention.start)
    } else {
        (c.mention.end, pc.mention.start)
    };
    let between = hi.saturating_sub(lo);
    let order = if parent_first { "parent-first" } else { "child-first" };
    let dist = distance_bucket(between);
    out.push((format!("ptok={ptok}"), 1.0));
    out.push((format!("ptype={ptype}"), 1.0));
    out.push((format!("pair={ptype}>{ctype}"), 1.0));
    out.push((format!("tokpair={ptok}>{ctok}"), 1.0));
    out.push((format!("order={order}"), 1.0));
    out.push((format!("dist={dist}"), 1.0));
    out.push((format!("pair_order={ptype}>{ctype}|{order}"), 1.0));
    out.push((format!("pair_dist={ptype}>{ctype}|{dist}"), 1.0));
    out.push(("between_count".into(), between as f64 / 10.0));
    for t in lo..hi {
        out.push((format!("btw={}", doc.token(t).to_lowercase()), 1.0));
    }
    for o in candidates {
        if o.mention.start >= lo && o.mention.end <= hi {
            out.push((format!("btw_type={}", o.entity_type.as_str()), 1.0));
            if o.entity_type == pc.entity_type {
                out.push(("btw_parent_type".into(), 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(start: usize, end: usize, t: EntityType) -> Candidate {
        Candidate {
            mention: EntityMention::new(start, end),
            entity_type: t,
        }
    }

    fn names(f: &[(String, f64)]) -> Vec<&str> {
        f.iter().map(|(n, _)| n.as_str()).collect()
    }

    #[test]
    fn apartment_bedrooms_template() {
        let doc = AdDocument::from_text("d", "large apartment with 2 bedrooms").unwrap();
        let cands = [cand(1, 3, EntityType::Property), cand(5, 6, EntityType::Space)];
        let f = extract_edge_features(&doc, &cands, Some(0), 1);
        let n = names(&f);
        for expected in [
            "ptype=property",
            "ctype=space",
            "pair=property>space",
            "dist=2",
            "order=parent-first",
            "ptok=apartment",
            "ctok=bedrooms",
            "btw=with",
            "btw=2",
        ] {
            assert!(n.contains(&expected), "missing {expected}");
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let doc = AdDocument::from_text("d", "a kitchen and a hall").unwrap();
        let cands = [cand(2, 3, EntityType::Space), cand(5, 6, EntityType::Space)];
        let mut index = FeatureIndex::new();
        let a = index.vectorize(&extract_edge_features(&doc, &cands, Some(1), 0), true);
        let b = index.vectorize(&extract_edge_features(&doc, &cands, Some(1), 0), true);
        assert_eq!(a, b);
    }

    #[test]
    fn adjacent_entities_have_empty_bag() {
        let doc = AdDocument::from_text("d", "garage workbench").unwrap();
        let cands = [cand(1, 2, EntityType::ExtraBuilding), cand(2, 3, EntityType::Subspace)];
        let f = extract_edge_features(&doc, &cands, Some(0), 1);
        assert!(names(&f).contains(&"dist=0"));
        assert!(!names(&f).iter().any(|n| n.starts_with("btw=")));
    }

    #[test]
    fn token_feature_template() {
        let doc = AdDocument::from_text("d", "3 Bedrooms").unwrap();
        let f = token_features(&doc, 0);
        assert!(f.contains(&"digit".to_string()));
        assert!(f.contains(&"pw=<s>".to_string()));
        assert!(f.contains(&"nw=Bedrooms".to_string()));
        let g = token_features(&doc, 1);
        assert!(g.contains(&"lw=bedrooms".to_string()));
        assert!(g.contains(&"s3=oms".to_string()));
        assert!(g.contains(&"p2=be".to_string()));
    }
}
