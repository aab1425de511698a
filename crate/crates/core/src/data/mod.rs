//! Documents, property trees and their token-level encodings.

mod bio;
mod corpus;
mod encoding;
mod stats;
pub mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bio::{bio_encode, mentions_from_bio, BioSequence, BioTag};
pub use corpus::{
    document_json, load_corpus, load_documents, read_corpus, read_documents, split_corpus, write_corpus,
    ColumnImporter, CorpusImporter, CorpusSplit, JsonlImporter, LabeledDocument,
};
pub use encoding::{decode_heads_to_tree, decode_heads_to_tree_lenient, encode_tree_to_heads, repair_assignment};
pub use stats::{crossing_arcs, has_nonprojective_part_of, NonProjectivity};

/// A pre-tokenized advertisement. Position 0 is the implicit root and is not
/// stored; `tokens[0]` is token 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdDocument {
    pub id: String,
    pub tokens: Vec<String>,
}

impl AdDocument {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        let doc = AdDocument {
            id: id.into(),
            tokens,
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Splits `text` on whitespace.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        Self::new(id, text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidDocument(format!("{}: no tokens", self.id)));
        }
        if let Some(t) = self
            .tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidDocument(format!(
                "{}: token {t:?} is empty or contains whitespace",
                self.id
            )));
        }
        Ok(())
    }

    /// Number of real tokens `N`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token at 1-based position `i`.
    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i - 1]
    }

    pub fn text(&self, start: usize, end: usize) -> String {
        self.tokens[start - 1..end - 1].join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "property")]
    Property,
    #[serde(rename = "floor")]
    Floor,
    #[serde(rename = "space")]
    Space,
    #[serde(rename = "subspace")]
    Subspace,
    #[serde(rename = "field")]
    Field,
    #[serde(rename = "extra building")]
    ExtraBuilding,
    /// Produced when decoding the joint encoding, which carries no types.
    #[serde(rename = "untyped")]
    Untyped,
}

impl EntityType {
    pub const TYPED: [EntityType; 6] = [
        EntityType::Property,
        EntityType::Floor,
        EntityType::Space,
        EntityType::Subspace,
        EntityType::Field,
        EntityType::ExtraBuilding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Property => "property",
            EntityType::Floor => "floor",
            EntityType::Space => "space",
            EntityType::Subspace => "subspace",
            EntityType::Field => "field",
            EntityType::ExtraBuilding => "extra building",
            EntityType::Untyped => "untyped",
        }
    }

    /// Upper-case name used inside BIO tags.
    pub fn tag_name(self) -> &'static str {
        match self {
            EntityType::Property => "PROPERTY",
            EntityType::Floor => "FLOOR",
            EntityType::Space => "SPACE",
            EntityType::Subspace => "SUBSPACE",
            EntityType::Field => "FIELD",
            EntityType::ExtraBuilding => "EXTRA_BUILDING",
            EntityType::Untyped => "UNTYPED",
        }
    }

    pub fn typed_index(self) -> Option<usize> {
        Self::TYPED.iter().position(|&t| t == self)
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('_', " ");
        [Self::TYPED.as_slice(), &[EntityType::Untyped]]
            .concat()
            .into_iter()
            .find(|t| t.as_str() == lower)
            .ok_or_else(|| Error::InvalidTree(format!("unknown entity type {s:?}")))
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One or more adjacent tokens referring to an entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityMention {
    /// First token, 1-based.
    pub start: usize,
    /// One past the last token.
    pub end: usize,
    /// Token carrying the mention's external edges.
    pub main_token: usize,
}

impl EntityMention {
    /// Mention whose main token is its last token.
    pub fn new(start: usize, end: usize) -> Self {
        EntityMention {
            start,
            end,
            main_token: end.saturating_sub(1),
        }
    }

    pub fn with_main(start: usize, end: usize, main_token: usize) -> Self {
        EntityMention {
            start,
            end,
            main_token,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: String,
    pub entity_type: EntityType,
    /// In order of appearance; the first one is the main mention.
    pub mentions: Vec<EntityMention>,
    /// `None` when attached to the dummy root.
    pub parent: Option<String>,
}

impl Entity {
    pub fn main_mention(&self) -> &EntityMention {
        &self.mentions[0]
    }
}

/// Entities linked by part-of edges under the dummy root.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropertyTree {
    pub entities: Vec<Entity>,
}

/// Canonical, id-free view of a tree: for every entity its mention spans and
/// the span of its parent's main mention.
pub type TreeSkeleton = BTreeSet<(Vec<(usize, usize)>, Option<(usize, usize)>)>;

impl PropertyTree {
    pub fn new(entities: Vec<Entity>) -> Self {
        PropertyTree { entities }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn children_of<'a>(&'a self, parent: Option<&'a str>) -> impl Iterator<Item = &'a Entity> {
        self.entities
            .iter()
            .filter(move |e| e.parent.as_deref() == parent)
    }

    /// Checks spans against a document of `n_tokens` tokens, mention
    /// overlap, id uniqueness and that parent links form a tree under the
    /// root.
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, e) in self.entities.iter().enumerate() {
            if index.insert(e.id.as_str(), i).is_some() {
                return Err(Error::InvalidTree(format!("duplicate entity id {:?}", e.id)));
            }
            if e.mentions.is_empty() {
                return Err(Error::InvalidTree(format!("entity {:?} has no mentions", e.id)));
            }
        }
        let mut all: Vec<EntityMention> = Vec::new();
        for e in &self.entities {
            for m in &e.mentions {
                if m.start < 1 || m.start >= m.end || m.end > n_tokens + 1 {
                    return Err(Error::InvalidTree(format!(
                        "mention [{}, {}) of {:?} outside tokens 1..={n_tokens}",
                        m.start, m.end, e.id
                    )));
                }
                if !m.contains(m.main_token) {
                    return Err(Error::InvalidTree(format!(
                        "main token {} outside mention [{}, {})",
                        m.main_token, m.start, m.end
                    )));
                }
                all.push(*m);
            }
        }
        all.sort();
        for pair in all.windows(2) {
            if pair[0].overlaps(&pair[1]) {
                return Err(Error::OverlappingMentions(
                    pair[0].start,
                    pair[0].end,
                    pair[1].start,
                    pair[1].end,
                ));
            }
        }
        for e in &self.entities {
            if let Some(p) = &e.parent {
                if !index.contains_key(p.as_str()) {
                    return Err(Error::InvalidTree(format!(
                        "entity {:?} has unknown parent {p:?}",
                        e.id
                    )));
                }
            }
        }
        // Every entity must reach the root without revisiting an entity.
        for start in &self.entities {
            let mut seen = vec![start.id.as_str()];
            let mut cur = start;
            while let Some(p) = &cur.parent {
                if seen.contains(&p.as_str()) {
                    return Err(Error::Cycle {
                        kind: "entities",
                        members: seen.iter().map(|s| s.to_string()).collect(),
                    });
                }
                seen.push(p.as_str());
                cur = &self.entities[index[p.as_str()]];
            }
        }
        Ok(())
    }

    pub fn skeleton(&self) -> TreeSkeleton {
        let main_span = |id: &str| {
            self.entity(id).map(|e| {
                let m = e.mentions.iter().min().expect("non-empty");
                m.span()
            })
        };
        self.entities
            .iter()
            .map(|e| {
                let mut spans: Vec<(usize, usize)> = e.mentions.iter().map(|m| m.span()).collect();
                spans.sort();
                (spans, e.parent.as_deref().and_then(main_span))
            })
            .collect()
    }

    /// Indented rendering in the style `entity | mention='a', 'b'`.
    pub fn render(&self, doc: &AdDocument) -> String {
        let mut out = String::from("ROOT\n");
        self.render_children(doc, None, 1, &mut out);
        out
    }

    fn render_children(&self, doc: &AdDocument, parent: Option<&str>, depth: usize, out: &mut String) {
        for e in self.children_of(parent) {
            let mentions: Vec<String> = e
                .mentions
                .iter()
                .map(|m| format!("'{}'", doc.text(m.start, m.end)))
                .collect();
            out.push_str(&format!(
                "{}{} [{}] | mention={}\n",
                "  ".repeat(depth),
                doc.text(e.main_mention().start, e.main_mention().end),
                e.entity_type,
                mentions.join(", ")
            ));
            self.render_children(doc, Some(&e.id), depth + 1, out);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationLabel {
    #[serde(rename = "part-of")]
    PartOf,
    #[serde(rename = "segment")]
    Segment,
    #[serde(rename = "equivalent")]
    Equivalent,
    #[serde(rename = "skip")]
    Skip,
}

impl RelationLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [RelationLabel; 4] = [
        RelationLabel::PartOf,
        RelationLabel::Segment,
        RelationLabel::Equivalent,
        RelationLabel::Skip,
    ];
    /// Labels that can appear on tree edges.
    pub const STRUCTURAL: [RelationLabel; 3] = [
        RelationLabel::PartOf,
        RelationLabel::Segment,
        RelationLabel::Equivalent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelationLabel::PartOf => "part-of",
            RelationLabel::Segment => "segment",
            RelationLabel::Equivalent => "equivalent",
            RelationLabel::Skip => "skip",
        }
    }
}

impl FromStr for RelationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidAssignment(format!("unknown relation label {s:?}")))
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-token `(head, label)` pairs for tokens `1..=N`; heads range over
/// `0..=N` with 0 the dummy root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHeadAssignment {
    heads: Vec<usize>,
    labels: Vec<RelationLabel>,
}

impl TokenHeadAssignment {
    pub fn new(heads: Vec<usize>, labels: Vec<RelationLabel>) -> Result<Self> {
        if heads.len() != labels.len() || heads.is_empty() {
            return Err(Error::InvalidAssignment(format!(
                "{} heads for {} labels",
                heads.len(),
                labels.len()
            )));
        }
        let n = heads.len();
        if let Some(h) = heads.iter().find(|&&h| h > n) {
            return Err(Error::InvalidAssignment(format!(
                "head {h} outside 0..={n}"
            )));
        }
        Ok(TokenHeadAssignment { heads, labels })
    }

    /// Every token skips to itself.
    pub fn all_skip(n: usize) -> Self {
        TokenHeadAssignment {
            heads: (1..=n).collect(),
            labels: vec![RelationLabel::Skip; n],
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head of 1-based token `i`.
    pub fn head(&self, i: usize) -> usize {
        self.heads[i - 1]
    }

    pub fn label(&self, i: usize) -> RelationLabel {
        self.labels[i - 1]
    }

    pub fn set(&mut self, i: usize, head: usize, label: RelationLabel) {
        self.heads[i - 1] = head;
        self.labels[i - 1] = label;
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn labels(&self) -> &[RelationLabel] {
        &self.labels
    }

    /// `(dependent, head, label)` triples, dependents 1-based.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, RelationLabel)> + '_ {
        self.heads
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (&h, &l))| (i + 1, h, l))
    }

    /// Checks the invariant that a token skips exactly when it heads itself.
    pub fn validate_skip_rule(&self) -> Result<()> {
        for (i, h, l) in self.edges() {
            if (l == RelationLabel::Skip) != (h == i) {
                return Err(Error::InvalidAssignment(format!(
                    "token {i} has head {h} with label {l}"
                )));
            }
        }
        Ok(())
    }
}
