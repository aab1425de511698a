use std::fmt;
use std::str::FromStr;

use super::{AdDocument, EntityMention, EntityType, PropertyTree};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BioTag {
    Outside,
    Begin(EntityType),
    Inside(EntityType),
}

impl BioTag {
    /// Number of tags over the six entity types.
    pub const COUNT: usize = 1 + 2 * EntityType::TYPED.len();

    /// Dense index: `O` is 0, then `B-T`, `I-T` pairs in type order.
    pub fn index(self) -> usize {
        match self {
            BioTag::Outside => 0,
            BioTag::Begin(t) => 1 + 2 * t.typed_index().expect("typed"),
            BioTag::Inside(t) => 2 + 2 * t.typed_index().expect("typed"),
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        if idx == 0 {
            return Some(BioTag::Outside);
        }
        let t = *EntityType::TYPED.get((idx - 1) / 2)?;
        Some(if idx % 2 == 1 {
            BioTag::Begin(t)
        } else {
            BioTag::Inside(t)
        })
    }

    pub fn entity_type(self) -> Option<EntityType> {
        match self {
            BioTag::Outside => None,
            BioTag::Begin(t) | BioTag::Inside(t) => Some(t),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::Outside => f.write_str("O"),
            BioTag::Begin(t) => write!(f, "B-{}", t.tag_name()),
            BioTag::Inside(t) => write!(f, "I-{}", t.tag_name()),
        }
    }
}

impl FromStr for BioTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(BioTag::Outside);
        }
        let bad = || Error::InvalidDocument(format!("bad BIO tag {s:?}"));
        let (prefix, name) = s.split_once('-').ok_or_else(bad)?;
        let t: EntityType = name.parse().map_err(|_| bad())?;
        if t == EntityType::Untyped {
            return Err(bad());
        }
        match prefix {
            "B" => Ok(BioTag::Begin(t)),
            "I" => Ok(BioTag::Inside(t)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BioSequence(pub Vec<BioTag>);

impl BioSequence {
    pub fn tags(&self) -> &[BioTag] {
        &self.0
    }

    /// `I-T` only after `B-T` or `I-T`.
    pub fn is_valid(&self) -> bool {
        let mut prev = BioTag::Outside;
        for &tag in &self.0 {
            if let BioTag::Inside(t) = tag {
                if prev.entity_type() != Some(t) {
                    return false;
                }
            }
            prev = tag;
        }
        true
    }
}

impl fmt::Display for BioSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

/// `B-T` on the first token of every mention, `I-T` on the rest, `O`
/// elsewhere.
pub fn bio_encode(doc: &AdDocument, tree: &PropertyTree) -> Result<BioSequence> {
    tree.validate(doc.len())?;
    let mut tags = vec![BioTag::Outside; doc.len()];
    for e in &tree.entities {
        if e.entity_type == EntityType::Untyped {
            return Err(Error::InvalidTree(format!("entity {:?} has no type", e.id)));
        }
        for m in &e.mentions {
            tags[m.start - 1] = BioTag::Begin(e.entity_type);
            for t in m.start + 1..m.end {
                tags[t - 1] = BioTag::Inside(e.entity_type);
            }
        }
    }
    Ok(BioSequence(tags))
}

/// Maximal `B-T (I-T)*` runs as typed mentions. A stray `I-T` opens a new
/// mention.
pub fn mentions_from_bio(tags: &BioSequence) -> Vec<(EntityMention, EntityType)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, EntityType)> = None;
    let close = |open: &mut Option<(usize, EntityType)>, end: usize, out: &mut Vec<_>| {
        if let Some((start, t)) = open.take() {
            out.push((EntityMention::new(start, end), t));
        }
    };
    for (i, &tag) in tags.0.iter().enumerate() {
        let pos = i + 1;
        match tag {
            BioTag::Outside => close(&mut open, pos, &mut out),
            BioTag::Begin(t) => {
                close(&mut open, pos, &mut out);
                open = Some((pos, t));
            }
            BioTag::Inside(t) => match open {
                Some((_, cur)) if cur == t => {}
                _ => {
                    close(&mut open, pos, &mut out);
                    open = Some((pos, t));
                }
            },
        }
    }
    close(&mut open, tags.0.len() + 1, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entity;

    fn typed(id: &str, t: EntityType, spans: &[(usize, usize)]) -> Entity {
        Entity {
            id: id.into(),
            entity_type: t,
            mentions: spans.iter().map(|&(s, e)| EntityMention::new(s, e)).collect(),
            parent: None,
        }
    }

    #[test]
    fn large_apartment_tags() {
        let doc = AdDocument::from_text("d", "large apartment").unwrap();
        let tree = PropertyTree::new(vec![typed("a", EntityType::Property, &[(1, 3)])]);
        let bio = bio_encode(&doc, &tree).unwrap();
        assert_eq!(bio.to_string(), "B-PROPERTY I-PROPERTY");
        assert!(bio.is_valid());
    }

    #[test]
    fn no_mentions_all_outside() {
        let doc = AdDocument::from_text("d", "for sale now").unwrap();
        let bio = bio_encode(&doc, &PropertyTree::default()).unwrap();
        assert_eq!(bio.to_string(), "O O O");
    }

    #[test]
    fn adjacent_same_type_mentions_restart_with_begin() {
        let doc = AdDocument::from_text("d", "kitchen bathroom").unwrap();
        let tree = PropertyTree::new(vec![
            typed("a", EntityType::Space, &[(1, 2)]),
            typed("b", EntityType::Space, &[(2, 3)]),
        ]);
        let bio = bio_encode(&doc, &tree).unwrap();
        assert_eq!(bio.to_string(), "B-SPACE B-SPACE");
        let spans = mentions_from_bio(&bio);
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn stray_inside_opens_mention() {
        let tags: BioSequence = BioSequence(
            ["O", "I-SPACE", "I-SPACE", "I-FIELD", "B-FLOOR"]
                .iter()
                .map(|s| s.parse().unwrap())
                .collect(),
        );
        assert!(!tags.is_valid());
        let spans: Vec<_> = mentions_from_bio(&tags)
            .into_iter()
            .map(|(m, t)| (m.start, m.end, t))
            .collect();
        assert_eq!(
            spans,
            vec![
                (2, 4, EntityType::Space),
                (4, 5, EntityType::Field),
                (5, 6, EntityType::Floor)
            ]
        );
    }

    #[test]
    fn tag_index_roundtrip() {
        for idx in 0..BioTag::COUNT {
            let tag = BioTag::from_index(idx).unwrap();
            assert_eq!(tag.index(), idx);
            assert_eq!(tag.to_string().parse::<BioTag>().unwrap(), tag);
        }
        assert!(BioTag::from_index(BioTag::COUNT).is_none());
    }
}
