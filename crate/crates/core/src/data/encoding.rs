use std::collections::HashMap;

use super::{AdDocument, Entity, EntityMention, EntityType, PropertyTree, RelationLabel, TokenHeadAssignment};
use crate::error::{Error, Result};

/// Casts a property tree to one `(head, label)` pair per token.
///
/// Inside a mention every token except the main token is a `segment` of the
/// main token. The main token of an entity's first mention is `part-of` the
/// main token of its parent's first mention (or of the root). Main tokens of
/// later mentions are `equivalent` to the first mention's main token. All
/// other tokens `skip` to themselves.
pub fn encode_tree_to_heads(doc: &AdDocument, tree: &PropertyTree) -> Result<TokenHeadAssignment> {
    tree.validate(doc.len())?;
    let mut assignment = TokenHeadAssignment::all_skip(doc.len());

    let first_main: HashMap<&str, usize> = tree
        .entities
        .iter()
        .map(|e| (e.id.as_str(), first_mention(e).main_token))
        .collect();

    for entity in &tree.entities {
        let main = first_mention(entity);
        for m in &entity.mentions {
            for t in m.start..m.end {
                if t != m.main_token {
                    assignment.set(t, m.main_token, RelationLabel::Segment);
                }
            }
            if m == main {
                let head = entity
                    .parent
                    .as_deref()
                    .map(|p| first_main[p])
                    .unwrap_or(0);
                assignment.set(m.main_token, head, RelationLabel::PartOf);
            } else {
                assignment.set(m.main_token, main.main_token, RelationLabel::Equivalent);
            }
        }
    }
    Ok(assignment)
}

fn first_mention(e: &Entity) -> &EntityMention {
    e.mentions.iter().min().expect("validated non-empty")
}

/// Rebuilds the (untyped) property tree from a token-level assignment.
///
/// Tokens reached through `segment` chains form a mention with the chain's
/// end as main token. `equivalent` mentions join the entity of the mention
/// they point to; `part-of` mentions start a new entity. Equivalent edges
/// pointing at the root are read as `part-of`.
pub fn decode_heads_to_tree(doc: &AdDocument, assignment: &TokenHeadAssignment) -> Result<PropertyTree> {
    let n = doc.len();
    if assignment.len() != n {
        return Err(Error::InvalidAssignment(format!(
            "{} assignments for {} tokens",
            assignment.len(),
            n
        )));
    }
    use RelationLabel::*;
    let is_skip = |i: usize| assignment.label(i) == Skip;

    for (i, h, l) in assignment.edges() {
        if l != Skip && h == i {
            return Err(Error::InvalidAssignment(format!(
                "token {i} heads itself with label {l}"
            )));
        }
    }

    // Resolve each segment token to the main token its chain ends at.
    let mut owner = vec![0usize; n + 1];
    for i in 1..=n {
        if is_skip(i) {
            continue;
        }
        let mut cur = i;
        let mut path = vec![i];
        while assignment.label(cur) == Segment {
            let h = assignment.head(cur);
            if h == 0 {
                return Err(Error::InvalidAssignment(format!(
                    "segment edge from token {cur} to the root"
                )));
            }
            if is_skip(h) {
                return Err(Error::InvalidAssignment(format!(
                    "segment edge from token {cur} to skipped token {h}"
                )));
            }
            if path.contains(&h) {
                return Err(Error::Cycle {
                    kind: "segment tokens",
                    members: path.iter().map(|t| doc.token(*t).to_string()).collect(),
                });
            }
            path.push(h);
            cur = h;
        }
        owner[i] = cur;
    }

    // Mentions keyed by main token, in text order.
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 1..=n {
        if owner[i] != 0 {
            members.entry(owner[i]).or_default().push(i);
        }
    }
    let mut mains: Vec<usize> = members.keys().copied().collect();
    mains.sort_unstable();
    let mut mentions: HashMap<usize, EntityMention> = HashMap::new();
    for &m in &mains {
        let tokens = &members[&m];
        let start = *tokens.iter().min().expect("contains main");
        let end = *tokens.iter().max().expect("contains main") + 1;
        if tokens.len() != end - start {
            return Err(Error::InvalidAssignment(format!(
                "mention headed by token {m} is not contiguous"
            )));
        }
        mentions.insert(m, EntityMention::with_main(start, end, m));
    }
    let mut sorted: Vec<&EntityMention> = mentions.values().collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(Error::OverlappingMentions(
                pair[0].start,
                pair[0].end,
                pair[1].start,
                pair[1].end,
            ));
        }
    }

    // Mention main token -> entity main token.
    let resolve_target = |h: usize, from: usize| -> Result<usize> {
        if owner[h] == 0 {
            return Err(Error::InvalidAssignment(format!(
                "token {from} attaches to skipped token {h}"
            )));
        }
        Ok(owner[h])
    };
    let is_entity_main =
        |m: usize| matches!(assignment.label(m), PartOf) || assignment.head(m) == 0;
    let mut entity_of: HashMap<usize, usize> = HashMap::new();
    for &m in &mains {
        let mut cur = m;
        let mut path = vec![m];
        while !is_entity_main(cur) {
            let next = resolve_target(assignment.head(cur), cur)?;
            if path.contains(&next) {
                return Err(Error::Cycle {
                    kind: "equivalent mentions",
                    members: path.iter().map(|t| doc.token(*t).to_string()).collect(),
                });
            }
            path.push(next);
            cur = next;
        }
        entity_of.insert(m, cur);
    }

    let mut entity_mains: Vec<usize> = mains.iter().copied().filter(|&m| entity_of[&m] == m).collect();
    entity_mains.sort_by_key(|m| mentions[m].start);
    let ids: HashMap<usize, String> = entity_mains
        .iter()
        .enumerate()
        .map(|(k, &m)| (m, format!("e{}", k + 1)))
        .collect();

    let mut parent_of: HashMap<usize, Option<usize>> = HashMap::new();
    for &m in &entity_mains {
        let h = assignment.head(m);
        let parent = if h == 0 {
            None
        } else {
            Some(entity_of[&resolve_target(h, m)?])
        };
        parent_of.insert(m, parent);
    }
    for &m in &entity_mains {
        let mut seen = vec![m];
        let mut cur = m;
        while let Some(p) = parent_of[&cur] {
            if seen.contains(&p) {
                return Err(Error::Cycle {
                    kind: "part-of entities",
                    members: seen.iter().map(|t| doc.token(*t).to_string()).collect(),
                });
            }
            seen.push(p);
            cur = p;
        }
    }

    let entities = entity_mains
        .iter()
        .map(|&m| {
            let mut ms: Vec<EntityMention> = mains
                .iter()
                .filter(|&&x| entity_of[&x] == m && x != m)
                .map(|x| mentions[x])
                .collect();
            ms.sort();
            ms.insert(0, mentions[&m]);
            Entity {
                id: ids[&m].clone(),
                entity_type: EntityType::Untyped,
                mentions: ms,
                parent: parent_of[&m].map(|p| ids[&p].clone()),
            }
        })
        .collect();
    Ok(PropertyTree::new(entities))
}

/// Rewrites the local defects a predicted assignment may carry so that it
/// decodes: structural self-loops become skips, edges into skipped tokens
/// and segment edges to the root become part-of edges to the root, and a
/// segment edge that would leave a gap inside its mention becomes part-of.
pub fn repair_assignment(assignment: &TokenHeadAssignment) -> TokenHeadAssignment {
    use RelationLabel::*;
    let n = assignment.len();
    let mut a = assignment.clone();
    for i in 1..=n {
        if a.label(i) == Skip || a.head(i) == i {
            a.set(i, i, Skip);
        }
    }
    for i in 1..=n {
        let (h, l) = (a.head(i), a.label(i));
        if l == Skip {
            continue;
        }
        let into_skip = h != 0 && a.label(h) == Skip;
        if into_skip || (h == 0 && l == Segment) {
            a.set(i, 0, PartOf);
        }
    }
    // Break segment chains that loop or leave gaps, until stable.
    loop {
        let owner = segment_owners(&a);
        let mut changed = false;
        for i in 1..=n {
            if a.label(i) != Segment {
                continue;
            }
            let h = a.head(i);
            let looped = owner[i].is_none();
            let (lo, hi) = (i.min(h), i.max(h));
            let gap = !looped && (lo..=hi).any(|t| owner[t] != owner[i]);
            if looped || gap {
                a.set(i, h, PartOf);
                changed = true;
                break;
            }
        }
        if !changed {
            return a;
        }
    }
}

/// Main token reached by each token's segment chain; `None` for skipped
/// tokens and chains that loop.
fn segment_owners(a: &TokenHeadAssignment) -> Vec<Option<usize>> {
    let n = a.len();
    let mut owner = vec![None; n + 1];
    for i in 1..=n {
        if a.label(i) == RelationLabel::Skip {
            continue;
        }
        let mut cur = i;
        let mut steps = 0;
        while a.label(cur) == RelationLabel::Segment && steps <= n {
            cur = a.head(cur);
            steps += 1;
        }
        if steps <= n {
            owner[i] = Some(cur);
        }
    }
    owner
}

/// [`decode_heads_to_tree`] after [`repair_assignment`].
pub fn decode_heads_to_tree_lenient(doc: &AdDocument, assignment: &TokenHeadAssignment) -> Result<PropertyTree> {
    if assignment.len() != doc.len() {
        return decode_heads_to_tree(doc, assignment);
    }
    decode_heads_to_tree(doc, &repair_assignment(assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::example_ad;

    fn doc(text: &str) -> AdDocument {
        AdDocument::from_text("t", text).unwrap()
    }

    fn entity(id: &str, mentions: &[(usize, usize)], parent: Option<&str>) -> Entity {
        Entity {
            id: id.into(),
            entity_type: EntityType::Space,
            mentions: mentions.iter().map(|&(s, e)| EntityMention::new(s, e)).collect(),
            parent: parent.map(str::to_owned),
        }
    }

    #[test]
    fn example_ad_encoding() {
        let (d, tree) = example_ad();
        let a = encode_tree_to_heads(&d, &tree).unwrap();
        let pos = |w: &str| d.tokens.iter().position(|t| t == w).unwrap() + 1;
        let bedrooms = pos("bedrooms");
        let apartment = pos("apartment");
        assert_eq!((a.head(pos("3")), a.label(pos("3"))), (bedrooms, RelationLabel::Segment));
        assert_eq!(
            (a.head(pos("spacious")), a.label(pos("spacious"))),
            (bedrooms, RelationLabel::Segment)
        );
        assert_eq!((a.head(bedrooms), a.label(bedrooms)), (apartment, RelationLabel::PartOf));
        assert_eq!(
            (a.head(pos("home")), a.label(pos("home"))),
            (apartment, RelationLabel::Equivalent)
        );
        let includes = pos("includes");
        assert_eq!((a.head(includes), a.label(includes)), (includes, RelationLabel::Skip));
        assert_eq!((a.head(pos("property")), a.label(pos("property"))), (0, RelationLabel::PartOf));
        a.validate_skip_rule().unwrap();
    }

    #[test]
    fn example_ad_decoding() {
        let (d, tree) = example_ad();
        let a = encode_tree_to_heads(&d, &tree).unwrap();
        let back = decode_heads_to_tree(&d, &a).unwrap();
        assert_eq!(back.entities.len(), 8);
        assert_eq!(back.skeleton(), tree.skeleton());
        let root_kids: Vec<_> = back.children_of(None).collect();
        assert_eq!(root_kids.len(), 1);
        let property = root_kids[0];
        let mut kids: Vec<String> = back
            .children_of(Some(&property.id))
            .map(|e| d.text(e.main_mention().start, e.main_mention().end))
            .collect();
        kids.sort();
        assert_eq!(kids, vec!["garage", "large apartment"]);
        assert!(back.entities.iter().all(|e| e.entity_type == EntityType::Untyped));
    }

    #[test]
    fn single_mention_attaches_to_root() {
        let d = doc("a nice property");
        let tree = PropertyTree::new(vec![entity("p", &[(3, 4)], None)]);
        let a = encode_tree_to_heads(&d, &tree).unwrap();
        assert_eq!(a.heads(), &[1, 2, 0]);
        assert_eq!(
            a.labels(),
            &[RelationLabel::Skip, RelationLabel::Skip, RelationLabel::PartOf]
        );
    }

    #[test]
    fn all_skip_decodes_to_empty_tree() {
        let d = doc("nothing to see");
        let tree = decode_heads_to_tree(&d, &TokenHeadAssignment::all_skip(3)).unwrap();
        assert!(tree.is_empty());
    }

    #[test]
    fn overlapping_mentions_rejected() {
        let d = doc("a b c d");
        let tree = PropertyTree::new(vec![
            entity("x", &[(1, 3)], None),
            entity("y", &[(2, 4)], Some("x")),
        ]);
        assert!(matches!(
            encode_tree_to_heads(&d, &tree),
            Err(Error::OverlappingMentions(..))
        ));
    }

    #[test]
    fn parent_cycle_rejected() {
        let d = doc("a b c d");
        let tree = PropertyTree::new(vec![
            entity("x", &[(1, 2)], Some("y")),
            entity("y", &[(2, 3)], Some("x")),
        ]);
        assert!(matches!(encode_tree_to_heads(&d, &tree), Err(Error::Cycle { .. })));
    }

    #[test]
    fn cyclic_assignment_rejected_with_report() {
        use RelationLabel::*;
        let d = doc("kitchen bathroom");
        let a = TokenHeadAssignment::new(vec![2, 1], vec![PartOf, PartOf]).unwrap();
        match decode_heads_to_tree(&d, &a) {
            Err(Error::Cycle { members, .. }) => {
                assert!(members.contains(&"kitchen".to_string()));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn self_head_with_structural_label_rejected() {
        use RelationLabel::*;
        let d = doc("kitchen");
        let a = TokenHeadAssignment::new(vec![1], vec![PartOf]).unwrap();
        assert!(decode_heads_to_tree(&d, &a).is_err());
    }

    #[test]
    fn lenient_decode_repairs_local_defects() {
        use RelationLabel::*;
        let d = doc("big garden with shed");
        // Segment to the root, and a segment edge jumping over a skip.
        let a = TokenHeadAssignment::new(vec![0, 0, 3, 2], vec![Segment, PartOf, Skip, Segment]).unwrap();
        assert!(decode_heads_to_tree(&d, &a).is_err());
        let repaired = repair_assignment(&a);
        assert_eq!(repaired.label(1), PartOf);
        assert_eq!(repaired.label(4), PartOf);
        let tree = decode_heads_to_tree_lenient(&d, &a).unwrap();
        assert_eq!(tree.entities.len(), 3);
    }

    #[test]
    fn lenient_decode_keeps_valid_assignments() {
        let (d, tree) = example_ad();
        let a = encode_tree_to_heads(&d, &tree).unwrap();
        assert_eq!(repair_assignment(&a), a);
        assert_eq!(decode_heads_to_tree_lenient(&d, &a).unwrap().skeleton(), tree.skeleton());
    }
}
