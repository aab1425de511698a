use super::{RelationLabel, TokenHeadAssignment};

/// Unordered pairs of non-skip arcs whose spans interleave when drawn above
/// the sentence. Arcs are `(head, dependent)`; root arcs start at 0.
pub fn crossing_arcs(a: &TokenHeadAssignment) -> Vec<((usize, usize), (usize, usize))> {
    let arcs: Vec<(usize, usize)> = a
        .edges()
        .filter(|&(_, _, l)| l != RelationLabel::Skip)
        .map(|(i, h, _)| (h, i))
        .collect();
    let mut out = Vec::new();
    for (x, &p) in arcs.iter().enumerate() {
        for &q in &arcs[x + 1..] {
            if crosses(p, q) {
                out.push((p, q));
            }
        }
    }
    out
}

fn crosses(p: (usize, usize), q: (usize, usize)) -> bool {
    let (a1, b1) = (p.0.min(p.1), p.0.max(p.1));
    let (a2, b2) = (q.0.min(q.1), q.0.max(q.1));
    (a1 < a2 && a2 < b1 && b1 < b2) || (a2 < a1 && a1 < b2 && b2 < b1)
}

fn arc_is_crossed(a: &TokenHeadAssignment, dep: usize) -> bool {
    let p = (a.head(dep), dep);
    a.edges()
        .filter(|&(i, _, l)| l != RelationLabel::Skip && i != dep)
        .any(|(i, h, _)| crosses(p, (h, i)))
}

/// True when some `part-of` arc (root arcs included) crosses another arc.
pub fn has_nonprojective_part_of(a: &TokenHeadAssignment) -> bool {
    a.edges()
        .any(|(i, _, l)| l == RelationLabel::PartOf && arc_is_crossed(a, i))
}

/// Counts over `part-of` and `equivalent` arcs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NonProjectivity {
    pub arcs: usize,
    pub nonprojective: usize,
}

impl NonProjectivity {
    pub fn of(a: &TokenHeadAssignment) -> Self {
        let mut out = NonProjectivity::default();
        for (i, _, l) in a.edges() {
            if matches!(l, RelationLabel::PartOf | RelationLabel::Equivalent) {
                out.arcs += 1;
                if arc_is_crossed(a, i) {
                    out.nonprojective += 1;
                }
            }
        }
        out
    }

    pub fn add(&mut self, other: NonProjectivity) {
        self.arcs += other.arcs;
        self.nonprojective += other.nonprojective;
    }

    /// Percentage of counted arcs that are non-projective.
    pub fn percentage(&self) -> f64 {
        if self.arcs == 0 {
            0.0
        } else {
            100.0 * self.nonprojective as f64 / self.arcs as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_tree_to_heads;
    use crate::data::synthetic::example_ad;
    use RelationLabel::*;

    #[test]
    fn nested_arcs_do_not_cross() {
        // 1 <- 2 <- 0, 3 -> 2
        let a = TokenHeadAssignment::new(vec![2, 0, 2], vec![Segment, PartOf, PartOf]).unwrap();
        assert!(crossing_arcs(&a).is_empty());
        assert!(!has_nonprojective_part_of(&a));
    }

    #[test]
    fn interleaved_arcs_cross() {
        // 1 -> 0, 2 -> 1, 3 -> 1, 4 -> 2 : (1,3) and (2,4) interleave
        let a = TokenHeadAssignment::new(vec![0, 1, 1, 2], vec![PartOf, PartOf, PartOf, PartOf])
            .unwrap();
        assert_eq!(crossing_arcs(&a), vec![((1, 3), (2, 4))]);
        assert!(has_nonprojective_part_of(&a));
        assert_eq!(NonProjectivity::of(&a).nonprojective, 2);
    }

    #[test]
    fn example_ad_is_nonprojective() {
        let (doc, tree) = example_ad();
        let a = encode_tree_to_heads(&doc, &tree).unwrap();
        assert!(has_nonprojective_part_of(&a));
        let stats = NonProjectivity::of(&a);
        assert!(stats.nonprojective > 0 && stats.percentage() < 100.0);
    }
}
