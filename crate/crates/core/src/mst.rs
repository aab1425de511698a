//! Tree enforcement with the Chu-Liu-Edmonds maximum spanning arborescence.

use crate::data::{RelationLabel, TokenHeadAssignment};
use crate::error::{Error, Result};
use crate::joint::JointDistribution;

/// Dense digraph over local nodes `0..n`, node 0 being the root. Absent
/// edges carry `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDigraph {
    /// Token index (or entity index) of every local node; `ids[0] == 0`.
    pub ids: Vec<usize>,
    weights: Vec<Vec<f64>>,
    labels: Vec<Vec<Option<RelationLabel>>>,
}

impl WeightedDigraph {
    /// Root plus the given node ids, with no edges.
    pub fn new(ids: Vec<usize>) -> Self {
        let n = ids.len();
        WeightedDigraph {
            ids,
            weights: vec![vec![f64::NEG_INFINITY; n]; n],
            labels: vec![vec![None; n]; n],
        }
    }

    /// Complete graph from a square matrix `w[head][dep]`; the diagonal
    /// and the root column are ignored.
    pub fn from_dense(w: &[Vec<f64>]) -> Self {
        let n = w.len();
        let mut g = WeightedDigraph::new((0..n).collect());
        for h in 0..n {
            for d in 1..n {
                if h != d {
                    g.set_edge(h, d, w[h][d], None);
                }
            }
        }
        g
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.len() <= 1
    }

    /// Sets `head -> dep` between local nodes. Edges into the root and
    /// self-edges are ignored.
    pub fn set_edge(&mut self, head: usize, dep: usize, weight: f64, label: Option<RelationLabel>) {
        if dep == 0 || head == dep {
            return;
        }
        self.weights[head][dep] = weight;
        self.labels[head][dep] = label;
    }

    pub fn weight(&self, head: usize, dep: usize) -> f64 {
        self.weights[head][dep]
    }

    pub fn label(&self, head: usize, dep: usize) -> Option<RelationLabel> {
        self.labels[head][dep]
    }

    pub fn edge_count(&self) -> usize {
        self.weights
            .iter()
            .flatten()
            .filter(|w| w.is_finite())
            .count()
    }
}

/// Parent of every local node (`None` for the root).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arborescence {
    pub parent: Vec<Option<usize>>,
}

impl Arborescence {
    pub fn weight(&self, g: &WeightedDigraph) -> f64 {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(d, p)| p.map(|h| g.weight(h, d)))
            .sum()
    }

    /// Every non-root node has one parent and reaches the root.
    pub fn is_valid(&self) -> bool {
        let n = self.parent.len();
        if n == 0 || self.parent[0].is_some() {
            return false;
        }
        (1..n).all(|start| {
            let mut cur = start;
            for _ in 0..n {
                match self.parent[cur] {
                    Some(0) => return true,
                    Some(p) if p < n => cur = p,
                    _ => return false,
                }
            }
            false
        })
    }
}

/// Maximum-weight spanning arborescence rooted at node 0. Ties go to the
/// smaller head index.
pub fn chu_liu_edmonds(g: &WeightedDigraph) -> Result<Arborescence> {
    let n = g.len();
    if n == 0 {
        return Err(Error::Empty("graph without a root".into()));
    }
    let reps: Vec<usize> = (0..n).collect();
    let parent = solve(&g.weights, &reps).map_err(|local| Error::UnreachableNode(g.ids[local]))?;
    let mut out = vec![None; n];
    for d in 1..n {
        out[d] = Some(parent[d]);
    }
    Ok(Arborescence { parent: out })
}

/// Recursive contraction. `reps[v]` is the smallest original node inside
/// `v`, used for tie-breaking; nodes are kept sorted by it. Errors carry
/// the representative of a node without incoming edges.
fn solve(w: &[Vec<f64>], reps: &[usize]) -> std::result::Result<Vec<usize>, usize> {
    let n = w.len();
    let mut best = vec![0usize; n];
    for d in 1..n {
        let mut arg = None;
        let mut val = f64::NEG_INFINITY;
        for h in 0..n {
            if h != d && w[h][d] > val {
                val = w[h][d];
                arg = Some(h);
            }
        }
        best[d] = arg.ok_or(reps[d])?;
    }

    let Some(cycle) = find_cycle(&best) else {
        return Ok(best);
    };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();

    // Contracted node order: outside nodes and the cycle node, sorted by
    // representative.
    let cycle_rep = cycle.iter().map(|&v| reps[v]).min().expect("non-empty");
    let mut order: Vec<Option<usize>> = (0..n).filter(|&v| !in_cycle[v]).map(Some).collect();
    order.push(None);
    order.sort_by_key(|v| v.map_or(cycle_rep, |x| reps[x]));
    let pos_of = |v: usize| -> usize {
        order
            .iter()
            .position(|&o| if in_cycle[v] { o.is_none() } else { o == Some(v) })
            .expect("listed")
    };
    let c = order.iter().position(Option::is_none).expect("cycle node");
    let m = order.len();
    let new_reps: Vec<usize> = order.iter().map(|o| o.map_or(cycle_rep, |x| reps[x])).collect();

    let mut cw = vec![vec![f64::NEG_INFINITY; m]; m];
    // Which cycle member an incoming edge enters, which one an outgoing
    // edge leaves from.
    let mut enter = vec![usize::MAX; m];
    let mut leave = vec![usize::MAX; m];
    for u in 0..n {
        for v in 0..n {
            if u == v || v == 0 || !w[u][v].is_finite() {
                continue;
            }
            match (in_cycle[u], in_cycle[v]) {
                (false, false) => cw[pos_of(u)][pos_of(v)] = w[u][v],
                (false, true) => {
                    let pu = pos_of(u);
                    let val = w[u][v] - w[best[v]][v];
                    if val > cw[pu][c] || (val == cw[pu][c] && reps[v] < reps[enter[pu]]) {
                        cw[pu][c] = val;
                        enter[pu] = v;
                    }
                }
                (true, false) => {
                    let pv = pos_of(v);
                    if w[u][v] > cw[c][pv] || (w[u][v] == cw[c][pv] && reps[u] < reps[leave[pv]]) {
                        cw[c][pv] = w[u][v];
                        leave[pv] = u;
                    }
                }
                (true, true) => {}
            }
        }
    }

    let sub = solve(&cw, &new_reps)?;
    let mut parent = best.clone();
    for (pv, o) in order.iter().enumerate() {
        if pv == 0 {
            continue;
        }
        let head = sub[pv];
        let head_node = |ph: usize, dep_pos: usize| order[ph].unwrap_or(leave[dep_pos]);
        match o {
            Some(v) => parent[*v] = head_node(head, pv),
            None => {
                let u = order[head].expect("head outside the cycle");
                parent[enter[head]] = u;
            }
        }
    }
    Ok(parent)
}

/// Some cycle in the parent map over nodes `1..`, if any.
fn find_cycle(parent: &[usize]) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut state = vec![0u8; n];
    state[0] = 2;
    for start in 1..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if state[v] == 1 {
            let at = path.iter().position(|&x| x == v).expect("on path");
            return Some(path[at..].to_vec());
        }
        for x in path {
            state[x] = 2;
        }
    }
    None
}

/// Graph over the root and the tokens not predicted as skip; the weight of
/// `j -> i` is the best structural log-probability.
pub fn build_graph(dist: &JointDistribution, greedy: &TokenHeadAssignment) -> WeightedDigraph {
    let mut ids = vec![0];
    ids.extend(
        greedy
            .edges()
            .filter(|&(_, _, l)| l != RelationLabel::Skip)
            .map(|(i, _, _)| i),
    );
    let mut g = WeightedDigraph::new(ids);
    for hl in 0..g.len() {
        for dl in 1..g.len() {
            if hl == dl {
                continue;
            }
            let (j, i) = (g.ids[hl], g.ids[dl]);
            let mut best = (RelationLabel::PartOf, f64::NEG_INFINITY);
            for label in RelationLabel::STRUCTURAL {
                let lp = dist.log_prob(i, j, label.index());
                if lp > best.1 {
                    best = (label, lp);
                }
            }
            g.set_edge(hl, dl, best.1, Some(best.0));
        }
    }
    g
}

/// Greedy skips kept, every other token attached by the maximum spanning
/// arborescence.
pub fn enforce_tree(dist: &JointDistribution, greedy: &TokenHeadAssignment) -> Result<TokenHeadAssignment> {
    let g = build_graph(dist, greedy);
    let mut out = TokenHeadAssignment::all_skip(greedy.len());
    if g.is_empty() {
        return Ok(out);
    }
    let tree = chu_liu_edmonds(&g)?;
    for dl in 1..g.len() {
        let hl = tree.parent[dl].expect("non-root");
        let label = g.label(hl, dl).expect("edge label");
        out.set(g.ids[dl], g.ids[hl], label);
    }
    Ok(out)
}

/// True when the non-skip edges form one arborescence under the root.
pub fn is_tree(a: &TokenHeadAssignment) -> bool {
    let n = a.len();
    let active = |t: usize| t == 0 || a.label(t) != RelationLabel::Skip;
    for (i, h, l) in a.edges() {
        if l == RelationLabel::Skip {
            continue;
        }
        if h == i || !active(h) {
            return false;
        }
    }
    for start in 1..=n {
        if !active(start) {
            continue;
        }
        let mut cur = start;
        let mut steps = 0;
        while cur != 0 {
            cur = a.head(cur);
            steps += 1;
            if steps > n {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use RelationLabel::*;

    const NEG: f64 = f64::NEG_INFINITY;

    #[test]
    fn single_edge() {
        let g = WeightedDigraph::from_dense(&[vec![0.0, 2.5], vec![NEG, 0.0]]);
        let t = chu_liu_edmonds(&g).unwrap();
        assert_eq!(t.parent, vec![None, Some(0)]);
    }

    #[test]
    fn two_cycle_tie_prefers_smaller_head() {
        let w = vec![
            vec![0.0, 1.0, 1.0],
            vec![NEG, 0.0, 5.0],
            vec![NEG, 5.0, 0.0],
        ];
        let g = WeightedDigraph::from_dense(&w);
        let t = chu_liu_edmonds(&g).unwrap();
        assert_eq!(t.parent, vec![None, Some(0), Some(1)]);
        assert_eq!(t.weight(&g), 6.0);
    }

    #[test]
    fn nested_cycles() {
        // 1 <-> 2 strongly, 3 prefers 2, 2 -> 3 -> 1 also heavy.
        let w = vec![
            vec![0.0, 1.0, 0.5, 0.2],
            vec![NEG, 0.0, 10.0, 1.0],
            vec![NEG, 10.0, 0.0, 9.0],
            vec![NEG, 9.5, 2.0, 0.0],
        ];
        let g = WeightedDigraph::from_dense(&w);
        let t = chu_liu_edmonds(&g).unwrap();
        assert!(t.is_valid());
        assert_eq!(t.weight(&g), 1.0 + 10.0 + 9.0);
    }

    #[test]
    fn unreachable_node_reported() {
        let mut g = WeightedDigraph::new(vec![0, 4, 7]);
        g.set_edge(0, 1, 1.0, None);
        assert!(matches!(chu_liu_edmonds(&g), Err(Error::UnreachableNode(7))));
    }

    #[test]
    fn all_skip_graph_is_root_only() {
        let dist = JointDistribution::from_scores(3, |i, j, k| if i == j && k == 3 { 9.0 } else { 0.0 });
        let greedy = crate::joint::greedy_decode(&dist);
        let g = build_graph(&dist, &greedy);
        assert_eq!(g.len(), 1);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(enforce_tree(&dist, &greedy).unwrap(), TokenHeadAssignment::all_skip(3));
    }

    #[test]
    fn two_tokens_give_four_edges() {
        let dist = JointDistribution::from_scores(2, |_, j, k| if j == 0 && k == 0 { 1.0 } else { 0.0 });
        let greedy = crate::joint::greedy_decode(&dist);
        let g = build_graph(&dist, &greedy);
        assert_eq!(g.len(), 3);
        assert_eq!(g.edge_count(), 4);
        assert_eq!(g.label(0, 1), Some(PartOf));
    }

    #[test]
    fn tree_checks() {
        let gold = TokenHeadAssignment::new(vec![2, 0, 3], vec![Segment, PartOf, Skip]).unwrap();
        assert!(is_tree(&gold));
        let cyc = TokenHeadAssignment::new(vec![2, 1, 3], vec![PartOf, PartOf, Skip]).unwrap();
        assert!(!is_tree(&cyc));
        let to_skip = TokenHeadAssignment::new(vec![3, 0, 3], vec![PartOf, PartOf, Skip]).unwrap();
        assert!(!is_tree(&to_skip));
    }
}
