//! Edge-level precision, recall and F1 on the structured classes.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::{RelationLabel, TokenHeadAssignment};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Add for LabelCounts {
    type Output = LabelCounts;

    fn add(self, o: LabelCounts) -> LabelCounts {
        LabelCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for LabelCounts {
    fn add_assign(&mut self, o: LabelCounts) {
        *self = *self + o;
    }
}

/// Counts for one document or a whole corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub segment: LabelCounts,
    pub part_of: LabelCounts,
    /// Diagnostic only; never part of the overall score.
    pub equivalent: LabelCounts,
}

impl EdgeCounts {
    /// Union of the two structured classes.
    pub fn structured(&self) -> LabelCounts {
        self.segment + self.part_of
    }

    fn slot(&mut self, label: RelationLabel) -> Option<&mut LabelCounts> {
        match label {
            RelationLabel::Segment => Some(&mut self.segment),
            RelationLabel::PartOf => Some(&mut self.part_of),
            RelationLabel::Equivalent => Some(&mut self.equivalent),
            RelationLabel::Skip => None,
        }
    }
}

impl AddAssign for EdgeCounts {
    fn add_assign(&mut self, o: EdgeCounts) {
        self.segment += o.segment;
        self.part_of += o.part_of;
        self.equivalent += o.equivalent;
    }
}

/// A predicted `(dependent, head, label)` edge is correct iff gold has the
/// identical triple. Skip edges are not counted.
pub fn score_edges(predicted: &TokenHeadAssignment, gold: &TokenHeadAssignment) -> Result<EdgeCounts> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidAssignment(format!(
            "predicted has {} tokens, gold has {}",
            predicted.len(),
            gold.len()
        )));
    }
    let mut c = EdgeCounts::default();
    for ((_, ph, pl), (_, gh, gl)) in predicted.edges().zip(gold.edges()) {
        if ph == gh && pl == gl {
            if let Some(s) = c.slot(pl) {
                s.tp += 1;
            }
            continue;
        }
        if let Some(s) = c.slot(pl) {
            s.fp += 1;
        }
        if let Some(s) = c.slot(gl) {
            s.fn_ += 1;
        }
    }
    Ok(c)
}

/// Percentages. A class with nothing predicted and nothing gold scores 100.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl From<LabelCounts> for LabelMetrics {
    fn from(c: LabelCounts) -> Self {
        let ratio = |num: usize, den: usize, vacuous: bool| {
            if den == 0 {
                if vacuous {
                    100.0
                } else {
                    0.0
                }
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp, c.fn_ == 0);
        let recall = ratio(c.tp, c.tp + c.fn_, c.fp == 0);
        LabelMetrics {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub segment: LabelMetrics,
    pub part_of: LabelMetrics,
    pub overall: LabelMetrics,
    pub equivalent: LabelMetrics,
    /// Share of documents whose greedy output already formed a tree.
    pub tree_rate: f64,
    pub documents: usize,
    pub counts: EdgeCounts,
}

/// Micro-averaged report over per-document counts and greedy tree flags.
pub fn aggregate(counts: &[EdgeCounts], greedy_trees: &[bool]) -> Result<MetricsReport> {
    if counts.is_empty() {
        return Err(Error::Empty("evaluation corpus".into()));
    }
    if counts.len() != greedy_trees.len() {
        return Err(Error::InvalidAssignment(format!(
            "{} documents but {} tree flags",
            counts.len(),
            greedy_trees.len()
        )));
    }
    let mut total = EdgeCounts::default();
    for c in counts {
        total += *c;
    }
    let trees = greedy_trees.iter().filter(|&&t| t).count();
    Ok(MetricsReport {
        segment: total.segment.into(),
        part_of: total.part_of.into(),
        overall: total.structured().into(),
        equivalent: total.equivalent.into(),
        tree_rate: 100.0 * trees as f64 / counts.len() as f64,
        documents: counts.len(),
        counts: total,
    })
}

impl MetricsReport {
    pub fn table_header() -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>23} {:>23} {:>8} {:>7}",
            "", "segment", "part-of", "overall", ""
        );
        let _ = write!(
            s,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>7}",
            "model", "P", "R", "F1", "P", "R", "F1", "F1", "Trees%"
        );
        s
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>7.2}",
            name,
            self.segment.precision,
            self.segment.recall,
            self.segment.f1,
            self.part_of.precision,
            self.part_of.recall,
            self.part_of.f1,
            self.overall.f1,
            self.tree_rate
        )
    }

    /// Header plus one row.
    pub fn to_table(&self, name: &str) -> String {
        format!("{}\n{}", Self::table_header(), self.table_row(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use RelationLabel::*;

    fn assignment(heads: &[usize], labels: &[RelationLabel]) -> TokenHeadAssignment {
        TokenHeadAssignment::new(heads.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = assignment(&[2, 0, 2, 4], &[Segment, PartOf, PartOf, Skip]);
        let c = score_edges(&g, &g).unwrap();
        let r = aggregate(&[c], &[true]).unwrap();
        for m in [r.segment, r.part_of, r.overall, r.equivalent] {
            assert_eq!((m.precision, m.recall, m.f1), (100.0, 100.0, 100.0));
        }
        assert_eq!(r.tree_rate, 100.0);
    }

    #[test]
    fn partial_part_of() {
        // Gold part-of edges at tokens 1, 2, 3; predicted at 1 (right) and
        // 2 (wrong head); token 3 skipped.
        let g = assignment(&[0, 1, 1, 4], &[PartOf, PartOf, PartOf, Skip]);
        let p = assignment(&[0, 3, 3, 4], &[PartOf, PartOf, Skip, Skip]);
        let c = score_edges(&p, &g).unwrap();
        assert_eq!(c.part_of, LabelCounts { tp: 1, fp: 1, fn_: 2 });
        let m = LabelMetrics::from(c.part_of);
        assert!((m.precision - 50.0).abs() < 1e-12);
        assert!((m.recall - 100.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 40.0).abs() < 1e-12);
    }

    #[test]
    fn equivalent_is_kept_out_of_overall() {
        let g = assignment(&[0, 1], &[PartOf, Equivalent]);
        let p = assignment(&[0, 1], &[PartOf, PartOf]);
        let c = score_edges(&p, &g).unwrap();
        assert_eq!(c.structured(), LabelCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(c.equivalent, LabelCounts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn micro_average_identity() {
        let g = assignment(&[0, 1, 1], &[PartOf, PartOf, Segment]);
        let p = assignment(&[0, 3, 1], &[PartOf, PartOf, Segment]);
        let c = score_edges(&p, &g).unwrap();
        let one = aggregate(&[c], &[false]).unwrap();
        let two = aggregate(&[c, c], &[false, false]).unwrap();
        assert_eq!(one.overall, two.overall);
        assert_eq!(one.part_of, two.part_of);
    }

    #[test]
    fn errors() {
        let a = assignment(&[0], &[PartOf]);
        let b = assignment(&[0, 1], &[PartOf, PartOf]);
        assert!(score_edges(&a, &b).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }

    #[test]
    fn table_layout() {
        let g = assignment(&[0], &[PartOf]);
        let r = aggregate(&[score_edges(&g, &g).unwrap()], &[true]).unwrap();
        let t = r.to_table("LSTM+E");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("Trees%"));
        assert!(lines[2].starts_with("LSTM+E"));
        assert_eq!(lines[1].len(), lines[2].len());
    }
}
