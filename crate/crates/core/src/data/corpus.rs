use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decode_heads_to_tree, AdDocument, Entity, EntityMention, EntityType, PropertyTree,
    RelationLabel, TokenHeadAssignment,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub doc: AdDocument,
    pub tree: PropertyTree,
}

#[derive(Debug, Serialize, Deserialize)]
struct MentionRecord {
    start: usize,
    end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    main: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    id: String,
    #[serde(rename = "type")]
    entity_type: EntityType,
    mentions: Vec<MentionRecord>,
    parent: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities: Option<Vec<EntityRecord>>,
}

const ROOT: &str = "ROOT";

impl DocumentRecord {
    fn into_parts(self) -> Result<(AdDocument, Option<PropertyTree>)> {
        let doc = AdDocument::new(self.id, self.tokens)?;
        let tree = match self.entities {
            None => None,
            Some(records) => {
                let entities = records
                    .into_iter()
                    .map(|r| Entity {
                        id: r.id,
                        entity_type: r.entity_type,
                        mentions: r
                            .mentions
                            .into_iter()
                            .map(|m| match m.main {
                                Some(main) => EntityMention::with_main(m.start, m.end, main),
                                None => EntityMention::new(m.start, m.end),
                            })
                            .collect(),
                        parent: (r.parent != ROOT).then_some(r.parent),
                    })
                    .collect();
                let tree = PropertyTree::new(entities);
                tree.validate(doc.len())?;
                Some(tree)
            }
        };
        Ok((doc, tree))
    }

    fn from_parts(doc: &AdDocument, tree: Option<&PropertyTree>) -> Self {
        DocumentRecord {
            id: doc.id.clone(),
            tokens: doc.tokens.clone(),
            entities: tree.map(|t| {
                t.entities
                    .iter()
                    .map(|e| EntityRecord {
                        id: e.id.clone(),
                        entity_type: e.entity_type,
                        mentions: e
                            .mentions
                            .iter()
                            .map(|m| MentionRecord {
                                start: m.start,
                                end: m.end,
                                main: (m.main_token + 1 != m.end).then_some(m.main_token),
                            })
                            .collect(),
                        parent: e.parent.clone().unwrap_or_else(|| ROOT.to_string()),
                    })
                    .collect()
            }),
        }
    }
}

/// Reads JSON Lines documents; annotations are optional. Blank lines are
/// ignored.
pub fn read_documents<R: BufRead>(reader: R) -> Result<Vec<(AdDocument, Option<PropertyTree>)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: idx + 1,
            message,
        };
        let record: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(record.into_parts().map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// Reads JSON Lines documents that must all carry annotations.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<LabeledDocument>> {
    let mut out = Vec::new();
    let mut line = 0;
    for (doc, tree) in read_documents(reader)? {
        line += 1;
        let tree = tree.ok_or_else(|| Error::Parse {
            line,
            message: format!("document {:?} has no \"entities\" annotation", doc.id),
        })?;
        out.push(LabeledDocument { doc, tree });
    }
    Ok(out)
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<(AdDocument, Option<PropertyTree>)>> {
    read_documents(BufReader::new(File::open(path)?))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledDocument>> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn write_corpus<W: Write>(mut w: W, docs: &[LabeledDocument]) -> Result<()> {
    for d in docs {
        let record = DocumentRecord::from_parts(&d.doc, Some(&d.tree));
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The JSON Lines record of a document, with its tree when given.
pub fn document_json(doc: &AdDocument, tree: Option<&PropertyTree>) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(DocumentRecord::from_parts(doc, tree))?)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<LabeledDocument>,
    pub validation: Vec<LabeledDocument>,
    pub test: Vec<LabeledDocument>,
}

/// Seeded shuffle followed by a 70/15/15 split; validation and test sizes
/// are rounded down so training receives the remainder.
pub fn split_corpus(corpus: &[LabeledDocument], seed: u64) -> CorpusSplit {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = corpus.len();
    let n_val = n * 15 / 100;
    let n_test = n * 15 / 100;
    let n_train = n - n_val - n_test;
    let pick = |range: std::ops::Range<usize>| range.map(|i| corpus[order[i]].clone()).collect();
    CorpusSplit {
        train: pick(0..n_train),
        validation: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
    }
}

/// Pluggable reader for corpus formats other than the canonical JSON Lines.
pub trait CorpusImporter {
    fn name(&self) -> &'static str;

    fn import(&self, reader: &mut dyn BufRead) -> Result<Vec<(AdDocument, Option<PropertyTree>)>>;
}

pub struct JsonlImporter;

impl CorpusImporter for JsonlImporter {
    fn name(&self) -> &'static str {
        "jsonl"
    }

    fn import(&self, reader: &mut dyn BufRead) -> Result<Vec<(AdDocument, Option<PropertyTree>)>> {
        read_documents(reader)
    }
}

/// Token-per-line format with blank lines between documents:
///
/// ```text
/// # id = ad-17
/// 1   The        1   skip
/// 2   apartment  0   part-of   B-PROPERTY
/// ```
///
/// Columns are index, token, head, relation label and an optional BIO tag
/// used to type the decoded entities.
pub struct ColumnImporter;

impl CorpusImporter for ColumnImporter {
    fn name(&self) -> &'static str {
        "columns"
    }

    fn import(&self, reader: &mut dyn BufRead) -> Result<Vec<(AdDocument, Option<PropertyTree>)>> {
        let mut out = Vec::new();
        let mut block: Vec<(usize, String)> = Vec::new();
        let mut id: Option<String> = None;
        let mut first_line = 0;
        let mut lines = reader.lines().enumerate().peekable();
        loop {
            let next = lines.next();
            let is_break = match &next {
                None => true,
                Some((_, Ok(l))) => l.trim().is_empty(),
                Some((_, Err(_))) => false,
            };
            if is_break {
                if !block.is_empty() {
                    let doc_id = id.take().unwrap_or_else(|| format!("doc-{}", out.len() + 1));
                    out.push(parse_column_block(doc_id, first_line, &block)?);
                    block.clear();
                }
                if next.is_none() {
                    break;
                }
                continue;
            }
            let (idx, line) = next.expect("checked");
            let line = line?;
            if let Some(rest) = line.trim().strip_prefix('#') {
                if let Some((key, value)) = rest.split_once('=') {
                    if key.trim() == "id" {
                        id = Some(value.trim().to_string());
                    }
                }
                continue;
            }
            if block.is_empty() {
                first_line = idx + 1;
            }
            block.push((idx + 1, line));
        }
        Ok(out)
    }
}

fn parse_column_block(
    id: String,
    first_line: usize,
    block: &[(usize, String)],
) -> Result<(AdDocument, Option<PropertyTree>)> {
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    for (pos, (line_no, line)) in block.iter().enumerate() {
        let err = |message: String| Error::Parse {
            line: *line_no,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 4 {
            return Err(err(format!("expected at least 4 columns, got {}", cols.len())));
        }
        let index: usize = cols[0].parse().map_err(|_| err(format!("bad index {:?}", cols[0])))?;
        if index != pos + 1 {
            return Err(err(format!("token index {index}, expected {}", pos + 1)));
        }
        tokens.push(cols[1].to_string());
        heads.push(cols[2].parse().map_err(|_| err(format!("bad head {:?}", cols[2])))?);
        labels.push(cols[3].parse::<RelationLabel>().map_err(|e| err(e.to_string()))?);
        tags.push(cols.get(4).map(|t| t.to_string()));
    }
    let wrap = |e: Error| Error::Parse {
        line: first_line,
        message: e.to_string(),
    };
    let doc = AdDocument::new(id, tokens).map_err(wrap)?;
    let assignment = TokenHeadAssignment::new(heads, labels).map_err(wrap)?;
    let mut tree = decode_heads_to_tree(&doc, &assignment).map_err(wrap)?;
    for e in &mut tree.entities {
        let m = e.main_mention();
        if let Some(Some(tag)) = tags.get(m.start - 1) {
            let tag: super::BioTag = tag.parse().map_err(wrap)?;
            if let Some(t) = tag.entity_type() {
                e.entity_type = t;
            }
        }
    }
    Ok((doc, Some(tree)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::example_ad;
    use crate::data::encode_tree_to_heads;

    fn corpus(n: usize) -> Vec<LabeledDocument> {
        (0..n)
            .map(|i| LabeledDocument {
                doc: AdDocument::from_text(format!("d{i}"), "a house").unwrap(),
                tree: PropertyTree::default(),
            })
            .collect()
    }

    #[test]
    fn split_proportions() {
        let s = split_corpus(&corpus(100), 7);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 15));
        let s = split_corpus(&corpus(1), 7);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 0, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let c = corpus(40);
        assert_eq!(split_corpus(&c, 3), split_corpus(&c, 3));
        assert_ne!(split_corpus(&c, 3).train, split_corpus(&c, 4).train);
    }

    #[test]
    fn jsonl_roundtrip() {
        let (doc, tree) = example_ad();
        let docs = vec![LabeledDocument { doc, tree }];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &docs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"parent\":\"ROOT\""));
        assert!(text.contains("\"type\":\"extra building\"") || text.contains("\"type\":\"space\""));
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back, docs);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "{\"id\":\"a\",\"tokens\":[\"x\"],\"entities\":[]}\n\n{\"id\":\"b\",\"tokens\":[]}\n";
        match read_documents(input.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let overlapping = r#"{"id":"c","tokens":["a","b","c"],"entities":[
            {"id":"x","type":"space","mentions":[{"start":1,"end":3}],"parent":"ROOT"}]}"#
            .replace('\n', "");
        assert!(read_corpus(overlapping.as_bytes()).is_ok());
        let bad_span = r#"{"id":"c","tokens":["a"],"entities":[{"id":"x","type":"space","mentions":[{"start":1,"end":3}],"parent":"ROOT"}]}"#;
        assert!(matches!(read_corpus(bad_span.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unlabeled_documents_rejected_by_read_corpus() {
        let input = "{\"id\":\"a\",\"tokens\":[\"x\"]}\n";
        assert_eq!(read_documents(input.as_bytes()).unwrap()[0].1, None);
        assert!(read_corpus(input.as_bytes()).is_err());
    }

    #[test]
    fn column_importer_reads_joint_encoding() {
        let (doc, tree) = example_ad();
        let a = encode_tree_to_heads(&doc, &tree).unwrap();
        let bio = crate::data::bio_encode(&doc, &tree).unwrap();
        let mut text = String::from("# id = ad-example\n");
        for (i, h, l) in a.edges() {
            text.push_str(&format!("{i}\t{}\t{h}\t{l}\t{}\n", doc.token(i), bio.0[i - 1]));
        }
        text.push('\n');
        let docs = ColumnImporter.import(&mut text.as_bytes()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].0.id, "ad-example");
        let imported = docs[0].1.as_ref().unwrap();
        assert_eq!(imported.skeleton(), tree.skeleton());
        assert!(imported.entities.iter().all(|e| e.entity_type != EntityType::Untyped));
    }
}
