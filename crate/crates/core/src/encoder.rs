//! Frozen word embeddings and the bidirectional LSTM encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use proptree_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::AdDocument;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Token to row map; row 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            tokens: vec![UNK.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK.to_string(), 0);
        for t in tokens {
            v.insert(t);
        }
        v
    }

    /// Every token of `docs`, in order of first occurrence.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a AdDocument>) -> Self {
        Self::new(docs.into_iter().flat_map(|d| d.tokens.iter().cloned()))
    }

    pub fn insert(&mut self, token: String) -> usize {
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.clone(), i);
        self.tokens.push(token);
        i
    }

    /// Row for `token`, trying the lowercased form before falling back to
    /// the unknown row.
    pub fn get(&self, token: &str) -> usize {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Restores the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Frozen `|V| x d` embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub matrix: Tensor,
}

impl EmbeddingTable {
    /// Rows drawn from uniform(-0.05, 0.05).
    pub fn random<R: Rng>(vocab: Vocabulary, dim: usize, rng: &mut R) -> Self {
        let matrix = Tensor::uniform(&[vocab.len(), dim], 0.05, rng);
        EmbeddingTable { vocab, matrix }
    }

    /// Uses pre-trained vectors where available and random rows for the
    /// remaining tokens of `vocab`. Pre-trained tokens outside `vocab` are
    /// added too, so they are known at prediction time.
    pub fn with_pretrained<R: Rng>(
        mut vocab: Vocabulary,
        pretrained: &[(String, Vec<f64>)],
        rng: &mut R,
    ) -> Result<Self> {
        let dim = pretrained
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::Empty("embedding file has no vectors".into()))?;
        for (t, _) in pretrained {
            vocab.insert(t.clone());
        }
        let mut table = Self::random(vocab, dim, rng);
        for (t, v) in pretrained {
            let row = table.vocab.get(t);
            table.matrix.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(v);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, token: &str) -> &[f64] {
        self.matrix.row(self.vocab.get(token))
    }

    /// `[N+1, d]`: position 0 is the zero root vector, the rest are table
    /// rows. Dropout, when given, never touches the root row.
    pub fn embed<R: Rng>(
        &self,
        tape: &mut Tape,
        doc: &AdDocument,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let d = self.dim();
        let mut data = vec![0.0; (doc.len() + 1) * d];
        for (i, t) in doc.tokens.iter().enumerate() {
            data[(i + 1) * d..(i + 2) * d].copy_from_slice(self.row(t));
        }
        let x = tape.constant(Tensor::new(vec![doc.len() + 1, d], data)?);
        apply_dropout(tape, x, dropout)
    }
}

/// Dropout over rows `1..`, keeping row 0 intact.
fn apply_dropout<R: Rng>(tape: &mut Tape, x: Var, dropout: Option<(f64, &mut R)>) -> Result<Var> {
    let Some((rate, rng)) = dropout else {
        return Ok(x);
    };
    let shape = tape.shape(x).to_vec();
    let Some(mut mask) = proptree_tensor::tape::dropout_mask(&shape, rate, rng)? else {
        return Ok(x);
    };
    mask.data_mut()[..shape[1]].fill(1.0);
    Ok(tape.apply_mask(x, mask)?)
}

/// Reads `token v1 ... vd` lines with an optional `count dim` header.
pub fn read_word2vec_text<R: BufRead>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if idx == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue;
        }
        if let Some((_, first)) = out.first() {
            if first.len() != values.len() {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {} values, got {}", first.len(), values.len()),
                });
            }
        }
        out.push((token.to_string(), values));
    }
    Ok(out)
}

/// Reads the binary word2vec layout: a `count dim` text header, then per
/// word the token, a space and `dim` little-endian `f32` values.
pub fn read_word2vec_binary<R: Read>(mut reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
    let header = String::from_utf8_lossy(&bytes[..header_end]);
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line: 1,
            message: format!("bad header {header:?}"),
        })?;
    let [count, dim] = nums[..] else {
        return Err(Error::Parse {
            line: 1,
            message: format!("bad header {header:?}"),
        });
    };
    let mut pos = header_end + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b' ' {
            pos += 1;
        }
        let token = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1;
        let end = pos + 4 * dim;
        if end > bytes.len() {
            return Err(Error::Parse {
                line: k + 2,
                message: format!("truncated vector for {token:?}"),
            });
        }
        let values = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        pos = end;
        out.push((token, values));
    }
    Ok(out)
}

/// Binary layout for `.bin` files, text otherwise.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "bin") {
        read_word2vec_binary(BufReader::new(file))
    } else {
        read_word2vec_text(BufReader::new(file))
    }
}

/// Gate weights of one LSTM direction; gates are ordered input, forget,
/// output, candidate.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl LstmDirection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(LstmDirection {
            wx: store.add(format!("{prefix}.wx"), Tensor::uniform(&[input, 4 * hidden], init, rng))?,
            wh: store.add(format!("{prefix}.wh"), Tensor::uniform(&[hidden, 4 * hidden], init, rng))?,
            b: store.add(format!("{prefix}.b"), bias)?,
        })
    }

    /// Hidden states `[len, hidden]` in position order, scanning backwards
    /// when `reverse` is set.
    fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, hidden: usize, reverse: bool) -> Result<Var> {
        let len = tape.shape(x)[0];
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add(xw, b)?;
        let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
        let mut outputs = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for (step, &t) in order.iter().enumerate() {
            let row = tape.slice(xw, 0, t, t + 1)?;
            let z = if step == 0 {
                row
            } else {
                let hw = tape.matmul(h, wh)?;
                tape.add(row, hw)?
            };
            let i = tape.slice(z, 1, 0, hidden)?;
            let f = tape.slice(z, 1, hidden, 2 * hidden)?;
            let o = tape.slice(z, 1, 2 * hidden, 3 * hidden)?;
            let g = tape.slice(z, 1, 3 * hidden, 4 * hidden)?;
            let i = tape.sigmoid(i)?;
            let f = tape.sigmoid(f)?;
            let o = tape.sigmoid(o)?;
            let g = tape.tanh(g)?;
            let ig = tape.mul(i, g)?;
            c = if step == 0 {
                ig
            } else {
                let fc = tape.mul(f, c)?;
                tape.add(fc, ig)?
            };
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            outputs[t] = h;
        }
        Ok(tape.concat(&outputs, 0)?)
    }
}

/// One or two stacked bidirectional layers of width `hidden` per
/// direction; outputs are `[h_fwd; h_bwd]` of width `2 * hidden`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
    pub input: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        layers: usize,
        init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(Error::Config(format!("{layers} LSTM layers, expected 1 or 2")));
        }
        let mut out = Vec::new();
        for k in 0..layers {
            let width = if k == 0 { input } else { 2 * hidden };
            let fwd = LstmDirection::new(store, &format!("lstm.l{k}.fwd"), width, hidden, init, rng)?;
            let bwd = LstmDirection::new(store, &format!("lstm.l{k}.bwd"), width, hidden, init, rng)?;
            out.push((fwd, bwd));
        }
        Ok(BiLstm {
            layers: out,
            input,
            hidden,
        })
    }

    /// Single layer whose two directions share one parameter set.
    pub fn tied<R: Rng>(store: &mut ParamStore, input: usize, hidden: usize, init: f64, rng: &mut R) -> Result<Self> {
        let dir = LstmDirection::new(store, "lstm.l0.tied", input, hidden, init, rng)?;
        Ok(BiLstm {
            layers: vec![(dir.clone(), dir)],
            input,
            hidden,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes `x: [N+1, input]`. `dropout` is applied to the input of
    /// every layer after the first (the first layer's input dropout is the
    /// embedding dropout).
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::Config(format!(
                "encoder expects width {}, got shape {shape:?}",
                self.input
            )));
        }
        let mut cur = x;
        for (k, (fwd, bwd)) in self.layers.iter().enumerate() {
            if k > 0 {
                cur = apply_dropout(tape, cur, dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)))?;
            }
            let f = fwd.run(tape, store, cur, self.hidden, false)?;
            let b = bwd.run(tape, store, cur, self.hidden, true)?;
            cur = tape.concat(&[f, b], 1)?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(text: &str) -> AdDocument {
        AdDocument::from_text("t", text).unwrap()
    }

    #[test]
    fn root_is_zero_and_oov_maps_to_unk() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = doc("a kitchen");
        let table = EmbeddingTable::random(Vocabulary::from_documents([&d]), 4, &mut rng);
        let mut tape = Tape::new();
        let unseen = doc("a zebra");
        let x = table.embed::<ChaCha8Rng>(&mut tape, &unseen, None).unwrap();
        let v = tape.value(x);
        assert_eq!(v.row(0), &[0.0; 4]);
        assert_eq!(v.row(1), table.row("a"));
        assert_eq!(v.row(2), table.matrix.row(0));
    }

    #[test]
    fn dropout_spares_root_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = doc("a b c d e f");
        let mut table = EmbeddingTable::random(Vocabulary::from_documents([&d]), 8, &mut rng);
        table.matrix = Tensor::ones(table.matrix.shape());
        let mut tape = Tape::new();
        let x = table.embed(&mut tape, &d, Some((0.5, &mut rng))).unwrap();
        let v = tape.value(x);
        assert_eq!(v.row(0), &[0.0; 8]);
        assert!(v.data()[8..].iter().all(|&x| x == 0.0 || x == 2.0));
        assert!(v.data()[8..].contains(&0.0));
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, 3, 2, 1, 0.1, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng));
        let h = enc.forward::<ChaCha8Rng>(&mut tape, &store, x, None).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = BiLstm::new(&mut store, 3, 5, 2, 0.1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3], 1.0, &mut rng));
        let h = enc.forward(&mut tape, &store, x, Some((0.3, &mut rng))).unwrap();
        assert_eq!(tape.shape(h), &[2, 10]);
        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(enc.forward::<ChaCha8Rng>(&mut tape, &store, bad, None).is_err());
    }

    #[test]
    fn text_embeddings_with_header() {
        let text = "2 3\nkitchen 0.1 0.2 0.3\nroom -1 0 1\n";
        let vecs = read_word2vec_text(text.as_bytes()).unwrap();
        assert_eq!(vecs.len(), 2);
        assert_eq!(vecs[1].1, vec![-1.0, 0.0, 1.0]);
        assert!(read_word2vec_text("a 1 2\nb 1\n".as_bytes()).is_err());
    }

    #[test]
    fn binary_embeddings() {
        let mut bytes = b"2 2\n".to_vec();
        for (w, v) in [("ab", [1.0f32, 2.0]), ("c", [-0.5, 0.25])] {
            bytes.extend_from_slice(w.as_bytes());
            bytes.push(b' ');
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            bytes.push(b'\n');
        }
        let vecs = read_word2vec_binary(bytes.as_slice()).unwrap();
        assert_eq!(vecs, vec![("ab".into(), vec![1.0, 2.0]), ("c".into(), vec![-0.5, 0.25])]);
    }

    #[test]
    fn pretrained_rows_are_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = Vocabulary::new(["kitchen".to_string(), "hall".to_string()]);
        let pre = vec![("kitchen".to_string(), vec![1.0, 2.0]), ("barn".to_string(), vec![3.0, 4.0])];
        let table = EmbeddingTable::with_pretrained(vocab, &pre, &mut rng).unwrap();
        assert_eq!(table.row("kitchen"), &[1.0, 2.0]);
        assert_eq!(table.row("barn"), &[3.0, 4.0]);
        assert!(table.row("hall").iter().all(|v| v.abs() <= 0.05));
    }
}
