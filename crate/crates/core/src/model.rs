//! The joint head-selection model: frozen embeddings, BiLSTM encoder,
//! optional attention, and the joint scorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use proptree_tensor::{AdamState, Checkpoint, Manifest, ParamStore, Tape, Var};

use crate::attention::{Attention, AttentionKind};
use crate::data::{decode_heads_to_tree_lenient, AdDocument, PropertyTree, TokenHeadAssignment};
use crate::encoder::{BiLstm, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::joint::{self, greedy_decode, JointDistribution, Scorer};
use crate::mst::{enforce_tree, is_tree};

/// Architecture of a joint model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    /// LSTM hidden width per direction, also the random embedding width.
    pub hidden: usize,
    /// Scorer inner width `l`.
    pub scorer_width: usize,
    /// Biaffine projection width `p`.
    pub projection_width: usize,
    pub layers: usize,
    pub attention: Option<AttentionKind>,
    /// Message-passing rounds of edge attention.
    pub steps: usize,
    /// Dropout on the embeddings and, when stacked, between layers.
    pub dropout: f64,
    /// Bound of the uniform weight initialization.
    pub init: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            hidden: 128,
            scorer_width: 32,
            projection_width: 32,
            layers: 1,
            attention: None,
            steps: 3,
            dropout: 0.5,
            init: 0.05,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.scorer_width == 0 || self.projection_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.scorer_width >= 2 * self.hidden {
            return bad(format!(
                "scorer width {} must be below 2 * hidden = {}",
                self.scorer_width,
                2 * self.hidden
            ));
        }
        if !(1..=2).contains(&self.layers) {
            return bad(format!("{} layers, expected 1 or 2", self.layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.attention == Some(AttentionKind::Edge) && self.steps == 0 {
            return bad("edge attention needs at least one step".into());
        }
        Ok(())
    }

    /// Checkpoint model kind.
    pub fn model_kind(&self) -> &'static str {
        match (self.attention, self.layers) {
            (Some(_), _) => "joint+attention",
            (None, 2) => "joint-2layer",
            _ => "joint",
        }
    }
}

/// Greedy output, the tree-enforced output and its decoded tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub greedy: TokenHeadAssignment,
    pub assignment: TokenHeadAssignment,
    pub tree: PropertyTree,
}

impl Prediction {
    pub fn greedy_is_tree(&self) -> bool {
        is_tree(&self.greedy)
    }
}

#[derive(Clone, Debug)]
pub struct JointModel {
    pub config: JointConfig,
    pub embeddings: EmbeddingTable,
    pub store: ParamStore,
    pub encoder: BiLstm,
    pub attention: Option<Attention>,
    pub scorer: Scorer,
}

impl JointModel {
    /// Fresh model. Embeddings are random unless `pretrained` is given, in
    /// which case their width replaces `config.hidden` as the input width.
    pub fn new(
        config: JointConfig,
        vocab: Vocabulary,
        pretrained: Option<&[(String, Vec<f64>)]>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = match pretrained {
            Some(p) => EmbeddingTable::with_pretrained(vocab, p, &mut rng)?,
            None => EmbeddingTable::random(vocab, config.hidden, &mut rng),
        };
        Self::build(config, embeddings, &mut rng)
    }

    fn build<R: Rng>(config: JointConfig, embeddings: EmbeddingTable, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = BiLstm::new(&mut store, embeddings.dim(), config.hidden, config.layers, config.init, rng)?;
        let width = encoder.output_width();
        let attention = config
            .attention
            .map(|kind| {
                Attention::new(
                    &mut store,
                    kind,
                    width,
                    config.scorer_width,
                    config.projection_width,
                    config.steps,
                    config.init,
                    rng,
                )
            })
            .transpose()?;
        let input = attention.as_ref().map_or(width, Attention::output_width);
        let scorer = Scorer::new(&mut store, input, config.scorer_width, config.init, rng)?;
        Ok(JointModel {
            config,
            embeddings,
            store,
            encoder,
            attention,
            scorer,
        })
    }

    /// Log-probabilities `[N+1, (N+1) * 4]`. Dropout is applied when `rng`
    /// is given.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, doc: &AdDocument, mut rng: Option<&mut R>) -> Result<Var> {
        let rate = self.config.dropout;
        let x = self
            .embeddings
            .embed(tape, doc, rng.as_mut().map(|r| (rate, &mut **r)))?;
        let h = self
            .encoder
            .forward(tape, &self.store, x, rng.as_mut().map(|r| (rate, &mut **r)))?;
        let h = match &self.attention {
            Some(a) => a.augment(tape, &self.store, h)?,
            None => h,
        };
        self.scorer.log_probs(tape, &self.store, h)
    }

    pub fn distribution(&self, doc: &AdDocument) -> Result<JointDistribution> {
        let mut tape = Tape::new();
        let lp = self.forward::<ChaCha8Rng>(&mut tape, doc, None)?;
        JointDistribution::from_log_probs(tape.value(lp))
    }

    pub fn predict(&self, doc: &AdDocument) -> Result<Prediction> {
        let dist = self.distribution(doc)?;
        let greedy = greedy_decode(&dist);
        let assignment = enforce_tree(&dist, &greedy)?;
        let tree = decode_heads_to_tree_lenient(doc, &assignment)?;
        Ok(Prediction {
            greedy,
            assignment,
            tree,
        })
    }

    /// One Adam update on a single document; returns the loss before the
    /// update.
    pub fn train_step<R: Rng>(
        &mut self,
        doc: &AdDocument,
        gold: &TokenHeadAssignment,
        adam: &mut AdamState,
        rng: &mut R,
    ) -> Result<f64> {
        self.store.zero_grad();
        let value = self.accumulate_gradients(doc, gold, rng)?;
        adam.step(&mut self.store)?;
        Ok(value)
    }

    /// Adds the loss gradient of one document to the stored gradients and
    /// returns the loss.
    pub fn accumulate_gradients<R: Rng>(
        &mut self,
        doc: &AdDocument,
        gold: &TokenHeadAssignment,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = self.forward(&mut tape, doc, Some(rng))?;
        let loss = joint::loss(&mut tape, lp, gold)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        tape.accumulate_into(&mut self.store);
        Ok(value)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut manifest = Manifest::new(self.config.model_kind(), seed);
        if let serde_json::Value::Object(map) = serde_json::to_value(self.config)? {
            manifest.hyperparameters.extend(map);
        }
        manifest.extra = json!({ "vocab": self.embeddings.vocab.tokens() });
        let mut ckpt = Checkpoint::new(manifest);
        ckpt.push("embeddings", self.embeddings.matrix.clone());
        for (_, p) in self.store.iter() {
            ckpt.push(p.name.clone(), p.value.clone());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        let config: JointConfig =
            serde_json::from_value(serde_json::Value::Object(m.hyperparameters.clone().into_iter().collect()))
                .map_err(|e| Error::Checkpoint(format!("joint hyperparameters: {e}")))?;
        if config.model_kind() != m.model_kind {
            return Err(Error::Checkpoint(format!(
                "model kind {:?} does not match its hyperparameters",
                m.model_kind
            )));
        }
        let tokens: Vec<String> = serde_json::from_value(
            m.extra
                .get("vocab")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing vocabulary".into()))?,
        )?;
        let vocab = Vocabulary::new(tokens.into_iter().skip(1));
        let matrix = ckpt
            .tensor("embeddings")
            .ok_or_else(|| Error::Checkpoint("missing embeddings".into()))?
            .clone();
        if matrix.shape().len() != 2 || matrix.shape()[0] != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "embedding matrix {:?} does not match a vocabulary of {}",
                matrix.shape(),
                vocab.len()
            )));
        }
        let embeddings = EmbeddingTable { vocab, matrix };
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        let mut model = Self::build(config, embeddings, &mut rng)?;
        model
            .store
            .load_values(ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }
}

/// Tensor names of a checkpoint's trainable parameters.
pub fn parameter_names(ckpt: &Checkpoint) -> Vec<&str> {
    ckpt.tensors
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| *n != "embeddings")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::example_ad;
    use proptree_tensor::AdamConfig;

    fn tiny() -> JointConfig {
        JointConfig {
            hidden: 6,
            scorer_width: 5,
            projection_width: 4,
            dropout: 0.0,
            ..JointConfig::default()
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.scorer_width = 12;
        assert!(c.validate().is_err());
        c = tiny();
        c.layers = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn distribution_is_normalized() {
        let (doc, _) = example_ad();
        let m = JointModel::new(tiny(), Vocabulary::from_documents([&doc]), None, 3).unwrap();
        let dist = m.distribution(&doc).unwrap();
        for i in 1..=doc.len() {
            assert!((dist.mass(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_for_every_kind() {
        let (doc, _) = example_ad();
        let mut configs = vec![tiny(), JointConfig { layers: 2, ..tiny() }];
        for kind in AttentionKind::ALL {
            configs.push(JointConfig {
                attention: Some(kind),
                steps: 2,
                ..tiny()
            });
        }
        for c in configs {
            let m = JointModel::new(c, Vocabulary::from_documents([&doc]), None, 9).unwrap();
            let mut buf = Vec::new();
            m.to_checkpoint(9).unwrap().write_to(&mut buf).unwrap();
            let back = JointModel::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
            let a = m.distribution(&doc).unwrap();
            let b = back.distribution(&doc).unwrap();
            assert_eq!(a, b, "{:?}", c.attention);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (doc, tree) = example_ad();
        let gold = crate::data::encode_tree_to_heads(&doc, &tree).unwrap();
        let mut m = JointModel::new(tiny(), Vocabulary::from_documents([&doc]), None, 1).unwrap();
        let mut adam = AdamState::for_store(AdamConfig::with_learning_rate(0.01), &m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = m.train_step(&doc, &gold, &mut adam, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..100 {
            last = m.train_step(&doc, &gold, &mut adam, &mut rng).unwrap();
        }
        assert!(last < first * 0.9, "{first} -> {last}");
    }
}
