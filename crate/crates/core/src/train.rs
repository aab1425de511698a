//! Experiment configuration, the training loop with early stopping, and
//! model-agnostic evaluation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use proptree_tensor::{AdamConfig, AdamState, Checkpoint};

use crate::attention::AttentionKind;
use crate::data::{encode_tree_to_heads, AdDocument, LabeledDocument, PropertyTree, TokenHeadAssignment};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{aggregate, score_edges, MetricsReport};
use crate::model::{JointConfig, JointModel};
use crate::pipeline::{CrfTrainConfig, EdgeModelKind, EdgeTrainConfig, Pipeline, PipelineConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "joint+attention")]
    JointAttention,
    #[serde(rename = "joint-2layer")]
    Joint2Layer,
    #[serde(rename = "pipeline-crf+ltm")]
    PipelineLtm,
    #[serde(rename = "pipeline-crf+mtt")]
    PipelineMtt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Joint,
        ModelKind::JointAttention,
        ModelKind::Joint2Layer,
        ModelKind::PipelineLtm,
        ModelKind::PipelineMtt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Joint => "joint",
            ModelKind::JointAttention => "joint+attention",
            ModelKind::Joint2Layer => "joint-2layer",
            ModelKind::PipelineLtm => "pipeline-crf+ltm",
            ModelKind::PipelineMtt => "pipeline-crf+mtt",
        }
    }

    pub fn is_pipeline(self) -> bool {
        matches!(self, ModelKind::PipelineLtm | ModelKind::PipelineMtt)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ltm" => return Ok(ModelKind::PipelineLtm),
            "mtt" => return Ok(ModelKind::PipelineMtt),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// LSTM hidden width `d` per direction.
    pub hidden: usize,
    pub scorer_width: usize,
    pub projection_width: usize,
    pub attention: AttentionKind,
    pub steps: usize,
    pub learning_rate: f64,
    /// `None` picks 0.5 for one layer and 0.3 for two.
    pub dropout: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub init: f64,
    pub lambda_crf: f64,
    pub c: f64,
    pub pipeline_epochs: usize,
    pub pipeline_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Joint,
            hidden: 128,
            scorer_width: 32,
            projection_width: 32,
            attention: AttentionKind::Edge,
            steps: 3,
            learning_rate: 1e-3,
            dropout: None,
            max_epochs: 150,
            patience: 10,
            seed: 0,
            batch_size: 1,
            init: 0.05,
            lambda_crf: 10.0,
            c: 1.0,
            pipeline_epochs: 30,
            pipeline_learning_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn layers(&self) -> usize {
        if self.model == ModelKind::Joint2Layer {
            2
        } else {
            1
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
            .unwrap_or(if self.layers() == 2 { 0.3 } else { 0.5 })
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            hidden: self.hidden,
            scorer_width: self.scorer_width,
            projection_width: self.projection_width,
            layers: self.layers(),
            attention: (self.model == ModelKind::JointAttention).then_some(self.attention),
            steps: self.steps,
            dropout: self.dropout_rate(),
            init: self.init,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            crf: CrfTrainConfig {
                lambda: self.lambda_crf,
                epochs: self.pipeline_epochs,
                learning_rate: self.pipeline_learning_rate,
                seed: self.seed,
            },
            edges: EdgeTrainConfig {
                c: self.c,
                epochs: self.pipeline_epochs,
                learning_rate: self.pipeline_learning_rate,
                seed: self.seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("scorer_width", self.scorer_width),
            ("projection_width", self.projection_width),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("pipeline_epochs", self.pipeline_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("init", self.init),
            ("lambda_crf", self.lambda_crf),
            ("c", self.c),
            ("pipeline_learning_rate", self.pipeline_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.model.is_pipeline() {
            Ok(())
        } else {
            self.joint_config().validate()
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(*self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown setting {key:?}")));
        }
        let parsed = serde_json::from_str::<serde_json::Value>(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Outcome of one early-stopping observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation score has not improved for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if self.best.is_none_or(|(_, b)| score > b) {
            self.best = Some((epoch, score));
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// `(epoch, score)` of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_f1(&self) -> f64 {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(0.0, |r| r.val_f1)
    }

    /// `(epoch, loss, val_f1)` triples, without wall time.
    pub fn trajectory(&self) -> Vec<(usize, f64, f64)> {
        self.records.iter().map(|r| (r.epoch, r.loss, r.val_f1)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,val_f1,seconds,best")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.6},{:.4},{:.3},{}",
                r.epoch,
                r.loss,
                r.val_f1,
                r.seconds,
                u8::from(r.epoch == self.best_epoch)
            )?;
        }
        Ok(())
    }
}

/// Either model family behind one interface.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Joint(JointModel),
    Pipeline(Pipeline),
}

/// Tree-enforced output of either family for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentPrediction {
    pub assignment: TokenHeadAssignment,
    pub tree: PropertyTree,
    pub greedy_is_tree: bool,
    /// Joint models only.
    pub greedy: Option<TokenHeadAssignment>,
}

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainedModel::Joint(m) => m.config.model_kind(),
            TrainedModel::Pipeline(p) => p.edges.kind().model_kind(),
        }
    }

    pub fn predict(&self, doc: &AdDocument) -> Result<DocumentPrediction> {
        match self {
            TrainedModel::Joint(m) => {
                let p = m.predict(doc)?;
                Ok(DocumentPrediction {
                    greedy_is_tree: p.greedy_is_tree(),
                    assignment: p.assignment,
                    tree: p.tree,
                    greedy: Some(p.greedy),
                })
            }
            TrainedModel::Pipeline(p) => {
                let (tree, local) = p.predict_full(doc)?;
                Ok(DocumentPrediction {
                    assignment: encode_tree_to_heads(doc, &tree)?,
                    tree,
                    greedy_is_tree: local,
                    greedy: None,
                })
            }
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        match self {
            TrainedModel::Joint(m) => m.to_checkpoint(seed),
            TrainedModel::Pipeline(p) => p.to_checkpoint(seed),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: ModelKind = ckpt.manifest.model_kind.parse()?;
        if kind.is_pipeline() {
            Ok(TrainedModel::Pipeline(Pipeline::from_checkpoint(ckpt)?))
        } else {
            Ok(TrainedModel::Joint(JointModel::from_checkpoint(ckpt)?))
        }
    }
}

/// Predictions for `docs` in input order, spread over up to `threads`
/// worker threads.
pub fn predict_all(model: &TrainedModel, docs: &[AdDocument], threads: usize) -> Result<Vec<DocumentPrediction>> {
    let threads = threads.clamp(1, docs.len().max(1));
    if threads == 1 {
        return docs.iter().map(|d| model.predict(d)).collect();
    }
    let chunk = docs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = docs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|d| model.predict(d)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(docs.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Post-Edmonds edge scores with the greedy tree rate.
pub fn evaluate(model: &TrainedModel, docs: &[LabeledDocument]) -> Result<MetricsReport> {
    evaluate_with_threads(model, docs, 1)
}

pub fn evaluate_with_threads(model: &TrainedModel, docs: &[LabeledDocument], threads: usize) -> Result<MetricsReport> {
    let inputs: Vec<AdDocument> = docs.iter().map(|d| d.doc.clone()).collect();
    let predictions = predict_all(model, &inputs, threads)?;
    let mut counts = Vec::with_capacity(docs.len());
    let mut trees = Vec::with_capacity(docs.len());
    for (d, p) in docs.iter().zip(&predictions) {
        let gold = encode_tree_to_heads(&d.doc, &d.tree)?;
        counts.push(score_edges(&p.assignment, &gold)?);
        trees.push(p.greedy_is_tree);
    }
    aggregate(&counts, &trees)
}

/// Report that scores the gold assignments against themselves.
pub fn evaluate_gold(docs: &[LabeledDocument]) -> Result<MetricsReport> {
    let mut counts = Vec::with_capacity(docs.len());
    for d in docs {
        let gold = encode_tree_to_heads(&d.doc, &d.tree)?;
        counts.push(score_edges(&gold, &gold)?);
    }
    aggregate(&counts, &vec![true; docs.len()])
}

/// Optional pre-trained vectors for the joint model.
pub type Pretrained<'a> = Option<&'a [(String, Vec<f64>)]>;

/// Trains a joint model document by document with Adam, validating after
/// every epoch and keeping the parameters of the best epoch. An empty
/// validation set falls back to the training set.
pub fn train_joint(
    config: &TrainConfig,
    train: &[LabeledDocument],
    validation: &[LabeledDocument],
    pretrained: Pretrained<'_>,
) -> Result<(JointModel, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let validation = if validation.is_empty() { train } else { validation };
    let golds = train
        .iter()
        .map(|d| encode_tree_to_heads(&d.doc, &d.tree))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_documents(train.iter().map(|d| &d.doc));
    let mut model = JointModel::new(config.joint_config(), vocab, pretrained, config.seed)?;
    let mut adam = AdamState::for_store(AdamConfig::with_learning_rate(config.learning_rate), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_store = model.store.clone();
    let mut log = TrainLog::default();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grad();
            for &d in batch {
                total += model.accumulate_gradients(&train[d].doc, &golds[d], &mut rng)?;
            }
            adam.step(&mut model.store)?;
        }
        let report = evaluate(&TrainedModel::Joint(model.clone()), validation)?;
        log.records.push(EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            val_f1: report.overall.f1,
            seconds: started.elapsed().as_secs_f64(),
        });
        match stopper.observe(epoch, report.overall.f1) {
            StopDecision::Improved => {
                best_store = model.store.clone();
                log.best_epoch = epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.store = best_store;
    Ok((model, log))
}

/// Trains the CRF and edge model; the log holds a single record with the
/// validation score.
pub fn train_pipeline(
    config: &TrainConfig,
    train: &[LabeledDocument],
    validation: &[LabeledDocument],
) -> Result<(Pipeline, TrainLog)> {
    config.validate()?;
    let kind = match config.model {
        ModelKind::PipelineLtm => EdgeModelKind::Ltm,
        ModelKind::PipelineMtt => EdgeModelKind::Mtt,
        other => return Err(Error::Config(format!("{other} is not a pipeline model"))),
    };
    let started = Instant::now();
    let pipeline = Pipeline::train(train, kind, &config.pipeline_config())?;
    let validation = if validation.is_empty() { train } else { validation };
    let model = TrainedModel::Pipeline(pipeline);
    let report = evaluate(&model, validation)?;
    let TrainedModel::Pipeline(pipeline) = model else { unreachable!() };
    let log = TrainLog {
        records: vec![EpochRecord {
            epoch: config.pipeline_epochs,
            loss: f64::NAN,
            val_f1: report.overall.f1,
            seconds: started.elapsed().as_secs_f64(),
        }],
        best_epoch: config.pipeline_epochs,
    };
    Ok((pipeline, log))
}

/// Trains whichever model `config` names.
pub fn train(
    config: &TrainConfig,
    train: &[LabeledDocument],
    validation: &[LabeledDocument],
    pretrained: Pretrained<'_>,
) -> Result<(TrainedModel, TrainLog)> {
    if config.model.is_pipeline() {
        let (p, log) = train_pipeline(config, train, validation)?;
        Ok((TrainedModel::Pipeline(p), log))
    } else {
        let (m, log) = train_joint(config, train, validation, pretrained)?;
        Ok((TrainedModel::Joint(m), log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_corpus, SynthConfig};

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(2);
        let decisions: Vec<_> = [50.0, 60.0, 59.0, 58.0]
            .iter()
            .enumerate()
            .map(|(e, &f)| s.observe(e + 1, f))
            .collect();
        assert_eq!(
            decisions,
            [StopDecision::Improved, StopDecision::Improved, StopDecision::Continue, StopDecision::Stop]
        );
        assert_eq!(s.best(), Some((2, 60.0)));
    }

    #[test]
    fn model_kind_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), k.as_str());
        }
        assert!("lstm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::default();
        c.apply_overrides("# comment\nhidden = 16\nattention=bilinear\nmodel=joint-2layer\ndropout=0.1\n")
            .unwrap();
        assert_eq!(c.hidden, 16);
        assert_eq!(c.attention, AttentionKind::Bilinear);
        assert_eq!(c.layers(), 2);
        assert_eq!(c.dropout_rate(), 0.1);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("hidden", "many").is_err());
        assert!(matches!(c.apply_overrides("hidden"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn default_dropout_follows_depth() {
        let mut c = TrainConfig::default();
        assert_eq!(c.dropout_rate(), 0.5);
        c.model = ModelKind::Joint2Layer;
        assert_eq!(c.dropout_rate(), 0.3);
        assert_eq!(c.joint_config().layers, 2);
    }

    #[test]
    fn empty_training_split_rejected() {
        let c = TrainConfig::default();
        assert!(matches!(train(&c, &[], &[], None), Err(Error::Empty(_))));
    }

    #[test]
    fn gold_self_evaluation_is_perfect() {
        let corpus = generate_corpus(5, &SynthConfig::default(), 2);
        let r = evaluate_gold(&corpus).unwrap();
        assert_eq!(r.overall.f1, 100.0);
        assert_eq!(r.segment.f1, 100.0);
        assert_eq!(r.part_of.f1, 100.0);
    }

    #[test]
    fn short_run_is_deterministic_and_keeps_best() {
        let corpus = generate_corpus(6, &SynthConfig::simple(), 4);
        let config = TrainConfig {
            hidden: 8,
            scorer_width: 8,
            max_epochs: 3,
            patience: 5,
            learning_rate: 0.01,
            seed: 7,
            ..TrainConfig::default()
        };
        let (a, log_a) = train_joint(&config, &corpus[..4], &corpus[4..], None).unwrap();
        let (_, log_b) = train_joint(&config, &corpus[..4], &corpus[4..], None).unwrap();
        assert_eq!(log_a.trajectory(), log_b.trajectory());
        let best = log_a.records.iter().map(|r| r.val_f1).fold(f64::MIN, f64::max);
        assert_eq!(log_a.best_f1(), best);
        let again = evaluate(&TrainedModel::Joint(a), &corpus[4..]).unwrap();
        assert!((again.overall.f1 - best).abs() < 1e-9);
        let mut csv = Vec::new();
        log_a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), log_a.records.len() + 1);
    }
}
