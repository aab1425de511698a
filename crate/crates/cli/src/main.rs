use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use proptree::attention::AttentionKind;
use proptree::data::synthetic::{generate_corpus, SynthConfig};
use proptree::data::{
    document_json, load_corpus, load_documents, split_corpus, write_corpus, ColumnImporter, CorpusImporter,
    JsonlImporter,
};
use proptree::encoder::load_embeddings;
use proptree::eval::MetricsReport;
use proptree::selftest;
use proptree::train::{evaluate_gold, evaluate_with_threads, predict_all, train, ModelKind, TrainConfig, TrainedModel};
use proptree::Error;
use proptree_tensor::Checkpoint;

#[derive(Parser)]
#[command(name = "proptree", version, about = "Parse real-estate ads into property trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Jsonl,
    Columns,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Simple,
    Ambiguous,
}

#[derive(Subcommand)]
enum Command {
    /// Import a dataset into canonical JSON Lines.
    Convert {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "columns")]
        format: InputFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded 70/15/15 split into train, validation and test files.
    Split {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic annotated corpus.
    Generate {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, value_enum, default_value = "default")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, the per-epoch log and
    /// validation metrics into the output directory.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        attention: Option<AttentionKind>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// File of key=value overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled file.
    Evaluate {
        input: PathBuf,
        #[arg(long, required_unless_present = "gold")]
        checkpoint: Option<PathBuf>,
        /// Score the gold annotations against themselves.
        #[arg(long)]
        gold: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
    },
    /// Predict trees for documents; one JSON object per line.
    Predict {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
    },
    /// Run the oracle and gradient suites.
    Selftest {
        #[arg(long)]
        json: bool,
    },
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            fail("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            fail(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn fail(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn run(command: Command) -> proptree::Result<ExitCode> {
    match command {
        Command::Convert { input, format, out } => {
            let importer: Box<dyn CorpusImporter> = match format {
                InputFormat::Jsonl => Box::new(JsonlImporter),
                InputFormat::Columns => Box::new(ColumnImporter),
            };
            let docs = importer.import(&mut BufReader::new(File::open(&input)?))?;
            let mut w = create(&out)?;
            let mut labeled = 0;
            for (doc, tree) in &docs {
                labeled += usize::from(tree.is_some());
                writeln!(w, "{}", document_json(doc, tree.as_ref())?)?;
            }
            w.flush()?;
            println!("{} documents ({labeled} annotated) written to {}", docs.len(), out.display());
        }
        Command::Split { input, seed, out } => {
            let corpus = load_corpus(&input)?;
            let split = split_corpus(&corpus, seed);
            fs::create_dir_all(&out)?;
            for (name, docs) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
                write_corpus(create(&out.join(format!("{name}.jsonl")))?, docs)?;
                println!("{name}: {} documents", docs.len());
            }
        }
        Command::Generate { count, profile, seed, out } => {
            let config = match profile {
                Profile::Default => SynthConfig::default(),
                Profile::Simple => SynthConfig::simple(),
                Profile::Ambiguous => SynthConfig::ambiguous(),
            };
            write_corpus(create(&out)?, &generate_corpus(count, &config, seed))?;
            println!("{count} documents written to {}", out.display());
        }
        Command::Train {
            train: train_path,
            validation,
            model,
            attention,
            steps,
            seed,
            embeddings,
            config,
            out,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = config {
                cfg.apply_overrides(&fs::read_to_string(path)?)?;
            }
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(a) = attention {
                cfg.attention = a;
                if model.is_none() && !cfg.model.is_pipeline() {
                    cfg.model = ModelKind::JointAttention;
                }
            }
            if let Some(t) = steps {
                cfg.steps = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let train_docs = load_corpus(&train_path)?;
            let val_docs = match validation {
                Some(p) => load_corpus(p)?,
                None => Vec::new(),
            };
            let vectors = embeddings.map(load_embeddings).transpose()?;
            let (trained, log) = train(&cfg, &train_docs, &val_docs, vectors.as_deref())?;
            fs::create_dir_all(&out)?;
            trained.to_checkpoint(cfg.seed)?.save(out.join("model.ckpt"))?;
            log.write_csv(create(&out.join("train_log.csv"))?)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let eval_docs = if val_docs.is_empty() { &train_docs } else { &val_docs };
            let report = evaluate_with_threads(&trained, eval_docs, default_threads())?;
            write_report(&report, &out.join("metrics.json"))?;
            println!("{}", report.to_table(trained.kind_name()));
            println!(
                "best epoch {} of {}; outputs in {}",
                log.best_epoch,
                log.records.len(),
                out.display()
            );
        }
        Command::Evaluate {
            input,
            checkpoint,
            gold,
            out,
            threads,
        } => {
            let docs = load_corpus(&input)?;
            let (name, report) = if gold {
                ("gold".to_string(), evaluate_gold(&docs)?)
            } else {
                let model = load_model(checkpoint.as_deref().expect("required by clap"))?;
                (model.kind_name().to_string(), evaluate_with_threads(&model, &docs, threads)?)
            };
            println!("{}", report.to_table(&name));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_report(&report, &dir.join("metrics.json"))?;
            }
        }
        Command::Predict {
            input,
            checkpoint,
            out,
            threads,
        } => {
            let model = load_model(&checkpoint)?;
            let docs: Vec<_> = load_documents(&input)?.into_iter().map(|(d, _)| d).collect();
            let predictions = predict_all(&model, &docs, threads)?;
            let mut w: Box<dyn Write> = match &out {
                Some(p) => Box::new(create(p)?),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            for (doc, p) in docs.iter().zip(&predictions) {
                let mut record = document_json(doc, Some(&p.tree))?;
                record["heads"] = json!(p.assignment.heads());
                record["labels"] = json!(p.assignment.labels().iter().map(|l| l.as_str()).collect::<Vec<_>>());
                record["greedy_is_tree"] = json!(p.greedy_is_tree);
                writeln!(w, "{record}")?;
            }
            w.flush()?;
        }
        Command::Selftest { json } => {
            let results = selftest::run_all();
            for r in &results {
                if json {
                    println!("{}", serde_json::to_string(r)?);
                } else {
                    let tag = if r.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {} [{:.2}s] {}", r.name, r.seconds, r.detail);
                }
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn create(path: &Path) -> proptree::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_model(path: &Path) -> proptree::Result<TrainedModel> {
    let ckpt = Checkpoint::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    TrainedModel::from_checkpoint(&ckpt)
}

fn write_report(report: &MetricsReport, path: &Path) -> proptree::Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
